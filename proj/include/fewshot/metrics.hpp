#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewshot/errors.hpp"

// Per-episode metric records, 95% confidence intervals, and the JSONL / CSV
// result writers.

namespace fewshot {

struct EpisodeMetrics {
    std::int64_t episode_id = 0;
    std::uint64_t seed = 0;
    double acc_before = 0;
    std::optional<double> acc_after;
    double loss_after = 0;
};

struct SweepCell {
    double alpha = 0;
    std::int64_t steps = 0;
    double mean_before = 0;
    double mean_after = 0;
    double delta = 0;
};

struct ConfidenceInterval {
    double mean = 0;
    double half_width = 0;
};

/// Normal-approximation 95% interval: mean +/- 1.96 * s / sqrt(N) with the
/// sample (N-1) standard deviation.
inline ConfidenceInterval confidence_interval(const std::vector<double>& values) {
    std::size_t n = values.size();
    if (n < 2)
        throw ContractError("confidence_interval needs at least 2 values, got " + std::to_string(n));
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0;
    for (double v : values) ss += (v - mean) * (v - mean);
    double s = std::sqrt(ss / static_cast<double>(n - 1));
    return {mean, 1.96 * s / std::sqrt(static_cast<double>(n))};
}

struct SummaryRow {
    std::string model;
    std::int64_t episode_count = 0;
    double mean_acc_before = 0;
    double ci_before = 0;
    std::optional<double> mean_acc_after;
    std::optional<double> ci_after;
};

/// Folds an episode stream into one table row. Either every episode carries
/// acc_after or none does.
inline SummaryRow summarize(const std::string& model, const std::vector<EpisodeMetrics>& metrics) {
    if (metrics.size() < 2)
        throw ContractError("summary needs at least 2 episodes, got " + std::to_string(metrics.size()));
    std::vector<double> before, after;
    before.reserve(metrics.size());
    for (const auto& m : metrics) {
        before.push_back(m.acc_before);
        if (m.acc_after) after.push_back(*m.acc_after);
    }
    if (!after.empty() && after.size() != before.size())
        throw ContractError("summary: " + std::to_string(after.size()) + " of " +
                            std::to_string(before.size()) + " episodes carry acc_after");
    SummaryRow row;
    row.model = model;
    row.episode_count = static_cast<std::int64_t>(metrics.size());
    auto ci = confidence_interval(before);
    row.mean_acc_before = ci.mean;
    row.ci_before = ci.half_width;
    if (!after.empty()) {
        auto ca = confidence_interval(after);
        row.mean_acc_after = ca.mean;
        row.ci_after = ca.half_width;
    }
    return row;
}

inline void write_episode_records(std::ostream& out, const std::vector<EpisodeMetrics>& metrics) {
    for (const auto& m : metrics) {
        nlohmann::json j{{"type", "episode"},
                         {"episode_id", m.episode_id},
                         {"seed", m.seed},
                         {"acc_before", m.acc_before},
                         {"loss_after", m.loss_after}};
        j["acc_after"] = m.acc_after ? nlohmann::json(*m.acc_after) : nlohmann::json(nullptr);
        out << j.dump() << "\n";
    }
}

inline void write_summary_record(std::ostream& out, const SummaryRow& row) {
    nlohmann::json j{{"type", "summary"},
                     {"model", row.model},
                     {"episode_count", row.episode_count},
                     {"mean_acc_before", row.mean_acc_before},
                     {"ci_before", row.ci_before}};
    j["mean_acc_after"] = row.mean_acc_after ? nlohmann::json(*row.mean_acc_after) : nlohmann::json(nullptr);
    j["ci_after"] = row.ci_after ? nlohmann::json(*row.ci_after) : nlohmann::json(nullptr);
    out << j.dump() << "\n";
}

/// Episode records followed by one summary record, line-delimited JSON.
inline void write_metrics_jsonl(const std::string& path, const std::vector<EpisodeMetrics>& metrics,
                                const SummaryRow& summary) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot open metrics file for writing: " + path);
    write_episode_records(out, metrics);
    write_summary_record(out, summary);
}

/// Accuracy table, one row per model, columns without / with fine-tuning.
/// Cells for the fine-tuned side stay empty when a row has no acc_after.
inline void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot open summary file for writing: " + path);
    out << "model,episodes,acc_no_finetune,ci95_no_finetune,acc_finetune,ci95_finetune\n";
    out.precision(6);
    out << std::fixed;
    for (const auto& r : rows) {
        out << r.model << "," << r.episode_count << "," << r.mean_acc_before << "," << r.ci_before << ",";
        if (r.mean_acc_after) out << *r.mean_acc_after;
        out << ",";
        if (r.ci_after) out << *r.ci_after;
        out << "\n";
    }
}

/// The learning-rate x step-count grid as a flat table.
inline void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& grid) {
    std::ofstream out(path);
    if (!out) throw IngestionError("cannot open sweep file for writing: " + path);
    out << "alpha,steps,acc_no_finetune,acc_finetune,delta\n";
    out.precision(6);
    for (const auto& c : grid)
        out << c.alpha << "," << c.steps << "," << std::fixed << c.mean_before << "," << c.mean_after
            << "," << c.delta << std::defaultfloat << "\n";
}

} // namespace fewshot
