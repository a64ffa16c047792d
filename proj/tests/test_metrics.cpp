#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "fewshot/metrics.hpp"
#include "fewshot/rng.hpp"
#include "helpers.hpp"

using fewshot::ContractError;
using fewshot::EpisodeMetrics;
using fewshot::Rng;
using fewshot::SummaryRow;

namespace {

// Independent oracle: Welford's online algorithm, a different recurrence
// than the two-pass sum in the implementation.
std::pair<double, double> welford_ci(const std::vector<double>& v) {
    double mean = 0, m2 = 0;
    std::size_t n = 0;
    for (double x : v) {
        ++n;
        double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    double s = std::sqrt(m2 / static_cast<double>(n - 1));
    return {mean, 1.96 * s / std::sqrt(static_cast<double>(n))};
}

std::vector<EpisodeMetrics> toy_metrics(bool with_after) {
    std::vector<EpisodeMetrics> ms;
    for (int i = 0; i < 4; ++i) {
        EpisodeMetrics m;
        m.episode_id = i;
        m.seed = 100 + static_cast<std::uint64_t>(i);
        m.acc_before = 0.5 + 0.1 * i;
        if (with_after) m.acc_after = 0.6 + 0.1 * i;
        m.loss_after = 1.0 - 0.1 * i;
        ms.push_back(m);
    }
    return ms;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("zero variance gives a zero interval") {
    auto ci = fewshot::confidence_interval({0.8, 0.8, 0.8, 0.8});
    REQUIRE(ci.mean == 0.8);
    REQUIRE(ci.half_width == 0.0);
}

TEST_CASE("two-point interval hand case") {
    // {0, 1}: s = sqrt(0.5), half width 1.96 * sqrt(0.5) / sqrt(2) = 0.98.
    auto ci = fewshot::confidence_interval({0.0, 1.0});
    REQUIRE(std::abs(ci.mean - 0.5) < 1e-15);
    REQUIRE(std::abs(ci.half_width - 0.98) < 1e-12);
}

TEST_CASE("confidence interval needs two values") {
    REQUIRE_THROWS_AS(fewshot::confidence_interval({}), ContractError);
    REQUIRE_THROWS_AS(fewshot::confidence_interval({0.5}), ContractError);
}

TEST_CASE("bernoulli draws match the binomial approximation") {
    Rng rng(404);
    std::vector<double> accs;
    for (int i = 0; i < 400; ++i) accs.push_back(rng.uniform(0, 1) < 0.85 ? 1.0 : 0.0);
    auto ci = fewshot::confidence_interval(accs);
    // 1.96 * sqrt(0.85 * 0.15 / 400) = 0.0350
    REQUIRE(std::abs(ci.half_width - 0.035) < 0.005);
    REQUIRE(std::abs(ci.mean - 0.85) < 0.05);
}

TEST_CASE("confidence interval matches an independent oracle") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 2 + static_cast<std::size_t>(rng.below(49));
        std::vector<double> v(n);
        for (auto& x : v) x = rng.uniform(0, 1);
        auto ci = fewshot::confidence_interval(v);
        auto [mean, hw] = welford_ci(v);
        REQUIRE(std::abs(ci.mean - mean) < 1e-10);
        REQUIRE(std::abs(ci.half_width - hw) < 1e-10);
    }
}

TEST_CASE("summary row folds the episode stream") {
    auto ms = toy_metrics(true);
    auto row = fewshot::summarize("mc_proto", ms);
    REQUIRE(row.model == "mc_proto");
    REQUIRE(row.episode_count == 4);
    // Means equal the plain arithmetic means of the stream.
    REQUIRE(std::abs(row.mean_acc_before - 0.65) < 1e-12);
    REQUIRE(row.mean_acc_after.has_value());
    REQUIRE(std::abs(*row.mean_acc_after - 0.75) < 1e-12);
    REQUIRE(row.ci_before >= 0.0);
    REQUIRE(*row.ci_after >= 0.0);

    auto no_after = fewshot::summarize("protonet", toy_metrics(false));
    REQUIRE_FALSE(no_after.mean_acc_after.has_value());
    REQUIRE_FALSE(no_after.ci_after.has_value());
}

TEST_CASE("summary rejects short or mixed streams") {
    REQUIRE_THROWS_AS(fewshot::summarize("m", {toy_metrics(true)[0]}), ContractError);
    auto mixed = toy_metrics(true);
    mixed[2].acc_after.reset();
    REQUIRE_THROWS_AS(fewshot::summarize("m", mixed), ContractError);
}

TEST_CASE("episode records round-trip through json lines") {
    auto ms = toy_metrics(true);
    auto row = fewshot::summarize("maml_proto", ms);
    fewshot::write_metrics_jsonl("metrics_rt.jsonl", ms, row);

    std::ifstream in("metrics_rt.jsonl");
    std::string line;
    std::vector<nlohmann::json> records;
    while (std::getline(in, line)) records.push_back(nlohmann::json::parse(line));
    REQUIRE(records.size() == 5);
    for (int i = 0; i < 4; ++i) {
        REQUIRE(records[i]["type"] == "episode");
        REQUIRE(records[i]["episode_id"] == i);
        REQUIRE(records[i]["seed"] == 100 + i);
        REQUIRE(records[i]["acc_before"].get<double>() == ms[i].acc_before);
        REQUIRE(records[i]["acc_after"].get<double>() == *ms[i].acc_after);
        REQUIRE(records[i]["loss_after"].get<double>() == ms[i].loss_after);
    }
    REQUIRE(records[4]["type"] == "summary");
    REQUIRE(records[4]["model"] == "maml_proto");
    REQUIRE(records[4]["episode_count"] == 4);
    REQUIRE(records[4]["mean_acc_before"].get<double>() == row.mean_acc_before);
    std::remove("metrics_rt.jsonl");
}

TEST_CASE("missing adapted accuracy serializes as null") {
    auto ms = toy_metrics(false);
    auto row = fewshot::summarize("protonet", ms);
    fewshot::write_metrics_jsonl("metrics_null.jsonl", ms, row);
    std::ifstream in("metrics_null.jsonl");
    std::string line;
    std::vector<nlohmann::json> records;
    while (std::getline(in, line)) records.push_back(nlohmann::json::parse(line));
    REQUIRE(records[0]["acc_after"].is_null());
    REQUIRE(records[4]["mean_acc_after"].is_null());
    REQUIRE(records[4]["ci_after"].is_null());
    std::remove("metrics_null.jsonl");
}

TEST_CASE("metrics files are byte deterministic") {
    auto ms = toy_metrics(true);
    auto row = fewshot::summarize("mc_proto", ms);
    fewshot::write_metrics_jsonl("metrics_a.jsonl", ms, row);
    fewshot::write_metrics_jsonl("metrics_b.jsonl", ms, row);
    REQUIRE(slurp("metrics_a.jsonl") == slurp("metrics_b.jsonl"));
    std::remove("metrics_a.jsonl");
    std::remove("metrics_b.jsonl");
}

TEST_CASE("summary csv lays out both table columns") {
    SummaryRow with;
    with.model = "mc_proto";
    with.episode_count = 200;
    with.mean_acc_before = 0.75;
    with.ci_before = 0.0125;
    with.mean_acc_after = 0.8125;
    with.ci_after = 0.01;
    SummaryRow without;
    without.model = "protonet";
    without.episode_count = 200;
    without.mean_acc_before = 0.5;
    without.ci_before = 0.25;
    fewshot::write_summary_csv("summary_rt.csv", {with, without});
    auto text = slurp("summary_rt.csv");
    REQUIRE(text ==
            "model,episodes,acc_no_finetune,ci95_no_finetune,acc_finetune,ci95_finetune\n"
            "mc_proto,200,0.750000,0.012500,0.812500,0.010000\n"
            "protonet,200,0.500000,0.250000,,\n");
    std::remove("summary_rt.csv");
}

TEST_CASE("sweep csv carries one row per cell") {
    fewshot::SweepCell a{0.0001, 1, 0.5, 0.5625, 0.0625};
    fewshot::SweepCell b{0.2, 8, 0.5, 0.25, -0.25};
    fewshot::write_sweep_csv("sweep_rt.csv", {a, b});
    auto text = slurp("sweep_rt.csv");
    REQUIRE(text ==
            "alpha,steps,acc_no_finetune,acc_finetune,delta\n"
            "0.0001,1,0.500000,0.562500,0.062500\n"
            "0.2,8,0.500000,0.250000,-0.250000\n");
    std::remove("sweep_rt.csv");
}
