#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewshot/audio.hpp"
#include "fewshot/meta.hpp"

// Experiment configuration: a strict JSON schema with defaults, range checks
// and line-numbered errors. Unknown keys are rejected rather than ignored so
// typos cannot silently fall back to defaults.

namespace fewshot {

enum class DatasetKind { synthetic, manifest };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::synthetic;
    std::int64_t num_classes = 15; // synthetic
    std::int64_t per_class = 20;   // synthetic
    double noise_level = 0.1;      // synthetic
    std::string manifest;          // manifest
};

struct SplitSpec {
    bool by_file = false;
    std::string file;               // class-name lists, when by_file
    std::uint64_t seed = 0;         // shuffle seed otherwise
    std::int64_t train_classes = 10;
    std::int64_t test_classes = 5;
};

struct EncoderSpec {
    std::int64_t blocks = 4;
    std::int64_t channels = 64;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs";
    DatasetSpec dataset;
    MelConfig mel = mel_profile("desk");
    MetaConfig meta;
    SplitSpec split;
    EncoderSpec encoder{2, 8};
    std::int64_t train_episodes = 600;
    std::int64_t eval_episodes = 200;
};

namespace detail {

/// Maps schema keys back to 1-based line numbers in the source text.
class KeyLocator {
public:
    explicit KeyLocator(const std::string& text) : text_(text) {}

    std::string where(const std::string& key, const std::string& parent = "") const {
        std::size_t from = 0;
        if (!parent.empty()) {
            auto p = text_.find('"' + parent + '"');
            if (p != std::string::npos) from = p;
        }
        auto pos = text_.find('"' + key + '"', from);
        if (pos == std::string::npos) return "";
        std::size_t line = 1 + static_cast<std::size_t>(
                                   std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
        return "line " + std::to_string(line) + ": ";
    }

private:
    const std::string& text_;
};

inline void check_keys(const nlohmann::json& obj, const std::string& scope,
                       const std::vector<std::string>& allowed, const KeyLocator& loc) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const std::string& key = it.key();
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError(loc.where(key, scope) + "unknown key \"" + key + "\"" +
                              (scope.empty() ? "" : " in \"" + scope + "\""));
    }
}

inline std::int64_t get_int(const nlohmann::json& obj, const std::string& key, const std::string& scope,
                            const KeyLocator& loc, std::int64_t dflt) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_number_integer())
        throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be an integer");
    return obj[key].get<std::int64_t>();
}

inline double get_real(const nlohmann::json& obj, const std::string& key, const std::string& scope,
                       const KeyLocator& loc, double dflt) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_number())
        throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be a number");
    return obj[key].get<double>();
}

inline std::string get_str(const nlohmann::json& obj, const std::string& key, const std::string& scope,
                           const KeyLocator& loc, const std::string& dflt) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_string())
        throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be a string");
    return obj[key].get<std::string>();
}

inline bool get_bool(const nlohmann::json& obj, const std::string& key, const std::string& scope,
                     const KeyLocator& loc, bool dflt) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_boolean())
        throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be a boolean");
    return obj[key].get<bool>();
}

template <typename Enum>
Enum get_enum(const nlohmann::json& obj, const std::string& key, const std::string& scope,
              const KeyLocator& loc, Enum dflt,
              const std::vector<std::pair<std::string, Enum>>& table) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_string())
        throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be a string");
    auto s = obj[key].get<std::string>();
    for (const auto& [name, value] : table)
        if (name == s) return value;
    std::string options;
    for (const auto& [name, _] : table) options += (options.empty() ? "" : ", ") + name;
    throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be one of {" + options + "}, got \"" +
                      s + "\"");
}

inline void require_positive(std::int64_t v, const std::string& key, const std::string& scope,
                             const KeyLocator& loc) {
    if (v < 1)
        throw ConfigError(loc.where(key, scope) + "\"" + key + "\" must be at least 1, got " +
                          std::to_string(v));
}

} // namespace detail

inline const char* algorithm_name(Algorithm a) {
    switch (a) {
        case Algorithm::protonet: return "protonet";
        case Algorithm::maml_proto: return "maml_proto";
        default: return "mc_proto";
    }
}

/// Parses and fully validates a config document. `base_dir` anchors relative
/// paths (the config file's directory); referenced files must exist.
inline ExperimentConfig parse_config(const std::string& text, const std::string& base_dir = "") {
    namespace fs = std::filesystem;
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        std::size_t byte = e.byte > 0 ? e.byte - 1 : 0;
        byte = std::min(byte, text.size());
        std::size_t line = 1 + static_cast<std::size_t>(
                                   std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
        throw ConfigError("line " + std::to_string(line) + ": config is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");

    detail::KeyLocator loc(text);
    detail::check_keys(doc, "",
                       {"seed", "output_dir", "dataset", "mel", "meta", "split", "episodes", "encoder"},
                       loc);
    auto resolve = [&base_dir](const std::string& p) {
        if (p.empty() || p.front() == '/' || base_dir.empty()) return p;
        return base_dir + "/" + p;
    };

    ExperimentConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(detail::get_int(doc, "seed", "", loc, 0));
    cfg.output_dir = detail::get_str(doc, "output_dir", "", loc, cfg.output_dir);

    if (doc.contains("dataset")) {
        const auto& d = doc["dataset"];
        if (!d.is_object()) throw ConfigError(loc.where("dataset") + "\"dataset\" must be an object");
        detail::check_keys(d, "dataset", {"kind", "num_classes", "per_class", "noise_level", "manifest"},
                           loc);
        cfg.dataset.kind = detail::get_enum<DatasetKind>(
            d, "kind", "dataset", loc, cfg.dataset.kind,
            {{"synthetic", DatasetKind::synthetic}, {"manifest", DatasetKind::manifest}});
        cfg.dataset.num_classes = detail::get_int(d, "num_classes", "dataset", loc, cfg.dataset.num_classes);
        cfg.dataset.per_class = detail::get_int(d, "per_class", "dataset", loc, cfg.dataset.per_class);
        cfg.dataset.noise_level = detail::get_real(d, "noise_level", "dataset", loc, cfg.dataset.noise_level);
        cfg.dataset.manifest = detail::get_str(d, "manifest", "dataset", loc, cfg.dataset.manifest);
        if (cfg.dataset.kind == DatasetKind::synthetic) {
            if (cfg.dataset.num_classes < 2)
                throw ConfigError(loc.where("num_classes", "dataset") +
                                  "\"num_classes\" must be at least 2, got " +
                                  std::to_string(cfg.dataset.num_classes));
            detail::require_positive(cfg.dataset.per_class, "per_class", "dataset", loc);
            if (cfg.dataset.noise_level < 0)
                throw ConfigError(loc.where("noise_level", "dataset") +
                                  "\"noise_level\" must be non-negative");
            if (d.contains("manifest"))
                throw ConfigError(loc.where("manifest", "dataset") +
                                  "\"manifest\" only applies to dataset kind \"manifest\"");
        } else {
            if (cfg.dataset.manifest.empty())
                throw ConfigError(loc.where("kind", "dataset") +
                                  "dataset kind \"manifest\" requires a \"manifest\" path");
            cfg.dataset.manifest = resolve(cfg.dataset.manifest);
            if (!fs::exists(cfg.dataset.manifest))
                throw ConfigError(loc.where("manifest", "dataset") + "manifest does not exist: " +
                                  cfg.dataset.manifest);
        }
    }

    if (doc.contains("mel")) {
        const auto& m = doc["mel"];
        if (!m.is_object()) throw ConfigError(loc.where("mel") + "\"mel\" must be an object");
        detail::check_keys(
            m, "mel",
            {"profile", "sample_rate", "n_fft", "hop", "n_mels", "fmin", "fmax", "target_frames"}, loc);
        if (m.contains("profile")) {
            auto name = detail::get_str(m, "profile", "mel", loc, "");
            try {
                cfg.mel = mel_profile(name);
            } catch (const ConfigError& e) {
                throw ConfigError(loc.where("profile", "mel") + e.what());
            }
        }
        cfg.mel.sample_rate = detail::get_int(m, "sample_rate", "mel", loc, cfg.mel.sample_rate);
        cfg.mel.n_fft = detail::get_int(m, "n_fft", "mel", loc, cfg.mel.n_fft);
        cfg.mel.hop = detail::get_int(m, "hop", "mel", loc, cfg.mel.hop);
        cfg.mel.n_mels = detail::get_int(m, "n_mels", "mel", loc, cfg.mel.n_mels);
        cfg.mel.fmin = detail::get_real(m, "fmin", "mel", loc, cfg.mel.fmin);
        cfg.mel.fmax = detail::get_real(m, "fmax", "mel", loc, cfg.mel.fmax);
        cfg.mel.target_frames = detail::get_int(m, "target_frames", "mel", loc, cfg.mel.target_frames);
    }
    try {
        cfg.mel.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(loc.where("mel") + std::string(e.what()));
    }

    if (doc.contains("meta")) {
        const auto& m = doc["meta"];
        if (!m.is_object()) throw ConfigError(loc.where("meta") + "\"meta\" must be an object");
        detail::check_keys(m, "meta",
                           {"algorithm", "order", "distance", "meta_optimizer", "alpha", "beta", "steps",
                            "way", "shot", "query", "meta_batch", "test_time_curvature"},
                           loc);
        cfg.meta.algorithm = detail::get_enum<Algorithm>(m, "algorithm", "meta", loc, cfg.meta.algorithm,
                                                         {{"protonet", Algorithm::protonet},
                                                          {"maml_proto", Algorithm::maml_proto},
                                                          {"mc_proto", Algorithm::mc_proto}});
        cfg.meta.order = detail::get_enum<GradOrder>(
            m, "order", "meta", loc, cfg.meta.order,
            {{"first", GradOrder::first}, {"second", GradOrder::second}});
        cfg.meta.distance = detail::get_enum<Distance>(
            m, "distance", "meta", loc, cfg.meta.distance,
            {{"squared", Distance::squared}, {"unsquared", Distance::unsquared}});
        cfg.meta.meta_optimizer = detail::get_enum<MetaOptimizer>(
            m, "meta_optimizer", "meta", loc, cfg.meta.meta_optimizer,
            {{"sgd", MetaOptimizer::sgd}, {"adam", MetaOptimizer::adam}});
        cfg.meta.alpha = detail::get_real(m, "alpha", "meta", loc, cfg.meta.alpha);
        cfg.meta.beta = detail::get_real(m, "beta", "meta", loc, cfg.meta.beta);
        cfg.meta.steps = detail::get_int(m, "steps", "meta", loc, cfg.meta.steps);
        cfg.meta.way = detail::get_int(m, "way", "meta", loc, cfg.meta.way);
        cfg.meta.shot = detail::get_int(m, "shot", "meta", loc, cfg.meta.shot);
        cfg.meta.query = detail::get_int(m, "query", "meta", loc, cfg.meta.query);
        cfg.meta.meta_batch = detail::get_int(m, "meta_batch", "meta", loc, cfg.meta.meta_batch);
        cfg.meta.test_time_curvature =
            detail::get_bool(m, "test_time_curvature", "meta", loc, cfg.meta.test_time_curvature);
    }
    try {
        cfg.meta.validate(cfg.meta.algorithm != Algorithm::protonet);
    } catch (const ConfigError& e) {
        // Pin the offending key's line by matching its name in the message.
        for (const char* key : {"alpha", "beta", "steps", "way", "shot", "query", "meta_batch"}) {
            if (std::string(e.what()).find(key) != std::string::npos)
                throw ConfigError(loc.where(key, "meta") + std::string(e.what()));
        }
        throw ConfigError(loc.where("meta") + std::string(e.what()));
    }

    if (doc.contains("split")) {
        const auto& s = doc["split"];
        if (!s.is_object()) throw ConfigError(loc.where("split") + "\"split\" must be an object");
        detail::check_keys(s, "split", {"file", "seed", "train_classes", "test_classes"}, loc);
        cfg.split.file = detail::get_str(s, "file", "split", loc, "");
        cfg.split.by_file = !cfg.split.file.empty();
        cfg.split.seed = static_cast<std::uint64_t>(detail::get_int(s, "seed", "split", loc, 0));
        cfg.split.train_classes =
            detail::get_int(s, "train_classes", "split", loc, cfg.split.train_classes);
        cfg.split.test_classes = detail::get_int(s, "test_classes", "split", loc, cfg.split.test_classes);
        if (cfg.split.by_file && s.contains("seed"))
            throw ConfigError(loc.where("seed", "split") +
                              "\"split\" cannot set both \"file\" and \"seed\"");
        if (cfg.split.by_file) {
            cfg.split.file = resolve(cfg.split.file);
            if (!fs::exists(cfg.split.file))
                throw ConfigError(loc.where("file", "split") + "split file does not exist: " +
                                  cfg.split.file);
        }
    }
    detail::require_positive(cfg.split.train_classes, "train_classes", "split", loc);
    detail::require_positive(cfg.split.test_classes, "test_classes", "split", loc);
    if (cfg.dataset.kind == DatasetKind::synthetic && !cfg.split.by_file &&
        cfg.split.train_classes + cfg.split.test_classes > cfg.dataset.num_classes)
        throw ConfigError(loc.where("split") + "split needs " +
                          std::to_string(cfg.split.train_classes + cfg.split.test_classes) +
                          " classes but the synthetic dataset only has " +
                          std::to_string(cfg.dataset.num_classes));

    if (doc.contains("episodes")) {
        const auto& e = doc["episodes"];
        if (!e.is_object()) throw ConfigError(loc.where("episodes") + "\"episodes\" must be an object");
        detail::check_keys(e, "episodes", {"train", "eval"}, loc);
        cfg.train_episodes = detail::get_int(e, "train", "episodes", loc, cfg.train_episodes);
        cfg.eval_episodes = detail::get_int(e, "eval", "episodes", loc, cfg.eval_episodes);
        detail::require_positive(cfg.train_episodes, "train", "episodes", loc);
        if (cfg.eval_episodes < 2)
            throw ConfigError(loc.where("eval", "episodes") +
                              "\"eval\" must be at least 2 (confidence intervals), got " +
                              std::to_string(cfg.eval_episodes));
    }

    if (doc.contains("encoder")) {
        const auto& e = doc["encoder"];
        if (!e.is_object()) throw ConfigError(loc.where("encoder") + "\"encoder\" must be an object");
        detail::check_keys(e, "encoder", {"blocks", "channels"}, loc);
        cfg.encoder.blocks = detail::get_int(e, "blocks", "encoder", loc, cfg.encoder.blocks);
        cfg.encoder.channels = detail::get_int(e, "channels", "encoder", loc, cfg.encoder.channels);
        detail::require_positive(cfg.encoder.blocks, "blocks", "encoder", loc);
        detail::require_positive(cfg.encoder.channels, "channels", "encoder", loc);
    }
    std::int64_t min_side = std::int64_t(1) << cfg.encoder.blocks;
    if (cfg.mel.n_mels < min_side || cfg.mel.target_frames < min_side)
        throw ConfigError(loc.where("blocks", "encoder") + "encoder with " +
                          std::to_string(cfg.encoder.blocks) + " blocks needs inputs of at least " +
                          std::to_string(min_side) + "x" + std::to_string(min_side) + ", got " +
                          std::to_string(cfg.mel.n_mels) + "x" + std::to_string(cfg.mel.target_frames));

    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::string dir = std::filesystem::path(path).parent_path().string();
    try {
        return parse_config(text, dir);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

/// The fully resolved config as canonical JSON (alphabetical keys, two-space
/// indent) — the reproducibility block written next to every run's results.
inline std::string config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["dataset"]["kind"] = cfg.dataset.kind == DatasetKind::synthetic ? "synthetic" : "manifest";
    if (cfg.dataset.kind == DatasetKind::synthetic) {
        j["dataset"]["num_classes"] = cfg.dataset.num_classes;
        j["dataset"]["per_class"] = cfg.dataset.per_class;
        j["dataset"]["noise_level"] = cfg.dataset.noise_level;
    } else {
        j["dataset"]["manifest"] = cfg.dataset.manifest;
    }
    j["mel"]["sample_rate"] = cfg.mel.sample_rate;
    j["mel"]["n_fft"] = cfg.mel.n_fft;
    j["mel"]["hop"] = cfg.mel.hop;
    j["mel"]["n_mels"] = cfg.mel.n_mels;
    j["mel"]["fmin"] = cfg.mel.fmin;
    j["mel"]["fmax"] = cfg.mel.fmax;
    j["mel"]["target_frames"] = cfg.mel.target_frames;
    j["meta"]["algorithm"] = algorithm_name(cfg.meta.algorithm);
    j["meta"]["order"] = cfg.meta.order == GradOrder::second ? "second" : "first";
    j["meta"]["distance"] = cfg.meta.distance == Distance::squared ? "squared" : "unsquared";
    j["meta"]["meta_optimizer"] = cfg.meta.meta_optimizer == MetaOptimizer::adam ? "adam" : "sgd";
    j["meta"]["alpha"] = cfg.meta.alpha;
    j["meta"]["beta"] = cfg.meta.beta;
    j["meta"]["steps"] = cfg.meta.steps;
    j["meta"]["way"] = cfg.meta.way;
    j["meta"]["shot"] = cfg.meta.shot;
    j["meta"]["query"] = cfg.meta.query;
    j["meta"]["meta_batch"] = cfg.meta.meta_batch;
    j["meta"]["test_time_curvature"] = cfg.meta.test_time_curvature;
    if (cfg.split.by_file) {
        j["split"]["file"] = cfg.split.file;
    } else {
        j["split"]["seed"] = cfg.split.seed;
    }
    j["split"]["train_classes"] = cfg.split.train_classes;
    j["split"]["test_classes"] = cfg.split.test_classes;
    j["episodes"]["train"] = cfg.train_episodes;
    j["episodes"]["eval"] = cfg.eval_episodes;
    j["encoder"]["blocks"] = cfg.encoder.blocks;
    j["encoder"]["channels"] = cfg.encoder.channels;
    return j.dump(2) + "\n";
}

/// Architecture fingerprint for checkpoints: everything that determines
/// parameter shapes (encoder geometry, feature geometry, algorithm family).
inline std::uint64_t arch_fingerprint(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    };
    mix(static_cast<std::uint64_t>(cfg.encoder.blocks));
    mix(static_cast<std::uint64_t>(cfg.encoder.channels));
    mix(static_cast<std::uint64_t>(cfg.mel.n_mels));
    mix(static_cast<std::uint64_t>(cfg.mel.target_frames));
    mix(cfg.meta.algorithm == Algorithm::mc_proto ? 2u : 1u); // curvature present?
    return h;
}

// ---------------------------------------------------------------------------
// Class splits
// ---------------------------------------------------------------------------

/// Applies a SplitSpec to a dataset's class list. File-based specs load the
/// [train]/[val]/[test] split-file format and validate it against the
/// dataset; seed-based specs shuffle the ids and take the configured counts,
/// with any remainder going to [val].
inline ClassSplit resolve_split(const SplitSpec& spec, const std::vector<std::int64_t>& all) {
    if (spec.by_file) {
        auto s = read_split(spec.file);
        std::set<std::int64_t> known(all.begin(), all.end());
        std::set<std::int64_t> seen;
        for (const auto* side : {&s.train_classes, &s.val_classes, &s.test_classes})
            for (auto id : *side) {
                if (!known.count(id))
                    throw ConfigError(spec.file + ": class id " + std::to_string(id) +
                                      " is not in the dataset");
                if (!seen.insert(id).second)
                    throw ConfigError(spec.file + ": class id " + std::to_string(id) +
                                      " appears in more than one section");
            }
        if (s.train_classes.empty() || s.test_classes.empty())
            throw ConfigError(spec.file + ": split needs non-empty [train] and [test] sections");
        return s;
    }
    if (spec.train_classes + spec.test_classes > static_cast<std::int64_t>(all.size()))
        throw ConfigError("split needs " + std::to_string(spec.train_classes + spec.test_classes) +
                          " classes, dataset has " + std::to_string(all.size()));
    auto ids = all;
    Rng rng(derive_seed(spec.seed, "class-split"));
    rng.shuffle(ids);
    ClassSplit s;
    s.train_classes.assign(ids.begin(), ids.begin() + spec.train_classes);
    s.test_classes.assign(ids.begin() + spec.train_classes,
                          ids.begin() + spec.train_classes + spec.test_classes);
    s.val_classes.assign(ids.begin() + spec.train_classes + spec.test_classes, ids.end());
    return s;
}

} // namespace fewshot
