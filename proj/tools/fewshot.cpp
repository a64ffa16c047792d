#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "fewshot/config.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/serialize.hpp"

// Experiment driver: features / synth / train / eval / sweep over the library.
// Every run writes its fully resolved config (the reproducibility block) next
// to its outputs; all randomness derives from the one global seed.

namespace {

namespace fs = std::filesystem;
using fewshot::Algorithm;
using fewshot::ClassSplit;
using fewshot::Episode;
using fewshot::ExperimentConfig;
using fewshot::FewShotDataset;

struct Overrides {
    std::string config_path;
    std::string output_dir;
    std::string algorithm;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 1;
};

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) parts.push_back(part);
    return parts;
}

ExperimentConfig resolve_config(const Overrides& o) {
    auto cfg = fewshot::load_config(o.config_path);
    if (const char* env = std::getenv("FEWSHOT_OUTPUT_DIR"); env != nullptr && *env != '\0')
        cfg.output_dir = env;
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    if (o.seed_set) cfg.seed = o.seed;
    if (!o.algorithm.empty()) {
        if (o.algorithm == "protonet") cfg.meta.algorithm = Algorithm::protonet;
        else if (o.algorithm == "maml_proto") cfg.meta.algorithm = Algorithm::maml_proto;
        else if (o.algorithm == "mc_proto") cfg.meta.algorithm = Algorithm::mc_proto;
        else
            throw fewshot::ConfigError("--algorithm must be one of {protonet, maml_proto, mc_proto}, got \"" +
                                       o.algorithm + "\"");
        cfg.meta.validate(cfg.meta.algorithm != Algorithm::protonet);
    }
    return cfg;
}

std::string cache_path(const ExperimentConfig& cfg) { return cfg.output_dir + "/features.fstc"; }
std::string checkpoint_path(const ExperimentConfig& cfg) { return cfg.output_dir + "/checkpoint.fstc"; }

void write_repro_block(const ExperimentConfig& cfg, const std::string& command,
                       const std::vector<std::pair<std::string, std::string>>& extras = {}) {
    std::ofstream conf(cfg.output_dir + "/resolved_config.json");
    if (!conf) throw fewshot::IngestionError("cannot write " + cfg.output_dir + "/resolved_config.json");
    conf << fewshot::config_to_json(cfg);

    nlohmann::json run;
    run["command"] = command;
    run["seed"] = cfg.seed;
    for (const auto& [key, value] : extras) run[key] = value;
    std::ofstream out(cfg.output_dir + "/run.json");
    if (!out) throw fewshot::IngestionError("cannot write " + cfg.output_dir + "/run.json");
    out << run.dump(2) << "\n";
}

/// Synthetic datasets are regenerated from the seed; manifest datasets go
/// through the feature cache in the output directory when it is fresh.
FewShotDataset<float> obtain_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset.kind == fewshot::DatasetKind::synthetic)
        return fewshot::synth_tone_dataset<float>(cfg.dataset.num_classes, cfg.dataset.per_class, cfg.mel,
                                                  cfg.dataset.noise_level,
                                                  fewshot::derive_seed(cfg.seed, "dataset"));
    if (auto cached = fewshot::load_feature_cache<float>(cache_path(cfg), cfg.mel.fingerprint()))
        return std::move(*cached);
    return fewshot::build_dataset<float>(cfg.dataset.manifest, cfg.mel);
}

struct PreparedData {
    FewShotDataset<float> ds;
    ClassSplit split;
};

PreparedData prepare(const ExperimentConfig& cfg) {
    PreparedData p{obtain_dataset(cfg), {}};
    p.split = fewshot::resolve_split(cfg.split, p.ds.class_ids());
    auto stats = fewshot::fit_standardizer(p.ds, p.split.train_classes);
    fewshot::standardize(p.ds, stats);
    return p;
}

std::vector<Episode<float>> sample_episodes(const FewShotDataset<float>& ds,
                                            const std::vector<std::int64_t>& classes,
                                            const ExperimentConfig& cfg, const char* tag,
                                            std::int64_t count, std::int64_t first_id) {
    std::vector<Episode<float>> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        auto ep = fewshot::sample_episode(ds, classes, cfg.meta.way, cfg.meta.shot, cfg.meta.query,
                                          fewshot::derive_seed(cfg.seed, tag,
                                                               static_cast<std::uint64_t>(first_id + i)));
        ep.id = first_id + i;
        out.push_back(std::move(ep));
    }
    return out;
}

fewshot::EncoderParams<float> init_params(const ExperimentConfig& cfg) {
    return fewshot::init_encoder_custom<float>({1, cfg.mel.n_mels, cfg.mel.target_frames},
                                               fewshot::derive_seed(cfg.seed, "encoder-init"),
                                               cfg.encoder.blocks, cfg.encoder.channels);
}

struct LoadedModel {
    fewshot::EncoderParams<float> params;
    fewshot::CurvatureSet<float> curvature;
    bool has_curvature = false;
};

LoadedModel load_model(const ExperimentConfig& cfg, const std::string& ckpt) {
    LoadedModel m{init_params(cfg), {}, cfg.meta.algorithm == Algorithm::mc_proto};
    if (m.has_curvature) m.curvature = fewshot::init_curvature(m.params);
    fewshot::load_checkpoint<float>(ckpt, m.params, m.has_curvature ? &m.curvature : nullptr,
                                    fewshot::arch_fingerprint(cfg));
    return m;
}

int cmd_features(const Overrides& o) {
    auto cfg = resolve_config(o);
    if (cfg.dataset.kind != fewshot::DatasetKind::manifest)
        throw fewshot::ConfigError("features needs a manifest dataset; use `synth` for synthetic configs");
    fs::create_directories(cfg.output_dir);
    auto ds = fewshot::build_dataset<float>(cfg.dataset.manifest, cfg.mel);
    fewshot::save_feature_cache(cache_path(cfg), ds, cfg.mel.fingerprint());
    write_repro_block(cfg, "features");
    std::cout << "cached " << ds.size() << " samples over " << ds.class_index.size() << " classes to "
              << cache_path(cfg) << "\n";
    return 0;
}

int cmd_synth(const Overrides& o) {
    auto cfg = resolve_config(o);
    if (cfg.dataset.kind != fewshot::DatasetKind::synthetic)
        throw fewshot::ConfigError("synth needs a synthetic dataset config");
    fs::create_directories(cfg.output_dir);
    auto ds = fewshot::synth_tone_dataset<float>(cfg.dataset.num_classes, cfg.dataset.per_class, cfg.mel,
                                                 cfg.dataset.noise_level,
                                                 fewshot::derive_seed(cfg.seed, "dataset"));
    fewshot::save_feature_cache(cache_path(cfg), ds, cfg.mel.fingerprint());
    write_repro_block(cfg, "synth");
    std::cout << "generated " << ds.size() << " samples over " << ds.class_index.size() << " classes to "
              << cache_path(cfg) << "\n";
    return 0;
}

int cmd_train(const Overrides& o) {
    auto cfg = resolve_config(o);
    fs::create_directories(cfg.output_dir);
    auto data = prepare(cfg);

    auto params = init_params(cfg);
    bool mc = cfg.meta.algorithm == Algorithm::mc_proto;
    fewshot::CurvatureSet<float> curvature;
    if (mc) curvature = fewshot::init_curvature(params);
    fewshot::MetaOptState<float> opt_state;

    std::ofstream log(cfg.output_dir + "/train_log.csv");
    if (!log) throw fewshot::IngestionError("cannot write " + cfg.output_dir + "/train_log.csv");
    log << "step,mean_loss\n" << std::fixed << std::setprecision(6);

    std::int64_t episode_counter = 0;
    double last_loss = 0;
    for (std::int64_t step = 0; step < cfg.train_episodes; ++step) {
        auto batch = sample_episodes(data.ds, data.split.train_classes, cfg, "train-episode",
                                     cfg.meta.meta_batch, episode_counter);
        episode_counter += cfg.meta.meta_batch;
        auto result = fewshot::meta_train_step(params, curvature, batch, cfg.meta, opt_state, o.workers);
        params = std::move(result.params);
        curvature = std::move(result.curvature);
        last_loss = result.mean_loss;
        log << step << "," << result.mean_loss << "\n";
    }

    fewshot::save_checkpoint<float>(checkpoint_path(cfg), params, mc ? &curvature : nullptr,
                                    fewshot::arch_fingerprint(cfg));
    write_repro_block(cfg, "train");
    std::cout << "trained " << fewshot::algorithm_name(cfg.meta.algorithm) << " for " << cfg.train_episodes
              << " steps (" << episode_counter << " episodes); final mean loss " << std::fixed
              << std::setprecision(6) << last_loss << "\ncheckpoint: " << checkpoint_path(cfg) << "\n";
    return 0;
}

int cmd_eval(const Overrides& o, std::string ckpt, bool with_finetune) {
    auto cfg = resolve_config(o);
    fs::create_directories(cfg.output_dir);
    if (ckpt.empty()) ckpt = checkpoint_path(cfg);
    auto data = prepare(cfg);
    auto model = load_model(cfg, ckpt);

    auto episodes = sample_episodes(data.ds, data.split.test_classes, cfg, "eval-episode",
                                    cfg.eval_episodes, 0);
    auto metrics = fewshot::evaluate(model.params, model.has_curvature ? &model.curvature : nullptr,
                                     episodes, with_finetune, cfg.meta, o.workers);
    auto row = fewshot::summarize(fewshot::algorithm_name(cfg.meta.algorithm), metrics);

    fewshot::write_metrics_jsonl(cfg.output_dir + "/metrics.jsonl", metrics, row);
    fewshot::write_summary_csv(cfg.output_dir + "/summary.csv", {row});
    write_repro_block(cfg, "eval",
                      {{"checkpoint", ckpt}, {"finetune", with_finetune ? "true" : "false"}});

    std::cout << std::fixed << std::setprecision(4) << row.model << ": acc " << row.mean_acc_before
              << " +/- " << row.ci_before;
    if (row.mean_acc_after)
        std::cout << " without fine-tuning, " << *row.mean_acc_after << " +/- " << *row.ci_after
                  << " with fine-tuning";
    std::cout << " over " << row.episode_count << " episodes\n";
    return 0;
}

int cmd_sweep(const Overrides& o, std::string ckpt, const std::vector<double>& alphas,
              const std::vector<std::int64_t>& steps) {
    auto cfg = resolve_config(o);
    fs::create_directories(cfg.output_dir);
    if (ckpt.empty()) ckpt = checkpoint_path(cfg);
    auto data = prepare(cfg);
    auto model = load_model(cfg, ckpt);

    auto episodes = sample_episodes(data.ds, data.split.test_classes, cfg, "eval-episode",
                                    cfg.eval_episodes, 0);
    auto cells = fewshot::finetune_sweep(model.params, episodes, alphas, steps, cfg.meta,
                                         model.has_curvature ? &model.curvature : nullptr, o.workers);
    fewshot::write_sweep_csv(cfg.output_dir + "/sweep.csv", cells);

    std::string alpha_list, step_list;
    for (auto a : alphas) alpha_list += (alpha_list.empty() ? "" : ",") + std::to_string(a);
    for (auto n : steps) step_list += (step_list.empty() ? "" : ",") + std::to_string(n);
    write_repro_block(cfg, "sweep",
                      {{"checkpoint", ckpt}, {"alphas", alpha_list}, {"steps", step_list}});

    std::cout << cells.size() << "-cell sweep written to " << cfg.output_dir << "/sweep.csv\n";
    return 0;
}

void add_common(CLI::App* sub, Overrides& o) {
    sub->add_option("-c,--config", o.config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--output-dir", o.output_dir,
                    "output directory (overrides config and FEWSHOT_OUTPUT_DIR)");
    sub->add_option("--seed", o.seed, "global seed override")
        ->each([&o](const std::string&) { o.seed_set = true; });
    sub->add_option("--workers", o.workers, "episode-level worker threads")
        ->check(CLI::PositiveNumber);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"few-shot audio classification: episodic training, MAML/MC-style "
                 "meta-learning and rotational-division fine-tuning"};
    app.require_subcommand(1);

    Overrides o;
    std::string ckpt;
    bool with_finetune = true;
    std::string alphas_text = "1e-4,1e-3,1e-2,0.2";
    std::string steps_text = "1,4,8";

    auto* features = app.add_subcommand("features", "extract log-mel features from a manifest into a cache");
    add_common(features, o);

    auto* synth = app.add_subcommand("synth", "generate a synthetic tone dataset into a cache");
    add_common(synth, o);

    auto* train = app.add_subcommand("train", "meta-train (or episodically train) an encoder");
    add_common(train, o);
    train->add_option("-a,--algorithm", o.algorithm, "protonet | maml_proto | mc_proto");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on test-class episodes");
    add_common(eval, o);
    eval->add_option("-a,--algorithm", o.algorithm, "protonet | maml_proto | mc_proto");
    eval->add_option("--checkpoint", ckpt, "checkpoint path (default: <output-dir>/checkpoint.fstc)");
    eval->add_flag("--with-finetune,!--no-finetune", with_finetune,
                   "adapt to each episode's support set before classifying");

    auto* sweep = app.add_subcommand("sweep", "fine-tuning grid over learning rates and step counts");
    add_common(sweep, o);
    sweep->add_option("-a,--algorithm", o.algorithm, "protonet | maml_proto | mc_proto");
    sweep->add_option("--checkpoint", ckpt, "checkpoint path (default: <output-dir>/checkpoint.fstc)");
    sweep->add_option("--alphas", alphas_text, "comma-separated inner learning rates");
    sweep->add_option("--steps", steps_text, "comma-separated step counts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(features)) return cmd_features(o);
        if (app.got_subcommand(synth)) return cmd_synth(o);
        if (app.got_subcommand(train)) return cmd_train(o);
        if (app.got_subcommand(eval)) return cmd_eval(o, ckpt, with_finetune);

        std::vector<double> alphas;
        std::vector<std::int64_t> steps;
        try {
            for (const auto& part : split_csv(alphas_text)) alphas.push_back(std::stod(part));
            for (const auto& part : split_csv(steps_text)) steps.push_back(std::stoll(part));
        } catch (const std::exception&) {
            std::cerr << "error: --alphas/--steps must be comma-separated numbers\n";
            return 2;
        }
        return cmd_sweep(o, ckpt, alphas, steps);
    } catch (const fewshot::Error& e) {
        std::cerr << "error (" << e.category() << "): " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
