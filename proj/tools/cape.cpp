// Command-line front end: training, evaluation, ablation tables, extrinsic
// noise sweeps, attention dumps and dataset generation. Every command is a
// pure function of (config, seed); output JSON carries no wall-clock state.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cape/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const json& j, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw cape::Error("cannot open output file " + path);
    os << j.dump(1) << '\n';
}

cape::ExperimentConfig load_config_or_default(const std::string& path, std::optional<std::uint64_t> seed) {
    cape::ExperimentConfig cfg = path.empty() ? cape::ExperimentConfig{} : cape::load_config(path);
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out) {
    cape::ExperimentConfig cfg = load_config_or_default(config_path, seed);
    fs::create_directories(out);
    std::ofstream log(out + "/train_log.jsonl");
    cape::TrainResult res = cape::train(cfg, [&](std::size_t step, const cape::TotalLossBreakdown& bd,
                                                 double lr) {
        json line = {{"step", step}, {"loss", bd.total}, {"cur", bd.cur}, {"prev", bd.prev}, {"lr", lr}};
        log << line.dump() << '\n';
    });
    cape::save_checkpoint(res.model, cfg, res.steps_run, res.rng_state, out + "/checkpoint.json");
    json metrics = {{"command", "train"},
                    {"config_hash", cape::config_hash(cfg)},
                    {"seed", cfg.seed},
                    {"status", res.status},
                    {"steps_run", res.steps_run},
                    {"step10_loss", res.step10_loss},
                    {"final_loss", res.final_loss}};
    if (res.status == cape::kExitDiverged) metrics["divergence"] = res.divergence_reason;
    write_json(metrics, out + "/train_metrics.json");
    if (res.status == cape::kExitDiverged)
        std::cerr << "training diverged: " << res.divergence_reason << "\n";
    return res.status;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path, const std::string& out,
             std::optional<std::uint64_t> first, std::optional<std::size_t> count) {
    cape::Checkpoint ck = cape::load_checkpoint(ckpt_path);
    if (!config_path.empty()) {
        cape::ExperimentConfig other = cape::load_config(config_path);
        if (cape::config_hash(other) != cape::config_hash(ck.config))
            throw cape::ConfigError("eval: --config does not match the checkpoint's config hash");
    }
    const std::uint64_t first_scene = first.value_or(ck.config.train.train_scenes);
    const std::size_t n = count.value_or(ck.config.eval_scenes);
    cape::EvalResult res = cape::eval_model(ck.model, ck.config.dataset, first_scene, n);
    fs::create_directories(out);
    json metrics = {{"command", "eval"},
                    {"config_hash", cape::config_hash(ck.config)},
                    {"seed", ck.config.seed},
                    {"first_scene", first_scene},
                    {"scene_count", n},
                    {"metrics", cape::eval_to_json(res)}};
    write_json(metrics, out + "/metrics.json");
    std::cout << metrics["metrics"].dump(1) << '\n';
    return 0;
}

int cmd_ablate(const std::string& config_path, std::optional<std::uint64_t> seed, int table,
               std::size_t seeds, const std::string& out) {
    cape::ExperimentConfig base = load_config_or_default(config_path, seed);
    auto outcomes = cape::run_ablation(base, table, seeds);
    fs::create_directories(out);
    json j = cape::ablation_to_json(outcomes);
    j["table"] = table;
    j["config_hash"] = cape::config_hash(base);
    write_json(j, out + "/ablation_table" + std::to_string(table) + ".json");
    std::cout << "table " << table << "\n";
    for (const auto& o : outcomes) {
        std::cout << "  " << o.label << ": ";
        if (o.any_diverged) std::cout << "[diverged] ";
        std::cout << "mean_ap=" << o.mean_ap << " ap@2m=" << o.mean_ap2m << " mave=" << o.mean_mave
                  << "\n";
    }
    int status = 0;
    for (const auto& o : outcomes)
        if (o.any_diverged) status = cape::kExitDiverged;
    return status;
}

int cmd_robustness(const std::vector<std::string>& ckpts, const std::vector<double>& levels,
                   std::size_t trials, std::optional<std::size_t> count, const std::string& out) {
    std::vector<cape::RobustnessCurve> curves;
    for (const auto& path : ckpts) {
        cape::Checkpoint ck = cape::load_checkpoint(path);
        const std::size_t n = count.value_or(ck.config.eval_scenes);
        const std::string label = cape::cfgjson::to_string(ck.config.model.pe_mode) + ":" +
                                  fs::path(path).filename().string();
        curves.push_back(cape::robustness_sweep(ck.model, ck.config.dataset,
                                                ck.config.train.train_scenes, n, levels, trials,
                                                ck.config.seed, label));
    }
    fs::create_directories(out);
    write_json(cape::robustness_to_json(curves), out + "/robustness.json");
    for (const auto& c : curves) {
        std::cout << c.label << " baseline=" << c.baseline_map << " drops:";
        for (std::size_t i = 0; i < c.levels.size(); ++i)
            std::cout << " " << c.levels[i] << "deg=" << c.mean_drop[i];
        std::cout << "\n";
    }
    return 0;
}

int cmd_dump_attn(const std::string& ckpt_path, std::uint64_t scene_index,
                  const std::vector<std::size_t>& queries, const std::string& out) {
    cape::Checkpoint ck = cape::load_checkpoint(ckpt_path);
    cape::SceneSample sample = cape::generate_scene(ck.config.dataset, scene_index);
    cape::dump_attention(ck.model, sample, queries, out);
    std::cout << "wrote attention maps to " << out << "\n";
    return 0;
}

int cmd_gen_data(const std::string& config_path, std::optional<std::uint64_t> seed,
                 std::uint64_t first, std::size_t n, const std::string& out) {
    cape::ExperimentConfig cfg = load_config_or_default(config_path, seed);
    if (seed) cfg.dataset.seed = *seed;
    fs::create_directories(out);
    for (std::uint64_t i = 0; i < n; ++i) {
        cape::SceneSample s = cape::generate_scene(cfg.dataset, first + i);
        cape::save_scene(s, out + "/scene_" + std::to_string(first + i) + ".json");
    }
    std::cout << "wrote " << n << " scenes to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cape: camera-view position embedding 3D detection, desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* cmd, bool with_config = true) {
        if (with_config) cmd->add_option("--config", config_path, "experiment config JSON");
        cmd->add_option("--seed", seed, "seed override");
        cmd->add_option("--out", out_dir, "output directory");
    };

    auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
    add_common(train);

    std::string ckpt_path;
    std::optional<std::uint64_t> eval_first;
    std::optional<std::size_t> eval_count;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
    add_common(eval);
    eval->add_option("--checkpoint", ckpt_path, "checkpoint JSON path")->required();
    eval->add_option("--first", eval_first, "first scene index (default: past training scenes)");
    eval->add_option("--count", eval_count, "number of scenes");

    int table = 4;
    std::size_t ablate_seeds = 3;
    auto* ablate = app.add_subcommand("ablate", "run one ablation table");
    add_common(ablate);
    ablate->add_option("--table", table, "table number: 4, 5, 6 or 7")->required();
    ablate->add_option("--seeds", ablate_seeds, "seeds per row");

    std::vector<std::string> rob_ckpts;
    std::vector<double> levels = {2.0, 4.0, 8.0};
    std::size_t trials = 20;
    auto* robustness = app.add_subcommand("robustness", "extrinsic-noise degradation curves");
    add_common(robustness, false);
    robustness->add_option("--checkpoint", rob_ckpts, "checkpoint(s) to sweep")->required();
    robustness->add_option("--levels", levels, "rotation noise levels in degrees");
    robustness->add_option("--trials", trials, "noise draws per level");
    robustness->add_option("--count", eval_count, "scenes per evaluation");

    std::uint64_t scene_index = 0;
    std::vector<std::size_t> query_ids;
    auto* dump = app.add_subcommand("dump-attn", "write attention map CSVs for one scene");
    add_common(dump, false);
    dump->add_option("--checkpoint", ckpt_path, "checkpoint JSON path")->required();
    dump->add_option("--scene-index", scene_index, "scene index to inspect");
    dump->add_option("--queries", query_ids, "query ids (default: all)");

    std::uint64_t first_scene = 0;
    std::size_t scene_count = 8;
    auto* gen = app.add_subcommand("gen-data", "write scene files");
    add_common(gen);
    gen->add_option("--first", first_scene, "first scene index");
    gen->add_option("--count", scene_count, "number of scenes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, seed, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt_path, config_path, out_dir, eval_first, eval_count);
        if (ablate->parsed()) return cmd_ablate(config_path, seed, table, ablate_seeds, out_dir);
        if (robustness->parsed()) return cmd_robustness(rob_ckpts, levels, trials, eval_count, out_dir);
        if (dump->parsed()) return cmd_dump_attn(ckpt_path, scene_index, query_ids, out_dir);
        if (gen->parsed()) return cmd_gen_data(config_path, seed, first_scene, scene_count, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cape::kExitError;
    }
    return 0;
}
