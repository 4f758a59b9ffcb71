// Command-line front end for the toy distillation experiments. Every
// subcommand reads an optional JSON config, applies flag overrides,
// validates, echoes the effective configuration into the output
// directory and runs the corresponding experiment function.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "wadi/experiment.hpp"

namespace {

using wadi::json;

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream is(path);
    if (!is) throw wadi::ConfigError("cannot open config file: " + path);
    json j;
    is >> j;
    if (!j.is_object()) throw wadi::ConfigError("config root must be a JSON object");
    return j;
}

void set_if(json& j, const char* key, const CLI::Option* opt, const json& value) {
    if (opt->count() > 0) j[key] = value;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy one-step diffusion distillation with rotation adapters"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "runs/out";
    std::uint64_t seed = 0;
    bool seed_set = false;

    // train-teacher
    auto* train = app.add_subcommand("train-teacher", "train the multi-step teacher");
    std::string dataset;
    int steps = 0;
    auto* train_config = train->add_option("--config", config_path, "JSON config file");
    auto* train_seed = train->add_option("--seed", seed, "master seed");
    train->add_option("--out", out_dir, "output directory");
    auto* train_dataset = train->add_option("--dataset", dataset, "dataset kind");
    auto* train_steps = train->add_option("--steps", steps, "training steps");
    (void)train_config;

    // distill
    auto* dist = app.add_subcommand("distill", "distill the teacher into a one-step generator");
    std::string teacher_path;
    std::size_t rank_student = 0, rank_fake = 0;
    double cfg_scale = 0.0;
    int ratio = 0;
    dist->add_option("--config", config_path, "JSON config file");
    dist->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    auto* dist_seed = dist->add_option("--seed", seed, "master seed");
    dist->add_option("--out", out_dir, "output directory");
    auto* dist_rs = dist->add_option("--rank-student", rank_student, "student adapter rank");
    auto* dist_rf = dist->add_option("--rank-fake", rank_fake, "fake-model adapter rank");
    auto* dist_cfg = dist->add_option("--cfg-scale", cfg_scale, "guidance scale");
    auto* dist_ratio = dist->add_option("--ratio", ratio, "fake updates per generator update");
    auto* dist_steps = dist->add_option("--steps", steps, "total generator steps");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "norm/direction drift and residual energy");
    std::string snap_a, snap_b;
    analyze->add_option("--a", snap_a, "first checkpoint (student)")->required();
    analyze->add_option("--b", snap_b, "second checkpoint (teacher)")->required();
    analyze->add_option("--out", out_dir, "output directory");

    // swap
    auto* swap = app.add_subcommand("swap", "swap norm/direction between two checkpoints");
    std::string dir_src, norm_src, swap_out;
    swap->add_option("--direction", dir_src, "direction source checkpoint")->required();
    swap->add_option("--norm", norm_src, "norm source checkpoint")->required();
    swap->add_option("--out-file", swap_out, "output checkpoint path")->required();

    // ablate
    auto* abl = app.add_subcommand("ablate", "adapter-type and rank comparison grid");
    abl->add_option("--config", config_path, "JSON config file");
    abl->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    auto* abl_seed = abl->add_option("--seed", seed, "master seed");
    abl->add_option("--out", out_dir, "output directory");
    auto* abl_steps = abl->add_option("--steps", steps, "generator steps per cell");

    // sample
    auto* sample = app.add_subcommand("sample", "draw samples from a model checkpoint");
    std::string model_path;
    int n_samples = 1024;
    int sample_steps = 50;
    double sample_cfg = 1.5;
    sample->add_option("--model", model_path, "model checkpoint")->required();
    sample->add_option("--n", n_samples, "number of samples");
    sample->add_option("--steps", sample_steps, "1 = one-step generator, >1 = DDIM");
    sample->add_option("--cfg-scale", sample_cfg, "guidance scale (multi-step only)");
    auto* sample_seed = sample->add_option("--seed", seed, "master seed");
    sample->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (train->parsed()) {
            json j = load_config_file(config_path);
            set_if(j, "seed", train_seed, seed);
            set_if(j, "dataset", train_dataset, dataset);
            set_if(j, "steps", train_steps, steps);
            auto cfg = wadi::TeacherRunConfig::from_json(j);
            auto ckpt = wadi::run_train_teacher(cfg, out_dir);
            std::cout << "teacher checkpoint: " << ckpt.string() << "\n";
        } else if (dist->parsed()) {
            json j = load_config_file(config_path);
            set_if(j, "seed", dist_seed, seed);
            set_if(j, "rank_student", dist_rs, rank_student);
            set_if(j, "rank_fake", dist_rf, rank_fake);
            set_if(j, "cfg_scale", dist_cfg, cfg_scale);
            set_if(j, "ratio", dist_ratio, ratio);
            set_if(j, "steps", dist_steps, steps);
            auto cfg = wadi::DistillRunConfig::from_json(j);
            auto artifacts = wadi::run_distill(cfg, teacher_path, out_dir);
            std::cout << "merged student: " << artifacts.merged_checkpoint.string() << "\n"
                      << "adapter factors: " << artifacts.adapter_checkpoint.string() << "\n"
                      << "final W2: " << artifacts.trace.back().w2 << "\n";
        } else if (analyze->parsed()) {
            auto report = wadi::run_analyze(snap_a, snap_b, out_dir);
            std::cout << "norm mean %: " << report.norm_mean
                      << "  direction mean %: " << report.direction_mean << "\n";
        } else if (swap->parsed()) {
            wadi::run_swap(dir_src, norm_src, swap_out);
            std::cout << "hybrid checkpoint: " << swap_out << "\n";
        } else if (abl->parsed()) {
            json j = load_config_file(config_path);
            set_if(j, "seed", abl_seed, seed);
            set_if(j, "steps", abl_steps, steps);
            auto cfg = wadi::AblateRunConfig::from_json(j);
            auto table = wadi::run_ablate(cfg, teacher_path, out_dir);
            for (const auto& cell : table)
                std::cout << cell.label << ": params=" << cell.param_count
                          << " w2=" << cell.w2 << " status=" << (cell.ok ? "ok" : cell.error)
                          << "\n";
        } else if (sample->parsed()) {
            if (!sample_seed->count()) seed = 1234;
            auto csv =
                wadi::run_sample(model_path, n_samples, sample_steps, sample_cfg, seed, out_dir);
            std::cout << "samples: " << csv.string() << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
