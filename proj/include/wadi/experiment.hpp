#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "wadi/analysis.hpp"
#include "wadi/checkpoint.hpp"
#include "wadi/diffusion.hpp"
#include "wadi/distill.hpp"
#include "wadi/metrics.hpp"
#include "wadi/rng.hpp"
#include "wadi/tensor.hpp"

namespace wadi {

// Experiment plumbing: JSON run configuration with strict key checking,
// model <-> checkpoint mapping, CSV/JSON report emission, and the command
// bodies behind the CLI. Output directory layout is fixed:
//   <out>/config.json   effective configuration echo
//   <out>/checkpoints/  model files
//   <out>/metrics/      per-step CSV traces
//   <out>/reports/      analysis CSV/JSON

class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

using json = nlohmann::json;

namespace detail {

// full round-trip precision for CSV payloads
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <class T>
void read_key(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void ensure_dirs(const std::filesystem::path& out) {
    std::filesystem::create_directories(out / "checkpoints");
    std::filesystem::create_directories(out / "metrics");
    std::filesystem::create_directories(out / "reports");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << text;
}

} // namespace detail

// ---------------------------------------------------------------------------
// run configurations
// ---------------------------------------------------------------------------

struct TeacherRunConfig {
    std::string dataset = "gaussian-mixture-8";
    int n_samples = 4096;
    int schedule_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.05;
    int hidden = 128;
    int n_hidden = 4;
    int t_embed = 32;
    int c_embed = 32;
    int steps = 5000;
    double lr = 1e-3;
    int batch = 128;
    double cond_drop_prob = 0.1;
    double weight_decay = 0.0;
    std::uint64_t seed = 1234;

    static TeacherRunConfig from_json(const json& j) {
        detail::reject_unknown_keys(
            j,
            {"dataset", "n_samples", "schedule_steps", "beta_start", "beta_end", "hidden",
             "n_hidden", "t_embed", "c_embed", "steps", "lr", "batch", "cond_drop_prob",
             "weight_decay", "seed"},
            "train-teacher config");
        TeacherRunConfig c;
        detail::read_key(j, "dataset", c.dataset);
        detail::read_key(j, "n_samples", c.n_samples);
        detail::read_key(j, "schedule_steps", c.schedule_steps);
        detail::read_key(j, "beta_start", c.beta_start);
        detail::read_key(j, "beta_end", c.beta_end);
        detail::read_key(j, "hidden", c.hidden);
        detail::read_key(j, "n_hidden", c.n_hidden);
        detail::read_key(j, "t_embed", c.t_embed);
        detail::read_key(j, "c_embed", c.c_embed);
        detail::read_key(j, "steps", c.steps);
        detail::read_key(j, "lr", c.lr);
        detail::read_key(j, "batch", c.batch);
        detail::read_key(j, "cond_drop_prob", c.cond_drop_prob);
        detail::read_key(j, "weight_decay", c.weight_decay);
        detail::read_key(j, "seed", c.seed);
        c.validate();
        return c;
    }

    void validate() const {
        dataset_kind_from_name(dataset); // throws on bad name
        if (n_samples < 16) throw ConfigError("n_samples must be >= 16");
        if (schedule_steps < 2) throw ConfigError("schedule_steps must be >= 2");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw ConfigError("require 0 < beta_start <= beta_end < 1");
        if (hidden < 2 || hidden % 2 != 0) throw ConfigError("hidden width must be even, >= 2");
        if (n_hidden < 1) throw ConfigError("n_hidden must be >= 1");
        if (t_embed < 2 || t_embed % 2 != 0) throw ConfigError("t_embed must be even, >= 2");
        if (c_embed < 1) throw ConfigError("c_embed must be >= 1");
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (batch < 1) throw ConfigError("batch must be >= 1");
        if (cond_drop_prob < 0.0 || cond_drop_prob > 1.0)
            throw ConfigError("cond_drop_prob must lie in [0, 1]");
    }

    json to_json() const {
        return json{{"dataset", dataset},
                    {"n_samples", n_samples},
                    {"schedule_steps", schedule_steps},
                    {"beta_start", beta_start},
                    {"beta_end", beta_end},
                    {"hidden", hidden},
                    {"n_hidden", n_hidden},
                    {"t_embed", t_embed},
                    {"c_embed", c_embed},
                    {"steps", steps},
                    {"lr", lr},
                    {"batch", batch},
                    {"cond_drop_prob", cond_drop_prob},
                    {"weight_decay", weight_decay},
                    {"seed", seed}};
    }
};

struct DistillRunConfig {
    DistillConfig core;
    std::string adapter = "lorad";

    static DistillRunConfig from_json(const json& j) {
        detail::reject_unknown_keys(
            j,
            {"rank_student", "rank_fake", "lr_student", "lr_fake", "cfg_scale", "ratio",
             "omega_mode", "batch", "epochs", "steps_per_epoch", "steps", "t_min_frac",
             "t_max_frac", "eval_interval", "eval_samples", "teacher_sample_steps",
             "weight_decay", "lr_decay", "seed", "adapter", "adapt_layers"},
            "distill config");
        DistillRunConfig c;
        std::uint64_t rank_student = c.core.rank_student, rank_fake = c.core.rank_fake;
        detail::read_key(j, "rank_student", rank_student);
        detail::read_key(j, "rank_fake", rank_fake);
        c.core.rank_student = rank_student;
        c.core.rank_fake = rank_fake;
        detail::read_key(j, "lr_student", c.core.lr_student);
        detail::read_key(j, "lr_fake", c.core.lr_fake);
        detail::read_key(j, "cfg_scale", c.core.cfg_scale);
        detail::read_key(j, "ratio", c.core.ratio);
        if (j.contains("omega_mode"))
            c.core.omega_mode = omega_mode_from_name(j.at("omega_mode").get<std::string>());
        detail::read_key(j, "batch", c.core.batch);
        detail::read_key(j, "epochs", c.core.epochs);
        detail::read_key(j, "steps_per_epoch", c.core.steps_per_epoch);
        detail::read_key(j, "steps", c.core.steps_override);
        detail::read_key(j, "t_min_frac", c.core.t_min_frac);
        detail::read_key(j, "t_max_frac", c.core.t_max_frac);
        detail::read_key(j, "eval_interval", c.core.eval_interval);
        detail::read_key(j, "eval_samples", c.core.eval_samples);
        detail::read_key(j, "teacher_sample_steps", c.core.teacher_sample_steps);
        detail::read_key(j, "weight_decay", c.core.weight_decay);
        detail::read_key(j, "lr_decay", c.core.lr_decay);
        detail::read_key(j, "seed", c.core.seed);
        detail::read_key(j, "adapter", c.adapter);
        if (j.contains("adapt_layers"))
            c.core.adapt_layers = j.at("adapt_layers").get<std::vector<std::string>>();
        c.core.student_adapter = adapter_kind_from_name(c.adapter);
        return c;
    }

    json to_json() const {
        return json{{"rank_student", core.rank_student},
                    {"rank_fake", core.rank_fake},
                    {"lr_student", core.lr_student},
                    {"lr_fake", core.lr_fake},
                    {"cfg_scale", core.cfg_scale},
                    {"ratio", core.ratio},
                    {"omega_mode", omega_mode_name(core.omega_mode)},
                    {"batch", core.batch},
                    {"epochs", core.epochs},
                    {"steps_per_epoch", core.steps_per_epoch},
                    {"steps", core.steps_override},
                    {"t_min_frac", core.t_min_frac},
                    {"t_max_frac", core.t_max_frac},
                    {"eval_interval", core.eval_interval},
                    {"eval_samples", core.eval_samples},
                    {"teacher_sample_steps", core.teacher_sample_steps},
                    {"weight_decay", core.weight_decay},
                    {"lr_decay", core.lr_decay},
                    {"seed", core.seed},
                    {"adapter", adapter},
                    {"adapt_layers", core.adapt_layers}};
    }
};

// ---------------------------------------------------------------------------
// model <-> checkpoint mapping
// ---------------------------------------------------------------------------

// Everything a checkpoint needs besides the weights; copyable on its own
// (the model itself is move-only once adapters are attached).
struct ModelMeta {
    DatasetKind dataset_kind = DatasetKind::GaussianMixture8;
    int dataset_n = 0;
    std::uint64_t dataset_seed = 0;
    double beta_start = 0.0, beta_end = 0.0;
    double norm_mean[2] = {0.0, 0.0};
    double norm_scale[2] = {1.0, 1.0};
};

struct ModelBundle {
    Denoiser model;
    DiffusionSchedule schedule;
    ModelMeta meta;

    ToyDataset rebuild_dataset() const {
        return ToyDataset::make(meta.dataset_kind, static_cast<std::size_t>(meta.dataset_n),
                                meta.dataset_seed);
    }
};

namespace detail {

inline Tensor meta_vec(std::initializer_list<double> values) {
    return Tensor::from_data({values.size()}, std::vector<double>(values));
}

} // namespace detail

inline NamedTensors model_to_named(const ModelBundle& bundle) {
    const Denoiser& m = bundle.model;
    NamedTensors out;
    const auto& cfg = m.config();
    out.add("meta.arch",
            detail::meta_vec({static_cast<double>(cfg.data_dim), static_cast<double>(cfg.hidden),
                              static_cast<double>(cfg.n_hidden),
                              static_cast<double>(cfg.t_embed), static_cast<double>(cfg.c_embed),
                              static_cast<double>(cfg.n_classes)}));
    out.add("meta.schedule",
            detail::meta_vec({static_cast<double>(bundle.schedule.steps),
                              bundle.meta.beta_start, bundle.meta.beta_end}));
    out.add("meta.norm",
            detail::meta_vec({bundle.meta.norm_mean[0], bundle.meta.norm_mean[1],
                              bundle.meta.norm_scale[0], bundle.meta.norm_scale[1]}));
    out.add("meta.dataset",
            detail::meta_vec({static_cast<double>(static_cast<int>(bundle.meta.dataset_kind)),
                              static_cast<double>(bundle.meta.dataset_n),
                              static_cast<double>(bundle.meta.dataset_seed & 0xffffffffull),
                              static_cast<double>(bundle.meta.dataset_seed >> 32)}));
    for (std::size_t i = 0; i < m.n_layers(); ++i) {
        out.add(Denoiser::layer_name(i) + ".weight", m.layers()[i].weight.detach());
        out.add(Denoiser::layer_name(i) + ".bias", m.layers()[i].bias.detach());
    }
    out.add("cond_embed.table", m.cond_table().detach());
    return out;
}

inline ModelBundle model_from_named(const NamedTensors& tensors) {
    for (const char* required : {"meta.arch", "meta.schedule", "meta.norm", "meta.dataset"})
        if (!tensors.contains(required))
            throw ConfigError("checkpoint is not a model file (missing " +
                              std::string(required) + ")");

    ModelBundle bundle;
    const auto arch = tensors.get("meta.arch").data();
    DenoiserConfig cfg;
    cfg.data_dim = static_cast<int>(arch[0]);
    cfg.hidden = static_cast<int>(arch[1]);
    cfg.n_hidden = static_cast<int>(arch[2]);
    cfg.t_embed = static_cast<int>(arch[3]);
    cfg.c_embed = static_cast<int>(arch[4]);
    cfg.n_classes = static_cast<int>(arch[5]);

    const auto sched = tensors.get("meta.schedule").data();
    bundle.meta.beta_start = sched[1];
    bundle.meta.beta_end = sched[2];
    bundle.schedule = DiffusionSchedule::linear(static_cast<int>(sched[0]),
                                                bundle.meta.beta_start, bundle.meta.beta_end);

    const auto norm = tensors.get("meta.norm").data();
    bundle.meta.norm_mean[0] = norm[0];
    bundle.meta.norm_mean[1] = norm[1];
    bundle.meta.norm_scale[0] = norm[2];
    bundle.meta.norm_scale[1] = norm[3];

    const auto ds = tensors.get("meta.dataset").data();
    bundle.meta.dataset_kind = static_cast<DatasetKind>(static_cast<int>(ds[0]));
    bundle.meta.dataset_n = static_cast<int>(ds[1]);
    bundle.meta.dataset_seed = static_cast<std::uint64_t>(ds[2]) |
                               (static_cast<std::uint64_t>(ds[3]) << 32);

    RngStream dummy(0);
    bundle.model = Denoiser(cfg, bundle.schedule.steps, dummy);
    for (std::size_t i = 0; i < bundle.model.n_layers(); ++i) {
        const std::string base = Denoiser::layer_name(i);
        const Tensor& w = tensors.get(base + ".weight");
        const Tensor& b = tensors.get(base + ".bias");
        if (w.shape() != bundle.model.layers()[i].weight.shape())
            throw ConfigError("checkpoint layer " + base + " has shape " +
                              shape_str(w.shape()) + ", model expects " +
                              shape_str(bundle.model.layers()[i].weight.shape()));
        bundle.model.layers()[i].weight = w.detach();
        bundle.model.layers()[i].bias = b.detach();
    }
    bundle.model.cond_table() = tensors.get("cond_embed.table").detach();
    bundle.model.freeze();
    return bundle;
}

// Matrix-valued non-meta entries of a checkpoint, in file order.
inline WeightSnapshot snapshot_from_named(const NamedTensors& tensors) {
    WeightSnapshot snap;
    for (const auto& [name, t] : tensors.items()) {
        if (name.rfind("meta.", 0) == 0) continue;
        if (t.rank() != 2) continue;
        snap.add(name, t);
    }
    return snap;
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& trace) {
    std::ostringstream os;
    os << "step,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        os << i << "," << detail::fmt_double(trace[i]) << "\n";
    detail::write_text(path, os.str());
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<MetricsRecord>& trace) {
    std::ostringstream os;
    os << "step,gen_loss,fake_loss,w2,mmd,coverage\n";
    for (const auto& r : trace)
        os << r.step << "," << detail::fmt_double(r.gen_loss) << ","
           << detail::fmt_double(r.fake_loss) << "," << detail::fmt_double(r.w2) << ","
           << detail::fmt_double(r.mmd) << "," << detail::fmt_double(r.coverage) << "\n";
    detail::write_text(path, os.str());
}

inline void write_samples_csv(const std::filesystem::path& path, const Tensor& points,
                              const std::vector<int>& labels) {
    const std::size_t n = labels.size();
    const double* p = points.data().data();
    std::ostringstream os;
    os << "x,y,label\n";
    for (std::size_t i = 0; i < n; ++i)
        os << detail::fmt_double(p[i]) << "," << detail::fmt_double(p[n + i]) << ","
           << labels[i] << "\n";
    detail::write_text(path, os.str());
}

inline void write_drift_csv(const std::filesystem::path& path, const DriftReport& report) {
    std::ostringstream os;
    os << "layer,norm_change_pct,direction_change_pct\n";
    for (const auto& l : report.layers)
        os << l.layer << "," << detail::fmt_double(l.norm_change_pct) << ","
           << detail::fmt_double(l.direction_change_pct) << "\n";
    detail::write_text(path, os.str());
}

inline json drift_to_json(const DriftReport& report) {
    json layers = json::array();
    for (const auto& l : report.layers)
        layers.push_back(json{{"layer", l.layer},
                              {"norm_change_pct", l.norm_change_pct},
                              {"direction_change_pct", l.direction_change_pct}});
    return json{{"layers", layers},
                {"norm_mean", report.norm_mean},
                {"norm_std", report.norm_std},
                {"direction_mean", report.direction_mean},
                {"direction_std", report.direction_std}};
}

inline void write_energy_csv(const std::filesystem::path& path, const EnergyCurve& curve) {
    std::ostringstream os;
    os << "rank,sigma,cumulative_energy\n";
    for (std::size_t i = 0; i < curve.singular_values.size(); ++i)
        os << (i + 1) << "," << detail::fmt_double(curve.singular_values[i]) << ","
           << detail::fmt_double(curve.cumulative_energy[i]) << "\n";
    detail::write_text(path, os.str());
}

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationCell>& table) {
    std::ostringstream os;
    os << "label,params,w2,mmd,coverage,nm,dm,status,error\n";
    for (const auto& c : table) {
        os << c.label << "," << c.param_count << "," << detail::fmt_double(c.w2) << ","
           << detail::fmt_double(c.mmd) << "," << detail::fmt_double(c.coverage) << ","
           << detail::fmt_double(c.norm_mean_pct) << ","
           << detail::fmt_double(c.direction_mean_pct) << "," << (c.ok ? "ok" : "error") << ","
           << c.error << "\n";
    }
    detail::write_text(path, os.str());
}

inline json ablation_to_json(const std::vector<AblationCell>& table) {
    json rows = json::array();
    for (const auto& c : table)
        rows.push_back(json{{"label", c.label},
                            {"params", c.param_count},
                            {"w2", c.w2},
                            {"mmd", c.mmd},
                            {"coverage", c.coverage},
                            {"nm", c.norm_mean_pct},
                            {"dm", c.direction_mean_pct},
                            {"status", c.ok ? "ok" : "error"},
                            {"error", c.error}});
    return json{{"rows", rows}};
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

// Trains a teacher and writes checkpoints/teacher.wadi plus the loss trace.
inline std::filesystem::path run_train_teacher(const TeacherRunConfig& config,
                                               const std::filesystem::path& out) {
    config.validate();
    detail::ensure_dirs(out);
    detail::write_text(out / "config.json", config.to_json().dump(2) + "\n");

    RngPool pool(config.seed);
    const std::uint64_t dataset_seed = RngPool(config.seed).stream("dataset").next_u64();
    ToyDataset data = ToyDataset::make(dataset_kind_from_name(config.dataset),
                                       static_cast<std::size_t>(config.n_samples), dataset_seed);
    DiffusionSchedule schedule =
        DiffusionSchedule::linear(config.schedule_steps, config.beta_start, config.beta_end);

    DenoiserConfig dcfg;
    dcfg.data_dim = 2;
    dcfg.hidden = config.hidden;
    dcfg.n_hidden = config.n_hidden;
    dcfg.t_embed = config.t_embed;
    dcfg.c_embed = config.c_embed;
    dcfg.n_classes = data.n_classes;
    RngStream init = pool.stream("teacher.init");
    Denoiser model(dcfg, schedule.steps, init);

    TrainOptions opts;
    opts.steps = config.steps;
    opts.lr = config.lr;
    opts.batch = config.batch;
    opts.cond_drop_prob = config.cond_drop_prob;
    opts.weight_decay = config.weight_decay;
    std::vector<double> losses = train_denoiser(model, data, schedule, opts, pool);

    ModelBundle bundle;
    bundle.model = model.clone_weights();
    bundle.schedule = schedule;
    bundle.meta.beta_start = config.beta_start;
    bundle.meta.beta_end = config.beta_end;
    bundle.meta.dataset_kind = data.kind;
    bundle.meta.dataset_n = config.n_samples;
    bundle.meta.dataset_seed = dataset_seed;
    bundle.meta.norm_mean[0] = data.mean[0];
    bundle.meta.norm_mean[1] = data.mean[1];
    bundle.meta.norm_scale[0] = data.scale[0];
    bundle.meta.norm_scale[1] = data.scale[1];

    const auto ckpt = out / "checkpoints" / "teacher.wadi";
    save_checkpoint(ckpt, model_to_named(bundle));
    write_loss_csv(out / "metrics" / "teacher_loss.csv", losses);
    return ckpt;
}

struct DistillArtifacts {
    std::filesystem::path merged_checkpoint;
    std::filesystem::path adapter_checkpoint;
    std::vector<MetricsRecord> trace;
};

// Distills the teacher at `teacher_path`; writes the merged student, the
// raw adapter factors, and the metrics trace.
inline DistillArtifacts run_distill(const DistillRunConfig& config,
                                    const std::filesystem::path& teacher_path,
                                    const std::filesystem::path& out) {
    detail::ensure_dirs(out);
    json echo = config.to_json();
    echo["teacher"] = teacher_path.string();
    detail::write_text(out / "config.json", echo.dump(2) + "\n");

    ModelBundle teacher = model_from_named(load_checkpoint(teacher_path));
    ToyDataset data = teacher.rebuild_dataset();
    config.core.validate(teacher.schedule.steps);

    DistillResult run = distill(teacher.model, teacher.schedule, data, config.core);

    ModelBundle merged;
    merged.model = run.student.net.merged_clone();
    merged.schedule = teacher.schedule;
    merged.meta = teacher.meta;
    DistillArtifacts artifacts;
    artifacts.merged_checkpoint = out / "checkpoints" / "student_merged.wadi";
    save_checkpoint(artifacts.merged_checkpoint, model_to_named(merged));

    NamedTensors adapters;
    adapters.add("meta.adapter",
                 detail::meta_vec({static_cast<double>(static_cast<int>(config.core.student_adapter)),
                                   static_cast<double>(config.core.rank_student),
                                   static_cast<double>(config.core.rank_fake)}));
    for (const auto& [name, t] : run.student.net.adapter_named_params())
        adapters.add(name, t.detach());
    artifacts.adapter_checkpoint = out / "checkpoints" / "student_adapters.wadi";
    save_checkpoint(artifacts.adapter_checkpoint, adapters);

    write_metrics_csv(out / "metrics" / "distill_metrics.csv", run.trace);
    artifacts.trace = run.trace;
    return artifacts;
}

// Drift report and residual-direction energy curves between two model
// checkpoints (per layer and pooled).
inline DriftReport run_analyze(const std::filesystem::path& snapshot_a,
                               const std::filesystem::path& snapshot_b,
                               const std::filesystem::path& out) {
    detail::ensure_dirs(out);
    WeightSnapshot a = snapshot_from_named(load_checkpoint(snapshot_a));
    WeightSnapshot b = snapshot_from_named(load_checkpoint(snapshot_b));
    DriftReport report = drift_stats(a, b);
    write_drift_csv(out / "reports" / "drift.csv", report);

    json energy_summary = json::array();
    std::vector<double> pooled;
    for (const auto& [name, wa] : a.entries()) {
        auto [ma, va] = decompose_columns(wa);
        auto [mb, vb] = decompose_columns(b.get(name));
        EnergyCurve curve = residual_svd_energy(va, vb);
        std::string file = "energy_" + name + ".csv";
        for (char& ch : file)
            if (ch == '/' || ch == ' ') ch = '_';
        write_energy_csv(out / "reports" / file, curve);
        energy_summary.push_back(json{{"layer", name},
                                      {"rank_fraction_93", curve.rank_fraction_for_energy(0.93)}});
        pooled.insert(pooled.end(), curve.singular_values.begin(),
                      curve.singular_values.end());
    }
    std::sort(pooled.begin(), pooled.end(), std::greater<double>());
    EnergyCurve pooled_curve;
    pooled_curve.singular_values = pooled;
    double total = 0.0;
    for (double s : pooled) total += s * s;
    double acc = 0.0;
    pooled_curve.cumulative_energy.resize(pooled.size());
    for (std::size_t i = 0; i < pooled.size(); ++i) {
        acc += pooled[i] * pooled[i];
        pooled_curve.cumulative_energy[i] = total > 0.0 ? acc / total : 1.0;
    }
    if (!pooled_curve.cumulative_energy.empty()) pooled_curve.cumulative_energy.back() = 1.0;
    write_energy_csv(out / "reports" / "energy_pooled.csv", pooled_curve);

    json j = drift_to_json(report);
    j["energy"] = energy_summary;
    j["pooled_rank_fraction_93"] = pooled_curve.rank_fraction_for_energy(0.93);
    detail::write_text(out / "reports" / "drift.json", j.dump(2) + "\n");
    return report;
}

// Hybrid checkpoint: directions from one model, column norms from the
// other. Non-matrix entries (meta, biases) pass through from the
// direction source unchanged, in file order.
inline void run_swap(const std::filesystem::path& direction_path,
                     const std::filesystem::path& norm_path,
                     const std::filesystem::path& out_path) {
    NamedTensors dir_tensors = load_checkpoint(direction_path);
    NamedTensors norm_tensors = load_checkpoint(norm_path);
    WeightSnapshot dir_snap = snapshot_from_named(dir_tensors);
    WeightSnapshot norm_snap = snapshot_from_named(norm_tensors);
    WeightSnapshot hybrid = swap_components(dir_snap, norm_snap);

    NamedTensors out;
    for (const auto& [name, t] : dir_tensors.items()) {
        if (hybrid.contains(name))
            out.add(name, hybrid.get(name));
        else
            out.add(name, t);
    }
    std::filesystem::create_directories(out_path.parent_path());
    save_checkpoint(out_path, out);
}

struct AblateRunConfig {
    DistillRunConfig base;
    std::vector<std::string> kinds = {"lora", "dora", "dora-frozen-norm", "ft", "lorad"};
    std::vector<std::size_t> ranks = {4, 16, 32};

    static AblateRunConfig from_json(const json& j) {
        AblateRunConfig c;
        json base = j;
        if (base.contains("kinds")) {
            c.kinds = base.at("kinds").get<std::vector<std::string>>();
            base.erase("kinds");
        }
        if (base.contains("ranks")) {
            c.ranks = base.at("ranks").get<std::vector<std::size_t>>();
            base.erase("ranks");
        }
        c.base = DistillRunConfig::from_json(base);
        return c;
    }

    json to_json() const {
        json j = base.to_json();
        j["kinds"] = kinds;
        j["ranks"] = ranks;
        return j;
    }
};

inline std::vector<AblationCell> run_ablate(const AblateRunConfig& config,
                                            const std::filesystem::path& teacher_path,
                                            const std::filesystem::path& out) {
    detail::ensure_dirs(out);
    json echo = config.to_json();
    echo["teacher"] = teacher_path.string();
    detail::write_text(out / "config.json", echo.dump(2) + "\n");

    ModelBundle teacher = model_from_named(load_checkpoint(teacher_path));
    ToyDataset data = teacher.rebuild_dataset();
    config.base.core.validate(teacher.schedule.steps);

    std::vector<AdapterKind> kinds;
    for (const auto& name : config.kinds) kinds.push_back(adapter_kind_from_name(name));
    std::vector<AblationCell> table =
        ablate(teacher.model, teacher.schedule, data, config.base.core, kinds, config.ranks);

    write_ablation_csv(out / "reports" / "ablation.csv", table);
    detail::write_text(out / "reports" / "ablation.json", ablation_to_json(table).dump(2) + "\n");
    return table;
}

// Samples from a model checkpoint: one evaluation of the one-step
// generator when steps == 1, a DDIM trajectory otherwise.
inline std::filesystem::path run_sample(const std::filesystem::path& model_path, int n,
                                        int steps, double cfg_scale, std::uint64_t seed,
                                        const std::filesystem::path& out) {
    if (n < 0) throw ConfigError("sample: n must be >= 0");
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    detail::ensure_dirs(out);

    ModelBundle bundle = model_from_named(load_checkpoint(model_path));
    RngPool pool(seed);
    RngStream label_rng = pool.stream("sample.labels");
    RngStream noise_rng = pool.stream("sample.noise");

    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = label_rng.uniform_int(0, bundle.model.config().n_classes - 1);

    Tensor points;
    if (n == 0) {
        points = Tensor::zeros({2, 1}); // row-major holder; CSV writer emits no rows
    } else if (steps == 1) {
        StudentGenerator gen{bundle.model.clone_weights(), bundle.schedule,
                             bundle.schedule.steps};
        NoGradGuard ng;
        Tensor z = Tensor::randn({2, static_cast<std::size_t>(n)}, noise_rng);
        points = gen.generate(z, labels);
    } else {
        points = ddim_sample(bundle.model, bundle.schedule, steps, cfg_scale, labels, noise_rng);
    }

    const auto csv = out / "metrics" / "samples.csv";
    write_samples_csv(csv, points, labels);
    return csv;
}

} // namespace wadi
