#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wadi/adapters.hpp"
#include "wadi/analysis.hpp"
#include "wadi/diffusion.hpp"
#include "wadi/metrics.hpp"
#include "wadi/optim.hpp"
#include "wadi/rng.hpp"
#include "wadi/tensor.hpp"

namespace wadi {

// One-step distillation of a multi-step diffusion teacher. The student
// generator and the fake model both wrap the frozen teacher with rotation
// adapters; training alternates denoising-MSE updates of the fake model
// with score-difference updates of the generator.

class DistillError : public std::runtime_error {
  public:
    explicit DistillError(const std::string& msg) : std::runtime_error(msg) {}
};

// Time weighting of the generator gradient. The lineage of this estimator
// never fixes omega(t); three interpretations are implemented:
//   constant         omega = 1, plain noise-space difference
//   sigma-over-alpha omega = sqrt(1-abar)/sqrt(abar), clean-sample-space
//                    difference
//   normalized       sigma-over-alpha rescaled per batch by
//                    1/mean|x - x0_teacher|
// At this scale the sigma-over-alpha factor concentrates nearly all
// gradient mass on the noisiest timesteps, whose teacher/fake difference
// carries almost no usable direction, so the constant weighting is the
// default.
enum class OmegaMode { Constant, SigmaOverAlpha, Normalized };

inline const char* omega_mode_name(OmegaMode mode) {
    switch (mode) {
        case OmegaMode::Constant: return "constant";
        case OmegaMode::SigmaOverAlpha: return "sigma-over-alpha";
        case OmegaMode::Normalized: return "normalized";
    }
    return "?";
}

inline OmegaMode omega_mode_from_name(const std::string& name) {
    if (name == "constant") return OmegaMode::Constant;
    if (name == "sigma-over-alpha") return OmegaMode::SigmaOverAlpha;
    if (name == "normalized") return OmegaMode::Normalized;
    throw DistillError("unknown omega mode '" + name +
                       "' (expected constant, sigma-over-alpha or normalized)");
}

struct DistillConfig {
    std::size_t rank_student = 16;
    std::size_t rank_fake = 2;
    double lr_student = 1e-4;
    double lr_fake = 1e-2;
    double cfg_scale = 1.5;
    int ratio = 1; // fake updates per generator update
    OmegaMode omega_mode = OmegaMode::Constant;
    int batch = 128;
    int epochs = 16;
    int steps_per_epoch = 250;
    int steps_override = 0; // when > 0, total generator steps directly
    double t_min_frac = 0.02;
    double t_max_frac = 0.98;
    int eval_interval = 500;
    int eval_samples = 2048;
    int teacher_sample_steps = 50;
    double weight_decay = 0.0;
    bool lr_decay = false; // linear decay of the student lr to 0 over the run
    std::uint64_t seed = 1234;
    AdapterKind student_adapter = AdapterKind::LoRaD; // swapped by the ablation driver
    std::vector<std::string> adapt_layers;            // empty = every linear layer

    int total_generator_steps() const {
        return steps_override > 0 ? steps_override : epochs * steps_per_epoch;
    }

    void validate(int schedule_steps) const {
        if (rank_student < 1 || rank_fake < 1) throw DistillError("config: ranks must be >= 1");
        if (ratio < 1) throw DistillError("config: ratio must be >= 1");
        if (batch < 1) throw DistillError("config: batch must be >= 1");
        if (!(t_min_frac >= 0.0) || !(t_max_frac <= 1.0) || !(t_min_frac <= t_max_frac))
            throw DistillError("config: t range must satisfy 0 <= min <= max <= 1");
        if (eval_interval < 1) throw DistillError("config: eval_interval must be >= 1");
        if (teacher_sample_steps < 1 || teacher_sample_steps > schedule_steps)
            throw DistillError("config: teacher_sample_steps outside schedule");
    }
};

// One-call generator: a single denoiser evaluation at the fixed timestep
// t* on pure noise, inverted to a clean sample.
struct StudentGenerator {
    Denoiser net;
    DiffusionSchedule schedule;
    int t_star = 0;

    Tensor generate(const Tensor& z_init, const std::vector<int>& labels) const {
        std::vector<int> ts(labels.size(), t_star);
        Tensor eps_hat = net.eps(z_init, labels, ts);
        return eps_to_x0(schedule, z_init, eps_hat, ts);
    }

    std::vector<Tensor> trainable() const { return net.parameters(); }
};

struct MetricsRecord {
    int step = 0;
    double gen_loss = 0.0;
    double fake_loss = 0.0;
    double w2 = 0.0;
    double mmd = 0.0;
    double coverage = 0.0;
};

struct DistillResult {
    StudentGenerator student;
    Denoiser fake;
    std::vector<MetricsRecord> trace;
};

namespace detail {

inline std::vector<double> omega_weights(const DiffusionSchedule& schedule,
                                         const std::vector<int>& ts) {
    std::vector<double> w(ts.size());
    for (std::size_t b = 0; b < ts.size(); ++b) {
        const double abar = schedule.abar(ts[b]);
        w[b] = std::sqrt(1.0 - abar) / std::sqrt(abar);
    }
    return w;
}

} // namespace detail

// Generator-side surrogate. generate() must build the gradient graph into
// the student parameters; teacher_eps and fake_eps are evaluated on a
// detached z_t and treated as constants. The returned scalar evaluates to
// mean_b 0.5*||g_b||^2 and its gradient w.r.t. the student equals the
// batch average of g_b * dG/dlambda, with
// g_b = omega(t_b) * (eps_teacher - eps_fake).
template <class GenerateFn, class TeacherFn, class FakeFn>
Tensor vsd_surrogate_loss(GenerateFn&& generate, TeacherFn&& teacher_eps, FakeFn&& fake_eps,
                          const DiffusionSchedule& schedule, const Tensor& z_init,
                          const std::vector<int>& labels, const std::vector<int>& ts,
                          const Tensor& noise, OmegaMode mode, double omega_scale = 1.0) {
    Tensor x = generate(z_init, labels);
    Tensor z_t = q_sample(schedule, x, ts, noise);
    Tensor z_t_const = z_t.detach();

    Tensor g;
    {
        NoGradGuard ng;
        Tensor eps_teacher = teacher_eps(z_t_const, labels, ts);
        Tensor eps_fake = fake_eps(z_t_const, labels, ts);
        Tensor diff = sub(eps_teacher, eps_fake);

        std::vector<double> w = mode == OmegaMode::Constant
                                    ? std::vector<double>(ts.size(), 1.0)
                                    : detail::omega_weights(schedule, ts);
        if (mode == OmegaMode::Normalized) {
            // scale by the batch-mean deviation between the generator
            // output and the teacher's denoised estimate
            Tensor x0_real = eps_to_x0(schedule, z_t_const, eps_teacher, ts);
            Tensor dev = sub(x.detach(), x0_real);
            double norm = 0.0;
            for (double v : dev.data()) norm += std::abs(v);
            norm /= static_cast<double>(dev.numel());
            const double inv = 1.0 / std::max(norm, 1e-8);
            for (double& wb : w) wb *= inv;
        }
        for (double& wb : w) wb *= omega_scale;
        g = mul(diff, detail::coeff_rows(w, x.rows(), x.dtype()));
    }

    // abort with coordinates on numeric failure
    {
        const auto gd = g.data();
        const std::size_t batch = g.cols();
        for (std::size_t i = 0; i < gd.size(); ++i)
            if (!std::isfinite(gd[i]))
                throw DistillError("vsd step: non-finite gradient at sample " +
                                   std::to_string(i % batch) + ", t=" +
                                   std::to_string(ts[i % batch]));
    }

    Tensor target = sub(x.detach(), g); // stopgrad(x - g)
    Tensor residual = sub(x, target);
    return scale(sum(square(residual)), 0.5 / static_cast<double>(x.cols()));
}

// Fake-model objective: denoising MSE on noised generator outputs. x must
// already be detached from the student; fake_eps builds the graph into the
// fake parameters.
template <class FakeFn>
Tensor fake_denoise_loss(FakeFn&& fake_eps, const DiffusionSchedule& schedule, const Tensor& x,
                         const std::vector<int>& labels, const std::vector<int>& ts,
                         const Tensor& noise) {
    Tensor z_t = q_sample(schedule, x, ts, noise);
    Tensor pred = fake_eps(z_t, labels, ts);
    return mean(square(sub(pred, noise)));
}

// ---------------------------------------------------------------------------
// the alternating loop
// ---------------------------------------------------------------------------

inline DistillResult distill(const Denoiser& teacher, const DiffusionSchedule& schedule,
                             const ToyDataset& dataset, const DistillConfig& config) {
    config.validate(schedule.steps);

    RngPool pool(config.seed);
    RngStream student_init = pool.stream("distill.student.init");
    RngStream fake_init = pool.stream("distill.fake.init");
    RngStream z_rng = pool.stream("distill.z");
    RngStream label_rng = pool.stream("distill.labels");
    RngStream t_rng = pool.stream("distill.t");
    RngStream noise_rng = pool.stream("distill.noise");
    RngStream fake_z_rng = pool.stream("distill.fake.z");
    RngStream fake_label_rng = pool.stream("distill.fake.labels");
    RngStream fake_t_rng = pool.stream("distill.fake.t");
    RngStream fake_noise_rng = pool.stream("distill.fake.noise");
    RngStream teacher_sample_rng = pool.stream("distill.teacher.sample");
    RngStream eval_rng = pool.stream("distill.eval");

    DistillResult result;
    result.student.net = teacher.clone_weights();
    result.student.net.attach_adapters(config.student_adapter, config.rank_student, student_init,
                                       config.adapt_layers);
    result.student.schedule = schedule;
    result.student.t_star = schedule.steps;

    result.fake = teacher.clone_weights();
    result.fake.attach_adapters(AdapterKind::LoRaD, config.rank_fake, fake_init,
                                config.adapt_layers);

    AdamWOptions student_adam{.lr = config.lr_student, .weight_decay = config.weight_decay};
    AdamWOptions fake_adam{.lr = config.lr_fake, .weight_decay = config.weight_decay};
    AdamW student_opt(result.student.trainable(), student_adam);
    AdamW fake_opt(result.fake.parameters(), fake_adam);

    const int total_steps = config.total_generator_steps();
    const std::size_t batch = static_cast<std::size_t>(config.batch);
    const int t_lo = std::max(1, static_cast<int>(std::llround(config.t_min_frac *
                                                               schedule.steps)));
    const int t_hi = std::min(schedule.steps, static_cast<int>(std::llround(
                                                  config.t_max_frac * schedule.steps)));

    // fixed evaluation inputs: the same noise, conditions and teacher
    // samples at every eval, so the trace reflects the model alone
    const std::size_t eval_n = static_cast<std::size_t>(config.eval_samples);
    std::vector<int> eval_labels(eval_n);
    for (std::size_t i = 0; i < eval_n; ++i)
        eval_labels[i] = eval_rng.uniform_int(0, dataset.n_classes - 1);
    Tensor eval_z = Tensor::randn({2, eval_n}, eval_rng);
    Tensor teacher_samples = ddim_sample(teacher, schedule, config.teacher_sample_steps,
                                         config.cfg_scale, eval_labels, teacher_sample_rng);
    const auto modes = dataset.class_means();

    auto teacher_eps_cfg = [&](const Tensor& z, const std::vector<int>& labels,
                               const std::vector<int>& ts) {
        if (config.cfg_scale == 1.0) return teacher.eps(z, labels, ts);
        std::vector<int> nulls(labels.size(), teacher.null_label());
        return cfg_combine(teacher.eps(z, labels, ts), teacher.eps(z, nulls, ts),
                           config.cfg_scale);
    };
    auto fake_eps = [&](const Tensor& z, const std::vector<int>& labels,
                        const std::vector<int>& ts) {
        return result.fake.eps(z, labels, ts);
    };
    auto generate = [&](const Tensor& z, const std::vector<int>& labels) {
        return result.student.generate(z, labels);
    };

    auto draw_labels = [&](RngStream& rng) {
        std::vector<int> labels(batch);
        for (std::size_t b = 0; b < batch; ++b)
            labels[b] = rng.uniform_int(0, dataset.n_classes - 1);
        return labels;
    };
    auto draw_ts = [&](RngStream& rng) {
        std::vector<int> ts(batch);
        for (std::size_t b = 0; b < batch; ++b) ts[b] = rng.uniform_int(t_lo, t_hi);
        return ts;
    };

    double gen_loss_acc = 0.0, fake_loss_acc = 0.0;
    int gen_loss_count = 0, fake_loss_count = 0;

    auto record_metrics = [&](int step) {
        MetricsRecord rec;
        rec.step = step;
        if (gen_loss_count == 0) {
            // probe losses without updating anything
            NoGradGuard ng;
            Tensor z = Tensor::randn({2, batch}, eval_rng);
            std::vector<int> labels = draw_labels(eval_rng);
            std::vector<int> ts = draw_ts(eval_rng);
            Tensor noise = Tensor::randn({2, batch}, eval_rng);
            Tensor gen_loss = vsd_surrogate_loss(generate, teacher_eps_cfg, fake_eps, schedule,
                                                 z, labels, ts, noise, config.omega_mode);
            Tensor x = result.student.generate(z, labels);
            Tensor fake_loss =
                fake_denoise_loss(fake_eps, schedule, x.detach(), labels, ts, noise);
            rec.gen_loss = gen_loss.item();
            rec.fake_loss = fake_loss.item();
        } else {
            rec.gen_loss = gen_loss_acc / gen_loss_count;
            rec.fake_loss = fake_loss_count > 0 ? fake_loss_acc / fake_loss_count : 0.0;
        }
        gen_loss_acc = fake_loss_acc = 0.0;
        gen_loss_count = fake_loss_count = 0;

        NoGradGuard ng;
        Tensor student_samples = result.student.generate(eval_z, eval_labels);
        DistributionMetrics m = eval_distribution(student_samples, teacher_samples, modes);
        rec.w2 = m.w2;
        rec.mmd = m.mmd;
        rec.coverage = m.coverage;
        if (!std::isfinite(rec.w2) || !std::isfinite(rec.mmd))
            throw DistillError("distill: non-finite metrics at step " + std::to_string(step));
        result.trace.push_back(rec);
    };

    for (int step = 0; step <= total_steps; ++step) {
        if (step % config.eval_interval == 0 || step == total_steps) record_metrics(step);
        if (step == total_steps) break;

        for (int r = 0; r < config.ratio; ++r) {
            Tensor z = Tensor::randn({2, batch}, fake_z_rng);
            std::vector<int> labels = draw_labels(fake_label_rng);
            std::vector<int> ts = draw_ts(fake_t_rng);
            Tensor noise = Tensor::randn({2, batch}, fake_noise_rng);
            Tensor x;
            {
                NoGradGuard ng;
                x = result.student.generate(z, labels);
            }
            Tensor loss = fake_denoise_loss(fake_eps, schedule, x, labels, ts, noise);
            const double value = loss.item();
            if (!std::isfinite(value))
                throw DistillError("distill: fake loss diverged at step " +
                                   std::to_string(step));
            fake_loss_acc += value;
            fake_loss_count++;
            fake_opt.zero_grad();
            backward(loss);
            fake_opt.step();
            fake_opt.zero_grad();
        }

        {
            if (config.lr_decay)
                student_opt.set_lr(config.lr_student *
                                   (1.0 - static_cast<double>(step) / total_steps));
            Tensor z = Tensor::randn({2, batch}, z_rng);
            std::vector<int> labels = draw_labels(label_rng);
            std::vector<int> ts = draw_ts(t_rng);
            Tensor noise = Tensor::randn({2, batch}, noise_rng);
            Tensor loss = vsd_surrogate_loss(generate, teacher_eps_cfg, fake_eps, schedule, z,
                                             labels, ts, noise, config.omega_mode);
            const double value = loss.item();
            if (!std::isfinite(value))
                throw DistillError("distill: generator loss diverged at step " +
                                   std::to_string(step));
            gen_loss_acc += value;
            gen_loss_count++;
            student_opt.zero_grad();
            backward(loss);
            student_opt.step();
            student_opt.zero_grad();
        }
    }

    return result;
}

// ---------------------------------------------------------------------------
// ablation driver
// ---------------------------------------------------------------------------

struct AblationCell {
    std::string label;
    std::size_t param_count = 0;
    double w2 = 0.0;
    double mmd = 0.0;
    double coverage = 0.0;
    double norm_mean_pct = 0.0;      // NM
    double direction_mean_pct = 0.0; // DM
    bool ok = false;
    std::string error;
};

namespace detail {

inline WeightSnapshot linear_weight_snapshot(const Denoiser& model) {
    WeightSnapshot snap;
    for (std::size_t i = 0; i < model.n_layers(); ++i)
        snap.add(Denoiser::layer_name(i) + ".weight", model.layers()[i].weight.detach());
    return snap;
}

} // namespace detail

// Runs one distillation per adapter kind (at the base rank) and one per
// rank in the grid (rotation adapter), all against the same teacher and
// seed. A failing cell records its error and the drivers moves on.
inline std::vector<AblationCell> ablate(const Denoiser& teacher,
                                        const DiffusionSchedule& schedule,
                                        const ToyDataset& dataset, const DistillConfig& base,
                                        const std::vector<AdapterKind>& kinds,
                                        std::vector<std::size_t> rank_grid) {
    std::vector<AblationCell> table;
    std::sort(rank_grid.begin(), rank_grid.end());

    WeightSnapshot teacher_snap = detail::linear_weight_snapshot(teacher);

    auto run_cell = [&](const std::string& label, const DistillConfig& config) {
        AblationCell cell;
        cell.label = label;
        try {
            DistillResult run = distill(teacher, schedule, dataset, config);
            cell.param_count = run.student.net.adapter_param_count();
            const MetricsRecord& last = run.trace.back();
            cell.w2 = last.w2;
            cell.mmd = last.mmd;
            cell.coverage = last.coverage;
            Denoiser merged = run.student.net.merged_clone();
            DriftReport drift =
                drift_stats(detail::linear_weight_snapshot(merged), teacher_snap);
            cell.norm_mean_pct = drift.norm_mean;
            cell.direction_mean_pct = drift.direction_mean;
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
        }
        table.push_back(std::move(cell));
    };

    for (AdapterKind kind : kinds) {
        DistillConfig config = base;
        config.student_adapter = kind;
        run_cell(adapter_kind_name(kind), config);
    }
    for (std::size_t rank : rank_grid) {
        DistillConfig config = base;
        config.student_adapter = AdapterKind::LoRaD;
        config.rank_student = rank;
        run_cell("rank-" + std::to_string(rank), config);
    }
    return table;
}

} // namespace wadi
