#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wadi/adapters.hpp"
#include "wadi/optim.hpp"
#include "wadi/rng.hpp"
#include "wadi/tensor.hpp"

namespace wadi {

// Toy diffusion stack over 2-D synthetic data: a DDPM-style linear noise
// schedule, conditional datasets, an MLP noise predictor whose linear
// layers accept weight adapters, denoising-MSE training, and a
// deterministic DDIM sampler with classifier-free guidance.

class DiffusionError : public std::runtime_error {
  public:
    explicit DiffusionError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

struct DiffusionSchedule {
    int steps = 0;                  // T
    std::vector<double> beta;       // index 1..T (index 0 unused)
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative product, alpha_bar[0] = 1

    static DiffusionSchedule linear(int steps, double beta_start, double beta_end) {
        if (steps < 2)
            throw DiffusionError("schedule: need at least 2 steps, got " +
                                 std::to_string(steps));
        if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
            throw DiffusionError("schedule: require 0 < beta_start <= beta_end < 1, got [" +
                                 std::to_string(beta_start) + ", " + std::to_string(beta_end) +
                                 "]");
        DiffusionSchedule s;
        s.steps = steps;
        s.beta.assign(steps + 1, 0.0);
        s.alpha.assign(steps + 1, 1.0);
        s.alpha_bar.assign(steps + 1, 1.0);
        for (int t = 1; t <= steps; ++t) {
            s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) /
                                         static_cast<double>(steps - 1);
            s.alpha[t] = 1.0 - s.beta[t];
            s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
        }
        return s;
    }

    double abar(int t) const {
        if (t < 0 || t > steps)
            throw DiffusionError("schedule: timestep " + std::to_string(t) + " outside [0, " +
                                 std::to_string(steps) + "]");
        return alpha_bar[t];
    }

    void check_t(int t) const {
        if (t < 1 || t > steps)
            throw DiffusionError("timestep " + std::to_string(t) + " outside [1, " +
                                 std::to_string(steps) + "]");
    }
};

namespace detail {

// Per-sample coefficient row replicated down the feature rows, as a
// constant tensor (gradients never flow into schedule coefficients).
inline Tensor coeff_rows(const std::vector<double>& per_sample, std::size_t dim, DType dtype) {
    const std::size_t batch = per_sample.size();
    Tensor out = Tensor::zeros({dim, batch}, dtype);
    auto p = out.mutable_data();
    for (std::size_t r = 0; r < dim; ++r)
        for (std::size_t b = 0; b < batch; ++b) p[r * batch + b] = per_sample[b];
    return out;
}

} // namespace detail

// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample timesteps.
// Differentiable through x0 and eps.
inline Tensor q_sample(const DiffusionSchedule& schedule, const Tensor& x0,
                       const std::vector<int>& ts, const Tensor& eps) {
    if (x0.shape() != eps.shape())
        throw DiffusionError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                             shape_str(eps.shape()));
    if (x0.cols() != ts.size())
        throw DiffusionError("q_sample: batch size mismatch");
    std::vector<double> scale_x(ts.size()), scale_e(ts.size());
    for (std::size_t b = 0; b < ts.size(); ++b) {
        schedule.check_t(ts[b]);
        const double abar = schedule.abar(ts[b]);
        scale_x[b] = std::sqrt(abar);
        scale_e[b] = std::sqrt(1.0 - abar);
    }
    Tensor cx = detail::coeff_rows(scale_x, x0.rows(), x0.dtype());
    Tensor ce = detail::coeff_rows(scale_e, x0.rows(), x0.dtype());
    return add(mul(x0, cx), mul(eps, ce));
}

// x0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
inline Tensor eps_to_x0(const DiffusionSchedule& schedule, const Tensor& z_t,
                        const Tensor& eps_hat, const std::vector<int>& ts) {
    if (z_t.shape() != eps_hat.shape())
        throw DiffusionError("eps_to_x0: z " + shape_str(z_t.shape()) + " vs eps " +
                             shape_str(eps_hat.shape()));
    if (z_t.cols() != ts.size())
        throw DiffusionError("eps_to_x0: batch size mismatch");
    std::vector<double> inv_sqrt_abar(ts.size()), scale_e(ts.size());
    for (std::size_t b = 0; b < ts.size(); ++b) {
        const double abar = schedule.abar(ts[b]);
        if (abar == 0.0)
            throw DiffusionError("eps_to_x0: alpha_bar is zero at t=" + std::to_string(ts[b]));
        inv_sqrt_abar[b] = 1.0 / std::sqrt(abar);
        scale_e[b] = std::sqrt(1.0 - abar);
    }
    Tensor ce = detail::coeff_rows(scale_e, z_t.rows(), z_t.dtype());
    Tensor ci = detail::coeff_rows(inv_sqrt_abar, z_t.rows(), z_t.dtype());
    return mul(sub(z_t, mul(eps_hat, ce)), ci);
}

// eps_uncond + scale * (eps_cond - eps_uncond); scale 1 short-circuits to
// the conditional prediction exactly
inline Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
    if (eps_cond.shape() != eps_uncond.shape())
        throw DiffusionError("cfg_combine: shape mismatch");
    if (scale == 1.0) return eps_cond;
    return add(eps_uncond, wadi::scale(sub(eps_cond, eps_uncond), scale));
}

// ---------------------------------------------------------------------------
// toy datasets
// ---------------------------------------------------------------------------

enum class DatasetKind { GaussianMixture8, TwoMoons, SwissRoll };

inline const char* dataset_kind_name(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::GaussianMixture8: return "gaussian-mixture-8";
        case DatasetKind::TwoMoons: return "two-moons";
        case DatasetKind::SwissRoll: return "swiss-roll";
    }
    return "?";
}

inline DatasetKind dataset_kind_from_name(const std::string& name) {
    if (name == "gaussian-mixture-8") return DatasetKind::GaussianMixture8;
    if (name == "two-moons") return DatasetKind::TwoMoons;
    if (name == "swiss-roll") return DatasetKind::SwissRoll;
    throw DiffusionError("unknown dataset '" + name +
                         "' (expected gaussian-mixture-8, two-moons, swiss-roll)");
}

// 2-D labeled point set, normalized to zero mean and unit RMS per
// coordinate; the normalization constants ride along.
struct ToyDataset {
    DatasetKind kind = DatasetKind::GaussianMixture8;
    Tensor points;             // 2 x n, normalized
    std::vector<int> labels;   // class id per point
    int n_classes = 0;
    double mean[2] = {0.0, 0.0};
    double scale[2] = {1.0, 1.0};
    std::uint64_t seed = 0;

    std::size_t size() const { return labels.size(); }

    static ToyDataset make(DatasetKind kind, std::size_t n, std::uint64_t seed) {
        ToyDataset ds;
        ds.kind = kind;
        ds.seed = seed;
        RngStream rng(seed);
        std::vector<double> xs(n), ys(n);
        ds.labels.resize(n);
        switch (kind) {
            case DatasetKind::GaussianMixture8: {
                ds.n_classes = 8;
                const double radius = 2.0, sigma = 0.15;
                for (std::size_t i = 0; i < n; ++i) {
                    const int c = rng.uniform_int(0, 7);
                    const double a = 2.0 * M_PI * static_cast<double>(c) / 8.0;
                    xs[i] = radius * std::cos(a) + sigma * rng.normal();
                    ys[i] = radius * std::sin(a) + sigma * rng.normal();
                    ds.labels[i] = c;
                }
                break;
            }
            case DatasetKind::TwoMoons: {
                ds.n_classes = 2;
                const double noise = 0.07;
                for (std::size_t i = 0; i < n; ++i) {
                    const int c = rng.uniform_int(0, 1);
                    const double a = M_PI * rng.uniform();
                    if (c == 0) {
                        xs[i] = std::cos(a);
                        ys[i] = std::sin(a);
                    } else {
                        xs[i] = 1.0 - std::cos(a);
                        ys[i] = 0.5 - std::sin(a);
                    }
                    xs[i] += noise * rng.normal();
                    ys[i] += noise * rng.normal();
                    ds.labels[i] = c;
                }
                break;
            }
            case DatasetKind::SwissRoll: {
                // labels quantize the arm position into quarters
                ds.n_classes = 4;
                const double noise = 0.05;
                for (std::size_t i = 0; i < n; ++i) {
                    const double u = rng.uniform();
                    const double a = 1.5 * M_PI * (1.0 + 2.0 * u);
                    xs[i] = a * std::cos(a) / (4.5 * M_PI) + noise * rng.normal();
                    ys[i] = a * std::sin(a) / (4.5 * M_PI) + noise * rng.normal();
                    ds.labels[i] = std::min(3, static_cast<int>(u * 4.0));
                }
                break;
            }
        }
        // normalize each coordinate to zero mean, unit RMS
        double m0 = 0.0, m1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            m0 += xs[i];
            m1 += ys[i];
        }
        m0 /= static_cast<double>(n);
        m1 /= static_cast<double>(n);
        double v0 = 0.0, v1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v0 += (xs[i] - m0) * (xs[i] - m0);
            v1 += (ys[i] - m1) * (ys[i] - m1);
        }
        ds.mean[0] = m0;
        ds.mean[1] = m1;
        ds.scale[0] = std::sqrt(v0 / static_cast<double>(n));
        ds.scale[1] = std::sqrt(v1 / static_cast<double>(n));
        std::vector<double> data(2 * n);
        for (std::size_t i = 0; i < n; ++i) {
            data[i] = (xs[i] - ds.mean[0]) / ds.scale[0];
            data[n + i] = (ys[i] - ds.mean[1]) / ds.scale[1];
        }
        ds.points = Tensor::from_data({2, n}, std::move(data));
        return ds;
    }

    // class-conditional means in normalized coordinates; the mode centers
    // used by coverage metrics
    std::vector<std::pair<double, double>> class_means() const {
        std::vector<std::pair<double, double>> means(n_classes, {0.0, 0.0});
        std::vector<std::size_t> counts(n_classes, 0);
        const std::size_t n = size();
        const double* p = points.data().data();
        for (std::size_t i = 0; i < n; ++i) {
            means[labels[i]].first += p[i];
            means[labels[i]].second += p[n + i];
            counts[labels[i]]++;
        }
        for (int c = 0; c < n_classes; ++c) {
            if (counts[c] == 0) continue;
            means[c].first /= static_cast<double>(counts[c]);
            means[c].second /= static_cast<double>(counts[c]);
        }
        return means;
    }
};

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

// sin/cos positional features of the (integer) timesteps, dim x batch
inline Tensor sinusoidal_time_embedding(const std::vector<int>& ts, std::size_t dim,
                                        int /*total_steps*/) {
    const std::size_t batch = ts.size();
    const std::size_t half = dim / 2;
    Tensor out = Tensor::zeros({dim, batch});
    auto p = out.mutable_data();
    for (std::size_t j = 0; j < half; ++j) {
        const double freq =
            std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
        for (std::size_t b = 0; b < batch; ++b) {
            const double phase = static_cast<double>(ts[b]) * freq;
            p[(2 * j) * batch + b] = std::sin(phase);
            p[(2 * j + 1) * batch + b] = std::cos(phase);
        }
    }
    return out;
}

struct DenoiserConfig {
    int data_dim = 2;
    int hidden = 128;
    int n_hidden = 4;   // hidden linear layers of width `hidden`
    int t_embed = 32;
    int c_embed = 32;
    int n_classes = 8;  // null token is index n_classes
};

// One linear slot: a plain learnable weight, optionally shadowed by an
// adapter that reparameterizes it.
struct LinearLayer {
    Tensor weight; // d x k
    Tensor bias;   // rank-1, length d
    std::unique_ptr<Adapter> adapter;

    Tensor forward(const Tensor& x) const {
        Tensor y = adapter ? adapter->forward(x) : matmul(weight, x);
        // bias broadcast across the batch via an explicit rank-1 product
        Tensor b_col = reshape(bias, {bias.numel(), 1});
        Tensor ones_row = Tensor::ones({1, x.cols()}, x.dtype());
        return add(y, matmul(b_col, ones_row));
    }
};

// MLP noise predictor eps(z, c, t). Input features are the point, a
// sinusoidal time embedding and a learned class embedding (one extra
// null row enables classifier-free guidance).
class Denoiser {
  public:
    Denoiser() = default;

    Denoiser(const DenoiserConfig& config, int total_steps, RngStream& init_rng)
        : config_(config), total_steps_(total_steps) {
        const int in_dim = config.data_dim + config.t_embed + config.c_embed;
        std::vector<std::pair<int, int>> dims;
        dims.emplace_back(config.hidden, in_dim);
        for (int i = 1; i < config.n_hidden; ++i) dims.emplace_back(config.hidden, config.hidden);
        dims.emplace_back(config.data_dim, config.hidden);
        for (auto [d, k] : dims) {
            LinearLayer layer;
            // He-style fan-in scaling
            const double stddev = std::sqrt(2.0 / static_cast<double>(k));
            layer.weight = Tensor::randn({static_cast<std::size_t>(d),
                                          static_cast<std::size_t>(k)},
                                         init_rng, stddev, DType::Float64, true);
            layer.bias = Tensor::zeros({static_cast<std::size_t>(d)}, DType::Float64, true);
            layers_.push_back(std::move(layer));
        }
        cond_table_ = Tensor::randn({static_cast<std::size_t>(config.c_embed),
                                     static_cast<std::size_t>(config.n_classes + 1)},
                                    init_rng, 0.5, DType::Float64, true);
    }

    const DenoiserConfig& config() const { return config_; }
    int total_steps() const { return total_steps_; }
    int null_label() const { return config_.n_classes; }
    std::size_t n_layers() const { return layers_.size(); }
    std::vector<LinearLayer>& layers() { return layers_; }
    const std::vector<LinearLayer>& layers() const { return layers_; }
    Tensor& cond_table() { return cond_table_; }
    const Tensor& cond_table() const { return cond_table_; }

    static std::string layer_name(std::size_t i) { return "layers." + std::to_string(i); }

    // Predicted noise for a batch of points. labels may include the null
    // token (index n_classes) for unconditional prediction.
    Tensor eps(const Tensor& z, const std::vector<int>& labels,
               const std::vector<int>& ts) const {
        if (z.rank() != 2 || z.rows() != static_cast<std::size_t>(config_.data_dim))
            throw DiffusionError("denoiser: input shape " + shape_str(z.shape()) +
                                 " does not match data dim " + std::to_string(config_.data_dim));
        const std::size_t batch = z.cols();
        if (labels.size() != batch || ts.size() != batch)
            throw DiffusionError("denoiser: labels/timesteps do not match batch");

        Tensor t_emb = sinusoidal_time_embedding(ts, config_.t_embed, total_steps_);
        Tensor c_emb = matmul(cond_table_, one_hot(labels));
        Tensor h = concat_rows(concat_rows(z, t_emb), c_emb);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward(h);
            if (i + 1 < layers_.size()) h = silu(h);
        }
        return h;
    }

    // Trainable tensors: plain weights and biases when no adapter is
    // attached, otherwise each adapter's own parameters. The embedding
    // table trains only in the unadapted (teacher) configuration.
    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        bool any_adapter = false;
        for (const auto& layer : layers_) any_adapter |= (layer.adapter != nullptr);
        for (const auto& layer : layers_) {
            if (layer.adapter) {
                for (auto& t : layer.adapter->params()) out.push_back(t);
            } else if (!any_adapter) {
                out.push_back(layer.weight);
                out.push_back(layer.bias);
            }
        }
        if (!any_adapter) out.push_back(cond_table_);
        return out;
    }

    bool has_adapters() const {
        for (const auto& layer : layers_)
            if (layer.adapter) return true;
        return false;
    }

    // Deep copy of weights; adapters are not copied.
    Denoiser clone_weights() const {
        Denoiser out;
        out.config_ = config_;
        out.total_steps_ = total_steps_;
        for (const auto& layer : layers_) {
            LinearLayer copy;
            copy.weight = layer.weight.detach();
            copy.bias = layer.bias.detach();
            out.layers_.push_back(std::move(copy));
        }
        out.cond_table_ = cond_table_.detach();
        return out;
    }

    // Freeze every plain weight (adapters keep their own learnables).
    void freeze() {
        for (auto& layer : layers_) {
            layer.weight.set_requires_grad(false);
            layer.bias.set_requires_grad(false);
        }
        cond_table_.set_requires_grad(false);
    }

    // Attach adapters of one kind to every linear layer (or to the named
    // subset). Requested rank is clamped per layer to what its shape admits.
    void attach_adapters(AdapterKind kind, std::size_t rank, RngStream& init_rng,
                         const std::vector<std::string>& layer_filter = {}) {
        freeze();
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (!layer_filter.empty() &&
                std::find(layer_filter.begin(), layer_filter.end(), layer_name(i)) ==
                    layer_filter.end())
                continue;
            layers_[i].adapter = make_adapter(kind, layers_[i].weight, rank, init_rng);
        }
    }

    // Current effective weights folded into a plain copy.
    Denoiser merged_clone() const {
        Denoiser out = clone_weights();
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].adapter) out.layers_[i].weight = layers_[i].adapter->merge();
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> adapter_named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (!layers_[i].adapter) continue;
            for (auto& [suffix, t] : layers_[i].adapter->named_params())
                out.emplace_back(layer_name(i) + "." + suffix, t);
        }
        return out;
    }

    std::size_t adapter_param_count() const {
        std::size_t n = 0;
        for (const auto& layer : layers_)
            if (layer.adapter) n += layer.adapter->param_count();
        return n;
    }

  private:
    Tensor one_hot(const std::vector<int>& labels) const {
        const std::size_t tokens = static_cast<std::size_t>(config_.n_classes + 1);
        Tensor out = Tensor::zeros({tokens, labels.size()});
        auto p = out.mutable_data();
        for (std::size_t b = 0; b < labels.size(); ++b) {
            if (labels[b] < 0 || labels[b] > config_.n_classes)
                throw DiffusionError("denoiser: label " + std::to_string(labels[b]) +
                                     " outside [0, " + std::to_string(config_.n_classes) + "]");
            p[static_cast<std::size_t>(labels[b]) * labels.size() + b] = 1.0;
        }
        return out;
    }

    DenoiserConfig config_;
    int total_steps_ = 0;
    std::vector<LinearLayer> layers_;
    Tensor cond_table_;
};

// ---------------------------------------------------------------------------
// teacher training
// ---------------------------------------------------------------------------

struct TrainOptions {
    int steps = 5000;
    double lr = 1e-3;
    int batch = 128;
    double cond_drop_prob = 0.1;
    double weight_decay = 0.0;
};

// Denoising MSE on uniformly drawn timesteps; the condition is replaced
// by the null token with probability cond_drop_prob so the model supports
// classifier-free guidance later. Returns the per-step loss trace.
inline std::vector<double> train_denoiser(Denoiser& model, const ToyDataset& data,
                                          const DiffusionSchedule& schedule,
                                          const TrainOptions& options, const RngPool& rngs) {
    if (model.config().data_dim != 2)
        throw DiffusionError("train_denoiser: data dim mismatch");
    std::vector<double> trace;
    if (options.steps <= 0) return trace;

    RngStream data_rng = rngs.stream("teacher.data");
    RngStream noise_rng = rngs.stream("teacher.noise");
    RngStream t_rng = rngs.stream("teacher.t");
    RngStream drop_rng = rngs.stream("teacher.drop");

    AdamWOptions adam;
    adam.lr = options.lr;
    adam.weight_decay = options.weight_decay;
    AdamW optimizer(model.parameters(), adam);

    const std::size_t n = data.size();
    const double* points = data.points.data().data();
    trace.reserve(options.steps);

    for (int step = 0; step < options.steps; ++step) {
        const std::size_t batch = static_cast<std::size_t>(options.batch);
        std::vector<double> x0(2 * batch);
        std::vector<int> labels(batch), ts(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(data_rng.uniform_int(0, static_cast<int>(n) - 1));
            x0[b] = points[idx];
            x0[batch + b] = points[n + idx];
            labels[b] = drop_rng.uniform() < options.cond_drop_prob ? model.null_label()
                                                                    : data.labels[idx];
            ts[b] = t_rng.uniform_int(1, schedule.steps);
        }
        Tensor x0_t = Tensor::from_data({2, batch}, std::move(x0));
        Tensor eps = Tensor::randn({2, batch}, noise_rng);
        Tensor z_t = q_sample(schedule, x0_t, ts, eps);
        Tensor pred = model.eps(z_t, labels, ts);
        Tensor loss = mean(square(sub(pred, eps)));

        const double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw DiffusionError("train_denoiser: loss diverged at step " +
                                 std::to_string(step));
        trace.push_back(loss_value);

        optimizer.zero_grad();
        backward(loss);
        optimizer.step();
    }
    optimizer.zero_grad();
    return trace;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

// Deterministic DDIM (eta = 0) over an evenly spaced sub-schedule,
// starting from standard normal noise. One guided prediction per step.
inline Tensor ddim_sample(const Denoiser& model, const DiffusionSchedule& schedule, int n_steps,
                          double cfg_scale, const std::vector<int>& labels, RngStream& rng) {
    if (n_steps < 1 || n_steps > schedule.steps)
        throw DiffusionError("ddim_sample: n_steps " + std::to_string(n_steps) +
                             " outside [1, " + std::to_string(schedule.steps) + "]");
    const std::size_t batch = labels.size();
    const std::size_t dim = static_cast<std::size_t>(model.config().data_dim);
    NoGradGuard ng;

    Tensor z = Tensor::randn({dim, batch}, rng);
    std::vector<int> null_labels(batch, model.null_label());

    // sub-schedule T = t_0 > t_1 > ... > t_{n_steps} = 0
    std::vector<int> plan(n_steps + 1);
    for (int i = 0; i <= n_steps; ++i)
        plan[i] = static_cast<int>(std::llround(
            static_cast<double>(schedule.steps) *
            (1.0 - static_cast<double>(i) / static_cast<double>(n_steps))));
    plan[0] = schedule.steps;
    plan[n_steps] = 0;

    for (int i = 0; i < n_steps; ++i) {
        const int t = std::max(1, plan[i]);
        const int t_next = plan[i + 1];
        std::vector<int> ts(batch, t);
        Tensor eps_hat;
        if (cfg_scale == 1.0) {
            eps_hat = model.eps(z, labels, ts);
        } else {
            Tensor eps_cond = model.eps(z, labels, ts);
            Tensor eps_uncond = model.eps(z, null_labels, ts);
            eps_hat = cfg_combine(eps_cond, eps_uncond, cfg_scale);
        }
        Tensor x0_hat = eps_to_x0(schedule, z, eps_hat, ts);
        if (t_next == 0) {
            z = x0_hat;
        } else {
            const double abar_next = schedule.abar(t_next);
            z = add(scale(x0_hat, std::sqrt(abar_next)),
                    scale(eps_hat, std::sqrt(1.0 - abar_next)));
        }
    }
    return z;
}

} // namespace wadi
