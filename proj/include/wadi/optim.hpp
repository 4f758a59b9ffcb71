#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "wadi/tensor.hpp"

namespace wadi {

class OptimizerError : public std::runtime_error {
  public:
    explicit OptimizerError(const std::string& msg) : std::runtime_error(msg) {}
};

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam. Decay is applied directly to the parameter
// before the moment update (p *= 1 - lr*wd), so a zero gradient still
// shrinks the parameter by exactly lr*wd*p. step() leaves gradients
// untouched; the caller clears them.
class AdamW {
  public:
    AdamW(std::vector<Tensor> params, AdamWOptions options = {})
        : params_(std::move(params)), options_(options) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), 0.0);
            v_[i].assign(params_[i].numel(), 0.0);
        }
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (!params_[i].has_grad())
                throw OptimizerError("adamw: parameter " + std::to_string(i) +
                                     " has no gradient");

        ++step_count_;
        const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));

        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            const auto g = p.grad().data();
            auto w = p.mutable_data();
            double* m = m_[i].data();
            double* v = v_[i].data();
            for (std::size_t j = 0; j < w.size(); ++j) {
                if (options_.weight_decay != 0.0)
                    w[j] *= 1.0 - options_.lr * options_.weight_decay;
                m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
                v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
                const double m_hat = m[j] / bc1;
                const double v_hat = v[j] / bc2;
                w[j] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
            }
            p.impl()->quantize_if_f32();
        }
    }

    long step_count() const { return step_count_; }
    const AdamWOptions& options() const { return options_; }
    std::vector<Tensor>& params() { return params_; }

    void set_lr(double lr) { options_.lr = lr; }

    void zero_grad() {
        for (Tensor& p : params_) p.clear_grad();
    }

  private:
    std::vector<Tensor> params_;
    AdamWOptions options_;
    std::vector<std::vector<double>> m_, v_;
    long step_count_ = 0;
};

} // namespace wadi
