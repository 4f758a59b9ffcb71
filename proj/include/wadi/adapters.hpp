#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wadi/rng.hpp"
#include "wadi/tensor.hpp"

namespace wadi {

// Weight adapters behind one contract: an effective weight W_eff built
// from a frozen base matrix plus a small set of learnable tensors.
//
// LoRaD rotates each column of the base weight by a block-diagonal
// stack of 2x2 plane rotations whose angle matrix is the low-rank
// product A*B. Rotations change only the direction of each column, so
// column norms are preserved for any angles. LoRA/DoRA/full-tune are
// the baselines the ablation driver compares against.

class AdapterError : public std::runtime_error {
  public:
    explicit AdapterError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class AdapterKind { LoRaD, LoRA, DoRA, DoRAFrozenNorm, FullTune };

inline const char* adapter_kind_name(AdapterKind kind) {
    switch (kind) {
        case AdapterKind::LoRaD: return "lorad";
        case AdapterKind::LoRA: return "lora";
        case AdapterKind::DoRA: return "dora";
        case AdapterKind::DoRAFrozenNorm: return "dora-frozen-norm";
        case AdapterKind::FullTune: return "ft";
    }
    return "?";
}

inline AdapterKind adapter_kind_from_name(const std::string& name) {
    if (name == "lorad") return AdapterKind::LoRaD;
    if (name == "lora") return AdapterKind::LoRA;
    if (name == "dora") return AdapterKind::DoRA;
    if (name == "dora-frozen-norm") return AdapterKind::DoRAFrozenNorm;
    if (name == "ft") return AdapterKind::FullTune;
    throw AdapterError("unknown adapter kind: " + name +
                       " (expected lorad, lora, dora, dora-frozen-norm, ft)");
}

// ---------------------------------------------------------------------------
// column rotations
// ---------------------------------------------------------------------------

// Reference path: build the d x d block-diagonal rotation matrix for each
// column explicitly and multiply. Slow by construction; serves as the
// correctness oracle for the fast path. Not differentiable.
inline Tensor block_rotation_reference(const Tensor& weight, const Tensor& theta) {
    if (weight.rank() != 2 || theta.rank() != 2)
        throw AdapterError("block_rotation_reference: expected matrices");
    const std::size_t d = weight.rows(), k = weight.cols();
    if (d % 2 != 0)
        throw AdapterError("block_rotation_reference: row count " + std::to_string(d) +
                           " must be even");
    if (theta.rows() != d / 2 || theta.cols() != k)
        throw AdapterError("block_rotation_reference: angle shape " + shape_str(theta.shape()) +
                           " does not match weight " + shape_str(weight.shape()));

    Tensor out = Tensor::zeros({d, k}, weight.dtype());
    std::vector<double> rot(d * d);
    std::vector<double> col(d), res(d);
    auto po = out.mutable_data();
    for (std::size_t i = 0; i < k; ++i) {
        std::fill(rot.begin(), rot.end(), 0.0);
        for (std::size_t j = 0; j < d / 2; ++j) {
            const double th = theta.at(j, i);
            const double c = std::cos(th), s = std::sin(th);
            rot[(2 * j) * d + (2 * j)] = c;
            rot[(2 * j) * d + (2 * j + 1)] = -s;
            rot[(2 * j + 1) * d + (2 * j)] = s;
            rot[(2 * j + 1) * d + (2 * j + 1)] = c;
        }
        for (std::size_t r = 0; r < d; ++r) col[r] = weight.at(r, i);
        for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t c2 = 0; c2 < d; ++c2) acc += rot[r * d + c2] * col[c2];
            res[r] = acc;
        }
        for (std::size_t r = 0; r < d; ++r) po[r * k + i] = res[r];
    }
    out.impl()->quantize_if_f32();
    return out;
}

// Production path: split rows into the first/second element of each 2x2
// block and combine element-wise with cos/sin of the angles.
// Differentiable through both the weight and the angles.
inline Tensor block_rotation_fast(const Tensor& weight, const Tensor& theta) {
    if (weight.rank() != 2 || theta.rank() != 2)
        throw AdapterError("block_rotation_fast: expected matrices");
    const std::size_t d = weight.rows(), k = weight.cols();
    if (d % 2 != 0)
        throw AdapterError("block_rotation_fast: row count " + std::to_string(d) +
                           " must be even");
    if (theta.rows() != d / 2 || theta.cols() != k)
        throw AdapterError("block_rotation_fast: angle shape " + shape_str(theta.shape()) +
                           " does not match weight " + shape_str(weight.shape()));

    Tensor w_odd = take_rows_strided(weight, 0);
    Tensor w_even = take_rows_strided(weight, 1);
    Tensor c = cos(theta);
    Tensor s = sin(theta);
    Tensor top = sub(mul(w_odd, c), mul(w_even, s));
    Tensor bottom = add(mul(w_odd, s), mul(w_even, c));
    return interleave_rows(top, bottom);
}

// ---------------------------------------------------------------------------
// adapter contract
// ---------------------------------------------------------------------------

class Adapter {
  public:
    virtual ~Adapter() = default;

    virtual AdapterKind kind() const = 0;

    // Effective weight with gradient tracking into the learnable tensors.
    virtual Tensor effective_weight() const = 0;

    // W_eff * x
    Tensor forward(const Tensor& x) const { return matmul(effective_weight(), x); }

    // Detached snapshot of the current effective weight.
    Tensor merge() const {
        NoGradGuard ng;
        return effective_weight().detach();
    }

    virtual std::size_t param_count() const = 0;

    // learnable tensors with their checkpoint name suffixes ("lorad.A", ...)
    virtual std::vector<std::pair<std::string, Tensor>> named_params() const = 0;

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    const Tensor& base() const { return base_; }

  protected:
    explicit Adapter(Tensor base) : base_(std::move(base)) {}
    Tensor base_;
};

class LoRaDAdapter final : public Adapter {
  public:
    // A starts as small Gaussian noise, B at zero, so the initial angles
    // are exactly zero and W_eff equals the base weight bit for bit.
    LoRaDAdapter(Tensor base, std::size_t rank, RngStream& init_rng, double init_stddev = 1e-3)
        : Adapter(std::move(base)), rank_(rank) {
        const std::size_t d = base_.rows(), k = base_.cols();
        if (d % 2 != 0)
            throw AdapterError("lorad: base weight has odd row count " + std::to_string(d));
        if (rank_ < 1 || rank_ > std::min(d / 2, k))
            throw AdapterError("lorad: rank " + std::to_string(rank_) +
                               " out of range [1, " + std::to_string(std::min(d / 2, k)) +
                               "] for base " + shape_str(base_.shape()));
        a_ = Tensor::randn({d / 2, rank_}, init_rng, init_stddev, base_.dtype(), true);
        b_ = Tensor::zeros({rank_, k}, base_.dtype(), true);
    }

    AdapterKind kind() const override { return AdapterKind::LoRaD; }

    // angle matrix theta = A * B, shape (d/2) x k
    Tensor angles() const { return matmul(a_, b_); }

    Tensor effective_weight() const override {
        if (!detail::grad_mode()) {
            if (!cache_.defined() || cache_a_version_ != a_.version() ||
                cache_b_version_ != b_.version()) {
                cache_ = block_rotation_fast(base_, angles()).detach();
                cache_a_version_ = a_.version();
                cache_b_version_ = b_.version();
            }
            return cache_;
        }
        return block_rotation_fast(base_, angles());
    }

    std::size_t param_count() const override {
        return rank_ * (base_.rows() / 2 + base_.cols());
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const override {
        return {{"lorad.A", a_}, {"lorad.B", b_}};
    }

    std::size_t rank() const { return rank_; }
    Tensor& factor_a() { return a_; }
    Tensor& factor_b() { return b_; }

  private:
    std::size_t rank_;
    Tensor a_, b_;
    mutable Tensor cache_;
    mutable std::uint64_t cache_a_version_ = ~0ull;
    mutable std::uint64_t cache_b_version_ = ~0ull;
};

class LoRAAdapter final : public Adapter {
  public:
    // scaling defaults to 1/rank (alpha/rank with alpha = 1)
    LoRAAdapter(Tensor base, std::size_t rank, RngStream& init_rng, double scaling = 0.0,
                double init_stddev = 1e-3)
        : Adapter(std::move(base)), rank_(rank),
          scaling_(scaling != 0.0 ? scaling : 1.0 / static_cast<double>(rank)) {
        const std::size_t d = base_.rows(), k = base_.cols();
        if (rank_ < 1 || rank_ > std::min(d, k))
            throw AdapterError("lora: rank " + std::to_string(rank_) + " out of range for base " +
                               shape_str(base_.shape()));
        a_ = Tensor::randn({d, rank_}, init_rng, init_stddev, base_.dtype(), true);
        b_ = Tensor::zeros({rank_, k}, base_.dtype(), true);
    }

    AdapterKind kind() const override { return AdapterKind::LoRA; }

    Tensor effective_weight() const override {
        return add(base_, scale(matmul(a_, b_), scaling_));
    }

    std::size_t param_count() const override { return rank_ * (base_.rows() + base_.cols()); }

    std::vector<std::pair<std::string, Tensor>> named_params() const override {
        return {{"lora.A", a_}, {"lora.B", b_}};
    }

    double scaling() const { return scaling_; }

  private:
    std::size_t rank_;
    double scaling_;
    Tensor a_, b_;
};

class DoRAAdapter final : public Adapter {
  public:
    DoRAAdapter(Tensor base, std::size_t rank, RngStream& init_rng, bool frozen_norm,
                double scaling = 0.0, double init_stddev = 1e-3)
        : Adapter(std::move(base)), rank_(rank), frozen_norm_(frozen_norm),
          scaling_(scaling != 0.0 ? scaling : 1.0 / static_cast<double>(rank)) {
        const std::size_t d = base_.rows(), k = base_.cols();
        if (rank_ < 1 || rank_ > std::min(d, k))
            throw AdapterError("dora: rank " + std::to_string(rank_) + " out of range for base " +
                               shape_str(base_.shape()));
        a_ = Tensor::randn({d, rank_}, init_rng, init_stddev, base_.dtype(), true);
        b_ = Tensor::zeros({rank_, k}, base_.dtype(), true);
        // magnitude starts at the base column norms; frozen variant keeps it there
        magnitude_ = l2norm(base_, 0).detach();
        magnitude_ = reshape(magnitude_, {1, k});
        magnitude_.set_requires_grad(!frozen_norm_);
    }

    AdapterKind kind() const override {
        return frozen_norm_ ? AdapterKind::DoRAFrozenNorm : AdapterKind::DoRA;
    }

    Tensor effective_weight() const override {
        const std::size_t d = base_.rows(), k = base_.cols();
        Tensor updated = add(base_, scale(matmul(a_, b_), scaling_));
        Tensor norms = reshape(l2norm(updated, 0), {1, k});
        // denominator clamped to avoid blowup on near-zero columns
        Tensor denom = clamp_min(norms, 1e-12);
        Tensor ones_col = Tensor::ones({d, 1}, base_.dtype());
        Tensor unit = div(updated, matmul(ones_col, denom));
        return mul(matmul(ones_col, magnitude_), unit);
    }

    std::size_t param_count() const override {
        const std::size_t lora_count = rank_ * (base_.rows() + base_.cols());
        return frozen_norm_ ? lora_count : lora_count + base_.cols();
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const override {
        std::vector<std::pair<std::string, Tensor>> out = {{"dora.A", a_}, {"dora.B", b_}};
        if (!frozen_norm_) out.emplace_back("dora.m", magnitude_);
        return out;
    }

    bool frozen_norm() const { return frozen_norm_; }

  private:
    std::size_t rank_;
    bool frozen_norm_;
    double scaling_;
    Tensor a_, b_, magnitude_;
};

class FullTuneAdapter final : public Adapter {
  public:
    explicit FullTuneAdapter(Tensor base) : Adapter(base) {
        weight_ = base.detach();
        weight_.set_requires_grad(true);
    }

    AdapterKind kind() const override { return AdapterKind::FullTune; }

    Tensor effective_weight() const override { return weight_; }

    std::size_t param_count() const override { return base_.rows() * base_.cols(); }

    std::vector<std::pair<std::string, Tensor>> named_params() const override {
        return {{"ft.W", weight_}};
    }

  private:
    Tensor weight_;
};

// Rank is clamped to what the base shape admits, so narrow layers (for
// example a 2-wide output projection) degrade to rank 1 instead of failing.
inline std::unique_ptr<Adapter> make_adapter(AdapterKind kind, const Tensor& base,
                                             std::size_t rank, RngStream& init_rng) {
    const std::size_t d = base.rows(), k = base.cols();
    switch (kind) {
        case AdapterKind::LoRaD: {
            const std::size_t r = std::min(rank, std::min(d / 2, k));
            return std::make_unique<LoRaDAdapter>(base, std::max<std::size_t>(1, r), init_rng);
        }
        case AdapterKind::LoRA: {
            const std::size_t r = std::min(rank, std::min(d, k));
            return std::make_unique<LoRAAdapter>(base, std::max<std::size_t>(1, r), init_rng);
        }
        case AdapterKind::DoRA:
        case AdapterKind::DoRAFrozenNorm: {
            const std::size_t r = std::min(rank, std::min(d, k));
            return std::make_unique<DoRAAdapter>(base, std::max<std::size_t>(1, r), init_rng,
                                                 kind == AdapterKind::DoRAFrozenNorm);
        }
        case AdapterKind::FullTune: return std::make_unique<FullTuneAdapter>(base);
    }
    throw AdapterError("unreachable adapter kind");
}

} // namespace wadi
