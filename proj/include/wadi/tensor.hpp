#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "wadi/rng.hpp"

namespace wadi {

// Dense row-major tensors with dynamic reverse-mode differentiation.
// The op set is deliberately small: matrix product, element-wise
// arithmetic with exact-shape or scalar broadcast only, reductions, and
// the row split/interleave moves the rotation adapters need. History is
// recorded per forward pass and released by backward().

enum class DType : std::uint32_t { Float32 = 0, Float64 = 1 };

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
  public:
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace detail {

// Thread-local switch: ops record history only while enabled.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::Float64;
    std::vector<double> data;
    bool requires_grad = false;
    std::uint64_t version = 0; // bumped on in-place mutation
    std::shared_ptr<TensorImpl> grad;

    // autograd edges; cleared after backward()
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t numel() const { return data.size(); }

    // float32-tagged tensors hold values already rounded to float precision
    void quantize_if_f32() {
        if (dtype == DType::Float32)
            for (double& v : data) v = static_cast<double>(static_cast<float>(v));
    }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = DType::Float64, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->dtype = dtype;
        impl->data.assign(shape_numel(impl->shape), 0.0);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape shape, double value, DType dtype = DType::Float64,
                       bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), dtype, requires_grad);
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        t.impl_->quantize_if_f32();
        return t;
    }

    static Tensor ones(Shape shape, DType dtype = DType::Float64, bool requires_grad = false) {
        return full(std::move(shape), 1.0, dtype, requires_grad);
    }

    static Tensor scalar(double value, DType dtype = DType::Float64, bool requires_grad = false) {
        return full(Shape{}, value, dtype, requires_grad);
    }

    static Tensor from_data(Shape shape, std::vector<double> values, DType dtype = DType::Float64,
                            bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw TensorError("from_data: " + std::to_string(values.size()) +
                              " values do not fill shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->dtype = dtype;
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        impl->quantize_if_f32();
        return Tensor(std::move(impl));
    }

    static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0,
                        DType dtype = DType::Float64, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), dtype, requires_grad);
        for (double& v : t.impl_->data) v = stddev * rng.normal();
        t.impl_->quantize_if_f32();
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    DType dtype() const { return impl_->dtype; }
    std::uint64_t version() const { return impl_->version; }

    std::size_t rows() const {
        require_rank2("rows");
        return impl_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return impl_->shape[1];
    }

    std::span<const double> data() const { return impl_->data; }
    // Mutable access bumps the version stamp (cache invalidation).
    std::span<double> mutable_data() {
        impl_->version++;
        return impl_->data;
    }

    double item() const {
        if (numel() != 1)
            throw TensorError("item() on tensor of shape " + shape_str(impl_->shape));
        return impl_->data[0];
    }

    double at(std::size_t i, std::size_t j) const {
        require_rank2("at");
        return impl_->data[i * impl_->shape[1] + j];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }

    bool has_grad() const { return impl_->grad != nullptr; }
    Tensor grad() const {
        if (!impl_->grad) throw TensorError("tensor has no gradient");
        return Tensor(impl_->grad);
    }
    void clear_grad() { impl_->grad.reset(); }

    Tensor detach() const {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = impl_->shape;
        impl->dtype = impl_->dtype;
        impl->data = impl_->data;
        return Tensor(std::move(impl));
    }

    Tensor astype(DType dtype) const {
        Tensor t = detach();
        t.impl_->dtype = dtype;
        t.impl_->quantize_if_f32();
        return t;
    }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  private:
    void require_rank2(const char* what) const {
        if (impl_->shape.size() != 2)
            throw TensorError(std::string(what) + ": tensor is not a matrix, shape " +
                              shape_str(impl_->shape));
    }

    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw TensorError(std::string(op) + ": dtype mismatch");
}

inline Tensor make_result(Shape shape, DType dtype) {
    return Tensor::zeros(std::move(shape), dtype, false);
}

inline std::shared_ptr<TensorImpl>& ensure_grad(TensorImpl& impl) {
    if (!impl.grad) {
        auto g = std::make_shared<TensorImpl>();
        g->shape = impl.shape;
        g->dtype = impl.dtype;
        g->data.assign(impl.data.size(), 0.0);
        impl.grad = std::move(g);
    }
    return impl.grad;
}

inline bool should_track(std::initializer_list<const Tensor*> inputs) {
    if (!grad_mode()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void attach(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
    out.impl()->parents = std::move(parents);
    out.impl()->backward_fn = std::move(backward_fn);
    out.impl()->requires_grad = true;
}

} // namespace detail

// ---------------------------------------------------------------------------
// matrix product
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw TensorError("matmul: expected matrices, got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    if (a.cols() != b.rows())
        throw TensorError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    detail::check_same_dtype(a, b, "matmul");

    const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
    Tensor out = detail::make_result({m, p}, a.dtype());
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.mutable_data().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = pc + i * p;
            for (std::size_t k = 0; k < n; ++k) {
                const double aik = pa[i * n + k];
                if (aik == 0.0) continue;
                const double* bk = pb + k * p;
                for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
            }
        }
        out.impl()->quantize_if_f32();
    }

    if (detail::should_track({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        bool need_a = a.requires_grad();
        bool need_b = b.requires_grad();
        detail::attach(out, {ai, bi}, [ai, bi, m, n, p, need_a, need_b](TensorImpl& self) {
            const double* g = self.grad->data.data();
            if (need_a) {
                // dA = dC * B^T
                double* da = detail::ensure_grad(*ai)->data.data();
                const double* pb = bi->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t k = 0; k < n; ++k) {
                        double acc = 0.0;
                        const double* gi = g + i * p;
                        const double* bk = pb + k * p;
                        for (std::size_t j = 0; j < p; ++j) acc += gi[j] * bk[j];
                        da[i * n + k] += acc;
                    }
            }
            if (need_b) {
                // dB = A^T * dC
                double* db = detail::ensure_grad(*bi)->data.data();
                const double* pa = ai->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* gi = g + i * p;
                    for (std::size_t k = 0; k < n; ++k) {
                        const double aik = pa[i * n + k];
                        if (aik == 0.0) continue;
                        double* bk = db + k * p;
                        for (std::size_t j = 0; j < p; ++j) bk[j] += aik * gi[j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// element-wise binary ops (exact-shape or scalar broadcast only)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul, Div };

inline void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return;
    if (a.numel() == 1 || b.numel() == 1) return;
    throw TensorError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " are neither equal nor scalar");
}

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    check_broadcast(a, b, name);
    check_same_dtype(a, b, name);
    const bool a_scalar = a.numel() == 1 && a.shape() != b.shape();
    const bool b_scalar = b.numel() == 1 && a.shape() != b.shape();
    const Tensor& big = a_scalar ? b : a;

    Tensor out = make_result(big.shape(), a.dtype());
    const std::size_t n = out.numel();
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.mutable_data().data();
        for (std::size_t i = 0; i < n; ++i) {
            const double x = pa[a_scalar ? 0 : i];
            const double y = pb[b_scalar ? 0 : i];
            switch (op) {
                case BinOp::Add: pc[i] = x + y; break;
                case BinOp::Sub: pc[i] = x - y; break;
                case BinOp::Mul: pc[i] = x * y; break;
                case BinOp::Div: pc[i] = x / y; break;
            }
        }
        out.impl()->quantize_if_f32();
    }

    if (should_track({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        bool need_a = a.requires_grad();
        bool need_b = b.requires_grad();
        attach(out, {ai, bi}, [ai, bi, op, n, a_scalar, b_scalar, need_a, need_b](TensorImpl& self) {
            const double* g = self.grad->data.data();
            const double* pa = ai->data.data();
            const double* pb = bi->data.data();
            if (need_a) {
                double* da = ensure_grad(*ai)->data.data();
                for (std::size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    double d;
                    switch (op) {
                        case BinOp::Add:
                        case BinOp::Sub: d = gi; break;
                        case BinOp::Mul: d = gi * pb[b_scalar ? 0 : i]; break;
                        case BinOp::Div: d = gi / pb[b_scalar ? 0 : i]; break;
                    }
                    da[a_scalar ? 0 : i] += d;
                }
            }
            if (need_b) {
                double* db = ensure_grad(*bi)->data.data();
                for (std::size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    const double x = pa[a_scalar ? 0 : i];
                    const double y = pb[b_scalar ? 0 : i];
                    double d;
                    switch (op) {
                        case BinOp::Add: d = gi; break;
                        case BinOp::Sub: d = -gi; break;
                        case BinOp::Mul: d = gi * x; break;
                        case BinOp::Div: d = -gi * x / (y * y); break;
                    }
                    db[b_scalar ? 0 : i] += d;
                }
            }
        });
    }
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinOp::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinOp::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinOp::Mul, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinOp::Div, "div");
}

// multiply by a plain scalar constant
inline Tensor scale(const Tensor& a, double c) {
    Tensor out = detail::make_result(a.shape(), a.dtype());
    const std::size_t n = a.numel();
    const double* pa = a.data().data();
    double* pc = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) pc[i] = c * pa[i];
    out.impl()->quantize_if_f32();

    if (detail::should_track({&a})) {
        auto ai = a.impl();
        detail::attach(out, {ai}, [ai, c, n](TensorImpl& self) {
            double* da = detail::ensure_grad(*ai)->data.data();
            const double* g = self.grad->data.data();
            for (std::size_t i = 0; i < n; ++i) da[i] += c * g[i];
        });
    }
    return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// element-wise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    Tensor out = make_result(a.shape(), a.dtype());
    const std::size_t n = a.numel();
    const double* pa = a.data().data();
    double* pc = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) pc[i] = fwd(pa[i]);
    out.impl()->quantize_if_f32();

    if (should_track({&a})) {
        auto ai = a.impl();
        // output values are read back through `self`; capturing the output
        // impl here would form a reference cycle
        attach(out, {ai}, [ai, bwd, n](TensorImpl& self) {
            double* da = ensure_grad(*ai)->data.data();
            const double* g = self.grad->data.data();
            const double* x = ai->data.data();
            const double* y = self.data.data();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bwd(x[i], y[i]);
        });
    }
    return out;
}

} // namespace detail

inline Tensor sin(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::sin(x); },
        [](double x, double) { return std::cos(x); });
}

inline Tensor cos(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::cos(x); },
        [](double x, double) { return -std::sin(x); });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

// max(x, c) with zero gradient on the clamped side
inline Tensor clamp_min(const Tensor& a, double floor) {
    return detail::unary_op(
        a, [floor](double x) { return x < floor ? floor : x; },
        [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

// SiLU x * sigmoid(x), composed from primitives
inline Tensor silu(const Tensor& a) { return mul(a, sigmoid(a)); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

inline void check_axis(const Tensor& a, std::size_t axis, const char* op) {
    if (axis >= a.rank())
        throw TensorError(std::string(op) + ": axis " + std::to_string(axis) +
                          " is invalid for shape " + shape_str(a.shape()));
}

// shape with one axis removed
inline Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out.push_back(s[i]);
    return out;
}

// row-major strides
inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Maps flat index -> flat index in the axis-reduced shape.
inline std::size_t reduced_index(std::size_t flat, const Shape& shape,
                                 const std::vector<std::size_t>& strides, std::size_t axis,
                                 const std::vector<std::size_t>& out_strides) {
    std::size_t out = 0, oi = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        const std::size_t coord = (flat / strides[d]) % shape[d];
        if (d == axis) continue;
        out += coord * out_strides[oi++];
    }
    return out;
}

} // namespace detail

inline Tensor sum(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    if (!axis) {
        Tensor out = detail::make_result(Shape{}, a.dtype());
        double acc = 0.0;
        for (double v : a.data()) acc += v;
        out.mutable_data()[0] = acc;
        out.impl()->quantize_if_f32();
        if (detail::should_track({&a})) {
            auto ai = a.impl();
            detail::attach(out, {ai}, [ai](TensorImpl& self) {
                double* da = detail::ensure_grad(*ai)->data.data();
                const double g = self.grad->data[0];
                for (std::size_t i = 0; i < ai->data.size(); ++i) da[i] += g;
            });
        }
        return out;
    }

    detail::check_axis(a, *axis, "sum");
    const Shape out_shape = detail::drop_axis(a.shape(), *axis);
    const auto strides = detail::strides_of(a.shape());
    const auto out_strides = detail::strides_of(out_shape);
    Tensor out = detail::make_result(out_shape, a.dtype());
    {
        double* pc = out.mutable_data().data();
        const double* pa = a.data().data();
        for (std::size_t i = 0; i < a.numel(); ++i)
            pc[detail::reduced_index(i, a.shape(), strides, *axis, out_strides)] += pa[i];
        out.impl()->quantize_if_f32();
    }
    if (detail::should_track({&a})) {
        auto ai = a.impl();
        const Shape shape = a.shape();
        const std::size_t ax = *axis;
        detail::attach(out, {ai}, [ai, shape, strides, ax, out_strides](TensorImpl& self) {
            double* da = detail::ensure_grad(*ai)->data.data();
            const double* g = self.grad->data.data();
            for (std::size_t i = 0; i < ai->data.size(); ++i)
                da[i] += g[detail::reduced_index(i, shape, strides, ax, out_strides)];
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    if (!axis) return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
    detail::check_axis(a, *axis, "mean");
    return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[*axis]));
}

// Euclidean norm, either of the whole tensor or per slice along an axis.
inline Tensor l2norm(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    if (!axis) {
        Tensor out = detail::make_result(Shape{}, a.dtype());
        double acc = 0.0;
        for (double v : a.data()) acc += v * v;
        out.mutable_data()[0] = std::sqrt(acc);
        out.impl()->quantize_if_f32();
        if (detail::should_track({&a})) {
            auto ai = a.impl();
            detail::attach(out, {ai}, [ai](TensorImpl& self) {
                double* da = detail::ensure_grad(*ai)->data.data();
                const double g = self.grad->data[0];
                const double norm = self.data[0];
                if (norm == 0.0) return;
                const double* x = ai->data.data();
                for (std::size_t i = 0; i < ai->data.size(); ++i) da[i] += g * x[i] / norm;
            });
        }
        return out;
    }

    detail::check_axis(a, *axis, "l2norm");
    const Shape out_shape = detail::drop_axis(a.shape(), *axis);
    const auto strides = detail::strides_of(a.shape());
    const auto out_strides = detail::strides_of(out_shape);
    Tensor out = detail::make_result(out_shape, a.dtype());
    {
        double* pc = out.mutable_data().data();
        const double* pa = a.data().data();
        for (std::size_t i = 0; i < a.numel(); ++i) {
            const std::size_t o = detail::reduced_index(i, a.shape(), strides, *axis, out_strides);
            pc[o] += pa[i] * pa[i];
        }
        for (std::size_t i = 0; i < out.numel(); ++i) pc[i] = std::sqrt(pc[i]);
        out.impl()->quantize_if_f32();
    }
    if (detail::should_track({&a})) {
        auto ai = a.impl();
        const Shape shape = a.shape();
        const std::size_t ax = *axis;
        detail::attach(out, {ai}, [ai, shape, strides, ax, out_strides](TensorImpl& self) {
            double* da = detail::ensure_grad(*ai)->data.data();
            const double* g = self.grad->data.data();
            const double* x = ai->data.data();
            const double* norms = self.data.data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) {
                const std::size_t o = detail::reduced_index(i, shape, strides, ax, out_strides);
                if (norms[o] != 0.0) da[i] += g[o] * x[i] / norms[o];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(shape));
    Tensor out = detail::make_result(shape, a.dtype());
    std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
    if (detail::should_track({&a})) {
        auto ai = a.impl();
        detail::attach(out, {ai}, [ai](TensorImpl& self) {
            double* da = detail::ensure_grad(*ai)->data.data();
            const double* g = self.grad->data.data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) da[i] += g[i];
        });
    }
    return out;
}

// Stack two matrices with equal column counts along the row axis.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw TensorError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    detail::check_same_dtype(a, b, "concat_rows");
    const std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
    Tensor out = detail::make_result({ra + rb, c}, a.dtype());
    {
        double* pc = out.mutable_data().data();
        std::copy(a.data().begin(), a.data().end(), pc);
        std::copy(b.data().begin(), b.data().end(), pc + ra * c);
    }
    if (detail::should_track({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        bool need_a = a.requires_grad();
        bool need_b = b.requires_grad();
        detail::attach(out, {ai, bi}, [ai, bi, ra, rb, c, need_a, need_b](TensorImpl& self) {
            const double* g = self.grad->data.data();
            if (need_a) {
                double* da = detail::ensure_grad(*ai)->data.data();
                for (std::size_t i = 0; i < ra * c; ++i) da[i] += g[i];
            }
            if (need_b) {
                double* db = detail::ensure_grad(*bi)->data.data();
                for (std::size_t i = 0; i < rb * c; ++i) db[i] += g[ra * c + i];
            }
        });
    }
    return out;
}

// Rows start, start+2, start+4, ... of a matrix (start is 0 or 1).
inline Tensor take_rows_strided(const Tensor& a, std::size_t start) {
    if (a.rank() != 2)
        throw TensorError("take_rows_strided: expected matrix, got " + shape_str(a.shape()));
    if (start > 1) throw TensorError("take_rows_strided: start must be 0 or 1");
    const std::size_t r = a.rows(), c = a.cols();
    const std::size_t out_rows = (r - start + 1) / 2;
    Tensor out = detail::make_result({out_rows, c}, a.dtype());
    {
        double* pc = out.mutable_data().data();
        const double* pa = a.data().data();
        for (std::size_t i = 0; i < out_rows; ++i)
            std::copy(pa + (start + 2 * i) * c, pa + (start + 2 * i + 1) * c, pc + i * c);
    }
    if (detail::should_track({&a})) {
        auto ai = a.impl();
        detail::attach(out, {ai}, [ai, start, out_rows, c](TensorImpl& self) {
            double* da = detail::ensure_grad(*ai)->data.data();
            const double* g = self.grad->data.data();
            for (std::size_t i = 0; i < out_rows; ++i)
                for (std::size_t j = 0; j < c; ++j) da[(start + 2 * i) * c + j] += g[i * c + j];
        });
    }
    return out;
}

// Inverse of the odd/even split: out rows 2i from `first`, 2i+1 from `second`.
inline Tensor interleave_rows(const Tensor& first, const Tensor& second) {
    if (first.rank() != 2 || second.rank() != 2 || first.shape() != second.shape())
        throw TensorError("interleave_rows: shapes " + shape_str(first.shape()) + " and " +
                          shape_str(second.shape()) + " must match");
    detail::check_same_dtype(first, second, "interleave_rows");
    const std::size_t r = first.rows(), c = first.cols();
    Tensor out = detail::make_result({2 * r, c}, first.dtype());
    {
        double* pc = out.mutable_data().data();
        const double* pf = first.data().data();
        const double* ps = second.data().data();
        for (std::size_t i = 0; i < r; ++i) {
            std::copy(pf + i * c, pf + (i + 1) * c, pc + (2 * i) * c);
            std::copy(ps + i * c, ps + (i + 1) * c, pc + (2 * i + 1) * c);
        }
    }
    if (detail::should_track({&first, &second})) {
        auto fi = first.impl();
        auto si = second.impl();
        bool need_f = first.requires_grad();
        bool need_s = second.requires_grad();
        detail::attach(out, {fi, si}, [fi, si, r, c, need_f, need_s](TensorImpl& self) {
            const double* g = self.grad->data.data();
            if (need_f) {
                double* df = detail::ensure_grad(*fi)->data.data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) df[i * c + j] += g[(2 * i) * c + j];
            }
            if (need_s) {
                double* ds = detail::ensure_grad(*si)->data.data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) ds[i * c + j] += g[(2 * i + 1) * c + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients accumulate into .grad
// (add, never overwrite) until cleared by the caller; the recorded history
// of the swept subgraph is released afterwards.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw TensorError("backward: loss has no recorded computation history");

    // reverse DFS post-order = topological order (consumers before inputs)
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* parent = node->parents[idx++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // seed d(loss)/d(loss) = 1
    {
        auto& g = detail::ensure_grad(*loss.impl());
        g->data[0] += 1.0;
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && node->grad) node->backward_fn(*node);
    }

    // discard the swept history; leaves keep their grads
    for (TensorImpl* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->grad.reset(); // intermediate grads are not part of the contract
        }
    }
}

inline void zero_grads(std::span<Tensor> params) {
    for (Tensor& p : params) p.clear_grad();
}

// FNV-1a over the raw bytes; used by tests and invariant checks to assert
// that a parameter set did not change.
inline std::uint64_t content_hash(const Tensor& t) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ull;
        }
    };
    for (std::size_t d : t.shape()) mix(reinterpret_cast<const unsigned char*>(&d), sizeof(d));
    mix(reinterpret_cast<const unsigned char*>(t.data().data()), t.numel() * sizeof(double));
    return h;
}

} // namespace wadi
