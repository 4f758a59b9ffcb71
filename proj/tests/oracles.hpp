#pragma once

// Test-only reference implementations, kept independent of the library
// paths they check: plain triple-loop matrix product, central finite
// differences, a symmetric Jacobi eigensolver for Gram matrices, a
// step-by-step optimizer recurrence, and brute-force assignment.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "wadi/tensor.hpp"

namespace oracles {

// naive triple-loop product of row-major matrices
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, std::size_t m,
                                        std::size_t n, std::size_t p) {
    std::vector<double> c(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += a[i * n + k] * b[k * p + j];
            c[i * p + j] = acc;
        }
    return c;
}

// Central finite differences of a scalar-valued function w.r.t. one
// parameter tensor. The loss closure must rebuild its computation from
// the current parameter contents on every call.
inline std::vector<double> finite_difference_grad(wadi::Tensor param,
                                                  const std::function<double()>& loss,
                                                  double step = 1e-6) {
    std::vector<double> grad(param.numel());
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const double saved = param.data()[i];
        param.mutable_data()[i] = saved + step;
        const double up = loss();
        param.mutable_data()[i] = saved - step;
        const double down = loss();
        param.mutable_data()[i] = saved;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

// max over elements of |analytic - numeric| / max(1, |numeric|)
inline double max_rel_error(const std::vector<double>& analytic,
                            const std::vector<double>& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max(1.0, std::abs(numeric[i]));
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Used to
// check singular values through the Gram matrix route.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n,
                                                 double tol = 1e-14) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < tol) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[p * n + p];
                const double aqq = a[q * n + q];
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p];
                    const double akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k];
                    const double aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

// AdamW recurrence replayed element by element, decay applied before the
// moment update, bias-corrected step afterwards.
struct AdamWReplay {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double m = 0.0, v = 0.0;
    long t = 0;

    double apply(double w, double g, double lr, double wd) {
        ++t;
        w *= 1.0 - lr * wd;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        const double m_hat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
        const double v_hat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
        return w - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
};

// exhaustive minimum assignment cost for small n
inline double brute_force_assignment_cost(const std::vector<double>& cost, std::size_t n) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += cost[i * n + perm[i]];
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

} // namespace oracles
