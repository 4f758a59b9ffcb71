#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wadi/tensor.hpp"

namespace wadi {

// Sample-based distribution distances for 2-D point sets stored as
// 2 x n tensors: exact 2-Wasserstein via minimum-cost assignment,
// Gaussian-kernel MMD, and mode coverage against known class centers.

class MetricsError : public std::runtime_error {
  public:
    explicit MetricsError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void check_points(const Tensor& pts, const char* what) {
    if (pts.rank() != 2 || pts.rows() != 2)
        throw MetricsError(std::string(what) + ": expected 2 x n points, got " +
                           shape_str(pts.shape()));
}

} // namespace detail

// Minimum-cost perfect matching on a dense n x n cost matrix via shortest
// augmenting paths with dual potentials. Exact; O(n^3) worst case, fast
// enough for n <= 2048 here. Returns per-column assigned row.
inline std::vector<int> min_cost_assignment(const std::vector<double>& cost, std::size_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);

    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = static_cast<int>(i);
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = static_cast<std::size_t>(p[j0]);
            double delta = inf;
            std::size_t j1 = 0;
            const double* row = cost.data() + (i0 - 1) * n;
            const double ui = u[i0];
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = row[j - 1] - ui - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = static_cast<int>(j0);
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[static_cast<std::size_t>(p[j])] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = static_cast<std::size_t>(way[j0]);
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> row_of_col(n);
    for (std::size_t j = 1; j <= n; ++j) row_of_col[j - 1] = p[j] - 1;
    return row_of_col;
}

// Exact 2-Wasserstein distance between equal-sized empirical measures:
// sqrt of the mean squared distance under the optimal assignment.
inline double exact_w2(const Tensor& a, const Tensor& b) {
    detail::check_points(a, "exact_w2");
    detail::check_points(b, "exact_w2");
    const std::size_t n = a.cols();
    if (b.cols() != n)
        throw MetricsError("exact_w2: sample counts differ, " + std::to_string(n) + " vs " +
                           std::to_string(b.cols()));
    if (n == 0) return 0.0;

    const double* pa = a.data().data();
    const double* pb = b.data().data();
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double ax = pa[i], ay = pa[n + i];
        double* row = cost.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double dx = ax - pb[j];
            const double dy = ay - pb[n + j];
            row[j] = dx * dx + dy * dy;
        }
    }
    const std::vector<int> row_of_col = min_cost_assignment(cost, n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        total += cost[static_cast<std::size_t>(row_of_col[j]) * n + j];
    return std::sqrt(total / static_cast<double>(n));
}

// Gaussian-kernel MMD (biased V-statistic). Bandwidth is the median
// pairwise distance of the pooled samples, estimated on a deterministic
// stride subsample of at most 1024 points.
inline double mmd_gaussian(const Tensor& a, const Tensor& b) {
    detail::check_points(a, "mmd_gaussian");
    detail::check_points(b, "mmd_gaussian");
    const std::size_t na = a.cols(), nb = b.cols();
    if (na == 0 || nb == 0) throw MetricsError("mmd_gaussian: empty sample set");

    const double* pa = a.data().data();
    const double* pb = b.data().data();

    // pooled subsample for the median heuristic
    std::vector<std::pair<double, double>> pool;
    const std::size_t target = 1024;
    const std::size_t total = na + nb;
    const std::size_t stride = std::max<std::size_t>(1, total / target);
    for (std::size_t i = 0; i < na; i += stride) pool.emplace_back(pa[i], pa[na + i]);
    for (std::size_t i = 0; i < nb; i += stride) pool.emplace_back(pb[i], pb[nb + i]);
    std::vector<double> dists;
    dists.reserve(pool.size() * (pool.size() - 1) / 2);
    for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t j = i + 1; j < pool.size(); ++j) {
            const double dx = pool[i].first - pool[j].first;
            const double dy = pool[i].second - pool[j].second;
            dists.push_back(std::sqrt(dx * dx + dy * dy));
        }
    double bandwidth = 1.0;
    if (!dists.empty()) {
        auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
        std::nth_element(dists.begin(), mid, dists.end());
        bandwidth = std::max(*mid, 1e-12);
    }
    const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);

    auto kernel_sum = [gamma](const double* px, std::size_t nx, const double* py,
                              std::size_t ny) {
        double acc = 0.0;
        for (std::size_t i = 0; i < nx; ++i) {
            const double xi = px[i], yi = px[nx + i];
            for (std::size_t j = 0; j < ny; ++j) {
                const double dx = xi - py[j];
                const double dy = yi - py[ny + j];
                acc += std::exp(-gamma * (dx * dx + dy * dy));
            }
        }
        return acc;
    };

    const double kaa = kernel_sum(pa, na, pa, na) / (static_cast<double>(na) * na);
    const double kbb = kernel_sum(pb, nb, pb, nb) / (static_cast<double>(nb) * nb);
    const double kab = kernel_sum(pa, na, pb, nb) / (static_cast<double>(na) * nb);
    const double mmd2 = kaa + kbb - 2.0 * kab;
    return std::sqrt(std::max(0.0, mmd2));
}

// Fraction of samples landing nearest to each mode center.
inline std::vector<double> mode_histogram(const Tensor& samples,
                                          const std::vector<std::pair<double, double>>& modes) {
    detail::check_points(samples, "mode_histogram");
    if (modes.empty()) throw MetricsError("mode_histogram: no modes given");
    const std::size_t n = samples.cols();
    std::vector<double> hist(modes.size(), 0.0);
    const double* p = samples.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_m = 0;
        for (std::size_t m = 0; m < modes.size(); ++m) {
            const double dx = p[i] - modes[m].first;
            const double dy = p[n + i] - modes[m].second;
            const double d2 = dx * dx + dy * dy;
            if (d2 < best) {
                best = d2;
                best_m = m;
            }
        }
        hist[best_m] += 1.0;
    }
    for (double& h : hist) h /= static_cast<double>(n);
    return hist;
}

// Fraction of modes receiving at least `threshold` of the samples.
inline double mode_coverage(const Tensor& samples,
                            const std::vector<std::pair<double, double>>& modes,
                            double threshold = 0.01) {
    const std::vector<double> hist = mode_histogram(samples, modes);
    std::size_t covered = 0;
    for (double h : hist)
        if (h >= threshold) ++covered;
    return static_cast<double>(covered) / static_cast<double>(modes.size());
}

struct DistributionMetrics {
    double w2 = 0.0;
    double mmd = 0.0;
    double coverage = 0.0;
};

inline DistributionMetrics eval_distribution(const Tensor& samples_a, const Tensor& samples_b,
                                             const std::vector<std::pair<double, double>>& modes,
                                             double coverage_threshold = 0.01) {
    DistributionMetrics m;
    m.w2 = exact_w2(samples_a, samples_b);
    m.mmd = mmd_gaussian(samples_a, samples_b);
    m.coverage = modes.empty() ? 1.0 : mode_coverage(samples_a, modes, coverage_threshold);
    return m;
}

} // namespace wadi
