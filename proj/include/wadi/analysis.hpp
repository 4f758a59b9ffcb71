#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wadi/tensor.hpp"

namespace wadi {

// Norm/direction analysis of weight snapshots: per-column decomposition
// W = m * V, drift statistics between two snapshots, singular-value
// energy curves of direction residuals, and norm/direction swapping.

class AnalysisError : public std::runtime_error {
  public:
    explicit AnalysisError(const std::string& msg) : std::runtime_error(msg) {}
};

// Insertion-ordered layer-name -> matrix map.
class WeightSnapshot {
  public:
    void add(const std::string& name, Tensor matrix) {
        if (matrix.rank() != 2 || matrix.numel() == 0)
            throw AnalysisError("snapshot layer '" + name + "' must be a non-empty matrix");
        if (index_.count(name)) throw AnalysisError("duplicate snapshot layer: " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(matrix));
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw AnalysisError("missing snapshot layer: " + name);
        return entries_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// norm/direction decomposition
// ---------------------------------------------------------------------------

// W -> (m, V) with m the 1 x k column norms and V the unit-column
// direction matrix. Errors on a zero column, naming its index.
inline std::pair<Tensor, Tensor> decompose_columns(const Tensor& w) {
    if (w.rank() != 2) throw AnalysisError("decompose: expected a matrix");
    const std::size_t d = w.rows(), k = w.cols();
    Tensor norms = Tensor::zeros({1, k}, w.dtype());
    Tensor units = Tensor::zeros({d, k}, w.dtype());
    auto pm = norms.mutable_data();
    auto pv = units.mutable_data();
    const double* pw = w.data().data();
    for (std::size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < d; ++r) acc += pw[r * k + i] * pw[r * k + i];
        const double norm = std::sqrt(acc);
        if (norm == 0.0)
            throw AnalysisError("decompose: column " + std::to_string(i) + " is zero");
        pm[i] = norm;
        for (std::size_t r = 0; r < d; ++r) pv[r * k + i] = pw[r * k + i] / norm;
    }
    norms.impl()->quantize_if_f32();
    units.impl()->quantize_if_f32();
    return {norms, units};
}

inline Tensor recompose_columns(const Tensor& norms, const Tensor& units) {
    if (norms.rank() != 2 || units.rank() != 2 || norms.rows() != 1 ||
        norms.cols() != units.cols())
        throw AnalysisError("recompose: shapes " + shape_str(norms.shape()) + " and " +
                            shape_str(units.shape()) + " do not conform");
    const std::size_t d = units.rows(), k = units.cols();
    Tensor out = Tensor::zeros({d, k}, units.dtype());
    auto po = out.mutable_data();
    const double* pm = norms.data().data();
    const double* pv = units.data().data();
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t i = 0; i < k; ++i) po[r * k + i] = pm[i] * pv[r * k + i];
    out.impl()->quantize_if_f32();
    return out;
}

// ---------------------------------------------------------------------------
// drift statistics
// ---------------------------------------------------------------------------

struct LayerDrift {
    std::string layer;
    double norm_change_pct = 0.0;
    double direction_change_pct = 0.0;
};

struct DriftReport {
    std::vector<LayerDrift> layers;
    double norm_mean = 0.0, norm_std = 0.0;
    double direction_mean = 0.0, direction_std = 0.0;
};

namespace detail {

inline void check_snapshots_match(const WeightSnapshot& a, const WeightSnapshot& b,
                                  const char* what) {
    std::vector<std::string> problems;
    for (const auto& [name, t] : a.entries()) {
        if (!b.contains(name))
            problems.push_back(name + " (only in first)");
        else if (b.get(name).shape() != t.shape())
            problems.push_back(name + " (shape " + shape_str(t.shape()) + " vs " +
                               shape_str(b.get(name).shape()) + ")");
    }
    for (const auto& [name, t] : b.entries())
        if (!a.contains(name)) problems.push_back(name + " (only in second)");
    if (!problems.empty()) {
        std::string msg = std::string(what) + ": snapshots disagree on layers:";
        for (const auto& p : problems) msg += " " + p + ";";
        throw AnalysisError(msg);
    }
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    return {mean, std::sqrt(var)};
}

} // namespace detail

// Per layer: norm change = mean_i |m_s[i] - m_t[i]| / m_t[i] * 100 and
// direction change = mean_i (1 - cos(V_s[:,i], V_t[:,i])) * 100, with the
// teacher in the denominator. Aggregates are mean/std over layers.
inline DriftReport drift_stats(const WeightSnapshot& student, const WeightSnapshot& teacher) {
    detail::check_snapshots_match(student, teacher, "drift_stats");
    DriftReport report;
    std::vector<double> norm_vals, dir_vals;
    for (const auto& [name, w_student] : student.entries()) {
        const Tensor& w_teacher = teacher.get(name);
        auto [m_s, v_s] = decompose_columns(w_student);
        auto [m_t, v_t] = decompose_columns(w_teacher);
        const std::size_t d = w_student.rows(), k = w_student.cols();
        double norm_acc = 0.0, dir_acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            norm_acc += std::abs(m_s.at(0, i) - m_t.at(0, i)) / m_t.at(0, i);
            double dot = 0.0;
            for (std::size_t r = 0; r < d; ++r) dot += v_s.at(r, i) * v_t.at(r, i);
            // rounding can push the dot of identical unit columns past 1
            dir_acc += std::max(0.0, 1.0 - dot);
        }
        LayerDrift drift;
        drift.layer = name;
        drift.norm_change_pct = 100.0 * norm_acc / static_cast<double>(k);
        drift.direction_change_pct = 100.0 * dir_acc / static_cast<double>(k);
        norm_vals.push_back(drift.norm_change_pct);
        dir_vals.push_back(drift.direction_change_pct);
        report.layers.push_back(std::move(drift));
    }
    std::tie(report.norm_mean, report.norm_std) = detail::mean_std(norm_vals);
    std::tie(report.direction_mean, report.direction_std) = detail::mean_std(dir_vals);
    return report;
}

// ---------------------------------------------------------------------------
// singular-value energy of direction residuals
// ---------------------------------------------------------------------------

// One-sided Jacobi: orthogonalize column pairs until the relative
// off-diagonal mass drops below tol. Matrices here are small, so
// robustness wins over speed. Returns singular values sorted descending.
inline std::vector<double> jacobi_singular_values(const Tensor& m, double tol = 1e-12) {
    if (m.rank() != 2) throw AnalysisError("jacobi_singular_values: expected a matrix");
    std::size_t rows = m.rows(), cols = m.cols();
    // work on the orientation with rows >= cols
    std::vector<double> a(rows * cols);
    if (rows >= cols) {
        std::copy(m.data().begin(), m.data().end(), a.begin());
    } else {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) a[c * rows + r] = m.at(r, c);
        std::swap(rows, cols);
    }

    auto col_dot = [&](std::size_t p, std::size_t q) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) acc += a[r * cols + p] * a[r * cols + q];
        return acc;
    };

    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double worst = 0.0;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                const double app = col_dot(p, p);
                const double aqq = col_dot(q, q);
                const double apq = col_dot(p, q);
                const double denom = std::sqrt(app * aqq);
                if (denom == 0.0) continue;
                const double off = std::abs(apq) / denom;
                worst = std::max(worst, off);
                if (off <= tol) continue;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double xp = a[r * cols + p];
                    const double xq = a[r * cols + q];
                    a[r * cols + p] = c * xp - s * xq;
                    a[r * cols + q] = s * xp + c * xq;
                }
            }
        }
        if (worst <= tol) break;
    }

    std::vector<double> sigma(cols);
    for (std::size_t p = 0; p < cols; ++p) sigma[p] = std::sqrt(col_dot(p, p));
    std::sort(sigma.begin(), sigma.end(), std::greater<double>());
    return sigma;
}

struct EnergyCurve {
    std::vector<double> singular_values;  // descending
    std::vector<double> cumulative_energy; // e(r) = sum_{i<=r} s_i^2 / sum s_i^2

    // smallest fraction r / min(d,k) whose cumulative energy reaches the
    // threshold; 0 when the residual is identically zero
    double rank_fraction_for_energy(double threshold) const {
        for (std::size_t r = 0; r < cumulative_energy.size(); ++r)
            if (cumulative_energy[r] >= threshold)
                return static_cast<double>(r + 1) /
                       static_cast<double>(cumulative_energy.size());
        return 1.0;
    }
};

// Energy curve of the residual dir_a - dir_b (typically two direction
// matrices from decompose_columns).
inline EnergyCurve residual_svd_energy(const Tensor& dir_a, const Tensor& dir_b) {
    if (dir_a.rank() != 2 || dir_b.rank() != 2 || dir_a.shape() != dir_b.shape())
        throw AnalysisError("residual_svd_energy: shapes " + shape_str(dir_a.shape()) + " and " +
                            shape_str(dir_b.shape()) + " must match");
    Tensor residual = sub(dir_a, dir_b);
    EnergyCurve curve;
    curve.singular_values = jacobi_singular_values(residual);
    double total = 0.0;
    for (double s : curve.singular_values) total += s * s;
    curve.cumulative_energy.resize(curve.singular_values.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < curve.singular_values.size(); ++i) {
        acc += curve.singular_values[i] * curve.singular_values[i];
        curve.cumulative_energy[i] = total > 0.0 ? acc / total : 1.0;
    }
    // exact terminal value, guards accumulated rounding
    if (!curve.cumulative_energy.empty()) curve.cumulative_energy.back() = 1.0;
    return curve;
}

// ---------------------------------------------------------------------------
// norm/direction swap
// ---------------------------------------------------------------------------

// Each output column is the direction-source column rescaled by the ratio
// of the two column norms. Algebraically m_norm * V_dir, written so that
// swapping a snapshot with itself reproduces it bit for bit.
inline WeightSnapshot swap_components(const WeightSnapshot& direction_source,
                                      const WeightSnapshot& norm_source) {
    detail::check_snapshots_match(direction_source, norm_source, "swap_components");
    WeightSnapshot out;
    for (const auto& [name, w_dir] : direction_source.entries()) {
        const Tensor& w_norm = norm_source.get(name);
        auto [m_dir, v_dir] = decompose_columns(w_dir);
        auto [m_norm, v_norm] = decompose_columns(w_norm);
        const std::size_t d = w_dir.rows(), k = w_dir.cols();
        Tensor hybrid = Tensor::zeros({d, k}, w_dir.dtype());
        auto ph = hybrid.mutable_data();
        const double* pw = w_dir.data().data();
        for (std::size_t i = 0; i < k; ++i) {
            const double ratio = m_norm.at(0, i) / m_dir.at(0, i);
            for (std::size_t r = 0; r < d; ++r) ph[r * k + i] = pw[r * k + i] * ratio;
        }
        hybrid.impl()->quantize_if_f32();
        out.add(name, hybrid);
    }
    return out;
}

} // namespace wadi
