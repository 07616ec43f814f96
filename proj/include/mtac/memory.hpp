#pragma once

// Per-class semantic centers, the decaying memory template and the
// similarity-constrained relabeling rule.

#include "mtac/common.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtac {

struct BatchCenters {
    Matrix U;                 // M x C
    std::vector<int> counts;  // per-class batch counts N_j

    bool present(int j) const { return counts.at(static_cast<std::size_t>(j)) > 0; }
};

/// U_j = (1/N_j) sum over class-j members of alpha_i s_i.  The divisor is
/// the member count, not the sum of confidences.
inline BatchCenters batch_centers(const Matrix& semantics, const Vector& alphas, std::span<const int> labels,
                                  int num_classes) {
    const auto n = semantics.rows();
    require(n >= 1, "batch centers need at least one sample");
    require(alphas.size() == n && static_cast<Eigen::Index>(labels.size()) == n, "batch center inputs disagree");
    BatchCenters c{Matrix::Zero(semantics.cols(), num_classes), std::vector<int>(static_cast<std::size_t>(num_classes), 0)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < num_classes, "label outside [0, C)");
        c.U.col(y) += alphas(i) * semantics.row(i).transpose();
        ++c.counts[static_cast<std::size_t>(y)];
    }
    for (int j = 0; j < num_classes; ++j)
        if (c.counts[static_cast<std::size_t>(j)] > 0) c.U.col(j) /= c.counts[static_cast<std::size_t>(j)];
    return c;
}

/// Running per-class centers T (M x C).  A column is first set directly to
/// the first center observed for its class; afterwards each update with
/// batch index h moves it by exp(-tau h) toward the new center.
struct MemoryTemplate {
    Matrix T;
    std::vector<bool> initialized;
    std::uint64_t h = 0;  // index of the last batch consumed
    double tau = 0.9;

    MemoryTemplate() = default;
    MemoryTemplate(int au_count, int num_classes, double decay) : T(Matrix::Zero(au_count, num_classes)),
          initialized(static_cast<std::size_t>(num_classes), false), tau(decay) {
        if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("template decay tau must lie in (0, 1]");
    }

    int num_classes() const { return static_cast<int>(initialized.size()); }
    bool ready(int j) const { return initialized.at(static_cast<std::size_t>(j)); }
    static double coefficient(double tau, std::uint64_t h) { return std::exp(-tau * static_cast<double>(h)); }
};

/// Consumes one batch with index h = T.h + 1.  Classes absent from the batch
/// keep their column.
inline MemoryTemplate update_template(MemoryTemplate t, const BatchCenters& centers) {
    if (!(t.tau > 0.0 && t.tau <= 1.0)) throw ConfigError("template decay tau must lie in (0, 1]");
    require(centers.U.rows() == t.T.rows() && centers.U.cols() == t.T.cols(), "center/template shape mismatch");
    ++t.h;
    const double k = MemoryTemplate::coefficient(t.tau, t.h);
    for (int j = 0; j < t.num_classes(); ++j) {
        if (!centers.present(j)) continue;
        if (!t.ready(j)) {
            t.T.col(j) = centers.U.col(j);
            t.initialized[static_cast<std::size_t>(j)] = true;
        } else {
            t.T.col(j) = (1.0 - k) * t.T.col(j) + k * centers.U.col(j);
        }
    }
    return t;
}

struct CosineDistance {
    double value = 1.0;
    bool degenerate = false;  // one side was the zero vector
};

/// 1 - cos(s, t); a zero vector yields 1 with `degenerate` set.
inline CosineDistance cosine_distance(const Vector& s, const Vector& t) {
    require(s.size() == t.size(), "cosine distance needs equal lengths");
    const double ns = s.norm(), nt = t.norm();
    if (ns == 0.0 || nt == 0.0) return {1.0, true};
    const double cosv = std::clamp(t.dot(s) / (nt * ns), -1.0, 1.0);
    return {1.0 - cosv, false};
}

struct RelabelGate {
    double quantile = 0.2;  // eligible: among the floor(q N) lowest confidences of the batch
};

enum class RelabelReason { confident, nearest_is_original, original_uninitialized, applied };

inline std::string_view to_string(RelabelReason r) {
    switch (r) {
        case RelabelReason::confident: return "confident";
        case RelabelReason::nearest_is_original: return "nearest-is-original";
        case RelabelReason::original_uninitialized: return "original-uninitialized";
        case RelabelReason::applied: return "applied";
    }
    return "";
}

struct RelabelDecision {
    std::size_t position = 0;  // row in the batch
    std::string id;
    int original = 0;
    int relabeled = 0;
    double alpha = 0;
    Vector distances;  // to every template column; NaN where uninitialized
    bool applied = false;
    bool gated = false;  // passed the confidence gate
    RelabelReason reason = RelabelReason::confident;
};

/// Batch positions whose confidence is among the floor(q N) lowest
/// (ties broken by position).
inline std::vector<bool> confidence_gate(const Vector& alphas, const RelabelGate& gate) {
    require(gate.quantile >= 0.0 && gate.quantile <= 1.0, "gate quantile must lie in [0, 1]");
    const auto n = static_cast<std::size_t>(alphas.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return alphas(static_cast<Eigen::Index>(a)) < alphas(static_cast<Eigen::Index>(b)); });
    const auto k = static_cast<std::size_t>(std::floor(gate.quantile * static_cast<double>(n) + 1e-12));
    std::vector<bool> out(n, false);
    for (std::size_t r = 0; r < k; ++r) out[order[r]] = true;
    return out;
}

/// Applies the relabeling rule to one batch.  For gated samples whose
/// distance to their own class template is strictly larger than the
/// smallest distance to another initialized template, the label moves to the
/// nearest class.
inline std::vector<RelabelDecision> relabel(const Matrix& semantics, const Vector& alphas, std::span<const int> labels,
                                            const MemoryTemplate& tmpl, const RelabelGate& gate,
                                            std::span<const std::string> ids = {}) {
    const auto n = semantics.rows();
    require(alphas.size() == n && static_cast<Eigen::Index>(labels.size()) == n, "relabel inputs disagree");
    require(semantics.cols() == tmpl.T.rows(), "semantic width must match the template");
    require(ids.empty() || static_cast<Eigen::Index>(ids.size()) == n, "one id per sample");
    const int c = tmpl.num_classes();
    const auto eligible = confidence_gate(alphas, gate);

    std::vector<RelabelDecision> out(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        auto& d = out[static_cast<std::size_t>(i)];
        d.position = static_cast<std::size_t>(i);
        if (!ids.empty()) d.id = ids[static_cast<std::size_t>(i)];
        d.original = d.relabeled = labels[static_cast<std::size_t>(i)];
        require(d.original >= 0 && d.original < c, "label outside [0, C)");
        d.alpha = alphas(i);
        d.gated = eligible[static_cast<std::size_t>(i)];
        if (!d.gated) continue;

        const Vector s = semantics.row(i).transpose();
        d.distances = Vector::Constant(c, std::nan(""));
        for (int j = 0; j < c; ++j)
            if (tmpl.ready(j)) d.distances(j) = cosine_distance(s, tmpl.T.col(j)).value;
        if (!tmpl.ready(d.original)) {
            d.reason = RelabelReason::original_uninitialized;
            continue;
        }
        std::optional<int> best;
        for (int j = 0; j < c; ++j) {
            if (j == d.original || !tmpl.ready(j)) continue;
            if (!best || d.distances(j) < d.distances(*best)) best = j;
        }
        if (best && d.distances(d.original) > d.distances(*best)) {
            d.relabeled = *best;
            d.applied = true;
            d.reason = RelabelReason::applied;
        } else {
            d.reason = RelabelReason::nearest_is_original;
        }
    }
    return out;
}

}  // namespace mtac
