#pragma once

// Auxiliary AU branch: co-occurrence graph over action units, a two-layer
// graph convolution over per-sample AU node features, and per-AU outputs whose
// logits double as the sample's semantic representation.

#include "mtac/core.hpp"
#include "mtac/nn.hpp"

#include <cstdio>
#include <fstream>
#include <span>
#include <string_view>

namespace mtac {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

struct CoOccurrenceCounts {
    CountMatrix pair_counts;                  // M x M, diagonal = marginals
    std::vector<std::int64_t> marginal_counts;
    std::int64_t source_size = 0;

    int au_count() const { return static_cast<int>(marginal_counts.size()); }
};

/// Exact joint and marginal activation counts.  `au_labels` is N x M binary.
inline CoOccurrenceCounts build_cooccurrence(const Matrix& au_labels) {
    require(au_labels.rows() >= 1, "co-occurrence needs at least one sample");
    const auto m = au_labels.cols();
    CoOccurrenceCounts c;
    c.pair_counts = CountMatrix::Zero(m, m);
    c.marginal_counts.assign(static_cast<std::size_t>(m), 0);
    c.source_size = au_labels.rows();
    for (Eigen::Index i = 0; i < au_labels.rows(); ++i)
        for (Eigen::Index p = 0; p < m; ++p) {
            if (au_labels(i, p) == 0.0) continue;
            require(au_labels(i, p) == 1.0, "AU labels must be binary");
            ++c.marginal_counts[static_cast<std::size_t>(p)];
            for (Eigen::Index q = 0; q < m; ++q)
                if (au_labels(i, q) == 1.0) ++c.pair_counts(p, q);
        }
    return c;
}

inline Matrix au_matrix(const DatasetManifest& manifest, std::span<const std::size_t> indices) {
    Matrix z(static_cast<Eigen::Index>(indices.size()), manifest.au_count);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto& s = manifest.records.at(indices[r]);
        if (!s.has_au()) throw ConfigError("record " + s.id + " has no AU labels");
        for (int a = 0; a < manifest.au_count; ++a)
            z(static_cast<Eigen::Index>(r), a) = s.au[static_cast<std::size_t>(a)];
    }
    return z;
}

inline CoOccurrenceCounts build_cooccurrence(const DatasetManifest& manifest) {
    auto idx = manifest.indices(Split::train);
    return build_cooccurrence(au_matrix(manifest, idx));
}

struct AUAdjacency {
    Matrix A;       // A(p, q) = P(AU_p | AU_q)
    Matrix A_norm;  // rows sum to one
};

/// Rows scaled to sum to one; all-zero rows become uniform.
inline Matrix row_normalize(const Matrix& a) {
    Matrix out = a;
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double s = a.row(r).sum();
        if (s > 0) out.row(r) /= s;
        else out.row(r).setConstant(1.0 / static_cast<double>(a.cols()));
    }
    return out;
}

/// Conditional-probability adjacency.  A never-observed AU q gets column q
/// equal to the unit vector e_q.
inline AUAdjacency conditional_adjacency(const CoOccurrenceCounts& counts) {
    const auto m = counts.au_count();
    AUAdjacency adj;
    adj.A = Matrix::Zero(m, m);
    for (int q = 0; q < m; ++q) {
        const auto occ_q = counts.marginal_counts[static_cast<std::size_t>(q)];
        for (int p = 0; p < m; ++p) {
            if (occ_q > 0) adj.A(p, q) = static_cast<double>(counts.pair_counts(p, q)) / static_cast<double>(occ_q);
            else adj.A(p, q) = p == q ? 1.0 : 0.0;
        }
    }
    adj.A_norm = row_normalize(adj.A);
    return adj;
}

enum class EdgeMode { data, random, fixed };

inline std::string_view to_string(EdgeMode e) {
    switch (e) {
        case EdgeMode::data: return "data";
        case EdgeMode::random: return "random";
        case EdgeMode::fixed: return "fixed";
    }
    return "data";
}

inline EdgeMode parse_edge_mode(std::string_view s) {
    if (s == "data") return EdgeMode::data;
    if (s == "random") return EdgeMode::random;
    if (s == "fixed") return EdgeMode::fixed;
    throw ConfigError("unknown edge mode '" + std::string(s) + "'");
}

/// Graph for the requested ablation condition: data-driven conditionals,
/// uniform [0,1] random entries, or all ones; each row-normalized.
inline AUAdjacency make_adjacency(EdgeMode mode, const CoOccurrenceCounts& counts, Rng& rng) {
    const auto m = counts.au_count();
    if (mode == EdgeMode::data) return conditional_adjacency(counts);
    AUAdjacency adj;
    if (mode == EdgeMode::fixed) {
        adj.A = Matrix::Ones(m, m);
    } else {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        adj.A.resize(m, m);
        for (int q = 0; q < m; ++q)
            for (int p = 0; p < m; ++p) adj.A(p, q) = u(rng);
    }
    adj.A_norm = row_normalize(adj.A);
    return adj;
}

inline void write_adjacency(std::ostream& out, const AUAdjacency& adj) {
    auto dump = [&out](const Matrix& a) {
        char buf[32];
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            for (Eigen::Index c = 0; c < a.cols(); ++c) {
                std::snprintf(buf, sizeof(buf), "%.11e", a(r, c));
                out << (c ? " " : "") << buf;
            }
            out << '\n';
        }
    };
    out << "# conditional A(p,q) = P(AU_p | AU_q), M=" << adj.A.rows() << '\n';
    dump(adj.A);
    out << "# row-normalized\n";
    dump(adj.A_norm);
}

inline void write_adjacency(const std::filesystem::path& path, const AUAdjacency& adj) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_adjacency(out, adj);
}

struct SemanticOutput {
    Matrix logits;  // N x M, the semantic representation s
    Matrix prob;    // sigmoid(logits)
};

/// Projection to M node features of width B, two graph convolutions
/// X' = leaky(A_norm X W), and one affine output unit per AU node.
class GCNStack {
public:
    GCNStack() = default;
    GCNStack(Eigen::Index feature_dim, int au_count, int width, Rng& rng)
        : projection_("au.projection", feature_dim, static_cast<Eigen::Index>(au_count) * width, rng),
          gcn1_("au.gcn1", glorot(width, width, width, width, rng)),
          gcn2_("au.gcn2", glorot(width, width, width, width, rng)),
          out_w_("au.out.weight", glorot(au_count, width, width, 1, rng)),
          out_b_("au.out.bias", Matrix::Zero(au_count, 1)),
          m_(au_count),
          b_(width) {}

    int au_count() const { return m_; }
    int width() const { return b_; }

    SemanticOutput forward(const Matrix& features, const AUAdjacency& adj) const {
        Cache scratch;
        return run(features, adj, scratch);
    }

    /// Keeps activations for backward().
    SemanticOutput forward_train(const Matrix& features, const AUAdjacency& adj) {
        return run(features, adj, cache_);
    }

    /// Accumulates parameter gradients from d loss / d logits.  The input
    /// features receive no gradient.
    void backward(const Matrix& d_logits) {
        const auto n = d_logits.rows();
        const auto& c = cache_;
        Matrix d_proj(n, static_cast<Eigen::Index>(m_) * b_);
        for (Eigen::Index i = 0; i < n; ++i) {
            Matrix d_h2(m_, b_);
            for (int a = 0; a < m_; ++a) {
                d_h2.row(a) = d_logits(i, a) * out_w_.value.row(a);
                out_w_.grad.row(a) += d_logits(i, a) * c.h2[static_cast<std::size_t>(i)].row(a);
                out_b_.grad(a, 0) += d_logits(i, a);
            }
            Matrix d_y2 = c.adj.transpose() * leaky_backward(c.pre2[static_cast<std::size_t>(i)], d_h2);
            gcn2_.grad.noalias() += c.h1[static_cast<std::size_t>(i)].transpose() * d_y2;
            Matrix d_h1 = d_y2 * gcn2_.value.transpose();
            Matrix d_y1 = c.adj.transpose() * leaky_backward(c.pre1[static_cast<std::size_t>(i)], d_h1);
            gcn1_.grad.noalias() += c.x[static_cast<std::size_t>(i)].transpose() * d_y1;
            Matrix d_x = d_y1 * gcn1_.value.transpose();
            for (int a = 0; a < m_; ++a) d_proj.block(i, a * b_, 1, b_) = d_x.row(a);
        }
        projection_.backward(c.features, d_proj);
    }

    void collect(std::vector<Param*>& out) {
        projection_.collect(out);
        out.push_back(&gcn1_);
        out.push_back(&gcn2_);
        out.push_back(&out_w_);
        out.push_back(&out_b_);
    }

    Linear& projection() { return projection_; }
    Param& gcn1() { return gcn1_; }
    Param& gcn2() { return gcn2_; }
    Param& out_weight() { return out_w_; }
    Param& out_bias() { return out_b_; }

private:
    struct Cache {
        Matrix features, adj;
        std::vector<Matrix> x, pre1, h1, pre2, h2;
    };

    SemanticOutput run(const Matrix& features, const AUAdjacency& adj, Cache& c) const {
        if (adj.A_norm.rows() != m_ || adj.A_norm.cols() != m_) throw ContractViolation("adjacency size mismatch");
        for (Eigen::Index r = 0; r < m_; ++r)
            require(std::abs(adj.A_norm.row(r).sum() - 1.0) <= 1e-9, "adjacency must be row-normalized");
        const auto n = features.rows();
        Matrix proj = projection_.forward(features);
        c.features = features;
        c.adj = adj.A_norm;
        for (auto* v : {&c.x, &c.pre1, &c.h1, &c.pre2, &c.h2}) v->assign(static_cast<std::size_t>(n), Matrix());
        SemanticOutput out{Matrix(n, m_), Matrix(n, m_)};
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            c.x[k].resize(m_, b_);
            for (int a = 0; a < m_; ++a) c.x[k].row(a) = proj.block(i, a * b_, 1, b_);
            c.pre1[k] = adj.A_norm * (c.x[k] * gcn1_.value);
            c.h1[k] = mtac::leaky(c.pre1[k]);
            c.pre2[k] = adj.A_norm * (c.h1[k] * gcn2_.value);
            c.h2[k] = mtac::leaky(c.pre2[k]);
            for (int a = 0; a < m_; ++a) {
                const double s = c.h2[k].row(a).dot(out_w_.value.row(a)) + out_b_.value(a, 0);
                out.logits(i, a) = s;
                out.prob(i, a) = mtac::sigmoid(s);
            }
        }
        return out;
    }

    Linear projection_;
    Param gcn1_, gcn2_;
    Param out_w_;  // M x B, row m is AU m's output weights
    Param out_b_;  // M x 1
    int m_ = 0, b_ = 0;
    Cache cache_;
};

inline SemanticOutput semantic_forward(const Matrix& features_stopped, const GCNStack& stack, const AUAdjacency& adj) {
    return stack.forward(features_stopped, adj);
}

}  // namespace mtac
