#pragma once

// Objective functions of the three branches and their epoch-wise mixing.
// Every loss returns its value together with the analytic gradient with
// respect to each differentiable input, so callers can chain backward passes
// by hand.

#include "mtac/common.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mtac {

inline constexpr double kCccEpsilon = 1e-8;
inline constexpr double kBceEpsilon = 1e-7;

/// Raised by ccc() for fewer than two points; weighted_ccc_loss skips those.
class DegenerateInput : public Error {
public:
    using Error::Error;
};

struct WeightedCeResult {
    double loss = 0;
    Matrix d_logits;  // N x C
    Vector d_alphas;  // N
};

/// Confidence-weighted cross entropy: the per-sample confidence multiplies
/// the logits inside the softmax, L = -(1/N) sum_i w_i log softmax(a_i z_i)[y_i].
/// `sample_weights` (optional, length N) carries class-oriented weights when
/// they are placed in this loss instead of the VA loss.
inline WeightedCeResult confidence_weighted_ce(const Matrix& logits, std::span<const int> labels, const Vector& alphas,
                                               const Vector* sample_weights = nullptr) {
    const auto n = logits.rows();
    const auto c = logits.cols();
    require(n >= 1, "weighted CE needs at least one sample");
    require(static_cast<Eigen::Index>(labels.size()) == n, "one logit row per label");
    require(alphas.size() == n, "one confidence per sample");
    require(!sample_weights || sample_weights->size() == n, "one weight per sample");
    if (logits.hasNaN()) throw Error("NaN logits in weighted CE");
    for (Eigen::Index i = 0; i < n; ++i)
        require(std::isfinite(alphas(i)) && alphas(i) > 0.0 && alphas(i) <= 1.0, "confidence outside (0, 1]");

    WeightedCeResult r;
    r.d_logits = Matrix::Zero(n, c);
    r.d_alphas = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < c, "label outside [0, C)");
        const double w = sample_weights ? (*sample_weights)(i) : 1.0;
        RowVector scaled = alphas(i) * logits.row(i);
        const double mx = scaled.maxCoeff();
        RowVector e = (scaled.array() - mx).exp();
        const double z = e.sum();
        r.loss += w * (std::log(z) + mx - scaled(y));
        RowVector g = e / z;
        g(y) -= 1.0;
        r.d_logits.row(i) = (w * alphas(i) / static_cast<double>(n)) * g;
        r.d_alphas(i) = w * g.dot(logits.row(i)) / static_cast<double>(n);
    }
    r.loss /= static_cast<double>(n);
    return r;
}

struct CccResult {
    double rho = 0;
    Vector d_yhat;
};

/// Concordance correlation coefficient with population statistics and an
/// epsilon-stabilized denominator, plus its gradient w.r.t. the predictions.
inline CccResult ccc_with_grad(const Vector& y, const Vector& yhat) {
    require(y.size() == yhat.size(), "ccc inputs must have equal length");
    const auto k = y.size();
    if (k < 2) throw DegenerateInput("ccc needs at least two points");
    const double kd = static_cast<double>(k);
    const double mu_y = y.mean();
    const double mu_p = yhat.mean();
    const Vector dy = y.array() - mu_y;
    const Vector dp = yhat.array() - mu_p;
    const double var_y = dy.squaredNorm() / kd;
    const double var_p = dp.squaredNorm() / kd;
    const double cov = dy.dot(dp) / kd;
    const double shift = mu_y - mu_p;
    const double den = var_y + var_p + shift * shift + kCccEpsilon;
    const double num = 2.0 * cov;

    CccResult r;
    r.rho = num / den;
    // d cov/dp_k = dy_k/K, d var_p/dp_k = 2 dp_k/K, d shift^2/dp_k = -2 shift/K
    const Vector d_num = (2.0 / kd) * dy;
    const Vector d_den = (2.0 / kd) * dp - Vector::Constant(k, 2.0 * shift / kd);
    r.d_yhat = (d_num * den - num * d_den) / (den * den);
    return r;
}

inline double ccc(const Vector& y, const Vector& yhat) { return ccc_with_grad(y, yhat).rho; }

struct ClassWeights {
    Vector gamma;                       // length C, gamma_j = 1 - N_j / N
    std::vector<std::int64_t> source_counts;
    std::int64_t population = 0;
};

inline ClassWeights class_weights(std::span<const std::int64_t> counts) {
    require(!counts.empty(), "class weights need at least one class");
    ClassWeights w;
    w.source_counts.assign(counts.begin(), counts.end());
    for (auto n : counts) {
        require(n >= 0, "class counts must be non-negative");
        w.population += n;
    }
    if (w.population == 0) throw Error("class weights over an empty population");
    w.gamma.resize(static_cast<Eigen::Index>(counts.size()));
    for (std::size_t j = 0; j < counts.size(); ++j)
        w.gamma(static_cast<Eigen::Index>(j)) =
            static_cast<double>(w.population - counts[j]) / static_cast<double>(w.population);
    return w;
}

struct VaLossResult {
    double loss = 0;
    Matrix d_pred;  // N x 2
    int classes_used = 0;
};

/// Class-weighted CCC loss over valence and arousal; per-class CCCs are taken
/// over the batch members of that class, classes with fewer than two members
/// contribute nothing.
inline VaLossResult weighted_ccc_loss(const Matrix& va_pred, const Matrix& va_label, std::span<const int> labels,
                                      const ClassWeights& weights) {
    const auto n = va_pred.rows();
    require(va_pred.cols() == 2 && va_label.cols() == 2, "VA matrices must be N x 2");
    require(va_label.rows() == n && static_cast<Eigen::Index>(labels.size()) == n, "VA shapes disagree");
    require(!va_label.hasNaN(), "VA labels must be present for every sample");
    const auto c = weights.gamma.size();

    VaLossResult r;
    r.d_pred = Matrix::Zero(n, 2);
    std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(c));
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < c, "label outside [0, C)");
        members[static_cast<std::size_t>(y)].push_back(i);
    }
    for (Eigen::Index j = 0; j < c; ++j) {
        const auto& rows = members[static_cast<std::size_t>(j)];
        if (rows.size() < 2) continue;
        ++r.classes_used;
        const auto k = static_cast<Eigen::Index>(rows.size());
        const double g = weights.gamma(j);
        double rho_sum = 0;
        for (int dim = 0; dim < 2; ++dim) {
            Vector y(k), p(k);
            for (Eigen::Index t = 0; t < k; ++t) {
                y(t) = va_label(rows[static_cast<std::size_t>(t)], dim);
                p(t) = va_pred(rows[static_cast<std::size_t>(t)], dim);
            }
            auto cr = ccc_with_grad(y, p);
            rho_sum += cr.rho;
            for (Eigen::Index t = 0; t < k; ++t) r.d_pred(rows[static_cast<std::size_t>(t)], dim) -= 0.5 * g * cr.d_yhat(t);
        }
        r.loss += g * (1.0 - 0.5 * rho_sum);
    }
    return r;
}

struct AuLossResult {
    double loss = 0;
    Matrix d_prob;    // N x M (zero where the prediction was clipped)
    Vector d_alphas;  // N
};

/// Confidence-weighted binary cross entropy summed over AUs, averaged over
/// the batch.  Predictions are clipped to [eps, 1 - eps].
inline AuLossResult weighted_au_bce(const Matrix& prob, const Matrix& au_label, const Vector& alphas) {
    const auto n = prob.rows();
    const auto m = prob.cols();
    require(n >= 1, "AU loss needs at least one sample");
    require(au_label.rows() == n && au_label.cols() == m, "AU label shape mismatch");
    require(alphas.size() == n, "one confidence per sample");
    for (Eigen::Index i = 0; i < au_label.size(); ++i) {
        const double z = au_label.data()[i];
        require(z == 0.0 || z == 1.0, "AU labels must be binary");
    }
    AuLossResult r;
    r.d_prob = Matrix::Zero(n, m);
    r.d_alphas = Vector::Zero(n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double sample = 0;
        for (Eigen::Index a = 0; a < m; ++a) {
            const double raw = prob(i, a);
            const double p = std::clamp(raw, kBceEpsilon, 1.0 - kBceEpsilon);
            const double z = au_label(i, a);
            sample -= z * std::log(p) + (1.0 - z) * std::log(1.0 - p);
            if (raw > kBceEpsilon && raw < 1.0 - kBceEpsilon)
                r.d_prob(i, a) = -alphas(i) * inv_n * (z / p - (1.0 - z) / (1.0 - p));
        }
        r.loss += alphas(i) * sample;
        r.d_alphas(i) = sample * inv_n;
    }
    r.loss *= inv_n;
    return r;
}

struct RampWeights {
    double lambda1 = 1;  // target + VA
    double lambda2 = 1;  // AU
};

inline RampWeights ramp_weights(double beta, int H) {
    if (H < 1) throw ConfigError("ramp threshold H must be >= 1");
    if (!(beta >= 0)) throw Error("epoch index must be non-negative");
    const double h = H;
    RampWeights w;
    if (beta <= h) {
        const double t = 1.0 - beta / h;
        w.lambda1 = std::exp(-t * t);
        w.lambda2 = 1.0;
    } else {
        const double t = 1.0 - h / beta;
        w.lambda1 = 1.0;
        w.lambda2 = std::exp(-t * t);
    }
    return w;
}

inline double total_loss(double l_wce, double l_w3c, double l_wau, double beta, int H) {
    const auto w = ramp_weights(beta, H);
    return w.lambda1 * (l_wce + l_w3c) + w.lambda2 * l_wau;
}

}  // namespace mtac
