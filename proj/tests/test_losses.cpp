#include "mtac/losses.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace mtac;
using mtac::testing::numeric_gradient;
using mtac::testing::random_matrix;
using mtac::testing::relative_error;

namespace {

double per_sample_wce(const RowVector& logits, int y, double alpha) {
    Matrix l = logits;
    std::vector<int> labels{y};
    return confidence_weighted_ce(l, labels, Vector::Constant(1, alpha)).loss;
}

}  // namespace

// ---- weighted cross entropy ------------------------------------------------

TEST(WeightedCe, UniformLogitsGiveLogC) {
    Matrix logits = Matrix::Constant(1, 7, 0.3);
    std::vector<int> y{2};
    EXPECT_NEAR(confidence_weighted_ce(logits, y, Vector::Ones(1)).loss, 1.945910149055313, 1e-12);
}

TEST(WeightedCe, TwoClassHandValue) {
    Matrix logits(1, 2);
    logits << 2, 0;
    std::vector<int> y{0};
    // -ln(e^2 / (e^2 + 1))
    EXPECT_NEAR(confidence_weighted_ce(logits, y, Vector::Ones(1)).loss, 0.1269280110429725, 1e-12);
}

TEST(WeightedCe, VanishingConfidenceCollapsesToLogC) {
    std::mt19937_64 rng(3);
    Matrix logits = random_matrix(4, 5, rng, -10, 10);
    std::vector<int> y{0, 1, 4, 2};
    auto r = confidence_weighted_ce(logits, y, Vector::Constant(4, 1e-12));
    EXPECT_NEAR(r.loss, std::log(5.0), 1e-9);
}

TEST(WeightedCe, ContractViolations) {
    Matrix logits = Matrix::Zero(1, 3);
    std::vector<int> y{0};
    EXPECT_THROW(confidence_weighted_ce(logits, y, Vector::Constant(1, 0.0)), ContractViolation);
    EXPECT_THROW(confidence_weighted_ce(logits, y, Vector::Constant(1, 1.5)), ContractViolation);
    logits(0, 1) = std::nan("");
    EXPECT_THROW(confidence_weighted_ce(logits, y, Vector::Ones(1)), Error);
}

// Strictly decreasing in alpha when the true logit is the unique maximum,
// strictly increasing when it is below the maximum.
TEST(WeightedCe, AlphaMonotonicityIsSignConditional) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int trial = 0; trial < 200; ++trial) {
        RowVector z(5);
        for (int j = 0; j < 5; ++j) z(j) = u(rng);
        const int top = static_cast<int>(std::max_element(z.data(), z.data() + 5) - z.data());
        // below-max is not enough at small alpha; below-mean is
        const int low = static_cast<int>(std::min_element(z.data(), z.data() + 5) - z.data());
        double prev_top = per_sample_wce(z, top, 0.05), prev_low = per_sample_wce(z, low, 0.05);
        for (int step = 2; step <= 20; ++step) {
            const double a = 0.05 * step;
            const double lt = per_sample_wce(z, top, a), ll = per_sample_wce(z, low, a);
            EXPECT_LT(lt, prev_top);
            EXPECT_GT(ll, prev_low);
            prev_top = lt;
            prev_low = ll;
        }
    }
}

// ---- CCC -------------------------------------------------------------------

TEST(Ccc, HandExamples) {
    Vector y(3), rev(3);
    y << -1, 0, 1;
    rev << 1, 0, -1;
    EXPECT_NEAR(ccc(y, y), 1.0, 1e-7);
    EXPECT_NEAR(ccc(y, rev), -1.0, 1e-7);
    Vector a(4), b(4);
    a << 0, 0, 1, 1;
    b << 0.5, 0.5, 0.5, 0.5;
    EXPECT_NEAR(ccc(a, b), 0.0, 1e-15);
    EXPECT_THROW(ccc(Vector::Ones(1), Vector::Ones(1)), DegenerateInput);
}

TEST(Ccc, SymmetricAndBounded) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto k = 2 + static_cast<Eigen::Index>(trial % 9);
        Vector y = random_matrix(k, 1, rng), p = random_matrix(k, 1, rng, -2, 2);
        const double r = ccc(y, p);
        EXPECT_NEAR(r, ccc(p, y), 1e-14);
        EXPECT_LE(std::abs(r), 1.0 + 1e-7);
    }
}

TEST(Ccc, ShiftStrictlyLowersPositiveAgreement) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        Vector y = random_matrix(6, 1, rng);
        Vector p = y + 0.3 * Vector(random_matrix(6, 1, rng));
        // only holds from a mean-matched prediction; otherwise a shift toward mean(y) helps
        p.array() += y.mean() - p.mean();
        const double base = ccc(y, p);
        if (base <= 0) continue;
        for (double c : {-0.5, -0.01, 0.01, 0.7}) EXPECT_LT(ccc(y, (p.array() + c).matrix()), base);
    }
}

// ---- class weights ---------------------------------------------------------

TEST(ClassWeights, Examples) {
    std::vector<std::int64_t> a{50, 30, 20};
    auto w = class_weights(a);
    EXPECT_DOUBLE_EQ(w.gamma(0), 0.5);
    EXPECT_DOUBLE_EQ(w.gamma(1), 0.7);
    EXPECT_DOUBLE_EQ(w.gamma(2), 0.8);
    EXPECT_EQ(w.population, 100);
    std::vector<std::int64_t> one{100};
    EXPECT_EQ(class_weights(one).gamma(0), 0.0);
    std::vector<std::int64_t> flat{25, 25, 25, 25};
    for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(class_weights(flat).gamma(j), 0.75);
    std::vector<std::int64_t> zeros{0, 0};
    EXPECT_THROW(class_weights(zeros), Error);
}

TEST(ClassWeights, SumIsCMinusOne) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> u(0, 500);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::int64_t> counts(2 + trial % 8);
        for (auto& c : counts) c = u(rng);
        counts[0] += 1;
        auto w = class_weights(counts);
        // sum_j (N - N_j)/N = (C N - N)/N exactly in rationals
        std::int64_t num = 0;
        for (auto c : counts) num += w.population - c;
        EXPECT_EQ(num, static_cast<std::int64_t>(counts.size() - 1) * w.population);
        EXPECT_NEAR(w.gamma.sum(), static_cast<double>(counts.size() - 1), 1e-12);
        for (Eigen::Index j = 0; j < w.gamma.size(); ++j) {
            EXPECT_GE(w.gamma(j), 0.0);
            EXPECT_LE(w.gamma(j), 1.0);
        }
    }
}

// ---- weighted CCC loss -----------------------------------------------------

TEST(WeightedCccLoss, PerfectPredictionsGiveZero) {
    std::mt19937_64 rng(2);
    Matrix va = random_matrix(12, 2, rng);
    std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
    std::vector<std::int64_t> counts{5, 3, 2};
    auto r = weighted_ccc_loss(va, va, y, class_weights(counts));
    EXPECT_NEAR(r.loss, 0.0, 1e-6);
    EXPECT_EQ(r.classes_used, 3);
}

TEST(WeightedCccLoss, OneClassAntiCorrelatedArousal) {
    Matrix label(6, 2), pred(6, 2);
    label << -1, -1, 0, 0, 1, 1, 0.2, 0.1, 0.4, 0.3, 0.9, -0.5;
    pred = label;
    pred(0, 1) = 1;   // class 0 arousal reversed
    pred(2, 1) = -1;
    std::vector<int> y{0, 0, 0, 1, 1, 1};
    ClassWeights w;
    w.gamma = Vector(2);
    w.gamma << 0.5, 0.5;
    auto r = weighted_ccc_loss(pred, label, y, w);
    EXPECT_NEAR(r.loss, 0.5, 1e-7);
}

TEST(WeightedCccLoss, SingletonClassesAreSkipped) {
    std::mt19937_64 rng(4);
    Matrix a = random_matrix(3, 2, rng), b = random_matrix(3, 2, rng);
    std::vector<int> y{0, 1, 2};
    std::vector<std::int64_t> counts{1, 1, 1};
    auto r = weighted_ccc_loss(a, b, y, class_weights(counts));
    EXPECT_EQ(r.loss, 0.0);
    EXPECT_EQ(r.classes_used, 0);
    EXPECT_TRUE(r.d_pred.isZero());
}

// ---- AU BCE ----------------------------------------------------------------

TEST(WeightedAuBce, Examples) {
    Matrix z(2, 3);
    z << 1, 0, 1, 0, 0, 1;
    EXPECT_LE(weighted_au_bce(z, z, Vector::Ones(2)).loss, 3 * 2 * kBceEpsilon);
    std::mt19937_64 rng(1);
    Matrix p = random_matrix(2, 3, rng, 0.1, 0.9);
    EXPECT_EQ(weighted_au_bce(p, z, Vector::Zero(2)).loss, 0.0);
    Matrix half = Matrix::Constant(1, 1, 0.5), one = Matrix::Ones(1, 1);
    EXPECT_NEAR(weighted_au_bce(half, one, Vector::Ones(1)).loss, 0.6931471805599453, 1e-12);
    Matrix bad = Matrix::Constant(1, 1, 0.5);
    EXPECT_THROW(weighted_au_bce(half, bad, Vector::Ones(1)), ContractViolation);
}

// ---- ramps and total -------------------------------------------------------

TEST(Ramp, Examples) {
    auto at_h = ramp_weights(5, 5);
    EXPECT_EQ(at_h.lambda1, 1.0);
    EXPECT_EQ(at_h.lambda2, 1.0);
    auto start = ramp_weights(0, 5);
    EXPECT_NEAR(start.lambda1, 0.36787944117144233, 1e-15);
    EXPECT_EQ(start.lambda2, 1.0);
    auto late = ramp_weights(1e9, 5);
    EXPECT_EQ(late.lambda1, 1.0);
    EXPECT_NEAR(late.lambda2, std::exp(-1.0), 1e-7);
    EXPECT_THROW(ramp_weights(-1, 5), Error);
    EXPECT_THROW(ramp_weights(1, 0), ConfigError);
}

TEST(Ramp, ContinuousAndMonotone) {
    for (int H : {1, 2, 5, 9}) {
        for (double d : {1e-3, 1e-6, 1e-9}) {
            EXPECT_NEAR(ramp_weights(H + d, H).lambda2, 1.0, 10 * d);
            EXPECT_NEAR(ramp_weights(H - d, H).lambda1, 1.0, 10 * d);
        }
        double p1 = 0, p2 = 2;
        for (int b = 0; b <= 60; ++b) {
            auto w = ramp_weights(b, H);
            EXPECT_GE(w.lambda1, p1);
            EXPECT_LE(w.lambda2, p2);
            EXPECT_GE(w.lambda1, std::exp(-1.0) - 1e-15);
            EXPECT_GE(w.lambda2, std::exp(-1.0) - 1e-15);
            p1 = w.lambda1;
            p2 = w.lambda2;
        }
    }
}

TEST(TotalLoss, Examples) {
    EXPECT_DOUBLE_EQ(total_loss(1, 1, 1, 5, 5), 3.0);
    EXPECT_NEAR(total_loss(2, 0, 4, 0, 5), 4.735758882342885, 1e-12);
    const auto w = ramp_weights(3, 5);
    EXPECT_DOUBLE_EQ(total_loss(1.7, 0, 0, 3, 5), w.lambda1 * 1.7);
}

// ---- gradients vs. central differences --------------------------------------

TEST(Gradients, WeightedCe) {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> pick(0, 4);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Index n = 1 + trial % 6;
        Matrix logits = random_matrix(n, 5, rng, -3, 3);
        Vector alphas = random_matrix(n, 1, rng, 0.05, 0.95);
        Vector w = random_matrix(n, 1, rng, 0.1, 1.0);
        std::vector<int> y(static_cast<std::size_t>(n));
        for (auto& v : y) v = pick(rng);
        const Vector* weights = trial % 2 ? &w : nullptr;
        auto r = confidence_weighted_ce(logits, y, alphas, weights);
        auto g_logits = numeric_gradient([&](const Matrix& l) { return confidence_weighted_ce(l, y, alphas, weights).loss; }, logits);
        auto g_alpha = numeric_gradient([&](const Matrix& a) { return confidence_weighted_ce(logits, y, a, weights).loss; }, alphas);
        EXPECT_LE(relative_error(r.d_logits, g_logits), 1e-4);
        EXPECT_LE(relative_error(r.d_alphas, g_alpha), 1e-4);
    }
}

TEST(Gradients, WeightedCcc) {
    std::mt19937_64 rng(22);
    std::uniform_int_distribution<int> pick(0, 2);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Index n = 4 + trial % 10;
        Matrix pred = random_matrix(n, 2, rng, -0.9, 0.9), label = random_matrix(n, 2, rng);
        std::vector<int> y(static_cast<std::size_t>(n));
        for (auto& v : y) v = pick(rng);
        std::vector<std::int64_t> counts{3, 5, 2};
        auto w = class_weights(counts);
        auto r = weighted_ccc_loss(pred, label, y, w);
        auto g = numeric_gradient([&](const Matrix& p) { return weighted_ccc_loss(p, label, y, w).loss; }, pred);
        EXPECT_LE(relative_error(r.d_pred, g), 1e-4);
    }
}

TEST(Gradients, WeightedAuBce) {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Index n = 1 + trial % 5, m = 1 + trial % 7;
        Matrix p = random_matrix(n, m, rng, 0.02, 0.98);
        Matrix z = random_matrix(n, m, rng).unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; });
        Vector alphas = random_matrix(n, 1, rng, 0.05, 1.0);
        auto r = weighted_au_bce(p, z, alphas);
        auto gp = numeric_gradient([&](const Matrix& x) { return weighted_au_bce(x, z, alphas).loss; }, p);
        auto ga = numeric_gradient([&](const Matrix& a) { return weighted_au_bce(p, z, a).loss; }, alphas);
        EXPECT_LE(relative_error(r.d_prob, gp), 1e-4);
        EXPECT_LE(relative_error(r.d_alphas, ga), 1e-4);
    }
}
