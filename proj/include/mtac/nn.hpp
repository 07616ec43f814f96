#pragma once

// Minimal dense building blocks with explicit backward passes: trainable
// parameters, affine layers, the feature-mode MLP and image-mode conv
// backbones, and an Adam optimizer.

#include "mtac/common.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mtac {

struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;

    Param() = default;
    Param(std::string n, Matrix init) : name(std::move(n)), value(std::move(init)) { reset_state(); }

    void reset_state() {
        grad = Matrix::Zero(value.rows(), value.cols());
        adam_m = grad;
        adam_v = grad;
    }
    void zero_grad() { grad.setZero(); }
};

using Rng = std::mt19937_64;

/// Glorot-uniform initialization.
inline Matrix glorot(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

/// y = x W^T + b for row-major batches (N x in -> N x out).
class Linear {
public:
    Linear() = default;
    Linear(std::string name, Eigen::Index in, Eigen::Index out, Rng& rng)
        : weight(name + ".weight", glorot(out, in, in, out, rng)), bias(name + ".bias", Matrix::Zero(out, 1)) {}

    Eigen::Index in_dim() const { return weight.value.cols(); }
    Eigen::Index out_dim() const { return weight.value.rows(); }

    Matrix forward(const Matrix& x) const {
        if (x.cols() != in_dim())
            throw Error("dimension mismatch in " + weight.name + ": got " + std::to_string(x.cols()) + ", expected " +
                        std::to_string(in_dim()));
        Matrix y = x * weight.value.transpose();
        y.rowwise() += bias.value.col(0).transpose();
        return y;
    }

    /// Accumulates parameter gradients; returns d loss / d x.
    Matrix backward(const Matrix& x, const Matrix& dy) {
        weight.grad.noalias() += dy.transpose() * x;
        bias.grad.col(0) += dy.colwise().sum().transpose();
        return dy * weight.value;
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }

    Param weight;
    Param bias;
};

inline Matrix leaky(const Matrix& x) { return x.unaryExpr([](double v) { return mtac::leaky(v); }); }
inline Matrix leaky_backward(const Matrix& pre, const Matrix& dy) {
    return dy.cwiseProduct(pre.unaryExpr([](double v) { return leaky_grad(v); }));
}

/// Feature extractor interface.  forward() is const and reentrant;
/// forward_train() keeps activations for a following backward().
class Backbone {
public:
    virtual ~Backbone() = default;
    virtual Matrix forward(const Matrix& x) const = 0;
    virtual Matrix forward_train(const Matrix& x) = 0;
    /// Accumulates parameter gradients from d loss / d features.
    virtual void backward(const Matrix& d_features) = 0;
    virtual void collect(std::vector<Param*>& out) = 0;
    virtual Eigen::Index input_dim() const = 0;
    virtual Eigen::Index output_dim() const = 0;
    virtual std::string kind() const = 0;
    virtual std::unique_ptr<Backbone> clone() const = 0;
};

/// in -> hidden -> out, leaky-rectified after both layers.
class MlpBackbone final : public Backbone {
public:
    MlpBackbone(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng)
        : l1_("backbone.fc1", in, hidden, rng), l2_("backbone.fc2", hidden, out, rng) {}

    Matrix forward(const Matrix& x) const override { return mtac::leaky(l2_.forward(mtac::leaky(l1_.forward(x)))); }

    Matrix forward_train(const Matrix& x) override {
        x_ = x;
        pre1_ = l1_.forward(x);
        h1_ = mtac::leaky(pre1_);
        pre2_ = l2_.forward(h1_);
        return mtac::leaky(pre2_);
    }

    void backward(const Matrix& d_features) override {
        Matrix d_pre2 = leaky_backward(pre2_, d_features);
        Matrix d_h1 = l2_.backward(h1_, d_pre2);
        l1_.backward(x_, leaky_backward(pre1_, d_h1));
    }

    void collect(std::vector<Param*>& out) override {
        l1_.collect(out);
        l2_.collect(out);
    }
    Eigen::Index input_dim() const override { return l1_.in_dim(); }
    Eigen::Index output_dim() const override { return l2_.out_dim(); }
    std::string kind() const override { return "mlp"; }
    std::unique_ptr<Backbone> clone() const override { return std::make_unique<MlpBackbone>(*this); }

private:
    Linear l1_, l2_;
    Matrix x_, pre1_, h1_, pre2_;
};

namespace detail {

/// 3x3, stride 1, zero padding 1.  `img` is (channels, side*side).
inline Matrix im2col3(const Matrix& img, int side) {
    const auto ch = img.rows();
    Matrix cols = Matrix::Zero(ch * 9, side * side);
    for (Eigen::Index c = 0; c < ch; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const auto row = c * 9 + ky * 3 + kx;
                for (int y = 0; y < side; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= side) continue;
                    for (int x = 0; x < side; ++x) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= side) continue;
                        cols(row, y * side + x) = img(c, sy * side + sx);
                    }
                }
            }
    return cols;
}

inline Matrix col2im3(const Matrix& cols, Eigen::Index ch, int side) {
    Matrix img = Matrix::Zero(ch, side * side);
    for (Eigen::Index c = 0; c < ch; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const auto row = c * 9 + ky * 3 + kx;
                for (int y = 0; y < side; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= side) continue;
                    for (int x = 0; x < side; ++x) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= side) continue;
                        img(c, sy * side + sx) += cols(row, y * side + x);
                    }
                }
            }
    return img;
}

inline Matrix avgpool2(const Matrix& img, int side) {
    const int half = side / 2;
    Matrix out = Matrix::Zero(img.rows(), half * half);
    for (Eigen::Index c = 0; c < img.rows(); ++c)
        for (int y = 0; y < half; ++y)
            for (int x = 0; x < half; ++x)
                out(c, y * half + x) = 0.25 * (img(c, (2 * y) * side + 2 * x) + img(c, (2 * y) * side + 2 * x + 1) +
                                               img(c, (2 * y + 1) * side + 2 * x) + img(c, (2 * y + 1) * side + 2 * x + 1));
    return out;
}

inline Matrix avgpool2_backward(const Matrix& d_out, int side) {
    const int half = side / 2;
    Matrix d_in = Matrix::Zero(d_out.rows(), side * side);
    for (Eigen::Index c = 0; c < d_out.rows(); ++c)
        for (int y = 0; y < half; ++y)
            for (int x = 0; x < half; ++x) {
                const double g = 0.25 * d_out(c, y * half + x);
                d_in(c, (2 * y) * side + 2 * x) += g;
                d_in(c, (2 * y) * side + 2 * x + 1) += g;
                d_in(c, (2 * y + 1) * side + 2 * x) += g;
                d_in(c, (2 * y + 1) * side + 2 * x + 1) += g;
            }
    return d_in;
}

}  // namespace detail

/// Image-mode extractor for 32x32 grayscale input: three blocks of
/// (3x3 conv, leaky rectifier, 2x2 average pool), then an affine map to D.
class ConvBackbone final : public Backbone {
public:
    static constexpr int kSide = 32;
    static constexpr int kChannels[4] = {1, 8, 16, 16};

    ConvBackbone(Eigen::Index out, Rng& rng) {
        for (int b = 0; b < 3; ++b) {
            const auto cin = kChannels[b], cout = kChannels[b + 1];
            conv_.emplace_back(Linear("backbone.conv" + std::to_string(b + 1), cin * 9, cout, rng));
        }
        head_ = Linear("backbone.fc", kChannels[3] * 16, out, rng);
    }

    Matrix forward(const Matrix& x) const override {
        check(x);
        Matrix out(x.rows(), output_dim());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            Matrix img = Eigen::Map<const Matrix>(x.row(i).eval().data(), 1, kSide * kSide);
            int side = kSide;
            for (const auto& conv : conv_) {
                Matrix pre = conv.weight.value * detail::im2col3(img, side);
                pre.colwise() += conv.bias.value.col(0);
                img = detail::avgpool2(mtac::leaky(pre), side);
                side /= 2;
            }
            out.row(i) = mtac::leaky(head_.forward(flatten(img)));
        }
        return out;
    }

    Matrix forward_train(const Matrix& x) override {
        check(x);
        caches_.assign(static_cast<std::size_t>(x.rows()), {});
        Matrix out(x.rows(), output_dim());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            auto& cache = caches_[static_cast<std::size_t>(i)];
            Matrix img = Eigen::Map<const Matrix>(x.row(i).eval().data(), 1, kSide * kSide);
            int side = kSide;
            for (const auto& conv : conv_) {
                cache.cols.push_back(detail::im2col3(img, side));
                Matrix pre = conv.weight.value * cache.cols.back();
                pre.colwise() += conv.bias.value.col(0);
                cache.pre.push_back(pre);
                img = detail::avgpool2(mtac::leaky(pre), side);
                side /= 2;
            }
            cache.flat = flatten(img);
            cache.head_pre = head_.forward(cache.flat);
            out.row(i) = mtac::leaky(cache.head_pre);
        }
        return out;
    }

    void backward(const Matrix& d_features) override {
        for (Eigen::Index i = 0; i < d_features.rows(); ++i) {
            auto& cache = caches_[static_cast<std::size_t>(i)];
            Matrix d_flat = head_.backward(cache.flat, leaky_backward(cache.head_pre, d_features.row(i)));
            int side = kSide >> 3;
            Matrix d_img = unflatten(d_flat, kChannels[3], side * side);
            for (int b = 2; b >= 0; --b) {
                side *= 2;
                Matrix d_pre = leaky_backward(cache.pre[static_cast<std::size_t>(b)], detail::avgpool2_backward(d_img, side));
                auto& conv = conv_[static_cast<std::size_t>(b)];
                conv.weight.grad.noalias() += d_pre * cache.cols[static_cast<std::size_t>(b)].transpose();
                conv.bias.grad.col(0) += d_pre.rowwise().sum();
                if (b > 0) d_img = detail::col2im3(conv.weight.value.transpose() * d_pre, kChannels[b], side);
            }
        }
    }

    void collect(std::vector<Param*>& out) override {
        for (auto& conv : conv_) conv.collect(out);
        head_.collect(out);
    }
    Eigen::Index input_dim() const override { return kSide * kSide; }
    Eigen::Index output_dim() const override { return head_.out_dim(); }
    std::string kind() const override { return "conv"; }
    std::unique_ptr<Backbone> clone() const override { return std::make_unique<ConvBackbone>(*this); }

private:
    struct Cache {
        std::vector<Matrix> cols, pre;
        Matrix flat, head_pre;
    };

    void check(const Matrix& x) const {
        if (x.cols() != input_dim())
            throw Error("dimension mismatch: conv backbone expects 1024 inputs, got " + std::to_string(x.cols()));
    }
    // (channels, pixels) -> 1 x channels*pixels, channel-major.
    static Matrix flatten(const Matrix& img) {
        Matrix flat(1, img.size());
        for (Eigen::Index c = 0; c < img.rows(); ++c)
            for (Eigen::Index p = 0; p < img.cols(); ++p) flat(0, c * img.cols() + p) = img(c, p);
        return flat;
    }
    static Matrix unflatten(const Matrix& flat, Eigen::Index ch, Eigen::Index pixels) {
        Matrix img(ch, pixels);
        for (Eigen::Index c = 0; c < ch; ++c)
            for (Eigen::Index p = 0; p < pixels; ++p) img(c, p) = flat(0, c * pixels + p);
        return img;
    }

    std::vector<Linear> conv_;  // weight (cout, cin*9) applied to im2col columns
    Linear head_;
    std::vector<Cache> caches_;
};

/// Adam over a fixed parameter list.
class Adam {
public:
    explicit Adam(std::vector<Param*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto* p : params_) {
            p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * p->grad;
            p->adam_v = beta2_ * p->adam_v + (1.0 - beta2_) * p->grad.cwiseAbs2();
            p->value.array() -= lr * (p->adam_m.array() / c1) / ((p->adam_v.array() / c2).sqrt() + eps_);
        }
    }

    double grad_norm() const {
        double s = 0;
        for (auto* p : params_) s += p->grad.squaredNorm();
        return std::sqrt(s);
    }

    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }

private:
    std::vector<Param*> params_;
    double beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
};

}  // namespace mtac
