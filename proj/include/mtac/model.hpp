#pragma once

// Shared backbone and the target-branch heads: confidence score, emotion
// classifier and valence/arousal regressor.

#include "mtac/core.hpp"
#include "mtac/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

namespace mtac {

/// Stacks the inputs of the given records into an N x input_dim matrix.
inline Matrix gather_inputs(const DatasetManifest& manifest, std::span<const std::size_t> indices) {
    Matrix x(static_cast<Eigen::Index>(indices.size()), manifest.input_dim());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto& f = manifest.records.at(indices[r]).features;
        if (f.size() != x.cols()) throw Error("record " + manifest.records[indices[r]].id + " has wrong input width");
        x.row(static_cast<Eigen::Index>(r)) = f.transpose();
    }
    return x;
}

inline Matrix extract_features(const Matrix& inputs, const Backbone& backbone) {
    if (inputs.cols() != backbone.input_dim())
        throw Error("dimension mismatch: backbone expects " + std::to_string(backbone.input_dim()) + " inputs, got " +
                    std::to_string(inputs.cols()));
    return backbone.forward(inputs);
}

/// alpha_i = sigmoid(w . f_i + b).  The bias can be switched off.
struct ConfidenceHead {
    Linear fc;
    bool use_bias = true;

    ConfidenceHead() = default;
    ConfidenceHead(Eigen::Index dim, bool bias, Rng& rng) : fc("confidence", dim, 1, rng), use_bias(bias) {}

    Vector pre_activation(const Matrix& features) const {
        Vector z = features * fc.weight.value.row(0).transpose();
        if (use_bias) z.array() += fc.bias.value(0, 0);
        return z;
    }

    /// d loss / d features, given d loss / d alpha.
    Matrix backward(const Matrix& features, const Vector& alphas, const Vector& d_alphas) {
        Vector d_pre = d_alphas.cwiseProduct(alphas.cwiseProduct((1.0 - alphas.array()).matrix()));
        Matrix d_pre_m = d_pre;
        Matrix dx = fc.backward(features, d_pre_m);
        if (!use_bias) fc.bias.grad.setZero();
        return dx;
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&fc.weight);
        if (use_bias) out.push_back(&fc.bias);
    }
};

/// Saturated sigmoids are pulled back inside the open interval (0, 1).
inline Vector confidence_scores(const Matrix& features, const ConfidenceHead& head) {
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = std::nextafter(1.0, 0.0);
    return head.pre_activation(features).unaryExpr([&](double z) { return std::clamp(mtac::sigmoid(z), lo, hi); });
}

struct ClassifierHead {
    Linear fc;  // weight row j is the j-th class's parameter vector

    ClassifierHead() = default;
    ClassifierHead(Eigen::Index dim, Eigen::Index classes, Rng& rng) : fc("classifier", dim, classes, rng) {}
};

inline Matrix classify(const Matrix& features, const ClassifierHead& head) { return head.fc.forward(features); }

/// Row-wise argmax; ties go to the lowest class index.
inline std::vector<int> predict_classes(const Matrix& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

/// Affine map to (valence, arousal) squashed by tanh.
struct VAHead {
    Linear fc;

    VAHead() = default;
    VAHead(Eigen::Index dim, Rng& rng) : fc("va", dim, 2, rng) {}

    /// d loss / d features, given the forward output and d loss / d output.
    Matrix backward(const Matrix& features, const Matrix& out, const Matrix& d_out) {
        Matrix d_pre = d_out.cwiseProduct((1.0 - out.array().square()).matrix());
        return fc.backward(features, d_pre);
    }
};

inline Matrix predict_va(const Matrix& features, const VAHead& head) {
    return head.fc.forward(features).unaryExpr([](double z) { return std::tanh(z); });
}

struct BackboneConfig {
    bool image_mode = false;
    int input_dim = 0;
    int hidden_dim = 128;
    int feature_dim = 64;
};

inline std::unique_ptr<Backbone> make_backbone(const BackboneConfig& cfg, Rng& rng) {
    if (cfg.image_mode) return std::make_unique<ConvBackbone>(cfg.feature_dim, rng);
    if (cfg.input_dim <= 0) throw ConfigError("backbone input dimension must be positive");
    return std::make_unique<MlpBackbone>(cfg.input_dim, cfg.hidden_dim, cfg.feature_dim, rng);
}

/// Backbone plus target-branch heads; everything that runs at test time.
struct TargetModel {
    std::unique_ptr<Backbone> backbone;
    ConfidenceHead confidence;
    ClassifierHead classifier;
    VAHead va;

    TargetModel() = default;
    TargetModel(const BackboneConfig& cfg, int classes, bool confidence_bias, Rng& rng)
        : backbone(make_backbone(cfg, rng)),
          confidence(cfg.feature_dim, confidence_bias, rng),
          classifier(cfg.feature_dim, classes, rng),
          va(cfg.feature_dim, rng) {}

    TargetModel(const TargetModel& o)
        : backbone(o.backbone ? o.backbone->clone() : nullptr), confidence(o.confidence), classifier(o.classifier), va(o.va) {}
    TargetModel& operator=(TargetModel o) {
        std::swap(backbone, o.backbone);
        confidence = o.confidence;
        classifier = o.classifier;
        va = o.va;
        return *this;
    }
    TargetModel(TargetModel&&) = default;

    std::vector<Param*> backbone_params() {
        std::vector<Param*> out;
        backbone->collect(out);
        return out;
    }
};

}  // namespace mtac
