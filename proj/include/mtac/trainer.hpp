#pragma once

// Three-branch training loop: confidence-weighted target branch, class-
// weighted VA regression, gradient-stopped AU graph branch with memory
// template relabeling, mixed by the epoch ramps.

#include "mtac/augraph.hpp"
#include "mtac/config.hpp"
#include "mtac/losses.hpp"
#include "mtac/memory.hpp"
#include "mtac/metrics.hpp"
#include "mtac/model.hpp"

#include <json.hpp>

#include <limits>
#include <optional>

namespace mtac {

/// Raised when a loss turns non-finite; carries a JSON diagnostic snapshot.
class TrainingAborted : public Error {
public:
    TrainingAborted(const std::string& what, nlohmann::json snapshot) : Error(what), snapshot_(std::move(snapshot)) {}
    const nlohmann::json& snapshot() const { return snapshot_; }

private:
    nlohmann::json snapshot_;
};

/// Everything needed to rebuild the trained model and resume bookkeeping.
struct Checkpoint {
    TrainConfig config;
    EmotionTaxonomy taxonomy;
    int input_dim = 0;
    bool image_mode = false;
    int au_count = 0;
    int epoch = 0;                 // epochs completed
    std::uint64_t batch_counter = 0;
    TargetModel model;
    std::optional<GCNStack> au_stack;
    std::optional<AUAdjacency> adjacency;
    std::optional<MemoryTemplate> memory;
};

/// Selects which losses contribute to a gradient computation.
struct LossMask {
    bool target = true;
    bool va = true;
    bool au = true;
};

struct StepStats {
    double loss_total = 0, loss_wce = 0, loss_w3c = 0, loss_wau = 0;
    double grad_norm_target = 0, grad_norm_au = 0;
    std::size_t relabels_applied = 0;
};

class Trainer {
public:
    Trainer(TrainConfig config, DatasetManifest manifest)
        : cfg_(std::move(config)), data_(std::move(manifest)), rng_(cfg_.seed) {
        cfg_.validate();
        if (data_.count(Split::train) == 0) throw Error("manifest has no training records");
        if (cfg_.va_enabled && !data_.va_available())
            throw ConfigError("VA branch enabled but the manifest has no VA labels");
        if (cfg_.au_enabled && !data_.au_available())
            throw ConfigError("AU branch enabled but the manifest has no AU labels");

        const BackboneConfig bcfg{data_.image_mode, data_.input_dim(), cfg_.hidden_dim, cfg_.feature_dim};
        model_ = TargetModel(bcfg, data_.num_classes(), cfg_.confidence_bias, rng_);
        if (cfg_.au_enabled) {
            au_stack_.emplace(cfg_.feature_dim, data_.au_count, cfg_.gcn_width, rng_);
            Rng edge_rng(cfg_.seed ^ 0x5eed0ed6e5ULL);
            adjacency_ = make_adjacency(cfg_.edges, build_cooccurrence(data_), edge_rng);
            memory_.emplace(data_.au_count, data_.num_classes(), cfg_.tau);
        }
        std::vector<Param*> target_params = model_.backbone_params();
        model_.classifier.fc.collect(target_params);
        if (cfg_.confidence_enabled) model_.confidence.collect(target_params);
        if (cfg_.va_enabled) model_.va.fc.collect(target_params);
        target_params_ = target_params;
        target_opt_.emplace(target_params);
        if (au_stack_) {
            au_stack_->collect(au_params_);
            au_opt_.emplace(au_params_);
        }
        for (std::size_t i = 0; i < data_.records.size(); ++i) labels_.push_back(data_.records[i].emotion);
        relabeled_.assign(data_.records.size(), false);
        iterator_.emplace(data_, static_cast<std::size_t>(cfg_.batch_size), cfg_.seed);
        report_.config_hash = config_hash(cfg_);
        report_.seed = cfg_.seed;
    }

    const TrainConfig& config() const { return cfg_; }
    const DatasetManifest& manifest() const { return data_; }
    TargetModel& model() { return model_; }
    std::optional<GCNStack>& au_stack() { return au_stack_; }
    const std::optional<AUAdjacency>& adjacency() const { return adjacency_; }
    const std::optional<MemoryTemplate>& memory() const { return memory_; }
    const std::vector<int>& labels() const { return labels_; }
    const std::vector<AuditRecord>& audit() const { return audit_; }
    const MetricsReport& report() const { return report_; }
    const std::vector<Param*>& target_params() const { return target_params_; }
    const std::vector<Param*>& au_params() const { return au_params_; }
    BatchIterator& batches() { return *iterator_; }
    int epoch() const { return epoch_; }

    /// Recomputes class weights from current labels, resets the epoch
    /// accumulators and (optionally) the template's batch counter.
    void begin_epoch(int epoch) {
        epoch_ = epoch;
        auto train = data_.indices(Split::train);
        std::vector<std::int64_t> counts(static_cast<std::size_t>(data_.num_classes()), 0);
        for (auto i : train) ++counts[static_cast<std::size_t>(labels_[i])];
        gamma_ = class_weights(counts);
        if (memory_ && cfg_.template_reset_per_epoch) memory_->h = 0;
        if (memory_) template_at_epoch_start_ = memory_->T;
        acc_ = {};
        acc_au_prob_.resize(0, 0);
        acc_au_label_.resize(0, 0);
    }

    /// Forward, relabel, backward and parameter update for one batch.
    StepStats step(const Batch& batch) { return run_batch(batch, LossMask{}, true); }

    /// Gradients only (no relabeling side effects, no update), restricted to
    /// the selected losses.  Parameter gradients are left in place.
    StepStats compute_gradients(const Batch& batch, const LossMask& mask) { return run_batch(batch, mask, false); }

    EpochMetrics end_epoch() {
        EpochMetrics m;
        m.epoch = epoch_;
        m.learning_rate = cfg_.lr_at(epoch_, cfg_.learning_rate);
        const auto ramp = this->ramp();
        m.lambda1 = ramp.lambda1;
        m.lambda2 = ramp.lambda2;
        const double nb = std::max<double>(1.0, static_cast<double>(acc_.batches));
        m.loss_total = acc_.total / nb;
        m.loss_wce = acc_.wce / nb;
        m.loss_w3c = acc_.w3c / nb;
        m.loss_wau = acc_.wau / nb;
        m.au_grad_share = acc_.share / nb;
        m.mean_alpha = acc_.samples ? acc_.alpha_sum / static_cast<double>(acc_.samples) : 0.0;
        m.relabels_applied = acc_.relabels;
        if (memory_) m.template_drift = (memory_->T - template_at_epoch_start_).norm();
        if (acc_au_prob_.rows() > 0) m.au_f1 = au_f1(acc_au_prob_, acc_au_label_);
        m.relabel = current_relabel_quality();
        if (data_.count(Split::test) > 0) m.test = evaluate_split(Split::test);
        report_.epochs.push_back(m);
        return m;
    }

    /// Full schedule.  Returns the checkpoint of the final model.
    Checkpoint run() {
        for (int e = 0; e < cfg_.epochs; ++e) {
            begin_epoch(e);
            for (const auto& b : iterator_->epoch(static_cast<std::size_t>(e))) step(b);
            end_epoch();
        }
        return checkpoint();
    }

    Checkpoint checkpoint() const {
        Checkpoint c;
        c.config = cfg_;
        c.taxonomy = data_.taxonomy;
        c.input_dim = data_.input_dim();
        c.image_mode = data_.image_mode;
        c.au_count = data_.au_count;
        c.epoch = static_cast<int>(report_.epochs.size());
        c.batch_counter = iterator_->batches_emitted();
        c.model = model_;
        c.au_stack = au_stack_;
        c.adjacency = adjacency_;
        c.memory = memory_;
        return c;
    }

    EvalReport evaluate_split(Split split) const;

    RelabelQuality current_relabel_quality() const {
        std::size_t corrected = 0, to_truth = 0, flipped = 0;
        for (std::size_t i = 0; i < data_.records.size(); ++i) {
            const auto& s = data_.records[i];
            if (s.split != Split::train) continue;
            const int truth = s.flip_truth.value_or(s.emotion);
            const bool was_flipped = s.flip_truth.has_value() && *s.flip_truth != s.emotion;
            flipped += was_flipped;
            if (!relabeled_[i]) continue;
            ++corrected;
            to_truth += was_flipped && labels_[i] == truth;
        }
        return relabel_quality(corrected, to_truth, flipped);
    }

private:
    StepStats run_batch(const Batch& batch, const LossMask& mask, bool update) {
        const auto n = static_cast<Eigen::Index>(batch.size());
        const Matrix x = gather_inputs(data_, batch.indices);
        const Matrix features = model_.backbone->forward_train(x);
        const Vector alphas = cfg_.confidence_enabled ? confidence_scores(features, model_.confidence) : Vector::Ones(n);
        const Matrix logits = classify(features, model_.classifier);
        const auto ramp = this->ramp();

        std::vector<int> labels(batch.size());
        for (std::size_t r = 0; r < batch.size(); ++r) labels[r] = labels_[batch.indices[r]];

        StepStats st;
        if (!logits.allFinite()) {
            st.loss_wce = std::numeric_limits<double>::quiet_NaN();
            abort_nan(batch, st);
        }
        for (auto* p : target_params_) p->zero_grad();
        for (auto* p : au_params_) p->zero_grad();

        // AU branch on gradient-stopped features; alphas enter as constants.
        if (au_stack_) {
            const auto sem = au_stack_->forward_train(features, *adjacency_);
            const Matrix z = au_matrix(data_, batch.indices);
            const auto au = weighted_au_bce(sem.prob, z, alphas);
            st.loss_wau = au.loss;
            if (update) {
                *memory_ = update_template(*memory_, batch_centers(sem.logits, alphas, labels, data_.num_classes()));
                if (cfg_.relabel_enabled && epoch_ >= cfg_.relabel_start_epoch)
                    st.relabels_applied = apply_relabels(batch, sem.logits, alphas, logits, labels);
                append_rows(acc_au_prob_, sem.prob);
                append_rows(acc_au_label_, z);
            }
            if (mask.au) {
                const Matrix d_logits = ramp.lambda2 * au.d_prob.cwiseProduct(sem.prob.cwiseProduct((1.0 - sem.prob.array()).matrix()));
                au_stack_->backward(d_logits);
            }
        }

        Vector ce_weights;
        const bool gamma_in_ce = cfg_.gamma_placement == GammaPlacement::ce;
        if (gamma_in_ce) {
            ce_weights.resize(n);
            for (Eigen::Index i = 0; i < n; ++i) ce_weights(i) = gamma_.gamma(labels[static_cast<std::size_t>(i)]);
        }
        const auto wce = confidence_weighted_ce(logits, labels, alphas, gamma_in_ce ? &ce_weights : nullptr);
        st.loss_wce = wce.loss;

        Matrix d_features = Matrix::Zero(n, features.cols());
        if (mask.target) {
            d_features += model_.classifier.fc.backward(features, ramp.lambda1 * wce.d_logits);
            if (cfg_.confidence_enabled)
                d_features += model_.confidence.backward(features, alphas, ramp.lambda1 * wce.d_alphas);
        }
        if (cfg_.va_enabled) {
            const Matrix va_pred = predict_va(features, model_.va);
            const Matrix va_label = va_matrix(batch);
            ClassWeights w = gamma_;
            if (cfg_.gamma_placement != GammaPlacement::va) w.gamma.setOnes();
            const auto w3c = weighted_ccc_loss(va_pred, va_label, labels, w);
            st.loss_w3c = w3c.loss;
            if (mask.va) d_features += model_.va.backward(features, va_pred, ramp.lambda1 * w3c.d_pred);
        }
        st.loss_total = ramp.lambda1 * (st.loss_wce + st.loss_w3c) + ramp.lambda2 * st.loss_wau;
        if (!std::isfinite(st.loss_total)) abort_nan(batch, st);

        model_.backbone->backward(d_features);
        st.grad_norm_target = target_opt_->grad_norm();
        st.grad_norm_au = au_opt_ ? au_opt_->grad_norm() : 0.0;

        if (update) {
            target_opt_->step(cfg_.lr_at(epoch_, cfg_.learning_rate));
            if (au_opt_) au_opt_->step(cfg_.lr_at(epoch_, cfg_.au_learning_rate));
            ++acc_.batches;
            acc_.total += st.loss_total;
            acc_.wce += st.loss_wce;
            acc_.w3c += st.loss_w3c;
            acc_.wau += st.loss_wau;
            acc_.alpha_sum += alphas.sum();
            acc_.samples += static_cast<std::size_t>(n);
            acc_.relabels += st.relabels_applied;
            const double gsum = st.grad_norm_au + st.grad_norm_target;
            acc_.share += gsum > 0 ? st.grad_norm_au / gsum : 0.0;
        }
        return st;
    }

    std::size_t apply_relabels(const Batch& batch, const Matrix& semantics, const Vector& alphas, const Matrix& logits,
                               std::vector<int>& labels) {
        std::vector<std::string> ids;
        for (auto i : batch.indices) ids.push_back(data_.records[i].id);
        const auto decisions = relabel(semantics, alphas, labels, *memory_, RelabelGate{cfg_.gate_quantile}, ids);
        const auto preds = predict_classes(logits);
        std::size_t applied = 0;
        for (const auto& d : decisions) {
            if (!d.gated) continue;
            AuditRecord rec;
            rec.epoch = epoch_;
            rec.batch = batch.batch_index;
            rec.id = d.id;
            rec.original = d.original;
            rec.relabeled = d.relabeled;
            rec.applied = d.applied;
            rec.alpha = d.alpha;
            rec.classifier_prediction = preds[d.position];
            rec.reason = std::string(to_string(d.reason));
            for (Eigen::Index j = 0; j < d.distances.size(); ++j)
                rec.distances.push_back(std::isnan(d.distances(j)) ? std::nullopt : std::optional<double>(d.distances(j)));
            audit_.push_back(std::move(rec));
            if (!d.applied) continue;
            const auto idx = batch.indices[d.position];
            labels_[idx] = d.relabeled;
            labels[d.position] = d.relabeled;
            relabeled_[idx] = true;
            ++applied;
        }
        return applied;
    }

    // Without the AU branch there is nothing to hand over to: plain sum.
    RampWeights ramp() const { return au_stack_ ? ramp_weights(epoch_, cfg_.ramp_H) : RampWeights{1.0, 1.0}; }

    Matrix va_matrix(const Batch& batch) const {
        Matrix va(static_cast<Eigen::Index>(batch.size()), 2);
        for (std::size_t r = 0; r < batch.size(); ++r) {
            const auto& s = data_.records[batch.indices[r]];
            va(static_cast<Eigen::Index>(r), 0) = s.valence;
            va(static_cast<Eigen::Index>(r), 1) = s.arousal;
        }
        return va;
    }

    static void append_rows(Matrix& acc, const Matrix& rows) {
        const auto old = acc.rows();
        if (old == 0) {
            acc = rows;
            return;
        }
        acc.conservativeResize(old + rows.rows(), Eigen::NoChange);
        acc.bottomRows(rows.rows()) = rows;
    }

    [[noreturn]] void abort_nan(const Batch& batch, const StepStats& st) const {
        nlohmann::json snap{{"epoch", epoch_},
                            {"batch", batch.batch_index},
                            {"loss_wce", format_double(st.loss_wce)},
                            {"loss_w3c", format_double(st.loss_w3c)},
                            {"loss_wau", format_double(st.loss_wau)},
                            {"config", cfg_}};
        nlohmann::json ids = nlohmann::json::array();
        for (auto i : batch.indices) ids.push_back(data_.records[i].id);
        snap["batch_ids"] = ids;
        throw TrainingAborted("non-finite loss at epoch " + std::to_string(epoch_) + ", batch " +
                                  std::to_string(batch.batch_index),
                              snap);
    }

    struct Accumulators {
        std::size_t batches = 0, samples = 0, relabels = 0;
        double total = 0, wce = 0, w3c = 0, wau = 0, alpha_sum = 0, share = 0;
    };

    TrainConfig cfg_;
    DatasetManifest data_;
    Rng rng_;
    TargetModel model_;
    std::optional<GCNStack> au_stack_;
    std::optional<AUAdjacency> adjacency_;
    std::optional<MemoryTemplate> memory_;
    std::vector<Param*> target_params_, au_params_;
    std::optional<Adam> target_opt_, au_opt_;
    std::optional<BatchIterator> iterator_;
    std::vector<int> labels_;
    std::vector<bool> relabeled_;
    ClassWeights gamma_;
    Matrix template_at_epoch_start_;
    Matrix acc_au_prob_, acc_au_label_;
    Accumulators acc_;
    std::vector<AuditRecord> audit_;
    MetricsReport report_;
    int epoch_ = 0;
};

/// Test-time prediction: backbone, classifier and (when trained) VA head
/// only.  Confidence, AU branch and relabeling play no part.
inline EvalReport evaluate(const TargetModel& model, bool va_trained, const DatasetManifest& manifest, Split split) {
    auto idx = manifest.indices(split);
    if (idx.empty()) throw Error(std::string("no ") + std::string(to_string(split)) + " records to evaluate");
    const Matrix features = extract_features(gather_inputs(manifest, idx), *model.backbone);
    EvalReport r;
    r.count = idx.size();
    r.predictions = predict_classes(classify(features, model.classifier));
    std::vector<int> truth;
    for (auto i : idx) truth.push_back(manifest.records[i].flip_truth.value_or(manifest.records[i].emotion));
    r.confusion = confusion(truth, r.predictions, manifest.num_classes());
    r.accuracy = accuracy(r.confusion);
    if (va_trained) {
        bool all_va = true;
        for (auto i : idx) all_va = all_va && manifest.records[i].has_va();
        if (all_va && idx.size() >= 2) {
            const Matrix pred = predict_va(features, model.va);
            Vector v(static_cast<Eigen::Index>(idx.size())), a(v.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                v(static_cast<Eigen::Index>(k)) = manifest.records[idx[k]].valence;
                a(static_cast<Eigen::Index>(k)) = manifest.records[idx[k]].arousal;
            }
            r.va_ccc = std::array<double, 2>{ccc(v, pred.col(0)), ccc(a, pred.col(1))};
        }
    }
    return r;
}

inline EvalReport Trainer::evaluate_split(Split split) const { return mtac::evaluate(model_, cfg_.va_enabled, data_, split); }

inline EvalReport evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest, Split split = Split::test) {
    if (!(manifest.taxonomy == ckpt.taxonomy)) throw Error("taxonomy mismatch between checkpoint and manifest");
    if (manifest.input_dim() != ckpt.input_dim) throw Error("input dimension mismatch between checkpoint and manifest");
    return evaluate(ckpt.model, ckpt.config.va_enabled, manifest, split);
}

struct TrainResult {
    Checkpoint checkpoint;
    MetricsReport metrics;
    std::vector<AuditRecord> audit;
};

inline TrainResult train(const TrainConfig& config, const DatasetManifest& manifest) {
    Trainer t(config, manifest);
    auto ckpt = t.run();
    return {std::move(ckpt), t.report(), t.audit()};
}

}  // namespace mtac
