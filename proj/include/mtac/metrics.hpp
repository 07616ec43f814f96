#pragma once

// Evaluation metrics, per-epoch records and the relabel audit.

#include "mtac/losses.hpp"
#include "mtac/memory.hpp"
#include "mtac/synth.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>
#include <unordered_map>

namespace mtac {

using ConfusionMatrix = std::vector<std::vector<std::int64_t>>;  // [truth][predicted]

inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int num_classes) {
    require(truth.size() == predicted.size(), "confusion inputs disagree");
    ConfusionMatrix cm(static_cast<std::size_t>(num_classes), std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
    for (std::size_t i = 0; i < truth.size(); ++i) ++cm[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
    return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
    std::int64_t hit = 0, total = 0;
    for (std::size_t r = 0; r < cm.size(); ++r)
        for (std::size_t c = 0; c < cm[r].size(); ++c) {
            total += cm[r][c];
            if (r == c) hit += cm[r][c];
        }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

/// Per-column F1 of thresholded predictions (p >= 0.5); 0 when undefined.
inline std::vector<double> au_f1(const Matrix& prob, const Matrix& labels) {
    std::vector<double> out;
    for (Eigen::Index a = 0; a < prob.cols(); ++a) {
        double tp = 0, fp = 0, fn = 0;
        for (Eigen::Index i = 0; i < prob.rows(); ++i) {
            const bool p = prob(i, a) >= 0.5, z = labels(i, a) == 1.0;
            tp += p && z;
            fp += p && !z;
            fn += !p && z;
        }
        out.push_back(tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0);
    }
    return out;
}

struct EvalReport {
    std::size_t count = 0;
    double accuracy = 0;
    ConfusionMatrix confusion;
    std::optional<std::array<double, 2>> va_ccc;  // when the VA head was trained and labels exist
    std::vector<int> predictions;
};

struct RelabelQuality {
    std::size_t corrected = 0;          // distinct samples relabeled at least once
    std::size_t corrected_to_truth = 0; // flipped samples whose final label is their true class
    std::size_t flipped = 0;
    std::optional<double> precision;    // undefined when nothing was corrected
    double recall = 0;
};

inline RelabelQuality relabel_quality(std::size_t corrected, std::size_t to_truth, std::size_t flipped) {
    RelabelQuality q{corrected, to_truth, flipped, std::nullopt, 0.0};
    if (corrected) q.precision = static_cast<double>(to_truth) / static_cast<double>(corrected);
    if (flipped) q.recall = static_cast<double>(to_truth) / static_cast<double>(flipped);
    return q;
}

struct EpochMetrics {
    int epoch = 0;
    double learning_rate = 0;
    double lambda1 = 0, lambda2 = 0;
    double loss_total = 0, loss_wce = 0, loss_w3c = 0, loss_wau = 0;  // batch means
    double mean_alpha = 0;
    double au_grad_share = 0;  // mean over batches of |g_au| / (|g_au| + |g_target|)
    double template_drift = 0; // Frobenius norm of the template change over the epoch
    std::size_t relabels_applied = 0;
    std::vector<double> au_f1;  // on the epoch's training batches
    RelabelQuality relabel;     // cumulative
    std::optional<EvalReport> test;
};

struct MetricsReport {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::vector<EpochMetrics> epochs;

    const EpochMetrics& last() const { return epochs.back(); }
};

inline nlohmann::json to_json_value(const EvalReport& r) {
    nlohmann::json j{{"count", r.count}, {"accuracy", r.accuracy}, {"confusion", r.confusion}};
    j["va_ccc"] = r.va_ccc ? nlohmann::json(*r.va_ccc) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json_value(const EpochMetrics& m, const MetricsReport& report) {
    nlohmann::json j{{"schema", "mtac-metrics-v1"},
                     {"config_hash", report.config_hash},
                     {"seed", report.seed},
                     {"epoch", m.epoch},
                     {"lr", m.learning_rate},
                     {"lambda1", m.lambda1},
                     {"lambda2", m.lambda2},
                     {"loss_total", m.loss_total},
                     {"loss_wce", m.loss_wce},
                     {"loss_w3c", m.loss_w3c},
                     {"loss_wau", m.loss_wau},
                     {"mean_alpha", m.mean_alpha},
                     {"au_grad_share", m.au_grad_share},
                     {"template_drift", m.template_drift},
                     {"relabels_applied", m.relabels_applied},
                     {"au_f1", m.au_f1},
                     {"relabel_corrected", m.relabel.corrected},
                     {"relabel_to_truth", m.relabel.corrected_to_truth},
                     {"relabel_flipped", m.relabel.flipped},
                     {"relabel_recall", m.relabel.recall}};
    j["relabel_precision"] = m.relabel.precision ? nlohmann::json(*m.relabel.precision) : nlohmann::json(nullptr);
    j["test"] = m.test ? to_json_value(*m.test) : nlohmann::json(nullptr);
    return j;
}

/// One JSON object per line per epoch.
inline void write_metrics(std::ostream& out, const MetricsReport& report) {
    for (const auto& e : report.epochs) out << to_json_value(e, report).dump() << '\n';
}

inline void write_metrics(const std::filesystem::path& path, const MetricsReport& report) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_metrics(out, report);
}

/// One line of the relabel audit log; written for every confidence-gated
/// sample, applied or not.
struct AuditRecord {
    int epoch = 0;
    std::uint64_t batch = 0;
    std::string id;
    int original = 0;
    int relabeled = 0;
    bool applied = false;
    double alpha = 0;
    int classifier_prediction = 0;
    std::string reason;
    std::vector<std::optional<double>> distances;
};

inline nlohmann::json to_json_value(const AuditRecord& r) {
    nlohmann::json d = nlohmann::json::array();
    for (const auto& v : r.distances) d.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    return {{"epoch", r.epoch},   {"batch", r.batch}, {"id", r.id},       {"org", r.original},
            {"new", r.relabeled}, {"applied", r.applied}, {"alpha", r.alpha}, {"pred", r.classifier_prediction},
            {"reason", r.reason}, {"dist", d}};
}

inline AuditRecord audit_from_json(const nlohmann::json& j) {
    AuditRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.batch = j.at("batch").get<std::uint64_t>();
    r.id = j.at("id").get<std::string>();
    r.original = j.at("org").get<int>();
    r.relabeled = j.at("new").get<int>();
    r.applied = j.at("applied").get<bool>();
    r.alpha = j.at("alpha").get<double>();
    r.classifier_prediction = j.value("pred", r.original);
    r.reason = j.value("reason", std::string());
    for (const auto& v : j.at("dist")) r.distances.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    return r;
}

inline void write_audit(std::ostream& out, const std::vector<AuditRecord>& records) {
    for (const auto& r : records) out << to_json_value(r).dump() << '\n';
}

inline void write_audit(const std::filesystem::path& path, const std::vector<AuditRecord>& records) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_audit(out, records);
}

inline std::vector<AuditRecord> read_audit(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open audit log " + path.string());
    std::vector<AuditRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(audit_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad audit record: ") + e.what(), lineno);
        }
    }
    return out;
}

struct AuditSummary {
    RelabelQuality quality;
    /// per true class: flipped count, corrected-to-truth count
    std::vector<std::pair<std::size_t, std::size_t>> per_class;
    /// Precision of replacing each gated sample's label by the classifier's
    /// argmax instead of the template's nearest class.
    std::optional<double> classifier_baseline_precision;
};

/// Scores applied relabels against the flip ground truth.  The last applied
/// decision per sample is its final label.
inline AuditSummary relabel_audit(const std::vector<AuditRecord>& records, const FlipMask& mask) {
    const auto truth = mask.by_id();
    std::map<std::string, int> final_label;
    std::map<std::string, int> baseline_label;
    int num_classes = 0;
    for (const auto& e : mask.entries) num_classes = std::max({num_classes, e.original + 1, e.corrupted + 1});
    for (const auto& r : records) {
        if (!truth.count(r.id)) throw Error("audit record id '" + r.id + "' not in flip mask");
        if (r.applied) final_label[r.id] = r.relabeled;
        if (r.classifier_prediction != r.original) baseline_label[r.id] = r.classifier_prediction;
    }
    AuditSummary s;
    s.per_class.assign(static_cast<std::size_t>(num_classes), {0, 0});
    std::size_t to_truth = 0;
    for (const auto& e : mask.entries)
        if (e.flipped()) ++s.per_class[static_cast<std::size_t>(e.original)].first;
    for (const auto& [id, label] : final_label) {
        const auto* e = truth.at(id);
        if (e->flipped() && label == e->original) {
            ++to_truth;
            ++s.per_class[static_cast<std::size_t>(e->original)].second;
        }
    }
    s.quality = relabel_quality(final_label.size(), to_truth, mask.flipped_count());
    if (!baseline_label.empty()) {
        std::size_t hit = 0;
        for (const auto& [id, label] : baseline_label) {
            const auto* e = truth.at(id);
            hit += e->flipped() && label == e->original;
        }
        s.classifier_baseline_precision = static_cast<double>(hit) / static_cast<double>(baseline_label.size());
    }
    return s;
}

}  // namespace mtac
