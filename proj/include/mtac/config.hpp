#pragma once

#include "mtac/augraph.hpp"
#include "mtac/common.hpp"

#include <json.hpp>

#include <set>
#include <string>
#include <vector>

namespace mtac {

enum class GammaPlacement { va, ce, off };

inline std::string_view to_string(GammaPlacement g) {
    switch (g) {
        case GammaPlacement::va: return "va";
        case GammaPlacement::ce: return "ce";
        case GammaPlacement::off: return "off";
    }
    return "va";
}

inline GammaPlacement parse_gamma_placement(std::string_view s) {
    if (s == "va") return GammaPlacement::va;
    if (s == "ce") return GammaPlacement::ce;
    if (s == "off") return GammaPlacement::off;
    throw ConfigError("unknown gamma placement '" + std::string(s) + "'");
}

struct TrainConfig {
    int epochs = 30;
    int batch_size = 64;
    std::uint64_t seed = 1;

    // Branch switches.  With confidence off the target branch is a plain
    // softmax cross entropy (alpha = 1).
    bool confidence_enabled = true;
    bool va_enabled = true;
    bool au_enabled = true;
    bool relabel_enabled = true;

    int ramp_H = 5;
    double tau = 0.9;
    bool template_reset_per_epoch = true;
    int relabel_start_epoch = 10;
    double gate_quantile = 0.2;
    GammaPlacement gamma_placement = GammaPlacement::va;
    EdgeMode edges = EdgeMode::data;

    double learning_rate = 0.01;
    double au_learning_rate = 0.005;
    std::vector<int> lr_milestones = {10, 20};
    double lr_decay = 0.1;

    int hidden_dim = 128;
    int feature_dim = 64;
    int gcn_width = 64;
    bool confidence_bias = true;

    // Applied by the run driver before training; kept here so the snapshot
    // fully describes a run.
    double noise = 0.0;

    /// Named branch combinations: none, t, t+va, t+au, full.
    void set_branches(std::string_view preset) {
        if (preset == "none") {
            confidence_enabled = va_enabled = au_enabled = relabel_enabled = false;
        } else if (preset == "t") {
            confidence_enabled = true;
            va_enabled = au_enabled = relabel_enabled = false;
        } else if (preset == "t+va") {
            confidence_enabled = va_enabled = true;
            au_enabled = relabel_enabled = false;
        } else if (preset == "t+au") {
            confidence_enabled = au_enabled = relabel_enabled = true;
            va_enabled = false;
        } else if (preset == "full") {
            confidence_enabled = va_enabled = au_enabled = relabel_enabled = true;
        } else {
            throw ConfigError("unknown branch preset '" + std::string(preset) + "'");
        }
    }

    std::string branches() const {
        if (!confidence_enabled && !va_enabled && !au_enabled) return "none";
        std::string s = confidence_enabled ? "t" : "ce";
        if (va_enabled && au_enabled && confidence_enabled && relabel_enabled) return "full";
        if (va_enabled) s += "+va";
        if (au_enabled) s += relabel_enabled ? "+au" : "+au(norelabel)";
        return s;
    }

    double lr_at(int epoch, double base) const {
        double lr = base;
        for (int m : lr_milestones)
            if (epoch >= m) lr *= lr_decay;
        return lr;
    }

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (ramp_H < 1) throw ConfigError("ramp threshold H must be >= 1");
        if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
        if (relabel_enabled && !au_enabled) throw ConfigError("relabeling requires the AU branch");
        if (!(gate_quantile >= 0.0 && gate_quantile <= 1.0)) throw ConfigError("gate quantile must lie in [0, 1]");
        if (relabel_start_epoch < 0) throw ConfigError("relabel start epoch must be >= 0");
        if (!(learning_rate > 0) || !(au_learning_rate > 0)) throw ConfigError("learning rates must be positive");
        if (hidden_dim < 1 || feature_dim < 1 || gcn_width < 1) throw ConfigError("layer widths must be positive");
        if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("noise ratio must lie in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed},
                       {"confidence_enabled", c.confidence_enabled},
                       {"va_enabled", c.va_enabled},
                       {"au_enabled", c.au_enabled},
                       {"relabel_enabled", c.relabel_enabled},
                       {"ramp_H", c.ramp_H},
                       {"tau", c.tau},
                       {"template_reset_per_epoch", c.template_reset_per_epoch},
                       {"relabel_start_epoch", c.relabel_start_epoch},
                       {"gate_quantile", c.gate_quantile},
                       {"gamma_placement", std::string(to_string(c.gamma_placement))},
                       {"edges", std::string(to_string(c.edges))},
                       {"learning_rate", c.learning_rate},
                       {"au_learning_rate", c.au_learning_rate},
                       {"lr_milestones", c.lr_milestones},
                       {"lr_decay", c.lr_decay},
                       {"hidden_dim", c.hidden_dim},
                       {"feature_dim", c.feature_dim},
                       {"gcn_width", c.gcn_width},
                       {"confidence_bias", c.confidence_bias},
                       {"noise", c.noise}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    nlohmann::json defaults = TrainConfig{};
    for (const auto& [key, _] : j.items())
        if (!defaults.contains(key) && key != "branches") throw ConfigError("unknown train config key '" + key + "'");
    TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.confidence_enabled = j.value("confidence_enabled", d.confidence_enabled);
    c.va_enabled = j.value("va_enabled", d.va_enabled);
    c.au_enabled = j.value("au_enabled", d.au_enabled);
    c.relabel_enabled = j.value("relabel_enabled", d.relabel_enabled);
    if (j.contains("branches")) c.set_branches(j.at("branches").get<std::string>());
    c.ramp_H = j.value("ramp_H", d.ramp_H);
    c.tau = j.value("tau", d.tau);
    c.template_reset_per_epoch = j.value("template_reset_per_epoch", d.template_reset_per_epoch);
    c.relabel_start_epoch = j.value("relabel_start_epoch", d.relabel_start_epoch);
    c.gate_quantile = j.value("gate_quantile", d.gate_quantile);
    c.gamma_placement = parse_gamma_placement(j.value("gamma_placement", std::string("va")));
    c.edges = parse_edge_mode(j.value("edges", std::string("data")));
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.au_learning_rate = j.value("au_learning_rate", d.au_learning_rate);
    c.lr_milestones = j.value("lr_milestones", d.lr_milestones);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.gcn_width = j.value("gcn_width", d.gcn_width);
    c.confidence_bias = j.value("confidence_bias", d.confidence_bias);
    c.noise = j.value("noise", d.noise);
}

/// Stable hash of the canonical JSON form of a config.
inline std::string config_hash(const TrainConfig& c) { return hex64(fnv1a(nlohmann::json(c).dump())); }

}  // namespace mtac
