#pragma once

// Checkpoint container, format "mtac-checkpoint-v1": a single JSON document
//
//   { "format": "mtac-checkpoint-v1",
//     "config": {...TrainConfig...}, "config_hash": "<16 hex>",
//     "taxonomy": [names], "input_dim": D_in, "image_mode": bool, "au_count": M,
//     "counters": {"epoch": e, "batch": h},
//     "params": {"<name>": {"rows": r, "cols": c, "data": [column-major doubles]}},
//     "au": {"params": {...}, "adjacency": {"A": [...], "A_norm": [...]}} | null,
//     "memory": {"tau": t, "h": h, "initialized": [bools], "T": {"rows","cols","data"}} | null }
//
// Doubles are written in shortest round-trip form, so save/load is exact.

#include "mtac/trainer.hpp"

#include <json.hpp>

#include <fstream>

namespace mtac {

inline constexpr std::string_view kCheckpointFormat = "mtac-checkpoint-v1";

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw Error("checkpoint matrix has wrong element count");
    return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

inline std::vector<Param*> model_params(TargetModel& m) {
    std::vector<Param*> out = m.backbone_params();
    out.push_back(&m.confidence.fc.weight);
    out.push_back(&m.confidence.fc.bias);
    m.classifier.fc.collect(out);
    m.va.fc.collect(out);
    return out;
}

inline nlohmann::json params_json(const std::vector<Param*>& params) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto* p : params) j[p->name] = matrix_json(p->value);
    return j;
}

inline void load_params(const nlohmann::json& j, const std::vector<Param*>& params) {
    for (auto* p : params) {
        if (!j.contains(p->name)) throw Error("checkpoint lacks parameter '" + p->name + "'");
        Matrix v = matrix_from_json(j.at(p->name));
        if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
            throw Error("checkpoint parameter '" + p->name + "' has the wrong shape");
        p->value = std::move(v);
        p->reset_state();
    }
}

}  // namespace detail

inline nlohmann::json checkpoint_json(const Checkpoint& c) {
    Checkpoint copy = c;
    nlohmann::json j{{"format", kCheckpointFormat},
                     {"config", c.config},
                     {"config_hash", config_hash(c.config)},
                     {"taxonomy", c.taxonomy.names()},
                     {"input_dim", c.input_dim},
                     {"image_mode", c.image_mode},
                     {"au_count", c.au_count},
                     {"counters", {{"epoch", c.epoch}, {"batch", c.batch_counter}}},
                     {"params", detail::params_json(detail::model_params(copy.model))}};
    if (copy.au_stack && copy.adjacency) {
        std::vector<Param*> au;
        copy.au_stack->collect(au);
        j["au"] = {{"params", detail::params_json(au)},
                   {"adjacency", {{"A", detail::matrix_json(c.adjacency->A)}, {"A_norm", detail::matrix_json(c.adjacency->A_norm)}}}};
    } else {
        j["au"] = nullptr;
    }
    if (c.memory) {
        std::vector<bool> init(c.memory->initialized.begin(), c.memory->initialized.end());
        j["memory"] = {{"tau", c.memory->tau}, {"h", c.memory->h}, {"initialized", init}, {"T", detail::matrix_json(c.memory->T)}};
    } else {
        j["memory"] = nullptr;
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", std::string()) != kCheckpointFormat) throw Error("not an mtac-checkpoint-v1 file");
        Checkpoint c;
        c.config = j.at("config").get<TrainConfig>();
        c.taxonomy = EmotionTaxonomy(j.at("taxonomy").get<std::vector<std::string>>());
        c.input_dim = j.at("input_dim").get<int>();
        c.image_mode = j.at("image_mode").get<bool>();
        c.au_count = j.at("au_count").get<int>();
        c.epoch = j.at("counters").at("epoch").get<int>();
        c.batch_counter = j.at("counters").at("batch").get<std::uint64_t>();

        Rng rng(c.config.seed);
        const BackboneConfig bcfg{c.image_mode, c.input_dim, c.config.hidden_dim, c.config.feature_dim};
        c.model = TargetModel(bcfg, c.taxonomy.size(), c.config.confidence_bias, rng);
        detail::load_params(j.at("params"), detail::model_params(c.model));

        if (j.contains("au") && !j.at("au").is_null()) {
            c.au_stack.emplace(c.config.feature_dim, c.au_count, c.config.gcn_width, rng);
            std::vector<Param*> au;
            c.au_stack->collect(au);
            detail::load_params(j.at("au").at("params"), au);
            c.adjacency = AUAdjacency{detail::matrix_from_json(j.at("au").at("adjacency").at("A")),
                                      detail::matrix_from_json(j.at("au").at("adjacency").at("A_norm"))};
        }
        if (j.contains("memory") && !j.at("memory").is_null()) {
            const auto& mj = j.at("memory");
            MemoryTemplate t(c.au_count, c.taxonomy.size(), mj.at("tau").get<double>());
            t.h = mj.at("h").get<std::uint64_t>();
            auto init = mj.at("initialized").get<std::vector<bool>>();
            t.T = detail::matrix_from_json(mj.at("T"));
            if (static_cast<int>(init.size()) != t.num_classes() || t.T.rows() != c.au_count || t.T.cols() != t.num_classes())
                throw Error("checkpoint memory template has the wrong shape");
            t.initialized = init;
            c.memory = std::move(t);
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out << checkpoint_json(c).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed checkpoint: ") + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace mtac
