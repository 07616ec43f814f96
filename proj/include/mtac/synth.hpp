#pragma once

// Synthetic corpus with known ground truth: Gaussian class clusters, class
// VA anchors and AU activation profiles, plus controlled label flipping.

#include "mtac/core.hpp"
#include "mtac/nn.hpp"

#include <json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <unordered_map>

namespace mtac {

struct GeneratorConfig {
    int num_classes = 7;   // C
    int au_count = 8;      // M
    int feature_dim = 32;  // D
    double cluster_separation = 4.0;  // distance between any two class means
    double feature_noise = 1.0;       // per-coordinate standard deviation
    double va_noise = 0.15;           // half-width of uniform VA jitter
    double au_flip = 0.0;             // probability of flipping each AU bit after sampling
    std::vector<std::array<double, 2>> va_anchors;  // empty: circumplex default
    std::vector<std::vector<double>> au_profiles;   // C x M; empty: overlapping default
    std::vector<std::int64_t> train_per_class;      // empty: 700 each
    std::vector<std::int64_t> test_per_class;       // empty: 100 each
    std::uint64_t seed = 1;

    void validate() const {
        if (num_classes < 2) throw ConfigError("need at least 2 classes");
        if (au_count < 0 || feature_dim < 1) throw ConfigError("bad dimensions");
        if (!(cluster_separation >= 0)) throw ConfigError("cluster_separation must be >= 0");
        if (!(feature_noise >= 0) || !(va_noise >= 0)) throw ConfigError("noise scales must be >= 0");
        if (!(au_flip >= 0 && au_flip <= 1)) throw ConfigError("au_flip must lie in [0, 1]");
        if (!va_anchors.empty()) {
            if (static_cast<int>(va_anchors.size()) != num_classes) throw ConfigError("one VA anchor per class");
            for (const auto& a : va_anchors)
                if (std::abs(a[0]) > 1 || std::abs(a[1]) > 1) throw ConfigError("VA anchors must lie in [-1,1]^2");
        }
        if (!au_profiles.empty()) {
            if (static_cast<int>(au_profiles.size()) != num_classes) throw ConfigError("one AU profile per class");
            for (const auto& row : au_profiles) {
                if (static_cast<int>(row.size()) != au_count) throw ConfigError("AU profile rows need M entries");
                for (double p : row)
                    if (!(p >= 0 && p <= 1)) throw ConfigError("AU probabilities must lie in [0, 1]");
            }
        }
        for (const auto* v : {&train_per_class, &test_per_class}) {
            if (!v->empty() && static_cast<int>(v->size()) != num_classes) throw ConfigError("per-class counts need C entries");
            for (auto n : *v)
                if (n < 0) throw ConfigError("per-class counts must be >= 0");
        }
    }

    /// Classes evenly spaced on a circle of radius 0.8 in the VA plane.
    std::vector<std::array<double, 2>> anchors() const {
        if (!va_anchors.empty()) return va_anchors;
        std::vector<std::array<double, 2>> out;
        for (int c = 0; c < num_classes; ++c) {
            const double angle = 2.0 * std::numbers::pi * c / num_classes;
            out.push_back({0.8 * std::cos(angle), 0.8 * std::sin(angle)});
        }
        return out;
    }

    /// Class c strongly activates AUs c mod M and (c+1) mod M (p = 0.9), so
    /// neighbouring classes share one AU; every other AU fires with p = 0.05.
    std::vector<std::vector<double>> profiles() const {
        if (!au_profiles.empty()) return au_profiles;
        std::vector<std::vector<double>> out(static_cast<std::size_t>(num_classes),
                                             std::vector<double>(static_cast<std::size_t>(au_count), 0.05));
        if (au_count == 0) return out;
        for (int c = 0; c < num_classes; ++c) {
            out[static_cast<std::size_t>(c)][static_cast<std::size_t>(c % au_count)] = 0.9;
            out[static_cast<std::size_t>(c)][static_cast<std::size_t>((c + 1) % au_count)] = 0.9;
        }
        return out;
    }

    std::vector<std::int64_t> train_counts() const {
        return train_per_class.empty() ? std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 700) : train_per_class;
    }
    std::vector<std::int64_t> test_counts() const {
        return test_per_class.empty() ? std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 100) : test_per_class;
    }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = nlohmann::json{{"num_classes", c.num_classes},     {"au_count", c.au_count},
                       {"feature_dim", c.feature_dim},     {"cluster_separation", c.cluster_separation},
                       {"feature_noise", c.feature_noise}, {"va_noise", c.va_noise},
                       {"au_flip", c.au_flip},             {"va_anchors", c.va_anchors},
                       {"au_profiles", c.au_profiles},     {"train_per_class", c.train_per_class},
                       {"test_per_class", c.test_per_class}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    static const std::set<std::string> known = {"num_classes", "au_count", "feature_dim", "cluster_separation",
                                                "feature_noise", "va_noise", "au_flip", "va_anchors", "au_profiles",
                                                "train_per_class", "test_per_class", "seed"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("unknown generator config key '" + key + "'");
    GeneratorConfig d;
    c.num_classes = j.value("num_classes", d.num_classes);
    c.au_count = j.value("au_count", d.au_count);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.cluster_separation = j.value("cluster_separation", d.cluster_separation);
    c.feature_noise = j.value("feature_noise", d.feature_noise);
    c.va_noise = j.value("va_noise", d.va_noise);
    c.au_flip = j.value("au_flip", d.au_flip);
    c.va_anchors = j.value("va_anchors", d.va_anchors);
    c.au_profiles = j.value("au_profiles", d.au_profiles);
    c.train_per_class = j.value("train_per_class", d.train_per_class);
    c.test_per_class = j.value("test_per_class", d.test_per_class);
    c.seed = j.value("seed", d.seed);
}

/// Class means: scaled simplex vertices (pairwise distance = separation)
/// rotated by a seeded random orthogonal matrix.
inline Matrix class_means(const GeneratorConfig& cfg, Rng& rng) {
    const int c = cfg.num_classes, d = cfg.feature_dim;
    Matrix means = Matrix::Zero(c, d);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix g(d, d);
    for (int j = 0; j < d; ++j)
        for (int i = 0; i < d; ++i) g(i, j) = gauss(rng);
    Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();
    const double scale = cfg.cluster_separation / std::sqrt(2.0);
    for (int k = 0; k < c; ++k) {
        // vertex k of the simplex lives on axis k; wrap when C > D
        means.row(k) = scale * q.col(k % d).transpose();
        if (k >= d) means.row(k) *= -1.0;
    }
    return means;
}

/// Draws a corpus with train and test splits.  `train_per_class` overrides
/// the config's train counts when non-empty.
inline DatasetManifest generate(const GeneratorConfig& cfg, std::vector<std::int64_t> train_per_class = {}) {
    cfg.validate();
    if (train_per_class.empty()) train_per_class = cfg.train_counts();
    if (static_cast<int>(train_per_class.size()) != cfg.num_classes) throw ConfigError("per-class counts need C entries");
    const auto test_per_class = cfg.test_counts();
    std::int64_t total = 0;
    for (auto n : train_per_class) total += n;
    if (total <= 0) throw ConfigError("generator asked for zero training samples");

    Rng rng(cfg.seed);
    const Matrix means = class_means(cfg, rng);
    const auto anchors = cfg.anchors();
    const auto profiles = cfg.profiles();
    std::normal_distribution<double> gauss(0.0, cfg.feature_noise);
    std::uniform_real_distribution<double> jitter(-cfg.va_noise, cfg.va_noise);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    DatasetManifest m;
    m.taxonomy = EmotionTaxonomy::with_size(cfg.num_classes);
    m.au_count = cfg.au_count;
    m.feature_dim = cfg.feature_dim;

    auto draw = [&](Split split, int cls, std::int64_t serial) {
        Sample s;
        char id[32];
        std::snprintf(id, sizeof(id), "%s%06lld", split == Split::train ? "tr" : "te", static_cast<long long>(serial));
        s.id = id;
        s.split = split;
        s.emotion = cls;
        s.features.resize(cfg.feature_dim);
        for (int k = 0; k < cfg.feature_dim; ++k) s.features(k) = means(cls, k) + (cfg.feature_noise > 0 ? gauss(rng) : 0.0);
        const auto& a = anchors[static_cast<std::size_t>(cls)];
        s.valence = std::clamp(a[0] + (cfg.va_noise > 0 ? jitter(rng) : 0.0), -1.0, 1.0);
        s.arousal = std::clamp(a[1] + (cfg.va_noise > 0 ? jitter(rng) : 0.0), -1.0, 1.0);
        s.au.resize(static_cast<std::size_t>(cfg.au_count));
        for (int au = 0; au < cfg.au_count; ++au) {
            bool on = unit(rng) < profiles[static_cast<std::size_t>(cls)][static_cast<std::size_t>(au)];
            if (cfg.au_flip > 0 && unit(rng) < cfg.au_flip) on = !on;
            s.au[static_cast<std::size_t>(au)] = on ? 1 : 0;
        }
        return s;
    };

    // Interleave classes so that record order carries no class blocks.
    auto emit = [&](Split split, const std::vector<std::int64_t>& counts) {
        std::vector<int> order;
        for (int c = 0; c < cfg.num_classes; ++c)
            order.insert(order.end(), static_cast<std::size_t>(counts[static_cast<std::size_t>(c)]), c);
        std::shuffle(order.begin(), order.end(), rng);
        std::int64_t serial = 0;
        for (int cls : order) m.records.push_back(draw(split, cls, serial++));
    };
    emit(Split::train, train_per_class);
    emit(Split::test, test_per_class);
    return m;
}

struct FlipEntry {
    std::string id;
    int original = 0;
    int corrupted = 0;
    bool flipped() const { return original != corrupted; }
};

/// Ground truth of a noise injection: one entry per train record.
struct FlipMask {
    std::vector<FlipEntry> entries;

    std::size_t flipped_count() const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.flipped(); }));
    }
    std::unordered_map<std::string, const FlipEntry*> by_id() const {
        std::unordered_map<std::string, const FlipEntry*> out;
        for (const auto& e : entries) out.emplace(e.id, &e);
        return out;
    }
};

/// Flips exactly floor(ratio N) train labels, chosen uniformly, each to a
/// uniformly drawn different class.  VA and AU labels are left untouched.
inline std::pair<DatasetManifest, FlipMask> inject_label_noise(DatasetManifest manifest, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0) || ratio >= 1.0) throw ConfigError("noise ratio must lie in [0, 1)");
    auto train = manifest.indices(Split::train);
    const auto n_flip = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(train.size()) + 1e-9));
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> chosen = train;
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(n_flip);
    std::sort(chosen.begin(), chosen.end());

    const int c = manifest.num_classes();
    std::uniform_int_distribution<int> other(1, c - 1);
    for (auto idx : chosen) {
        auto& s = manifest.records[idx];
        s.flip_truth = s.emotion;
        s.emotion = (s.emotion + other(rng)) % c;
        s.provenance = LabelProvenance::injected_flip;
    }
    FlipMask mask;
    for (auto idx : train) {
        const auto& s = manifest.records[idx];
        mask.entries.push_back({s.id, s.flip_truth.value_or(s.emotion), s.emotion});
    }
    return {std::move(manifest), std::move(mask)};
}

inline constexpr std::string_view kFlipMaskSchema = "mtac-flipmask-v1";

inline void write_flip_mask(std::ostream& out, const FlipMask& mask) {
    out << "#schema=" << kFlipMaskSchema << '\n';
    for (const auto& e : mask.entries) out << e.id << '\t' << e.original << '\t' << e.corrupted << '\n';
}

inline void write_flip_mask(const std::filesystem::path& path, const FlipMask& mask) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_flip_mask(out, mask);
}

inline FlipMask read_flip_mask(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open flip mask " + path.string());
    FlipMask mask;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (lineno == 1 && line != "#schema=" + std::string(kFlipMaskSchema)) throw SchemaError("not a flip mask", lineno);
            continue;
        }
        auto f = detail::split_on(line, '\t');
        if (f.size() != 3) throw ParseError("flip mask lines need id, original, corrupted", lineno);
        auto o = detail::parse_int(f[1]), k = detail::parse_int(f[2]);
        if (!o || !k) throw ParseError("flip mask classes must be integers", lineno);
        mask.entries.push_back({std::string(f[0]), static_cast<int>(*o), static_cast<int>(*k)});
    }
    return mask;
}

}  // namespace mtac
