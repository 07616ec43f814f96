#pragma once

#include "mtac/common.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mtac {

/// Ordered list of discrete emotion categories.  Class indices are positions
/// in `names` and never change during a run.
class EmotionTaxonomy {
public:
    EmotionTaxonomy() = default;
    explicit EmotionTaxonomy(std::vector<std::string> names) : names_(std::move(names)) {
        if (names_.size() < 2) throw ConfigError("taxonomy needs at least 2 classes");
        std::set<std::string> seen(names_.begin(), names_.end());
        if (seen.size() != names_.size()) throw ConfigError("taxonomy class names must be unique");
        for (const auto& n : names_)
            if (n.empty() || n.find_first_of(",\t \n") != std::string::npos)
                throw ConfigError("invalid class name '" + n + "'");
    }

    /// The seven basic categories for C = 7, otherwise class0..class{C-1}.
    static EmotionTaxonomy with_size(int num_classes) {
        if (num_classes == 7)
            return EmotionTaxonomy({"anger", "disgust", "fear", "happiness", "neutral", "sadness", "surprise"});
        if (num_classes < 2) throw ConfigError("taxonomy needs at least 2 classes");
        std::vector<std::string> names;
        for (int i = 0; i < num_classes; ++i) names.push_back("class" + std::to_string(i));
        return EmotionTaxonomy(std::move(names));
    }

    int size() const noexcept { return static_cast<int>(names_.size()); }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::string& name(int index) const { return names_.at(static_cast<std::size_t>(index)); }
    bool operator==(const EmotionTaxonomy&) const = default;

private:
    std::vector<std::string> names_;
};

enum class Split { train, test };
enum class LabelProvenance { original, injected_flip, relabeled };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct Sample {
    std::string id;
    Split split = Split::train;
    Vector features;          // length D (feature mode) or 32*32 pixels (image mode)
    std::string image_path;   // image mode only, as written in the manifest
    int emotion = 0;
    double valence = std::nan("");
    double arousal = std::nan("");
    std::vector<std::uint8_t> au;  // length M; empty when AU labels are absent
    LabelProvenance provenance = LabelProvenance::original;
    std::optional<int> flip_truth;

    bool has_va() const { return !std::isnan(valence) && !std::isnan(arousal); }
    bool has_au() const { return !au.empty(); }
};

struct Batch {
    std::vector<std::size_t> indices;  // positions in DatasetManifest::records
    std::size_t epoch_index = 0;       // beta
    std::uint64_t batch_index = 0;     // h, global and 1-based
    std::size_t size() const { return indices.size(); }
};

inline constexpr std::string_view kManifestSchema = "mtac-manifest-v1";
inline constexpr int kImageSide = 32;

struct DatasetManifest {
    EmotionTaxonomy taxonomy;
    int au_count = 0;       // M
    int feature_dim = 0;    // D as written in the header
    bool image_mode = false;
    std::vector<Sample> records;

    int num_classes() const { return taxonomy.size(); }
    /// Input width fed to the backbone: D, or 32*32 in image mode.
    int input_dim() const { return image_mode ? kImageSide * kImageSide : feature_dim; }

    std::vector<std::size_t> indices(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].split == split) out.push_back(i);
        return out;
    }
    std::size_t count(Split split) const { return indices(split).size(); }

    /// VA labels present on every train record.
    bool va_available() const { return branch_available([](const Sample& s) { return s.has_va(); }); }
    /// AU labels present on every train record.
    bool au_available() const { return branch_available([](const Sample& s) { return s.has_au(); }); }

    std::vector<std::int64_t> class_counts(Split split) const {
        std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes()), 0);
        for (const auto& s : records)
            if (s.split == split) ++counts[static_cast<std::size_t>(s.emotion)];
        return counts;
    }
    std::vector<std::int64_t> au_counts(Split split) const {
        std::vector<std::int64_t> counts(static_cast<std::size_t>(au_count), 0);
        for (const auto& s : records)
            if (s.split == split && s.has_au())
                for (int m = 0; m < au_count; ++m) counts[static_cast<std::size_t>(m)] += s.au[static_cast<std::size_t>(m)];
        return counts;
    }

    /// Keeps only `split` records (order preserved).
    DatasetManifest subset(Split split) const {
        DatasetManifest out = *this;
        out.records.clear();
        for (const auto& s : records)
            if (s.split == split) out.records.push_back(s);
        return out;
    }

private:
    template <typename Pred>
    bool branch_available(Pred has) const {
        bool any = false;
        for (const auto& s : records) {
            if (s.split != Split::train) continue;
            if (!has(s)) return false;
            any = true;
        }
        return any;
    }
};

namespace detail {

inline std::vector<std::string_view> split_on(std::string_view text, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = text.find(sep, start);
        out.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::vector<std::string_view> split_ws(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) out.push_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::optional<double> parse_double(std::string_view s) {
    if (s == "nan" || s == "NaN") return std::nan("");
    double v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace detail

/// Reads a 32x32 8-bit PGM (P5 or P2) into a length-1024 vector in [0, 1].
inline Vector read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image " + path.string());
    std::string magic;
    in >> magic;
    auto next_int = [&]() {
        int v = 0;
        while (in >> std::ws && in.peek() == '#') {
            std::string skip;
            std::getline(in, skip);
        }
        if (!(in >> v)) throw Error("bad PGM header in " + path.string());
        return v;
    };
    if (magic != "P5" && magic != "P2") throw Error("unsupported image format in " + path.string());
    const int w = next_int(), h = next_int(), maxval = next_int();
    if (w != kImageSide || h != kImageSide) throw Error("image " + path.string() + " is not 32x32");
    if (maxval <= 0 || maxval > 255) throw Error("unsupported PGM maxval in " + path.string());
    Vector px(w * h);
    if (magic == "P5") {
        in.get();
        std::vector<unsigned char> raw(static_cast<std::size_t>(w * h));
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
            throw Error("truncated image " + path.string());
        for (int i = 0; i < w * h; ++i) px(i) = raw[static_cast<std::size_t>(i)] / static_cast<double>(maxval);
    } else {
        for (int i = 0; i < w * h; ++i) px(i) = next_int() / static_cast<double>(maxval);
    }
    return px;
}

inline void write_pgm(const std::filesystem::path& path, const Vector& pixels) {
    if (pixels.size() != kImageSide * kImageSide) throw Error("image must have 1024 pixels");
    std::ofstream out(path, std::ios::binary);
    out << "P5\n" << kImageSide << ' ' << kImageSide << "\n255\n";
    for (int i = 0; i < pixels.size(); ++i) {
        const double v = std::clamp(pixels(i), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

/// Parses mtac-manifest-v1 text.  `base_dir` resolves relative image paths.
inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
    using namespace detail;
    DatasetManifest m;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    std::optional<int> C, M, D;
    std::vector<std::string> class_names;

    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        if (!have_header) {
            auto tokens = split_ws(line);
            if (tokens.empty() || tokens[0] != std::string("#schema=") + std::string(kManifestSchema))
                throw SchemaError("missing '#schema=mtac-manifest-v1' header", lineno);
            for (std::size_t t = 1; t < tokens.size(); ++t) {
                auto eq = tokens[t].find('=');
                if (eq == std::string_view::npos) throw SchemaError("bad header token '" + std::string(tokens[t]) + "'", lineno);
                auto key = tokens[t].substr(0, eq);
                auto val = tokens[t].substr(eq + 1);
                if (key == "C" || key == "M" || key == "D") {
                    auto v = parse_int(val);
                    if (!v || *v < 0) throw SchemaError("bad header value for " + std::string(key), lineno);
                    (key == "C" ? C : key == "M" ? M : D) = static_cast<int>(*v);
                } else if (key == "classes") {
                    for (auto n : split_on(val, ',')) class_names.emplace_back(n);
                } else if (key == "mode") {
                    if (val == "image") m.image_mode = true;
                    else if (val != "features") throw SchemaError("unknown mode '" + std::string(val) + "'", lineno);
                }
            }
            if (!C || !M || !D) throw SchemaError("header must declare C, M and D", lineno);
            if (*C < 2) throw ValidationError("C must be at least 2", lineno);
            try {
                m.taxonomy = class_names.empty() ? EmotionTaxonomy::with_size(*C) : EmotionTaxonomy(class_names);
            } catch (const ConfigError& e) {
                throw ValidationError(e.what(), lineno);
            }
            if (m.taxonomy.size() != *C) throw ValidationError("classes= list does not match C", lineno);
            m.au_count = *M;
            m.feature_dim = *D;
            if (m.image_mode && *D != kImageSide * kImageSide)
                throw ValidationError("image mode requires D=1024", lineno);
            have_header = true;
            continue;
        }
        if (line[0] == '#') continue;

        auto fields = split_on(line, '\t');
        static constexpr const char* kColumns[] = {"id", "split", "emotion", "valence", "arousal", "au", "features"};
        if (fields.size() < 7)
            throw SchemaError("missing required column '" + std::string(kColumns[fields.size()]) + "'", lineno);
        if (fields.size() > 7) throw ParseError("too many tab-separated fields", lineno);

        Sample s;
        s.id = std::string(fields[0]);
        if (s.id.empty()) throw ParseError("empty id", lineno);
        if (fields[1] == "train") s.split = Split::train;
        else if (fields[1] == "test") s.split = Split::test;
        else throw ValidationError("split must be 'train' or 'test'", lineno);

        auto emo = parse_int(fields[2]);
        if (!emo) throw ParseError("emotion index is not an integer", lineno);
        if (*emo < 0 || *emo >= m.num_classes())
            throw ValidationError("emotion index " + std::to_string(*emo) + " outside [0, " +
                                      std::to_string(m.num_classes()) + ")",
                                  lineno);
        s.emotion = static_cast<int>(*emo);

        auto val = parse_double(fields[3]);
        auto aro = parse_double(fields[4]);
        if (!val || !aro) throw ParseError("valence/arousal are not numbers", lineno);
        if (std::isnan(*val) != std::isnan(*aro)) throw ValidationError("valence and arousal must both be present or both nan", lineno);
        if (!std::isnan(*val) && (std::abs(*val) > 1.0 || std::abs(*aro) > 1.0))
            throw ValidationError("valence/arousal outside [-1, 1]", lineno);
        s.valence = *val;
        s.arousal = *aro;

        auto bits = fields[5];
        if (static_cast<int>(bits.size()) != m.au_count)
            throw ValidationError("AU field must have " + std::to_string(m.au_count) + " characters", lineno);
        const bool absent = std::all_of(bits.begin(), bits.end(), [](char c) { return c == '-'; });
        if (!absent || m.au_count == 0) {
            for (char c : bits) {
                if (c != '0' && c != '1') throw ValidationError("AU bits must be '0'/'1' (or all '-')", lineno);
                s.au.push_back(static_cast<std::uint8_t>(c - '0'));
            }
        }

        if (m.image_mode) {
            auto path = std::string(trim(fields[6]));
            if (path.empty()) throw SchemaError("missing image path", lineno);
            s.image_path = path;
            std::filesystem::path p(path);
            s.features = read_pgm(p.is_absolute() ? p : base_dir / p);
        } else {
            auto tokens = split_ws(fields[6]);
            if (static_cast<int>(tokens.size()) != m.feature_dim)
                throw ValidationError("expected " + std::to_string(m.feature_dim) + " feature values, got " +
                                          std::to_string(tokens.size()),
                                      lineno);
            s.features.resize(m.feature_dim);
            for (int k = 0; k < m.feature_dim; ++k) {
                auto v = parse_double(tokens[static_cast<std::size_t>(k)]);
                if (!v) throw ParseError("feature value is not a number", lineno);
                if (!std::isfinite(*v)) throw ValidationError("feature values must be finite", lineno);
                s.features(k) = *v;
            }
        }
        m.records.push_back(std::move(s));
    }
    if (!have_header) throw SchemaError("empty manifest (no header)", lineno);

    std::set<std::string> ids;
    for (const auto& s : m.records)
        if (!ids.insert(s.id).second) throw ValidationError("duplicate id '" + s.id + "'", 0);
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest " + path.string());
    return parse_manifest(in, path.parent_path());
}

inline void write_manifest(std::ostream& out, const DatasetManifest& m) {
    out << "#schema=" << kManifestSchema << " C=" << m.num_classes() << " M=" << m.au_count
        << " D=" << m.feature_dim << " classes=";
    for (int c = 0; c < m.num_classes(); ++c) out << (c ? "," : "") << m.taxonomy.name(c);
    if (m.image_mode) out << " mode=image";
    out << '\n';
    for (const auto& s : m.records) {
        out << s.id << '\t' << to_string(s.split) << '\t' << s.emotion << '\t' << format_double(s.valence) << '\t'
            << format_double(s.arousal) << '\t';
        if (s.has_au())
            for (auto b : s.au) out << static_cast<char>('0' + b);
        else
            out << std::string(static_cast<std::size_t>(m.au_count), '-');
        out << '\t';
        if (m.image_mode) {
            out << s.image_path;
        } else {
            for (int k = 0; k < s.features.size(); ++k) out << (k ? " " : "") << format_double(s.features(k));
        }
        out << '\n';
    }
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write manifest " + path.string());
    write_manifest(out, m);
}

/// One-line per-class / per-AU count summary of the train split.
inline std::string describe(const DatasetManifest& m) {
    std::ostringstream os;
    os << m.count(Split::train) << " train / " << m.count(Split::test) << " test records; classes:";
    auto cc = m.class_counts(Split::train);
    for (int c = 0; c < m.num_classes(); ++c) os << ' ' << m.taxonomy.name(c) << '=' << cc[static_cast<std::size_t>(c)];
    os << "; AUs:";
    auto ac = m.au_counts(Split::train);
    for (int a = 0; a < m.au_count; ++a) os << " AU" << a << '=' << ac[static_cast<std::size_t>(a)];
    os << "; va=" << (m.va_available() ? "yes" : "no") << " au=" << (m.au_available() ? "yes" : "no");
    return os.str();
}

/// Shuffled order of `pool` for one epoch; pure in (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::vector<std::size_t> pool, std::uint64_t seed, std::size_t epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x6d746163u};
    std::mt19937_64 rng(seq);
    std::shuffle(pool.begin(), pool.end(), rng);
    return pool;
}

/// Deterministic epoch-wise partition of the train split into batches.
/// The global batch counter h starts at 1 and increases by one per emitted
/// batch across epochs.
class BatchIterator {
public:
    BatchIterator(const DatasetManifest& manifest, std::size_t batch_size, std::uint64_t seed)
        : pool_(manifest.indices(Split::train)), batch_size_(batch_size), seed_(seed) {
        if (pool_.empty()) throw Error("cannot iterate an empty manifest");
        if (batch_size_ == 0) throw ConfigError("batch size must be positive");
        if (batch_size_ > pool_.size())
            throw ConfigError("batch size " + std::to_string(batch_size_) + " exceeds dataset size " +
                              std::to_string(pool_.size()));
    }

    std::vector<Batch> epoch(std::size_t epoch_index) {
        auto order = epoch_order(pool_, seed_, epoch_index);
        std::vector<Batch> out;
        for (std::size_t start = 0; start < order.size(); start += batch_size_) {
            Batch b;
            b.epoch_index = epoch_index;
            b.batch_index = ++emitted_;
            const auto end = std::min(order.size(), start + batch_size_);
            b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
            out.push_back(std::move(b));
        }
        return out;
    }

    std::uint64_t batches_emitted() const { return emitted_; }
    std::size_t batches_per_epoch() const { return (pool_.size() + batch_size_ - 1) / batch_size_; }

private:
    std::vector<std::size_t> pool_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t emitted_ = 0;
};

}  // namespace mtac
