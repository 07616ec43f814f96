#pragma once

// Run directories: one training invocation's inputs, outputs and provenance,
// plus the cross-run comparison table.

#include "mtac/checkpoint.hpp"
#include "mtac/synth.hpp"
#include "mtac/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace mtac {

namespace rundir {
inline constexpr const char* kRun = "run.json";
inline constexpr const char* kManifest = "manifest.tsv";
inline constexpr const char* kFlipMask = "flipmask.tsv";
inline constexpr const char* kCheckpoint = "checkpoint.json";
inline constexpr const char* kMetrics = "metrics.jsonl";
inline constexpr const char* kAudit = "audit.jsonl";
inline constexpr const char* kAdjacency = "au-adjacency.txt";
inline constexpr const char* kNanSnapshot = "nan-snapshot.json";
}  // namespace rundir

struct RunSpec {
    TrainConfig config;          // config.noise is the flip ratio
    std::uint64_t noise_seed = 0;
    std::string source;          // where the clean manifest came from, for the record
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Injects noise, trains and writes every artifact into `dir`.  On a
/// non-finite loss the snapshot is written before the abort propagates.
inline TrainResult execute_run(const RunSpec& spec, const DatasetManifest& clean, const std::filesystem::path& dir) {
    spec.config.validate();
    std::filesystem::create_directories(dir);
    auto [noisy, mask] = inject_label_noise(clean, spec.config.noise, spec.noise_seed);

    std::ostringstream manifest_text;
    write_manifest(manifest_text, clean);
    std::vector<std::string> classes;
    for (int c = 0; c < clean.num_classes(); ++c) classes.emplace_back(clean.taxonomy.name(c));
    const nlohmann::json run{{"schema", "mtac-run-v1"},
                             {"seed", spec.config.seed},
                             {"config_hash", config_hash(spec.config)},
                             {"branches", spec.config.branches()},
                             {"noise", spec.config.noise},
                             {"noise_seed", spec.noise_seed},
                             {"source", spec.source},
                             {"source_hash", hex64(fnv1a(manifest_text.str()))},
                             {"classes", classes},
                             {"config", spec.config}};
    write_json(dir / rundir::kRun, run);
    write_manifest(dir / rundir::kManifest, noisy);
    write_flip_mask(dir / rundir::kFlipMask, mask);

    Trainer trainer(spec.config, noisy);
    if (trainer.adjacency()) {
        std::ofstream adj(dir / rundir::kAdjacency);
        adj << "# seed=" << spec.config.seed << " config_hash=" << config_hash(spec.config)
            << " edges=" << to_string(spec.config.edges) << '\n';
        write_adjacency(adj, *trainer.adjacency());
    }
    try {
        auto ckpt = trainer.run();
        save_checkpoint(dir / rundir::kCheckpoint, ckpt);
        write_metrics(dir / rundir::kMetrics, trainer.report());
        write_audit(dir / rundir::kAudit, trainer.audit());
        return {std::move(ckpt), trainer.report(), trainer.audit()};
    } catch (const TrainingAborted& e) {
        write_json(dir / rundir::kNanSnapshot, e.snapshot());
        write_metrics(dir / rundir::kMetrics, trainer.report());
        throw;
    }
}

// ---- comparison report ---------------------------------------------------------

struct RunSummary {
    std::filesystem::path dir;
    std::string strategy;
    std::uint64_t seed = 0;
    std::vector<std::string> classes;
    double accuracy = 0;
    std::optional<double> ccc_valence, ccc_arousal, au_f1, relabel_precision;
    double relabel_recall = 0;
};

inline std::string strategy_name(const TrainConfig& c) {
    std::ostringstream os;
    os << c.branches();
    if (c.au_enabled) os << '/' << to_string(c.edges);
    os << "/noise=" << std::fixed << std::setprecision(2) << c.noise;
    return os.str();
}

inline RunSummary load_run_summary(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / rundir::kRun)) throw Error("run directory " + dir.string() + " has no run.json");
    if (!std::filesystem::exists(dir / rundir::kMetrics))
        throw Error("run directory " + dir.string() + " has no metrics.jsonl");
    const auto run = nlohmann::json::parse(read_file(dir / rundir::kRun));
    RunSummary s;
    s.dir = dir;
    s.strategy = strategy_name(run.at("config").get<TrainConfig>());
    s.seed = run.at("seed").get<std::uint64_t>();
    s.classes = run.at("classes").get<std::vector<std::string>>();

    std::istringstream lines(read_file(dir / rundir::kMetrics));
    std::string line, last;
    while (std::getline(lines, line))
        if (!detail::trim(line).empty()) last = line;
    if (last.empty()) throw Error("run directory " + dir.string() + " has empty metrics.jsonl");
    const auto m = nlohmann::json::parse(last);
    const auto& test = m.at("test");
    if (test.is_null()) throw Error("run directory " + dir.string() + " has no test evaluation in its metrics");
    s.accuracy = test.at("accuracy").get<double>();
    if (!test.at("va_ccc").is_null()) {
        s.ccc_valence = test["va_ccc"][0].get<double>();
        s.ccc_arousal = test["va_ccc"][1].get<double>();
    }
    const auto f1 = m.at("au_f1").get<std::vector<double>>();
    if (!f1.empty()) s.au_f1 = std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(f1.size());
    if (!m.at("relabel_precision").is_null()) s.relabel_precision = m["relabel_precision"].get<double>();
    s.relabel_recall = m.at("relabel_recall").get<double>();
    return s;
}

inline double median_of(std::vector<double> v) {
    require(!v.empty(), "median of an empty set");
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::optional<double> median_of(const std::vector<std::optional<double>>& v) {
    std::vector<double> present;
    for (const auto& x : v)
        if (x) present.push_back(*x);
    if (present.empty()) return std::nullopt;
    return median_of(present);
}

struct ReportRow {
    std::string strategy;
    std::size_t runs = 0;
    double accuracy = 0;
    std::optional<double> ccc_valence, ccc_arousal, au_f1, relabel_precision;
    double relabel_recall = 0;
};

/// Seed medians per strategy, in order of first appearance.
inline std::vector<ReportRow> aggregate(const std::vector<RunSummary>& runs) {
    require(!runs.empty(), "report needs at least one run directory");
    for (const auto& r : runs)
        if (r.classes != runs.front().classes)
            throw Error("taxonomy of " + r.dir.string() + " differs from " + runs.front().dir.string());
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunSummary*>> groups;
    for (const auto& r : runs) {
        if (!groups.count(r.strategy)) order.push_back(r.strategy);
        groups[r.strategy].push_back(&r);
    }
    std::vector<ReportRow> rows;
    for (const auto& name : order) {
        const auto& g = groups[name];
        std::vector<double> acc, recall;
        std::vector<std::optional<double>> v, a, f1, prec;
        for (const auto* r : g) {
            acc.push_back(r->accuracy);
            recall.push_back(r->relabel_recall);
            v.push_back(r->ccc_valence);
            a.push_back(r->ccc_arousal);
            f1.push_back(r->au_f1);
            prec.push_back(r->relabel_precision);
        }
        rows.push_back({name, g.size(), median_of(acc), median_of(v), median_of(a), median_of(f1), median_of(prec),
                        median_of(recall)});
    }
    return rows;
}

namespace detail {
inline std::string cell(const std::optional<double>& v) {
    if (!v) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}
}  // namespace detail

inline void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
    out << "strategy,runs,accuracy,ccc_valence,ccc_arousal,au_f1,relabel_precision,relabel_recall\n";
    auto csv = [](const std::optional<double>& v) { return v ? detail::cell(v) : std::string(); };
    for (const auto& r : rows)
        out << r.strategy << ',' << r.runs << ',' << csv(r.accuracy) << ',' << csv(r.ccc_valence) << ','
            << csv(r.ccc_arousal) << ',' << csv(r.au_f1) << ',' << csv(r.relabel_precision) << ','
            << csv(r.relabel_recall) << '\n';
}

inline void write_report_text(std::ostream& out, const std::vector<ReportRow>& rows) {
    const std::vector<std::string> head{"strategy", "runs", "acc", "ccc_v", "ccc_a", "au_f1", "rl_prec", "rl_recall"};
    std::vector<std::vector<std::string>> table{head};
    for (const auto& r : rows)
        table.push_back({r.strategy, std::to_string(r.runs), detail::cell(r.accuracy), detail::cell(r.ccc_valence),
                         detail::cell(r.ccc_arousal), detail::cell(r.au_f1), detail::cell(r.relabel_precision),
                         detail::cell(r.relabel_recall)});
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& row : table)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    for (const auto& row : table) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out << "  ";
            if (c == 0)
                out << std::left << std::setw(static_cast<int>(width[c])) << row[c];
            else
                out << std::right << std::setw(static_cast<int>(width[c])) << row[c];
        }
        out << '\n';
    }
}

}  // namespace mtac
