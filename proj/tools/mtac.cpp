// mtac: synth -> train (with noise injection) -> evaluate -> audit -> report.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include "mtac/mtac.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace mtac;

namespace {

constexpr const char* kOutRootEnv = "MTAC_OUT_ROOT";

struct UsageError : Error {
    using Error::Error;
};

template <class T>
T load_json_config(const std::string& path) {
    if (path.empty()) return T{};
    try {
        return nlohmann::json::parse(read_file(path)).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
    auto cfg = load_json_config<GeneratorConfig>(a.config);
    if (a.seed) cfg.seed = *a.seed;
    const auto manifest = generate(cfg);
    fs::create_directories(a.out);
    write_manifest(fs::path(a.out) / "manifest.tsv", manifest);
    write_json(fs::path(a.out) / "generator.json", nlohmann::json(cfg));
    std::cout << describe(manifest) << '\n';
    return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
    std::string manifest, config, out, branches, edges;
    double noise = 0.0;
    bool any_noise = false;
    std::optional<std::uint64_t> seed, noise_seed;
    std::optional<int> epochs;
};

fs::path resolve_out(const std::string& out, const TrainConfig& c) {
    if (!out.empty()) return out;
    const char* root = std::getenv(kOutRootEnv);
    if (!root || !*root) throw UsageError(std::string("--out is required when ") + kOutRootEnv + " is unset");
    std::string name = strategy_name(c) + "-seed" + std::to_string(c.seed);
    for (auto& ch : name)
        if (ch == '/' || ch == '=') ch = '_';
    return fs::path(root) / name;
}

int run_train(const TrainArgs& a) {
    static const std::vector<double> grid{0.0, 0.1, 0.2, 0.3};
    if (!a.any_noise && std::find(grid.begin(), grid.end(), a.noise) == grid.end())
        throw UsageError("--noise must be one of 0, 0.1, 0.2, 0.3 (pass --any-noise to override)");

    auto cfg = load_json_config<TrainConfig>(a.config);
    try {
        if (!a.branches.empty()) cfg.set_branches(a.branches);
        if (!a.edges.empty()) cfg.edges = parse_edge_mode(a.edges);
        if (a.seed) cfg.seed = *a.seed;
        if (a.epochs) cfg.epochs = *a.epochs;
        cfg.noise = a.noise;
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }

    RunSpec spec{cfg, a.noise_seed.value_or(cfg.seed), a.manifest};
    const auto dir = resolve_out(a.out, cfg);
    const auto result = execute_run(spec, load_manifest(a.manifest), dir);
    const auto& last = result.metrics.last();
    std::cout << dir.string() << ": " << cfg.branches() << " noise=" << cfg.noise << " seed=" << cfg.seed;
    if (last.test) std::cout << " test_accuracy=" << format_double(last.test->accuracy);
    if (last.relabel.precision) std::cout << " relabel_precision=" << format_double(*last.relabel.precision);
    std::cout << '\n';
    return 0;
}

// ---- evaluate / audit --------------------------------------------------------

int run_evaluate(const std::string& run, const std::string& manifest_path, const std::string& split) {
    const auto ckpt = load_checkpoint(fs::path(run) / rundir::kCheckpoint);
    const auto manifest = load_manifest(manifest_path.empty() ? fs::path(run) / rundir::kManifest : fs::path(manifest_path));
    const auto r = evaluate(ckpt, manifest, split == "train" ? Split::train : Split::test);
    auto j = to_json_value(r);
    j["split"] = split;
    j["config_hash"] = config_hash(ckpt.config);
    j["seed"] = ckpt.config.seed;
    std::cout << j.dump() << '\n';
    return 0;
}

int run_audit(const std::string& run) {
    const auto records = read_audit(fs::path(run) / rundir::kAudit);
    const auto mask = read_flip_mask(fs::path(run) / rundir::kFlipMask);
    const auto s = relabel_audit(records, mask);
    nlohmann::json j{{"corrected", s.quality.corrected},
                     {"corrected_to_truth", s.quality.corrected_to_truth},
                     {"flipped", s.quality.flipped},
                     {"recall", s.quality.recall}};
    j["precision"] = s.quality.precision ? nlohmann::json(*s.quality.precision) : nlohmann::json(nullptr);
    j["classifier_baseline_precision"] =
        s.classifier_baseline_precision ? nlohmann::json(*s.classifier_baseline_precision) : nlohmann::json(nullptr);
    nlohmann::json per = nlohmann::json::array();
    for (const auto& [flipped, fixed] : s.per_class) per.push_back({{"flipped", flipped}, {"corrected_to_truth", fixed}});
    j["per_class"] = per;
    std::cout << j.dump() << '\n';
    return 0;
}

// ---- report ------------------------------------------------------------------

int run_report(const std::vector<std::string>& runs, const std::string& out) {
    std::vector<RunSummary> summaries;
    for (const auto& r : runs) summaries.push_back(load_run_summary(r));
    const auto rows = aggregate(summaries);
    write_report_text(std::cout, rows);
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream text(fs::path(out) / "report.txt"), csv(fs::path(out) / "report.csv");
        if (!text || !csv) throw Error("cannot write report into " + out);
        write_report_text(text, rows);
        write_report_csv(csv, rows);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Noisy-label multi-task emotion training on synthetic corpora"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic corpus manifest");
    s->add_option("--config", synth.config, "Generator config JSON")->check(CLI::ExistingFile);
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--seed", synth.seed, "Override the generator seed");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Inject label noise, train, and write a run directory");
    t->add_option("--manifest", train.manifest, "Clean manifest")->required()->check(CLI::ExistingFile);
    t->add_option("--config", train.config, "Training config JSON")->check(CLI::ExistingFile);
    t->add_option("--noise", train.noise, "Fraction of train labels to flip");
    t->add_flag("--any-noise", train.any_noise, "Allow noise ratios outside the standard grid");
    t->add_option("--noise-seed", train.noise_seed, "Seed for noise injection (default: --seed)");
    t->add_option("--branches", train.branches, "Branch preset")
        ->check(CLI::IsMember({"none", "t", "t+va", "t+au", "full"}));
    t->add_option("--edges", train.edges, "AU graph edges")->check(CLI::IsMember({"data", "random", "fixed"}));
    t->add_option("--seed", train.seed, "Training seed");
    t->add_option("--epochs", train.epochs, "Override the epoch count")->check(CLI::PositiveNumber);
    t->add_option("--out", train.out, std::string("Run directory (default: under $") + kOutRootEnv + ")");

    std::string eval_run, eval_manifest, eval_split = "test";
    auto* e = app.add_subcommand("evaluate", "Score a run's checkpoint");
    e->add_option("--run", eval_run, "Run directory")->required()->check(CLI::ExistingDirectory);
    e->add_option("--manifest", eval_manifest, "Manifest to score (default: the run's)")->check(CLI::ExistingFile);
    e->add_option("--split", eval_split, "Split")->check(CLI::IsMember({"train", "test"}));

    std::string audit_run;
    auto* a = app.add_subcommand("audit", "Score a run's relabel decisions against its flip mask");
    a->add_option("--run", audit_run, "Run directory")->required()->check(CLI::ExistingDirectory);

    std::vector<std::string> report_runs;
    std::string report_out;
    auto* r = app.add_subcommand("report", "Seed-median comparison table across runs");
    r->add_option("--runs", report_runs, "Run directories")->required()->expected(1, -1);
    r->add_option("--out", report_out, "Directory for report.txt and report.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*s) return run_synth(synth);
        if (*t) return run_train(train);
        if (*e) return run_evaluate(eval_run, eval_manifest, eval_split);
        if (*a) return run_audit(audit_run);
        if (*r) return run_report(report_runs, report_out);
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << '\n';
        return 2;
    } catch (const TrainingAborted& err) {
        std::cerr << "training aborted: " << err.what() << '\n';
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 2;
}
