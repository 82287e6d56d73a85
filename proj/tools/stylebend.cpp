// stylebend {generate|train|eval|verify|stats}
//
// Exit codes: 0 success, 1 suite or run failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "stylebend/harness.hpp"
#include "stylebend/synth_domains.hpp"
#include "stylebend/verify.hpp"

namespace fs = std::filesystem;
using namespace stylebend;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw UsageError(what + " path is required");
    if (!fs::exists(path)) throw UsageError(what + " not found: " + path);
}

TrainConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
    TrainConfig cfg;
    if (!path.empty()) {
        require_file(path, "config");
        cfg = load_config(path);
    }
    apply_seed_override(cfg);
    if (seed) cfg.seed = *seed;
    return cfg;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string manifest;
    std::string out = "data";
    std::optional<std::uint64_t> seed;
    unsigned jobs = 1;
    bool dry_run = false;
    std::string write_default;
};

int cmd_generate(const GenerateArgs& a) {
    if (!a.write_default.empty()) {
        save_manifest(default_manifest(), a.write_default);
        std::cout << "wrote " << a.write_default << "\n";
        return 0;
    }
    DatasetManifest m = default_manifest();
    if (!a.manifest.empty()) {
        require_file(a.manifest, "manifest");
        m = load_manifest(a.manifest);
    }
    if (a.seed) m.seed = *a.seed;
    auto s = build_benchmark(m, a.out, a.dry_run, a.jobs);
    std::cout << (a.dry_run ? "dry run: " : "") << "train files " << s.train_files << ", test files " << s.test_files
              << ", val files " << s.val_files << ", episodes " << s.episodes << "\n";
    if (!a.dry_run) std::cout << "content hash " << s.content_hash << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string phase;
    std::string data;
    std::string out = "runs/train";
    std::string init;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    bool no_cyc = false;
    bool no_align = false;
    bool unfreeze = false;
};

template <typename T>
int run_train(const TrainConfig& cfg, Phase phase, const fs::path& out) {
    Benchmark bench(cfg.data_dir);
    SegModel<T> model(cfg.model, model_seed(cfg));
    if (!cfg.init_checkpoint.empty()) {
        model.load(Checkpoint::load(cfg.init_checkpoint));
    } else if (phase == Phase::Adapter) {
        throw UsageError("adapter phase needs a baseline checkpoint (--init)");
    }
    fs::create_directories(out);
    save_config(cfg, out / "config.json");
    const auto steps = train_phase(model, bench.train_pool(), cfg, phase, bench.manifest().source.id);
    write_steps_csv(steps, out / "steps.csv");
    save_model(model, out / "checkpoint.bin");
    std::cout << to_string(phase) << " phase: " << steps.size() << " steps";
    if (!steps.empty()) std::cout << ", final loss " << steps.back().total;
    std::cout << "\ncheckpoint " << (out / "checkpoint.bin").string() << "\n";
    return 0;
}

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg = resolve_config(a.config, a.seed);
    const Phase phase = phase_from_string(a.phase);
    if (!a.data.empty()) cfg.data_dir = a.data;
    if (!a.init.empty()) cfg.init_checkpoint = a.init;
    if (!cfg.init_checkpoint.empty()) require_file(cfg.init_checkpoint, "checkpoint");
    require_file((fs::path(cfg.data_dir) / "manifest.json").string(), "dataset manifest");
    if (a.epochs) (phase == Phase::Baseline ? cfg.baseline_epochs : cfg.adapter_epochs) = *a.epochs;
    if (a.no_cyc) cfg.losses.cyc = false;
    if (a.no_align) cfg.losses.align = false;
    if (a.unfreeze) cfg.freeze_backbone = false;
    cfg.out_dir = a.out;
    cfg.validate();
    return cfg.precision == Precision::Float ? run_train<float>(cfg, phase, a.out) : run_train<double>(cfg, phase, a.out);
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string config;
    std::string checkpoint;
    std::string data;
    std::string out = "runs/eval";
    std::string rectify = "both";
    std::vector<std::string> styles;
    std::size_t shots = 1;
    std::size_t limit = 0;
    unsigned jobs = 1;
    std::optional<std::uint64_t> seed;
};

template <typename T>
int run_eval(const TrainConfig& cfg, const EvalArgs& a) {
    Benchmark bench(cfg.data_dir);
    const auto& m = bench.manifest();
    if (std::find(m.shots.begin(), m.shots.end(), a.shots) == m.shots.end()) {
        throw UsageError("shot count " + std::to_string(a.shots) + " exceeds the supports stored in the test set");
    }
    auto model = load_model<T>(cfg, a.checkpoint);
    std::vector<std::string> styles = a.styles;
    if (styles.empty())
        for (const auto& t : m.targets) styles.push_back(t.id);
    std::vector<bool> modes;
    if (a.rectify == "off" || a.rectify == "both") modes.push_back(false);
    if (a.rectify == "on" || a.rectify == "both") modes.push_back(true);

    const fs::path out(a.out);
    std::vector<SummaryRow> rows;
    for (const auto& style : styles) {
        const auto episodes = load_episodes<T>(bench, style, a.shots, a.limit);
        for (bool rect : modes) {
            const auto results = evaluate_episodes(episodes, model, rect, a.jobs);
            write_episode_csv(results, out / ("episodes_" + style + "_" + std::to_string(a.shots) + "shot_rectify" +
                                              (rect ? "1" : "0") + ".csv"));
            rows.push_back({style, a.shots, rect, episodes_miou(results), results.size()});
        }
    }
    write_summary_csv(rows, out / "summary.csv");
    std::cout << format_summary_table(rows);
    return 0;
}

int cmd_eval(const EvalArgs& a) {
    TrainConfig cfg = resolve_config(a.config, a.seed);
    if (!a.data.empty()) cfg.data_dir = a.data;
    require_file(a.checkpoint, "checkpoint");
    require_file((fs::path(cfg.data_dir) / "manifest.json").string(), "dataset manifest");
    return cfg.precision == Precision::Float ? run_eval<float>(cfg, a) : run_eval<double>(cfg, a);
}

// ---------------------------------------------------------------------------

int cmd_verify(const std::string& suite, std::uint64_t seed, const std::string& out) {
    std::vector<std::string> suites = suite == "all" ? verify_suite_names() : std::vector<std::string>{suite};
    bool ok = true;
    std::ostringstream text;
    for (const auto& s : suites) {
        auto report = run_verify_suite(s, seed);
        text << format_report(report);
        ok = ok && report.passed();
    }
    std::cout << text.str();
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream(fs::path(out) / "verify.txt") << text.str();
    }
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct StatsArgs {
    std::string config;
    std::string checkpoint;
    std::string data;
    std::string out = "runs/stats";
    std::string style;
    std::string stat = "mean";
    std::size_t stage = 0;
    std::size_t limit = 0;
    std::optional<std::uint64_t> seed;
};

template <typename T>
int run_stats(const TrainConfig& cfg, const StatsArgs& a) {
    Benchmark bench(cfg.data_dir);
    auto model = load_model<T>(cfg, a.checkpoint);
    const std::string style = a.style.empty() ? bench.manifest().source.id : a.style;
    std::vector<const StoredSample*> samples;
    if (style == bench.manifest().source.id && a.style.empty()) {
        for (const auto& s : bench.train_pool()) samples.push_back(&s);
    } else {
        for (const auto& cls : bench.manifest().test_classes)
            for (std::size_t i = 0; i < bench.manifest().test_pool_per_class; ++i)
                samples.push_back(&bench.sample(style, cls.id, sample_id(i)));
    }
    if (a.limit && samples.size() > a.limit) samples.resize(a.limit);
    const StatKind kind = a.stat == "std" ? StatKind::Std : StatKind::Mean;
    auto dump = collect_stage_stats(model, samples, a.stage, kind);
    const fs::path path = fs::path(a.out) / ("stats_stage" + std::to_string(a.stage) + "_" + style + "_" + a.stat + ".csv");
    write_stats_csv(dump, path);
    std::cout << "wrote " << dump.rows.size() << " sample rows + dataset row to " << path.string() << "\n";
    return 0;
}

int cmd_stats(const StatsArgs& a) {
    TrainConfig cfg = resolve_config(a.config, a.seed);
    if (!a.data.empty()) cfg.data_dir = a.data;
    require_file(a.checkpoint, "checkpoint");
    require_file((fs::path(cfg.data_dir) / "manifest.json").string(), "dataset manifest");
    return cfg.precision == Precision::Float ? run_stats<float>(cfg, a) : run_stats<double>(cfg, a);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Domain-rectifying adapter for cross-domain few-shot segmentation"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Render the synthetic benchmark");
    g->add_option("--manifest", gen.manifest, "Dataset manifest (JSON); defaults to the built-in manifest");
    g->add_option("--out", gen.out, "Data root")->capture_default_str();
    g->add_option("--seed", gen.seed, "Override the manifest seed");
    g->add_option("--jobs", gen.jobs, "Worker threads")->capture_default_str();
    g->add_flag("--dry-run", gen.dry_run, "Print counts without writing");
    g->add_option("--write-default-manifest", gen.write_default, "Write the built-in manifest to this path and exit");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train the baseline or the adapter");
    t->add_option("--config", tr.config, "Training config (JSON)");
    t->add_option("--phase", tr.phase, "baseline or adapter")->required()->check(CLI::IsMember({"baseline", "adapter"}));
    t->add_option("--data", tr.data, "Data root (overrides the config)");
    t->add_option("--out", tr.out, "Output directory")->capture_default_str();
    t->add_option("--init", tr.init, "Checkpoint to start from");
    t->add_option("--seed", tr.seed, "Run seed");
    t->add_option("--epochs", tr.epochs, "Epochs for the selected phase");
    t->add_flag("--no-cyc", tr.no_cyc, "Disable the cyclic loss");
    t->add_flag("--no-align", tr.no_align, "Disable the alignment loss");
    t->add_flag("--unfreeze-backbone", tr.unfreeze, "Train the encoder in the adapter phase");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the episodic test sets");
    e->add_option("--config", ev.config, "Training config (model options, data root)");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
    e->add_option("--data", ev.data, "Data root (overrides the config)");
    e->add_option("--out", ev.out, "Output directory")->capture_default_str();
    e->add_option("--shots", ev.shots, "Shots per episode")->capture_default_str();
    e->add_option("--rectify", ev.rectify, "on, off or both")->check(CLI::IsMember({"on", "off", "both"}))->capture_default_str();
    e->add_option("--styles", ev.styles, "Styles to evaluate (default: all targets)");
    e->add_option("--limit", ev.limit, "Evaluate at most this many episodes per style");
    e->add_option("--jobs", ev.jobs, "Worker threads")->capture_default_str();
    e->add_option("--seed", ev.seed, "Run seed");

    std::string suite = "all";
    std::uint64_t verify_seed = 1;
    std::string verify_out;
    auto* v = app.add_subcommand("verify", "Run a property suite at 64-bit");
    std::vector<std::string> choices = verify_suite_names();
    choices.push_back("all");
    v->add_option("--suite", suite, "Suite name")->check(CLI::IsMember(choices))->capture_default_str();
    v->add_option("--seed", verify_seed, "Seed for the random instances")->capture_default_str();
    v->add_option("--out", verify_out, "Directory for the report");

    StatsArgs st;
    auto* s = app.add_subcommand("stats", "Dump per-channel feature statistics");
    s->add_option("--config", st.config, "Training config (model options, data root)");
    s->add_option("--checkpoint", st.checkpoint, "Checkpoint")->required();
    s->add_option("--data", st.data, "Data root (overrides the config)");
    s->add_option("--out", st.out, "Output directory")->capture_default_str();
    s->add_option("--stage", st.stage, "Encoder stage")->capture_default_str();
    s->add_option("--style", st.style, "Evaluation style (default: source training pool)");
    s->add_option("--stat", st.stat, "mean or std")->check(CLI::IsMember({"mean", "std"}))->capture_default_str();
    s->add_option("--limit", st.limit, "At most this many samples");
    s->add_option("--seed", st.seed, "Run seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*g) return cmd_generate(gen);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_eval(ev);
        if (*v) return cmd_verify(suite, verify_seed, verify_out);
        if (*s) return cmd_stats(st);
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const NanLossError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 2;
}
