#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "stylebend/harness.hpp"

using namespace stylebend;
namespace fs = std::filesystem;

namespace {

const fs::path& tiny_data() {
    static sbtest::TempDir dir("harness-data");
    static bool built = false;
    if (!built) {
        build_benchmark(sbtest::tiny_manifest(), dir.path(), false, 2);
        built = true;
    }
    return dir.path();
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.seed = 3;
    c.precision = Precision::Double;
    c.model.encoder.channels = {4, 6, 8};
    c.baseline_epochs = 1;
    c.adapter_epochs = 1;
    c.episodes_per_epoch = 4;
    c.batch_size = 2;
    c.data_dir = tiny_data().string();
    return c;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(f, line);) out.push_back(line);
    return out;
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
}

std::vector<double> params_of(const SegModel<double>& m) {
    std::vector<double> v;
    for (const auto& p : m.encoder.parameters()) v.insert(v.end(), p.values().begin(), p.values().end());
    for (const auto& p : m.adapter.parameters()) v.insert(v.end(), p.values().begin(), p.values().end());
    return v;
}

}  // namespace

TEST_CASE("config json round trip and validation") {
    sbtest::TempDir dir("config");
    auto c = tiny_config();
    c.lr = 0.0123;
    c.losses = {false, true};
    c.perturb.local_noise = NoiseSpec::beta(2, 5);
    c.perturb.stages = {0, 2};
    c.model.hooked_stages = {0, 2};
    c.init_checkpoint = "x.bin";
    save_config(c, dir / "c.json");
    CHECK(load_config(dir / "c.json") == c);

    auto bad = c;
    bad.batch_size = 0;
    CHECK_THROWS(bad.validate());
    bad = c;
    bad.baseline_batch_size = 0;
    CHECK_THROWS(bad.validate());
    bad = c;
    bad.lr = -1;
    CHECK_THROWS(bad.validate());
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS(load_config(dir / "broken.json"));
}

TEST_CASE("STYLEBEND_SEED overrides the config seed") {
    TrainConfig c;
    c.seed = 1;
    ::unsetenv("STYLEBEND_SEED");
    apply_seed_override(c);
    CHECK(c.seed == 1);
    ::setenv("STYLEBEND_SEED", "42", 1);
    apply_seed_override(c);
    CHECK(c.seed == 42);
    ::setenv("STYLEBEND_SEED", "4x", 1);
    CHECK_THROWS(apply_seed_override(c));
    ::unsetenv("STYLEBEND_SEED");
}

TEST_CASE("two-phase training") {
    const auto cfg = tiny_config();
    Benchmark bench(cfg.data_dir);
    const auto& pool = bench.train_pool();
    const std::string src = bench.manifest().source.id;

    SegModel<double> a(cfg.model, model_seed(cfg));
    SegModel<double> b(cfg.model, model_seed(cfg));
    auto sa = train_phase(a, pool, cfg, Phase::Baseline, src);
    auto sb = train_phase(b, pool, cfg, Phase::Baseline, src);
    CHECK(sa.size() == 4);
    for (const auto& s : sa) {
        CHECK(std::isfinite(s.total));
        CHECK(s.l_cyc == 0.0);
        CHECK(s.l_align == 0.0);
    }
    CHECK(params_of(a) == params_of(b));
    for (std::size_t s = 0; s < 3; ++s) CHECK(a.bank.initialized(s));

    SUBCASE("adapter phase trains only the adapter") {
        std::vector<double> enc_before;
        for (const auto& p : a.encoder.parameters()) enc_before.insert(enc_before.end(), p.values().begin(), p.values().end());
        Checkpoint bank_before;
        a.save(bank_before);
        auto steps = train_phase(a, pool, cfg, Phase::Adapter, src);
        CHECK(steps.size() == 2);
        for (const auto& s : steps) {
            CHECK(std::isfinite(s.total));
            CHECK(s.total == doctest::Approx(s.l_bce + s.l_cyc + s.l_align));
        }
        std::vector<double> enc_after;
        for (const auto& p : a.encoder.parameters()) enc_after.insert(enc_after.end(), p.values().begin(), p.values().end());
        CHECK(enc_before == enc_after);
        for (std::size_t s = 0; s < 3; ++s)
            CHECK(a.bank.mu_datum(s).values()[0] == bank_before.get<double>("bank.stage" + std::to_string(s) + ".mu_datum").values()[0]);
        bool moved = false;
        for (const auto& p : a.adapter.parameters())
            for (double v : p.values()) moved |= v != 0.0;
        CHECK(moved);
    }

    SUBCASE("zero epochs change nothing") {
        auto c0 = cfg;
        c0.adapter_epochs = 0;
        Checkpoint before, after;
        a.save(before);
        CHECK(train_phase(a, pool, c0, Phase::Adapter, src).empty());
        a.save(after);
        CHECK(before.encode() == after.encode());
    }

    SUBCASE("adapter phase without a bank is rejected") {
        SegModel<double> fresh(cfg.model, model_seed(cfg));
        CHECK_THROWS_AS(train_phase(fresh, pool, cfg, Phase::Adapter, src), std::invalid_argument);
    }
}

TEST_CASE("evaluation, checkpoints and summaries") {
    const auto cfg = tiny_config();
    sbtest::TempDir dir("eval");
    Benchmark bench(cfg.data_dir);
    SegModel<double> model(cfg.model, model_seed(cfg));
    train_phase(model, bench.train_pool(), cfg, Phase::Baseline, bench.manifest().source.id);
    const std::string style = bench.manifest().targets[1].id;
    auto episodes = load_episodes<double>(bench, style, 1);
    CHECK(episodes.size() == bench.manifest().test_episodes);
    CHECK(load_episodes<double>(bench, style, 1, 2).size() == 2);

    auto off = evaluate_episodes(episodes, model, false, 1);
    auto on = evaluate_episodes(episodes, model, true, 2);
    REQUIRE(off.size() == on.size());
    for (std::size_t i = 0; i < off.size(); ++i) {
        // Zero-initialised adapter: rectification is bit-exact identity.
        CHECK(off[i].iou == on[i].iou);
        CHECK(off[i].prediction == on[i].prediction);
        CHECK(off[i].bank_distance_plain == on[i].bank_distance_rectified);
        CHECK(off[i].episode_id == episodes[i].id);
    }
    CHECK(episodes_miou(off) == episodes_miou(on));

    save_model(model, dir / "m.bin");
    auto back = load_model<double>(cfg, dir / "m.bin");
    auto again = evaluate_episodes(episodes, back, false, 1);
    for (std::size_t i = 0; i < off.size(); ++i) CHECK(again[i].iou == off[i].iou);
    save_model(back, dir / "m2.bin");
    CHECK(Checkpoint::load(dir / "m.bin") == Checkpoint::load(dir / "m2.bin"));

    std::vector<SummaryRow> rows{{style, 1, false, episodes_miou(off), off.size()}, {style, 1, true, episodes_miou(on), on.size()}};
    write_summary_csv(rows, dir / "summary.csv");
    auto lines = read_lines(dir / "summary.csv");
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "style_id,shots,rectify,miou,episodes");
    CHECK(split(lines[1]).size() == 5);
    CHECK(split(lines[2])[2] == "1");
    CHECK(format_summary_table(rows).find(style) != std::string::npos);

    write_episode_csv(off, dir / "episodes.csv");
    CHECK(read_lines(dir / "episodes.csv").size() == off.size() + 1);
}

TEST_CASE("channel statistics dump") {
    const auto cfg = tiny_config();
    sbtest::TempDir dir("stats");
    Benchmark bench(cfg.data_dir);
    SegModel<double> model(cfg.model, model_seed(cfg));
    std::vector<const StoredSample*> samples;
    for (const auto& s : bench.train_pool()) samples.push_back(&s);
    for (std::size_t stage : {0, 2}) {
        for (StatKind kind : {StatKind::Mean, StatKind::Std}) {
            auto dump = collect_stage_stats(model, samples, stage, kind);
            const std::size_t c = model.encoder.stage_channels(stage);
            REQUIRE(dump.rows.size() == samples.size());
            write_stats_csv(dump, dir / "s.csv");
            auto lines = read_lines(dir / "s.csv");
            REQUIRE(lines.size() == samples.size() + 2);
            for (const auto& l : lines) CHECK(split(l).size() == c + 2);
            auto last = split(lines.back());
            CHECK(last[0] == "dataset");
            for (std::size_t k = 0; k < c; ++k) {
                double mean = 0.0;
                for (std::size_t i = 1; i + 1 < lines.size(); ++i) mean += std::stod(split(lines[i])[k + 2]);
                mean /= static_cast<double>(samples.size());
                CHECK(std::abs(std::stod(last[k + 2]) - mean) <= 1e-6 * std::max(1.0, std::abs(mean)));
                if (kind == StatKind::Std) CHECK(std::stod(last[k + 2]) > 0.0);
            }
        }
    }
    CHECK_THROWS(collect_stage_stats(model, {}, 0, StatKind::Mean));
    CHECK_THROWS(collect_stage_stats(model, samples, 3, StatKind::Mean));
}
