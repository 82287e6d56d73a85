#include "stylebend/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "stylebend/ops.hpp"
#include "stylebend/optim.hpp"

namespace stylebend {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kModelTag = 100;
constexpr std::uint64_t kBaselineTag = 11;
constexpr std::uint64_t kAdapterTag = 12;

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    return f;
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::Float ? "float" : "double"; }

Precision precision_from_string(const std::string& s) {
    if (s == "float" || s == "f32") return Precision::Float;
    if (s == "double" || s == "f64") return Precision::Double;
    throw std::invalid_argument("unknown precision '" + s + "'");
}

std::string to_string(Phase p) { return p == Phase::Baseline ? "baseline" : "adapter"; }

Phase phase_from_string(const std::string& s) {
    if (s == "baseline") return Phase::Baseline;
    if (s == "adapter") return Phase::Adapter;
    throw std::invalid_argument("unknown phase '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config serialization

void to_json(json& j, const NoiseSpec& n) { j = json{{"kind", to_string(n.kind)}, {"a", n.a}, {"b", n.b}}; }

void from_json(const json& j, NoiseSpec& n) {
    n.kind = noise_kind_from_string(j.at("kind").get<std::string>());
    n.a = j.at("a").get<double>();
    n.b = j.value("b", 0.0);
}

void to_json(json& j, const PerturbConfig& p) {
    j = json{{"p_local", p.p_local},         {"p_global", p.p_global}, {"local_noise", p.local_noise},
             {"global_noise", p.global_noise}, {"stages", p.stages},     {"beta_floor", p.beta_floor}};
}

void from_json(const json& j, PerturbConfig& p) {
    PerturbConfig d;
    p.p_local = j.value("p_local", d.p_local);
    p.p_global = j.value("p_global", d.p_global);
    p.local_noise = j.contains("local_noise") ? j.at("local_noise").get<NoiseSpec>() : d.local_noise;
    p.global_noise = j.contains("global_noise") ? j.at("global_noise").get<NoiseSpec>() : d.global_noise;
    p.stages = j.value("stages", d.stages);
    p.beta_floor = j.value("beta_floor", d.beta_floor);
}

void to_json(json& j, const ModelOptions& m) {
    j = json{{"in_channels", m.encoder.in_channels},
             {"channels", m.encoder.channels},
             {"final_relu", m.encoder.final_relu},
             {"reduction", m.adapter.reduction},
             {"adapter_scale", m.adapter.scale},
             {"hooked_stages", m.hooked_stages},
             {"tau", m.tau},
             {"eps", m.eps},
             {"bank_lambda", m.bank_lambda}};
}

void from_json(const json& j, ModelOptions& m) {
    ModelOptions d;
    m.encoder.in_channels = j.value("in_channels", d.encoder.in_channels);
    m.encoder.channels = j.value("channels", d.encoder.channels);
    m.encoder.final_relu = j.value("final_relu", d.encoder.final_relu);
    m.adapter.reduction = j.value("reduction", d.adapter.reduction);
    m.adapter.scale = j.value("adapter_scale", d.adapter.scale);
    m.hooked_stages = j.value("hooked_stages", d.hooked_stages);
    m.tau = j.value("tau", d.tau);
    m.eps = j.value("eps", d.eps);
    m.adapter.eps = m.eps;
    m.bank_lambda = j.value("bank_lambda", d.bank_lambda);
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"seed", c.seed},
             {"lr", c.lr},
             {"baseline_lr", c.baseline_lr},
             {"momentum", c.momentum},
             {"baseline_epochs", c.baseline_epochs},
             {"adapter_epochs", c.adapter_epochs},
             {"episodes_per_epoch", c.episodes_per_epoch},
             {"batch_size", c.batch_size},
             {"baseline_batch_size", c.baseline_batch_size},
             {"grad_clip", c.grad_clip},
             {"shots", c.shots},
             {"perturb", c.perturb},
             {"losses", {{"cyc", c.losses.cyc}, {"align", c.losses.align}}},
             {"freeze_backbone", c.freeze_backbone},
             {"precision", to_string(c.precision)},
             {"model", c.model},
             {"data_dir", c.data_dir},
             {"out_dir", c.out_dir},
             {"init_checkpoint", c.init_checkpoint}};
}

void from_json(const json& j, TrainConfig& c) {
    TrainConfig d;
    c.seed = j.value("seed", d.seed);
    c.lr = j.value("lr", d.lr);
    c.baseline_lr = j.value("baseline_lr", d.baseline_lr);
    c.momentum = j.value("momentum", d.momentum);
    c.baseline_epochs = j.value("baseline_epochs", d.baseline_epochs);
    c.adapter_epochs = j.value("adapter_epochs", d.adapter_epochs);
    c.episodes_per_epoch = j.value("episodes_per_epoch", d.episodes_per_epoch);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.baseline_batch_size = j.value("baseline_batch_size", d.baseline_batch_size);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.shots = j.value("shots", d.shots);
    c.perturb = j.contains("perturb") ? j.at("perturb").get<PerturbConfig>() : d.perturb;
    if (j.contains("losses")) {
        c.losses.cyc = j.at("losses").value("cyc", true);
        c.losses.align = j.at("losses").value("align", true);
    }
    c.freeze_backbone = j.value("freeze_backbone", d.freeze_backbone);
    c.precision = precision_from_string(j.value("precision", to_string(d.precision)));
    c.model = j.contains("model") ? j.at("model").get<ModelOptions>() : d.model;
    c.data_dir = j.value("data_dir", d.data_dir);
    c.out_dir = j.value("out_dir", d.out_dir);
    c.init_checkpoint = j.value("init_checkpoint", d.init_checkpoint);
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !(baseline_lr > 0.0)) throw std::invalid_argument("config: learning rates must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("config: momentum must lie in [0, 1)");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("config: grad_clip must be >= 0");
    if (batch_size == 0 || baseline_batch_size == 0) throw std::invalid_argument("config: batch_size must be >= 1");
    if (shots == 0) throw std::invalid_argument("config: shots must be >= 1");
    if (model.tau <= 0.0) throw std::invalid_argument("config: tau must be positive");
    perturb.validate();
}

TrainConfig load_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path.string());
    TrainConfig c = json::parse(f).get<TrainConfig>();
    c.validate();
    return c;
}

void save_config(const TrainConfig& c, const fs::path& path) { open_out(path) << json(c).dump(2) << "\n"; }

void apply_seed_override(TrainConfig& c) {
    if (const char* env = std::getenv("STYLEBEND_SEED"); env && *env) {
        std::size_t used = 0;
        const std::string s(env);
        const unsigned long long v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument("STYLEBEND_SEED is not an integer: " + s);
        c.seed = v;
    }
}

std::uint64_t model_seed(const TrainConfig& c) { return derive_seed(c.seed, kModelTag); }

// ---------------------------------------------------------------------------
// Training

template <typename T>
std::vector<StepRecord> train_phase(SegModel<T>& model, const std::vector<StoredSample>& pool, const TrainConfig& cfg,
                                    Phase phase, const std::string& style) {
    cfg.validate();
    const std::size_t epochs = phase == Phase::Baseline ? cfg.baseline_epochs : cfg.adapter_epochs;
    if (epochs == 0) return {};
    if (pool.empty()) throw std::invalid_argument("training pool is empty");
    const std::size_t per_epoch =
        cfg.episodes_per_epoch ? cfg.episodes_per_epoch : std::max<std::size_t>(1, pool.size() / (cfg.shots + 1));

    std::vector<Tensor<T>> params;
    EpisodeMode mode;
    T lr;
    if (phase == Phase::Baseline) {
        mode = EpisodeMode::BaselineTrain;
        lr = static_cast<T>(cfg.baseline_lr);
        model.adapter.set_requires_grad(false);
        model.encoder.set_requires_grad(true);
        params = model.encoder.parameters();
    } else {
        mode = EpisodeMode::AdapterTrain;
        lr = static_cast<T>(cfg.lr);
        if (cfg.perturb.p_global > 0.0) {
            for (auto s : cfg.perturb.stages) {
                if (s < model.bank.num_stages() && !model.bank.initialized(s)) {
                    throw std::invalid_argument("adapter phase needs a bank from baseline training (stage " +
                                                std::to_string(s) + " is empty)");
                }
            }
        }
        model.encoder.set_requires_grad(!cfg.freeze_backbone);
        model.adapter.set_requires_grad(true);
        params = model.adapter.parameters();
        if (!cfg.freeze_backbone) {
            for (auto& p : model.encoder.parameters()) params.push_back(p);
        }
    }

    SgdOptimizer<T> opt(params, lr, static_cast<T>(cfg.momentum));
    Rng rng(derive_seed(cfg.seed, phase == Phase::Baseline ? kBaselineTag : kAdapterTag));
    EpisodeContext<T> ctx;
    ctx.perturb = &cfg.perturb;
    ctx.rng = &rng;
    ctx.flags = cfg.losses;

    std::vector<StepRecord> steps;
    const std::size_t batch = phase == Phase::Baseline ? cfg.baseline_batch_size : cfg.batch_size;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t done = 0; done < per_epoch; done += batch, ++step) {
            const std::size_t n = std::min(batch, per_epoch - done);
            const T inv = static_cast<T>(1.0 / static_cast<double>(n));
            StepRecord rec;
            rec.step = step;
            rec.epoch = epoch;
            opt.zero_grad();
            for (std::size_t i = 0; i < n; ++i) {
                auto episode = sample_train_episode<T>(pool, cfg.shots, rng, style);
                try {
                    auto out = run_episode(episode, model, mode, ctx);
                    const auto& l = *out.losses;
                    rec.l_bce += static_cast<double>(l.l_bce.item()) / n;
                    rec.l_cyc += static_cast<double>(l.l_cyc.item()) / n;
                    rec.l_align += static_cast<double>(l.l_align.item()) / n;
                    rec.total += static_cast<double>(l.total.item()) / n;
                    if (l.total.requires_grad()) backward(scale(l.total, inv));
                } catch (const NumericError& e) {
                    Tape<T>::current().clear();
                    throw NanLossError(step, e.what());
                }
            }
            if (!std::isfinite(rec.total)) throw NanLossError(step, "loss sum overflowed");
            if (cfg.grad_clip > 0.0) opt.clip_grad_norm(cfg.grad_clip);
            opt.step();
            steps.push_back(rec);
        }
    }
    opt.zero_grad();
    model.encoder.set_requires_grad(false);
    model.adapter.set_requires_grad(false);
    return steps;
}

void write_steps_csv(const std::vector<StepRecord>& steps, const fs::path& path) {
    auto f = open_out(path);
    f << "step,epoch,l_bce,l_cyc,l_align,total\n";
    for (const auto& s : steps) {
        f << s.step << ',' << s.epoch << ',' << fmt("%.9g", s.l_bce) << ',' << fmt("%.9g", s.l_cyc) << ','
          << fmt("%.9g", s.l_align) << ',' << fmt("%.9g", s.total) << '\n';
    }
}

template <typename T>
SegModel<T> load_model(const TrainConfig& cfg, const fs::path& checkpoint) {
    SegModel<T> model(cfg.model, model_seed(cfg));
    model.load(Checkpoint::load(checkpoint));
    return model;
}

template <typename T>
void save_model(const SegModel<T>& model, const fs::path& checkpoint) {
    Checkpoint ck;
    model.save(ck);
    ck.save(checkpoint);
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
std::vector<Episode<T>> load_episodes(Benchmark& bench, const std::string& style, std::size_t shots, std::size_t limit) {
    auto specs = bench.episodes(style, shots);
    if (limit && specs.size() > limit) specs.resize(limit);
    std::vector<Episode<T>> out;
    out.reserve(specs.size());
    for (const auto& s : specs) {
        std::vector<const StoredSample*> supports;
        for (const auto& id : s.supports) supports.push_back(&bench.sample(style, s.class_id, id));
        out.push_back(make_episode<T>(s.id, s.class_id, style, supports, bench.sample(style, s.class_id, s.query)));
    }
    return out;
}

namespace {

template <typename T>
double bank_distance(const Tensor<T>& features, const GlobalStatsBank<T>& bank, std::size_t stage, T eps) {
    const auto stats = channel_stats(features, eps);
    auto mu = stats.mu.values();
    auto ref = bank.mu_datum(stage).values();
    const std::size_t c = ref.size();
    const std::size_t b = mu.size() / c;
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < c; ++k) total += std::abs(static_cast<double>(mu[i * c + k]) - ref[k]);
    return total / static_cast<double>(b * c);
}

template <typename T>
EpisodeResult evaluate_one(const Episode<T>& ep, const SegModel<T>& model, bool rectify) {
    auto out = evaluate_episode(ep, model, rectify);
    EpisodeResult r;
    r.episode_id = ep.id;
    r.class_id = ep.class_id;
    r.style_id = ep.style_id;
    r.shots = ep.shots();
    r.rectify = rectify;
    r.iou = out.iou;
    r.l_bce = out.l_bce;
    r.prediction = std::move(out.prediction);
    r.ground_truth = to_mask(ep.query_mask);
    r.bank_distance_plain = std::numeric_limits<double>::quiet_NaN();
    r.bank_distance_rectified = std::numeric_limits<double>::quiet_NaN();
    if (!model.options.hooked_stages.empty()) {
        const std::size_t s = model.options.hooked_stages.front();
        if (model.bank.initialized(s) && model.adapter.has_stage(s)) {
            NoGradGuard no_grad;
            const T eps = static_cast<T>(model.options.eps);
            const auto& clean = out.encoding.stage_outputs.at(s);
            r.bank_distance_plain = bank_distance(clean, model.bank, s, eps);
            r.bank_distance_rectified = bank_distance(rectify_stage(clean, model.adapter, s, true), model.bank, s, eps);
        }
    }
    return r;
}

}  // namespace

template <typename T>
std::vector<EpisodeResult> evaluate_episodes(const std::vector<Episode<T>>& episodes, const SegModel<T>& model,
                                             bool rectify, unsigned jobs) {
    std::vector<EpisodeResult> results(episodes.size());
    jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(1, episodes.size()))));
    if (jobs == 1) {
        for (std::size_t i = 0; i < episodes.size(); ++i) results[i] = evaluate_one(episodes[i], model, rectify);
        return results;
    }
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(jobs);
    for (unsigned j = 0; j < jobs; ++j) {
        workers.emplace_back([&, j] {
            try {
                for (std::size_t i = j; i < episodes.size(); i += jobs) results[i] = evaluate_one(episodes[i], model, rectify);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

double episodes_miou(const std::vector<EpisodeResult>& results) {
    std::vector<BinaryMask> preds;
    std::vector<BinaryMask> gts;
    std::vector<int> classes;
    for (const auto& r : results) {
        preds.push_back(r.prediction);
        gts.push_back(r.ground_truth);
        classes.push_back(r.class_id);
    }
    return miou(preds, gts, classes);
}

void write_episode_csv(const std::vector<EpisodeResult>& results, const fs::path& path) {
    auto f = open_out(path);
    f << "episode_id,class_id,style_id,shots,iou,l_bce,bank_distance_plain,bank_distance_rectified\n";
    for (const auto& r : results) {
        f << r.episode_id << ',' << r.class_id << ',' << r.style_id << ',' << r.shots << ',' << fmt("%.6f", r.iou) << ','
          << fmt("%.6f", r.l_bce) << ',' << fmt("%.6g", r.bank_distance_plain) << ','
          << fmt("%.6g", r.bank_distance_rectified) << '\n';
    }
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const fs::path& path) {
    auto f = open_out(path);
    f << "style_id,shots,rectify,miou,episodes\n";
    for (const auto& r : rows) {
        f << r.style_id << ',' << r.shots << ',' << (r.rectify ? 1 : 0) << ',' << fmt("%.4f", 100.0 * r.miou) << ','
          << r.episodes << '\n';
    }
}

std::string format_summary_table(const std::vector<SummaryRow>& rows) {
    std::map<std::pair<std::string, std::size_t>, std::pair<double, double>> cells;
    for (const auto& r : rows) {
        auto& c = cells.try_emplace({r.style_id, r.shots}, std::nan(""), std::nan("")).first->second;
        (r.rectify ? c.second : c.first) = 100.0 * r.miou;
    }
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %5s %10s %10s\n", "style", "shots", "baseline", "adapter");
    os << line;
    for (const auto& [key, v] : cells) {
        std::snprintf(line, sizeof line, "%-20s %5zu %10.2f %10.2f\n", key.first.c_str(), key.second, v.first, v.second);
        os << line;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Statistics dump

template <typename T>
StatsDump collect_stage_stats(const SegModel<T>& model, const std::vector<const StoredSample*>& samples, std::size_t stage,
                              StatKind kind) {
    if (stage >= model.encoder.num_stages()) {
        throw std::invalid_argument("stage " + std::to_string(stage) + " out of range (model has " +
                                    std::to_string(model.encoder.num_stages()) + " stages)");
    }
    if (samples.empty()) throw std::invalid_argument("no samples to collect statistics from");
    NoGradGuard no_grad;
    StatsDump dump;
    const std::size_t c = model.encoder.stage_channels(stage);
    dump.average.assign(c, 0.0);
    for (const auto* s : samples) {
        auto x = images_to_tensor<T>({&s->image});
        for (std::size_t i = 0; i <= stage; ++i) x = model.encoder.forward_stage(i, x);
        auto st = channel_stats(x, static_cast<T>(model.options.eps));
        auto v = (kind == StatKind::Mean ? st.mu : st.sigma).values();
        dump.sample_ids.push_back(std::to_string(s->class_id) + "/" + s->id);
        dump.rows.emplace_back(v.begin(), v.end());
        for (std::size_t k = 0; k < c; ++k) dump.average[k] += static_cast<double>(v[k]);
    }
    for (auto& a : dump.average) a /= static_cast<double>(samples.size());
    return dump;
}

void write_stats_csv(const StatsDump& dump, const fs::path& path) {
    auto f = open_out(path);
    f << "row_kind,sample_id";
    for (std::size_t k = 0; k < dump.average.size(); ++k) f << ",c" << k;
    f << '\n';
    auto row = [&f](const char* kind, const std::string& id, const std::vector<double>& v) {
        f << kind << ',' << id;
        for (double x : v) f << ',' << fmt("%.9g", x);
        f << '\n';
    };
    for (std::size_t i = 0; i < dump.rows.size(); ++i) row("sample", dump.sample_ids[i], dump.rows[i]);
    row("dataset", "average", dump.average);
}

// ---------------------------------------------------------------------------
// Trend experiment

std::string flags_name(const LossFlags& f) {
    std::string s = "bce";
    if (f.cyc) s += "+cyc";
    if (f.align) s += "+align";
    return s;
}

TrendConfig default_trend_config() {
    TrendConfig c;
    c.train.baseline_epochs = 3;
    c.train.adapter_epochs = 1;
    c.train.episodes_per_epoch = 500;
    c.train.baseline_lr = 3e-3;
    c.train.baseline_batch_size = 1;
    c.train.lr = 3e-2;
    c.train.batch_size = 8;
    c.shots = 1;
    c.eval_episodes = 200;
    return c;
}

TrendSeedResult run_trend_seed(Benchmark& bench, const TrendConfig& cfg, std::uint64_t seed, const fs::path& out) {
    const auto start = std::chrono::steady_clock::now();
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    tc.shots = cfg.shots;
    const auto& manifest = bench.manifest();
    const auto& pool = bench.train_pool();

    TrendSeedResult result;
    result.seed = seed;

    SegModel<float> base(tc.model, model_seed(tc));
    write_steps_csv(train_phase(base, pool, tc, Phase::Baseline, manifest.source.id), out / "steps_baseline.csv");
    Checkpoint base_ck;
    base.save(base_ck);

    std::map<std::string, std::vector<Episode<float>>> episodes;
    for (const auto& t : manifest.targets) episodes[t.id] = load_episodes<float>(bench, t.id, cfg.shots, cfg.eval_episodes);

    std::ostringstream metrics;
    metrics << "config,style_id,shots,rectify,miou,episodes\n";
    auto record = [&](const std::string& config, const std::string& style, bool rectify,
                      const std::vector<EpisodeResult>& r) {
        const double m = episodes_miou(r);
        metrics << config << ',' << style << ',' << cfg.shots << ',' << (rectify ? 1 : 0) << ',' << fmt("%.6f", 100.0 * m)
                << ',' << r.size() << '\n';
        write_episode_csv(r, out / ("episodes_" + config + "_" + style + "_rectify" + (rectify ? "1" : "0") + ".csv"));
        return m;
    };

    for (const auto& [style, eps] : episodes) {
        result.baseline_miou[style] = record("baseline", style, false, evaluate_episodes(eps, base, false, cfg.jobs));
    }

    for (const auto& flags : cfg.ablations) {
        const std::string name = flags_name(flags);
        SegModel<float> model(tc.model, model_seed(tc));
        model.load(base_ck);
        TrainConfig ac = tc;
        ac.losses = flags;
        std::vector<StepRecord> steps;
        try {
            steps = train_phase(model, pool, ac, Phase::Adapter, manifest.source.id);
            result.finite_losses[name] = true;
        } catch (const NanLossError&) {
            result.finite_losses[name] = false;
            continue;
        }
        write_steps_csv(steps, out / ("steps_" + name + ".csv"));
        if (!cfg.evaluated.empty() && std::find(cfg.evaluated.begin(), cfg.evaluated.end(), flags) == cfg.evaluated.end()) {
            continue;
        }
        std::size_t closer = 0;
        std::size_t total = 0;
        for (const auto& [style, eps] : episodes) {
            auto r = evaluate_episodes(eps, model, true, cfg.jobs);
            result.adapter_miou[name][style] = record(name, style, true, r);
            if (flags.cyc && flags.align) {
                for (const auto& e : r) {
                    total += 1;
                    closer += e.bank_distance_rectified < e.bank_distance_plain ? 1 : 0;
                }
            }
        }
        if (flags.cyc && flags.align && total) result.closer_fraction = static_cast<double>(closer) / total;
        if (flags.cyc && flags.align) {
            const auto& src = manifest.source.id;
            const auto val = load_episodes<float>(bench, src, cfg.shots, cfg.eval_episodes);
            result.source_miou_plain = record(name, src, false, evaluate_episodes(val, model, false, cfg.jobs));
            result.source_miou_rectified = record(name, src, true, evaluate_episodes(val, model, true, cfg.jobs));
        }
    }

    open_out(out / "metrics.csv") << metrics.str();
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

#define STYLEBEND_INSTANTIATE(T)                                                                                        \
    template std::vector<StepRecord> train_phase(SegModel<T>&, const std::vector<StoredSample>&, const TrainConfig&,    \
                                                 Phase, const std::string&);                                           \
    template SegModel<T> load_model<T>(const TrainConfig&, const fs::path&);                                           \
    template void save_model(const SegModel<T>&, const fs::path&);                                                     \
    template std::vector<Episode<T>> load_episodes<T>(Benchmark&, const std::string&, std::size_t, std::size_t);       \
    template std::vector<EpisodeResult> evaluate_episodes(const std::vector<Episode<T>>&, const SegModel<T>&, bool,    \
                                                          unsigned);                                                   \
    template StatsDump collect_stage_stats(const SegModel<T>&, const std::vector<const StoredSample*>&, std::size_t,   \
                                           StatKind);

STYLEBEND_INSTANTIATE(float)
STYLEBEND_INSTANTIATE(double)

#undef STYLEBEND_INSTANTIATE

}  // namespace stylebend
