#pragma once

// Two-phase training, evaluation, statistics dumps and the multi-seed
// cross-domain trend experiment used by the CLI and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylebend/fewshot_seg.hpp"
#include "stylebend/synth_domains.hpp"

namespace stylebend {

enum class Precision { Float, Double };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct TrainConfig {
    std::uint64_t seed = 0;
    double lr = 1e-3;           // adapter phase
    double baseline_lr = 3e-3;  // baseline phase
    double momentum = 0.9;
    std::size_t baseline_epochs = 20;
    std::size_t adapter_epochs = 5;
    // 0: one pass over the pool, i.e. pool size / (shots + 1) episodes.
    std::size_t episodes_per_epoch = 0;
    std::size_t batch_size = 8;           // adapter phase
    std::size_t baseline_batch_size = 1;  // baseline phase
    // Joint gradient-norm ceiling per step; 0 disables clipping.
    double grad_clip = 1.0;
    std::size_t shots = 1;
    PerturbConfig perturb;
    LossFlags losses;
    bool freeze_backbone = true;
    Precision precision = Precision::Float;
    ModelOptions model;
    std::string data_dir = "data";
    std::string out_dir = "runs";
    std::string init_checkpoint;  // empty: fresh model

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

TrainConfig load_config(const std::filesystem::path& path);
void save_config(const TrainConfig& c, const std::filesystem::path& path);

// Applies STYLEBEND_SEED when set.
void apply_seed_override(TrainConfig& c);

class NanLossError : public std::runtime_error {
public:
    NanLossError(std::size_t step, const std::string& what)
        : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double l_bce = 0.0;
    double l_cyc = 0.0;
    double l_align = 0.0;
    double total = 0.0;
};

enum class Phase { Baseline, Adapter };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

// Model seed derived from the run seed.
std::uint64_t model_seed(const TrainConfig& c);

// Baseline: encoder + matching head on BCE, bank folded from clean passes.
// Adapter: perturbation hooks on, adapter trained on the configured losses,
// encoder frozen unless freeze_backbone is off. One step = one batch of
// episodes with averaged gradients.
template <typename T>
std::vector<StepRecord> train_phase(SegModel<T>& model, const std::vector<StoredSample>& pool, const TrainConfig& cfg,
                                    Phase phase, const std::string& style);

void write_steps_csv(const std::vector<StepRecord>& steps, const std::filesystem::path& path);

template <typename T>
SegModel<T> load_model(const TrainConfig& cfg, const std::filesystem::path& checkpoint);

template <typename T>
void save_model(const SegModel<T>& model, const std::filesystem::path& checkpoint);

// ---------------------------------------------------------------------------
// Evaluation

struct EpisodeResult {
    std::string episode_id;
    int class_id = 0;
    std::string style_id;
    std::size_t shots = 0;
    bool rectify = false;
    double iou = 0.0;
    double l_bce = 0.0;
    BinaryMask prediction;
    BinaryMask ground_truth;
    // Mean over the episode's images of (1/C) sum_c |mu_c - mu_datum_c| at the
    // first hooked stage, without and with rectification. NaN without a bank.
    double bank_distance_plain = 0.0;
    double bank_distance_rectified = 0.0;
};

template <typename T>
std::vector<Episode<T>> load_episodes(Benchmark& bench, const std::string& style, std::size_t shots, std::size_t limit = 0);

// Episodes are independent; `jobs` threads share the read-only model and the
// result order follows the episode order.
template <typename T>
std::vector<EpisodeResult> evaluate_episodes(const std::vector<Episode<T>>& episodes, const SegModel<T>& model,
                                             bool rectify, unsigned jobs = 1);

double episodes_miou(const std::vector<EpisodeResult>& results);

void write_episode_csv(const std::vector<EpisodeResult>& results, const std::filesystem::path& path);

struct SummaryRow {
    std::string style_id;
    std::size_t shots = 0;
    bool rectify = false;
    double miou = 0.0;
    std::size_t episodes = 0;
};

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);
std::string format_summary_table(const std::vector<SummaryRow>& rows);

// ---------------------------------------------------------------------------
// Channel statistics dump

enum class StatKind { Mean, Std };

struct StatsDump {
    std::vector<std::string> sample_ids;
    std::vector<std::vector<double>> rows;  // one [C] row per sample
    std::vector<double> average;
};

template <typename T>
StatsDump collect_stage_stats(const SegModel<T>& model, const std::vector<const StoredSample*>& samples, std::size_t stage,
                              StatKind kind);

// Columns: row_kind, sample_id, c0..c{C-1}; the dataset row comes last.
void write_stats_csv(const StatsDump& dump, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Multi-seed trend experiment

std::string flags_name(const LossFlags& f);

struct TrendConfig {
    TrainConfig train;
    std::vector<LossFlags> ablations{{false, false}, {true, false}, {false, true}, {true, true}};
    // Ablations whose adapters are also evaluated; the others are only
    // trained. Empty: evaluate all of them.
    std::vector<LossFlags> evaluated{{false, false}, {true, true}};
    std::size_t shots = 1;
    std::size_t eval_episodes = 0;  // 0: every stored episode
    unsigned jobs = 1;
};

struct TrendSeedResult {
    std::uint64_t seed = 0;
    std::map<std::string, double> baseline_miou;                        // style -> mIoU
    std::map<std::string, std::map<std::string, double>> adapter_miou;  // flags -> style -> mIoU
    std::map<std::string, bool> finite_losses;                          // flags -> all steps finite
    // Share of target episodes whose rectified first-stage means are closer
    // to the bank than the unrectified ones, for the full objective.
    double closer_fraction = 0.0;
    // Full-objective adapter on the source validation episodes.
    double source_miou_plain = 0.0;
    double source_miou_rectified = 0.0;
    double seconds = 0.0;
};

// Desk-scale schedule for the five-seed trend run: 1500 baseline episodes at
// batch 1, then 500 adapter episodes per ablation at batch 8.
TrendConfig default_trend_config();

// Trains one baseline, then one adapter per ablation on top of it, and
// evaluates every target style without rectification for the baseline and
// with it for each evaluated adapter; the full-objective adapter is also run
// on the source validation episodes with rectification off and on. Writes
// metrics.csv (and per-episode CSVs) under `out`.
TrendSeedResult run_trend_seed(Benchmark& bench, const TrendConfig& cfg, std::uint64_t seed,
                               const std::filesystem::path& out);

}  // namespace stylebend
