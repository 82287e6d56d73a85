#pragma once

// Episodic few-shot segmentation: a small convolutional encoder with
// perturbation / rectification hooks after its early stages, masked-average
// prototypes, cosine matching and mIoU.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stylebend/align_losses.hpp"
#include "stylebend/checkpoint.hpp"
#include "stylebend/rect_adapter.hpp"
#include "stylebend/style_perturb.hpp"

namespace stylebend {

struct EncoderOptions {
    std::size_t in_channels = 3;
    std::vector<std::size_t> channels{16, 32, 64};
    // Without it the last stage is conv, relu, conv, pool, so features can go
    // negative and cosine logits can fall below zero.
    bool final_relu = false;

    bool operator==(const EncoderOptions&) const = default;
};

template <typename T>
struct EncoderStage {
    Tensor<T> conv1_weight, conv1_bias;
    Tensor<T> conv2_weight, conv2_bias;
};

// Each stage: 3x3 conv, relu, 3x3 conv, relu, 2x2 average pool (see
// EncoderOptions::final_relu for the last stage). Stage 0 centres its input
// as x - 0.5 before the first conv.
template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const EncoderOptions& options, Rng& rng);

    std::size_t num_stages() const { return stages_.size(); }
    std::size_t stage_channels(std::size_t stage) const { return options_.channels.at(stage); }
    // Spatial reduction factor of the final feature map.
    std::size_t stride() const { return std::size_t{1} << stages_.size(); }
    const EncoderOptions& options() const { return options_; }

    Tensor<T> forward_stage(std::size_t stage, const Tensor<T>& x) const;

    std::vector<Tensor<T>> parameters() const;
    void set_requires_grad(bool on);
    void save(Checkpoint& ck) const;
    void load(const Checkpoint& ck);

private:
    EncoderOptions options_;
    std::vector<EncoderStage<T>> stages_;
};

struct ModelOptions {
    EncoderOptions encoder;
    AdapterOptions adapter;
    std::vector<std::size_t> hooked_stages{0, 1, 2};
    double tau = 10.0;
    double eps = kDefaultStatsEps;
    double bank_lambda = 0.99;

    bool operator==(const ModelOptions&) const = default;
};

template <typename T>
struct SegModel {
    SegModel() = default;
    SegModel(const ModelOptions& options, std::uint64_t seed);

    ModelOptions options;
    Encoder<T> encoder;
    RectAdapter<T> adapter;
    GlobalStatsBank<T> bank;

    void save(Checkpoint& ck) const;
    // Loads encoder and adapter weights plus any stored bank stages.
    void load(const Checkpoint& ck);
};

template <typename T>
struct Episode {
    std::string id;
    int class_id = 0;
    std::string style_id;
    Tensor<T> support_images;  // [K,3,H,W]
    Tensor<T> support_masks;   // [K,1,H,W], values in {0,1}
    Tensor<T> query_image;     // [1,3,H,W]
    Tensor<T> query_mask;      // [1,1,H,W]

    std::size_t shots() const { return support_images.dim(0); }
    // K >= 1, binary masks, shapes consistent, every support has foreground.
    void validate() const;
};

enum class HookMode { Plain, AdapterTrain, Rectify };

template <typename T>
struct HookContext {
    HookMode mode = HookMode::Plain;
    const PerturbConfig* perturb = nullptr;
    Rng* rng = nullptr;
    // When set, per-stage factors to reuse instead of drawing.
    const std::vector<PerturbFactors<T>>* shared = nullptr;
    // Skip the second rectification when the cyclic loss is off.
    bool cyclic = true;
};

template <typename T>
struct StageRecord {
    std::size_t stage = 0;
    Tensor<T> clean;  // F_o
    PerturbFactors<T> factors;
    StageStatsTrace<T> stats;
};

template <typename T>
struct Encoding {
    Tensor<T> features;
    std::vector<Tensor<T>> stage_outputs;  // clean output of every stage
    std::vector<StageRecord<T>> hooked;    // AdapterTrain only
};

template <typename T>
Encoding<T> encode(const Tensor<T>& images, const SegModel<T>& model, const HookContext<T>& hooks);

// Nearest-neighbour resize of [K,1,H,W] masks to [K,1,h,w] (pixel centres).
template <typename T>
Tensor<T> downsample_nearest(const Tensor<T>& masks, std::size_t height, std::size_t width);

// sum_k sum_hw F_k M_k / sum_k sum_hw M_k over all K supports at once.
template <typename T>
Tensor<T> masked_prototype(const Tensor<T>& features, const Tensor<T>& masks);

// tau * cosine(p, F[:, h, w]) -> [1,1,h,w]
template <typename T>
Tensor<T> match(const Tensor<T>& query_features, const Tensor<T>& prototype, T tau);

using BinaryMask = std::vector<std::uint8_t>;

// |P n G| / |P u G|, 1 when both are empty.
double iou(const BinaryMask& pred, const BinaryMask& gt);

// Per-class mean of episode IoUs, then mean over classes.
double miou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
            const std::vector<int>& class_ids);

template <typename T>
BinaryMask threshold_logits(const Tensor<T>& logits);

template <typename T>
BinaryMask to_mask(const Tensor<T>& mask);

enum class EpisodeMode { BaselineTrain, AdapterTrain, Eval };

template <typename T>
struct EpisodeContext {
    const PerturbConfig* perturb = nullptr;
    Rng* rng = nullptr;
    LossFlags flags;
    bool rectify = false;  // Eval only
};

template <typename T>
struct EpisodeOutput {
    std::optional<LossBreakdown<T>> losses;  // training modes
    Tensor<T> logits;                        // [1,1,H,W] at mask resolution
    BinaryMask prediction;
    double iou = 0.0;
    double l_bce = 0.0;
    Encoding<T> encoding;
};

// BaselineTrain: plain forward, BCE only, folds clean stage means into the
// bank. AdapterTrain: perturb + rectify hooks and the cyclic losses.
// Eval: no history, optional test-time rectification, no side effects.
template <typename T>
EpisodeOutput<T> run_episode(const Episode<T>& episode, SegModel<T>& model, EpisodeMode mode,
                             const EpisodeContext<T>& ctx);

template <typename T>
EpisodeOutput<T> evaluate_episode(const Episode<T>& episode, const SegModel<T>& model, bool rectify);

}  // namespace stylebend
