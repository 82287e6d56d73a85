#include "stylebend/fewshot_seg.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "stylebend/ops.hpp"

namespace stylebend {

namespace {

// Squared-norm floor in the cosine denominator.
constexpr double kNormEps = 1e-12;

std::string conv_name(std::size_t stage, int conv, const char* leaf) {
    return "encoder.stage" + std::to_string(stage) + ".conv" + std::to_string(conv) + "." + leaf;
}

std::string bank_name(std::size_t stage) { return "bank.stage" + std::to_string(stage) + ".mu_datum"; }

template <typename T>
Tensor<T> he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(d(rng));
    return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
void copy_into(Tensor<T>& dst, const Checkpoint& ck, const std::string& name) {
    auto src = ck.get<T>(name);
    if (src.shape() != dst.shape()) {
        throw CheckpointError("shape mismatch for " + name + ": " + shape_str(src.shape()) + " vs " +
                              shape_str(dst.shape()));
    }
    auto d = dst.mutable_values();
    std::copy(src.values().begin(), src.values().end(), d.begin());
}

bool contains(const std::vector<std::size_t>& v, std::size_t x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
Encoder<T>::Encoder(const EncoderOptions& options, Rng& rng) : options_(options) {
    if (options.channels.empty()) throw std::invalid_argument("encoder needs at least one stage");
    std::size_t in = options.in_channels;
    for (std::size_t c : options.channels) {
        EncoderStage<T> s;
        s.conv1_weight = he_normal<T>(Shape{c, in, 3, 3}, in * 9, rng);
        s.conv1_bias = Tensor<T>::zeros(Shape{c}, true);
        s.conv2_weight = he_normal<T>(Shape{c, c, 3, 3}, c * 9, rng);
        s.conv2_bias = Tensor<T>::zeros(Shape{c}, true);
        stages_.push_back(std::move(s));
        in = c;
    }
}

template <typename T>
Tensor<T> Encoder<T>::forward_stage(std::size_t stage, const Tensor<T>& x) const {
    const auto& s = stages_.at(stage);
    auto h = relu(conv2d(stage == 0 ? add_scalar(x, T(-0.5)) : x, s.conv1_weight, s.conv1_bias, 1, 1));
    h = conv2d(h, s.conv2_weight, s.conv2_bias, 1, 1);
    if (stage + 1 < stages_.size() || options_.final_relu) h = relu(h);
    return pool2d(h, PoolKind::Average, 2);
}

template <typename T>
std::vector<Tensor<T>> Encoder<T>::parameters() const {
    std::vector<Tensor<T>> r;
    for (const auto& s : stages_) {
        r.push_back(s.conv1_weight);
        r.push_back(s.conv1_bias);
        r.push_back(s.conv2_weight);
        r.push_back(s.conv2_bias);
    }
    return r;
}

template <typename T>
void Encoder<T>::set_requires_grad(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
}

template <typename T>
void Encoder<T>::save(Checkpoint& ck) const {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const auto& s = stages_[i];
        ck.put(conv_name(i, 1, "weight"), s.conv1_weight);
        ck.put(conv_name(i, 1, "bias"), s.conv1_bias);
        ck.put(conv_name(i, 2, "weight"), s.conv2_weight);
        ck.put(conv_name(i, 2, "bias"), s.conv2_bias);
    }
}

template <typename T>
void Encoder<T>::load(const Checkpoint& ck) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        auto& s = stages_[i];
        copy_into(s.conv1_weight, ck, conv_name(i, 1, "weight"));
        copy_into(s.conv1_bias, ck, conv_name(i, 1, "bias"));
        copy_into(s.conv2_weight, ck, conv_name(i, 2, "weight"));
        copy_into(s.conv2_bias, ck, conv_name(i, 2, "bias"));
    }
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
SegModel<T>::SegModel(const ModelOptions& opts, std::uint64_t seed) : options(opts) {
    Rng rng(seed);
    encoder = Encoder<T>(options.encoder, rng);
    std::map<std::size_t, std::size_t> hooked;
    for (auto s : options.hooked_stages) {
        if (s >= encoder.num_stages()) throw std::invalid_argument("hooked stage " + std::to_string(s) + " does not exist");
        hooked[s] = encoder.stage_channels(s);
    }
    AdapterOptions ao = options.adapter;
    ao.eps = options.eps;
    adapter = RectAdapter<T>(hooked, ao, rng);
    bank = GlobalStatsBank<T>(encoder.num_stages(), static_cast<T>(options.bank_lambda));
}

template <typename T>
void SegModel<T>::save(Checkpoint& ck) const {
    encoder.save(ck);
    adapter.save(ck);
    for (std::size_t s = 0; s < bank.num_stages(); ++s) {
        if (bank.initialized(s)) ck.put(bank_name(s), bank.mu_datum(s));
    }
}

template <typename T>
void SegModel<T>::load(const Checkpoint& ck) {
    encoder.load(ck);
    adapter.load(ck);
    bank = GlobalStatsBank<T>(encoder.num_stages(), static_cast<T>(options.bank_lambda));
    for (std::size_t s = 0; s < bank.num_stages(); ++s) {
        if (ck.contains(bank_name(s))) {
            auto mu = ck.get<T>(bank_name(s));
            if (mu.shape() != Shape{encoder.stage_channels(s)}) throw CheckpointError("bank shape mismatch at " + bank_name(s));
            bank.seed(s, mu);
        }
    }
}

// ---------------------------------------------------------------------------
// Episodes

template <typename T>
void Episode<T>::validate() const {
    if (!support_images.defined() || !support_masks.defined() || !query_image.defined() || !query_mask.defined()) {
        throw std::invalid_argument("episode " + id + " is incomplete");
    }
    if (support_images.rank() != 4 || support_images.dim(0) < 1) throw DimensionError("episode needs K >= 1 supports");
    const std::size_t k = support_images.dim(0);
    const std::size_t h = support_images.dim(2);
    const std::size_t w = support_images.dim(3);
    if (support_masks.shape() != Shape{k, 1, h, w} || query_image.shape() != Shape{1, support_images.dim(1), h, w} ||
        query_mask.shape() != Shape{1, 1, h, w}) {
        throw DimensionError("episode " + id + " has inconsistent shapes");
    }
    auto binary = [](const Tensor<T>& m) {
        for (const T v : m.values())
            if (v != T(0) && v != T(1)) return false;
        return true;
    };
    if (!binary(support_masks) || !binary(query_mask)) throw std::invalid_argument("episode " + id + " has non-binary masks");
    auto sm = support_masks.values();
    for (std::size_t i = 0; i < k; ++i) {
        const auto first = sm.begin() + static_cast<std::ptrdiff_t>(i * h * w);
        if (std::none_of(first, first + static_cast<std::ptrdiff_t>(h * w), [](T v) { return v > T(0); })) {
            throw std::invalid_argument("episode " + id + ": support " + std::to_string(i) + " has no foreground");
        }
    }
}

template <typename T>
Encoding<T> encode(const Tensor<T>& images, const SegModel<T>& model, const HookContext<T>& hooks) {
    Encoding<T> enc;
    Tensor<T> x = images;
    const T eps = static_cast<T>(model.options.eps);
    for (std::size_t s = 0; s < model.encoder.num_stages(); ++s) {
        x = model.encoder.forward_stage(s, x);
        enc.stage_outputs.push_back(x);
        const bool hooked = contains(model.options.hooked_stages, s) && model.adapter.has_stage(s);
        if (!hooked || hooks.mode == HookMode::Plain) continue;
        if (hooks.mode == HookMode::Rectify) {
            x = rectify_stage(x, model.adapter, s, true);
            continue;
        }

        if (!hooks.perturb) throw std::invalid_argument("adapter-train hooks need a perturbation config");
        StageRecord<T> rec;
        rec.stage = s;
        rec.clean = x;
        if (hooks.shared) {
            rec.factors = hooks.shared->at(s);
        } else if (contains(hooks.perturb->stages, s)) {
            if (!hooks.rng) throw std::invalid_argument("adapter-train hooks need an rng");
            rec.factors = draw_factors<T>(*hooks.perturb, x.dim(1), *hooks.rng);
        } else {
            rec.factors = {Tensor<T>::zeros(Shape{x.dim(1)}), Tensor<T>::zeros(Shape{x.dim(1)}), PerturbMode::None};
        }
        auto predict = [&](const Tensor<T>& f) { return predict_factors(f, model.adapter, s); };
        auto perturbed = apply_perturbation(x, rec.factors, model.bank, s);
        auto rectified = rectify(perturbed, predict(perturbed));
        rec.stats.original = channel_stats(x, eps);
        rec.stats.rectified = channel_stats(rectified, eps);
        if (hooks.cyclic) {
            auto again = apply_perturbation(rectified, rec.factors, model.bank, s);
            rec.stats.cycled = channel_stats(rectify(again, predict(again)), eps);
        } else {
            rec.stats.cycled = rec.stats.rectified;
        }
        enc.hooked.push_back(std::move(rec));
        x = rectified;
    }
    enc.features = x;
    return enc;
}

template <typename T>
Tensor<T> downsample_nearest(const Tensor<T>& masks, std::size_t height, std::size_t width) {
    if (masks.rank() != 4) throw DimensionError("downsample_nearest expects [K,C,H,W]");
    const std::size_t planes = masks.dim(0) * masks.dim(1);
    const std::size_t h = masks.dim(2);
    const std::size_t w = masks.dim(3);
    auto mv = masks.values();
    std::vector<T> out(planes * height * width);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < height; ++y) {
            const std::size_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * height));
            for (std::size_t x = 0; x < width; ++x) {
                const std::size_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * width));
                out[(p * height + y) * width + x] = mv[(p * h + sy) * w + sx];
            }
        }
    return Tensor<T>(Shape{masks.dim(0), masks.dim(1), height, width}, std::move(out));
}

template <typename T>
Tensor<T> masked_prototype(const Tensor<T>& features, const Tensor<T>& masks) {
    if (features.rank() != 4 || masks.rank() != 4 || masks.dim(0) != features.dim(0) || masks.dim(1) != 1) {
        throw DimensionError("masked_prototype: features " + shape_str(features.shape()) + " vs masks " +
                             shape_str(masks.shape()));
    }
    auto m = downsample_nearest(masks, features.dim(2), features.dim(3));
    double area = 0.0;
    for (const T v : m.values()) area += v;
    if (area <= 0.0) throw std::invalid_argument("empty support foreground");
    auto pooled = sum_dims(mul(features, m), {0, 2, 3});
    return scale(pooled, static_cast<T>(1.0 / area));
}

template <typename T>
Tensor<T> match(const Tensor<T>& query_features, const Tensor<T>& prototype, T tau) {
    if (!(tau > T(0))) throw std::invalid_argument("match: tau must be positive");
    if (query_features.rank() != 4 || query_features.dim(0) != 1 || prototype.rank() != 1 ||
        prototype.dim(0) != query_features.dim(1)) {
        throw DimensionError("match: query " + shape_str(query_features.shape()) + " vs prototype " +
                             shape_str(prototype.shape()));
    }
    double pnorm = 0.0;
    for (const T v : prototype.values()) pnorm += static_cast<double>(v) * v;
    if (pnorm <= 0.0) throw std::invalid_argument("match: zero-norm prototype");
    const T eps = static_cast<T>(kNormEps);
    auto dot = sum_dims(mul(query_features, prototype), {1});
    auto qn = sqrt(add_scalar(sum_dims(square(query_features), {1}), eps));
    auto pn = sqrt(add_scalar(sum(square(prototype)), eps));
    auto cosine = div(dot, mul(qn, pn));
    auto logits = scale(cosine, tau);
    return reshape(logits, Shape{1, 1, query_features.dim(2), query_features.dim(3)});
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
    if (pred.size() != gt.size()) throw DimensionError("iou: mask size mismatch");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0;
        const bool g = gt[i] != 0;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts, const std::vector<int>& class_ids) {
    if (preds.empty()) throw std::invalid_argument("miou of an empty episode list");
    if (preds.size() != gts.size() || preds.size() != class_ids.size()) {
        throw std::invalid_argument("miou: prediction, ground-truth and class lists differ in length");
    }
    std::map<int, std::pair<double, std::size_t>> per_class;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto& acc = per_class[class_ids[i]];
        acc.first += iou(preds[i], gts[i]);
        acc.second += 1;
    }
    double total = 0.0;
    for (const auto& [_, acc] : per_class) total += acc.first / static_cast<double>(acc.second);
    return total / static_cast<double>(per_class.size());
}

template <typename T>
BinaryMask threshold_logits(const Tensor<T>& logits) {
    BinaryMask m(logits.numel());
    auto v = logits.values();
    // sigmoid(z) > 0.5  <=>  z > 0
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = v[i] > T(0) ? 1 : 0;
    return m;
}

template <typename T>
BinaryMask to_mask(const Tensor<T>& mask) {
    BinaryMask m(mask.numel());
    auto v = mask.values();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = v[i] > T(0.5) ? 1 : 0;
    return m;
}

namespace {

template <typename T>
EpisodeOutput<T> forward_episode(const Episode<T>& episode, const SegModel<T>& model, const HookContext<T>& hooks) {
    episode.validate();
    const std::size_t k = episode.shots();
    auto images = concat<T>({episode.support_images, episode.query_image}, 0);
    EpisodeOutput<T> out;
    out.encoding = encode(images, model, hooks);
    const auto& feats = out.encoding.features;
    auto support = slice(feats, 0, 0, k);
    auto query = slice(feats, 0, k, 1);
    auto proto = masked_prototype(support, episode.support_masks);
    auto logits = match(query, proto, static_cast<T>(model.options.tau));
    out.logits = upsample_bilinear(logits, episode.query_mask.dim(2), episode.query_mask.dim(3));
    out.prediction = threshold_logits(out.logits);
    out.iou = iou(out.prediction, to_mask(episode.query_mask));
    return out;
}

}  // namespace

template <typename T>
EpisodeOutput<T> evaluate_episode(const Episode<T>& episode, const SegModel<T>& model, bool rectify) {
    NoGradGuard no_grad;
    HookContext<T> hooks;
    hooks.mode = rectify ? HookMode::Rectify : HookMode::Plain;
    auto out = forward_episode(episode, model, hooks);
    out.l_bce = static_cast<double>(bce_with_logits(out.logits, episode.query_mask).item());
    return out;
}

template <typename T>
EpisodeOutput<T> run_episode(const Episode<T>& episode, SegModel<T>& model, EpisodeMode mode,
                             const EpisodeContext<T>& ctx) {
    if (mode == EpisodeMode::Eval) return evaluate_episode(episode, model, ctx.rectify);

    HookContext<T> hooks;
    LossFlags flags{false, false};
    if (mode == EpisodeMode::AdapterTrain) {
        hooks.mode = HookMode::AdapterTrain;
        hooks.perturb = ctx.perturb;
        hooks.rng = ctx.rng;
        hooks.cyclic = ctx.flags.cyc;
        flags = ctx.flags;
    }
    auto out = forward_episode(episode, model, hooks);
    std::vector<StageStatsTrace<T>> traces;
    for (const auto& rec : out.encoding.hooked) traces.push_back(rec.stats);
    out.losses = total_loss(out.logits, episode.query_mask, traces, flags);
    out.l_bce = static_cast<double>(out.losses->l_bce.item());

    if (mode == EpisodeMode::BaselineTrain) {
        NoGradGuard no_grad;
        const T eps = static_cast<T>(model.options.eps);
        for (std::size_t s = 0; s < out.encoding.stage_outputs.size(); ++s) {
            model.bank.update(channel_stats(out.encoding.stage_outputs[s].detach(), eps), s);
        }
    }
    return out;
}

#define STYLEBEND_INSTANTIATE(T)                                                                               \
    template class Encoder<T>;                                                                                 \
    template struct SegModel<T>;                                                                               \
    template struct Episode<T>;                                                                                \
    template Encoding<T> encode(const Tensor<T>&, const SegModel<T>&, const HookContext<T>&);                  \
    template Tensor<T> downsample_nearest(const Tensor<T>&, std::size_t, std::size_t);                         \
    template Tensor<T> masked_prototype(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> match(const Tensor<T>&, const Tensor<T>&, T);                                           \
    template BinaryMask threshold_logits(const Tensor<T>&);                                                    \
    template BinaryMask to_mask(const Tensor<T>&);                                                             \
    template EpisodeOutput<T> evaluate_episode(const Episode<T>&, const SegModel<T>&, bool);                   \
    template EpisodeOutput<T> run_episode(const Episode<T>&, SegModel<T>&, EpisodeMode, const EpisodeContext<T>&);

STYLEBEND_INSTANTIATE(float)
STYLEBEND_INSTANTIATE(double)

#undef STYLEBEND_INSTANTIATE

}  // namespace stylebend
