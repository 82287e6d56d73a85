#pragma once

// Procedural domain-shifted few-shot segmentation benchmark.
//
// Every sample is one foreground shape on a low-frequency sinusoidal
// background. A DomainStyle is a pixel-level post-transform
//   x -> clamp(gain_c * x^gamma + bias_c + N(0, noise_std), 0, 1)
// plus a background texture frequency multiplier. Content randomness is
// drawn before any style randomness, so one sample seed yields the same
// shape and mask in every style.
//
// On-disk layout under the data root:
//   manifest.json
//   train/{style}/{class}/{sample}.{ppm,pgm}
//   test/{style}/{class}/{sample}.{ppm,pgm}   + test/{style}/episodes.json
//   val/{source}/{class}/{sample}.{ppm,pgm}   + val/{source}/episodes.json

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylebend/fewshot_seg.hpp"
#include "stylebend/style_perturb.hpp"

namespace stylebend {

struct DomainStyle {
    std::string id;
    std::array<double, 3> gain{1.0, 1.0, 1.0};
    std::array<double, 3> bias{0.0, 0.0, 0.0};
    double gamma = 1.0;
    double texture_frequency = 1.0;
    double noise_std = 0.0;

    void validate() const;
    bool operator==(const DomainStyle&) const = default;
};

DomainStyle identity_style(const std::string& id);

enum class ShapeKind { Circle, Square, Triangle, Cross, Ring, Bar, Diamond, Ellipse, Star, Hexagon, LShape, Crescent };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& s);

struct ShapeClass {
    int id = 0;
    ShapeKind kind = ShapeKind::Circle;
    double min_size = 0.14;  // radius as a fraction of the image side
    double max_size = 0.34;

    bool operator==(const ShapeClass&) const = default;
};

// Planar [C,H,W] pixel buffer.
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

struct RenderedSample {
    Image image;  // 3 channels in [0,1]
    Image mask;   // 1 channel, {0,1}
};

struct RenderLimits {
    std::size_t size = 64;
    double min_foreground = 0.02;
    double max_foreground = 0.60;
    // The mask must keep foreground after nearest downsampling by this factor.
    std::size_t feature_stride = 8;
    int max_attempts = 64;
};

RenderedSample render_sample(const ShapeClass& cls, const DomainStyle& style, Rng& rng, const RenderLimits& limits = {});

// Applies a style to an unstyled render. Identity styles draw nothing.
void apply_style(Image& image, const DomainStyle& style, Rng& rng);

struct DatasetManifest {
    std::uint64_t seed = 2024;
    std::size_t image_size = 64;
    std::size_t feature_stride = 8;
    double min_foreground = 0.02;
    double max_foreground = 0.60;
    std::vector<ShapeClass> train_classes;
    std::vector<ShapeClass> test_classes;
    DomainStyle source;
    std::vector<DomainStyle> targets;
    std::size_t train_samples = 2000;
    std::size_t test_pool_per_class = 40;
    std::size_t test_episodes = 200;
    std::vector<std::size_t> shots{1, 5};
    std::size_t val_episodes = 200;

    // Disjoint class sets, source style absent from the targets, sane counts.
    void validate() const;
    RenderLimits limits() const;
    bool operator==(const DatasetManifest&) const = default;
};

// 64x64, 8 train / 4 test classes, one source and three targets of
// increasing shift.
DatasetManifest default_manifest();

void to_json(nlohmann::json& j, const DomainStyle& s);
void from_json(const nlohmann::json& j, DomainStyle& s);
void to_json(nlohmann::json& j, const ShapeClass& c);
void from_json(const nlohmann::json& j, ShapeClass& c);
void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Binary PPM (P6) / PGM (P5) I/O. Masks are stored as 0/255.
void write_ppm(const Image& rgb, const std::filesystem::path& path);
void write_pgm(const Image& mask, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
Image read_pgm_mask(const std::filesystem::path& path);

struct EpisodeSpec {
    std::string id;
    int class_id = 0;
    std::vector<std::string> supports;
    std::string query;
};

struct BenchmarkSummary {
    std::size_t train_files = 0;
    std::size_t test_files = 0;
    std::size_t val_files = 0;
    std::size_t episodes = 0;
    std::string content_hash;  // empty on dry runs
};

// Writes the whole benchmark under `root`; `jobs` worker threads render
// samples with per-sample seeds, so output does not depend on `jobs`.
BenchmarkSummary build_benchmark(const DatasetManifest& manifest, const std::filesystem::path& root, bool dry_run = false,
                                 unsigned jobs = 1);

// FNV-1a over sorted relative paths and file bytes.
std::string content_hash(const std::filesystem::path& root);

std::string sample_id(std::size_t index);

// ---------------------------------------------------------------------------
// Reading a generated benchmark

struct StoredSample {
    int class_id = 0;
    std::string id;
    Image image;
    Image mask;
};

class Benchmark {
public:
    explicit Benchmark(std::filesystem::path root);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::filesystem::path& root() const { return root_; }

    // All source-style training samples, ordered by class then id.
    const std::vector<StoredSample>& train_pool();

    // Episodes of one evaluation style ("test" split for targets, "val" for
    // the source style).
    std::vector<EpisodeSpec> episodes(const std::string& style, std::size_t shots) const;
    const StoredSample& sample(const std::string& style, int class_id, const std::string& id);

    std::string split_of(const std::string& style) const;

private:
    std::filesystem::path root_;
    DatasetManifest manifest_;
    std::vector<StoredSample> train_;
    bool train_loaded_ = false;
    std::map<std::string, StoredSample> cache_;
};

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images);

template <typename T>
Episode<T> make_episode(const std::string& id, int class_id, const std::string& style,
                        const std::vector<const StoredSample*>& supports, const StoredSample& query);

// Random training episode from the source pool: one class, K + 1 distinct samples.
template <typename T>
Episode<T> sample_train_episode(const std::vector<StoredSample>& pool, std::size_t shots, Rng& rng,
                                const std::string& style);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace stylebend
