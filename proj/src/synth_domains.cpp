#include "stylebend/synth_domains.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace stylebend {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t kTrainTag = 1;
constexpr std::uint64_t kTestTag = 2;
constexpr std::uint64_t kEpisodeTag = 3;

const std::map<ShapeKind, std::string>& kind_names() {
    static const std::map<ShapeKind, std::string> names{
        {ShapeKind::Circle, "circle"},   {ShapeKind::Square, "square"},   {ShapeKind::Triangle, "triangle"},
        {ShapeKind::Cross, "cross"},     {ShapeKind::Ring, "ring"},       {ShapeKind::Bar, "bar"},
        {ShapeKind::Diamond, "diamond"}, {ShapeKind::Ellipse, "ellipse"}, {ShapeKind::Star, "star"},
        {ShapeKind::Hexagon, "hexagon"}, {ShapeKind::LShape, "lshape"},   {ShapeKind::Crescent, "crescent"},
    };
    return names;
}

// Point test in the shape's own frame, radius normalised to 1.
bool inside_shape(ShapeKind kind, double u, double v) {
    const double au = std::abs(u);
    const double av = std::abs(v);
    const double rho = std::hypot(u, v);
    switch (kind) {
        case ShapeKind::Circle: return rho <= 1.0;
        case ShapeKind::Square: return au <= 0.8 && av <= 0.8;
        case ShapeKind::Triangle: return v >= -0.5 && std::sqrt(3.0) * au + v <= 1.0;
        case ShapeKind::Cross: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
        case ShapeKind::Ring: return rho >= 0.55 && rho <= 1.0;
        case ShapeKind::Bar: return au <= 1.0 && av <= 0.3;
        case ShapeKind::Diamond: return au + av <= 1.0;
        case ShapeKind::Ellipse: return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
        case ShapeKind::Star: {
            const double phi = std::atan2(v, u);
            return rho <= 0.45 + 0.55 * (0.5 + 0.5 * std::cos(5.0 * phi));
        }
        case ShapeKind::Hexagon: return av <= std::sqrt(3.0) / 2.0 && std::sqrt(3.0) * au + av <= std::sqrt(3.0);
        case ShapeKind::LShape:
            return (u >= -0.8 && u <= -0.2 && v >= -0.8 && v <= 0.8) || (u >= -0.8 && u <= 0.8 && v >= 0.2 && v <= 0.8);
        case ShapeKind::Crescent: return rho <= 1.0 && std::hypot(u - 0.45, v) > 0.6;
    }
    return false;
}

bool survives_downsample(const Image& mask, std::size_t stride) {
    if (stride <= 1) return true;
    const std::size_t h = mask.height / stride;
    const std::size_t w = mask.width / stride;
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = std::min(mask.height - 1, (2 * y + 1) * mask.height / (2 * h));
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = std::min(mask.width - 1, (2 * x + 1) * mask.width / (2 * w));
            if (mask.at(0, sy, sx) > 0.5) return true;
        }
    }
    return false;
}

constexpr double kColourJitter = 0.08;
constexpr double kBackgroundTint = 0.06;

// Each class has its own saturated foreground colour, shared by all of its
// samples; backgrounds stay close to grey.
std::array<double, 3> class_colour(int class_id) {
    Rng rng(splitmix64(0xC0105EEDull + static_cast<std::uint64_t>(class_id)));
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::array<double, 3> c{};
    do {
        c = {u(rng), u(rng), u(rng)};
    } while (*std::max_element(c.begin(), c.end()) - *std::min_element(c.begin(), c.end()) < 0.45);
    return c;
}

// Unstyled content: background texture, one textured shape, its mask.
bool render_content(const ShapeClass& cls, double texture_frequency, Rng& rng, const RenderLimits& limits,
                    RenderedSample& out) {
    const std::size_t s = limits.size;
    const double sd = static_cast<double>(s);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const auto palette = class_colour(cls.id);
    std::array<double, 3> fg{};
    for (std::size_t c = 0; c < 3; ++c) fg[c] = std::clamp(palette[c] + uniform(-kColourJitter, kColourJitter), 0.02, 0.98);
    std::array<double, 3> base{};
    for (int tries = 0; tries < 16; ++tries) {
        double contrast = 0.0;
        const double grey = uniform(0.25, 0.75);
        for (std::size_t c = 0; c < 3; ++c) {
            base[c] = grey + uniform(-kBackgroundTint, kBackgroundTint);
            contrast += std::abs(fg[c] - base[c]);
        }
        if (contrast / 3.0 >= 0.2) break;
    }
    struct Wave {
        double freq, cos_t, sin_t, phase;
        std::array<double, 3> amp;
    };
    std::array<Wave, 3> waves{};
    for (auto& w : waves) {
        const double theta = uniform(0.0, std::numbers::pi);
        w.freq = texture_frequency * uniform(0.5, 1.5);
        w.cos_t = std::cos(theta);
        w.sin_t = std::sin(theta);
        w.phase = uniform(0.0, 2.0 * std::numbers::pi);
        w.amp.fill(uniform(0.04, 0.12));
    }

    const double radius = uniform(cls.min_size, cls.max_size) * sd;
    const double cx = uniform(radius * 0.6, sd - radius * 0.6);
    const double cy = uniform(radius * 0.6, sd - radius * 0.6);
    const double rot = uniform(0.0, 2.0 * std::numbers::pi);
    const double cr = std::cos(rot);
    const double sr = std::sin(rot);

    const double stripe_period = uniform(4.0, 7.0);
    const double stripe_angle = uniform(0.0, std::numbers::pi);
    const double stripe_cos = std::cos(stripe_angle);
    const double stripe_sin = std::sin(stripe_angle);
    const double stripe_amp = uniform(0.08, 0.16);

    Image img{3, s, s, std::vector<double>(3 * s * s)};
    Image mask{1, s, s, std::vector<double>(s * s)};
    std::size_t area = 0;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double px = static_cast<double>(x) + 0.5;
            const double py = static_cast<double>(y) + 0.5;
            const double dx = px - cx;
            const double dy = py - cy;
            const double u = (cr * dx + sr * dy) / radius;
            const double v = (-sr * dx + cr * dy) / radius;
            const bool in = inside_shape(cls.kind, u, v);
            mask.at(0, y, x) = in ? 1.0 : 0.0;
            area += in ? 1 : 0;
            for (std::size_t c = 0; c < 3; ++c) {
                double val;
                if (in) {
                    const double t = (stripe_cos * px + stripe_sin * py) / stripe_period;
                    val = fg[c] + stripe_amp * std::sin(2.0 * std::numbers::pi * t);
                } else {
                    val = base[c];
                    for (const auto& w : waves) {
                        val += w.amp[c] * std::sin(2.0 * std::numbers::pi * w.freq * (w.cos_t * px + w.sin_t * py) / sd + w.phase);
                    }
                }
                img.at(c, y, x) = std::clamp(val, 0.0, 1.0);
            }
        }
    }
    const double frac = static_cast<double>(area) / (sd * sd);
    if (frac < limits.min_foreground || frac > limits.max_foreground) return false;
    if (!survives_downsample(mask, limits.feature_stride)) return false;
    out.image = std::move(img);
    out.mask = std::move(mask);
    return true;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing " + p.string());
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Parses "P5"/"P6" headers: magic, width, height, maxval, one whitespace byte.
Image read_netpbm(const fs::path& path, const std::string& magic, std::size_t channels) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    if (next_token() != magic) throw std::runtime_error(path.string() + ": expected " + magic);
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    if (std::stoul(next_token()) != 255) throw std::runtime_error(path.string() + ": only 8-bit maxval supported");
    ++pos;
    if (bytes.size() - pos != w * h * channels) throw std::runtime_error(path.string() + ": truncated pixel data");
    Image img{channels, h, w, std::vector<double>(channels * h * w)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                img.at(c, y, x) = static_cast<unsigned char>(bytes[pos + (y * w + x) * channels + c]) / 255.0;
    return img;
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn fn) {
    jobs = std::max(1u, jobs);
    if (jobs == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(jobs);
    for (unsigned j = 0; j < jobs; ++j) {
        workers.emplace_back([&, j] {
            try {
                for (std::size_t i = j; i < n; i += jobs) fn(i);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct PendingSample {
    fs::path dir;
    std::string id;
    ShapeClass cls;
    const DomainStyle* style;
    std::uint64_t seed;
};

json episodes_json(const std::vector<EpisodeSpec>& eps) {
    json arr = json::array();
    for (const auto& e : eps) arr.push_back({{"id", e.id}, {"class", e.class_id}, {"supports", e.supports}, {"query", e.query}});
    return arr;
}

std::vector<EpisodeSpec> draw_episodes(const DatasetManifest& m, std::size_t shots, std::size_t count) {
    Rng rng(derive_seed(m.seed, kEpisodeTag, shots));
    std::vector<EpisodeSpec> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto& cls = m.test_classes[i % m.test_classes.size()];
        std::vector<std::size_t> idx(m.test_pool_per_class);
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
        for (std::size_t k = 0; k <= shots; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
            std::swap(idx[k], idx[pick(rng)]);
        }
        EpisodeSpec e;
        std::ostringstream id;
        id << shots << "shot-" << std::setw(4) << std::setfill('0') << i;
        e.id = id.str();
        e.class_id = cls.id;
        for (std::size_t k = 0; k < shots; ++k) e.supports.push_back(sample_id(idx[k]));
        e.query = sample_id(idx[shots]);
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t h = splitmix64(base);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    return splitmix64(h ^ c);
}

std::string sample_id(std::size_t index) {
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << index;
    return os.str();
}

void DomainStyle::validate() const {
    if (id.empty()) throw std::invalid_argument("style id must not be empty");
    for (double g : gain)
        if (!(g > 0.0)) throw std::invalid_argument("style " + id + ": gain must be positive");
    if (!(gamma >= 0.3 && gamma <= 3.0)) throw std::invalid_argument("style " + id + ": gamma must lie in [0.3, 3]");
    if (!(texture_frequency > 0.0)) throw std::invalid_argument("style " + id + ": texture frequency must be positive");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("style " + id + ": noise std must be >= 0");
}

DomainStyle identity_style(const std::string& id) {
    DomainStyle s;
    s.id = id;
    return s;
}

std::string to_string(ShapeKind kind) { return kind_names().at(kind); }

ShapeKind shape_kind_from_string(const std::string& s) {
    for (const auto& [k, name] : kind_names())
        if (name == s) return k;
    throw std::invalid_argument("unknown shape kind '" + s + "'");
}

void apply_style(Image& image, const DomainStyle& style, Rng& rng) {
    std::normal_distribution<double> noise(0.0, style.noise_std > 0.0 ? style.noise_std : 1.0);
    const bool noisy = style.noise_std > 0.0;
    for (std::size_t c = 0; c < image.channels; ++c) {
        const double g = style.gain[c % 3];
        const double b = style.bias[c % 3];
        for (std::size_t i = 0; i < image.height * image.width; ++i) {
            double& v = image.pixels[c * image.height * image.width + i];
            double x = style.gamma == 1.0 ? v : std::pow(v, style.gamma);
            x = g * x + b;
            if (noisy) x += noise(rng);
            v = std::clamp(x, 0.0, 1.0);
        }
    }
}

RenderedSample render_sample(const ShapeClass& cls, const DomainStyle& style, Rng& rng, const RenderLimits& limits) {
    style.validate();
    if (limits.size < 32) throw std::invalid_argument("render_sample: image size must be >= 32");
    RenderedSample out;
    for (int attempt = 0; attempt < limits.max_attempts; ++attempt) {
        if (render_content(cls, style.texture_frequency, rng, limits, out)) {
            apply_style(out.image, style, rng);
            return out;
        }
    }
    throw std::runtime_error("render_sample: no valid " + to_string(cls.kind) + " within retry budget");
}

void DatasetManifest::validate() const {
    if (image_size < 32) throw std::invalid_argument("manifest: image_size must be >= 32");
    if (feature_stride == 0 || image_size % feature_stride != 0) {
        throw std::invalid_argument("manifest: image_size must be a multiple of feature_stride");
    }
    if (!(min_foreground > 0.0 && min_foreground < max_foreground && max_foreground < 1.0)) {
        throw std::invalid_argument("manifest: foreground bounds must satisfy 0 < min < max < 1");
    }
    if (train_classes.empty() || test_classes.empty()) throw std::invalid_argument("manifest: empty class list");
    std::set<int> train_ids;
    std::set<ShapeKind> train_kinds;
    for (const auto& c : train_classes) {
        train_ids.insert(c.id);
        train_kinds.insert(c.kind);
    }
    std::set<int> seen;
    for (const auto& c : test_classes) {
        if (train_ids.count(c.id) || train_kinds.count(c.kind)) {
            throw std::invalid_argument("manifest: train and test classes must be disjoint (class " + std::to_string(c.id) + ")");
        }
        seen.insert(c.id);
    }
    if (train_ids.size() != train_classes.size() || seen.size() != test_classes.size()) {
        throw std::invalid_argument("manifest: duplicate class ids");
    }
    source.validate();
    if (targets.empty()) throw std::invalid_argument("manifest: no target styles");
    std::set<std::string> style_ids{source.id};
    for (const auto& t : targets) {
        t.validate();
        if (t.id == source.id) throw std::invalid_argument("manifest: source style must not be a test style");
        if (!style_ids.insert(t.id).second) throw std::invalid_argument("manifest: duplicate style id " + t.id);
    }
    if (train_samples < train_classes.size()) throw std::invalid_argument("manifest: too few training samples");
    for (auto k : shots) {
        if (k == 0 || k + 1 > test_pool_per_class) {
            throw std::invalid_argument("manifest: shot count " + std::to_string(k) + " does not fit the test pool");
        }
    }
}

RenderLimits DatasetManifest::limits() const {
    RenderLimits l;
    l.size = image_size;
    l.min_foreground = min_foreground;
    l.max_foreground = max_foreground;
    l.feature_stride = feature_stride;
    return l;
}

DatasetManifest default_manifest() {
    DatasetManifest m;
    const std::array<ShapeKind, 8> train{ShapeKind::Circle, ShapeKind::Square,  ShapeKind::Triangle, ShapeKind::Cross,
                                         ShapeKind::Ring,   ShapeKind::Bar,     ShapeKind::Diamond,  ShapeKind::Ellipse};
    const std::array<ShapeKind, 4> test{ShapeKind::Star, ShapeKind::Hexagon, ShapeKind::LShape, ShapeKind::Crescent};
    int id = 0;
    for (auto k : train) m.train_classes.push_back({id++, k});
    for (auto k : test) m.test_classes.push_back({id++, k});

    m.source = identity_style("source");
    m.source.noise_std = 0.02;

    DomainStyle mild;
    mild.id = "target-mild";
    mild.gain = {0.85, 0.95, 1.1};
    mild.bias = {0.05, 0.0, -0.05};
    mild.gamma = 1.25;
    mild.texture_frequency = 1.3;
    mild.noise_std = 0.03;

    DomainStyle medium;
    medium.id = "target-medium";
    medium.gain = {0.5, 0.5, 0.5};
    medium.bias = {0.42, 0.38, 0.45};
    medium.gamma = 0.6;
    medium.texture_frequency = 1.6;
    medium.noise_std = 0.04;

    DomainStyle strong;
    strong.id = "target-strong";
    strong.gain = {0.35, 0.3, 0.4};
    strong.bias = {0.02, 0.05, 0.0};
    strong.gamma = 1.8;
    strong.texture_frequency = 2.0;
    strong.noise_std = 0.06;

    m.targets = {mild, medium, strong};
    return m;
}

void to_json(json& j, const DomainStyle& s) {
    j = json{{"id", s.id}, {"gain", s.gain}, {"bias", s.bias}, {"gamma", s.gamma},
             {"texture_frequency", s.texture_frequency}, {"noise_std", s.noise_std}};
}

void from_json(const json& j, DomainStyle& s) {
    s.id = j.at("id").get<std::string>();
    s.gain = j.value("gain", std::array<double, 3>{1.0, 1.0, 1.0});
    s.bias = j.value("bias", std::array<double, 3>{0.0, 0.0, 0.0});
    s.gamma = j.value("gamma", 1.0);
    s.texture_frequency = j.value("texture_frequency", 1.0);
    s.noise_std = j.value("noise_std", 0.0);
}

void to_json(json& j, const ShapeClass& c) {
    j = json{{"id", c.id}, {"kind", to_string(c.kind)}, {"min_size", c.min_size}, {"max_size", c.max_size}};
}

void from_json(const json& j, ShapeClass& c) {
    c.id = j.at("id").get<int>();
    c.kind = shape_kind_from_string(j.at("kind").get<std::string>());
    c.min_size = j.value("min_size", 0.14);
    c.max_size = j.value("max_size", 0.34);
}

void to_json(json& j, const DatasetManifest& m) {
    j = json{{"seed", m.seed},
             {"image_size", m.image_size},
             {"feature_stride", m.feature_stride},
             {"min_foreground", m.min_foreground},
             {"max_foreground", m.max_foreground},
             {"train_classes", m.train_classes},
             {"test_classes", m.test_classes},
             {"source", m.source},
             {"targets", m.targets},
             {"train_samples", m.train_samples},
             {"test_pool_per_class", m.test_pool_per_class},
             {"test_episodes", m.test_episodes},
             {"shots", m.shots},
             {"val_episodes", m.val_episodes}};
}

void from_json(const json& j, DatasetManifest& m) {
    DatasetManifest d = default_manifest();
    m.seed = j.value("seed", d.seed);
    m.image_size = j.value("image_size", d.image_size);
    m.feature_stride = j.value("feature_stride", d.feature_stride);
    m.min_foreground = j.value("min_foreground", d.min_foreground);
    m.max_foreground = j.value("max_foreground", d.max_foreground);
    m.train_classes = j.contains("train_classes") ? j.at("train_classes").get<std::vector<ShapeClass>>() : d.train_classes;
    m.test_classes = j.contains("test_classes") ? j.at("test_classes").get<std::vector<ShapeClass>>() : d.test_classes;
    m.source = j.contains("source") ? j.at("source").get<DomainStyle>() : d.source;
    m.targets = j.contains("targets") ? j.at("targets").get<std::vector<DomainStyle>>() : d.targets;
    m.train_samples = j.value("train_samples", d.train_samples);
    m.test_pool_per_class = j.value("test_pool_per_class", d.test_pool_per_class);
    m.test_episodes = j.value("test_episodes", d.test_episodes);
    m.shots = j.value("shots", d.shots);
    m.val_episodes = j.value("val_episodes", d.val_episodes);
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest " + path.string());
    DatasetManifest m = json::parse(f).get<DatasetManifest>();
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
    write_file(path, json(m).dump(2) + "\n");
}

void write_ppm(const Image& rgb, const fs::path& path) {
    if (rgb.channels != 3) throw std::invalid_argument("write_ppm expects 3 channels");
    std::string bytes = "P6\n" + std::to_string(rgb.width) + " " + std::to_string(rgb.height) + "\n255\n";
    bytes.reserve(bytes.size() + rgb.pixels.size());
    for (std::size_t y = 0; y < rgb.height; ++y)
        for (std::size_t x = 0; x < rgb.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) bytes.push_back(static_cast<char>(to_byte(rgb.at(c, y, x))));
    write_file(path, bytes);
}

void write_pgm(const Image& mask, const fs::path& path) {
    if (mask.channels != 1) throw std::invalid_argument("write_pgm expects 1 channel");
    std::string bytes = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
    for (double v : mask.pixels) bytes.push_back(static_cast<char>(v > 0.5 ? 255 : 0));
    write_file(path, bytes);
}

Image read_ppm(const fs::path& path) { return read_netpbm(path, "P6", 3); }

Image read_pgm_mask(const fs::path& path) {
    Image m = read_netpbm(path, "P5", 1);
    for (auto& v : m.pixels) v = v > 0.5 ? 1.0 : 0.0;
    return m;
}

std::string content_hash(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::vector<std::pair<std::string, fs::path>> keyed;
    for (const auto& f : files) keyed.emplace_back(fs::relative(f, root).generic_string(), f);
    std::sort(keyed.begin(), keyed.end());
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto feed = [&h](const std::string& s) {
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001B3ull;
        }
    };
    for (const auto& [rel, path] : keyed) {
        feed(rel);
        feed(std::string(1, '\0'));
        feed(read_file(path));
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

BenchmarkSummary build_benchmark(const DatasetManifest& manifest, const fs::path& root, bool dry_run, unsigned jobs) {
    manifest.validate();
    std::vector<PendingSample> pending;
    BenchmarkSummary summary;

    const std::size_t n_train = manifest.train_classes.size();
    for (std::size_t ci = 0; ci < n_train; ++ci) {
        const auto& cls = manifest.train_classes[ci];
        const std::size_t count = manifest.train_samples / n_train + (ci < manifest.train_samples % n_train ? 1 : 0);
        for (std::size_t i = 0; i < count; ++i) {
            pending.push_back({root / "train" / manifest.source.id / std::to_string(cls.id), sample_id(i), cls,
                               &manifest.source, derive_seed(manifest.seed, kTrainTag, static_cast<std::uint64_t>(cls.id), i)});
        }
    }
    summary.train_files = 2 * pending.size();

    // The same test-pool seeds render every evaluation style.
    auto add_eval = [&](const std::string& split, const DomainStyle& style) {
        for (const auto& cls : manifest.test_classes)
            for (std::size_t i = 0; i < manifest.test_pool_per_class; ++i)
                pending.push_back({root / split / style.id / std::to_string(cls.id), sample_id(i), cls, &style,
                                   derive_seed(manifest.seed, kTestTag, static_cast<std::uint64_t>(cls.id), i)});
    };
    for (const auto& t : manifest.targets) add_eval("test", t);
    summary.test_files = 2 * (pending.size() - summary.train_files / 2);
    add_eval("val", manifest.source);
    summary.val_files = 2 * manifest.test_classes.size() * manifest.test_pool_per_class;

    std::map<std::size_t, std::vector<EpisodeSpec>> test_eps;
    std::map<std::size_t, std::vector<EpisodeSpec>> val_eps;
    for (auto k : manifest.shots) {
        test_eps[k] = draw_episodes(manifest, k, manifest.test_episodes);
        val_eps[k] = draw_episodes(manifest, k, manifest.val_episodes);
        summary.episodes += manifest.test_episodes * manifest.targets.size() + manifest.val_episodes;
    }
    if (dry_run) return summary;

    const RenderLimits limits = manifest.limits();
    parallel_for(pending.size(), jobs, [&](std::size_t i) {
        const auto& p = pending[i];
        Rng rng(p.seed);
        auto sample = render_sample(p.cls, *p.style, rng, limits);
        write_ppm(sample.image, p.dir / (p.id + ".ppm"));
        write_pgm(sample.mask, p.dir / (p.id + ".pgm"));
    });

    auto write_episodes = [&](const fs::path& dir, const std::map<std::size_t, std::vector<EpisodeSpec>>& eps) {
        json j = json::object();
        for (const auto& [k, list] : eps) j[std::to_string(k)] = episodes_json(list);
        write_file(dir / "episodes.json", j.dump(1) + "\n");
    };
    for (const auto& t : manifest.targets) write_episodes(root / "test" / t.id, test_eps);
    write_episodes(root / "val" / manifest.source.id, val_eps);
    save_manifest(manifest, root / "manifest.json");
    summary.content_hash = content_hash(root);
    return summary;
}

// ---------------------------------------------------------------------------

Benchmark::Benchmark(fs::path root) : root_(std::move(root)) {
    manifest_ = load_manifest(root_ / "manifest.json");
}

const std::vector<StoredSample>& Benchmark::train_pool() {
    if (train_loaded_) return train_;
    const std::size_t n_train = manifest_.train_classes.size();
    for (std::size_t ci = 0; ci < n_train; ++ci) {
        const auto& cls = manifest_.train_classes[ci];
        const std::size_t count = manifest_.train_samples / n_train + (ci < manifest_.train_samples % n_train ? 1 : 0);
        const fs::path dir = root_ / "train" / manifest_.source.id / std::to_string(cls.id);
        for (std::size_t i = 0; i < count; ++i) {
            StoredSample s;
            s.class_id = cls.id;
            s.id = sample_id(i);
            s.image = read_ppm(dir / (s.id + ".ppm"));
            s.mask = read_pgm_mask(dir / (s.id + ".pgm"));
            train_.push_back(std::move(s));
        }
    }
    train_loaded_ = true;
    return train_;
}

std::string Benchmark::split_of(const std::string& style) const {
    if (style == manifest_.source.id) return "val";
    for (const auto& t : manifest_.targets)
        if (t.id == style) return "test";
    throw std::invalid_argument("unknown style '" + style + "'");
}

std::vector<EpisodeSpec> Benchmark::episodes(const std::string& style, std::size_t shots) const {
    const fs::path path = root_ / split_of(style) / style / "episodes.json";
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const json j = json::parse(f);
    const std::string key = std::to_string(shots);
    if (!j.contains(key)) {
        throw std::invalid_argument("no " + key + "-shot episodes for style " + style + " (available supports do not cover this shot count)");
    }
    std::vector<EpisodeSpec> out;
    for (const auto& e : j.at(key)) {
        out.push_back({e.at("id").get<std::string>(), e.at("class").get<int>(), e.at("supports").get<std::vector<std::string>>(),
                       e.at("query").get<std::string>()});
    }
    return out;
}

const StoredSample& Benchmark::sample(const std::string& style, int class_id, const std::string& id) {
    const std::string key = style + "/" + std::to_string(class_id) + "/" + id;
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const fs::path dir = root_ / split_of(style) / style / std::to_string(class_id);
    StoredSample s;
    s.class_id = class_id;
    s.id = id;
    s.image = read_ppm(dir / (id + ".ppm"));
    s.mask = read_pgm_mask(dir / (id + ".pgm"));
    return cache_.emplace(key, std::move(s)).first->second;
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw std::invalid_argument("images_to_tensor: no images");
    const Image& first = *images.front();
    std::vector<T> data;
    data.reserve(images.size() * first.pixels.size());
    for (const auto* img : images) {
        if (img->channels != first.channels || img->height != first.height || img->width != first.width) {
            throw DimensionError("images_to_tensor: inconsistent image sizes");
        }
        for (double v : img->pixels) data.push_back(static_cast<T>(v));
    }
    return Tensor<T>(Shape{images.size(), first.channels, first.height, first.width}, std::move(data));
}

template <typename T>
Episode<T> make_episode(const std::string& id, int class_id, const std::string& style,
                        const std::vector<const StoredSample*>& supports, const StoredSample& query) {
    std::vector<const Image*> imgs;
    std::vector<const Image*> masks;
    for (const auto* s : supports) {
        imgs.push_back(&s->image);
        masks.push_back(&s->mask);
    }
    Episode<T> e;
    e.id = id;
    e.class_id = class_id;
    e.style_id = style;
    e.support_images = images_to_tensor<T>(imgs);
    e.support_masks = images_to_tensor<T>(masks);
    e.query_image = images_to_tensor<T>({&query.image});
    e.query_mask = images_to_tensor<T>({&query.mask});
    return e;
}

template <typename T>
Episode<T> sample_train_episode(const std::vector<StoredSample>& pool, std::size_t shots, Rng& rng, const std::string& style) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].class_id].push_back(i);
    std::vector<int> classes;
    for (const auto& [c, idx] : by_class)
        if (idx.size() > shots) classes.push_back(c);
    if (classes.empty()) throw std::invalid_argument("training pool has no class with enough samples");
    std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);
    const int cls = classes[pick_class(rng)];
    auto idx = by_class[cls];
    for (std::size_t k = 0; k <= shots; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
        std::swap(idx[k], idx[pick(rng)]);
    }
    std::vector<const StoredSample*> supports;
    for (std::size_t k = 0; k < shots; ++k) supports.push_back(&pool[idx[k]]);
    return make_episode<T>("train", cls, style, supports, pool[idx[shots]]);
}

template Tensor<float> images_to_tensor<float>(const std::vector<const Image*>&);
template Tensor<double> images_to_tensor<double>(const std::vector<const Image*>&);
template Episode<float> make_episode<float>(const std::string&, int, const std::string&, const std::vector<const StoredSample*>&,
                                            const StoredSample&);
template Episode<double> make_episode<double>(const std::string&, int, const std::string&,
                                              const std::vector<const StoredSample*>&, const StoredSample&);
template Episode<float> sample_train_episode<float>(const std::vector<StoredSample>&, std::size_t, Rng&, const std::string&);
template Episode<double> sample_train_episode<double>(const std::vector<StoredSample>&, std::size_t, Rng&, const std::string&);

}  // namespace stylebend
