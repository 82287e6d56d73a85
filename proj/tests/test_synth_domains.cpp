#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "stylebend/synth_domains.hpp"

using namespace stylebend;
namespace fs = std::filesystem;

namespace {

double foreground_fraction(const Image& mask) {
    double s = 0.0;
    for (double v : mask.pixels) s += v;
    return s / static_cast<double>(mask.pixels.size());
}

}  // namespace

TEST_CASE("identity style leaves a render untouched") {
    const auto m = default_manifest();
    for (const auto& cls : m.train_classes) {
        Rng a(derive_seed(1, cls.id)), b(derive_seed(1, cls.id));
        auto plain = render_sample(cls, identity_style("id"), a);
        auto copy = plain.image;
        Rng c(5);
        apply_style(copy, identity_style("id"), c);
        CHECK(copy == plain.image);
        CHECK(c == Rng(5));
        CHECK(render_sample(cls, identity_style("id"), b).image == plain.image);
    }
}

TEST_CASE("every class renders within the foreground bounds") {
    const auto m = default_manifest();
    const auto limits = m.limits();
    std::vector<ShapeClass> all = m.train_classes;
    all.insert(all.end(), m.test_classes.begin(), m.test_classes.end());
    for (const auto& cls : all) {
        for (std::uint64_t i = 0; i < 10; ++i) {
            Rng rng(derive_seed(7, cls.id, i));
            auto s = render_sample(cls, m.targets.back(), rng, limits);
            CHECK(s.image.channels == 3);
            CHECK(s.mask.channels == 1);
            const double fg = foreground_fraction(s.mask);
            CHECK(fg >= limits.min_foreground);
            CHECK(fg <= limits.max_foreground);
            for (double v : s.image.pixels) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
            for (double v : s.mask.pixels) CHECK((v == 0.0 || v == 1.0));
            // Foreground survives nearest downsampling to the feature grid.
            const std::size_t g = limits.size / limits.feature_stride;
            bool kept = false;
            for (std::size_t y = 0; y < g; ++y)
                for (std::size_t x = 0; x < g; ++x) {
                    const std::size_t sy = (2 * y + 1) * limits.size / (2 * g);
                    const std::size_t sx = (2 * x + 1) * limits.size / (2 * g);
                    kept |= s.mask.at(0, sy, sx) > 0.5;
                }
            CHECK(kept);
        }
    }
}

TEST_CASE("styles change pixels but never masks") {
    const auto m = default_manifest();
    const auto& cls = m.test_classes[0];
    Rng r0(11);
    auto base = render_sample(cls, m.source, r0);
    for (const auto& t : m.targets) {
        Rng r(11);
        auto styled = render_sample(cls, t, r);
        CHECK(styled.mask == base.mask);
        CHECK_FALSE(styled.image == base.image);
    }
}

TEST_CASE("style and manifest validation") {
    DomainStyle s = identity_style("x");
    CHECK_NOTHROW(s.validate());
    s.gamma = 0.1;
    CHECK_THROWS(s.validate());
    s = identity_style("");
    CHECK_THROWS(s.validate());

    auto m = default_manifest();
    CHECK_NOTHROW(m.validate());
    auto overlap = m;
    overlap.test_classes[0].id = overlap.train_classes[0].id;
    CHECK_THROWS(overlap.validate());
    auto same_style = m;
    same_style.targets[0].id = m.source.id;
    CHECK_THROWS(same_style.validate());
    auto big_shot = m;
    big_shot.shots = {m.test_pool_per_class};
    CHECK_THROWS(big_shot.validate());
    auto bad_size = m;
    bad_size.image_size = 60;
    CHECK_THROWS(bad_size.validate());
}

TEST_CASE("manifest json round trip") {
    sbtest::TempDir dir("manifest");
    auto m = sbtest::tiny_manifest();
    save_manifest(m, dir / "manifest.json");
    CHECK(load_manifest(dir / "manifest.json") == m);
    std::ofstream(dir / "bad.json") << "{\"image_size\": 33}";
    CHECK_THROWS(load_manifest(dir / "bad.json"));
    CHECK_THROWS(load_manifest(dir / "missing.json"));
}

TEST_CASE("netpbm round trip") {
    sbtest::TempDir dir("pnm");
    Image rgb{3, 2, 3, {0, 1, 0.5, 0.2, 0.4, 0.6, 1, 1, 1, 0, 0, 0, 0.1, 0.9, 0.3, 0.7, 0.8, 0.2}};
    write_ppm(rgb, dir / "a.ppm");
    auto back = read_ppm(dir / "a.ppm");
    CHECK(back.channels == 3);
    CHECK(back.height == 2);
    CHECK(back.width == 3);
    for (std::size_t i = 0; i < rgb.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - rgb.pixels[i]) <= 0.5 / 255.0 + 1e-12);
    Image mask{1, 2, 2, {1, 0, 0, 1}};
    write_pgm(mask, dir / "m.pgm");
    CHECK(read_pgm_mask(dir / "m.pgm") == mask);
    CHECK_THROWS(read_ppm(dir / "m.pgm"));
}

TEST_CASE("benchmark generation is deterministic and job-independent") {
    sbtest::TempDir a("bench-a"), b("bench-b");
    const auto m = sbtest::tiny_manifest();
    auto dry = build_benchmark(m, a / "dry", true);
    CHECK(dry.content_hash.empty());
    CHECK_FALSE(fs::exists(a / "dry"));
    CHECK(dry.train_files == 32);
    CHECK(dry.test_files == 2 * 2 * 2 * 6);
    CHECK(dry.val_files == 2 * 2 * 6);
    CHECK(dry.episodes == 2 * (6 * 2 + 4));

    auto s1 = build_benchmark(m, a / "d", false, 1);
    auto s4 = build_benchmark(m, b / "d", false, 4);
    CHECK(s1.content_hash.size() == 16);
    CHECK(s1.content_hash == s4.content_hash);
    CHECK(content_hash(a / "d") == s1.content_hash);
    // Regenerating over an existing tree gives the same bytes.
    CHECK(build_benchmark(m, a / "d", false, 2).content_hash == s1.content_hash);

    auto other = m;
    other.seed += 1;
    sbtest::TempDir c("bench-c");
    CHECK(build_benchmark(other, c / "d", false, 1).content_hash != s1.content_hash);
}

TEST_CASE("benchmark reader") {
    sbtest::TempDir dir("reader");
    const auto m = sbtest::tiny_manifest();
    build_benchmark(m, dir.path(), false, 2);
    Benchmark bench(dir.path());
    CHECK(bench.manifest() == m);
    const auto& pool = bench.train_pool();
    CHECK(pool.size() == m.train_samples);
    std::set<int> train_ids;
    for (const auto& s : pool) train_ids.insert(s.class_id);
    CHECK(train_ids == std::set<int>{0, 1});

    CHECK(bench.split_of(m.source.id) == "val");
    CHECK(bench.split_of(m.targets[0].id) == "test");
    CHECK_THROWS(bench.split_of("nope"));
    CHECK_THROWS(bench.episodes(m.targets[0].id, 5));

    for (const auto& t : m.targets) {
        auto eps = bench.episodes(t.id, 2);
        CHECK(eps.size() == m.test_episodes);
        for (const auto& e : eps) {
            CHECK(train_ids.count(e.class_id) == 0);
            CHECK(e.supports.size() == 2);
            CHECK(std::find(e.supports.begin(), e.supports.end(), e.query) == e.supports.end());
        }
    }
    // Episode lists agree across target styles.
    auto e0 = bench.episodes(m.targets[0].id, 1);
    auto e1 = bench.episodes(m.targets[1].id, 1);
    for (std::size_t i = 0; i < e0.size(); ++i) {
        CHECK(e0[i].query == e1[i].query);
        CHECK(e0[i].supports == e1[i].supports);
    }
    // Same content across styles: masks identical.
    const auto& a = bench.sample(m.targets[0].id, 8, sample_id(0));
    const auto& b = bench.sample(m.targets[1].id, 8, sample_id(0));
    const auto& v = bench.sample(m.source.id, 8, sample_id(0));
    CHECK(a.mask == b.mask);
    CHECK(a.mask == v.mask);

    std::vector<const StoredSample*> sup{&a};
    auto ep = make_episode<double>("x", 8, m.targets[0].id, sup, b);
    CHECK(ep.support_images.shape() == Shape{1, 3, 32, 32});
    CHECK_NOTHROW(ep.validate());

    Rng rng(3);
    auto tr = sample_train_episode<double>(pool, 2, rng, m.source.id);
    CHECK(tr.shots() == 2);
    CHECK(train_ids.count(tr.class_id) == 1);
}

TEST_CASE("derived seeds") {
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
    CHECK(derive_seed(1, 2) != derive_seed(2, 2));
    CHECK(sample_id(7) == "000007");
}
