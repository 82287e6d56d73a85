#include <doctest.h>

#include <cmath>
#include <cstring>

#include "stylebend/checkpoint.hpp"
#include "stylebend/ops.hpp"
#include "stylebend/optim.hpp"
#include "support.hpp"

using namespace stylebend;
using sbtest::make;
using sbtest::random_tensor;

TEST_CASE("conv2d of ones sums the window") {
    auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, w, Tensor<double>::zeros({1}), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 9.0);
}

TEST_CASE("1x1 unit kernel is the identity") {
    sbtest::Rng rng(1);
    auto x = random_tensor({2, 1, 5, 4}, rng);
    auto y = conv2d(x, Tensor<double>::full({1, 1, 1, 1}, 1.0), Tensor<double>(), 1, 0);
    CHECK(sbtest::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d matches the loop oracle") {
    sbtest::Rng rng(2);
    for (std::size_t pad : {0u, 1u}) {
        for (std::size_t stride : {1u, 2u}) {
            auto x = random_tensor({2, 3, 8, 8}, rng);
            auto w = random_tensor({4, 3, 3, 3}, rng);
            auto b = random_tensor({4}, rng);
            auto y = conv2d(x, w, b, stride, pad);
            auto ref = sbtest::conv_oracle(x, w, &b, stride, pad);
            REQUIRE(y.numel() == ref.size());
            CHECK(sbtest::max_abs_diff(y.values(), ref) < 1e-12);
        }
    }
}

TEST_CASE("conv2d rejects mismatched shapes") {
    auto x = Tensor<double>::zeros({1, 3, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensor<double>::zeros({2, 2, 3, 3}), Tensor<double>(), 1, 0), DimensionError);
    CHECK_THROWS_AS(conv2d(x, Tensor<double>::zeros({2, 3, 7, 7}), Tensor<double>(), 1, 1), DimensionError);
    CHECK_THROWS_AS(conv2d(x, Tensor<double>::zeros({2, 3, 3, 3}), Tensor<double>(), 0, 1), DimensionError);
}

TEST_CASE("elementwise basics") {
    auto r = relu(make({2}, {-1.0, 2.0}));
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[1] == 2.0);
    CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == 0.5);
    auto a = abs(make({3}, {-2.0, 0.0, 3.0}));
    CHECK(a.values()[0] == 2.0);
    CHECK(a.values()[2] == 3.0);
    CHECK(sqrt(Tensor<double>::scalar(9.0)).item() == 3.0);
}

TEST_CASE("channel vector broadcasts over a feature map") {
    auto m = mul(make({2}, {2.0, 3.0}), Tensor<double>::full({1, 2, 2, 2}, 1.0));
    CHECK(m.shape() == Shape{1, 2, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(m.values()[i] == 2.0);
        CHECK(m.values()[4 + i] == 3.0);
    }
    CHECK_THROWS_AS(add(make({3}, {1, 2, 3}), Tensor<double>::zeros({1, 2, 2, 2})), DimensionError);
}

TEST_CASE("non-finite results are errors") {
    CHECK_THROWS_AS(sqrt(Tensor<double>::scalar(-1.0)), NumericError);
    CHECK_THROWS_AS(div(Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.0)), NumericError);
    CHECK_THROWS_AS(make({1}, {std::nan("")}), NumericError);
}

TEST_CASE("spatial means") {
    CHECK(reduce_mean_hw(Tensor<double>::full({1, 1, 3, 3}, 4.25)).item() == 4.25);
    CHECK(reduce_mean_hw(make({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5);
    sbtest::Rng rng(3);
    auto x = random_tensor({3, 5, 7, 6}, rng);
    auto m = reduce_mean_hw(x);
    auto oracle = sbtest::stats_oracle(x, 1.0);
    CHECK(sbtest::max_abs_diff(m.values(), oracle.mu) < 1e-14);
    CHECK_THROWS_AS(reduce_mean_hw(Tensor<double>::zeros({1, 1, 0, 3})), DimensionError);
}

TEST_CASE("pooling") {
    auto x = make({1, 1, 2, 4}, {1, 2, 5, 6, 3, 4, 7, 9});
    auto avg = pool2d(x, PoolKind::Average, 2);
    CHECK(avg.values()[0] == 2.5);
    CHECK(avg.values()[1] == 6.75);
    auto mx = pool2d(x, PoolKind::Max, 2);
    CHECK(mx.values()[0] == 4.0);
    CHECK(mx.values()[1] == 9.0);
}

TEST_CASE("backward of simple losses") {
    sbtest::Rng rng(4);
    auto x = random_tensor({2, 3, 4}, rng, -1, 1, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    auto y = Tensor<double>::scalar(3.0, true);
    backward(sum(mul(y, y)));
    CHECK(y.grad()[0] == 6.0);
}

TEST_CASE("fan-out accumulates gradients") {
    auto x = Tensor<double>::scalar(2.0, true);
    backward(add(mul(x, x), scale(x, 3.0)));
    CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("backward preconditions") {
    auto x = Tensor<double>::full({2}, 1.0, true);
    CHECK_THROWS_AS(backward(scale(x, 2.0)), DimensionError);
    Tape<double>::current().clear();
    CHECK_THROWS(backward(Tensor<double>::scalar(1.0)));
}

TEST_CASE("backward consumes the tape") {
    auto x = Tensor<double>::scalar(1.5, true);
    auto loss = sum(square(x));
    CHECK_FALSE(Tape<double>::current().empty());
    backward(loss);
    CHECK(Tape<double>::current().empty());
}

TEST_CASE("backward is linear in the loss") {
    sbtest::Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = random_tensor({2, 3, 4, 4}, rng, 0.1, 1.0, true);
        auto f = [&]() { return sum(mul(sigmoid(x), x)); };
        auto g = [&]() { return reduce_mean_all(sqrt(add_scalar(square(x), 1.0))); };
        const double a = 1.7, b = -0.4;

        x.zero_grad();
        backward(f());
        std::vector<double> gf(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(g());
        std::vector<double> gg(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(add(scale(f(), a), scale(g(), b)));
        for (std::size_t i = 0; i < gf.size(); ++i) CHECK(std::abs(x.grad()[i] - (a * gf[i] + b * gg[i])) < 1e-10);
    }
}

TEST_CASE("forward and backward are deterministic") {
    auto run = []() {
        sbtest::Rng rng(6);
        auto x = random_tensor({2, 3, 8, 8}, rng, -1, 1, true);
        auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, true);
        auto y = pool2d(relu(conv2d(x, w, Tensor<double>(), 1, 1)), PoolKind::Average, 2);
        auto loss = reduce_mean_all(square(y));
        const double l = loss.item();
        backward(loss);
        std::vector<double> g(w.grad().begin(), w.grad().end());
        return std::make_pair(l, g);
    };
    auto a = run();
    auto b = run();
    CHECK(std::memcmp(&a.first, &b.first, sizeof(double)) == 0);
    CHECK(std::memcmp(a.second.data(), b.second.data(), a.second.size() * sizeof(double)) == 0);
}

TEST_CASE("finite differences agree with every op") {
    sbtest::Rng rng(7);
    using F = std::function<Tensor<double>()>;
    struct Case {
        const char* name;
        F f;
        std::vector<Tensor<double>> inputs;
    };
    auto a = random_tensor({2, 3, 4, 4}, rng, 0.2, 1.5);
    auto b = random_tensor({2, 3, 4, 4}, rng, 0.2, 1.5);
    auto c = random_tensor({3}, rng, 0.5, 1.5);
    auto w = random_tensor({2, 3, 3, 3}, rng);
    auto bias = random_tensor({2}, rng);
    auto lx = random_tensor({3, 5}, rng);
    auto lw = random_tensor({4, 5}, rng);
    auto lb = random_tensor({4}, rng);
    auto targets = make({1, 1, 2, 2}, {1, 0, 0, 1});
    auto logits = random_tensor({1, 1, 2, 2}, rng, -2, 2);
    auto small = random_tensor({1, 2, 3, 3}, rng);
    std::vector<Case> cases = {
        {"add", [&] { return sum(square(add(a, b))); }, {a, b}},
        {"sub", [&] { return sum(square(sub(a, c))); }, {a, c}},
        {"mul", [&] { return sum(mul(a, b)); }, {a, b}},
        {"div", [&] { return sum(div(a, b)); }, {a, b}},
        {"scale", [&] { return sum(square(scale(a, 0.3))); }, {a}},
        {"add_scalar", [&] { return sum(square(add_scalar(a, 0.7))); }, {a}},
        {"relu", [&] { return sum(square(relu(sub(a, b)))); }, {a, b}},
        {"sigmoid", [&] { return sum(sigmoid(a)); }, {a}},
        {"tanh", [&] { return sum(tanh(sub(a, b))); }, {a, b}},
        {"sqrt", [&] { return sum(sqrt(a)); }, {a}},
        {"abs", [&] { return sum(abs(sub(a, b))); }, {a, b}},
        {"mean_dims", [&] { return sum(square(mean_dims(a, {0, 2}))); }, {a}},
        {"sum_dims", [&] { return sum(square(sum_dims(a, {1, 3}))); }, {a}},
        {"reduce_mean_hw", [&] { return sum(square(reduce_mean_hw(a))); }, {a}},
        {"reshape+slice+concat",
         [&] { return sum(square(concat<double>({slice(reshape(a, {2, 48}), 1, 5, 10), slice(reshape(b, {2, 48}), 1, 0, 3)}, 1))); },
         {a, b}},
        {"linear", [&] { return sum(square(linear(lx, lw, lb))); }, {lx, lw, lb}},
        {"conv2d", [&] { return sum(square(conv2d(a, w, bias, 1, 1))); }, {a, w, bias}},
        {"conv2d stride", [&] { return sum(square(conv2d(a, w, bias, 2, 1))); }, {a, w, bias}},
        {"avg pool", [&] { return sum(square(pool2d(a, PoolKind::Average, 2))); }, {a}},
        {"max pool", [&] { return sum(square(pool2d(a, PoolKind::Max, 2))); }, {a}},
        {"upsample", [&] { return sum(mul(upsample_bilinear(small, 7, 5), upsample_bilinear(small, 7, 5))); }, {small}},
        {"bce", [&] { return bce_with_logits(logits, targets); }, {logits}},
    };
    for (auto& cs : cases) {
        CAPTURE(cs.name);
        auto r = sbtest::finite_difference_check(cs.f, cs.inputs);
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.skipped * 20 <= r.checked + r.skipped);
        Tape<double>::current().clear();
    }
}

TEST_CASE("sgd step examples") {
    auto p = Tensor<double>::scalar(1.0);
    std::vector<double> v(1, 0.0);
    std::vector<double> g{2.0};
    sgd_step<double>(p, g, v, 0.1, 0.0);
    CHECK(p.item() == doctest::Approx(0.8).epsilon(1e-15));

    auto q = Tensor<double>::scalar(0.0);
    std::vector<double> vq(1, 0.0);
    std::vector<double> one{1.0};
    sgd_step<double>(q, one, vq, 1.0, 0.9);
    sgd_step<double>(q, one, vq, 1.0, 0.9);
    CHECK(q.item() == doctest::Approx(-2.9).epsilon(1e-15));

    auto r = Tensor<double>::scalar(5.0);
    std::vector<double> vr(1, 0.0);
    std::vector<double> zero{0.0};
    sgd_step<double>(r, zero, vr, 0.5, 0.9);
    CHECK(r.item() == 5.0);

    std::vector<double> wrong{1.0, 2.0};
    CHECK_THROWS_AS(sgd_step<double>(r, wrong, vr, 0.5, 0.9), DimensionError);
    CHECK_THROWS(sgd_step<double>(r, zero, vr, 0.0, 0.9));
}

TEST_CASE("optimizer clips the joint gradient norm") {
    auto a = Tensor<double>::full({2}, 0.0, true);
    auto b = Tensor<double>::full({1}, 0.0, true);
    SgdOptimizer<double> opt({a, b}, 1.0, 0.0);
    backward(add(sum(scale(a, 3.0)), sum(scale(b, 4.0 * std::sqrt(2.0)))));
    // grads (3, 3, 4 sqrt 2): norm sqrt(9 + 9 + 32) = sqrt 50
    CHECK(opt.clip_grad_norm(1.0) == doctest::Approx(std::sqrt(50.0)));
    opt.step();
    const double n = std::sqrt(a.values()[0] * a.values()[0] * 2 + b.values()[0] * b.values()[0]);
    CHECK(n == doctest::Approx(1.0));
}

TEST_CASE("checkpoint byte layout") {
    Checkpoint ck;
    ck.put("w", make({2}, {1.0, -2.0}));
    ck.put<float>("f", Tensor<float>({1, 1}, {0.5f}));
    const std::string bytes = ck.encode();
    auto u32 = [&](std::size_t at) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
        return v;
    };
    CHECK(bytes.substr(0, 4) == "DRAD");
    CHECK(u32(4) == kCheckpointVersion);
    CHECK(u32(8) == 2);
    CHECK(u32(12) == 1);
    CHECK(bytes[16] == 'w');
    CHECK(u32(17) == 1);  // f64
    CHECK(u32(21) == 1);  // rank
    CHECK(u32(25) == 2);  // extent
    double first = 0.0;
    std::memcpy(&first, bytes.data() + 29, 8);
    CHECK(first == 1.0);
    const std::size_t f_at = 29 + 16;
    CHECK(u32(f_at) == 1);
    CHECK(bytes[f_at + 4] == 'f');
    CHECK(u32(f_at + 5) == 0);  // f32
    CHECK(u32(f_at + 9) == 2);
    CHECK(bytes.size() == f_at + 9 + 4 + 8 + 4);
}

TEST_CASE("checkpoint round trip and corruption") {
    Checkpoint ck;
    sbtest::Rng rng(8);
    ck.put("a", random_tensor({3, 2}, rng));
    ck.put<float>("b", Tensor<float>({4}, {1.f, 2.f, 3.f, 4.f}));
    auto back = Checkpoint::decode(ck.encode());
    CHECK(back == ck);
    CHECK(back.get<double>("a").shape() == Shape{3, 2});
    CHECK_THROWS_AS(back.get<double>("missing"), CheckpointError);

    std::string bad = ck.encode();
    bad[4] = 9;
    CHECK_THROWS_AS(Checkpoint::decode(bad), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::decode(ck.encode().substr(0, 20)), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::decode("XXXX"), CheckpointError);
}
