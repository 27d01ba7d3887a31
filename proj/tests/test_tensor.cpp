#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cape/tensor.hpp"

using namespace cape;

TEST_CASE("matmul identity and hand-computed product") {
    Tensor x({3, 1}, {1.0, -2.0, 0.5});
    Tensor y = matmul(Tensor::identity(3), x);
    REQUIRE(y.data() == x.data());

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c.at(0, 0) == 3.0);
    REQUIRE(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a({2, 3}, std::vector<double>(6, 1.0));
    Tensor b({2, 2}, std::vector<double>(4, 1.0));
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2x3]") != std::string::npos);
        REQUIRE(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    auto rnd = [&rng](std::vector<std::size_t> shape) {
        std::vector<double> d(Tensor::numel(shape));
        for (auto& v : d) v = rng.normal();
        return Tensor(shape, std::move(d));
    };
    Tensor a = rnd({3, 4});
    Tensor b = rnd({4, 2});
    auto f = [](Tape*, const std::vector<Tensor>& p) { return sum(matmul(p[0], p[1])); };
    REQUIRE(grad_check(f, {a, b}, 1e-5) < 1e-6);
}

TEST_CASE("softmax basics") {
    Tensor x({2, 1}, {0.0, 0.0});
    Tensor y = softmax(x, 0);
    REQUIRE(y[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(y[1] == Catch::Approx(0.5).margin(1e-15));

    Tensor z({3, 1}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor s = softmax(z, 0);
    REQUIRE(s[0] == Catch::Approx(1.0 / 6.0).margin(1e-14));
    REQUIRE(s[1] == Catch::Approx(2.0 / 6.0).margin(1e-14));
    REQUIRE(s[2] == Catch::Approx(3.0 / 6.0).margin(1e-14));
}

TEST_CASE("softmax shift invariance and normalization") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> d(12);
        for (auto& v : d) v = rng.uniform(-5, 5);
        Tensor x({3, 4}, d);
        for (auto& v : d) v += 2.75;
        Tensor xs({3, 4}, d);
        Tensor a = softmax(x, 0), b = softmax(xs, 0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(std::abs(a[i] - b[i]) < 1e-12);
            REQUIRE(a[i] >= 0.0);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            double col = 0.0;
            for (std::size_t i = 0; i < 3; ++i) col += a.at(i, j);
            REQUIRE(std::abs(col - 1.0) < 1e-12);
        }
        Tensor r = softmax(x, 1);
        for (std::size_t i = 0; i < 3; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < 4; ++j) row += r.at(i, j);
            REQUIRE(std::abs(row - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x({2, 1}, {0.0, std::nan("")});
    REQUIRE_THROWS_AS(softmax(x, 0), Error);
}

TEST_CASE("mlp2 zero params and identity passthrough") {
    Mlp2 zero;
    zero.w1 = Tensor::zeros({4, 3});
    zero.b1 = Tensor::zeros({4});
    zero.w2 = Tensor::zeros({2, 4});
    zero.b2 = Tensor::zeros({2});
    Tensor x({3, 5}, std::vector<double>(15, 1.5));
    Tensor y = zero.forward(x);
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);

    Mlp2 id;
    id.w1 = Tensor::identity(3);
    id.b1 = Tensor::zeros({3});
    id.w2 = Tensor::identity(3);
    id.b2 = Tensor::zeros({3});
    id.act = Activation::Identity;
    Tensor x2({3, 2}, {1, -2, 3, -4, 5, -6});
    Tensor y2 = id.forward(x2);
    REQUIRE(y2.data() == x2.data());
}

TEST_CASE("mlp2 gradient w.r.t. all params matches finite differences") {
    Rng rng(3);
    Mlp2 m = Mlp2::init(3, 5, 2, rng);
    std::vector<double> xd(9);
    for (auto& v : xd) v = rng.normal();
    Tensor x({3, 3}, xd);
    auto f = [&x](Tape*, const std::vector<Tensor>& p) {
        Mlp2 m2;
        m2.w1 = p[0];
        m2.b1 = p[1];
        m2.w2 = p[2];
        m2.b2 = p[3];
        return sum(m2.forward(x));
    };
    REQUIRE(grad_check(f, {m.w1, m.b1, m.w2, m.b2}, 1e-5) < 1e-6);
}

TEST_CASE("grad_check on x squared") {
    Tensor x(3.0);
    Tape tape;
    Tensor xt = tape.leaf(x);
    Tensor loss = mul(xt, xt);
    tape.backward(loss);
    REQUIRE(tape.grad(xt).item() == Catch::Approx(6.0).margin(1e-12));
    auto f = [](Tape*, const std::vector<Tensor>& p) { return mul(p[0], p[0]); };
    REQUIRE(grad_check(f, {x}, 1e-5) < 1e-9);
}

TEST_CASE("grad_check rejects non-scalar objective") {
    auto f = [](Tape*, const std::vector<Tensor>& p) { return p[0]; };
    REQUIRE_THROWS_AS(grad_check(f, {Tensor({2}, {1.0, 2.0})}, 1e-5), ShapeError);
}

// Every differentiable primitive, randomized shapes, 20 seeds.
TEST_CASE("primitive op gradients pass finite-difference checks") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed + 100);
        const std::size_t r = 2 + rng.uniform_index(3);
        const std::size_t c = 2 + rng.uniform_index(3);
        auto rnd = [&rng](std::vector<std::size_t> shape, double lo = -2.0, double hi = 2.0) {
            std::vector<double> d(Tensor::numel(shape));
            for (auto& v : d) v = rng.uniform(lo, hi);
            return Tensor(shape, std::move(d));
        };
        Tensor a = rnd({r, c});
        Tensor b = rnd({r, c});
        Tensor v = rnd({r});
        Tensor w = rnd({c, r});
        Tensor pos = rnd({r, c}, 0.2, 2.0);

        struct Case {
            const char* name;
            std::function<Tensor(Tape*, const std::vector<Tensor>&)> f;
            std::vector<Tensor> params;
        };
        std::vector<Case> cases = {
            {"add", [](Tape*, const std::vector<Tensor>& p) { return sum(add(p[0], p[1])); }, {a, b}},
            {"sub", [](Tape*, const std::vector<Tensor>& p) { return sum(sub(p[0], p[1])); }, {a, b}},
            {"mul", [](Tape*, const std::vector<Tensor>& p) { return sum(mul(p[0], p[1])); }, {a, b}},
            {"matmul", [](Tape*, const std::vector<Tensor>& p) { return sum(matmul(p[0], p[1])); }, {a, w}},
            {"transpose", [](Tape*, const std::vector<Tensor>& p) { return sum(mul(transpose(p[0]), p[1])); }, {a, w}},
            {"colwise_add", [](Tape*, const std::vector<Tensor>& p) { return sum(mul(colwise_add(p[0], p[1]), p[0])); }, {a, v}},
            {"colwise_mul", [](Tape*, const std::vector<Tensor>& p) { return sum(mul(colwise_mul(p[0], p[1]), p[0])); }, {a, v}},
            {"sigmoid", [](Tape*, const std::vector<Tensor>& p) { return sum(sigmoid(p[0])); }, {a}},
            {"softplus", [](Tape*, const std::vector<Tensor>& p) { return sum(softplus(p[0])); }, {a}},
            {"pow2.5", [](Tape*, const std::vector<Tensor>& p) { return sum(pow_scalar(p[0], 2.5)); }, {pos}},
            {"softmax0", [](Tape*, const std::vector<Tensor>& p) { return sum(mul(softmax(p[0], 0), p[1])); }, {a, b}},
            {"softmax1", [](Tape*, const std::vector<Tensor>& p) { return sum(mul(softmax(p[0], 1), p[1])); }, {a, b}},
            {"layer_norm",
             [](Tape*, const std::vector<Tensor>& p) { return sum(mul(layer_norm(p[0], p[1], p[2]), p[0])); },
             {a, rnd({r}, 0.5, 1.5), rnd({r})}},
            {"concat_slice",
             [](Tape*, const std::vector<Tensor>& p) {
                 Tensor cc = concat_rows(p[0], p[1]);
                 return sum(mul(slice_rows(cc, 1, cc.rows() - 1), slice_rows(cc, 0, cc.rows() - 2)));
             },
             {a, b}},
            {"gather",
             [r](Tape*, const std::vector<Tensor>& p) {
                 std::vector<std::size_t> idx = {0, p[0].cols() - 1, 0};
                 return sum(gather_cols(p[0], idx));
             },
             {a}},
            {"mean_scalar",
             [](Tape*, const std::vector<Tensor>& p) { return mean(add_scalar(mul_scalar(p[0], 1.7), 0.3)); },
             {a}},
        };
        for (auto& cs : cases) {
            INFO("op " << cs.name << " seed " << seed);
            REQUIRE(grad_check(cs.f, cs.params, 1e-5) < 1e-5);
        }
    }
}

TEST_CASE("relu and abs gradients away from the kink") {
    Rng rng(42);
    std::vector<double> d(12);
    for (auto& v : d) {
        v = rng.uniform(0.2, 2.0);
        if (rng.uniform() < 0.5) v = -v;
    }
    Tensor x({3, 4}, d);
    auto frelu = [](Tape*, const std::vector<Tensor>& p) { return sum(relu(p[0])); };
    auto fabs_ = [](Tape*, const std::vector<Tensor>& p) { return sum(abs(p[0])); };
    REQUIRE(grad_check(frelu, {x}, 1e-5) < 1e-8);
    REQUIRE(grad_check(fabs_, {x}, 1e-5) < 1e-8);
}

TEST_CASE("forward results are bit-identical across runs") {
    auto run = [] {
        Rng rng(5);
        Mlp2 m = Mlp2::init(4, 8, 4, rng);
        std::vector<double> xd(16);
        for (auto& v : xd) v = rng.normal();
        Tensor x({4, 4}, xd);
        return softmax(m.forward(x), 0).data();
    };
    REQUIRE(run() == run());
}

TEST_CASE("tape visits reachable nodes once and accumulates fan-out") {
    Tape tape;
    Tensor x = tape.leaf(Tensor(2.0));
    Tensor y = add(x, x);        // dy/dx = 2
    Tensor z = mul(y, x);        // z = 2x^2, dz/dx = 4x = 8
    Tensor unused = mul_scalar(x, 100.0);
    (void)unused;
    tape.backward(z);
    REQUIRE(tape.grad(x).item() == Catch::Approx(8.0).margin(1e-12));
    // Gradient shape mirrors value shape for every reachable node.
    REQUIRE(tape.grad(y).shape() == y.shape());
}

TEST_CASE("mixing tensors from two tapes is an error") {
    Tape t1, t2;
    Tensor a = t1.leaf(Tensor(1.0));
    Tensor b = t2.leaf(Tensor(2.0));
    REQUIRE_THROWS_AS(add(a, b), Error);
}
