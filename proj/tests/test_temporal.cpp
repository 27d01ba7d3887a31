#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cape/temporal.hpp"

using namespace cape;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(Tensor::numel(shape));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor(shape, std::move(d));
}

Mlp2 const_mlp(std::size_t in, std::size_t out, const std::vector<double>& value) {
    Mlp2 m;
    m.w1 = Tensor::zeros({out, in});
    m.b1 = Tensor::zeros({out});
    m.w2 = Tensor::zeros({out, out});
    m.b2 = Tensor({out}, value);
    return m;
}

}  // namespace

TEST_CASE("ego motion embedding: determinism, zero params, distinct motions") {
    Rng rng(3);
    const std::size_t C = 6;
    TemporalParams p = TemporalParams::init(C, 4, rng);
    EgoMotion m(Mat4::from_rt(Mat3::rot_z(0.2), {1, 0, 0}), 0.5);
    Tensor a = ego_motion_embedding(p, m);
    Tensor b = ego_motion_embedding(p, m);
    REQUIRE(a.data() == b.data());
    REQUIRE(a.shape() == std::vector<std::size_t>{C});

    TemporalParams zero = p;
    zero.ego_mlp = const_mlp(12, C, std::vector<double>(C, 0.0));
    Tensor z = ego_motion_embedding(zero, m);
    for (std::size_t i = 0; i < z.size(); ++i) REQUIRE(z[i] == 0.0);

    EgoMotion m2(Mat4::from_rt(Mat3::rot_z(-0.4), {0, 2, 0}), 0.5);
    Tensor c = ego_motion_embedding(p, m2);
    double diff = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) diff = std::max(diff, std::abs(a[i] - c[i]));
    REQUIRE(diff > 1e-9);
}

TEST_CASE("channel-attention gates are a convex pair") {
    Rng rng(7);
    const std::size_t C = 5, M = 4;
    TemporalParams p = TemporalParams::init(C, M, rng);
    Tensor cur = random_tensor({C, M}, rng);
    Tensor prev = random_tensor({C, M}, rng);
    EgoMotion motion(Mat4::from_rt(Mat3::rot_z(0.1), {0.5, 0, 0}), 0.5);
    // all-ones ego modulation makes alignment the identity, so the fused
    // value must lie in the elementwise interval spanned by the two inputs.
    p.ego_mlp = const_mlp(12, C, std::vector<double>(C, 1.0));
    FusedQueries f = fuse_queries(p, cur, prev, motion);
    for (std::size_t i = 0; i < f.cur.size(); ++i) {
        const double lo = std::min(cur[i], prev[i]), hi = std::max(cur[i], prev[i]);
        REQUIRE(f.cur[i] >= lo - 1e-12);
        REQUIRE(f.cur[i] <= hi + 1e-12);
        REQUIRE(f.prev[i] >= lo - 1e-12);
        REQUIRE(f.prev[i] <= hi + 1e-12);
    }
}

TEST_CASE("gates frozen at (1,0) reproduce the current frame exactly") {
    Rng rng(11);
    const std::size_t C = 4, M = 3;
    TemporalParams p = TemporalParams::init(C, M, rng);
    // l1 - l2 = 200 saturates the pairwise softmax to exactly (1, 0).
    std::vector<double> logits(2 * C, 100.0);
    for (std::size_t i = C; i < 2 * C; ++i) logits[i] = -100.0;
    p.gate_mlp = const_mlp(2 * C, 2 * C, logits);
    Tensor cur = random_tensor({C, M}, rng);
    Tensor prev = random_tensor({C, M}, rng);
    EgoMotion motion(Mat4::from_rt(Mat3::rot_z(0.3), {1, 1, 0}), 0.5);
    FusedQueries f = fuse_queries(p, cur, prev, motion);
    REQUIRE(f.cur.data() == cur.data());
    REQUIRE(f.prev.data() == prev.data());
}

TEST_CASE("identical frames with identity motion fuse symmetrically") {
    Rng rng(13);
    const std::size_t C = 6, M = 2;
    TemporalParams p = TemporalParams::init(C, M, rng);
    Tensor o = random_tensor({C, M}, rng);
    EgoMotion ident;
    FusedQueries f = fuse_queries(p, o, o, ident);
    REQUIRE(f.cur.data() == f.prev.data());
}

TEST_CASE("concat+MLP fusion variant runs and differs from channel attention") {
    Rng rng(17);
    const std::size_t C = 4, M = 3;
    TemporalParams p = TemporalParams::init(C, M, rng);
    Tensor cur = random_tensor({C, M}, rng);
    Tensor prev = random_tensor({C, M}, rng);
    EgoMotion motion(Mat4::from_rt(Mat3::rot_z(-0.2), {0, 1, 0}), 0.5);
    FusedQueries att = fuse_queries(p, cur, prev, motion, FusionKind::ChannelAttention);
    FusedQueries cat = fuse_queries(p, cur, prev, motion, FusionKind::ConcatMlp);
    REQUIRE(att.cur.shape() == cat.cur.shape());
    REQUIRE(att.cur.data() != cat.cur.data());

    FusedQueries no_ego = fuse_queries(p, cur, prev, motion, FusionKind::ChannelAttention, false);
    REQUIRE(no_ego.cur.data() != att.cur.data());
}

TEST_CASE("shape mismatch between frames is rejected") {
    Rng rng(19);
    TemporalParams p = TemporalParams::init(4, 3, rng);
    Tensor cur = random_tensor({4, 3}, rng);
    Tensor prev = random_tensor({4, 2}, rng);
    REQUIRE_THROWS_AS(fuse_queries(p, cur, prev, EgoMotion{}), ShapeError);
}

TEST_CASE("gradients flow to both frames and the ego perceptron") {
    Rng rng(23);
    const std::size_t C = 4, M = 2;
    TemporalParams p = TemporalParams::init(C, M, rng);
    EgoMotion motion(Mat4::from_rt(Mat3::rot_z(0.4), {1, 0, 0}), 0.5);

    std::vector<Tensor> params;
    p.visit([&](const char*, Tensor& t) { params.push_back(t); });
    auto f = [&](Tape*, const std::vector<Tensor>& prm) {
        TemporalParams p2 = p;
        std::size_t i = 0;
        p2.visit([&](const char*, Tensor& t) { t = prm[i++]; });
        FusedQueries fq = fuse_queries(p2, p2.o_init_cur, p2.o_init_prev, motion);
        return add(sum(mul(fq.cur, fq.cur)), sum(mul(fq.prev, fq.prev)));
    };
    REQUIRE(grad_check(f, params, 1e-5) < 1e-4);

    // Gradient actually reaches the ego perceptron and both inits.
    Tape tape;
    std::vector<Tensor> attached;
    TemporalParams p2 = p;
    p2.visit([&](const char*, Tensor& t) {
        t = tape.leaf(t);
        attached.push_back(t);
    });
    FusedQueries fq = fuse_queries(p2, p2.o_init_cur, p2.o_init_prev, motion);
    tape.backward(add(sum(mul(fq.cur, fq.cur)), sum(mul(fq.prev, fq.prev))));
    auto grad_norm = [&](const Tensor& t) {
        Tensor g = tape.grad(t);
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += std::abs(g[i]);
        return s;
    };
    REQUIRE(grad_norm(p2.ego_mlp.w1) > 0.0);
    REQUIRE(grad_norm(p2.o_init_cur) > 0.0);
    REQUIRE(grad_norm(p2.o_init_prev) > 0.0);
}
