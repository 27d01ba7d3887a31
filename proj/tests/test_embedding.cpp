#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cape/embedding.hpp"

using namespace cape;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(Tensor::numel(shape));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor(shape, std::move(d));
}

Mlp2 zero_mlp(std::size_t in, std::size_t hidden, std::size_t out) {
    Mlp2 m;
    m.w1 = Tensor::zeros({hidden, in});
    m.b1 = Tensor::zeros({hidden});
    m.w2 = Tensor::zeros({out, hidden});
    m.b2 = Tensor::zeros({out});
    return m;
}

// Constant-output MLP: zero weights, bias drives the second layer.
Mlp2 const_mlp(std::size_t in, std::size_t out, const std::vector<double>& value) {
    Mlp2 m = zero_mlp(in, out, out);
    m.b2 = Tensor({out}, value);
    return m;
}

}  // namespace

TEST_CASE("key_pe is deterministic per pixel and extrinsics-blind") {
    Rng rng(31);
    const std::size_t D = 4, C = 8;
    KeyPEParams kp = KeyPEParams::init(D, C, rng);
    CoordNormalizer norm{{-10, -10, -10}, {10, 10, 10}};

    Intrinsics intr(2, 2, 1.5, 1.5);
    auto bins = make_depth_bins(1.0, 9.0, D);
    auto pts = frustum_points(intr, 2, 2, bins);
    // Duplicate one pixel's frustum column.
    std::vector<Vec3> dup(pts.begin(), pts.begin() + static_cast<std::ptrdiff_t>(2 * D));
    for (std::size_t k = 0; k < D; ++k) dup.push_back(dup[k]);
    Tensor coords = frustum_to_tensor(dup, D, norm);
    Tensor pe = key_pe(kp, coords);
    for (std::size_t i = 0; i < pe.rows(); ++i) REQUIRE(pe.at(i, 0) == pe.at(i, 2));

    // Extrinsics never enter the computation: same intrinsics, any extrinsics.
    CameraRig rig;
    rig.feat_h = rig.feat_w = 2;
    rig.depth_bins = bins;
    rig.cameras.push_back({intr, Extrinsics{}});
    rig.cameras.push_back({intr, Extrinsics::from_rt(Mat3::rot_z(2.0), {5, 5, 0})});
    Tensor p0 = key_pe(kp, frustum_to_tensor(frustum_points(rig, 0), D, norm));
    Tensor p1 = key_pe(kp, frustum_to_tensor(frustum_points(rig, 1), D, norm));
    REQUIRE(p0.data() == p1.data());
}

TEST_CASE("zero-parameter embeddings vanish") {
    const std::size_t D = 3, C = 4;
    KeyPEParams kp;
    kp.phi = zero_mlp(3 * D, C, C);
    kp.xi = zero_mlp(C, C, C);
    Rng rng(1);
    Tensor coords = random_tensor({3 * D, 5}, rng);
    Tensor pe = key_pe(kp, coords);
    for (std::size_t i = 0; i < pe.size(); ++i) REQUIRE(pe[i] == 0.0);

    QueryPEParams qp;
    qp.psi = zero_mlp(3, C, C);
    qp.rho_self = zero_mlp(3, C, C);
    Tensor r = random_tensor({3, 6}, rng);
    Tensor g = query_pe(qp, r);
    for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == 0.0);
    Tensor s = self_pos_embedding(qp, r);
    for (std::size_t i = 0; i < s.size(); ++i) REQUIRE(s[i] == 0.0);
}

TEST_CASE("key_fpe reduces to key_pe under an all-ones gate and vanishes under zeros") {
    Rng rng(41);
    const std::size_t D = 2, C = 4, I = 6;
    KeyPEParams kp = KeyPEParams::init(D, C, rng);
    Tensor coords = random_tensor({3 * D, I}, rng);
    Tensor feats = random_tensor({C, I}, rng);

    kp.xi = const_mlp(C, C, std::vector<double>(C, 1.0));
    Tensor fpe = key_fpe(kp, coords, feats);
    Tensor pe = key_pe(kp, coords);
    REQUIRE(fpe.data() == pe.data());

    kp.xi = zero_mlp(C, C, C);
    Tensor zero = key_fpe(kp, coords, feats);
    for (std::size_t i = 0; i < zero.size(); ++i) REQUIRE(zero[i] == 0.0);
}

TEST_CASE("key_fpe single-pixel scalar recomputation") {
    const std::size_t C = 2;
    KeyPEParams kp;
    kp.phi = const_mlp(3, C, {2.0, 3.0});
    kp.xi = const_mlp(C, C, {5.0, 7.0});
    Tensor coords({3, 1}, {0.1, 0.2, 0.3});
    Tensor feats({C, 1}, {9.0, -4.0});
    Tensor p = key_fpe(kp, coords, feats);
    REQUIRE(p.at(0, 0) == 10.0);
    REQUIRE(p.at(1, 0) == 21.0);
}

TEST_CASE("query_pe determinism and rigid-compensation invariance") {
    Rng rng(53);
    const std::size_t C = 6, M = 5;
    QueryPEParams qp = QueryPEParams::init(C, rng);
    CoordNormalizer norm{{-20, -20, -20}, {20, 20, 20}};

    std::vector<Vec3> refs;
    for (std::size_t i = 0; i < M; ++i)
        refs.push_back({rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-1, 1)});
    refs.push_back(refs[0]);  // duplicate point -> duplicate column

    Extrinsics e = Extrinsics::from_rt(Mat3::rot_z(0.8), {1, -2, 0.5});
    Tensor rbar = norm.apply_t(points_to_tensor(global_to_camera(refs, e)));
    Tensor g = query_pe(qp, rbar);
    for (std::size_t i = 0; i < C; ++i) REQUIRE(g.at(i, 0) == g.at(i, M));

    // Replacing points r by S*r and extrinsics T by T*S^-1 leaves the PE
    // unchanged up to roundoff.
    for (int trial = 0; trial < 10; ++trial) {
        Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
        Mat4 s = Mat4::from_rt(Mat3::axis_angle(axis, rng.uniform(-3, 3)),
                               {rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-1, 1)});
        std::vector<Vec3> moved;
        for (const auto& r : refs) moved.push_back(s.apply(r));
        Extrinsics compensated(e.mat * s.rigid_inverse());
        Tensor rbar2 = norm.apply_t(points_to_tensor(global_to_camera(moved, compensated)));
        Tensor g2 = query_pe(qp, rbar2);
        for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(std::abs(g[i] - g2[i]) < 1e-10);
    }
}

TEST_CASE("query_fpe reduces to query_pe under an all-ones guidance") {
    Rng rng(67);
    const std::size_t C = 4, M = 3;
    QueryPEParams qp = QueryPEParams::init(C, rng);
    qp.eta_l = const_mlp(C, C, std::vector<double>(C, 1.0));
    Tensor rbar = random_tensor({3, M}, rng);
    Tensor dec = random_tensor({C, M}, rng);
    Extrinsics e = Extrinsics::from_rt(Mat3::rot_z(-0.3), {0, 1, 0});
    Tensor fpe = query_fpe(qp, rbar, dec, e);
    Tensor pe = query_pe(qp, rbar);
    REQUIRE(fpe.data() == pe.data());
}

TEST_CASE("query_fpe matches manual composition on a tiny instance") {
    Rng rng(71);
    const std::size_t C = 2, M = 1;
    QueryPEParams qp = QueryPEParams::init(C, rng);
    Tensor rbar = random_tensor({3, M}, rng);
    Tensor dec = random_tensor({C, M}, rng);
    Extrinsics e = Extrinsics::from_rt(Mat3::rot_z(0.4), {2, 0, -1});

    Tensor got = query_fpe(qp, rbar, dec, e);

    Tensor ext_vec = extrinsics_vector(e.mat);
    Tensor eg = qp.eta_g.forward(ext_vec);
    std::vector<double> modulated(C);
    for (std::size_t i = 0; i < C; ++i) modulated[i] = dec.at(i, 0) * eg.at(i, 0);
    Tensor el = qp.eta_l.forward(Tensor({C, 1}, modulated));
    Tensor ps = qp.psi.forward(rbar);
    for (std::size_t i = 0; i < C; ++i)
        REQUIRE(got.at(i, 0) == Catch::Approx(ps.at(i, 0) * el.at(i, 0)).margin(1e-15));
}

TEST_CASE("different extrinsics with identical rbar and o give different query FPE") {
    Rng rng(83);
    const std::size_t C = 8, M = 4;
    QueryPEParams qp = QueryPEParams::init(C, rng);
    Tensor rbar = random_tensor({3, M}, rng);
    Tensor dec = random_tensor({C, M}, rng);
    Extrinsics e1 = Extrinsics::from_rt(Mat3::rot_z(0.2), {1, 0, 0});
    Extrinsics e2 = Extrinsics::from_rt(Mat3::rot_z(-1.1), {0, 3, 1});
    Tensor g1 = query_fpe(qp, rbar, dec, e1);
    Tensor g2 = query_fpe(qp, rbar, dec, e2);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < g1.size(); ++i) max_diff = std::max(max_diff, std::abs(g1[i] - g2[i]));
    REQUIRE(max_diff > 1e-6);
}

TEST_CASE("self_pos_embedding distinct points give distinct columns") {
    Rng rng(97);
    const std::size_t C = 6;
    QueryPEParams qp = QueryPEParams::init(C, rng);
    Tensor r({3, 2}, {0.1, 0.9, 0.4, 0.2, 0.5, 0.7});
    Tensor s1 = self_pos_embedding(qp, r);
    Tensor s2 = self_pos_embedding(qp, r);
    REQUIRE(s1.data() == s2.data());
    double diff = 0.0;
    for (std::size_t i = 0; i < C; ++i) diff = std::max(diff, std::abs(s1.at(i, 0) - s1.at(i, 1)));
    REQUIRE(diff > 1e-9);
}

TEST_CASE("gradients flow to every embedding perceptron") {
    Rng rng(101);
    const std::size_t D = 2, C = 4, I = 3, M = 2;
    KeyPEParams kp = KeyPEParams::init(D, C, rng);
    QueryPEParams qp = QueryPEParams::init(C, rng);
    Tensor coords = random_tensor({3 * D, I}, rng);
    Tensor feats = random_tensor({C, I}, rng);
    Tensor rbar = random_tensor({3, M}, rng);
    Tensor dec = random_tensor({C, M}, rng);
    Extrinsics e = Extrinsics::from_rt(Mat3::rot_z(0.6), {1, 1, 0});

    auto f = [&](Tape*, const std::vector<Tensor>& p) {
        KeyPEParams k2 = kp;
        QueryPEParams q2 = qp;
        std::size_t i = 0;
        k2.visit([&](const char*, Tensor& t) { t = p[i++]; });
        q2.visit([&](const char*, Tensor& t) { t = p[i++]; });
        Tensor kf = key_fpe(k2, coords, feats);
        Tensor qf = query_fpe(q2, rbar, dec, e);
        Tensor sp = self_pos_embedding(q2, rbar);
        return add(add(sum(mul(kf, kf)), sum(mul(qf, qf))), sum(sp));
    };
    std::vector<Tensor> params;
    kp.visit([&](const char*, Tensor& t) { params.push_back(t); });
    qp.visit([&](const char*, Tensor& t) { params.push_back(t); });
    REQUIRE(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("normalizer round-trip and tensor path agree with scalar path") {
    CoordNormalizer norm{{-12, -8, -2}, {12, 8, 4}};
    Rng rng(5);
    std::vector<Vec3> pts;
    for (int i = 0; i < 7; ++i)
        pts.push_back({rng.uniform(-12, 12), rng.uniform(-8, 8), rng.uniform(-2, 4)});
    Tensor t = norm.apply_t(points_to_tensor(pts));
    for (std::size_t i = 0; i < pts.size(); ++i) {
        Vec3 n = norm.apply(pts[i]);
        REQUIRE(t.at(0, i) == Catch::Approx(n.x).margin(1e-15));
        REQUIRE(t.at(1, i) == Catch::Approx(n.y).margin(1e-15));
        REQUIRE(t.at(2, i) == Catch::Approx(n.z).margin(1e-15));
        Vec3 back = norm.invert(n);
        REQUIRE(back.x == Catch::Approx(pts[i].x).margin(1e-12));
    }
    Tensor rt = norm.invert_t(t);
    for (std::size_t i = 0; i < pts.size(); ++i)
        REQUIRE(rt.at(1, i) == Catch::Approx(pts[i].y).margin(1e-12));
}
