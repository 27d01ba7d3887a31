#pragma once

#include <vector>

#include "cape/geometry.hpp"
#include "cape/tensor.hpp"

namespace cape {

/// Applies a constant rigid/homogeneous transform to a [3 x M] tensor of
/// points. Differentiable w.r.t. the points (learnable reference points flow
/// through here).
inline Tensor transform_points(const Mat4& m, const Tensor& pts) {
    if (pts.rank() != 2 || pts.rows() != 3)
        throw ShapeError("transform_points: expected [3 x M], got " + shape_str(pts.shape()));
    const Mat3 r = m.rotation();
    Tensor rot({3, 3}, {r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)});
    const Vec3 t = m.translation();
    return colwise_add(matmul(rot, pts), Tensor({3}, {t.x, t.y, t.z}));
}

/// Maps metric coordinates into [0,1]-ish MLP-friendly coordinates and back.
/// The constants are part of the model and are stored in checkpoints.
struct CoordNormalizer {
    Vec3 lo{-1, -1, -1}, hi{1, 1, 1};

    Vec3 apply(const Vec3& p) const {
        return {(p.x - lo.x) / (hi.x - lo.x), (p.y - lo.y) / (hi.y - lo.y), (p.z - lo.z) / (hi.z - lo.z)};
    }

    Vec3 invert(const Vec3& n) const {
        return {lo.x + n.x * (hi.x - lo.x), lo.y + n.y * (hi.y - lo.y), lo.z + n.z * (hi.z - lo.z)};
    }

    /// Same mapping on a [3 x M] tensor, differentiable w.r.t. the points.
    Tensor apply_t(const Tensor& pts) const {
        Tensor shifted = colwise_add(pts, Tensor({3}, {-lo.x, -lo.y, -lo.z}));
        return colwise_mul(shifted,
                           Tensor({3}, {1.0 / (hi.x - lo.x), 1.0 / (hi.y - lo.y), 1.0 / (hi.z - lo.z)}));
    }

    Tensor invert_t(const Tensor& pts) const {
        Tensor scaled = colwise_mul(pts, Tensor({3}, {hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}));
        return colwise_add(scaled, Tensor({3}, {lo.x, lo.y, lo.z}));
    }
};

/// Packs frustum points of one view into the [3D x I] column layout consumed
/// by the key-PE perceptron: column = pixel, rows = depth-major (x,y,z)
/// triples, normalized coordinates.
inline Tensor frustum_to_tensor(const std::vector<Vec3>& pts, std::size_t depth_bins,
                                const CoordNormalizer& norm) {
    if (depth_bins == 0 || pts.size() % depth_bins != 0)
        throw ShapeError("frustum_to_tensor: point count not divisible by depth bin count");
    const std::size_t pixels = pts.size() / depth_bins;
    std::vector<double> data(3 * depth_bins * pixels);
    for (std::size_t i = 0; i < pixels; ++i)
        for (std::size_t d = 0; d < depth_bins; ++d) {
            const Vec3 n = norm.apply(pts[i * depth_bins + d]);
            data[(d * 3 + 0) * pixels + i] = n.x;
            data[(d * 3 + 1) * pixels + i] = n.y;
            data[(d * 3 + 2) * pixels + i] = n.z;
        }
    return Tensor({3 * depth_bins, pixels}, std::move(data));
}

/// Column-per-point constant tensor from plain geometry points.
inline Tensor points_to_tensor(const std::vector<Vec3>& pts) {
    std::vector<double> data(3 * pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        data[0 * pts.size() + i] = pts[i].x;
        data[1 * pts.size() + i] = pts[i].y;
        data[2 * pts.size() + i] = pts[i].z;
    }
    return Tensor({3, pts.size()}, std::move(data));
}

/// Shared random directions used to initialize the query- and key-PE
/// perceptrons as matching linear coordinate embeddings. Their dot product
/// then starts out as a centered coordinate-correlation kernel: pixels whose
/// rays point toward a reference point score high before any training.
struct PePriorInit {
    std::size_t rank = 3;
    std::vector<double> rows;  // rank x 3, row-major
    std::vector<double> dirs;  // rank x C

    /// rows and dirs are random orthonormal frames (times a gain), making the
    /// induced attention kernel an isotropic centered dot product rather than
    /// an arbitrary bilinear form.
    static PePriorInit make(std::size_t channels, Rng& rng, std::size_t rank = 3,
                            double row_gain = 4.0, double dir_gain = 4.0) {
        if (rank > 3 || rank > channels) throw ConfigError("PePriorInit: rank too large");
        PePriorInit p;
        p.rank = rank;
        p.rows = orthonormal_frame(rng, rank, 3, row_gain);
        p.dirs = orthonormal_frame(rng, rank, channels, dir_gain);
        return p;
    }

    static std::vector<double> orthonormal_frame(Rng& rng, std::size_t count, std::size_t dim,
                                                 double gain) {
        std::vector<double> rows(count * dim);
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t retry = 0;; ++retry) {
                for (std::size_t j = 0; j < dim; ++j) rows[i * dim + j] = rng.normal();
                for (std::size_t k = 0; k < i; ++k) {
                    double dot = 0;
                    for (std::size_t j = 0; j < dim; ++j) dot += rows[i * dim + j] * rows[k * dim + j];
                    for (std::size_t j = 0; j < dim; ++j) rows[i * dim + j] -= dot * rows[k * dim + j];
                }
                double norm2 = 0;
                for (std::size_t j = 0; j < dim; ++j) norm2 += rows[i * dim + j] * rows[i * dim + j];
                if (norm2 > 1e-12) {
                    const double inv = 1.0 / std::sqrt(norm2);
                    for (std::size_t j = 0; j < dim; ++j) rows[i * dim + j] *= inv;
                    break;
                }
                if (retry > 16) throw Error("orthonormal_frame: degenerate draws");
            }
        }
        for (auto& v : rows) v *= gain;
        return rows;
    }

    /// Installs +/- hidden pairs computing dirs * rows * (x - center) into an
    /// existing MLP. `slots` input coordinate triples are averaged (1 for a
    /// point embedding, D for a frustum column).
    void install(Mlp2& m, std::size_t slots, double center = 0.5) const {
        const std::size_t in = m.w1.cols();
        const std::size_t hidden = m.w1.rows();
        const std::size_t out = m.w2.rows();
        if (in != 3 * slots || hidden < 2 * rank) throw ConfigError("PePriorInit: widths do not fit");
        std::vector<double> w1 = m.w1.data();
        std::vector<double> b1 = m.b1.data();
        std::vector<double> w2 = m.w2.data();
        for (std::size_t p = 0; p < rank; ++p) {
            double bias = 0.0;
            for (std::size_t s = 0; s < slots; ++s)
                for (std::size_t j = 0; j < 3; ++j) {
                    const double r = rows[p * 3 + j] / static_cast<double>(slots);
                    w1[(2 * p) * in + s * 3 + j] = r;
                    w1[(2 * p + 1) * in + s * 3 + j] = -r;
                    bias += r * center;
                }
            b1[2 * p] = -bias;
            b1[2 * p + 1] = bias;
            for (std::size_t i = 0; i < out; ++i) {
                const double u = dirs[p * out + i];
                w2[i * hidden + 2 * p] = u;
                w2[i * hidden + 2 * p + 1] = -u;
            }
        }
        m.w1 = m.w1.with_data(std::move(w1));
        m.b1 = m.b1.with_data(std::move(b1));
        m.w2 = m.w2.with_data(std::move(w2));
    }
};

/// Key position embedding parameters: phi maps a pixel's stacked frustum
/// coordinates to the embedding, xi produces the feature-guided scaling.
struct KeyPEParams {
    Mlp2 phi;  // 3D -> C
    Mlp2 xi;   // C -> C

    static KeyPEParams init(std::size_t depth_bins, std::size_t channels, Rng& rng,
                            const PePriorInit* prior = nullptr) {
        KeyPEParams p;
        // Wide hidden layer: the embedding must carve a proximity kernel out
        // of hinge features, which wants basis capacity.
        p.phi = Mlp2::init(3 * depth_bins, 4 * channels, channels, rng);
        if (prior) prior->install(p.phi, depth_bins);
        p.xi = Mlp2::init(channels, channels, channels, rng);
        // Multiplicative gates start at identity so the positional stream is
        // alive from the first step.
        p.xi.b2 = Tensor::full({channels}, 1.0);
        return p;
    }

    template <class F>
    void visit(F&& f) {
        phi.visit([&](const char* n, Tensor& t) { f((std::string("phi.") + n).c_str(), t); });
        xi.visit([&](const char* n, Tensor& t) { f((std::string("xi.") + n).c_str(), t); });
    }
};

/// Query position embedding parameters. psi embeds camera-frame reference
/// points; eta_g/eta_l implement the decoder-embedding guidance; rho_self
/// embeds global reference points for the self-attention positional term.
struct QueryPEParams {
    Mlp2 psi;       // 3 -> C
    Mlp2 eta_g;     // 12 -> C
    Mlp2 eta_l;     // C -> C
    Mlp2 rho_self;  // 3 -> C

    static QueryPEParams init(std::size_t channels, Rng& rng, const PePriorInit* prior = nullptr) {
        QueryPEParams p;
        p.psi = Mlp2::init(3, 4 * channels, channels, rng);
        if (prior) prior->install(p.psi, 1);
        p.eta_g = Mlp2::init(12, channels, channels, rng);
        p.eta_l = Mlp2::init(channels, channels, channels, rng);
        p.rho_self = Mlp2::init_with_linear_path(3, channels, channels, rng, 3);
        // Both guidance gates start at identity (see KeyPEParams::init).
        p.eta_g.b2 = Tensor::full({channels}, 1.0);
        p.eta_l.b2 = Tensor::full({channels}, 1.0);
        return p;
    }

    template <class F>
    void visit(F&& f) {
        psi.visit([&](const char* n, Tensor& t) { f((std::string("psi.") + n).c_str(), t); });
        eta_g.visit([&](const char* n, Tensor& t) { f((std::string("eta_g.") + n).c_str(), t); });
        eta_l.visit([&](const char* n, Tensor& t) { f((std::string("eta_l.") + n).c_str(), t); });
        rho_self.visit([&](const char* n, Tensor& t) { f((std::string("rho_self.") + n).c_str(), t); });
    }
};

// ---------------------------------------------------------------------------
// Embedding operations
// ---------------------------------------------------------------------------

/// P = phi(c'): one embedding column per pixel from its normalized frustum
/// coordinates [3D x I].
inline Tensor key_pe(const KeyPEParams& params, const Tensor& frustum_coords) {
    return params.phi.forward(frustum_coords);
}

/// Feature-guided key PE: p = phi(c') ⊙ xi(x).
inline Tensor key_fpe(const KeyPEParams& params, const Tensor& frustum_coords, const Tensor& features) {
    Tensor base = params.phi.forward(frustum_coords);
    Tensor gate = params.xi.forward(features);
    if (base.shape() != gate.shape())
        throw ShapeError("key_fpe: embedding " + shape_str(base.shape()) + " vs feature gate " +
                         shape_str(gate.shape()));
    return mul(base, gate);
}

/// G_n = psi(r̄): one column per query from normalized camera-frame
/// reference points [3 x M].
inline Tensor query_pe(const QueryPEParams& params, const Tensor& rbar) {
    return params.psi.forward(rbar);
}

/// 12-vector of the top three rows of a rigid transform, as a [12 x 1]
/// constant.
inline Tensor extrinsics_vector(const Mat4& m) {
    const auto v = m.top_rows();
    return Tensor({12, 1}, std::vector<double>(v.begin(), v.end()));
}

/// Feature-guided query PE: g = psi(r̄) ⊙ eta_l(o ⊙ eta_g(vec(T_e))).
/// With use_extrinsic_gate = false the eta_g factor is dropped (the guidance
/// becomes eta_l(o)); that is the global-PE-mode variant, where guidance must
/// not depend on the camera.
inline Tensor query_fpe(const QueryPEParams& params, const Tensor& rbar, const Tensor& decoder_embedding,
                        const Extrinsics& extr, bool use_extrinsic_gate = true) {
    Tensor base = params.psi.forward(rbar);
    Tensor guided;
    if (use_extrinsic_gate) {
        Tensor ext_embed = params.eta_g.forward(extrinsics_vector(extr.mat));  // [C x 1]
        Tensor gate = reshape(ext_embed, {ext_embed.rows()});
        guided = params.eta_l.forward(colwise_mul(decoder_embedding, gate));
    } else {
        guided = params.eta_l.forward(decoder_embedding);
    }
    if (base.shape() != guided.shape())
        throw ShapeError("query_fpe: embedding " + shape_str(base.shape()) + " vs guidance " +
                         shape_str(guided.shape()));
    return mul(base, guided);
}

/// Positional term added to queries/keys inside self-attention, from
/// normalized global-frame reference points [3 x M].
inline Tensor self_pos_embedding(const QueryPEParams& params, const Tensor& ref_norm) {
    return params.rho_self.forward(ref_norm);
}

}  // namespace cape
