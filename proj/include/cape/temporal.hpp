#pragma once

#include <utility>

#include "cape/embedding.hpp"
#include "cape/tensor.hpp"

namespace cape {

enum class FusionKind { ChannelAttention, ConcatMlp };

/// Parameters of the two-frame query interaction: the ego-motion embedding
/// perceptron, the channel-attention gate, the concat-MLP fusion variant,
/// and the per-frame decoder embedding initializations.
struct TemporalParams {
    Mlp2 ego_mlp;   // 12 -> C
    Mlp2 gate_mlp;  // 2C -> 2C, read as two C-vectors of gate logits
    Mlp2 fuse_mlp;  // 2C -> C, the concat+MLP fusion ablation
    Tensor o_init_cur, o_init_prev;  // [C x M]

    static TemporalParams init(std::size_t channels, std::size_t queries, Rng& rng) {
        TemporalParams p;
        p.ego_mlp = Mlp2::init(12, channels, channels, rng);
        // The alignment is multiplicative; start it at identity.
        p.ego_mlp.b2 = Tensor::full({channels}, 1.0);
        p.gate_mlp = Mlp2::init(2 * channels, 2 * channels, 2 * channels, rng);
        p.fuse_mlp = Mlp2::init(2 * channels, 2 * channels, channels, rng);
        auto embed = [&rng, channels, queries] {
            std::vector<double> d(channels * queries);
            for (auto& v : d) v = rng.normal(0.0, 0.5);
            return Tensor({channels, queries}, std::move(d));
        };
        p.o_init_cur = embed();
        p.o_init_prev = embed();
        return p;
    }

    template <class F>
    void visit(F&& f) {
        ego_mlp.visit([&](const char* n, Tensor& t) { f((std::string("ego_mlp.") + n).c_str(), t); });
        gate_mlp.visit([&](const char* n, Tensor& t) { f((std::string("gate_mlp.") + n).c_str(), t); });
        fuse_mlp.visit([&](const char* n, Tensor& t) { f((std::string("fuse_mlp.") + n).c_str(), t); });
        f("o_init_cur", o_init_cur);
        f("o_init_prev", o_init_prev);
    }
};

/// Embedding of a rigid ego motion: perceptron over the 12-vector of the
/// matrix's top three rows. Returns a length-C vector.
inline Tensor ego_motion_embedding(const TemporalParams& params, const EgoMotion& m) {
    Tensor v = params.ego_mlp.forward(extrinsics_vector(m.mat));
    return reshape(v, {v.rows()});
}

struct FusedQueries {
    Tensor cur, prev;
};

/// Two-frame query fusion (Fig. 4). The previous-frame embedding is aligned
/// into the current frame by elementwise modulation with the ego-motion
/// embedding, then each channel is gated by a pairwise softmax (w1, w2):
///   fused_cur = w1 ⊙ o_cur + w2 ⊙ align(o_prev).
/// The previous-frame output mirrors the same construction with frame roles
/// swapped (alignment by the inverse motion, its own gate pass).
inline FusedQueries fuse_queries(const TemporalParams& params, const Tensor& o_cur, const Tensor& o_prev,
                                 const EgoMotion& motion, FusionKind kind = FusionKind::ChannelAttention,
                                 bool use_ego_embedding = true) {
    if (o_cur.shape() != o_prev.shape())
        throw ShapeError("fuse_queries: frame embeddings " + shape_str(o_cur.shape()) + " vs " +
                         shape_str(o_prev.shape()));

    auto one_direction = [&](const Tensor& own, const Tensor& other, const EgoMotion& m) {
        Tensor aligned = use_ego_embedding ? colwise_mul(other, ego_motion_embedding(params, m)) : other;
        Tensor stacked = concat_rows(own, aligned);
        if (kind == FusionKind::ConcatMlp) return params.fuse_mlp.forward(stacked);
        Tensor logits = params.gate_mlp.forward(stacked);
        const std::size_t c = own.rows();
        Tensor w1 = sigmoid(sub(slice_rows(logits, 0, c), slice_rows(logits, c, 2 * c)));
        Tensor w2 = sub(Tensor::full(w1.shape(), 1.0), w1);
        return add(mul(w1, own), mul(w2, aligned));
    };

    FusedQueries out;
    out.cur = one_direction(o_cur, o_prev, motion);
    out.prev = one_direction(o_prev, o_cur, motion.inverse());
    return out;
}

}  // namespace cape
