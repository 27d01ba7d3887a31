#pragma once

#include <functional>
#include <vector>

#include "cape/tensor.hpp"

namespace cape {

/// Per-(head, view) attention maps, stored query-major [M x I]. `overall` is
/// computed as the elementwise sum of the stored `local` and `global` maps,
/// so the decomposition identity holds exactly by construction.
struct AttentionMaps {
    Tensor local;     // scaled positional logits  (proj P)^T (proj G)
    Tensor global;    // scaled content logits     (proj X)^T (proj O)
    Tensor overall;   // local + global, pre-softmax
    Tensor softmax;   // this view's slice of the post-softmax weights
};

/// Attention maps for one decoder layer: maps[h * views + n].
struct AttentionRecord {
    std::size_t heads = 0, views = 0, queries = 0, pixels = 0;
    std::vector<AttentionMaps> maps;

    const AttentionMaps& at(std::size_t head, std::size_t view) const {
        return maps[head * views + view];
    }
};

struct AttentionOptions {
    bool bilateral = true;
    // Eq. 9 read literally applies the softmax per view before summing; the
    // default normalizes jointly over the concatenated key axis of all views.
    bool per_view_softmax = false;
};

struct DecoderLayerParams {
    // self-attention projections
    Tensor self_wq, self_wk, self_wv, self_wo;
    // cross-attention: separate content and positional streams
    Tensor cross_wq_c, cross_wk_c;  // applied to O and X_n
    Tensor cross_wq_p, cross_wk_p;  // applied to G_n and P_n
    Tensor cross_wv, cross_wo;
    Mlp2 ffn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;

    static DecoderLayerParams init(std::size_t channels, Rng& rng) {
        auto proj = [&rng, channels] {
            const double a = std::sqrt(6.0 / static_cast<double>(2 * channels));
            std::vector<double> d(channels * channels);
            for (auto& v : d) v = rng.uniform(-a, a);
            return Tensor({channels, channels}, std::move(d));
        };
        DecoderLayerParams p;
        p.self_wq = proj();
        p.self_wk = proj();
        p.self_wv = proj();
        p.self_wo = proj();
        p.cross_wq_c = proj();
        p.cross_wk_c = proj();
        // Positional projections start as the identity: whatever kernel the
        // PE embeddings carry at init survives the per-head split.
        p.cross_wq_p = Tensor::identity(channels);
        p.cross_wk_p = Tensor::identity(channels);
        p.cross_wv = proj();
        p.cross_wo = proj();
        p.ffn = Mlp2::init(channels, 4 * channels, channels, rng);
        p.ln1_g = Tensor::full({channels}, 1.0);
        p.ln1_b = Tensor::zeros({channels});
        p.ln2_g = Tensor::full({channels}, 1.0);
        p.ln2_b = Tensor::zeros({channels});
        p.ln3_g = Tensor::full({channels}, 1.0);
        p.ln3_b = Tensor::zeros({channels});
        return p;
    }

    template <class F>
    void visit(F&& f) {
        f("self_wq", self_wq);
        f("self_wk", self_wk);
        f("self_wv", self_wv);
        f("self_wo", self_wo);
        f("cross_wq_c", cross_wq_c);
        f("cross_wk_c", cross_wk_c);
        f("cross_wq_p", cross_wq_p);
        f("cross_wk_p", cross_wk_p);
        f("cross_wv", cross_wv);
        f("cross_wo", cross_wo);
        ffn.visit([&](const char* n, Tensor& t) { f((std::string("ffn.") + n).c_str(), t); });
        f("ln1_g", ln1_g);
        f("ln1_b", ln1_b);
        f("ln2_g", ln2_g);
        f("ln2_b", ln2_b);
        f("ln3_g", ln3_g);
        f("ln3_b", ln3_b);
    }
};

struct DecoderParams {
    std::vector<DecoderLayerParams> layers;
    std::size_t heads = 1;

    static DecoderParams init(std::size_t num_layers, std::size_t channels, std::size_t heads, Rng& rng) {
        if (heads == 0 || channels % heads != 0)
            throw ConfigError("DecoderParams: channel count must be divisible by head count");
        DecoderParams p;
        p.heads = heads;
        p.layers.reserve(num_layers);
        for (std::size_t l = 0; l < num_layers; ++l) p.layers.push_back(DecoderLayerParams::init(channels, rng));
        return p;
    }

    template <class F>
    void visit(F&& f) {
        for (std::size_t l = 0; l < layers.size(); ++l)
            layers[l].visit([&](const char* n, Tensor& t) {
                f(("layer" + std::to_string(l) + "." + n).c_str(), t);
            });
    }
};

namespace detail {

inline Tensor head_rows(const Tensor& m, std::size_t head, std::size_t head_dim) {
    return slice_rows(m, head * head_dim, (head + 1) * head_dim);
}

}  // namespace detail

/// Multi-view cross-attention with decoupled content and positional streams
/// (Eq. 8/9 with per-head projections). Per head and view the pre-softmax
/// logits are s*(proj_c X_n)^T(proj_c O) + s*(proj_p P_n)^T(proj_p G_n) with
/// s = 1/sqrt(C/h); the softmax normalizes over the concatenated key axis of
/// all views. Returns O + OutProj(aggregated values); `o_content` is the
/// (possibly normalized) tensor the content projections read, `o_residual`
/// carries the residual stream.
///
/// With options.bilateral = false, queries and keys collapse to single
/// streams O + G_n and X_n + P_n through the content projections; no record
/// is produced in that mode.
inline Tensor bilateral_cross_attention(const DecoderLayerParams& lp, const AttentionOptions& options,
                                        std::size_t heads, const Tensor& o_residual,
                                        const Tensor& o_content, const std::vector<Tensor>& g_views,
                                        const std::vector<Tensor>& x_views,
                                        const std::vector<Tensor>& p_views,
                                        AttentionRecord* record = nullptr) {
    const std::size_t n_views = x_views.size();
    if (p_views.size() != n_views || g_views.size() != n_views)
        throw ShapeError("bilateral_cross_attention: feature/PE view counts disagree: " +
                         std::to_string(n_views) + " features, " + std::to_string(p_views.size()) +
                         " key PEs, " + std::to_string(g_views.size()) + " query PEs");
    if (n_views == 0) throw ShapeError("bilateral_cross_attention: no views");
    const std::size_t channels = o_residual.rows();
    const std::size_t queries = o_residual.cols();
    const std::size_t head_dim = channels / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Tensor q_c;
    std::vector<Tensor> k_c, k_p, q_p_views;
    if (options.bilateral) {
        q_c = matmul(lp.cross_wq_c, o_content);
        for (const auto& x : x_views) k_c.push_back(matmul(lp.cross_wk_c, x));
        for (const auto& p : p_views) k_p.push_back(matmul(lp.cross_wk_p, p));
        for (const auto& g : g_views) q_p_views.push_back(matmul(lp.cross_wq_p, g));
    } else {
        for (std::size_t n = 0; n < n_views; ++n)
            k_c.push_back(matmul(lp.cross_wk_c, add(x_views[n], p_views[n])));
    }

    std::vector<Tensor> values;  // [C x I] per view
    values.reserve(n_views);
    for (const auto& x : x_views) values.push_back(matmul(lp.cross_wv, x));

    if (record) {
        if (!options.bilateral)
            throw Error("bilateral_cross_attention: attention record requires bilateral mode");
        record->heads = heads;
        record->views = n_views;
        record->queries = queries;
        record->pixels = x_views[0].cols();
        record->maps.assign(heads * n_views, {});
    }

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<Tensor> logit_blocks;  // per view [I x M]
        logit_blocks.reserve(n_views);
        for (std::size_t n = 0; n < n_views; ++n) {
            Tensor logits;
            if (options.bilateral) {
                Tensor content = mul_scalar(
                    matmul(transpose(detail::head_rows(k_c[n], h, head_dim)),
                           detail::head_rows(q_c, h, head_dim)),
                    scale);
                Tensor positional = mul_scalar(
                    matmul(transpose(detail::head_rows(k_p[n], h, head_dim)),
                           detail::head_rows(q_p_views[n], h, head_dim)),
                    scale);
                logits = add(positional, content);
                if (record) {
                    auto& maps = record->maps[h * n_views + n];
                    maps.local = transpose(positional).detached();
                    maps.global = transpose(content).detached();
                    maps.overall = transpose(logits).detached();
                }
            } else {
                Tensor q_single = matmul(lp.cross_wq_c, add(o_content, g_views[n]));
                logits = mul_scalar(matmul(transpose(detail::head_rows(k_c[n], h, head_dim)),
                                           detail::head_rows(q_single, h, head_dim)),
                                    scale);
            }
            logit_blocks.push_back(std::move(logits));
        }

        Tensor head_out;
        if (options.per_view_softmax) {
            for (std::size_t n = 0; n < n_views; ++n) {
                Tensor w = softmax(logit_blocks[n], 0);
                Tensor contrib = matmul(detail::head_rows(values[n], h, head_dim), w);
                head_out = n == 0 ? contrib : add(head_out, contrib);
                if (record) record->maps[h * n_views + n].softmax = transpose(w).detached();
            }
        } else {
            Tensor all_logits = concat_rows(logit_blocks);      // [N*I x M]
            Tensor weights = softmax(all_logits, 0);
            std::vector<Tensor> value_blocks;
            value_blocks.reserve(n_views);
            for (std::size_t n = 0; n < n_views; ++n)
                value_blocks.push_back(transpose(detail::head_rows(values[n], h, head_dim)));
            Tensor value_all = concat_rows(value_blocks);       // [N*I x C/h]
            head_out = matmul(transpose(value_all), weights);   // [C/h x M]
            if (record) {
                const std::size_t pixels = record->pixels;
                for (std::size_t n = 0; n < n_views; ++n)
                    record->maps[h * n_views + n].softmax =
                        transpose(slice_rows(weights, n * pixels, (n + 1) * pixels)).detached();
            }
        }
        head_outputs.push_back(std::move(head_out));
    }

    Tensor merged = concat_rows(head_outputs);  // [C x M]
    return add(o_residual, matmul(lp.cross_wo, merged));
}

/// Standard multi-head self-attention over queries with a positional term
/// added to queries and keys (not to values). Returns input + projected
/// attention output.
inline Tensor self_attention(const DecoderLayerParams& lp, std::size_t heads, const Tensor& o_residual,
                             const Tensor& o_content, const Tensor& pos) {
    const std::size_t channels = o_residual.rows();
    const std::size_t head_dim = channels / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Tensor qk_input = add(o_content, pos);
    Tensor q = matmul(lp.self_wq, qk_input);
    Tensor k = matmul(lp.self_wk, qk_input);
    Tensor v = matmul(lp.self_wv, o_content);
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor logits = mul_scalar(matmul(transpose(detail::head_rows(k, h, head_dim)),
                                          detail::head_rows(q, h, head_dim)),
                                   scale);  // [M_keys x M_queries]
        Tensor w = softmax(logits, 0);
        head_outputs.push_back(matmul(detail::head_rows(v, h, head_dim), w));
    }
    return add(o_residual, matmul(lp.self_wo, concat_rows(head_outputs)));
}

/// Builds the per-view query PEs for a given decoder embedding; recomputed
/// every layer in the feature-guided setting.
using QueryPeFn = std::function<std::vector<Tensor>(const Tensor& o)>;

/// One pre-norm decoder layer: self-attention, bilateral cross-attention
/// over all views, FFN, each with a residual connection.
inline Tensor decoder_layer(const DecoderLayerParams& lp, const AttentionOptions& options,
                            std::size_t heads, const Tensor& o, const Tensor& self_pe,
                            const QueryPeFn& query_pe_fn, const std::vector<Tensor>& x_views,
                            const std::vector<Tensor>& p_views, AttentionRecord* record = nullptr) {
    Tensor o1 = self_attention(lp, heads, o, layer_norm(o, lp.ln1_g, lp.ln1_b), self_pe);
    std::vector<Tensor> g_views = query_pe_fn(o1);
    Tensor o2 = bilateral_cross_attention(lp, options, heads, o1, layer_norm(o1, lp.ln2_g, lp.ln2_b),
                                          g_views, x_views, p_views, record);
    return add(o2, lp.ffn.forward(layer_norm(o2, lp.ln3_g, lp.ln3_b)));
}

/// Runs all decoder layers, returning every intermediate output for
/// per-layer supervision. Key PEs are fixed per forward pass; query PEs are
/// recomputed per layer from the evolving decoder embedding.
inline std::vector<Tensor> decode(const DecoderParams& params, const AttentionOptions& options,
                                  const Tensor& o0, const Tensor& self_pe, const QueryPeFn& query_pe_fn,
                                  const std::vector<Tensor>& x_views, const std::vector<Tensor>& p_views,
                                  std::vector<AttentionRecord>* records = nullptr) {
    std::vector<Tensor> outputs;
    outputs.reserve(params.layers.size());
    Tensor o = o0;
    for (const auto& lp : params.layers) {
        AttentionRecord* rec = nullptr;
        if (records) {
            records->emplace_back();
            rec = &records->back();
        }
        o = decoder_layer(lp, options, params.heads, o, self_pe, query_pe_fn, x_views, p_views, rec);
        outputs.push_back(o);
    }
    return outputs;
}

}  // namespace cape
