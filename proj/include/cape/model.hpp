#pragma once

#include <string>
#include <vector>

#include "cape/decoder.hpp"
#include "cape/detection.hpp"
#include "cape/embedding.hpp"
#include "cape/scenegen.hpp"
#include "cape/temporal.hpp"

namespace cape {

enum class PeMode { Camera, Global };
enum class TemporalMode { Off, SharedQueries, SeparateQueries };

struct ModelConfig {
    std::size_t channels = 32;  // C
    std::size_t queries = 16;   // M
    std::size_t layers = 3;     // L
    std::size_t heads = 4;      // h
    std::size_t classes = 4;    // K
    PeMode pe_mode = PeMode::Camera;
    bool bilateral = true;
    bool q_fpe = true;
    bool k_fpe = true;
    bool per_view_softmax = false;
    TemporalMode temporal = TemporalMode::Off;
    bool prev_loss = true;  // auxiliary supervision on the previous frame
    FusionKind fusion = FusionKind::ChannelAttention;
    bool ego_embedding = true;
    bool fuse_every_layer = true;

    void validate() const {
        if (channels == 0 || queries == 0 || heads == 0 || classes == 0)
            throw ConfigError("ModelConfig: zero extent");
        if (channels % heads != 0) throw ConfigError("ModelConfig: channels must divide by heads");
    }

    AttentionOptions attention_options() const { return {bilateral, per_view_softmax}; }
};

/// The complete parameter set: learnable reference points, embedding MLPs,
/// decoder stack, detection heads and the temporal interaction. Normalizer
/// constants ride along so checkpoints are self-contained.
struct CapeModel {
    ModelConfig cfg;
    CoordNormalizer global_norm, camera_norm;
    std::size_t depth_bins = 0;

    Tensor ref_logits;  // [3 x M]; sigmoid gives normalized reference points
    Tensor o_init;      // [C x M] single-frame decoder embedding init
    KeyPEParams key_pe_params;
    QueryPEParams query_pe_params;
    DecoderParams decoder_params;
    DetectionHeads heads;
    TemporalParams temporal_params;

    static CapeModel init(const ModelConfig& cfg, const SceneConfig& scene, std::uint64_t seed) {
        cfg.validate();
        CapeModel m;
        m.cfg = cfg;
        m.global_norm = scene.global_normalizer();
        m.camera_norm = scene.camera_normalizer();
        m.depth_bins = scene.depth_bins;
        Rng rng(mix_seed(seed, 0xCAFEULL));
        // Reference points start on a jittered grid covering the scene in
        // normalized coordinates; training refines them.
        const auto grid = static_cast<std::size_t>(
            std::ceil(std::sqrt(static_cast<double>(cfg.queries))));
        std::vector<double> rl(3 * cfg.queries);
        auto to_logit = [](double u) { return std::log(u / (1.0 - u)); };
        for (std::size_t q = 0; q < cfg.queries; ++q) {
            const double gx = (static_cast<double>(q % grid) + 0.5) / static_cast<double>(grid);
            const double gy = (static_cast<double>(q / grid) + 0.5) / static_cast<double>(grid);
            rl[0 * cfg.queries + q] = to_logit(std::clamp(gx + rng.uniform(-0.02, 0.02), 0.05, 0.95));
            rl[1 * cfg.queries + q] = to_logit(std::clamp(gy + rng.uniform(-0.02, 0.02), 0.05, 0.95));
            rl[2 * cfg.queries + q] = to_logit(std::clamp(0.4 + rng.uniform(-0.05, 0.05), 0.05, 0.95));
        }
        m.ref_logits = Tensor({3, cfg.queries}, std::move(rl));
        std::vector<double> oi(cfg.channels * cfg.queries);
        for (auto& v : oi) v = rng.normal(0.0, 0.5);
        m.o_init = Tensor({cfg.channels, cfg.queries}, std::move(oi));
        const PePriorInit prior = PePriorInit::make(cfg.channels, rng);
        m.key_pe_params = KeyPEParams::init(scene.depth_bins, cfg.channels, rng, &prior);
        m.query_pe_params = QueryPEParams::init(cfg.channels, rng, &prior);
        m.decoder_params = DecoderParams::init(cfg.layers, cfg.channels, cfg.heads, rng);
        m.heads = DetectionHeads::init(cfg.channels, cfg.classes, rng);
        m.temporal_params = TemporalParams::init(cfg.channels, cfg.queries, rng);
        return m;
    }

    template <class F>
    void visit(F&& f) {
        f("ref_logits", ref_logits);
        f("o_init", o_init);
        key_pe_params.visit([&](const char* n, Tensor& t) { f((std::string("kpe.") + n).c_str(), t); });
        query_pe_params.visit([&](const char* n, Tensor& t) { f((std::string("qpe.") + n).c_str(), t); });
        decoder_params.visit([&](const char* n, Tensor& t) { f((std::string("dec.") + n).c_str(), t); });
        heads.visit([&](const char* n, Tensor& t) { f((std::string("head.") + n).c_str(), t); });
        temporal_params.visit([&](const char* n, Tensor& t) { f((std::string("tmp.") + n).c_str(), t); });
    }

    /// Copy whose parameters are differentiable leaves on `tape`.
    CapeModel attached(Tape& tape) const {
        CapeModel copy = *this;
        copy.visit([&tape](const char*, Tensor& t) { t = tape.leaf(t); });
        return copy;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        visit([&n](const char*, Tensor& t) { n += t.size(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

struct ForwardResult {
    std::vector<HeadOutputs> outputs;  // one per decoder layer
    Tensor ref_norm;                   // [3 x M] normalized reference points used by the heads
    std::vector<AttentionRecord> records;
};

namespace detail {

/// Key position embeddings for every view; computed once per forward pass.
inline std::vector<Tensor> build_key_pes(const CapeModel& m, const Frame& frame) {
    std::vector<Tensor> pes;
    pes.reserve(frame.rig.num_cameras());
    for (std::size_t n = 0; n < frame.rig.num_cameras(); ++n) {
        std::vector<Vec3> pts = frustum_points(frame.rig, n);
        Tensor coords;
        if (m.cfg.pe_mode == PeMode::Camera) {
            coords = frustum_to_tensor(pts, frame.rig.depth_bins.size(), m.camera_norm);
        } else {
            // Global mode: lift the frustum into the global frame, so the
            // embedding has to absorb the camera extrinsics.
            const Mat4 cam_to_global = frame.rig.cameras[n].extrinsics.mat.rigid_inverse();
            std::vector<Vec3> global_pts;
            global_pts.reserve(pts.size());
            for (const auto& p : pts) global_pts.push_back(cam_to_global.apply(p));
            coords = frustum_to_tensor(global_pts, frame.rig.depth_bins.size(), m.global_norm);
        }
        pes.push_back(m.cfg.k_fpe ? key_fpe(m.key_pe_params, coords, frame.features[n])
                                  : key_pe(m.key_pe_params, coords));
    }
    return pes;
}

/// Per-layer query PE builder. Camera-frame transforms of the reference
/// points are fixed per forward pass; only the decoder-embedding guidance
/// changes between layers.
inline QueryPeFn make_query_pe_fn(const CapeModel& m, const Frame& frame, const Tensor& ref_metric,
                                  const Tensor& ref_norm) {
    const std::size_t n_views = frame.rig.num_cameras();
    if (m.cfg.pe_mode == PeMode::Camera) {
        std::vector<Tensor> rbar_norm;
        rbar_norm.reserve(n_views);
        for (std::size_t n = 0; n < n_views; ++n)
            rbar_norm.push_back(
                m.camera_norm.apply_t(transform_points(frame.rig.cameras[n].extrinsics.mat, ref_metric)));
        return [&m, &frame, rbar_norm, n_views](const Tensor& o) {
            std::vector<Tensor> g;
            g.reserve(n_views);
            for (std::size_t n = 0; n < n_views; ++n)
                g.push_back(m.cfg.q_fpe ? query_fpe(m.query_pe_params, rbar_norm[n], o,
                                                    frame.rig.cameras[n].extrinsics, true)
                                        : query_pe(m.query_pe_params, rbar_norm[n]));
            return g;
        };
    }
    // Global mode: one view-independent embedding, broadcast to all views.
    return [&m, ref_norm, n_views](const Tensor& o) {
        Tensor g = m.cfg.q_fpe ? query_fpe(m.query_pe_params, ref_norm, o, Extrinsics{}, false)
                               : query_pe(m.query_pe_params, ref_norm);
        return std::vector<Tensor>(n_views, g);
    };
}

}  // namespace detail

/// Single-frame forward pass over all camera views. `o_start` overrides the
/// model's initial decoder embedding (used by the temporal path).
inline ForwardResult forward_single(const CapeModel& m, const Frame& frame,
                                    bool want_records = false, const Tensor* o_start = nullptr) {
    if (frame.features.size() != frame.rig.num_cameras())
        throw ShapeError("forward_single: feature/camera count mismatch");
    ForwardResult res;
    res.ref_norm = sigmoid(m.ref_logits);
    Tensor ref_metric = m.global_norm.invert_t(res.ref_norm);
    Tensor self_pe = self_pos_embedding(m.query_pe_params, res.ref_norm);
    std::vector<Tensor> key_pes = detail::build_key_pes(m, frame);
    QueryPeFn qfn = detail::make_query_pe_fn(m, frame, ref_metric, res.ref_norm);
    std::vector<Tensor> layer_outputs =
        decode(m.decoder_params, m.cfg.attention_options(), o_start ? *o_start : m.o_init, self_pe,
               qfn, frame.features, key_pes, want_records ? &res.records : nullptr);
    res.outputs.reserve(layer_outputs.size());
    for (const auto& o : layer_outputs) res.outputs.push_back(predict_heads(m.heads, o, res.ref_norm));
    return res;
}

struct TemporalForwardResult {
    ForwardResult cur, prev;
};

/// Two-frame forward pass: each frame decodes against its own features and
/// rig with its own query set; the decoder embeddings interact through
/// fuse_queries after each layer (or only the last, per config). Previous-
/// frame reference points are the ego-motion propagation of the current ones.
inline TemporalForwardResult forward_temporal(const CapeModel& m, const SceneSample& sample,
                                              bool want_records = false) {
    if (m.cfg.temporal == TemporalMode::Off)
        throw ConfigError("forward_temporal: model is configured single-frame");
    TemporalForwardResult res;
    Tensor ref_norm_cur = sigmoid(m.ref_logits);
    Tensor ref_metric_cur = m.global_norm.invert_t(ref_norm_cur);
    Tensor ref_metric_prev = transform_points(sample.motion.mat, ref_metric_cur);
    Tensor ref_norm_prev = m.global_norm.apply_t(ref_metric_prev);
    res.cur.ref_norm = ref_norm_cur;
    res.prev.ref_norm = ref_norm_prev;

    Tensor self_pe_cur = self_pos_embedding(m.query_pe_params, ref_norm_cur);
    Tensor self_pe_prev = self_pos_embedding(m.query_pe_params, ref_norm_prev);
    std::vector<Tensor> key_pes_cur = detail::build_key_pes(m, sample.cur);
    std::vector<Tensor> key_pes_prev = detail::build_key_pes(m, sample.prev);
    QueryPeFn qfn_cur = detail::make_query_pe_fn(m, sample.cur, ref_metric_cur, ref_norm_cur);
    QueryPeFn qfn_prev = detail::make_query_pe_fn(m, sample.prev, ref_metric_prev, ref_norm_prev);

    Tensor o_cur = m.temporal_params.o_init_cur;
    Tensor o_prev = m.cfg.temporal == TemporalMode::SharedQueries ? m.temporal_params.o_init_cur
                                                                  : m.temporal_params.o_init_prev;
    const std::size_t n_layers = m.decoder_params.layers.size();
    const AttentionOptions opt = m.cfg.attention_options();
    for (std::size_t l = 0; l < n_layers; ++l) {
        AttentionRecord* rec_cur = nullptr;
        AttentionRecord* rec_prev = nullptr;
        if (want_records) {
            res.cur.records.emplace_back();
            res.prev.records.emplace_back();
            rec_cur = &res.cur.records.back();
            rec_prev = &res.prev.records.back();
        }
        o_cur = decoder_layer(m.decoder_params.layers[l], opt, m.decoder_params.heads, o_cur,
                              self_pe_cur, qfn_cur, sample.cur.features, key_pes_cur, rec_cur);
        o_prev = decoder_layer(m.decoder_params.layers[l], opt, m.decoder_params.heads, o_prev,
                               self_pe_prev, qfn_prev, sample.prev.features, key_pes_prev, rec_prev);
        if (m.cfg.fuse_every_layer || l + 1 == n_layers) {
            FusedQueries fused = fuse_queries(m.temporal_params, o_cur, o_prev, sample.motion,
                                              m.cfg.fusion, m.cfg.ego_embedding);
            o_cur = fused.cur;
            o_prev = fused.prev;
        }
        res.cur.outputs.push_back(predict_heads(m.heads, o_cur, ref_norm_cur));
        res.prev.outputs.push_back(predict_heads(m.heads, o_prev, ref_norm_prev));
    }
    return res;
}

/// Decodes the last decoder layer's outputs into scored detections.
inline std::vector<Detection> to_detections(const HeadOutputs& out, const Tensor& ref_norm,
                                            const CoordNormalizer& norm) {
    const std::size_t k = out.class_logits.rows(), m = out.class_logits.cols();
    std::vector<Detection> dets;
    dets.reserve(m);
    for (std::size_t q = 0; q < m; ++q) {
        double best = -1e300;
        int best_cls = 0;
        for (std::size_t c = 0; c < k; ++c) {
            if (out.class_logits.at(c, q) > best) {
                best = out.class_logits.at(c, q);
                best_cls = static_cast<int>(c);
            }
        }
        std::array<double, 10> v{};
        for (std::size_t i = 0; i < 10; ++i) v[i] = out.box_vec.at(i, q);
        Detection d;
        d.box = decode_box(v, {ref_norm.at(0, q), ref_norm.at(1, q), ref_norm.at(2, q)}, norm, best_cls);
        d.confidence = 1.0 / (1.0 + std::exp(-best));
        dets.push_back(d);
    }
    return dets;
}

}  // namespace cape
