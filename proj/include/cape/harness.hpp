#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cape/blob.hpp"
#include "cape/model.hpp"

namespace cape {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t steps = 1500;
    std::size_t batch_size = 4;  // scenes averaged per step
    double lr = 2e-3;  // cosine-decayed
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double lambda = 0.1;           // previous-frame loss weight
    double lambda_cls = 2.0;       // classification loss weight
    double velocity_weight = 0.2;  // L1 code weight on the velocity components
    FocalConfig focal;
    std::size_t train_scenes = 2000;
};

struct ExperimentConfig {
    ModelConfig model;
    SceneConfig dataset;
    TrainConfig train;
    std::size_t eval_scenes = 64;
    std::uint64_t seed = 0;

    void validate() const {
        model.validate();
        dataset.validate();
        if (dataset.channels != model.channels)
            throw ConfigError("config: dataset.channels must equal model.channels");
        if (dataset.num_classes != model.classes)
            throw ConfigError("config: dataset.num_classes must equal model.classes");
        if (train.steps == 0 || train.train_scenes == 0) throw ConfigError("config: empty training plan");
    }
};

namespace cfgjson {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
    }
}

inline PeMode pe_mode_from(const std::string& s) {
    if (s == "camera") return PeMode::Camera;
    if (s == "global") return PeMode::Global;
    throw ConfigError("config: pe_mode must be 'camera' or 'global', got '" + s + "'");
}

inline std::string to_string(PeMode m) { return m == PeMode::Camera ? "camera" : "global"; }

inline TemporalMode temporal_from(const std::string& s) {
    if (s == "off") return TemporalMode::Off;
    if (s == "shared") return TemporalMode::SharedQueries;
    if (s == "separate") return TemporalMode::SeparateQueries;
    throw ConfigError("config: temporal must be 'off', 'shared' or 'separate', got '" + s + "'");
}

inline std::string to_string(TemporalMode m) {
    switch (m) {
        case TemporalMode::Off: return "off";
        case TemporalMode::SharedQueries: return "shared";
        default: return "separate";
    }
}

inline FusionKind fusion_from(const std::string& s) {
    if (s == "channel_attention") return FusionKind::ChannelAttention;
    if (s == "concat_mlp") return FusionKind::ConcatMlp;
    throw ConfigError("config: fusion must be 'channel_attention' or 'concat_mlp', got '" + s + "'");
}

inline std::string to_string(FusionKind k) {
    return k == FusionKind::ChannelAttention ? "channel_attention" : "concat_mlp";
}

inline nlohmann::json model_to_json(const ModelConfig& m) {
    return {{"channels", m.channels},
            {"queries", m.queries},
            {"layers", m.layers},
            {"heads", m.heads},
            {"classes", m.classes},
            {"pe_mode", to_string(m.pe_mode)},
            {"bilateral", m.bilateral},
            {"q_fpe", m.q_fpe},
            {"k_fpe", m.k_fpe},
            {"per_view_softmax", m.per_view_softmax},
            {"temporal", to_string(m.temporal)},
            {"prev_loss", m.prev_loss},
            {"fusion", to_string(m.fusion)},
            {"ego_embedding", m.ego_embedding},
            {"fuse_every_layer", m.fuse_every_layer}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
    check_keys(j,
               {"channels", "queries", "layers", "heads", "classes", "pe_mode", "bilateral", "q_fpe",
                "k_fpe", "per_view_softmax", "temporal", "prev_loss", "fusion", "ego_embedding",
                "fuse_every_layer"},
               "model");
    ModelConfig m;
    m.channels = j.value("channels", m.channels);
    m.queries = j.value("queries", m.queries);
    m.layers = j.value("layers", m.layers);
    m.heads = j.value("heads", m.heads);
    m.classes = j.value("classes", m.classes);
    if (j.contains("pe_mode")) m.pe_mode = pe_mode_from(j.at("pe_mode"));
    m.bilateral = j.value("bilateral", m.bilateral);
    m.q_fpe = j.value("q_fpe", m.q_fpe);
    m.k_fpe = j.value("k_fpe", m.k_fpe);
    m.per_view_softmax = j.value("per_view_softmax", m.per_view_softmax);
    if (j.contains("temporal")) m.temporal = temporal_from(j.at("temporal"));
    m.prev_loss = j.value("prev_loss", m.prev_loss);
    if (j.contains("fusion")) m.fusion = fusion_from(j.at("fusion"));
    m.ego_embedding = j.value("ego_embedding", m.ego_embedding);
    m.fuse_every_layer = j.value("fuse_every_layer", m.fuse_every_layer);
    return m;
}

inline nlohmann::json dataset_to_json(const SceneConfig& d) {
    return {{"bounds_lo", {d.bounds_lo.x, d.bounds_lo.y, d.bounds_lo.z}},
            {"bounds_hi", {d.bounds_hi.x, d.bounds_hi.y, d.bounds_hi.z}},
            {"num_cameras", d.num_cameras},
            {"feat_h", d.feat_h},
            {"feat_w", d.feat_w},
            {"channels", d.channels},
            {"depth_min", d.depth_min},
            {"depth_max", d.depth_max},
            {"depth_bins", d.depth_bins},
            {"depth_spacing", d.depth_spacing == DepthSpacing::Uniform ? "uniform" : "linear_increasing"},
            {"min_objects", d.min_objects},
            {"max_objects", d.max_objects},
            {"num_classes", d.num_classes},
            {"max_speed", d.max_speed},
            {"ego_rot_max", d.ego_rot_max},
            {"ego_trans_max", d.ego_trans_max},
            {"frame_dt", d.frame_dt},
            {"cam_height", d.cam_height},
            {"cam_radius", d.cam_radius},
            {"fov_margin", d.fov_margin},
            {"rig_jitter_deg", d.rig_jitter_deg},
            {"bg_noise", d.bg_noise},
            {"splat_sigma", d.splat_sigma},
            {"splat_amp", d.splat_amp},
            {"seed", d.seed}};
}

inline SceneConfig dataset_from_json(const nlohmann::json& j) {
    check_keys(j,
               {"bounds_lo", "bounds_hi", "num_cameras", "feat_h", "feat_w", "channels", "depth_min",
                "depth_max", "depth_bins", "depth_spacing", "min_objects", "max_objects", "num_classes",
                "max_speed", "ego_rot_max", "ego_trans_max", "frame_dt", "cam_height", "cam_radius",
                "fov_margin", "rig_jitter_deg", "bg_noise", "splat_sigma", "splat_amp", "seed"},
               "dataset");
    SceneConfig d;
    auto vec3 = [&j](const char* key, Vec3 dflt) {
        if (!j.contains(key)) return dflt;
        const auto& a = j.at(key);
        return Vec3{a.at(0), a.at(1), a.at(2)};
    };
    d.bounds_lo = vec3("bounds_lo", d.bounds_lo);
    d.bounds_hi = vec3("bounds_hi", d.bounds_hi);
    d.num_cameras = j.value("num_cameras", d.num_cameras);
    d.feat_h = j.value("feat_h", d.feat_h);
    d.feat_w = j.value("feat_w", d.feat_w);
    d.channels = j.value("channels", d.channels);
    d.depth_min = j.value("depth_min", d.depth_min);
    d.depth_max = j.value("depth_max", d.depth_max);
    d.depth_bins = j.value("depth_bins", d.depth_bins);
    if (j.contains("depth_spacing")) {
        const std::string s = j.at("depth_spacing");
        if (s == "uniform") d.depth_spacing = DepthSpacing::Uniform;
        else if (s == "linear_increasing") d.depth_spacing = DepthSpacing::LinearIncreasing;
        else throw ConfigError("config: bad depth_spacing '" + s + "'");
    }
    d.min_objects = j.value("min_objects", d.min_objects);
    d.max_objects = j.value("max_objects", d.max_objects);
    d.num_classes = j.value("num_classes", d.num_classes);
    d.max_speed = j.value("max_speed", d.max_speed);
    d.ego_rot_max = j.value("ego_rot_max", d.ego_rot_max);
    d.ego_trans_max = j.value("ego_trans_max", d.ego_trans_max);
    d.frame_dt = j.value("frame_dt", d.frame_dt);
    d.cam_height = j.value("cam_height", d.cam_height);
    d.cam_radius = j.value("cam_radius", d.cam_radius);
    d.fov_margin = j.value("fov_margin", d.fov_margin);
    d.rig_jitter_deg = j.value("rig_jitter_deg", d.rig_jitter_deg);
    d.bg_noise = j.value("bg_noise", d.bg_noise);
    d.splat_sigma = j.value("splat_sigma", d.splat_sigma);
    d.splat_amp = j.value("splat_amp", d.splat_amp);
    d.seed = j.value("seed", d.seed);
    return d;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
    return {{"steps", t.steps},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"lambda", t.lambda},
            {"lambda_cls", t.lambda_cls},
            {"velocity_weight", t.velocity_weight},
            {"focal_alpha", t.focal.alpha},
            {"focal_gamma", t.focal.gamma},
            {"train_scenes", t.train_scenes}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    check_keys(j,
               {"steps", "batch_size", "lr", "beta1", "beta2", "adam_eps", "lambda", "lambda_cls",
                "velocity_weight", "focal_alpha", "focal_gamma", "train_scenes"},
               "train");
    TrainConfig t;
    t.steps = j.value("steps", t.steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.lr = j.value("lr", t.lr);
    t.beta1 = j.value("beta1", t.beta1);
    t.beta2 = j.value("beta2", t.beta2);
    t.adam_eps = j.value("adam_eps", t.adam_eps);
    t.lambda = j.value("lambda", t.lambda);
    t.lambda_cls = j.value("lambda_cls", t.lambda_cls);
    t.velocity_weight = j.value("velocity_weight", t.velocity_weight);
    t.focal.alpha = j.value("focal_alpha", t.focal.alpha);
    t.focal.gamma = j.value("focal_gamma", t.focal.gamma);
    t.train_scenes = j.value("train_scenes", t.train_scenes);
    return t;
}

}  // namespace cfgjson

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"model", cfgjson::model_to_json(c.model)},
            {"dataset", cfgjson::dataset_to_json(c.dataset)},
            {"train", cfgjson::train_to_json(c.train)},
            {"eval_scenes", c.eval_scenes},
            {"seed", c.seed}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    cfgjson::check_keys(j, {"model", "dataset", "train", "eval_scenes", "seed"}, "config root");
    ExperimentConfig c;
    if (j.contains("model")) c.model = cfgjson::model_from_json(j.at("model"));
    if (j.contains("dataset")) c.dataset = cfgjson::dataset_from_json(j.at("dataset"));
    if (j.contains("train")) c.train = cfgjson::train_from_json(j.at("train"));
    c.eval_scenes = j.value("eval_scenes", c.eval_scenes);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config " + path + ": " + e.what());
    }
    return experiment_from_json(j);
}

/// FNV-1a over the canonical JSON dump; stable across runs and platforms.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string s = to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ---------------------------------------------------------------------------
// Worker pool (sweeps and ablation rows)
// ---------------------------------------------------------------------------

inline std::size_t worker_cap() {
    std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CAPE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) cap = static_cast<std::size_t>(v);
    }
    return cap;
}

namespace detail {
inline thread_local bool in_parallel_worker = false;
}

/// Runs fn(0..n-1) across at most worker_cap() threads. Each index must be
/// independent; results keyed by index keep aggregate output deterministic.
/// Calls from inside a worker run serially instead of nesting pools.
template <class Fn>
inline void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(worker_cap(), std::max<std::size_t>(n, 1));
    if (workers <= 1 || detail::in_parallel_worker) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            detail::in_parallel_worker = true;
            try {
                for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment estimation; slots are keyed by parameter visit order.
class Adam {
  public:
    Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(CapeModel& model, const std::vector<std::vector<double>>& grads, double lr) {
        ++t_;
        if (m_.empty()) {
            for (const auto& g : grads) {
                m_.emplace_back(g.size(), 0.0);
                v_.emplace_back(g.size(), 0.0);
            }
        }
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        std::size_t slot = 0;
        model.visit([&](const char*, Tensor& p) {
            const auto& g = grads[slot];
            auto& m = m_[slot];
            auto& v = v_[slot];
            std::vector<double> next(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                next[i] = p[i] - lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
            p = p.with_data(std::move(next));
            ++slot;
        });
    }

  private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

inline double cosine_lr(double base, std::size_t step, std::size_t total) {
    return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitDiverged = 2;

struct TrainResult {
    CapeModel model;
    int status = kExitOk;
    std::size_t steps_run = 0;
    double step10_loss = 0;  // loss at step 10 (or first step if fewer)
    double final_loss = 0;   // mean over the last up-to-20 steps
    std::string divergence_reason;
    std::string rng_state;
};

/// Deterministic training loop: scene index = step * batch + b modulo
/// train_scenes, Adam with cosine-decayed step size. Batch members run on
/// independent tapes (parallel across workers); gradients are summed in batch
/// order, so results do not depend on scheduling. A non-finite loss (or a
/// numeric failure after the first step) stops training with divergence
/// status instead of raising.
inline TrainResult train(const ExperimentConfig& cfg,
                         const std::function<void(std::size_t, const TotalLossBreakdown&, double)>&
                             on_step = nullptr) {
    cfg.validate();
    TrainResult res{CapeModel::init(cfg.model, cfg.dataset, mix_seed(cfg.seed, 0xA11CEULL))};
    Rng rng(mix_seed(cfg.seed, 0x7124117ULL));
    Adam opt(cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps);
    std::vector<double> recent;
    const bool temporal = cfg.model.temporal != TemporalMode::Off;
    const auto weights = box_code_weights(cfg.train.velocity_weight);
    const std::size_t batch = cfg.train.batch_size;
    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
        const double lr = cosine_lr(cfg.train.lr, step, cfg.train.steps);
        TotalLossBreakdown breakdown;
        double loss_value = 0;
        try {
            struct SceneGrads {
                std::vector<std::vector<double>> g;
                double loss = 0;
                TotalLossBreakdown bd;
            };
            std::vector<SceneGrads> parts(batch);
            parallel_for(batch, [&](std::size_t b) {
                const std::uint64_t scene_index = (step * batch + b) % cfg.train.train_scenes;
                SceneSample sample = generate_scene(cfg.dataset, scene_index);
                Tape tape;
                CapeModel live = res.model.attached(tape);
                Tensor scene_loss;
                if (temporal) {
                    TemporalForwardResult fwd = forward_temporal(live, sample);
                    const bool use_prev = cfg.model.prev_loss;
                    scene_loss = total_loss(fwd.cur.outputs,
                                            use_prev ? fwd.prev.outputs : std::vector<HeadOutputs>{},
                                            sample.cur.boxes, sample.prev.boxes, live.global_norm,
                                            use_prev ? cfg.train.lambda : 0.0, cfg.train.lambda_cls,
                                            cfg.train.focal, &parts[b].bd, weights);
                } else {
                    ForwardResult fwd = forward_single(live, sample.cur);
                    scene_loss = total_loss(fwd.outputs, {}, sample.cur.boxes, {}, live.global_norm,
                                            0.0, cfg.train.lambda_cls, cfg.train.focal, &parts[b].bd,
                                            weights);
                }
                parts[b].loss = scene_loss.item();
                if (!std::isfinite(parts[b].loss)) return;  // reported below
                tape.backward(scene_loss);
                live.visit([&](const char*, Tensor& t) { parts[b].g.push_back(tape.grad(t).data()); });
            });
            double total = 0;
            bool finite = true;
            for (const auto& p : parts) {
                total += p.loss;
                if (!std::isfinite(p.loss) || p.g.empty()) finite = false;
            }
            loss_value = total / static_cast<double>(batch);
            breakdown = parts[0].bd;
            breakdown.total = loss_value;
            if (!finite || !std::isfinite(loss_value)) {
                res.status = kExitDiverged;
                res.divergence_reason = "non-finite loss at step " + std::to_string(step);
                break;
            }
            // Mean gradient, summed in batch order.
            std::vector<std::vector<double>> grads = std::move(parts[0].g);
            for (std::size_t b = 1; b < batch; ++b)
                for (std::size_t s = 0; s < grads.size(); ++s)
                    for (std::size_t i = 0; i < grads[s].size(); ++i) grads[s][i] += parts[b].g[s][i];
            const double inv_batch = 1.0 / static_cast<double>(batch);
            for (auto& g : grads)
                for (auto& v : g) v *= inv_batch;
            opt.step(res.model, grads, lr);
        } catch (const Error& e) {
            if (step == 0) throw;  // setup problems surface immediately
            res.status = kExitDiverged;
            res.divergence_reason = std::string("numeric failure at step ") + std::to_string(step) +
                                    ": " + e.what();
            break;
        }
        res.steps_run = step + 1;
        if (step == 10 || (cfg.train.steps <= 10 && step == 0)) res.step10_loss = loss_value;
        recent.push_back(loss_value);
        if (recent.size() > 20) recent.erase(recent.begin());
        if (on_step) on_step(step, breakdown, lr);
    }
    if (!recent.empty()) {
        double s = 0;
        for (double v : recent) s += v;
        res.final_loss = s / static_cast<double>(recent.size());
    }
    res.rng_state = rng.save_state();
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Runs detection over `count` scenes starting at `first_scene` and scores
/// against the current-frame ground truths.
inline EvalResult eval_model(const CapeModel& model, const SceneConfig& dataset,
                             std::uint64_t first_scene, std::size_t count) {
    if (count == 0) throw ConfigError("eval_model: empty dataset");
    std::vector<std::vector<Detection>> preds;
    std::vector<std::vector<Box3D>> gts;
    for (std::uint64_t i = 0; i < count; ++i) {
        SceneSample sample = generate_scene(dataset, first_scene + i);
        const ForwardResult fwd = model.cfg.temporal == TemporalMode::Off
                                      ? forward_single(model, sample.cur)
                                      : forward_temporal(model, sample).cur;
        preds.push_back(to_detections(fwd.outputs.back(), fwd.ref_norm, model.global_norm));
        gts.push_back(sample.cur.boxes);
    }
    return evaluate(preds, gts);
}

inline nlohmann::json eval_to_json(const EvalResult& r) {
    nlohmann::json per;
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
        std::ostringstream key;
        key << "ap@" << r.thresholds[i] << "m";
        per[key.str()] = r.ap[i];
    }
    return {{"ap", per},
            {"mean_ap", r.mean_ap},
            {"mate", std::isnan(r.mate) ? nlohmann::json() : nlohmann::json(r.mate)},
            {"mave", std::isnan(r.mave) ? nlohmann::json() : nlohmann::json(r.mave)}};
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + parameter blob
// ---------------------------------------------------------------------------

inline void save_checkpoint(const CapeModel& model, const ExperimentConfig& cfg, std::size_t steps,
                            const std::string& rng_state, const std::string& path) {
    nlohmann::json manifest;
    manifest["format"] = "cape-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = to_json(cfg);
    manifest["config_hash"] = config_hash(cfg);
    manifest["step"] = steps;
    manifest["rng_state"] = rng_state;
    manifest["normalizers"] = {
        {"global",
         {{"lo", {model.global_norm.lo.x, model.global_norm.lo.y, model.global_norm.lo.z}},
          {"hi", {model.global_norm.hi.x, model.global_norm.hi.y, model.global_norm.hi.z}}}},
        {"camera",
         {{"lo", {model.camera_norm.lo.x, model.camera_norm.lo.y, model.camera_norm.lo.z}},
          {"hi", {model.camera_norm.hi.x, model.camera_norm.hi.y, model.camera_norm.hi.z}}}}};

    std::vector<double> payload;
    nlohmann::json params = nlohmann::json::array();
    CapeModel& mutable_model = const_cast<CapeModel&>(model);
    mutable_model.visit([&](const char* name, Tensor& t) {
        params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
        payload.insert(payload.end(), t.data().begin(), t.data().end());
    });
    manifest["params"] = params;
    const std::string blob_name = std::filesystem::path(path).filename().string() + ".blob";
    manifest["param_blob"] = blob_name;
    write_blob((std::filesystem::path(path).parent_path() / blob_name).string(),
               {payload.size()}, payload);
    std::ofstream os(path);
    if (!os) throw Error("save_checkpoint: cannot open " + path);
    os << manifest.dump(1) << '\n';
}

struct Checkpoint {
    CapeModel model;
    ExperimentConfig config;
    std::size_t step = 0;
    std::string rng_state;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("load_checkpoint: cannot open " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
        if (manifest.at("format") != "cape-checkpoint")
            throw ParseError("load_checkpoint: not a checkpoint file");
        Checkpoint ck;
        ck.config = experiment_from_json(manifest.at("config"));
        if (manifest.at("config_hash") != config_hash(ck.config))
            throw ParseError("load_checkpoint: config hash mismatch");
        ck.step = manifest.at("step");
        ck.rng_state = manifest.at("rng_state");
        ck.model = CapeModel::init(ck.config.model, ck.config.dataset, mix_seed(ck.config.seed, 0xA11CEULL));
        const std::string blob_path =
            (std::filesystem::path(path).parent_path() / manifest.at("param_blob").get<std::string>())
                .string();
        Blob blob = read_blob(blob_path);
        std::size_t index = 0;
        const auto& params = manifest.at("params");
        ck.model.visit([&](const char* name, Tensor& t) {
            const auto& entry = params.at(index);
            if (entry.at("name") != name)
                throw ParseError("load_checkpoint: parameter order mismatch at " + std::string(name));
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            if (shape != t.shape())
                throw ParseError("load_checkpoint: shape mismatch for " + std::string(name));
            const std::size_t offset = entry.at("offset");
            if (offset + t.size() > blob.payload.size())
                throw ParseError("load_checkpoint: blob too small for " + std::string(name));
            t = t.with_data(std::vector<double>(
                blob.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                blob.payload.begin() + static_cast<std::ptrdiff_t>(offset + t.size())));
            ++index;
        });
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_checkpoint: " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Ablations (Tables 4-7 analogs)
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string label;
    ExperimentConfig config;
};

inline std::vector<AblationRow> ablation_rows(const ExperimentConfig& base, int table) {
    std::vector<AblationRow> rows;
    auto row = [&](const std::string& label, auto&& tweak) {
        ExperimentConfig c = base;
        tweak(c.model);
        rows.push_back({label, std::move(c)});
    };
    switch (table) {
        case 4:
            // Camera-view PE x bilateral attention.
            row("(a) global-pe", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.pe_mode = PeMode::Global;
                m.bilateral = false;
            });
            row("(b) global-pe+bilateral", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.pe_mode = PeMode::Global;
                m.bilateral = true;
            });
            row("(c) camera-pe", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.pe_mode = PeMode::Camera;
                m.bilateral = false;
            });
            row("(d) camera-pe+bilateral", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.pe_mode = PeMode::Camera;
                m.bilateral = true;
            });
            break;
        case 5:
            // Feature-guided PE on queries / keys.
            row("(a) plain", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.q_fpe = false;
                m.k_fpe = false;
            });
            row("(b) q-fpe", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.q_fpe = true;
                m.k_fpe = false;
            });
            row("(c) k-fpe", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.q_fpe = false;
                m.k_fpe = true;
            });
            row("(d) q-fpe+k-fpe", [](ModelConfig& m) {
                m.temporal = TemporalMode::Off;
                m.q_fpe = true;
                m.k_fpe = true;
            });
            break;
        case 6:
            // Query sharing and previous-frame supervision.
            row("(a) shared-queries", [](ModelConfig& m) {
                m.temporal = TemporalMode::SharedQueries;
                m.prev_loss = false;
            });
            row("(b) separate-queries", [](ModelConfig& m) {
                m.temporal = TemporalMode::SeparateQueries;
                m.prev_loss = false;
            });
            row("(c) separate-queries+prev-loss", [](ModelConfig& m) {
                m.temporal = TemporalMode::SeparateQueries;
                m.prev_loss = true;
            });
            break;
        case 7:
            // Fusion mechanism x ego-motion embedding.
            row("(a) concat-mlp", [](ModelConfig& m) {
                m.temporal = TemporalMode::SeparateQueries;
                m.prev_loss = true;
                m.fusion = FusionKind::ConcatMlp;
                m.ego_embedding = false;
            });
            row("(b) concat-mlp+ego", [](ModelConfig& m) {
                m.temporal = TemporalMode::SeparateQueries;
                m.prev_loss = true;
                m.fusion = FusionKind::ConcatMlp;
                m.ego_embedding = true;
            });
            row("(c) channel-att", [](ModelConfig& m) {
                m.temporal = TemporalMode::SeparateQueries;
                m.prev_loss = true;
                m.fusion = FusionKind::ChannelAttention;
                m.ego_embedding = false;
            });
            row("(d) channel-att+ego", [](ModelConfig& m) {
                m.temporal = TemporalMode::SeparateQueries;
                m.prev_loss = true;
                m.fusion = FusionKind::ChannelAttention;
                m.ego_embedding = true;
            });
            break;
        default:
            throw ConfigError("ablate: table must be one of 4, 5, 6, 7");
    }
    return rows;
}

struct AblationCell {
    int status = kExitOk;
    EvalResult metrics;
    std::string note;
};

struct AblationOutcome {
    std::string label;
    std::vector<AblationCell> per_seed;
    double mean_ap = 0, mean_ap2m = 0, mean_mave = 0;
    bool any_diverged = false;
};

/// Trains each row under `seeds` seeds (shared across rows) and evaluates on
/// held-out scenes. Divergence is recorded, not raised.
inline std::vector<AblationOutcome> run_ablation(const ExperimentConfig& base, int table,
                                                 std::size_t seeds) {
    const std::vector<AblationRow> rows = ablation_rows(base, table);
    std::vector<AblationOutcome> outcomes(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        outcomes[r].label = rows[r].label;
        outcomes[r].per_seed.resize(seeds);
    }
    struct Job {
        std::size_t row, seed_idx;
    };
    std::vector<Job> jobs;
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t s = 0; s < seeds; ++s) jobs.push_back({r, s});
    parallel_for(jobs.size(), [&](std::size_t ji) {
        const Job& job = jobs[ji];
        ExperimentConfig cfg = rows[job.row].config;
        cfg.seed = mix_seed(base.seed, 0x5EED0000ULL + job.seed_idx);
        AblationCell& cell = outcomes[job.row].per_seed[job.seed_idx];
        TrainResult tr = train(cfg);
        cell.status = tr.status;
        cell.note = tr.divergence_reason;
        if (tr.status == kExitOk)
            cell.metrics = eval_model(tr.model, cfg.dataset, cfg.train.train_scenes, cfg.eval_scenes);
    });
    for (auto& out : outcomes) {
        std::size_t ok = 0;
        for (const auto& cell : out.per_seed) {
            if (cell.status != kExitOk) {
                out.any_diverged = true;
                continue;
            }
            out.mean_ap += cell.metrics.mean_ap;
            out.mean_ap2m += cell.metrics.ap.size() > 2 ? cell.metrics.ap[2] : 0.0;
            out.mean_mave += std::isnan(cell.metrics.mave) ? 10.0 : cell.metrics.mave;
            ++ok;
        }
        if (ok) {
            out.mean_ap /= static_cast<double>(ok);
            out.mean_ap2m /= static_cast<double>(ok);
            out.mean_mave /= static_cast<double>(ok);
        }
    }
    return outcomes;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationOutcome>& outcomes) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& out : outcomes) {
        nlohmann::json per_seed = nlohmann::json::array();
        for (const auto& cell : out.per_seed) {
            nlohmann::json c = {{"status", cell.status}};
            if (cell.status == kExitOk) c["metrics"] = eval_to_json(cell.metrics);
            if (!cell.note.empty()) c["note"] = cell.note;
            per_seed.push_back(c);
        }
        rows.push_back({{"label", out.label},
                        {"diverged", out.any_diverged},
                        {"mean_ap", out.mean_ap},
                        {"mean_ap2m", out.mean_ap2m},
                        {"mean_mave", out.mean_mave},
                        {"seeds", per_seed}});
    }
    return {{"rows", rows}};
}

// ---------------------------------------------------------------------------
// Extrinsic-noise robustness sweep
// ---------------------------------------------------------------------------

struct RobustnessCurve {
    std::string label;
    double baseline_map = 0;
    std::vector<double> levels;
    std::vector<double> mean_drop;  // baseline minus noisy mean AP, per level
};

/// Evaluates a trained model under inference-time extrinsic rotation noise.
/// The perturbation touches only the rig the model sees, never the features
/// (they were rendered by the true cameras).
inline EvalResult eval_with_noise(const CapeModel& model, const SceneConfig& dataset,
                                  std::uint64_t first_scene, std::size_t count, double r_max_deg,
                                  Rng& rng) {
    std::vector<std::vector<Detection>> preds;
    std::vector<std::vector<Box3D>> gts;
    for (std::uint64_t i = 0; i < count; ++i) {
        SceneSample sample = generate_scene(dataset, first_scene + i);
        for (auto& cam : sample.cur.rig.cameras) cam.extrinsics = perturb_extrinsics(cam.extrinsics, r_max_deg, rng);
        for (auto& cam : sample.prev.rig.cameras) cam.extrinsics = perturb_extrinsics(cam.extrinsics, r_max_deg, rng);
        const ForwardResult fwd = model.cfg.temporal == TemporalMode::Off
                                      ? forward_single(model, sample.cur)
                                      : forward_temporal(model, sample).cur;
        preds.push_back(to_detections(fwd.outputs.back(), fwd.ref_norm, model.global_norm));
        gts.push_back(sample.cur.boxes);
    }
    return evaluate(preds, gts);
}

/// Mean AP drop per noise level over `trials` independent noise draws.
inline RobustnessCurve robustness_sweep(const CapeModel& model, const SceneConfig& dataset,
                                        std::uint64_t first_scene, std::size_t count,
                                        const std::vector<double>& levels, std::size_t trials,
                                        std::uint64_t noise_seed, const std::string& label) {
    RobustnessCurve curve;
    curve.label = label;
    curve.levels = levels;
    curve.baseline_map = eval_model(model, dataset, first_scene, count).mean_ap;
    curve.mean_drop.assign(levels.size(), 0.0);
    std::vector<std::vector<double>> drops(levels.size(), std::vector<double>(trials, 0.0));
    parallel_for(levels.size() * trials, [&](std::size_t ji) {
        const std::size_t li = ji / trials;
        const std::size_t trial = ji % trials;
        Rng rng(mix_seed(noise_seed, 0x4015EULL + ji));
        const EvalResult noisy = eval_with_noise(model, dataset, first_scene, count, levels[li], rng);
        drops[li][trial] = curve.baseline_map - noisy.mean_ap;
    });
    for (std::size_t li = 0; li < levels.size(); ++li) {
        double s = 0;
        for (double d : drops[li]) s += d;
        curve.mean_drop[li] = s / static_cast<double>(trials);
    }
    return curve;
}

inline nlohmann::json robustness_to_json(const std::vector<RobustnessCurve>& curves) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : curves) {
        out.push_back({{"label", c.label},
                       {"baseline_mean_ap", c.baseline_map},
                       {"levels_deg", c.levels},
                       {"mean_ap_drop", c.mean_drop}});
    }
    return {{"curves", out}};
}

// ---------------------------------------------------------------------------
// Attention dumps (Fig. 5 analog)
// ---------------------------------------------------------------------------

/// Writes one CSV per (layer, head, view, kind) plus a manifest. Maps are
/// restricted to the requested query ids (all queries when empty). The
/// paper's visualization threshold is recorded as metadata; data is never
/// zeroed.
inline nlohmann::json dump_attention(const CapeModel& model, const SceneSample& sample,
                                     std::vector<std::size_t> query_ids, const std::string& out_dir) {
    if (!model.cfg.bilateral)
        throw ConfigError("dump_attention: attention decomposition requires a bilateral checkpoint");
    const std::size_t queries = model.cfg.queries;
    if (query_ids.empty())
        for (std::size_t q = 0; q < queries; ++q) query_ids.push_back(q);
    for (auto q : query_ids)
        if (q >= queries)
            throw ConfigError("dump_attention: query id " + std::to_string(q) + " out of range");

    const ForwardResult fwd = model.cfg.temporal == TemporalMode::Off
                                  ? forward_single(model, sample.cur, true)
                                  : forward_temporal(model, sample, true).cur;
    std::filesystem::create_directories(out_dir);
    nlohmann::json files = nlohmann::json::array();
    auto write_csv = [&](const Tensor& map, const std::string& name) {
        std::ofstream os(out_dir + "/" + name);
        if (!os) throw Error("dump_attention: cannot open " + name);
        os << std::setprecision(17);
        for (std::size_t qi = 0; qi < query_ids.size(); ++qi) {
            for (std::size_t i = 0; i < map.cols(); ++i) {
                if (i) os << ',';
                os << map.at(query_ids[qi], i);
            }
            os << '\n';
        }
    };
    for (std::size_t l = 0; l < fwd.records.size(); ++l) {
        const AttentionRecord& rec = fwd.records[l];
        for (std::size_t h = 0; h < rec.heads; ++h)
            for (std::size_t n = 0; n < rec.views; ++n) {
                const AttentionMaps& maps = rec.at(h, n);
                const std::pair<const char*, const Tensor*> kinds[] = {
                    {"local", &maps.local}, {"global", &maps.global},
                    {"overall", &maps.overall}, {"softmax", &maps.softmax}};
                for (const auto& [kind, map] : kinds) {
                    std::ostringstream name;
                    name << "attn_l" << l << "_h" << h << "_v" << n << "_" << kind << ".csv";
                    write_csv(*map, name.str());
                    files.push_back({{"file", name.str()},
                                     {"layer", l},
                                     {"head", h},
                                     {"view", n},
                                     {"kind", kind},
                                     {"rows", query_ids.size()},
                                     {"cols", map->cols()}});
                }
            }
    }
    nlohmann::json manifest = {{"query_ids", query_ids},
                               {"visualization_threshold", 1e-4},
                               {"maps", files}};
    std::ofstream os(out_dir + "/manifest.json");
    os << manifest.dump(1) << '\n';
    return manifest;
}

}  // namespace cape
