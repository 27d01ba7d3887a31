#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cape/blob.hpp"
#include "cape/detection.hpp"
#include "cape/geometry.hpp"
#include "cape/tensor.hpp"

namespace cape {

/// Everything that defines the synthetic dataset. A dataset is the pure
/// function of (config, scene index); no state lives outside this struct.
struct SceneConfig {
    Vec3 bounds_lo{-8, -8, -0.5};
    Vec3 bounds_hi{8, 8, 2.5};
    std::size_t num_cameras = 4;
    std::size_t feat_h = 12, feat_w = 12;
    std::size_t channels = 32;
    double depth_min = 1.0, depth_max = 28.0;
    std::size_t depth_bins = 8;
    DepthSpacing depth_spacing = DepthSpacing::Uniform;
    std::size_t min_objects = 1, max_objects = 3;
    std::size_t num_classes = 4;
    double max_speed = 3.0;       // m/s, per horizontal axis
    double ego_rot_max = 0.12;    // radians
    double ego_trans_max = 1.0;   // meters
    double frame_dt = 0.5;        // seconds
    double cam_height = 1.6;      // meters above ground plane
    double cam_radius = 0.8;      // ring radius
    double fov_margin = 1.30;     // hfov = margin * (2*pi / N): >1 overlaps views
    double rig_jitter_deg = 0.0;  // per-scene yaw jitter on every camera
    double bg_noise = 0.02;
    double splat_sigma = 1.1;     // pixels
    double splat_amp = 4.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (bounds_hi.x <= bounds_lo.x || bounds_hi.y <= bounds_lo.y || bounds_hi.z <= bounds_lo.z)
            throw ConfigError("SceneConfig: empty scene bounds");
        if (num_cameras < 1) throw ConfigError("SceneConfig: need at least one camera");
        if (min_objects > max_objects) throw ConfigError("SceneConfig: min_objects > max_objects");
        if (num_classes < 1) throw ConfigError("SceneConfig: need at least one class");
        if (feat_h == 0 || feat_w == 0 || channels == 0) throw ConfigError("SceneConfig: empty feature maps");
        if (depth_min <= 0 || depth_max <= depth_min) throw ConfigError("SceneConfig: bad depth range");
        if (frame_dt <= 0) throw ConfigError("SceneConfig: frame_dt must be positive");
    }

    /// Normalization used by the model for global coordinates.
    CoordNormalizer global_normalizer() const { return {bounds_lo, bounds_hi}; }

    /// Symmetric normalization for camera-frame coordinates; the extent
    /// covers any in-bounds point seen from any in-bounds camera.
    CoordNormalizer camera_normalizer() const {
        const Vec3 span = bounds_hi - bounds_lo;
        const double ext = std::max(span.norm(), depth_max);
        return {{-ext, -ext, -ext}, {ext, ext, ext}};
    }
};

/// One annotated frame: ground truths, calibrated rig, one feature map per
/// camera in the [C x H*W] layout the decoder consumes.
struct Frame {
    std::vector<Box3D> boxes;
    CameraRig rig;
    std::vector<Tensor> features;
};

/// Two consecutive frames plus the ego motion linking them (current-frame
/// coordinates to previous-frame coordinates).
struct SceneSample {
    Frame cur, prev;
    EgoMotion motion;
};

// ---------------------------------------------------------------------------
// Feature code: how object appearance is written into the feature maps.
// Class identity and box attributes map to fixed pseudo-random channel
// directions; these depend only on the channel count, never on the scene.
// ---------------------------------------------------------------------------

namespace featcode {

/// Unit vector supported on channels [lo, hi), pseudo-random but fixed by
/// the tag. Class and attribute codes use disjoint channel ranges so the
/// class energy is never cancelled by attribute modulation.
inline std::vector<double> unit_direction(std::size_t channels, std::uint64_t tag, std::size_t lo,
                                          std::size_t hi) {
    Rng rng(mix_seed(0xFEA7C0DEULL, tag));
    std::vector<double> v(channels, 0.0);
    double norm2 = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
        v[i] = rng.normal();
        norm2 += v[i] * v[i];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t i = lo; i < hi; ++i) v[i] *= inv;
    return v;
}

inline std::vector<double> class_direction(std::size_t channels, int class_id) {
    return unit_direction(channels, 0x10000ULL + static_cast<std::uint64_t>(class_id), 0,
                          (channels + 1) / 2);
}

// Attribute slots: log sizes (3), sin/cos yaw (2), velocity (2).
inline constexpr std::size_t kNumAttributes = 7;

inline std::vector<double> attribute_direction(std::size_t channels, std::size_t slot) {
    return unit_direction(channels, 0x20000ULL + slot, (channels + 1) / 2, channels);
}

/// Directions carrying the per-pixel coordinate ramps that stand in for the
/// positional texture a real backbone would produce.
inline std::vector<double> position_direction(std::size_t channels, std::size_t axis) {
    return unit_direction(channels, 0x30000ULL + axis, (channels + 1) / 2, channels);
}

/// Directions carrying the splat's camera-frame position (the 3D evidence an
/// image backbone distills from appearance and context).
inline std::vector<double> campos_direction(std::size_t channels, std::size_t axis) {
    return unit_direction(channels, 0x40000ULL + axis, (channels + 1) / 2, channels);
}

inline std::array<double, kNumAttributes> attributes(const Box3D& b, double velocity_scale) {
    return {std::log(b.size.x), std::log(b.size.y), std::log(b.size.z),
            std::sin(b.yaw),    std::cos(b.yaw),
            b.vx / velocity_scale, b.vy / velocity_scale};
}

/// Channel pattern of one box: class direction plus attribute modulation.
inline std::vector<double> box_code(const SceneConfig& cfg, const Box3D& b) {
    std::vector<double> code = class_direction(cfg.channels, b.class_id);
    const double vel_scale = std::max(cfg.max_speed, 1.0);
    const auto attrs = attributes(b, vel_scale);
    constexpr double attr_gain = 0.35;
    for (std::size_t slot = 0; slot < kNumAttributes; ++slot) {
        const auto dir = attribute_direction(cfg.channels, slot);
        for (std::size_t c = 0; c < cfg.channels; ++c) code[c] += attr_gain * attrs[slot] * dir[c];
    }
    return code;
}

}  // namespace featcode

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Ring of outward-facing cameras around the scene center, optionally with a
/// per-scene yaw jitter. Camera frame: x right, y down, z forward.
inline CameraRig make_ring_rig(const SceneConfig& cfg, Rng& rng) {
    CameraRig rig;
    rig.feat_h = cfg.feat_h;
    rig.feat_w = cfg.feat_w;
    rig.depth_bins = make_depth_bins(cfg.depth_min, cfg.depth_max, cfg.depth_bins, cfg.depth_spacing);
    // Pinhole FOV cannot reach pi; clamp wide-angle requests from small rigs.
    const double hfov =
        std::min(cfg.fov_margin * 2.0 * M_PI / static_cast<double>(cfg.num_cameras), 2.4);
    const double fx = (static_cast<double>(cfg.feat_w) / 2.0) / std::tan(hfov / 2.0);
    const double fy = fx;
    const double cx = (static_cast<double>(cfg.feat_w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(cfg.feat_h) - 1.0) / 2.0;
    for (std::size_t n = 0; n < cfg.num_cameras; ++n) {
        double theta = 2.0 * M_PI * static_cast<double>(n) / static_cast<double>(cfg.num_cameras);
        if (cfg.rig_jitter_deg > 0.0)
            theta += rng.uniform(-cfg.rig_jitter_deg, cfg.rig_jitter_deg) * M_PI / 180.0;
        const Vec3 pos{cfg.cam_radius * std::cos(theta), cfg.cam_radius * std::sin(theta), cfg.cam_height};
        Mat3 rot;
        rot.m = {std::sin(theta), -std::cos(theta), 0,   // right
                 0,               0,                -1,  // down
                 std::cos(theta), std::sin(theta),  0};  // forward
        const Vec3 t = (rot * pos) * -1.0;
        rig.cameras.push_back({Intrinsics(fx, fy, cx, cy), Extrinsics::from_rt(rot, t)});
    }
    rig.validate();
    return rig;
}

/// True when the box center lands strictly inside some camera's image with a
/// usable depth.
inline bool visible_in_some_camera(const Vec3& center, const CameraRig& rig, const SceneConfig& cfg) {
    for (const auto& cam : rig.cameras) {
        const Vec3 p = cam.extrinsics.mat.apply(center);
        if (p.z < cfg.depth_min || p.z > cfg.depth_max) continue;
        const Vec3 uvw = cam.intrinsics.matrix() * p;
        const double u = uvw.x / p.z, v = uvw.y / p.z;
        if (u >= 0.0 && u <= static_cast<double>(cfg.feat_w) - 1.0 && v >= 0.0 &&
            v <= static_cast<double>(cfg.feat_h) - 1.0)
            return true;
    }
    return false;
}

/// Background noise and coordinate ramps, plus one Gaussian splat per
/// visible box centered at the projected box center. Splat amplitude encodes
/// inverse depth; the channel pattern encodes class, size, yaw and velocity.
/// The ramps give features the positional texture a learned encoder would
/// have. Boxes behind the camera contribute nothing.
inline Tensor render_features(const std::vector<Box3D>& boxes, const CameraRig::Camera& cam,
                              const SceneConfig& cfg, Rng& bg_rng) {
    const std::size_t pixels = cfg.feat_h * cfg.feat_w;
    std::vector<double> data(cfg.channels * pixels);
    for (auto& v : data) v = bg_rng.normal(0.0, cfg.bg_noise);
    const auto dir_u = featcode::position_direction(cfg.channels, 0);
    const auto dir_v = featcode::position_direction(cfg.channels, 1);
    constexpr double pos_gain = 0.5;
    for (std::size_t v = 0; v < cfg.feat_h; ++v)
        for (std::size_t u = 0; u < cfg.feat_w; ++u) {
            const std::size_t pix = v * cfg.feat_w + u;
            const double un = static_cast<double>(u) / static_cast<double>(cfg.feat_w - 1);
            const double vn = static_cast<double>(v) / static_cast<double>(cfg.feat_h - 1);
            for (std::size_t c = 0; c < cfg.channels; ++c)
                data[c * pixels + pix] += pos_gain * (un * dir_u[c] + vn * dir_v[c]);
        }
    const double margin = 3.0 * cfg.splat_sigma;
    for (const auto& b : boxes) {
        const Vec3 p = cam.extrinsics.mat.apply(b.center);
        if (p.z <= 0.0) continue;
        const Vec3 uvw = cam.intrinsics.matrix() * p;
        const double u0 = uvw.x / p.z, v0 = uvw.y / p.z;
        if (u0 < -margin || u0 > static_cast<double>(cfg.feat_w) - 1.0 + margin || v0 < -margin ||
            v0 > static_cast<double>(cfg.feat_h) - 1.0 + margin)
            continue;
        const double amp = cfg.splat_amp / p.z;
        auto code = featcode::box_code(cfg, b);
        // Camera-frame position of the object, on the depth scale.
        const double campos[3] = {p.x / cfg.depth_max, p.y / cfg.depth_max, p.z / cfg.depth_max};
        for (std::size_t axis = 0; axis < 3; ++axis) {
            const auto dir = featcode::campos_direction(cfg.channels, axis);
            for (std::size_t c = 0; c < cfg.channels; ++c) code[c] += campos[axis] * dir[c];
        }
        for (std::size_t v = 0; v < cfg.feat_h; ++v)
            for (std::size_t u = 0; u < cfg.feat_w; ++u) {
                const double du = static_cast<double>(u) - u0;
                const double dv = static_cast<double>(v) - v0;
                const double w = std::exp(-(du * du + dv * dv) / (2.0 * cfg.splat_sigma * cfg.splat_sigma));
                if (w < 1e-8) continue;
                const std::size_t pix = v * cfg.feat_w + u;
                for (std::size_t c = 0; c < cfg.channels; ++c) data[c * pixels + pix] += amp * w * code[c];
            }
    }
    return Tensor({cfg.channels, pixels}, std::move(data));
}

/// Deterministic scene construction: boxes uniform in bounds (resampled
/// until visible somewhere), ring rig, sampled ego motion, previous frame
/// derived from current ground truths.
inline SceneSample generate_scene(const SceneConfig& cfg, std::uint64_t scene_index) {
    cfg.validate();
    const std::uint64_t scene_seed = mix_seed(cfg.seed, scene_index);
    Rng rng(scene_seed);

    SceneSample sample;
    sample.cur.rig = make_ring_rig(cfg, rng);
    sample.prev.rig = sample.cur.rig;

    const std::size_t count =
        cfg.min_objects + (cfg.max_objects > cfg.min_objects
                               ? rng.uniform_index(cfg.max_objects - cfg.min_objects + 1)
                               : 0);
    for (std::size_t i = 0; i < count; ++i) {
        Box3D b;
        b.class_id = static_cast<int>(rng.uniform_index(cfg.num_classes));
        // Class-dependent base size with mild jitter.
        const double k = static_cast<double>(b.class_id);
        b.size = {1.2 + 0.3 * k + rng.uniform(-0.1, 0.1), 2.5 + 0.5 * k + rng.uniform(-0.2, 0.2),
                  1.4 + 0.2 * k + rng.uniform(-0.1, 0.1)};
        b.yaw = wrap_angle(rng.uniform(-M_PI, M_PI));
        b.vx = rng.uniform(-cfg.max_speed, cfg.max_speed);
        b.vy = rng.uniform(-cfg.max_speed, cfg.max_speed);
        for (int attempt = 0; attempt < 256; ++attempt) {
            b.center = {rng.uniform(cfg.bounds_lo.x, cfg.bounds_hi.x),
                        rng.uniform(cfg.bounds_lo.y, cfg.bounds_hi.y),
                        rng.uniform(std::max(cfg.bounds_lo.z, 0.0), std::min(cfg.bounds_hi.z, 1.5))};
            if (visible_in_some_camera(b.center, sample.cur.rig, cfg)) break;
            if (attempt == 255) throw ConfigError("generate_scene: could not place a visible box");
        }
        sample.cur.boxes.push_back(b);
    }

    const Mat3 ego_rot = Mat3::rot_z(rng.uniform(-cfg.ego_rot_max, cfg.ego_rot_max));
    const Vec3 ego_t{rng.uniform(-cfg.ego_trans_max, cfg.ego_trans_max),
                     rng.uniform(-cfg.ego_trans_max, cfg.ego_trans_max), 0.0};
    sample.motion = EgoMotion(Mat4::from_rt(ego_rot, ego_t), cfg.frame_dt);
    sample.prev.boxes = generate_prev_gt(sample.cur.boxes, sample.motion);

    for (std::size_t n = 0; n < cfg.num_cameras; ++n) {
        Rng bg_cur(mix_seed(scene_seed, 0x0B00 + n));
        Rng bg_prev(mix_seed(scene_seed, 0x1B00 + n));
        sample.cur.features.push_back(render_features(sample.cur.boxes, sample.cur.rig.cameras[n], cfg, bg_cur));
        sample.prev.features.push_back(
            render_features(sample.prev.boxes, sample.prev.rig.cameras[n], cfg, bg_prev));
    }
    return sample;
}

// ---------------------------------------------------------------------------
// Serialization: JSON manifest + CAPEBLOB feature sidecar
// ---------------------------------------------------------------------------

inline constexpr int kSceneSchemaVersion = 1;

namespace detail {

inline nlohmann::json box_to_json(const Box3D& b) {
    return {{"center", {b.center.x, b.center.y, b.center.z}},
            {"size", {b.size.x, b.size.y, b.size.z}},
            {"yaw", b.yaw},
            {"velocity", {b.vx, b.vy}},
            {"class_id", b.class_id}};
}

inline Box3D box_from_json(const nlohmann::json& j) {
    Box3D b;
    b.center = {j.at("center").at(0), j.at("center").at(1), j.at("center").at(2)};
    b.size = {j.at("size").at(0), j.at("size").at(1), j.at("size").at(2)};
    b.yaw = j.at("yaw");
    b.vx = j.at("velocity").at(0);
    b.vy = j.at("velocity").at(1);
    b.class_id = j.at("class_id");
    return b;
}

inline nlohmann::json mat4_to_json(const Mat4& m) {
    return std::vector<double>(m.m.begin(), m.m.end());
}

inline Mat4 mat4_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 16) throw ParseError("scene: matrix must have 16 entries");
    Mat4 m;
    for (std::size_t i = 0; i < 16; ++i) m.m[i] = j.at(i);
    return m;
}

inline nlohmann::json rig_to_json(const CameraRig& rig) {
    nlohmann::json cams = nlohmann::json::array();
    for (const auto& c : rig.cameras)
        cams.push_back({{"fx", c.intrinsics.fx},
                        {"fy", c.intrinsics.fy},
                        {"cx", c.intrinsics.cx},
                        {"cy", c.intrinsics.cy},
                        {"extrinsics", mat4_to_json(c.extrinsics.mat)}});
    return {{"feat_h", rig.feat_h},
            {"feat_w", rig.feat_w},
            {"depth_bins", rig.depth_bins},
            {"cameras", cams}};
}

inline CameraRig rig_from_json(const nlohmann::json& j) {
    CameraRig rig;
    rig.feat_h = j.at("feat_h");
    rig.feat_w = j.at("feat_w");
    rig.depth_bins = j.at("depth_bins").get<std::vector<double>>();
    for (const auto& c : j.at("cameras")) {
        Intrinsics intr(c.at("fx"), c.at("fy"), c.at("cx"), c.at("cy"));
        Extrinsics extr(mat4_from_json(c.at("extrinsics")));
        rig.cameras.push_back({intr, extr});
    }
    rig.validate();
    return rig;
}

}  // namespace detail

/// Writes `sample` as <path> (JSON) plus <path>.blob holding the feature
/// maps of both frames, extents {2, N, C, H*W}.
inline void save_scene(const SceneSample& sample, const std::string& path) {
    const std::string blob_name = std::filesystem::path(path).filename().string() + ".blob";
    nlohmann::json j;
    j["schema_version"] = kSceneSchemaVersion;
    j["feature_blob"] = blob_name;
    j["ego_motion"] = {{"matrix", detail::mat4_to_json(sample.motion.mat)}, {"dt", sample.motion.dt}};
    for (const Frame* f : {&sample.cur, &sample.prev}) {
        nlohmann::json jf;
        jf["rig"] = detail::rig_to_json(f->rig);
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& b : f->boxes) boxes.push_back(detail::box_to_json(b));
        jf["boxes"] = boxes;
        j["frames"].push_back(jf);
    }

    const std::size_t n = sample.cur.features.size();
    const std::size_t c = n ? sample.cur.features[0].rows() : 0;
    const std::size_t pixels = n ? sample.cur.features[0].cols() : 0;
    std::vector<double> payload;
    payload.reserve(2 * n * c * pixels);
    for (const Frame* f : {&sample.cur, &sample.prev})
        for (const auto& feat : f->features)
            payload.insert(payload.end(), feat.data().begin(), feat.data().end());
    write_blob((std::filesystem::path(path).parent_path() / blob_name).string(),
               {2, n, c, pixels}, payload);

    std::ofstream os(path);
    if (!os) throw Error("save_scene: cannot open " + path);
    os << j.dump(1) << '\n';
}

inline SceneSample load_scene(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("load_scene: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_scene: " + path + ": " + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != kSceneSchemaVersion)
            throw ParseError("load_scene: unsupported schema_version");
        SceneSample sample;
        sample.motion = EgoMotion(detail::mat4_from_json(j.at("ego_motion").at("matrix")),
                                  j.at("ego_motion").at("dt").get<double>());
        const auto& frames = j.at("frames");
        if (frames.size() != 2) throw ParseError("load_scene: expected exactly two frames");
        Frame* dst[2] = {&sample.cur, &sample.prev};
        for (int f = 0; f < 2; ++f) {
            dst[f]->rig = detail::rig_from_json(frames.at(f).at("rig"));
            for (const auto& jb : frames.at(f).at("boxes")) dst[f]->boxes.push_back(detail::box_from_json(jb));
        }
        const std::string blob_path =
            (std::filesystem::path(path).parent_path() / j.at("feature_blob").get<std::string>()).string();
        Blob blob = read_blob(blob_path);
        if (blob.extents.size() != 4 || blob.extents[0] != 2)
            throw ParseError("load_scene: feature blob must have extents {2, N, C, I}");
        const std::size_t n = blob.extents[1], c = blob.extents[2], pixels = blob.extents[3];
        std::size_t offset = 0;
        for (int f = 0; f < 2; ++f)
            for (std::size_t cam = 0; cam < n; ++cam) {
                std::vector<double> d(blob.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                      blob.payload.begin() + static_cast<std::ptrdiff_t>(offset + c * pixels));
                dst[f]->features.emplace_back(std::vector<std::size_t>{c, pixels}, std::move(d));
                offset += c * pixels;
            }
        return sample;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_scene: " + path + ": " + e.what());
    }
}

}  // namespace cape
