#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "cape/common.hpp"

namespace cape {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        if (n == 0.0) throw Error("Vec3::normalized: zero vector");
        return {x / n, y / n, z / n};
    }
};

/// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }

    double operator()(int i, int j) const { return m[i * 3 + j]; }
    double& operator()(int i, int j) { return m[i * 3 + j]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    Mat3 inverse() const {
        const double d = det();
        if (std::abs(d) < 1e-300) throw Error("Mat3::inverse: singular matrix");
        Mat3 r;
        r.m = {(m[4] * m[8] - m[5] * m[7]), -(m[1] * m[8] - m[2] * m[7]), (m[1] * m[5] - m[2] * m[4]),
               -(m[3] * m[8] - m[5] * m[6]), (m[0] * m[8] - m[2] * m[6]), -(m[0] * m[5] - m[2] * m[3]),
               (m[3] * m[7] - m[4] * m[6]), -(m[0] * m[7] - m[1] * m[6]), (m[0] * m[4] - m[1] * m[3])};
        for (auto& v : r.m) v /= d;
        return r;
    }

    /// Rotation of `angle_rad` about a unit axis (Rodrigues).
    static Mat3 axis_angle(const Vec3& axis, double angle_rad) {
        const Vec3 u = axis.normalized();
        const double c = std::cos(angle_rad), s = std::sin(angle_rad), t = 1.0 - c;
        Mat3 r;
        r.m = {c + u.x * u.x * t,        u.x * u.y * t - u.z * s, u.x * u.z * t + u.y * s,
               u.y * u.x * t + u.z * s,  c + u.y * u.y * t,       u.y * u.z * t - u.x * s,
               u.z * u.x * t - u.y * s,  u.z * u.y * t + u.x * s, c + u.z * u.z * t};
        return r;
    }

    static Mat3 rot_z(double a) { return axis_angle({0, 0, 1}, a); }
};

/// Geodesic angle between two rotations, in radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
    const Mat3 rel = a.transposed() * b;
    const double tr = rel(0, 0) + rel(1, 1) + rel(2, 2);
    const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

/// Row-major 4x4 homogeneous matrix.
struct Mat4 {
    std::array<double, 16> m{};

    static Mat4 identity() {
        Mat4 r;
        for (int i = 0; i < 4; ++i) r.m[i * 4 + i] = 1.0;
        return r;
    }

    static Mat4 from_rt(const Mat3& rot, const Vec3& t) {
        Mat4 r = identity();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = rot(i, j);
        r(0, 3) = t.x;
        r(1, 3) = t.y;
        r(2, 3) = t.z;
        return r;
    }

    double operator()(int i, int j) const { return m[i * 4 + j]; }
    double& operator()(int i, int j) { return m[i * 4 + j]; }

    Mat3 rotation() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(i, j);
        return r;
    }

    Vec3 translation() const { return {m[3], m[7], m[11]}; }

    Mat4 operator*(const Mat4& o) const {
        Mat4 r;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double s = 0.0;
                for (int k = 0; k < 4; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    /// Applies the homogeneous transform to a 3D point.
    Vec3 apply(const Vec3& p) const {
        return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
                m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
                m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
    }

    /// Inverse of a rigid transform (R^T, -R^T t).
    Mat4 rigid_inverse() const {
        const Mat3 rt = rotation().transposed();
        const Vec3 t = translation();
        const Vec3 ti = (rt * t) * -1.0;
        return from_rt(rt, ti);
    }

    /// Top three rows flattened row-major: the 12-vector fed to MLPs that
    /// consume a rigid transform.
    std::array<double, 12> top_rows() const {
        std::array<double, 12> v{};
        for (int i = 0; i < 12; ++i) v[static_cast<std::size_t>(i)] = m[static_cast<std::size_t>(i)];
        return v;
    }
};

inline bool is_rotation(const Mat3& r, double tol = 1e-10) {
    const Mat3 should_be_i = r.transposed() * r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double want = i == j ? 1.0 : 0.0;
            if (std::abs(should_be_i(i, j) - want) > tol) return false;
        }
    return std::abs(r.det() - 1.0) <= tol * 10.0;
}

/// Pinhole intrinsics in feature-map pixel units, zero skew.
struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

    Intrinsics() = default;
    Intrinsics(double fx_, double fy_, double cx_, double cy_) : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
        if (fx <= 0.0 || fy <= 0.0) throw ConfigError("Intrinsics: focal lengths must be positive");
    }

    Mat3 matrix() const {
        Mat3 k;
        k.m = {fx, 0, cx, 0, fy, cy, 0, 0, 1};
        return k;
    }

    /// Closed-form inverse of the calibration matrix.
    Mat3 inverse() const {
        Mat3 k;
        k.m = {1.0 / fx, 0, -cx / fx, 0, 1.0 / fy, -cy / fy, 0, 0, 1};
        return k;
    }
};

/// Rigid transform from the global (ego) frame to a camera frame.
struct Extrinsics {
    Mat4 mat = Mat4::identity();

    Extrinsics() = default;
    explicit Extrinsics(const Mat4& m) : mat(m) { validate(); }
    static Extrinsics from_rt(const Mat3& rot, const Vec3& t) { return Extrinsics(Mat4::from_rt(rot, t)); }

    void validate() const {
        if (!is_rotation(mat.rotation()))
            throw ConfigError("Extrinsics: rotation block is not orthonormal with det +1");
        if (mat(3, 0) != 0.0 || mat(3, 1) != 0.0 || mat(3, 2) != 0.0 || mat(3, 3) != 1.0)
            throw ConfigError("Extrinsics: last row must be (0,0,0,1)");
    }

    Extrinsics inverse() const {
        Extrinsics e;
        e.mat = mat.rigid_inverse();
        return e;
    }
};

enum class DepthSpacing { Uniform, LinearIncreasing };

/// D strictly increasing bin centers covering [d_min, d_max].
inline std::vector<double> make_depth_bins(double d_min, double d_max, std::size_t count,
                                           DepthSpacing spacing = DepthSpacing::Uniform) {
    if (count < 1 || d_min <= 0.0 || d_max <= d_min)
        throw ConfigError("make_depth_bins: need 0 < d_min < d_max and count >= 1");
    std::vector<double> bins(count);
    if (count == 1) {
        bins[0] = d_min;
        return bins;
    }
    const double span = d_max - d_min;
    const double n = static_cast<double>(count - 1);
    for (std::size_t i = 0; i < count; ++i) {
        const double k = static_cast<double>(i);
        if (spacing == DepthSpacing::Uniform) {
            bins[i] = d_min + span * k / n;
        } else {
            bins[i] = d_min + span * (k * (k + 1.0)) / (n * (n + 1.0));
        }
    }
    return bins;
}

struct CameraRig {
    struct Camera {
        Intrinsics intrinsics;
        Extrinsics extrinsics;
    };
    std::vector<Camera> cameras;
    std::size_t feat_h = 0, feat_w = 0;
    std::vector<double> depth_bins;

    std::size_t num_cameras() const { return cameras.size(); }
    std::size_t pixels() const { return feat_h * feat_w; }

    void validate() const {
        if (cameras.empty()) throw ConfigError("CameraRig: need at least one camera");
        if (feat_h == 0 || feat_w == 0) throw ConfigError("CameraRig: empty feature extent");
        if (depth_bins.empty()) throw ConfigError("CameraRig: no depth bins");
        for (std::size_t i = 0; i < depth_bins.size(); ++i) {
            if (depth_bins[i] <= 0.0) throw ConfigError("CameraRig: depth bins must be positive");
            if (i > 0 && depth_bins[i] <= depth_bins[i - 1])
                throw ConfigError("CameraRig: depth bins must be strictly increasing");
        }
    }
};

/// Rigid transform mapping current-frame coordinates to previous-frame
/// coordinates, plus the frame gap.
struct EgoMotion {
    Mat4 mat = Mat4::identity();
    double dt = 0.5;

    EgoMotion() = default;
    EgoMotion(const Mat4& m, double dt_) : mat(m), dt(dt_) {
        if (!is_rotation(mat.rotation())) throw ConfigError("EgoMotion: rotation block not orthonormal");
        if (dt <= 0.0) throw ConfigError("EgoMotion: dt must be positive");
    }

    EgoMotion inverse() const {
        EgoMotion e;
        e.mat = mat.rigid_inverse();
        e.dt = dt;
        return e;
    }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Camera-frame coordinates of the frustum behind each feature pixel:
/// for pixel (u,v) and depth bin d the homogeneous image point (u*d, v*d, d)
/// is pulled back through the inverse intrinsics. Extrinsics never enter.
/// Result has size H*W*D, indexed pixel-major: [pixel * D + bin],
/// pixel = v*W + u.
inline std::vector<Vec3> frustum_points(const Intrinsics& intr, std::size_t h, std::size_t w,
                                        const std::vector<double>& depth_bins) {
    const Mat3 kinv = intr.inverse();
    std::vector<Vec3> out;
    out.reserve(h * w * depth_bins.size());
    for (std::size_t v = 0; v < h; ++v)
        for (std::size_t u = 0; u < w; ++u)
            for (double d : depth_bins)
                out.push_back(kinv * Vec3{static_cast<double>(u) * d, static_cast<double>(v) * d, d});
    return out;
}

inline std::vector<Vec3> frustum_points(const CameraRig& rig, std::size_t cam) {
    if (cam >= rig.num_cameras()) throw ConfigError("frustum_points: camera index out of range");
    return frustum_points(rig.cameras[cam].intrinsics, rig.feat_h, rig.feat_w, rig.depth_bins);
}

inline std::vector<Vec3> global_to_camera(const std::vector<Vec3>& points, const Extrinsics& e) {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(e.mat.apply(p));
    return out;
}

inline Vec3 global_to_camera(const Vec3& p, const Extrinsics& e) { return e.mat.apply(p); }

/// Eq. of motion for reference points between frames: homogeneous application
/// of the ego-motion matrix.
inline std::vector<Vec3> propagate_reference(const std::vector<Vec3>& points, const EgoMotion& m) {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(m.mat.apply(p));
    return out;
}

/// Injects calibration noise: left-multiplies the rotation block by a random
/// rotation whose angle is uniform in [-r_max_deg, r_max_deg] about a uniform
/// random axis. Translation is untouched. r_max_deg == 0 returns the input
/// bit-identically.
inline Extrinsics perturb_extrinsics(const Extrinsics& e, double r_max_deg, Rng& rng) {
    if (r_max_deg < 0.0) throw ConfigError("perturb_extrinsics: r_max must be nonnegative");
    if (r_max_deg == 0.0) return e;
    Vec3 axis;
    do {
        axis = {rng.normal(), rng.normal(), rng.normal()};
    } while (axis.norm() < 1e-12);
    const double angle = rng.uniform(-r_max_deg, r_max_deg) * M_PI / 180.0;
    const Mat3 noisy = Mat3::axis_angle(axis, angle) * e.mat.rotation();
    Extrinsics out;
    out.mat = Mat4::from_rt(noisy, e.mat.translation());
    return out;
}

struct PixelDepth {
    double u = 0.0, v = 0.0, depth = 0.0;
};

/// Pinhole projection of a camera-frame point; inverse of the frustum
/// lifting. Throws for points at or behind the image plane.
inline PixelDepth project_to_image(const Vec3& p_cam, const Intrinsics& intr) {
    if (p_cam.z <= 0.0) throw Error("project_to_image: point is behind the camera");
    const Vec3 uvw = intr.matrix() * p_cam;
    return {uvw.x / p_cam.z, uvw.y / p_cam.z, p_cam.z};
}

}  // namespace cape
