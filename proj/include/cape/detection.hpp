#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "cape/embedding.hpp"
#include "cape/geometry.hpp"
#include "cape/tensor.hpp"

namespace cape {

inline double wrap_angle(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a <= -M_PI) a += 2.0 * M_PI;
    return a;
}

/// Ground-truth / decoded 3D box in the global frame.
struct Box3D {
    Vec3 center;
    Vec3 size;       // w, l, h, meters
    double yaw = 0;  // radians in (-pi, pi]
    double vx = 0, vy = 0;
    int class_id = 0;

    void validate() const {
        if (size.x <= 0 || size.y <= 0 || size.z <= 0) throw ConfigError("Box3D: sizes must be positive");
        if (yaw <= -M_PI || yaw > M_PI) throw ConfigError("Box3D: yaw out of (-pi, pi]");
    }
};

/// A decoded prediction with its score.
struct Detection {
    Box3D box;
    double confidence = 0;
};

// ---------------------------------------------------------------------------
// Box vector codec
//
// 10 components: (dx, dy, dz, log w, log l, log h, sin yaw, cos yaw, vx, vy).
// The center offset is relative to the query's reference point in normalized
// scene coordinates.
// ---------------------------------------------------------------------------

inline std::array<double, 10> encode_box(const Box3D& box, const Vec3& ref_norm,
                                         const CoordNormalizer& norm) {
    const Vec3 c = norm.apply(box.center);
    return {c.x - ref_norm.x, c.y - ref_norm.y,      c.z - ref_norm.z,
            std::log(box.size.x), std::log(box.size.y), std::log(box.size.z),
            std::sin(box.yaw),    std::cos(box.yaw),    box.vx, box.vy};
}

/// Absolute normalized 10-vector of a ground-truth box (reference-point
/// independent); predictions compare against this after adding their
/// reference point to the offset.
inline std::array<double, 10> box_to_absvec(const Box3D& box, const CoordNormalizer& norm) {
    const Vec3 c = norm.apply(box.center);
    return {c.x, c.y, c.z,
            std::log(box.size.x), std::log(box.size.y), std::log(box.size.z),
            std::sin(box.yaw),    std::cos(box.yaw),    box.vx, box.vy};
}

inline Box3D decode_box(const std::array<double, 10>& v, const Vec3& ref_norm,
                        const CoordNormalizer& norm, int class_id = 0) {
    Box3D b;
    b.center = norm.invert({ref_norm.x + v[0], ref_norm.y + v[1], ref_norm.z + v[2]});
    b.size = {std::exp(v[3]), std::exp(v[4]), std::exp(v[5])};
    const double s = v[6], c = v[7];
    const double n = std::hypot(s, c);
    b.yaw = n < 1e-12 ? 0.0 : wrap_angle(std::atan2(s / n, c / n));
    b.vx = v[8];
    b.vy = v[9];
    b.class_id = class_id;
    return b;
}

// ---------------------------------------------------------------------------
// Detection heads
// ---------------------------------------------------------------------------

/// Classification and regression branches applied to each query embedding
/// after a shared layer norm. The regression branch predicts offsets w.r.t.
/// the query's reference point.
struct DetectionHeads {
    Mlp2 cls_mlp;  // C -> K
    Mlp2 box_mlp;  // C -> 10
    Tensor ln_g, ln_b;

    static DetectionHeads init(std::size_t channels, std::size_t classes, Rng& rng) {
        DetectionHeads h;
        h.cls_mlp = Mlp2::init(channels, channels, classes, rng);
        h.box_mlp = Mlp2::init(channels, channels, 10, rng);
        h.ln_g = Tensor::full({channels}, 1.0);
        h.ln_b = Tensor::zeros({channels});
        // Bias class logits toward background so early training is not
        // swamped by negatives.
        h.cls_mlp.b2 = Tensor::full({classes}, -2.0);
        return h;
    }

    template <class F>
    void visit(F&& f) {
        cls_mlp.visit([&](const char* n, Tensor& t) { f((std::string("cls.") + n).c_str(), t); });
        box_mlp.visit([&](const char* n, Tensor& t) { f((std::string("box.") + n).c_str(), t); });
        f("ln_g", ln_g);
        f("ln_b", ln_b);
    }
};

struct HeadOutputs {
    Tensor class_logits;  // [K x M]
    Tensor box_vec;       // [10 x M] relative offsets
    Tensor box_abs;       // [10 x M] with reference point added to rows 0..2
};

/// ref_norm is [3 x M] in normalized scene coordinates; gradients flow into
/// it (reference points are learnable).
inline HeadOutputs predict_heads(const DetectionHeads& heads, const Tensor& o, const Tensor& ref_norm) {
    Tensor normed = layer_norm(o, heads.ln_g, heads.ln_b);
    HeadOutputs out;
    out.class_logits = heads.cls_mlp.forward(normed);
    out.box_vec = heads.box_mlp.forward(normed);
    Tensor centered = add(slice_rows(out.box_vec, 0, 3), ref_norm);
    out.box_abs = concat_rows(centered, slice_rows(out.box_vec, 3, 10));
    return out;
}

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

/// Injective map from ground-truth rows to query columns with total cost.
struct Assignment {
    std::vector<std::size_t> query_for_gt;
    double total_cost = 0;
};

/// Exact minimum-cost assignment of G rows to M columns (G <= M) via the
/// potential/augmenting-path formulation, O(G^2 M).
inline Assignment hungarian_match(const Tensor& cost) {
    if (cost.rank() != 2) throw ShapeError("hungarian_match: cost must be rank-2");
    const std::size_t n = cost.rows(), m = cost.cols();
    if (n > m)
        throw Error("hungarian_match: more ground truths (" + std::to_string(n) + ") than queries (" +
                    std::to_string(m) + ")");
    for (std::size_t i = 0; i < cost.size(); ++i)
        if (!std::isfinite(cost[i])) throw Error("hungarian_match: non-finite cost");
    if (n == 0) return {};

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        minv.assign(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }

    Assignment a;
    a.query_for_gt.assign(n, m);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) a.query_for_gt[p[j] - 1] = j - 1;
    for (std::size_t g = 0; g < n; ++g) a.total_cost += cost.at(g, a.query_for_gt[g]);
    return a;
}

/// Per-component weights on the 10-vector L1. Velocity lives on a larger
/// scale than normalized coordinates and is down-weighted, as is standard
/// for this loss family.
inline std::array<double, 10> box_code_weights(double velocity_weight = 0.2) {
    return {1, 1, 1, 1, 1, 1, 1, 1, velocity_weight, velocity_weight};
}

/// Matching cost between predictions and ground truths:
/// lambda_cls * (-prob of gt class) + weighted L1 distance of normalized box
/// vectors.
inline Tensor match_cost(const Tensor& class_logits, const Tensor& box_abs,
                         const std::vector<Box3D>& gts, const CoordNormalizer& norm,
                         double lambda_cls,
                         const std::array<double, 10>& weights = box_code_weights()) {
    const std::size_t m = class_logits.cols();
    const std::size_t g_count = gts.size();
    std::vector<double> cost(g_count * m, 0.0);
    for (std::size_t g = 0; g < g_count; ++g) {
        const auto gt_vec = box_to_absvec(gts[g], norm);
        const int cls = gts[g].class_id;
        for (std::size_t q = 0; q < m; ++q) {
            const double logit = class_logits.at(static_cast<std::size_t>(cls), q);
            const double prob = 1.0 / (1.0 + std::exp(-logit));
            double l1 = 0.0;
            for (std::size_t k = 0; k < 10; ++k)
                l1 += weights[k] * std::abs(box_abs.at(k, q) - gt_vec[k]);
            cost[g * m + q] = lambda_cls * (-prob) + l1;
        }
    }
    return Tensor({g_count, m}, std::move(cost));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Sigmoid focal loss, summed over classes and averaged over queries.
/// targets[q] is the positive class of query q or -1 for background.
inline Tensor focal_loss(const Tensor& logits, const std::vector<int>& targets, double alpha,
                         double gamma) {
    if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("focal_loss: alpha must be in (0,1)");
    if (gamma < 0.0) throw ConfigError("focal_loss: gamma must be nonnegative");
    const std::size_t k = logits.rows(), m = logits.cols();
    if (targets.size() != m) throw ShapeError("focal_loss: one target per query required");
    std::vector<double> pos(k * m, 0.0), neg(k * m, 1.0);
    for (std::size_t q = 0; q < m; ++q) {
        if (targets[q] < 0) continue;
        const auto cls = static_cast<std::size_t>(targets[q]);
        if (cls >= k) throw ShapeError("focal_loss: target class out of range");
        pos[cls * m + q] = 1.0;
        neg[cls * m + q] = 0.0;
    }
    Tensor pos_mask({k, m}, std::move(pos));
    Tensor neg_mask({k, m}, std::move(neg));
    // -log p = softplus(-x), -log(1-p) = softplus(x); modulating factors
    // (1-p)^gamma = sigmoid(-x)^gamma and p^gamma = sigmoid(x)^gamma.
    Tensor neg_x = mul_scalar(logits, -1.0);
    Tensor pos_term = mul(pow_scalar(sigmoid(neg_x), gamma), softplus(neg_x));
    Tensor neg_term = mul(pow_scalar(sigmoid(logits), gamma), softplus(logits));
    Tensor weighted =
        add(mul_scalar(mul(pos_mask, pos_term), alpha), mul_scalar(mul(neg_mask, neg_term), 1.0 - alpha));
    return mul_scalar(sum(weighted), 1.0 / static_cast<double>(m));
}

struct FocalConfig {
    double alpha = 0.25;
    double gamma = 2.0;
};

struct LayerLossBreakdown {
    double cls = 0, reg = 0;
};

/// Eq. 15 for one decoder layer's outputs: Hungarian assignment, then
/// lambda_cls * focal + weighted L1 over matched pairs (mean over ground
/// truths).
inline Tensor layer_loss(const HeadOutputs& outputs, const std::vector<Box3D>& gts,
                         const CoordNormalizer& norm, double lambda_cls, const FocalConfig& focal,
                         LayerLossBreakdown* breakdown = nullptr,
                         const std::array<double, 10>& weights = box_code_weights()) {
    const std::size_t m = outputs.class_logits.cols();
    std::vector<int> targets(m, -1);
    Tensor reg_loss(0.0);
    if (!gts.empty()) {
        Tensor cost = match_cost(outputs.class_logits.detached(), outputs.box_abs.detached(), gts,
                                 norm, lambda_cls, weights);
        Assignment assign = hungarian_match(cost);
        std::vector<std::size_t> matched_cols;
        std::vector<double> gt_data(10 * gts.size());
        for (std::size_t g = 0; g < gts.size(); ++g) {
            targets[assign.query_for_gt[g]] = gts[g].class_id;
            matched_cols.push_back(assign.query_for_gt[g]);
            const auto v = box_to_absvec(gts[g], norm);
            for (std::size_t kk = 0; kk < 10; ++kk) gt_data[kk * gts.size() + g] = v[kk];
        }
        Tensor gt_mat({10, gts.size()}, std::move(gt_data));
        Tensor pred = gather_cols(outputs.box_abs, matched_cols);
        Tensor weight_col({10, 1}, std::vector<double>(weights.begin(), weights.end()));
        Tensor weighted = colwise_mul(abs(sub(pred, gt_mat)), reshape(weight_col, {10}));
        reg_loss = mul_scalar(sum(weighted), 1.0 / static_cast<double>(gts.size()));
    }
    // focal_loss averages over queries; rescale to per-positive normalization
    // so lambda_cls keeps its conventional balance against the box term.
    const double pos_scale = static_cast<double>(m) / static_cast<double>(std::max<std::size_t>(gts.size(), 1));
    Tensor cls_loss =
        mul_scalar(focal_loss(outputs.class_logits, targets, focal.alpha, focal.gamma), pos_scale);
    if (breakdown) {
        breakdown->cls = cls_loss.item();
        breakdown->reg = reg_loss.item();
    }
    return add(mul_scalar(cls_loss, lambda_cls), reg_loss);
}

struct TotalLossBreakdown {
    std::vector<LayerLossBreakdown> cur_layers, prev_layers;
    double cur = 0, prev = 0, total = 0;
};

/// Eq. 15 summed over decoder layers plus Eq. 16's lambda-weighted
/// previous-frame term. `outputs_prev` may be empty (single-frame mode or
/// lambda = 0 still evaluates the current frame only).
inline Tensor total_loss(const std::vector<HeadOutputs>& outputs_cur,
                         const std::vector<HeadOutputs>& outputs_prev,
                         const std::vector<Box3D>& gts_cur, const std::vector<Box3D>& gts_prev,
                         const CoordNormalizer& norm, double lambda, double lambda_cls,
                         const FocalConfig& focal, TotalLossBreakdown* breakdown = nullptr,
                         const std::array<double, 10>& weights = box_code_weights()) {
    if (outputs_cur.empty()) throw Error("total_loss: no decoder outputs");
    Tensor cur(0.0);
    for (const auto& out : outputs_cur) {
        LayerLossBreakdown lb;
        cur = add(cur, layer_loss(out, gts_cur, norm, lambda_cls, focal, breakdown ? &lb : nullptr,
                                  weights));
        if (breakdown) breakdown->cur_layers.push_back(lb);
    }
    Tensor result = cur;
    Tensor prev(0.0);
    if (!outputs_prev.empty() && lambda != 0.0) {
        for (const auto& out : outputs_prev) {
            LayerLossBreakdown lb;
            prev = add(prev, layer_loss(out, gts_prev, norm, lambda_cls, focal,
                                        breakdown ? &lb : nullptr, weights));
            if (breakdown) breakdown->prev_layers.push_back(lb);
        }
        result = add(cur, mul_scalar(prev, lambda));
    }
    if (breakdown) {
        breakdown->cur = cur.item();
        breakdown->prev = prev.item();
        breakdown->total = result.item();
    }
    return result;
}

// ---------------------------------------------------------------------------
// Previous-frame ground truth (Eq. 13 applied to annotations)
// ---------------------------------------------------------------------------

/// Projects current-frame ground truths back by one frame: centers move
/// against their velocity for dt seconds, then everything is re-expressed in
/// previous-frame coordinates via the ego motion. z-velocity is treated as
/// zero; sizes and classes are unchanged.
inline std::vector<Box3D> generate_prev_gt(const std::vector<Box3D>& gts, const EgoMotion& motion) {
    std::vector<Box3D> prev;
    prev.reserve(gts.size());
    const Mat3 rot = motion.mat.rotation();
    for (const auto& b : gts) {
        Box3D p = b;
        const Vec3 back = {b.center.x - b.vx * motion.dt, b.center.y - b.vy * motion.dt, b.center.z};
        p.center = motion.mat.apply(back);
        const Vec3 heading = rot * Vec3{std::cos(b.yaw), std::sin(b.yaw), 0.0};
        p.yaw = wrap_angle(std::atan2(heading.y, heading.x));
        const Vec3 vel = rot * Vec3{b.vx, b.vy, 0.0};
        p.vx = vel.x;
        p.vy = vel.y;
        prev.push_back(p);
    }
    return prev;
}

// ---------------------------------------------------------------------------
// Desk-scale detection metrics
//
// Center-distance AP at fixed thresholds, structurally mirroring the
// nuScenes metric family without being it. Matching is class-aware and
// greedy by confidence; AP is the area under the stepwise precision-recall
// curve. mATE/mAVE are averaged over true positives at the 2 m threshold.
// ---------------------------------------------------------------------------

struct EvalResult {
    std::vector<double> thresholds;
    std::vector<double> ap;  // per threshold
    double mean_ap = 0;
    double mate = 0;  // mean 2D translation error at 2 m, meters
    double mave = 0;  // mean velocity error at 2 m, m/s
};

inline EvalResult evaluate(const std::vector<std::vector<Detection>>& preds,
                           const std::vector<std::vector<Box3D>>& gts,
                           std::vector<double> thresholds = {0.5, 1.0, 2.0, 4.0},
                           double tp_metric_threshold = 2.0) {
    if (preds.size() != gts.size()) throw ShapeError("evaluate: scene counts differ");
    struct Ref {
        std::size_t scene, index;
        double confidence;
    };
    std::vector<Ref> order;
    std::size_t total_gt = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        for (std::size_t i = 0; i < preds[s].size(); ++i) order.push_back({s, i, preds[s][i].confidence});
        total_gt += gts[s].size();
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Ref& a, const Ref& b) { return a.confidence > b.confidence; });

    EvalResult res;
    res.thresholds = thresholds;
    double mate_sum = 0, mave_sum = 0;
    std::size_t tp_metric_count = 0;
    for (double thr : thresholds) {
        std::vector<std::vector<char>> taken(gts.size());
        for (std::size_t s = 0; s < gts.size(); ++s) taken[s].assign(gts[s].size(), 0);
        std::size_t tp = 0, fp = 0;
        double ap = 0;
        const bool is_metric_thr = thr == tp_metric_threshold;
        for (const auto& ref : order) {
            const Detection& det = preds[ref.scene][ref.index];
            double best = std::numeric_limits<double>::infinity();
            std::size_t best_gt = gts[ref.scene].size();
            for (std::size_t g = 0; g < gts[ref.scene].size(); ++g) {
                if (taken[ref.scene][g]) continue;
                const Box3D& gt = gts[ref.scene][g];
                if (gt.class_id != det.box.class_id) continue;
                const double dx = gt.center.x - det.box.center.x;
                const double dy = gt.center.y - det.box.center.y;
                const double dist = std::hypot(dx, dy);
                if (dist <= thr && dist < best) {
                    best = dist;
                    best_gt = g;
                }
            }
            if (best_gt < gts[ref.scene].size()) {
                taken[ref.scene][best_gt] = 1;
                ++tp;
                ap += static_cast<double>(tp) / static_cast<double>(tp + fp);
                if (is_metric_thr) {
                    const Box3D& gt = gts[ref.scene][best_gt];
                    mate_sum += best;
                    mave_sum += std::hypot(det.box.vx - gt.vx, det.box.vy - gt.vy);
                    ++tp_metric_count;
                }
            } else {
                ++fp;
            }
        }
        res.ap.push_back(total_gt == 0 ? 0.0 : ap / static_cast<double>(total_gt));
    }
    for (double a : res.ap) res.mean_ap += a;
    res.mean_ap /= static_cast<double>(res.ap.size());
    res.mate = tp_metric_count == 0 ? std::numeric_limits<double>::quiet_NaN()
                                    : mate_sum / static_cast<double>(tp_metric_count);
    res.mave = tp_metric_count == 0 ? std::numeric_limits<double>::quiet_NaN()
                                    : mave_sum / static_cast<double>(tp_metric_count);
    return res;
}

}  // namespace cape
