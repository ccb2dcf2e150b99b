#include "rd2/env.hpp"

#include <algorithm>
#include <cmath>

namespace rd2::env {

namespace {

// Lap-joint geometry: 30x30x120 mm member into an open slot channel (the
// channel runs along y), slot per-side clearance = task clearance / 2, 5 mm
// 45-degree chamfer on both slot top edges.
constexpr double kBoxHx = 0.015;
constexpr double kBoxHy = 0.060;
constexpr double kBoxHz = 0.015;
constexpr double kSlotDepth = 0.030;
constexpr double kSlotChamfer = 0.005;

// Peg-in-hole: 20 mm diameter peg with a 2 mm 45-degree tip chamfer into a
// nominally zero-clearance hole; 0.05 mm numerical skin keeps the penalty
// model well-posed.
constexpr double kPegRadius = 0.010;
constexpr double kPegChamfer = 0.002;
constexpr double kHoleDepth = 0.030;
constexpr double kHoleSkin = 0.00005;

constexpr double kMaxPenetration = 5e-5;  // motion is scaled back past this
constexpr double kBisectTol = 1e-5;         // 10 um motion tolerance
constexpr double kResetPenetrationLimit = 0.005;

double lap_slot_half_width(const TaskSpec& task) {
    return kBoxHx + task.clearance / 2.0;
}

double hole_radius(const TaskSpec& task) {
    return kPegRadius + task.clearance / 2.0 + kHoleSkin;
}

double sdf_lap(const TaskSpec& task, const Vector3d& p) {
    const double w = lap_slot_half_width(task);
    const double ch = kSlotChamfer;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double left = std::max({p.z(), p.x() + w,
                                  (p.x() + p.z() + w + ch) * inv_sqrt2});
    const double right = std::max({p.z(), -p.x() + w,
                                   (-p.x() + p.z() + w + ch) * inv_sqrt2});
    const double floor = p.z() + kSlotDepth;
    return std::min({left, right, floor});
}

double sdf_peg_hole(const TaskSpec& task, const Vector3d& p) {
    const double r = std::hypot(p.x(), p.y());
    const double wall = std::max(p.z(), hole_radius(task) - r);
    const double floor = p.z() + kHoleDepth;
    return std::min(wall, floor);
}

// Contact probe points in the piece frame.
const std::vector<Vector3d>& probe_points(TaskKind kind) {
    static const std::vector<Vector3d> lap = [] {
        std::vector<Vector3d> pts;
        for (double sx : {-1.0, 1.0})
            for (double sy : {-1.0, 1.0})
                for (double sz : {-1.0, 1.0})
                    pts.emplace_back(sx * kBoxHx, sy * kBoxHy, sz * kBoxHz);
        pts.emplace_back(kBoxHx, 0.0, -kBoxHz);
        pts.emplace_back(-kBoxHx, 0.0, -kBoxHz);
        pts.emplace_back(0.0, kBoxHy, -kBoxHz);
        pts.emplace_back(0.0, -kBoxHy, -kBoxHz);
        return pts;
    }();
    static const std::vector<Vector3d> peg = [] {
        std::vector<Vector3d> pts;
        pts.emplace_back(0.0, 0.0, 0.0);  // tip center
        auto ring = [&](double radius, double z) {
            for (int k = 0; k < 8; ++k) {
                const double a = k * M_PI / 4.0;
                pts.emplace_back(radius * std::cos(a), radius * std::sin(a), z);
            }
        };
        ring(kPegRadius - kPegChamfer, 0.0);  // tip rim
        ring(kPegRadius, kPegChamfer);        // chamfer top
        ring(kPegRadius, 0.010);
        ring(kPegRadius, 0.020);
        ring(kPegRadius, 0.030);
        return pts;
    }();
    return kind == TaskKind::LapJoint ? lap : peg;
}

Vector3d sdf_gradient(const TaskSpec& task, const Vector3d& p) {
    const double h = 1e-7;
    Vector3d g;
    for (int i = 0; i < 3; ++i) {
        Vector3d lo = p, hi = p;
        lo[i] -= h;
        hi[i] += h;
        g[i] = (solid_sdf(task, hi) - solid_sdf(task, lo)) / (2.0 * h);
    }
    const double n = g.norm();
    return n > 1e-12 ? Vector3d(g / n) : Vector3d(0, 0, 1);
}

geom::Matrix3d twist_rotation(const Vector3d& w, double dt) {
    const double angle = w.norm() * dt;
    if (angle < 1e-14) return geom::Matrix3d::Identity();
    return geom::axis_angle(w, angle);
}

}  // namespace

double solid_sdf(const TaskSpec& task, const Vector3d& p) {
    return task.kind == TaskKind::LapJoint ? sdf_lap(task, p)
                                           : sdf_peg_hole(task, p);
}

Pose TaskSpec::goal_pose() const {
    Pose g;
    g.translation.z() =
        kind == TaskKind::LapJoint ? -kSlotDepth + kBoxHz : -kHoleDepth;
    return g;
}

Pose TaskSpec::nominal_start_pose() const {
    Pose s;
    s.translation.z() = kind == TaskKind::LapJoint ? kBoxHz + 0.005 : 0.005;
    return s;
}

void TaskSpec::validate() const {
    if (clearance < 0.0) throw ConfigError("clearance must be >= 0");
    if (success_epsilon <= 0.0) throw ConfigError("success_epsilon must be > 0");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (lambda_rot < 0.0) throw ConfigError("lambda_rot must be >= 0");
}

void PhysicsParams::validate() const {
    if (contact_stiffness <= 0.0) throw ConfigError("contact_stiffness must be > 0");
    if (friction_coeff < 0.0) throw ConfigError("friction_coeff must be >= 0");
    if (dt <= 0.0) throw ConfigError("dt must be > 0");
    if (ft_noise_frac < 0.0 || friction_noise_frac < 0.0)
        throw ConfigError("noise fractions must be >= 0");
    if (friction_smoothing <= 0.0) throw ConfigError("friction_smoothing must be > 0");
    if (v_max <= 0.0 || w_max <= 0.0) throw ConfigError("actuation limits must be > 0");
    sensor_pose.validate();
}

Vector6d PhysicsParams::action_limits() const {
    Vector6d lim;
    lim << v_max, v_max, v_max, w_max, w_max, w_max;
    return lim;
}

Wrench inject_noise(const Wrench& w, double frac, const Vector6d& ref,
                    std::mt19937_64& rng) {
    if (frac < 0.0) throw ConfigError("noise fraction must be >= 0");
    if (frac == 0.0) return w;
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector6d v = w.to_vector();
    for (int i = 0; i < 6; ++i) v[i] += frac * ref[i] * gauss(rng);
    return Wrench::from_vector(v);
}

double perturb_friction(double mu, double frac, std::mt19937_64& rng) {
    if (frac < 0.0) throw ConfigError("noise fraction must be >= 0");
    if (frac == 0.0) return mu;
    std::normal_distribution<double> gauss(0.0, frac);
    return std::max(0.0, mu * (1.0 + gauss(rng)));
}

double max_penetration(const Pose& piece_pose, const TaskSpec& task) {
    double worst = 0.0;
    for (const auto& q : probe_points(task.kind)) {
        const Vector3d p = piece_pose.rotation * q + piece_pose.translation;
        worst = std::max(worst, -solid_sdf(task, p));
    }
    return worst;
}

namespace {

// Penetration-weighted mean surface normal over the penetrating probe
// points, in the world frame. Zero when nothing penetrates or when opposing
// contacts cancel (a genuine jam).
Vector3d contact_normal(const Pose& piece_pose, const TaskSpec& task) {
    Vector3d n_sum = Vector3d::Zero();
    for (const auto& q : probe_points(task.kind)) {
        const Vector3d p = piece_pose.rotation * q + piece_pose.translation;
        const double s = solid_sdf(task, p);
        if (s >= 0.0) continue;
        n_sum += -s * sdf_gradient(task, p);
    }
    const double norm = n_sum.norm();
    return norm > 1e-9 ? Vector3d(n_sum / norm) : Vector3d::Zero();
}

}  // namespace

Wrench contact_wrench(const Pose& piece_pose, const TaskSpec& task,
                      const PhysicsParams& params, const Twist& twist) {
    piece_pose.validate();
    Vector3d f_total = Vector3d::Zero();
    Vector3d tau_total = Vector3d::Zero();

    for (const auto& q : probe_points(task.kind)) {
        const Vector3d arm = piece_pose.rotation * q;
        const Vector3d p = arm + piece_pose.translation;
        const double s = solid_sdf(task, p);
        if (s >= 0.0) continue;
        const double pen = -s;
        const Vector3d n = sdf_gradient(task, p);
        const Vector3d v_point = twist.linear + twist.angular.cross(arm);
        const double pen_rate = -v_point.dot(n);
        const double fn = std::max(
            0.0, params.contact_stiffness * pen + params.contact_damping * pen_rate);
        Vector3d f = fn * n;
        // regularized Coulomb friction against the tangential point velocity
        const Vector3d v_t = v_point - v_point.dot(n) * n;
        const double vt_norm = v_t.norm();
        if (vt_norm > 1e-12) {
            f -= params.friction_coeff * fn *
                 std::tanh(vt_norm / params.friction_smoothing) * (v_t / vt_norm);
        }
        f_total += f;
        tau_total += arm.cross(f);
    }

    // world -> piece frame, then to the mounted sensor frame
    Wrench piece_wrench{piece_pose.rotation.transpose() * f_total,
                        piece_pose.rotation.transpose() * tau_total};
    if (params.sensor_pose.rotation.isIdentity(1e-12) &&
        params.sensor_pose.translation.isZero(1e-12))
        return piece_wrench;
    return geom::wrench_transform(geom::pose_inverse(params.sensor_pose),
                                  piece_wrench);
}

Environment::Environment(TaskSpec task, PhysicsParams params)
    : task_(std::move(task)), params_(std::move(params)) {
    task_.validate();
    params_.validate();
}

double Environment::distance_to_goal() const {
    return geom::pose_distance(state_.piece_pose, task_.goal_pose(),
                               task_.lambda_rot);
}

Wrench Environment::observe(const Twist& twist) {
    PhysicsParams p = params_;
    p.friction_coeff = state_.episode_friction;
    const Wrench clean = contact_wrench(state_.piece_pose, task_, p, twist);

    const Vector6d v = clean.to_vector();
    state_.noise_sq_sum += v.cwiseProduct(v);
    state_.noise_samples += 1;
    if (params_.ft_noise_frac == 0.0) return clean;

    Vector6d ref =
        (state_.noise_sq_sum / static_cast<double>(state_.noise_samples))
            .cwiseSqrt();
    for (int i = 0; i < 3; ++i) ref[i] = std::max(ref[i], 1.0);    // 1 N floor
    for (int i = 3; i < 6; ++i) ref[i] = std::max(ref[i], 0.1);    // 0.1 N*m
    return inject_noise(clean, params_.ft_noise_frac, ref, state_.rng);
}

Wrench Environment::reset(std::uint64_t seed) {
    state_ = EnvState{};
    state_.rng.seed(seed);

    const InitialOffset& off = task_.initial_offset;
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    Vector3d lin = off.linear;
    Vector3d ang = off.angular;
    for (int i = 0; i < 3; ++i) lin[i] += off.linear_jitter[i] * unit(state_.rng);
    for (int i = 0; i < 3; ++i) ang[i] += off.angular_jitter[i] * unit(state_.rng);

    Pose pose = task_.nominal_start_pose();
    pose.translation += lin;
    const double angle = ang.norm();
    if (angle > 1e-14) pose.rotation = geom::axis_angle(ang, angle) * pose.rotation;

    if (max_penetration(pose, task_) > kResetPenetrationLimit)
        throw ConfigError("initial offset places the piece in deep interpenetration");

    state_.piece_pose = pose;
    state_.episode_friction = perturb_friction(
        params_.friction_coeff, params_.friction_noise_frac, state_.rng);
    initialized_ = true;
    return observe(Twist{});
}

StepResult Environment::step(const Twist& action) {
    if (!initialized_) throw EnvError("step before reset");
    if (state_.done) throw EnvError("step on a done environment");
    if (!action.is_finite()) throw EnvError("non-finite action");

    StepResult result;
    Twist applied = action;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(applied.linear[i]) > params_.v_max) {
            applied.linear[i] = std::clamp(applied.linear[i], -params_.v_max,
                                           params_.v_max);
            result.action_clamped = true;
        }
        if (std::abs(applied.angular[i]) > params_.w_max) {
            applied.angular[i] = std::clamp(applied.angular[i], -params_.w_max,
                                            params_.w_max);
            result.action_clamped = true;
        }
    }

    const Pose& start = state_.piece_pose;
    auto pose_at = [&](double alpha) {
        Pose p;
        p.translation = start.translation + alpha * params_.dt * applied.linear;
        p.rotation =
            twist_rotation(applied.angular, alpha * params_.dt) * start.rotation;
        return p.normalized();
    };

    double alpha = 1.0;
    const bool obstructed =
        max_penetration(pose_at(1.0), task_) > kMaxPenetration;
    if (obstructed) {
        // scale the whole commanded motion back until the deepest probe stays
        // within the penetration cap
        double lo = 0.0, hi = 1.0;
        const double motion =
            params_.dt * (applied.linear.norm() + 0.1 * applied.angular.norm());
        while ((hi - lo) * std::max(motion, 1e-12) > kBisectTol) {
            const double mid = 0.5 * (lo + hi);
            if (max_penetration(pose_at(mid), task_) > kMaxPenetration)
                hi = mid;
            else
                lo = mid;
        }
        alpha = lo;
    }

    Pose next = pose_at(alpha);
    Twist effective = applied;
    effective.linear *= alpha;
    effective.angular *= alpha;

    if (obstructed) {
        // collide-and-slide: the blocked part of the commanded translation
        // moves along the contact tangent plane instead of vanishing, so the
        // piece can follow a chamfer or skate across a surface
        const Vector3d v_res = (1.0 - alpha) * applied.linear;
        const Vector3d n = contact_normal(next, task_);
        if (n.squaredNorm() > 0.0 && v_res.dot(n) < 0.0) {
            const Vector3d v_slide = v_res - v_res.dot(n) * n;
            const double slide_len = params_.dt * v_slide.norm();
            if (slide_len > kBisectTol) {
                auto slide_at = [&](double beta) {
                    Pose p = next;
                    p.translation += beta * params_.dt * v_slide;
                    return p;
                };
                double beta = 1.0;
                if (max_penetration(slide_at(1.0), task_) > kMaxPenetration) {
                    double lo = 0.0, hi = 1.0;
                    while ((hi - lo) * slide_len > kBisectTol) {
                        const double mid = 0.5 * (lo + hi);
                        if (max_penetration(slide_at(mid), task_) >
                            kMaxPenetration)
                            hi = mid;
                        else
                            lo = mid;
                    }
                    beta = lo;
                }
                next = slide_at(beta);
                effective.linear += beta * v_slide;
            }
        }
    }

    state_.piece_pose = next;
    state_.step_count += 1;

    const double d = distance_to_goal();
    result.info_distance = d;
    result.reward = -d + (d <= task_.success_epsilon ? task_.success_bonus : 0.0);
    if (d <= task_.success_epsilon) {
        result.done = true;
        result.done_reason = DoneReason::Success;
    } else if (state_.step_count >= task_.max_steps) {
        result.done = true;
        result.done_reason = DoneReason::Timeout;
    }
    state_.done = result.done;

    result.observation = observe(effective);
    return result;
}

}  // namespace rd2::env
