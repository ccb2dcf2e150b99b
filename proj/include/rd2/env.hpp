#pragma once

#include "rd2/geom.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace rd2::env {

using geom::Pose;
using geom::Twist;
using geom::Wrench;
using geom::Vector3d;
using geom::Vector6d;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EnvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class TaskKind { LapJoint, PegInHole };

// Fixed initial offset plus optional uniform jitter, sampled at reset.
struct InitialOffset {
    Vector3d linear = Vector3d::Zero();         // m
    Vector3d angular = Vector3d::Zero();        // axis*angle, rad
    Vector3d linear_jitter = Vector3d::Zero();  // uniform half-range
    Vector3d angular_jitter = Vector3d::Zero();
};

struct TaskSpec {
    TaskKind kind = TaskKind::LapJoint;
    double clearance = 0.002;        // total, lap-joint 2mm / peg 0mm
    double success_epsilon = 0.001;  // meters-equivalent
    double success_bonus = 100.0;
    int max_steps = 200;
    double lambda_rot = 0.1;  // m/rad weight in the pose metric
    InitialOffset initial_offset;

    Pose goal_pose() const;
    Pose nominal_start_pose() const;
    void validate() const;
};

struct PhysicsParams {
    double contact_stiffness = 2.0e4;   // N/m
    double contact_damping = 50.0;      // N*s/m
    double friction_coeff = 0.3;
    double friction_smoothing = 1e-3;   // m/s
    double dt = 0.05;                   // s
    double v_max = 0.02;                // m/s
    double w_max = 0.1;                 // rad/s
    double ft_noise_frac = 0.0;
    double friction_noise_frac = 0.0;
    Pose sensor_pose;  // F/T sensor frame relative to the piece

    void validate() const;
    Vector6d action_limits() const;
};

enum class DoneReason { None, Success, Timeout };

struct StepResult {
    Wrench observation;
    double reward = 0.0;
    bool done = false;
    DoneReason done_reason = DoneReason::None;
    double info_distance = 0.0;  // diagnostic only, never fed to the policy
    bool action_clamped = false;
};

struct EnvState {
    Pose piece_pose;
    int step_count = 0;
    bool done = false;
    double episode_friction = 0.3;  // per-episode perturbed mu
    // per-channel running sum of squares of the clean signal, for the
    // RMS-relative noise scale
    Vector6d noise_sq_sum = Vector6d::Zero();
    std::int64_t noise_samples = 0;
    std::mt19937_64 rng{0};
};

// Additive zero-mean Gaussian noise, per-channel sigma = frac * ref[i].
Wrench inject_noise(const Wrench& w, double frac, const Vector6d& ref,
                    std::mt19937_64& rng);

// mu * (1 + N(0, frac)), clamped at zero.
double perturb_friction(double mu, double frac, std::mt19937_64& rng);

// Signed distance to the static solid (negative inside), for tests.
double solid_sdf(const TaskSpec& task, const Vector3d& p);

// Total contact wrench expressed in the sensor frame, clean (no noise).
// The twist is the commanded piece motion, used for damping and friction.
Wrench contact_wrench(const Pose& piece_pose, const TaskSpec& task,
                      const PhysicsParams& params,
                      const Twist& twist = Twist{});

// Deepest probe-point penetration at a pose, in meters.
double max_penetration(const Pose& piece_pose, const TaskSpec& task);

// Quasi-static contact assembly environment. Single-owner: one rollout at a
// time per instance; all randomness flows through the seeded state.
class Environment {
public:
    Environment(TaskSpec task, PhysicsParams params);

    Wrench reset(std::uint64_t seed);
    StepResult step(const Twist& action);

    const TaskSpec& task() const { return task_; }
    // Overrides the mean initial offset (jitter still applies at reset);
    // used by start-state curricula that resample the offset per episode.
    void set_initial_linear_offset(const Vector3d& lin) {
        task_.initial_offset.linear = lin;
    }
    const PhysicsParams& params() const { return params_; }
    const EnvState& state() const { return state_; }
    double distance_to_goal() const;

private:
    Wrench observe(const Twist& twist);

    TaskSpec task_;
    PhysicsParams params_;
    EnvState state_;
    bool initialized_ = false;
};

}  // namespace rd2::env
