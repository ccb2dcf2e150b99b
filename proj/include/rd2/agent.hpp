#pragma once

#include "rd2/env.hpp"
#include "rd2/nn.hpp"
#include "rd2/replay.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace rd2::agent {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using replay::Vector6d;

struct AgentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LearnerConfig {
    double gamma = 0.997;
    int n_step = 5;
    int num_batches = 40;          // learner batches per iteration
    int batch_size = 16;
    int sequence_length = 16;      // m
    int target_update_frequency = 500;  // learner steps between hard copies
    double min_iteration_time = 0.0;    // wall-clock floor per iteration, s
    double critic_lr = 1e-3;
    double actor_lr = 1e-4;
    // L2 on the actor head pre-activation. Keeps tanh out of its flat tails:
    // a saturated head has a vanishing policy gradient and never recovers,
    // while this term still sees the raw pre-activation.
    double actor_preact_l2 = 1e-3;
    double grad_clip = 10.0;
    // invertible value rescaling h(x) = sign(x)(sqrt(|x|+1)-1) + eps*x on the
    // Bellman targets; compresses the sparse success bonus so its magnitude
    // cannot drown the dense shaping signal, while argmax_a Q is unchanged
    bool value_rescale = true;
    double eta = 0.9;
    double beta = 0.4;
    int buffer_capacity = 4096;    // sequences
    int min_buffer_fill = 64;      // sequences before learning starts
    int burn_in = 0;               // optional, default off (zero start state)

    void validate() const;
};

struct ActorConfig {
    int num_actors = 2;
    double sigma_base_frac = 0.4;  // of the action limit
    double sigma_decay = 0.1;      // geometric ratio across actors
    int param_refresh_interval = 1;  // episodes between snapshot refreshes

    void validate() const;
    // sigma_i = sigma_base * decay^(i / (num_actors - 1)); actor 0 noisiest
    double sigma_frac(int actor_id) const;
};

// Twin critics (clipped double Q): the Bellman backup bootstraps from the
// minimum of the two target critics, which counters the optimism spiral a
// single critic feeds when the actor climbs its extrapolation noise. The
// policy gradient uses critic 1 only.
struct Networks {
    nn::NetworkParams actor, critic, critic2, target_actor, target_critic,
        target_critic2;
    VectorXd action_limits;

    static Networks make(int hidden, int recurrent_hidden, nn::CellKind cell,
                         const VectorXd& action_limits, std::uint64_t seed);
};

// Per-transition n-step targets and |TD| over a sampled batch, computed with
// zero-start unrolls of the target networks. has_target masks transitions
// that are padding or whose shortest feasible horizon is empty (the final
// in-sequence transition when not terminal; it reappears with a horizon in
// the overlapping neighbor sequence).
struct TargetsResult {
    MatrixXd targets;     // batch x m
    MatrixXd abs_td;      // batch x m, 0 where has_target == 0
    MatrixXd has_target;  // batch x m, 0/1
    MatrixXd q_online;    // batch x m
};

TargetsResult compute_nstep_targets(const std::vector<replay::Sequence>& seqs,
                                    const Networks& nets, double gamma, int n,
                                    bool value_rescale = false);

// The rescaling pair used when value_rescale is on.
double value_h(double x);
double value_h_inv(double y);

struct LearnerMetrics {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double mean_priority = 0.0;
    std::int64_t learner_steps = 0;
};

class Learner {
public:
    Learner(Networks nets, LearnerConfig config);

    LearnerMetrics step(replay::DualPriorityBuffer& buffer,
                        std::mt19937_64& rng);

    const Networks& networks() const { return nets_; }
    Networks& networks() { return nets_; }
    std::int64_t steps() const { return steps_; }
    const LearnerConfig& config() const { return config_; }
    void set_config(const LearnerConfig& c);

private:
    Networks nets_;
    LearnerConfig config_;
    nn::Adam critic_opt_, critic2_opt_, actor_opt_;
    std::int64_t steps_ = 0;
};

// Steps a policy one observation at a time, carrying the recurrent state
// across an episode.
class PolicyRunner {
public:
    PolicyRunner(const nn::NetworkParams& actor, const VectorXd& limits);
    void reset();
    Vector6d act(const Vector6d& obs);

private:
    const nn::NetworkParams* actor_;
    VectorXd limits_;
    nn::RecurrentState state_;
};

struct EvalMetrics {
    double success_rate = 0.0;
    double mean_reward = 0.0;
    double mean_steps = 0.0;
    int episodes = 0;
};

// Maps raw environment wrenches into what the policy observes. Identity for
// plain evaluation; the transfer layer composes the mount transform with its
// correction here.
using ObservationMap = std::function<Vector6d(const Vector6d&)>;

EvalMetrics evaluate_policy(const nn::NetworkParams& actor,
                            const VectorXd& limits, env::Environment& e,
                            int num_episodes, std::uint64_t seed,
                            const ObservationMap& obs_map = {},
                            const std::string& trace_path = {});

// Rolls out with observations re-expressed in a rotated/translated robot
// sensor frame via the mount pose; with correction enabled the deployment
// layer maps them back to the training frame before the policy sees them.
EvalMetrics transfer_rollout(const nn::NetworkParams& actor,
                             const VectorXd& limits, env::Environment& e,
                             const geom::Pose& mount_pose, bool correct,
                             int num_episodes, std::uint64_t seed);

struct EpisodeResult {
    std::vector<replay::Transition> transitions;
    double total_reward = 0.0;
    bool success = false;
};

// One exploratory episode: a_t = clamp(pi(o_t) + N(0, sigma^2), limits).
EpisodeResult run_episode(const nn::NetworkParams& actor,
                          const VectorXd& limits, env::Environment& e,
                          double sigma_frac, std::uint64_t seed,
                          std::mt19937_64& noise_rng);

struct IterationMetrics {
    std::int64_t env_steps = 0;
    std::int64_t learner_steps = 0;
    double mean_episode_reward = 0.0;
    double episode_success_rate = 0.0;
    int episodes = 0;
    double curriculum_frac = 1.0;  // start-band fraction used this iteration
    LearnerMetrics learner;
    replay::BufferStats buffer;
};

// Optional start-depth curriculum. With the F/T-only observation identically
// zero in free space, one policy program serves every free-space start, so
// episodes can begin in a shallow band where exploration actually reaches the
// goal; the band then deepens toward the task's own start offset while the
// behavior success rate stays high, extending the program's depth instead of
// asking sparse exploration to discover it from 35 mm out.
struct CurriculumConfig {
    bool enabled = false;
    double near_z = -0.033;     // z offset of the near (easy) end, m
    double success_hi = 0.30;   // widen the band when iteration success >= hi
    double success_lo = 0.05;   // shrink it when success < lo
    double widen_step = 0.08;   // band-fraction increments per iteration
    double shrink_step = 0.04;
    double init_frac = 0.05;    // starting (and minimum) band fraction

    void validate() const;
};

struct TrialConfig {
    env::TaskSpec task;
    CurriculumConfig curriculum;
    env::PhysicsParams physics;
    LearnerConfig learner;
    ActorConfig actors;
    int hidden = 48;
    int recurrent_hidden = 48;
    nn::CellKind cell = nn::CellKind::Lstm;
    std::uint64_t seed = 0;
    std::int64_t env_steps_per_iteration = 400;
    bool deterministic = false;  // single-task round-robin actors + learner
    bool threaded = false;       // concurrent actor threads per iteration

    void validate() const;
};

// One RD2 trial: its environments, replay buffer, networks, and learner.
class Trial {
public:
    explicit Trial(TrialConfig config);

    IterationMetrics run_iteration();
    EvalMetrics evaluate(int num_episodes, std::uint64_t seed);

    std::int64_t env_steps() const { return env_steps_; }
    std::int64_t iterations() const { return iterations_; }
    const Networks& networks() const { return learner_.networks(); }
    const TrialConfig& config() const { return config_; }
    replay::DualPriorityBuffer& buffer() { return *buffer_; }

    // PBT exploit/explore support
    void copy_weights_from(const Trial& other);
    void restore_networks(const Networks& nets);
    void apply_hyperparams(const LearnerConfig& c);  // rebuilds buffer on m change

    void save_checkpoint(const std::string& path) const;

private:
    void collect_episodes(std::int64_t step_quota, IterationMetrics& metrics);

    TrialConfig config_;
    std::vector<std::unique_ptr<env::Environment>> envs_;
    std::unique_ptr<replay::DualPriorityBuffer> buffer_;
    Learner learner_;
    std::mt19937_64 rng_;
    std::vector<std::mt19937_64> actor_rngs_;
    std::int64_t env_steps_ = 0;
    std::int64_t iterations_ = 0;
    std::uint64_t episode_counter_ = 0;
    double curriculum_frac_ = 1.0;
};

}  // namespace rd2::agent
