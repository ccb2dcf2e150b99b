#include "rd2/agent.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <thread>

namespace rd2::agent {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

// Contact wrenches span hundreds of newtons while actions live at the
// millimeter scale; both are brought to O(1) before touching a network so
// neither signal drowns the other and the recurrent cells stay unsaturated.
constexpr double kForceScale = 10.0;    // N
constexpr double kTorqueScale = 1.0;    // N*m

Vector6d normalize_obs(const Vector6d& obs) {
    Vector6d v = obs;
    v.head<3>() /= kForceScale;
    v.tail<3>() /= kTorqueScale;
    return v;
}

// inputs[t] for the actor (obs) and critic (obs || action / limits)
void build_inputs(const std::vector<replay::Sequence>& seqs,
                  const VectorXd& limits, std::vector<MatrixXd>& obs_seq,
                  std::vector<MatrixXd>& critic_seq) {
    const int batch = static_cast<int>(seqs.size());
    const int m = seqs[0].length();
    obs_seq.assign(m, MatrixXd::Zero(batch, 6));
    critic_seq.assign(m, MatrixXd::Zero(batch, 12));
    for (int b = 0; b < batch; ++b) {
        for (int t = 0; t < m; ++t) {
            const replay::Transition& tr = seqs[b].transitions[t];
            const Vector6d o = normalize_obs(tr.obs);
            obs_seq[t].row(b) = o.transpose();
            critic_seq[t].row(b).head<6>() = o.transpose();
            critic_seq[t].row(b).tail<6>() =
                tr.action.cwiseQuotient(limits).transpose();
        }
    }
}

}  // namespace

void LearnerConfig::validate() const {
    if (gamma < 0.0 || gamma > 1.0) throw AgentError("gamma must be in [0,1]");
    if (n_step < 1) throw AgentError("n_step must be >= 1");
    if (sequence_length < 2 || sequence_length % 2 != 0)
        throw AgentError("sequence_length must be even and >= 2");
    if (n_step > sequence_length / 2)
        throw AgentError("n_step must be <= sequence_length / 2");
    if (num_batches < 1) throw AgentError("num_batches must be >= 1");
    if (batch_size < 1) throw AgentError("batch_size must be >= 1");
    if (target_update_frequency < 1)
        throw AgentError("target_update_frequency must be >= 1");
    if (buffer_capacity < 1) throw AgentError("buffer_capacity must be >= 1");
    if (burn_in < 0 || burn_in >= sequence_length)
        throw AgentError("burn_in must be in [0, sequence_length)");
}

void ActorConfig::validate() const {
    if (num_actors < 1) throw AgentError("num_actors must be >= 1");
    if (sigma_base_frac < 0.0) throw AgentError("sigma_base_frac must be >= 0");
    if (param_refresh_interval < 1)
        throw AgentError("param_refresh_interval must be >= 1");
}

double ActorConfig::sigma_frac(int actor_id) const {
    if (num_actors == 1) return sigma_base_frac;
    const double e = static_cast<double>(actor_id) / (num_actors - 1);
    return sigma_base_frac * std::pow(sigma_decay, e);
}

Networks Networks::make(int hidden, int recurrent_hidden, nn::CellKind cell,
                        const VectorXd& action_limits, std::uint64_t seed) {
    Networks nets;
    nn::NetworkSpec actor_spec;
    actor_spec.hidden = hidden;
    actor_spec.recurrent_hidden = recurrent_hidden;
    actor_spec.cell = cell;
    nn::NetworkSpec critic_spec = actor_spec;
    critic_spec.critic = true;

    nets.actor = nn::make_params(actor_spec, mix_seed(seed, 1));
    nets.critic = nn::make_params(critic_spec, mix_seed(seed, 2));
    nets.critic2 = nn::make_params(critic_spec, mix_seed(seed, 3));
    nets.target_actor = nets.actor;
    nets.target_critic = nets.critic;
    nets.target_critic2 = nets.critic2;
    nets.action_limits = action_limits;
    return nets;
}

namespace {
constexpr double kRescaleEps = 1e-3;
}

double value_h(double x) {
    return std::copysign(std::sqrt(std::abs(x) + 1.0) - 1.0, x) +
           kRescaleEps * x;
}

double value_h_inv(double y) {
    const double a = std::abs(y);
    const double root =
        (std::sqrt(1.0 + 4.0 * kRescaleEps * (a + 1.0 + kRescaleEps)) - 1.0) /
        (2.0 * kRescaleEps);
    return std::copysign(root * root - 1.0, y);
}

TargetsResult compute_nstep_targets(const std::vector<replay::Sequence>& seqs,
                                    const Networks& nets, double gamma, int n,
                                    bool value_rescale) {
    if (n < 1) throw AgentError("n_step must be >= 1");
    if (seqs.empty()) throw AgentError("empty sequence batch");
    const int batch = static_cast<int>(seqs.size());
    const int m = seqs[0].length();

    std::vector<MatrixXd> obs_seq, critic_seq;
    build_inputs(seqs, nets.action_limits, obs_seq, critic_seq);

    nn::ForwardCache actor_cache, tq_cache, q_cache;
    nn::RecurrentState zero_a =
        nn::RecurrentState::zero(nets.target_actor.spec, batch);
    nn::forward_actor(nets.target_actor, obs_seq, nets.action_limits, zero_a,
                      actor_cache);

    std::vector<MatrixXd> target_critic_seq(m);
    for (int t = 0; t < m; ++t) {
        target_critic_seq[t] = MatrixXd(batch, 12);
        target_critic_seq[t].leftCols(6) = obs_seq[t];
        target_critic_seq[t].rightCols(6) =
            actor_cache.steps[t].out *
            nets.action_limits.cwiseInverse().asDiagonal();
    }
    nn::RecurrentState zero_c =
        nn::RecurrentState::zero(nets.target_critic.spec, batch);
    nn::forward(nets.target_critic, target_critic_seq, zero_c, tq_cache);
    nn::ForwardCache tq2_cache;
    nn::forward(nets.target_critic2, target_critic_seq, zero_c, tq2_cache);
    nn::forward(nets.critic, critic_seq, zero_c, q_cache);

    TargetsResult out;
    out.targets = MatrixXd::Zero(batch, m);
    out.abs_td = MatrixXd::Zero(batch, m);
    out.has_target = MatrixXd::Zero(batch, m);
    out.q_online = MatrixXd::Zero(batch, m);
    for (int t = 0; t < m; ++t)
        out.q_online.col(t) = q_cache.steps[t].out.col(0);

    for (int b = 0; b < batch; ++b) {
        const auto& trs = seqs[b].transitions;
        int terminal_at = -1;
        for (int t = 0; t < m; ++t)
            if (trs[t].valid && trs[t].terminal) terminal_at = t;

        for (int t = 0; t < m; ++t) {
            if (!trs[t].valid) continue;
            double g = 0.0;
            bool has = false;
            if (terminal_at >= t && terminal_at <= t + n - 1) {
                // episode ends inside the horizon: truncated sum, bootstrap 0
                double disc = 1.0;
                for (int k = t; k <= terminal_at; ++k, disc *= gamma)
                    g += disc * trs[k].reward;
                has = true;
            } else {
                // largest feasible in-sequence horizon; the final transition
                // of a non-terminal sequence has none and reappears with one
                // in the overlapping neighbor
                const int np = std::min(n, m - 1 - t);
                if (np >= 1) {
                    double disc = 1.0;
                    for (int k = 0; k < np; ++k, disc *= gamma)
                        g += disc * trs[t + k].reward;
                    double boot = std::min(tq_cache.steps[t + np].out(b, 0),
                                           tq2_cache.steps[t + np].out(b, 0));
                    if (value_rescale) boot = value_h_inv(boot);
                    g += disc * boot;
                    has = true;
                }
            }
            if (has) {
                out.targets(b, t) = value_rescale ? value_h(g) : g;
                out.abs_td(b, t) = std::abs(g - out.q_online(b, t));
                out.has_target(b, t) = 1.0;
            }
        }
    }
    return out;
}

Learner::Learner(Networks nets, LearnerConfig config)
    : nets_(std::move(nets)), config_(config) {
    config_.validate();
    critic_opt_.lr = config_.critic_lr;
    critic2_opt_.lr = config_.critic_lr;
    actor_opt_.lr = config_.actor_lr;
    critic_opt_.grad_clip = config_.grad_clip;
    critic2_opt_.grad_clip = config_.grad_clip;
    actor_opt_.grad_clip = config_.grad_clip;
}

void Learner::set_config(const LearnerConfig& c) {
    c.validate();
    config_ = c;
    critic_opt_.lr = c.critic_lr;
    actor_opt_.lr = c.actor_lr;
    critic_opt_ = nn::Adam{c.critic_lr, 0.9, 0.999, 1e-8, c.grad_clip};
    critic2_opt_ = nn::Adam{c.critic_lr, 0.9, 0.999, 1e-8, c.grad_clip};
    actor_opt_ = nn::Adam{c.actor_lr, 0.9, 0.999, 1e-8, c.grad_clip};
}

LearnerMetrics Learner::step(replay::DualPriorityBuffer& buffer,
                             std::mt19937_64& rng) {
    replay::SampleBatch batch = buffer.sample(config_.batch_size, rng);
    const int B = static_cast<int>(batch.sequences.size());
    const int m = buffer.sequence_length();

    TargetsResult tr =
        compute_nstep_targets(batch.sequences, nets_, config_.gamma,
                              config_.n_step, config_.value_rescale);
    MatrixXd mask = tr.has_target;
    if (config_.burn_in > 0)
        mask.leftCols(config_.burn_in).setZero();
    MatrixXd w = batch.weights.cwiseProduct(mask);
    const double sum_w = w.sum();

    LearnerMetrics metrics;
    if (sum_w > 0.0) {
        std::vector<MatrixXd> obs_seq, critic_seq;
        build_inputs(batch.sequences, nets_.action_limits, obs_seq,
                     critic_seq);

        // critic: weighted squared n-step TD error
        nn::ForwardCache q_cache;
        nn::RecurrentState zero_c =
            nn::RecurrentState::zero(nets_.critic.spec, B);
        nn::forward(nets_.critic, critic_seq, zero_c, q_cache);

        // Huber gradient: a sparse success bonus produces TD errors orders of
        // magnitude above the dense shaping signal; the linear tail keeps one
        // such sample from shocking the critic (and, through it, the actor).
        constexpr double kHuberDelta = 1.0;
        double critic_loss = 0.0;
        std::vector<MatrixXd> grad_q(m);
        for (int t = 0; t < m; ++t) {
            grad_q[t] = MatrixXd::Zero(B, 1);
            for (int b = 0; b < B; ++b) {
                const double err = q_cache.steps[t].out(b, 0) - tr.targets(b, t);
                critic_loss += w(b, t) * err * err;
                grad_q[t](b, 0) = 2.0 * w(b, t) *
                                  std::clamp(err, -kHuberDelta, kHuberDelta) /
                                  sum_w;
            }
        }
        metrics.critic_loss = critic_loss / sum_w;

        nn::Gradients critic_grads;
        nn::backward(q_cache, grad_q, nullptr, critic_grads);
        critic_opt_.step(nets_.critic, critic_grads);

        // second critic regresses to the same clipped targets
        nn::ForwardCache q2_cache;
        nn::forward(nets_.critic2, critic_seq, zero_c, q2_cache);
        std::vector<MatrixXd> grad_q2(m);
        for (int t = 0; t < m; ++t) {
            grad_q2[t] = MatrixXd::Zero(B, 1);
            for (int b = 0; b < B; ++b) {
                const double err =
                    q2_cache.steps[t].out(b, 0) - tr.targets(b, t);
                grad_q2[t](b, 0) = 2.0 * w(b, t) *
                                   std::clamp(err, -kHuberDelta, kHuberDelta) /
                                   sum_w;
            }
        }
        nn::Gradients critic2_grads;
        nn::backward(q2_cache, grad_q2, nullptr, critic2_grads);
        critic2_opt_.step(nets_.critic2, critic2_grads);

        // actor: ascend Q(o, pi(o))
        const double count = mask.sum();
        if (count > 0.0) {
            nn::ForwardCache pi_cache;
            nn::RecurrentState zero_a =
                nn::RecurrentState::zero(nets_.actor.spec, B);
            nn::forward_actor(nets_.actor, obs_seq, nets_.action_limits, zero_a,
                              pi_cache);
            std::vector<MatrixXd> qpi_in(m);
            for (int t = 0; t < m; ++t) {
                qpi_in[t] = MatrixXd(B, 12);
                qpi_in[t].leftCols(6) = obs_seq[t];
                qpi_in[t].rightCols(6) =
                    pi_cache.steps[t].out *
                    nets_.action_limits.cwiseInverse().asDiagonal();
            }
            nn::ForwardCache qpi_cache;
            nn::forward(nets_.critic, qpi_in, zero_c, qpi_cache);

            double actor_loss = 0.0;
            std::vector<MatrixXd> grad_qpi(m);
            for (int t = 0; t < m; ++t) {
                grad_qpi[t] = MatrixXd::Zero(B, 1);
                for (int b = 0; b < B; ++b) {
                    if (mask(b, t) == 0.0) continue;
                    actor_loss -= qpi_cache.steps[t].out(b, 0);
                    grad_qpi[t](b, 0) = -1.0 / count;
                }
            }
            metrics.actor_loss = actor_loss / count;

            nn::Gradients scratch;
            std::vector<MatrixXd> grad_in;
            nn::backward(qpi_cache, grad_qpi, nullptr, scratch, &grad_in);
            // chain rule through the action normalization above
            std::vector<MatrixXd> grad_action(m);
            for (int t = 0; t < m; ++t)
                grad_action[t] = grad_in[t].rightCols(6) *
                                 nets_.action_limits.cwiseInverse().asDiagonal();

            nn::Gradients actor_grads;
            nn::backward(pi_cache, grad_action, &nets_.action_limits,
                         actor_grads);
            if (config_.actor_preact_l2 > 0.0) {
                // L2 on the head pre-activation beyond a dead zone of +-1:
                // actions up to tanh(1) of the limit are free, but the flat
                // tanh tails (where the policy gradient vanishes and the
                // policy can never recover) stay off limits. The gradient is
                // fed straight past the tanh via null limits below.
                constexpr double kFreeZone = 1.0;
                std::vector<MatrixXd> grad_zo(m);
                const double scale = 2.0 * config_.actor_preact_l2 / count;
                for (int t = 0; t < m; ++t) {
                    const MatrixXd& zo = pi_cache.steps[t].zo;
                    MatrixXd excess =
                        (zo.array().abs() - kFreeZone).max(0.0) *
                        zo.array().sign();
                    grad_zo[t] = scale * excess.cwiseProduct(
                                             mask.col(t) * MatrixXd::Ones(1, 6));
                }
                nn::Gradients reg_grads;
                nn::backward(pi_cache, grad_zo, nullptr, reg_grads);
                actor_grads.axpy(1.0, reg_grads);
            }
            actor_opt_.step(nets_.actor, actor_grads);
        }
    }

    // fresh priorities back to the buffer
    std::vector<double> seq_priorities(B);
    std::vector<std::vector<double>> abs_td(B, std::vector<double>(m, 0.0));
    double priority_sum = 0.0;
    for (int b = 0; b < B; ++b) {
        std::vector<double> valid_td;
        for (int t = 0; t < m; ++t) {
            if (!batch.sequences[b].transitions[t].valid) continue;
            abs_td[b][t] = tr.abs_td(b, t);
            valid_td.push_back(tr.abs_td(b, t));
        }
        seq_priorities[b] =
            replay::compute_sequence_priority(valid_td, config_.eta);
        priority_sum += seq_priorities[b];
    }
    buffer.update_priorities(batch.handles, seq_priorities, abs_td);
    metrics.mean_priority = priority_sum / B;

    ++steps_;
    if (steps_ % config_.target_update_frequency == 0) {
        nn::hard_update(nets_.target_actor, nets_.actor);
        nn::hard_update(nets_.target_critic, nets_.critic);
        nn::hard_update(nets_.target_critic2, nets_.critic2);
    }
    metrics.learner_steps = steps_;
    return metrics;
}

PolicyRunner::PolicyRunner(const nn::NetworkParams& actor,
                           const VectorXd& limits)
    : actor_(&actor),
      limits_(limits),
      state_(nn::RecurrentState::zero(actor.spec, 1)) {}

void PolicyRunner::reset() {
    state_ = nn::RecurrentState::zero(actor_->spec, 1);
}

Vector6d PolicyRunner::act(const Vector6d& obs) {
    std::vector<MatrixXd> input{normalize_obs(obs).transpose()};
    nn::ForwardCache cache;
    nn::forward_actor(*actor_, input, limits_, state_, cache);
    state_ = cache.final_state();
    return cache.steps[0].out.row(0).transpose();
}

EpisodeResult run_episode(const nn::NetworkParams& actor,
                          const VectorXd& limits, env::Environment& e,
                          double sigma_frac, std::uint64_t seed,
                          std::mt19937_64& noise_rng) {
    EpisodeResult result;
    PolicyRunner policy(actor, limits);
    Vector6d obs = e.reset(seed).to_vector();
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Ornstein-Uhlenbeck exploration, unit stationary std per channel.
    // Temporal correlation strings together the sustained motions (a
    // multi-step descent, a steady lateral push) that white noise almost
    // never produces, so sparse contact events actually reach the buffer.
    constexpr double kOuTheta = 0.15;
    const double ou_drive = std::sqrt(kOuTheta * (2.0 - kOuTheta));
    Vector6d ou = Vector6d::Zero();

    while (true) {
        Vector6d action = policy.act(obs);
        if (sigma_frac > 0.0) {
            for (int i = 0; i < 6; ++i) {
                ou[i] = (1.0 - kOuTheta) * ou[i] + ou_drive * gauss(noise_rng);
                action[i] += sigma_frac * limits[i] * ou[i];
                action[i] = std::clamp(action[i], -limits[i], limits[i]);
            }
        }
        env::StepResult sr = e.step(env::Twist::from_vector(action));
        replay::Transition t;
        t.obs = obs;
        t.action = action;
        t.reward = sr.reward;
        t.terminal = sr.done_reason == env::DoneReason::Success;
        result.transitions.push_back(t);
        result.total_reward += sr.reward;
        obs = sr.observation.to_vector();
        if (sr.done) {
            result.success = sr.done_reason == env::DoneReason::Success;
            break;
        }
    }
    return result;
}

EvalMetrics evaluate_policy(const nn::NetworkParams& actor,
                            const VectorXd& limits, env::Environment& e,
                            int num_episodes, std::uint64_t seed,
                            const ObservationMap& obs_map,
                            const std::string& trace_path) {
    EvalMetrics metrics;
    metrics.episodes = num_episodes;
    std::ofstream trace;
    if (!trace_path.empty()) {
        trace.open(trace_path);
        if (!trace) throw AgentError("cannot open trace file " + trace_path);
        trace.precision(17);
    }

    for (int ep = 0; ep < num_episodes; ++ep) {
        PolicyRunner policy(actor, limits);
        Vector6d raw = e.reset(mix_seed(seed, ep)).to_vector();
        double ep_reward = 0.0;
        int steps = 0;
        while (true) {
            const Vector6d obs = obs_map ? obs_map(raw) : raw;
            const Vector6d action = policy.act(obs);
            env::StepResult sr = e.step(env::Twist::from_vector(action));
            ep_reward += sr.reward;
            ++steps;
            if (trace.is_open()) {
                trace << "{\"t\":" << steps - 1 << ",\"obs\":[";
                for (int i = 0; i < 6; ++i)
                    trace << (i ? "," : "") << obs[i];
                trace << "],\"action\":[";
                for (int i = 0; i < 6; ++i)
                    trace << (i ? "," : "") << action[i];
                trace << "],\"reward\":" << sr.reward
                      << ",\"done\":" << (sr.done ? "true" : "false") << "}\n";
            }
            raw = sr.observation.to_vector();
            if (sr.done) {
                if (sr.done_reason == env::DoneReason::Success)
                    metrics.success_rate += 1.0;
                break;
            }
        }
        metrics.mean_reward += ep_reward;
        metrics.mean_steps += steps;
    }
    metrics.success_rate /= num_episodes;
    metrics.mean_reward /= num_episodes;
    metrics.mean_steps /= num_episodes;
    return metrics;
}

EvalMetrics transfer_rollout(const nn::NetworkParams& actor,
                             const VectorXd& limits, env::Environment& e,
                             const geom::Pose& mount_pose, bool correct,
                             int num_episodes, std::uint64_t seed) {
    mount_pose.validate();
    const geom::Matrix6d fwd = geom::wrench_transform_matrix(mount_pose);
    const geom::Matrix6d inv =
        geom::wrench_transform_matrix(geom::pose_inverse(mount_pose));
    ObservationMap map = [fwd, inv, correct](const Vector6d& w) -> Vector6d {
        const Vector6d robot_frame = fwd * w;
        return correct ? Vector6d(inv * robot_frame) : robot_frame;
    };
    return evaluate_policy(actor, limits, e, num_episodes, seed, map);
}

void CurriculumConfig::validate() const {
    if (success_lo >= success_hi)
        throw AgentError("curriculum success_lo must be < success_hi");
    if (init_frac <= 0.0 || init_frac > 1.0)
        throw AgentError("curriculum init_frac must be in (0, 1]");
    if (widen_step < 0.0 || shrink_step < 0.0)
        throw AgentError("curriculum steps must be >= 0");
}

void TrialConfig::validate() const {
    task.validate();
    curriculum.validate();
    physics.validate();
    learner.validate();
    actors.validate();
    if (hidden < 1 || recurrent_hidden < 1)
        throw AgentError("network sizes must be >= 1");
    if (env_steps_per_iteration < 1)
        throw AgentError("env_steps_per_iteration must be >= 1");
}

Trial::Trial(TrialConfig config)
    : config_(std::move(config)),
      buffer_(std::make_unique<replay::DualPriorityBuffer>(
          config_.learner.buffer_capacity, config_.learner.sequence_length,
          config_.learner.eta, config_.learner.beta)),
      learner_(Networks::make(config_.hidden, config_.recurrent_hidden,
                              config_.cell, config_.physics.action_limits(),
                              config_.seed),
               config_.learner),
      rng_(mix_seed(config_.seed, 0xabcdef)) {
    config_.validate();
    curriculum_frac_ =
        config_.curriculum.enabled ? config_.curriculum.init_frac : 1.0;
    for (int i = 0; i < config_.actors.num_actors; ++i) {
        envs_.push_back(
            std::make_unique<env::Environment>(config_.task, config_.physics));
        actor_rngs_.emplace_back(mix_seed(config_.seed, 0x1000 + i));
    }
}

void Trial::collect_episodes(std::int64_t step_quota,
                             IterationMetrics& metrics) {
    const int n_actors = config_.actors.num_actors;
    std::int64_t collected = 0;

    const double band_frac = curriculum_frac_;  // fixed for this iteration
    auto one_episode = [&](int actor_id, const nn::NetworkParams& snapshot,
                           std::uint64_t ep_seed) -> EpisodeResult {
        if (config_.curriculum.enabled) {
            // start z interpolates between the near end and the task's own
            // offset; the draw is a pure function of the episode seed
            std::mt19937_64 crng(mix_seed(ep_seed, 0x5eed));
            const double u =
                std::uniform_real_distribution<double>(0.0, 1.0)(crng);
            Eigen::Vector3d lin = config_.task.initial_offset.linear;
            lin.z() = config_.curriculum.near_z +
                      u * band_frac * (lin.z() - config_.curriculum.near_z);
            envs_[actor_id]->set_initial_linear_offset(lin);
        }
        return run_episode(snapshot, learner_.networks().action_limits,
                           *envs_[actor_id], config_.actors.sigma_frac(actor_id),
                           ep_seed, actor_rngs_[actor_id]);
    };

    if (config_.threaded && !config_.deterministic && n_actors > 1) {
        // one collection thread per actor; the buffer serializes appends
        std::mutex metrics_mutex;
        std::atomic<std::int64_t> remaining{step_quota};
        const nn::NetworkParams snapshot = learner_.networks().actor;
        std::vector<std::thread> threads;
        const std::uint64_t base_ep = episode_counter_;
        std::atomic<std::uint64_t> ep_index{0};
        for (int i = 0; i < n_actors; ++i) {
            threads.emplace_back([&, i] {
                while (remaining.load() > 0) {
                    const std::uint64_t ep = base_ep + ep_index.fetch_add(1);
                    try {
                        EpisodeResult r = one_episode(
                            i, snapshot, mix_seed(config_.seed, 0x2000 + ep));
                        auto seqs = replay::segment_episode(
                            r.transitions, config_.learner.sequence_length, ep);
                        buffer_->append(seqs);
                        remaining -=
                            static_cast<std::int64_t>(r.transitions.size());
                        std::lock_guard<std::mutex> lock(metrics_mutex);
                        metrics.episodes += 1;
                        metrics.mean_episode_reward += r.total_reward;
                        metrics.episode_success_rate += r.success ? 1.0 : 0.0;
                        collected += static_cast<std::int64_t>(r.transitions.size());
                    } catch (const std::exception& ex) {
                        std::cerr << "actor " << i << " episode failed: "
                                  << ex.what() << "\n";
                    }
                }
            });
        }
        for (auto& t : threads) t.join();
        episode_counter_ = base_ep + ep_index.load();
    } else {
        int actor_id = 0;
        while (collected < step_quota) {
            const std::uint64_t ep = episode_counter_++;
            try {
                EpisodeResult r =
                    one_episode(actor_id, learner_.networks().actor,
                                mix_seed(config_.seed, 0x2000 + ep));
                auto seqs = replay::segment_episode(
                    r.transitions, config_.learner.sequence_length, ep);
                buffer_->append(seqs);
                collected += static_cast<std::int64_t>(r.transitions.size());
                metrics.episodes += 1;
                metrics.mean_episode_reward += r.total_reward;
                metrics.episode_success_rate += r.success ? 1.0 : 0.0;
            } catch (const std::exception& ex) {
                std::cerr << "actor " << actor_id << " episode failed: "
                          << ex.what() << "\n";
            }
            actor_id = (actor_id + 1) % n_actors;
        }
    }

    env_steps_ += collected;
    if (metrics.episodes > 0) {
        metrics.mean_episode_reward /= metrics.episodes;
        metrics.episode_success_rate /= metrics.episodes;
    }
}

IterationMetrics Trial::run_iteration() {
    const auto start = std::chrono::steady_clock::now();
    IterationMetrics metrics;
    collect_episodes(config_.env_steps_per_iteration, metrics);
    metrics.curriculum_frac = curriculum_frac_;
    if (config_.curriculum.enabled && metrics.episodes > 0) {
        const auto& cur = config_.curriculum;
        if (metrics.episode_success_rate >= cur.success_hi)
            curriculum_frac_ =
                std::min(1.0, curriculum_frac_ + cur.widen_step);
        else if (metrics.episode_success_rate < cur.success_lo)
            curriculum_frac_ =
                std::max(cur.init_frac, curriculum_frac_ - cur.shrink_step);
    }

    if (buffer_->size() >= config_.learner.min_buffer_fill) {
        for (int i = 0; i < config_.learner.num_batches; ++i)
            metrics.learner = learner_.step(*buffer_, rng_);
    }
    metrics.env_steps = env_steps_;
    metrics.learner_steps = learner_.steps();
    metrics.buffer = buffer_->stats();
    ++iterations_;

    if (!config_.deterministic && config_.learner.min_iteration_time > 0.0) {
        const auto elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          start)
                .count();
        if (elapsed < config_.learner.min_iteration_time)
            std::this_thread::sleep_for(std::chrono::duration<double>(
                config_.learner.min_iteration_time - elapsed));
    }
    return metrics;
}

EvalMetrics Trial::evaluate(int num_episodes, std::uint64_t seed) {
    env::Environment eval_env(config_.task, config_.physics);
    return evaluate_policy(learner_.networks().actor,
                           learner_.networks().action_limits, eval_env,
                           num_episodes, seed);
}

void Trial::copy_weights_from(const Trial& other) {
    Networks& mine = learner_.networks();
    const Networks& theirs = other.networks();
    mine.actor = theirs.actor;
    mine.critic = theirs.critic;
    mine.critic2 = theirs.critic2;
    mine.target_actor = theirs.target_actor;
    mine.target_critic = theirs.target_critic;
    mine.target_critic2 = theirs.target_critic2;
    curriculum_frac_ = other.curriculum_frac_;  // band matches the weights
    learner_.set_config(learner_.config());  // reset optimizer moments
}

void Trial::restore_networks(const Networks& nets) {
    learner_.networks() = nets;
    learner_.set_config(learner_.config());
}

void Trial::apply_hyperparams(const LearnerConfig& c) {
    c.validate();
    const bool m_changed = c.sequence_length != config_.learner.sequence_length;
    config_.learner = c;
    learner_.set_config(c);
    if (m_changed) {
        buffer_ = std::make_unique<replay::DualPriorityBuffer>(
            c.buffer_capacity, c.sequence_length, c.eta, c.beta);
    }
}

void Trial::save_checkpoint(const std::string& path) const {
    nn::save_params(learner_.networks().actor, path);
}

}  // namespace rd2::agent
