#include "rd2/pbt.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <json.hpp>

namespace rd2::pbt {

namespace {

int snap_choice(double v, const std::vector<int>& choices) {
    int best = choices.front();
    double best_d = std::abs(v - best);
    for (int c : choices) {
        const double d = std::abs(v - c);
        if (d < best_d) {
            best = c;
            best_d = d;
        }
    }
    return best;
}

double snap_choice(double v, const std::vector<double>& choices) {
    double best = choices.front();
    for (double c : choices)
        if (std::abs(v - c) < std::abs(v - best)) best = c;
    return best;
}

int clamp_round(double v, std::pair<int, int> range) {
    return std::clamp(static_cast<int>(std::lround(v)), range.first,
                      range.second);
}

}  // namespace

Hyperparams HyperSpace::sample(std::mt19937_64& rng) const {
    Hyperparams h;
    h.num_batches = std::uniform_int_distribution<int>(num_batches.first,
                                                       num_batches.second)(rng);
    h.sequence_length = sequence_length[std::uniform_int_distribution<std::size_t>(
        0, sequence_length.size() - 1)(rng)];
    h.target_update_frequency =
        target_update_frequency[std::uniform_int_distribution<std::size_t>(
            0, target_update_frequency.size() - 1)(rng)];
    h.n_step =
        std::uniform_int_distribution<int>(n_step.first, n_step.second)(rng);
    h.min_iteration_time =
        min_iteration_time[std::uniform_int_distribution<std::size_t>(
            0, min_iteration_time.size() - 1)(rng)];
    return h;
}

Hyperparams HyperSpace::clamp(const Hyperparams& h) const {
    Hyperparams out = h;
    out.num_batches = clamp_round(h.num_batches, num_batches);
    out.sequence_length = snap_choice(h.sequence_length, sequence_length);
    out.target_update_frequency =
        snap_choice(h.target_update_frequency, target_update_frequency);
    out.n_step = clamp_round(h.n_step, n_step);
    out.min_iteration_time =
        snap_choice(h.min_iteration_time, min_iteration_time);
    return out;
}

bool HyperSpace::contains(const Hyperparams& h) const {
    auto in_list = [](auto v, const auto& list) {
        return std::find(list.begin(), list.end(), v) != list.end();
    };
    return h.num_batches >= num_batches.first &&
           h.num_batches <= num_batches.second &&
           in_list(h.sequence_length, sequence_length) &&
           in_list(h.target_update_frequency, target_update_frequency) &&
           h.n_step >= n_step.first && h.n_step <= n_step.second &&
           in_list(h.min_iteration_time, min_iteration_time);
}

Hyperparams explore(const Hyperparams& h, const HyperSpace& space,
                    std::mt19937_64& rng, int trial_id,
                    std::vector<MutationEvent>* audit) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Hyperparams fresh = space.sample(rng);
    Hyperparams out = h;

    auto mutate = [&](const char* name, double before, double resampled,
                      auto apply) {
        MutationEvent ev;
        ev.trial_id = trial_id;
        ev.param = name;
        ev.before = before;
        if (unit(rng) < 0.25) {
            ev.resampled = true;
            ev.after = apply(resampled);
        } else {
            ev.factor = unit(rng) < 0.5 ? 1.2 : 0.8;
            ev.after = apply(before * ev.factor);
        }
        if (audit) audit->push_back(ev);
    };

    mutate("num_batches", h.num_batches, fresh.num_batches, [&](double v) {
        out.num_batches = clamp_round(v, space.num_batches);
        return static_cast<double>(out.num_batches);
    });
    mutate("sequence_length", h.sequence_length, fresh.sequence_length,
           [&](double v) {
               out.sequence_length = snap_choice(v, space.sequence_length);
               return static_cast<double>(out.sequence_length);
           });
    mutate("target_update_frequency", h.target_update_frequency,
           fresh.target_update_frequency, [&](double v) {
               out.target_update_frequency =
                   snap_choice(v, space.target_update_frequency);
               return static_cast<double>(out.target_update_frequency);
           });
    mutate("n_step", h.n_step, fresh.n_step, [&](double v) {
        out.n_step = clamp_round(v, space.n_step);
        return static_cast<double>(out.n_step);
    });
    mutate("min_iteration_time", h.min_iteration_time,
           fresh.min_iteration_time, [&](double v) {
               out.min_iteration_time = snap_choice(v, space.min_iteration_time);
               return out.min_iteration_time;
           });
    return out;
}

std::vector<ExploitDecision> pbt_step(const std::vector<TrialState>& population,
                                      const HyperSpace& space,
                                      std::mt19937_64& rng, double quantile,
                                      std::vector<MutationEvent>* audit) {
    const int n = static_cast<int>(population.size());
    if (n < 2) throw PbtError("population size must be >= 2");
    if (!(quantile > 0.0 && quantile <= 0.5))
        throw PbtError("quantile must be in (0, 0.5]");

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return population[a].last_eval_score > population[b].last_eval_score;
    });
    const int cut = std::max(1, static_cast<int>(n * quantile));

    std::vector<ExploitDecision> decisions(n);
    for (int i = 0; i < n; ++i) {
        decisions[i].trial_id = population[i].trial_id;
        decisions[i].new_hyperparams = population[i].hyperparams;
    }
    std::uniform_int_distribution<int> pick_top(0, cut - 1);
    for (int k = n - cut; k < n; ++k) {
        const int idx = order[k];
        const int src = order[pick_top(rng)];
        if (population[src].last_eval_score <= population[idx].last_eval_score)
            continue;  // never copy from an equal or worse trial
        decisions[idx].copy_from = population[src].trial_id;
        decisions[idx].new_hyperparams =
            explore(population[src].hyperparams, space, rng,
                    population[idx].trial_id, audit);
    }
    return decisions;
}

namespace {

using nlohmann::json;

agent::LearnerConfig apply_hypers(agent::LearnerConfig base,
                                  const Hyperparams& h) {
    base.num_batches = h.num_batches;
    base.sequence_length = h.sequence_length;
    base.target_update_frequency = h.target_update_frequency;
    base.n_step = std::min(h.n_step, h.sequence_length / 2);
    base.min_iteration_time = h.min_iteration_time;
    return base;
}

void write_jsonl(std::ofstream& os, const json& j) {
    if (os.is_open()) os << j.dump() << "\n";
}

}  // namespace

PopulationResult run_population(const PopulationConfig& config) {
    if (config.num_trials < 1) throw PbtError("need at least one trial");
    namespace fs = std::filesystem;

    const bool logging = !config.output_dir.empty();
    std::ofstream mutation_log;
    if (logging) {
        fs::create_directories(config.output_dir);
        mutation_log.open(fs::path(config.output_dir) / "mutations.jsonl");
    }

    std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ULL + 17);

    std::vector<std::unique_ptr<agent::Trial>> trials;
    std::vector<TrialState> states(config.num_trials);
    std::vector<std::ofstream> metric_logs(config.num_trials);
    // weight snapshots for crash restarts
    std::vector<agent::Networks> snapshots;

    for (int i = 0; i < config.num_trials; ++i) {
        states[i].trial_id = i;
        states[i].hyperparams = config.num_trials > 1
                                    ? config.space.sample(rng)
                                    : Hyperparams{};
        if (config.num_trials == 1) {
            // single-trial run keeps the base learner config untouched
            states[i].hyperparams.num_batches = config.trial.learner.num_batches;
            states[i].hyperparams.sequence_length =
                config.trial.learner.sequence_length;
            states[i].hyperparams.target_update_frequency =
                config.trial.learner.target_update_frequency;
            states[i].hyperparams.n_step = config.trial.learner.n_step;
            states[i].hyperparams.min_iteration_time =
                config.trial.learner.min_iteration_time;
        }
        agent::TrialConfig tc = config.trial;
        tc.seed = config.trial.seed + 1000ULL * i;
        tc.learner = apply_hypers(tc.learner, states[i].hyperparams);
        trials.push_back(std::make_unique<agent::Trial>(tc));
        snapshots.push_back(trials[i]->networks());
        if (logging) {
            const fs::path dir = fs::path(config.output_dir) /
                                 ("trial_" + std::to_string(i));
            fs::create_directories(dir);
            metric_logs[i].open(dir / "metrics.jsonl");
        }
    }

    for (int round = 0; round < config.total_rounds; ++round) {
        auto run_trial_round = [&](int i) {
            for (int it = 0; it < config.eval_interval; ++it) {
                try {
                    agent::IterationMetrics m = trials[i]->run_iteration();
                    json j{{"iteration", trials[i]->iterations()},
                           {"env_steps", m.env_steps},
                           {"learner_steps", m.learner_steps},
                           {"mean_episode_reward", m.mean_episode_reward},
                           {"success_rate", m.episode_success_rate},
                           {"buffer_fill", m.buffer.fill},
                           {"mean_priority", m.learner.mean_priority}};
                    write_jsonl(metric_logs[i], j);
                } catch (const std::exception& ex) {
                    std::cerr << "trial " << i << " crashed (" << ex.what()
                              << "), restarting from last checkpoint\n";
                    agent::TrialConfig tc = trials[i]->config();
                    trials[i] = std::make_unique<agent::Trial>(tc);
                    trials[i]->restore_networks(snapshots[i]);
                }
            }
        };

        if (config.trial.deterministic || config.num_trials == 1) {
            for (int i = 0; i < config.num_trials; ++i) run_trial_round(i);
        } else {
            std::vector<std::thread> threads;
            for (int i = 0; i < config.num_trials; ++i)
                threads.emplace_back(run_trial_round, i);
            for (auto& t : threads) t.join();
        }

        for (int i = 0; i < config.num_trials; ++i) {
            agent::EvalMetrics em = trials[i]->evaluate(
                config.eval_episodes, config.seed + 7777ULL * (round + 1));
            states[i].last_eval_score = em.mean_reward;
            states[i].last_success_rate = em.success_rate;
            states[i].iterations_done = trials[i]->iterations();
            snapshots[i] = trials[i]->networks();
            if (logging) {
                const fs::path ckpt = fs::path(config.output_dir) /
                                      ("trial_" + std::to_string(i)) /
                                      "checkpoint.bin";
                trials[i]->save_checkpoint(ckpt.string());
                states[i].checkpoint = ckpt.string();
            }
        }

        if (config.exploit_enabled && config.num_trials >= 2) {
            std::vector<MutationEvent> audit;
            auto decisions =
                pbt_step(states, config.space, rng, config.quantile, &audit);
            for (const auto& ev : audit) {
                write_jsonl(mutation_log,
                            json{{"trial", ev.trial_id},
                                 {"param", ev.param},
                                 {"resampled", ev.resampled},
                                 {"factor", ev.factor},
                                 {"before", ev.before},
                                 {"after", ev.after}});
            }
            for (const auto& d : decisions) {
                if (!d.copy_from) continue;
                trials[d.trial_id]->copy_weights_from(*trials[*d.copy_from]);
                states[d.trial_id].hyperparams = d.new_hyperparams;
                trials[d.trial_id]->apply_hyperparams(apply_hypers(
                    trials[d.trial_id]->config().learner, d.new_hyperparams));
            }
        }
    }

    PopulationResult result;
    result.final_population = states;
    int best = 0;
    for (int i = 1; i < config.num_trials; ++i)
        if (states[i].last_eval_score > states[best].last_eval_score) best = i;
    result.best = states[best];
    if (logging) {
        const fs::path best_path = fs::path(config.output_dir) / "best.bin";
        trials[best]->save_checkpoint(best_path.string());
        result.best.checkpoint = best_path.string();
    }
    return result;
}

}  // namespace rd2::pbt
