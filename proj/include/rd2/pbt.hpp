#pragma once

#include "rd2/agent.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace rd2::pbt {

struct PbtError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Hyperparams {
    int num_batches = 40;
    int sequence_length = 16;
    int target_update_frequency = 500;
    int n_step = 5;
    double min_iteration_time = 0.0;
};

struct HyperSpace {
    std::pair<int, int> num_batches{20, 120};
    std::vector<int> sequence_length{16, 32, 64, 128};
    std::vector<int> target_update_frequency{25000, 50000, 75000, 100000};
    std::pair<int, int> n_step{3, 8};
    std::vector<double> min_iteration_time{30.0, 40.0, 50.0, 60.0};

    Hyperparams sample(std::mt19937_64& rng) const;
    Hyperparams clamp(const Hyperparams& h) const;
    bool contains(const Hyperparams& h) const;
};

// One entry per perturbed/resampled parameter, for the audit log.
struct MutationEvent {
    int trial_id = 0;
    std::string param;
    bool resampled = false;
    double factor = 0.0;  // 1.2 or 0.8 when perturbed
    double before = 0.0;
    double after = 0.0;
};

// Each parameter independently: 25% resample from the space, otherwise
// multiply by 1.2 or 0.8 (uniform) and clamp/round into range or snap to the
// nearest allowed choice.
Hyperparams explore(const Hyperparams& h, const HyperSpace& space,
                    std::mt19937_64& rng, int trial_id,
                    std::vector<MutationEvent>* audit = nullptr);

struct TrialState {
    int trial_id = 0;
    Hyperparams hyperparams;
    double last_eval_score = 0.0;  // mean evaluation reward
    double last_success_rate = 0.0;
    std::int64_t iterations_done = 0;
    std::string checkpoint;
};

struct ExploitDecision {
    int trial_id = 0;
    std::optional<int> copy_from;  // set when the trial copies a better one
    Hyperparams new_hyperparams;
};

// Truncation selection: bottom-quantile trials copy weights and
// hyperparameters from a uniformly chosen top-quantile trial with a strictly
// higher score, then explore. Ties keep self.
std::vector<ExploitDecision> pbt_step(const std::vector<TrialState>& population,
                                      const HyperSpace& space,
                                      std::mt19937_64& rng, double quantile,
                                      std::vector<MutationEvent>* audit = nullptr);

struct PopulationConfig {
    int num_trials = 4;
    agent::TrialConfig trial;  // per-trial base config; seed offsets per trial
    HyperSpace space;
    double quantile = 0.25;
    int eval_interval = 5;  // iterations between evaluations
    int eval_episodes = 10;
    int total_rounds = 20;  // evaluation rounds
    bool exploit_enabled = true;
    std::string output_dir;  // empty disables logging
    std::uint64_t seed = 0;
};

struct PopulationResult {
    TrialState best;
    std::vector<TrialState> final_population;
};

PopulationResult run_population(const PopulationConfig& config);

}  // namespace rd2::pbt
