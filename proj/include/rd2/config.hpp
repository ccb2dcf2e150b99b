#pragma once

#include "rd2/agent.hpp"
#include "rd2/pbt.hpp"

#include <string>

#include <json.hpp>

namespace rd2::config {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Full experiment description: task, physics, agent, PBT, bookkeeping.
// Reproducible from (config, seed) in deterministic mode.
struct ExperimentConfig {
    agent::TrialConfig trial;
    pbt::PopulationConfig population;  // trial field mirrors `trial`
    bool use_pbt = false;
    std::int64_t max_env_steps = 300000;
    int eval_interval = 5;   // iterations between evaluations (single trial)
    int eval_episodes = 10;
    double early_stop_success = -1.0;  // stop when eval success >= this; <0 off
    std::string output_dir = "run";
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& c, const std::string& path);

// Pose as flat arrays: rotation row-major 9 floats + translation 3 floats.
nlohmann::json pose_to_json(const geom::Pose& p);
geom::Pose pose_from_json(const nlohmann::json& j);

}  // namespace rd2::config
