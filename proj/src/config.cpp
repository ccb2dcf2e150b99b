#include "rd2/config.hpp"

#include <fstream>

namespace rd2::config {

using nlohmann::json;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config field '") + key +
                          "' has the wrong type");
    }
}

Eigen::Vector3d vec3_or(const json& j, const char* key,
                        const Eigen::Vector3d& fallback) {
    if (!j.contains(key)) return fallback;
    auto a = j.at(key);
    if (!a.is_array() || a.size() != 3)
        throw ConfigError(std::string("config field '") + key +
                          "' must be an array of 3 numbers");
    return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

json vec3_json(const Eigen::Vector3d& v) { return json{v.x(), v.y(), v.z()}; }

nn::CellKind cell_from_string(const std::string& s) {
    if (s == "lstm") return nn::CellKind::Lstm;
    if (s == "relu_rnn") return nn::CellKind::ReluRnn;
    if (s == "none") return nn::CellKind::None;
    throw ConfigError("network.cell must be one of lstm|relu_rnn|none");
}

std::string cell_to_string(nn::CellKind c) {
    switch (c) {
        case nn::CellKind::Lstm: return "lstm";
        case nn::CellKind::ReluRnn: return "relu_rnn";
        case nn::CellKind::None: return "none";
    }
    return "lstm";
}

}  // namespace

json pose_to_json(const geom::Pose& p) {
    json rot = json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
    return json{{"rotation", rot}, {"translation", vec3_json(p.translation)}};
}

geom::Pose pose_from_json(const json& j) {
    geom::Pose p;
    if (j.contains("rotation")) {
        auto rot = j.at("rotation");
        if (!rot.is_array() || rot.size() != 9)
            throw ConfigError("pose rotation must be 9 floats, row-major");
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                p.rotation(r, c) = rot[3 * r + c].get<double>();
    }
    p.translation = vec3_or(j, "translation", Eigen::Vector3d::Zero());
    p.validate();
    return p;
}

json to_json(const ExperimentConfig& c) {
    const auto& t = c.trial;
    json task{{"kind", t.task.kind == env::TaskKind::LapJoint ? "lap_joint"
                                                              : "peg_in_hole"},
              {"clearance", t.task.clearance},
              {"success_epsilon", t.task.success_epsilon},
              {"success_bonus", t.task.success_bonus},
              {"max_steps", t.task.max_steps},
              {"lambda_rot", t.task.lambda_rot},
              {"initial_offset",
               json{{"linear", vec3_json(t.task.initial_offset.linear)},
                    {"angular", vec3_json(t.task.initial_offset.angular)},
                    {"linear_jitter",
                     vec3_json(t.task.initial_offset.linear_jitter)},
                    {"angular_jitter",
                     vec3_json(t.task.initial_offset.angular_jitter)}}}};
    json physics{{"contact_stiffness", t.physics.contact_stiffness},
                 {"contact_damping", t.physics.contact_damping},
                 {"friction_coeff", t.physics.friction_coeff},
                 {"friction_smoothing", t.physics.friction_smoothing},
                 {"dt", t.physics.dt},
                 {"v_max", t.physics.v_max},
                 {"w_max", t.physics.w_max},
                 {"ft_noise_frac", t.physics.ft_noise_frac},
                 {"friction_noise_frac", t.physics.friction_noise_frac},
                 {"sensor_pose", pose_to_json(t.physics.sensor_pose)}};
    json learner{{"gamma", t.learner.gamma},
                 {"n_step", t.learner.n_step},
                 {"num_batches", t.learner.num_batches},
                 {"batch_size", t.learner.batch_size},
                 {"sequence_length", t.learner.sequence_length},
                 {"target_update_frequency", t.learner.target_update_frequency},
                 {"min_iteration_time", t.learner.min_iteration_time},
                 {"critic_lr", t.learner.critic_lr},
                 {"actor_lr", t.learner.actor_lr},
                 {"actor_preact_l2", t.learner.actor_preact_l2},
                 {"value_rescale", t.learner.value_rescale},
                 {"grad_clip", t.learner.grad_clip},
                 {"eta", t.learner.eta},
                 {"beta", t.learner.beta},
                 {"buffer_capacity", t.learner.buffer_capacity},
                 {"min_buffer_fill", t.learner.min_buffer_fill},
                 {"burn_in", t.learner.burn_in}};
    json curriculum{{"enabled", t.curriculum.enabled},
                    {"near_z", t.curriculum.near_z},
                    {"success_hi", t.curriculum.success_hi},
                    {"success_lo", t.curriculum.success_lo},
                    {"widen_step", t.curriculum.widen_step},
                    {"shrink_step", t.curriculum.shrink_step},
                    {"init_frac", t.curriculum.init_frac}};
    json actors{{"num_actors", t.actors.num_actors},
                {"sigma_base_frac", t.actors.sigma_base_frac},
                {"sigma_decay", t.actors.sigma_decay},
                {"param_refresh_interval", t.actors.param_refresh_interval}};
    json network{{"hidden", t.hidden},
                 {"recurrent_hidden", t.recurrent_hidden},
                 {"cell", cell_to_string(t.cell)}};
    const auto& p = c.population;
    json space{{"num_batches", json{p.space.num_batches.first,
                                    p.space.num_batches.second}},
               {"sequence_length", p.space.sequence_length},
               {"target_update_frequency", p.space.target_update_frequency},
               {"n_step", json{p.space.n_step.first, p.space.n_step.second}},
               {"min_iteration_time", p.space.min_iteration_time}};
    json population{{"num_trials", p.num_trials},
                    {"quantile", p.quantile},
                    {"eval_interval", p.eval_interval},
                    {"eval_episodes", p.eval_episodes},
                    {"total_rounds", p.total_rounds},
                    {"exploit_enabled", p.exploit_enabled},
                    {"space", space}};
    return json{{"task", task},
                {"physics", physics},
                {"curriculum", curriculum},
                {"learner", learner},
                {"actors", actors},
                {"network", network},
                {"population", population},
                {"use_pbt", c.use_pbt},
                {"max_env_steps", c.max_env_steps},
                {"eval_interval", c.eval_interval},
                {"eval_episodes", c.eval_episodes},
                {"early_stop_success", c.early_stop_success},
                {"env_steps_per_iteration", t.env_steps_per_iteration},
                {"deterministic", t.deterministic},
                {"threaded", t.threaded},
                {"output_dir", c.output_dir},
                {"seed", c.seed}};
}

ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    agent::TrialConfig& t = c.trial;

    if (!j.contains("task"))
        throw ConfigError("missing required config field 'task'");
    const json& task = j.at("task");
    if (!task.contains("kind"))
        throw ConfigError("missing required config field 'task.kind'");
    const std::string kind = task.at("kind").get<std::string>();
    if (kind == "lap_joint") {
        t.task.kind = env::TaskKind::LapJoint;
        t.task.clearance = 0.002;
    } else if (kind == "peg_in_hole") {
        t.task.kind = env::TaskKind::PegInHole;
        t.task.clearance = 0.0;
    } else {
        throw ConfigError("config field 'task.kind' must be lap_joint or "
                          "peg_in_hole, got '" + kind + "'");
    }
    t.task.clearance = get_or(task, "clearance", t.task.clearance);
    t.task.success_epsilon = get_or(task, "success_epsilon", t.task.success_epsilon);
    t.task.success_bonus = get_or(task, "success_bonus", t.task.success_bonus);
    t.task.max_steps = get_or(task, "max_steps", t.task.max_steps);
    t.task.lambda_rot = get_or(task, "lambda_rot", t.task.lambda_rot);
    if (task.contains("initial_offset")) {
        const json& off = task.at("initial_offset");
        auto& io = t.task.initial_offset;
        io.linear = vec3_or(off, "linear", io.linear);
        io.angular = vec3_or(off, "angular", io.angular);
        io.linear_jitter = vec3_or(off, "linear_jitter", io.linear_jitter);
        io.angular_jitter = vec3_or(off, "angular_jitter", io.angular_jitter);
    }

    if (j.contains("physics")) {
        const json& ph = j.at("physics");
        auto& pp = t.physics;
        pp.contact_stiffness = get_or(ph, "contact_stiffness", pp.contact_stiffness);
        pp.contact_damping = get_or(ph, "contact_damping", pp.contact_damping);
        pp.friction_coeff = get_or(ph, "friction_coeff", pp.friction_coeff);
        pp.friction_smoothing = get_or(ph, "friction_smoothing", pp.friction_smoothing);
        pp.dt = get_or(ph, "dt", pp.dt);
        pp.v_max = get_or(ph, "v_max", pp.v_max);
        pp.w_max = get_or(ph, "w_max", pp.w_max);
        pp.ft_noise_frac = get_or(ph, "ft_noise_frac", pp.ft_noise_frac);
        pp.friction_noise_frac =
            get_or(ph, "friction_noise_frac", pp.friction_noise_frac);
        if (ph.contains("sensor_pose"))
            pp.sensor_pose = pose_from_json(ph.at("sensor_pose"));
    }

    if (j.contains("learner")) {
        const json& le = j.at("learner");
        auto& lc = t.learner;
        lc.gamma = get_or(le, "gamma", lc.gamma);
        lc.n_step = get_or(le, "n_step", lc.n_step);
        lc.num_batches = get_or(le, "num_batches", lc.num_batches);
        lc.batch_size = get_or(le, "batch_size", lc.batch_size);
        lc.sequence_length = get_or(le, "sequence_length", lc.sequence_length);
        lc.target_update_frequency =
            get_or(le, "target_update_frequency", lc.target_update_frequency);
        lc.min_iteration_time = get_or(le, "min_iteration_time", lc.min_iteration_time);
        lc.critic_lr = get_or(le, "critic_lr", lc.critic_lr);
        lc.actor_lr = get_or(le, "actor_lr", lc.actor_lr);
        lc.actor_preact_l2 = get_or(le, "actor_preact_l2", lc.actor_preact_l2);
        lc.value_rescale = get_or(le, "value_rescale", lc.value_rescale);
        lc.grad_clip = get_or(le, "grad_clip", lc.grad_clip);
        lc.eta = get_or(le, "eta", lc.eta);
        lc.beta = get_or(le, "beta", lc.beta);
        lc.buffer_capacity = get_or(le, "buffer_capacity", lc.buffer_capacity);
        lc.min_buffer_fill = get_or(le, "min_buffer_fill", lc.min_buffer_fill);
        lc.burn_in = get_or(le, "burn_in", lc.burn_in);
    }

    if (j.contains("curriculum")) {
        const json& cu = j.at("curriculum");
        auto& cc = t.curriculum;
        cc.enabled = get_or(cu, "enabled", cc.enabled);
        cc.near_z = get_or(cu, "near_z", cc.near_z);
        cc.success_hi = get_or(cu, "success_hi", cc.success_hi);
        cc.success_lo = get_or(cu, "success_lo", cc.success_lo);
        cc.widen_step = get_or(cu, "widen_step", cc.widen_step);
        cc.shrink_step = get_or(cu, "shrink_step", cc.shrink_step);
        cc.init_frac = get_or(cu, "init_frac", cc.init_frac);
    }

    if (j.contains("actors")) {
        const json& ac = j.at("actors");
        t.actors.num_actors = get_or(ac, "num_actors", t.actors.num_actors);
        t.actors.sigma_base_frac = get_or(ac, "sigma_base_frac", t.actors.sigma_base_frac);
        t.actors.sigma_decay = get_or(ac, "sigma_decay", t.actors.sigma_decay);
        t.actors.param_refresh_interval =
            get_or(ac, "param_refresh_interval", t.actors.param_refresh_interval);
    }

    if (j.contains("network")) {
        const json& nw = j.at("network");
        t.hidden = get_or(nw, "hidden", t.hidden);
        t.recurrent_hidden = get_or(nw, "recurrent_hidden", t.recurrent_hidden);
        if (nw.contains("cell"))
            t.cell = cell_from_string(nw.at("cell").get<std::string>());
    }

    if (j.contains("population")) {
        const json& po = j.at("population");
        auto& p = c.population;
        p.num_trials = get_or(po, "num_trials", p.num_trials);
        p.quantile = get_or(po, "quantile", p.quantile);
        p.eval_interval = get_or(po, "eval_interval", p.eval_interval);
        p.eval_episodes = get_or(po, "eval_episodes", p.eval_episodes);
        p.total_rounds = get_or(po, "total_rounds", p.total_rounds);
        p.exploit_enabled = get_or(po, "exploit_enabled", p.exploit_enabled);
        if (po.contains("space")) {
            const json& sp = po.at("space");
            auto range = [&](const char* key, std::pair<int, int> fallback) {
                if (!sp.contains(key)) return fallback;
                auto a = sp.at(key);
                if (!a.is_array() || a.size() != 2)
                    throw ConfigError(std::string("space field '") + key +
                                      "' must be [lo, hi]");
                return std::make_pair(a[0].get<int>(), a[1].get<int>());
            };
            p.space.num_batches = range("num_batches", p.space.num_batches);
            p.space.n_step = range("n_step", p.space.n_step);
            p.space.sequence_length = get_or(sp, "sequence_length", p.space.sequence_length);
            p.space.target_update_frequency =
                get_or(sp, "target_update_frequency", p.space.target_update_frequency);
            p.space.min_iteration_time =
                get_or(sp, "min_iteration_time", p.space.min_iteration_time);
        }
    }

    c.use_pbt = get_or(j, "use_pbt", c.use_pbt);
    c.max_env_steps = get_or(j, "max_env_steps", c.max_env_steps);
    c.eval_interval = get_or(j, "eval_interval", c.eval_interval);
    c.eval_episodes = get_or(j, "eval_episodes", c.eval_episodes);
    c.early_stop_success = get_or(j, "early_stop_success", c.early_stop_success);
    t.env_steps_per_iteration =
        get_or(j, "env_steps_per_iteration", t.env_steps_per_iteration);
    t.deterministic = get_or(j, "deterministic", t.deterministic);
    t.threaded = get_or(j, "threaded", t.threaded);
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
    t.seed = c.seed;

    c.population.trial = t;
    c.population.seed = c.seed;
    c.population.output_dir = c.output_dir;
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("config parse error: ") + ex.what());
    }
    return from_json(j);
}

void save_config(const ExperimentConfig& c, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write config file " + path);
    os << to_json(c).dump(2) << "\n";
}

}  // namespace rd2::config
