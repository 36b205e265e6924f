#pragma once

// Flat namespaced key = value experiment configuration.
//
//   # comment
//   training.epochs = 400
//   pose.representation = quat
//
// Unknown keys are errors. Values are validated against module
// preconditions when the file is loaded.

#include "slopegrasp/envs.hpp"
#include "slopegrasp/policy.hpp"
#include "slopegrasp/scene.hpp"
#include "slopegrasp/training.hpp"
#include "slopegrasp/tuner.hpp"
#include "slopegrasp/value.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace slopegrasp {

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out = "out";

    // pose.*
    Representation representation = Representation::Quat;
    PPDConfig ppd = PPDConfig::gripper();
    // scene.*
    FieldParams field;
    bool learned_field = false;
    LearnedFieldConfig learned;
    int pretrain_steps = 5000;
    int pretrain_scenes = 100;

    // nn.*
    nn::Activation activation = nn::Activation::Elu;
    std::vector<int> aggregation_widths{64, 64};
    std::vector<int> value_widths{64, 64, 64};

    // training.*
    TrainConfig train;
    LossConfig loss;
    int heldout_demos = 32;

    // policy.*
    OptSchedule schedule;

    // envs.*
    TaskSpec task;
    GraspJudgeConfig judge;
    int demos = 512;
    int episodes = 100;
    int repeats = 6;
    int clutter_attempts = 10;

    // tuner.*
    TunerConfig tuner;
    int tuner_budget = 100;
    int tuner_episodes = 100;
    int tuner_repeats = 1;
    std::uint64_t tuner_task_seed = 7;
    int tuner_steps_min = 8;
    int tuner_steps_max = 64;

    // landscape.*
    int landscape_scene = 0;
    int landscape_nx = 10;
    int landscape_ny = 10;
    double landscape_x_min = -0.25, landscape_x_max = 0.25;
    double landscape_y_min = -0.25, landscape_y_max = 0.25;
    double landscape_z = 0.03;
    double landscape_yaw = 0.0;

    ValueModelConfig model_config() const {
        ValueModelConfig c;
        c.representation = representation;
        c.ppd = ppd;
        c.activation = activation;
        c.aggregation_widths = aggregation_widths;
        c.value_widths = value_widths;
        return c;
    }

    EvalConfig eval_config() const {
        EvalConfig e;
        e.episodes = episodes;
        e.repeats = repeats;
        e.clutter_attempts = clutter_attempts;
        e.seed = seed;
        e.threads = schedule.threads;
        e.judge = judge;
        return e;
    }

    /// Validates every section; throws ConfigError naming the offending key.
    void validate() const {
        ppd.validate();
        field.validate();
        if (learned_field) learned.validate();
        model_config().validate();
        train.validate();
        loss.validate();
        schedule.validate();
        task.validate();
        judge.validate();
        tuner.validate();
        require(pretrain_steps >= 0 && pretrain_scenes >= 1, "scene.pretrain_steps >= 0 and scene.pretrain_scenes >= 1");
        require(heldout_demos >= 0, "training.heldout_demos must be >= 0");
        require(demos >= 1, "envs.demos must be >= 1");
        require(episodes >= 1, "envs.episodes must be >= 1");
        require(repeats >= 1, "envs.repeats must be >= 1");
        require(clutter_attempts >= 1, "envs.clutter_attempts must be >= 1");
        require(tuner_budget >= 1 && tuner_episodes >= 1 && tuner_repeats >= 1,
                "tuner.budget, tuner.episodes and tuner.repeats must be >= 1");
        require(tuner_steps_min >= 1 && tuner_steps_min < tuner_steps_max, "tuner.steps_min must be in [1, steps_max)");
        require(landscape_nx >= 2 && landscape_ny >= 2, "landscape.nx and landscape.ny must be >= 2");
        require(landscape_x_min < landscape_x_max && landscape_y_min < landscape_y_max, "landscape bounds invalid");
        require(landscape_scene >= 0, "landscape.scene must be >= 0");
        if (train.aux_enabled && activation != nn::Activation::Elu)
            throw ConfigError("training.aux = true requires nn.activation = elu (got " + nn::to_string(activation) + ")");
        require(train.representation == representation, "training and pose representation differ");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long i = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        const auto u = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, trim(item))));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list of integers");
    return out;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string join(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

struct ConfigKey {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

}  // namespace detail

/// Key table bound to one config instance.
inline std::map<std::string, detail::ConfigKey> config_keys(ExperimentConfig& c) {
    using detail::format_double;
    std::map<std::string, detail::ConfigKey> k;
    auto real = [&k](const std::string& key, double& field) {
        k[key] = {[&field, key](const std::string& v) { field = detail::parse_double(key, v); },
                  [&field] { return format_double(field); }};
    };
    auto integer = [&k](const std::string& key, int& field) {
        k[key] = {[&field, key](const std::string& v) { field = static_cast<int>(detail::parse_int(key, v)); },
                  [&field] { return std::to_string(field); }};
    };
    auto u64 = [&k](const std::string& key, std::uint64_t& field) {
        k[key] = {[&field, key](const std::string& v) { field = detail::parse_u64(key, v); },
                  [&field] { return std::to_string(field); }};
    };
    auto boolean = [&k](const std::string& key, bool& field) {
        k[key] = {[&field, key](const std::string& v) { field = detail::parse_bool(key, v); },
                  [&field] { return std::string(field ? "true" : "false"); }};
    };
    auto list = [&k](const std::string& key, std::vector<int>& field) {
        k[key] = {[&field, key](const std::string& v) { field = detail::parse_int_list(key, v); },
                  [&field] { return detail::join(field); }};
    };
    auto vec3 = [&k](const std::string& key, Vec3& field) {
        for (int i = 0; i < 3; ++i) {
            const std::string name = key + "_" + "xyz"[i];
            k[name] = {[&field, i, name](const std::string& v) { field[i] = detail::parse_double(name, v); },
                       [&field, i] { return format_double(field[i]); }};
        }
    };

    u64("seed", c.seed);
    k["out"] = {[&c](const std::string& v) { c.out = v; }, [&c] { return c.out; }};

    k["pose.representation"] = {[&c](const std::string& v) {
                                    c.representation = parse_representation(v);
                                    c.train.representation = c.representation;
                                },
                                [&c] { return to_string(c.representation); }};
    k["pose.ppd"] = {[&c](const std::string& v) { c.ppd = PPDConfig::parse(v); }, [&c] { return c.ppd.to_string(); }};
    real("pose.orientation_weight", c.loss.orientation_weight);
    integer("pose.point_frequencies", c.field.point_encoding.frequencies);
    integer("pose.direction_frequencies", c.field.direction_encoding.frequencies);

    k["scene.mode"] = {[&c](const std::string& v) {
                           if (v == "analytic") c.learned_field = false;
                           else if (v == "learned") c.learned_field = true;
                           else throw ConfigError("scene.mode: expected analytic or learned, got '" + v + "'");
                       },
                       [&c] { return std::string(c.learned_field ? "learned" : "analytic"); }};
    real("scene.tau", c.field.tau);
    real("scene.beta", c.field.beta);
    real("scene.occupancy_scale", c.field.occupancy_scale);
    integer("scene.learned_width", c.learned.width);
    integer("scene.learned_blocks", c.learned.blocks);
    integer("scene.learned_taps", c.learned.taps);
    integer("scene.pretrain_steps", c.pretrain_steps);
    integer("scene.pretrain_scenes", c.pretrain_scenes);

    k["nn.activation"] = {[&c](const std::string& v) { c.activation = nn::parse_activation(v); },
                          [&c] { return nn::to_string(c.activation); }};
    list("nn.aggregation_widths", c.aggregation_widths);
    list("nn.value_widths", c.value_widths);

    integer("training.epochs", c.train.epochs);
    integer("training.batch_size", c.train.batch_size);
    boolean("training.aux", c.train.aux_enabled);
    real("training.lr", c.train.adam.learning_rate);
    real("training.beta1", c.train.adam.beta1);
    real("training.beta2", c.train.adam.beta2);
    real("training.epsilon", c.train.adam.epsilon);
    integer("training.alignment_every", c.train.alignment_every);
    integer("training.heldout_demos", c.heldout_demos);
    integer("training.negatives", c.loss.negatives);
    integer("training.proximal", c.loss.proximal);
    real("training.sigma_pos", c.loss.sigma_pos);
    real("training.sigma_rot", c.loss.sigma_rot);
    integer("training.stride", c.loss.stride);
    real("training.value_weight", c.loss.value_weight);
    real("training.aux_weight", c.loss.aux_weight);

    k["policy.mode"] = {[&c](const std::string& v) { c.schedule.mode = parse_opt_mode(v); },
                        [&c] { return to_string(c.schedule.mode); }};
    integer("policy.steps_pos", c.schedule.steps_pos);
    integer("policy.steps_rot", c.schedule.steps_rot);
    integer("policy.steps", c.schedule.steps);
    real("policy.lr_pos", c.schedule.lr_pos);
    real("policy.lr_rot", c.schedule.lr_rot);
    real("policy.decay_pos", c.schedule.decay_pos);
    real("policy.decay_rot", c.schedule.decay_rot);
    real("policy.beta1", c.schedule.beta1);
    integer("policy.candidates", c.schedule.candidates);
    boolean("policy.downward_filter", c.schedule.downward_filter);
    k["policy.cone_deg"] = {[&c](const std::string& v) {
                                c.schedule.cone_half_angle = detail::parse_double("policy.cone_deg", v) * std::numbers::pi / 180.0;
                            },
                            [&c] { return format_double(c.schedule.cone_half_angle * 180.0 / std::numbers::pi); }};

    k["envs.task"] = {[&c](const std::string& v) {
                          const auto seed = c.task.seed;
                          c.task = parse_task_kind(v) == TaskKind::Simple ? TaskSpec::simple() : TaskSpec::clutter();
                          c.task.seed = seed;
                      },
                      [&c] { return to_string(c.task.kind); }};
    u64("envs.task_seed", c.task.seed);
    integer("envs.min_objects", c.task.min_objects);
    integer("envs.max_objects", c.task.max_objects);
    vec3("envs.min_half_extent", c.task.min_half_extents);
    vec3("envs.max_half_extent", c.task.max_half_extents);
    vec3("envs.workspace_lo", c.task.workspace.lo);
    vec3("envs.workspace_hi", c.task.workspace.hi);
    real("envs.clearance", c.task.clearance);
    real("envs.packing_gap", c.task.packing_gap);
    real("envs.clutter_radius", c.task.clutter_radius);
    real("envs.border", c.task.border);
    integer("envs.max_tries", c.task.max_tries);
    real("envs.max_opening", c.judge.max_opening);
    real("envs.position_tolerance", c.judge.position_tolerance);
    real("envs.angle_tolerance", c.judge.angle_tolerance);
    real("envs.approach_cone", c.judge.approach_cone);
    real("envs.finger_length", c.judge.finger_length);
    integer("envs.demos", c.demos);
    integer("envs.episodes", c.episodes);
    integer("envs.repeats", c.repeats);
    integer("envs.clutter_attempts", c.clutter_attempts);

    integer("tuner.budget", c.tuner_budget);
    integer("tuner.episodes", c.tuner_episodes);
    integer("tuner.repeats", c.tuner_repeats);
    u64("tuner.task_seed", c.tuner_task_seed);
    integer("tuner.initial_random", c.tuner.initial_random);
    integer("tuner.acquisition_candidates", c.tuner.acquisition_candidates);
    real("tuner.length_scale", c.tuner.length_scale);
    real("tuner.noise", c.tuner.noise);
    integer("tuner.steps_min", c.tuner_steps_min);
    integer("tuner.steps_max", c.tuner_steps_max);

    integer("landscape.scene", c.landscape_scene);
    integer("landscape.nx", c.landscape_nx);
    integer("landscape.ny", c.landscape_ny);
    real("landscape.x_min", c.landscape_x_min);
    real("landscape.x_max", c.landscape_x_max);
    real("landscape.y_min", c.landscape_y_min);
    real("landscape.y_max", c.landscape_y_max);
    real("landscape.z", c.landscape_z);
    real("landscape.yaw", c.landscape_yaw);
    return k;
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    auto keys = config_keys(c);
    auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError("unknown configuration key '" + key + "'");
    it->second.set(value);
}

/// Applies `key = value` lines from text; `origin` names the source in errors.
inline void apply_config_text(ExperimentConfig& c, const std::string& text, const std::string& origin = "config") {
    auto keys = config_keys(c);
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        auto it = keys.find(key);
        if (it == keys.end()) throw ConfigError(where + "unknown configuration key '" + key + "'");
        try {
            it->second.set(value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    ExperimentConfig c;
    apply_config_text(c, ss.str(), path);
    c.validate();
    return c;
}

/// Every key with its resolved value, sorted; loadable by load_config.
inline std::string dump_config(const ExperimentConfig& c) {
    ExperimentConfig copy = c;
    std::string out;
    for (const auto& [key, entry] : config_keys(copy)) out += key + " = " + entry.get() + "\n";
    return out;
}

}  // namespace slopegrasp
