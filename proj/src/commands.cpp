#include "slopegrasp/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace slopegrasp {

namespace fs = std::filesystem;

namespace {

std::string out_path(const ExperimentConfig& cfg, const std::string& name) { return (fs::path(cfg.out) / name).string(); }

void prepare_output(const ExperimentConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.out, ec);
    if (ec) throw Error("cannot create output directory " + cfg.out + ": " + ec.message());
    std::ofstream os(out_path(cfg, kConfigEcho), std::ios::trunc);
    if (!os) throw Error("cannot write " + out_path(cfg, kConfigEcho));
    os << dump_config(cfg);
}

std::string or_default(const std::string& given, const ExperimentConfig& cfg, const char* name) {
    return given.empty() ? out_path(cfg, name) : given;
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw Error(what + " not found: " + path);
}

std::unique_ptr<ValueModel> load_trained_model(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    const std::string weights = or_default(opt.weights, cfg, kWeightsFile);
    require_file(weights, "weight file");
    auto model = std::make_unique<ValueModel>(cfg.model_config(), build_field(cfg, &log), cfg.seed);
    load_model(*model, weights);
    return model;
}

}  // namespace

std::shared_ptr<const SceneField> build_field(const ExperimentConfig& cfg, std::ostream* log) {
    if (!cfg.learned_field) return std::make_shared<const SceneField>(cfg.field);
    auto field = std::make_shared<SceneField>(SceneField::learned(cfg.field, cfg.learned, derive_seed(cfg.seed, 0x6669656c64)));
    std::vector<Scene> scenes;
    for (int i = 0; i < cfg.pretrain_scenes; ++i) {
        Rng rng(derive_seed(cfg.seed, 0x70726574, static_cast<std::uint64_t>(i)));
        scenes.push_back(generate_scene(cfg.task, rng));
    }
    PretrainConfig pc;
    pc.steps = cfg.pretrain_steps;
    pc.seed = derive_seed(cfg.seed, 0x70726574);
    const PretrainReport r = pretrain_learned_field(*field, scenes, pc);
    if (log)
        *log << "scene field: pretrained " << r.steps << " steps, held-out mse " << r.initial_mse << " -> "
             << r.final_mse << '\n';
    return field;
}

std::string default_policy_name(const ExperimentConfig& cfg) {
    return std::string(cfg.train.aux_enabled ? "value_aux" : "value_only") + "_" + to_string(cfg.schedule.mode);
}

Scene episode_scene(const TaskSpec& task, int episode) {
    require(episode >= 0, "episode index must be >= 0");
    Rng rng(derive_seed(task.seed, 0x7363656e, static_cast<std::uint64_t>(episode)));
    return generate_scene(task, rng);
}

std::vector<LandscapeRow> landscape_grid(const ValueFunction& fn, const Scene& scene, const ExperimentConfig& cfg) {
    cfg.validate();
    const Vec4 q = quat_from_axis_angle(Vec3::UnitZ(), cfg.landscape_yaw);
    std::vector<Pose> poses;
    std::vector<std::pair<double, double>> xy;
    for (int j = 0; j < cfg.landscape_ny; ++j)
        for (int i = 0; i < cfg.landscape_nx; ++i) {
            const double x = cfg.landscape_x_min + (cfg.landscape_x_max - cfg.landscape_x_min) * i / (cfg.landscape_nx - 1);
            const double y = cfg.landscape_y_min + (cfg.landscape_y_max - cfg.landscape_y_min) * j / (cfg.landscape_ny - 1);
            xy.emplace_back(x, y);
            poses.push_back(convert(PoseQ{Vec3(x, y, cfg.landscape_z), q}, fn.representation()));
        }
    const PsiBatch batch = evaluate_batch(fn, scene, to_matrix(poses), true);
    std::vector<LandscapeRow> rows;
    for (std::size_t k = 0; k < poses.size(); ++k) {
        const auto r = static_cast<Eigen::Index>(k);
        rows.push_back({xy[k].first, xy[k].second, batch.values[r], batch.gradients(r, 0), batch.gradients(r, 1)});
    }
    return rows;
}

std::vector<SummaryRow> read_summary_rows(const std::vector<std::string>& paths) {
    require(!paths.empty(), "report: no input files");
    std::vector<SummaryRow> out;
    for (const auto& path : paths) {
        require_file(path, "report input");
        std::ifstream is(path);
        std::string line;
        if (!std::getline(is, line) || line != kReportHeader)
            throw Error("report: " + path + " does not start with header '" + kReportHeader + "'");
        int lineno = 1;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            if (line.back() == ',') cells.emplace_back();
            if (cells.size() != 5) throw Error("report: " + path + ":" + std::to_string(lineno) + ": expected 5 columns");
            if (cells[2] != "mean") continue;
            try {
                out.push_back({cells[0], cells[1], std::stod(cells[3]), std::stod(cells[4])});
            } catch (const std::exception&) {
                throw Error("report: " + path + ":" + std::to_string(lineno) + ": malformed number");
            }
        }
    }
    return out;
}

int cmd_demo_gen(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    cfg.validate();
    prepare_output(cfg);
    const auto demos = generate_demos(cfg.task, cfg.demos, cfg.seed, cfg.judge);
    const std::string path = or_default(opt.dataset, cfg, kDatasetFile);
    write_dataset(demos, path);
    std::size_t objects = 0;
    for (const auto& d : demos) objects += d.scene.primitives.size();
    log << "demo-gen: " << demos.size() << " demos (" << to_string(cfg.task.kind) << ", "
        << static_cast<double>(objects) / static_cast<double>(demos.size()) << " objects per scene) -> " << path << '\n';
    return 0;
}

int cmd_train(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    cfg.validate();
    const std::string weights = or_default(opt.weights, cfg, kWeightsFile);
    if (fs::exists(weights) && !opt.force)
        throw Error("train: " + weights + " exists; pass --force to overwrite");
    const std::string dataset = or_default(opt.dataset, cfg, kDatasetFile);
    require_file(dataset, "dataset");
    prepare_output(cfg);
    const auto demos = read_dataset(dataset);
    std::vector<DemoRecord> heldout;
    if (cfg.heldout_demos > 0)
        heldout = generate_demos(cfg.task, cfg.heldout_demos, derive_seed(cfg.seed, 0x68656c64), cfg.judge);

    ValueModel model(cfg.model_config(), build_field(cfg, &log), cfg.seed);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    std::ofstream curve(out_path(cfg, kLossCurveFile), std::ios::trunc);
    if (!curve) throw Error("cannot write " + out_path(cfg, kLossCurveFile));
    curve << kLossCurveHeader << '\n' << std::setprecision(10);
    train(model, demos, heldout, tc, cfg.loss, [&](const EpochStats& s) {
        curve << s.epoch << ',' << s.value_loss << ',' << s.aux_loss << ',';
        if (std::isfinite(s.alignment)) curve << s.alignment;
        curve << ',' << s.seconds << '\n';
        curve.flush();
        log << "epoch " << s.epoch << " value " << s.value_loss << " aux " << s.aux_loss;
        if (std::isfinite(s.alignment)) log << " alignment " << s.alignment;
        log << '\n';
    });
    save_model(model, weights);
    log << "train: " << demos.size() << " demos, " << tc.epochs << " epochs, aux " << (tc.aux_enabled ? "on" : "off")
        << " -> " << weights << '\n';
    return 0;
}

int cmd_eval(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    cfg.validate();
    prepare_output(cfg);
    const auto model = load_trained_model(opt, log);
    const std::string name = opt.policy_name.empty() ? default_policy_name(cfg) : opt.policy_name;
    const EvalReport r = run_eval(model_policy(*model, cfg.schedule), cfg.task, cfg.eval_config(), name);
    write_report_csv({r}, out_path(cfg, kEvalFile));
    log << "eval: " << r.task << ' ' << r.policy << " success " << r.mean << " +- " << r.std << " (";
    for (int k = 1; k < 5; ++k) log << (k > 1 ? ", " : "") << to_string(static_cast<FailureReason>(k)) << ' ' << r.failures[k];
    log << ") -> " << out_path(cfg, kEvalFile) << '\n';
    return 0;
}

int cmd_tune(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    cfg.validate();
    prepare_output(cfg);
    const auto model = load_trained_model(opt, log);
    const HyperSpace space =
        HyperSpace::schedule(cfg.schedule.mode == OptMode::Synchronous, cfg.tuner_steps_min, cfg.tuner_steps_max);
    TaskSpec validation = cfg.task;
    validation.seed = cfg.tuner_task_seed;
    EvalConfig ec = cfg.eval_config();
    ec.episodes = cfg.tuner_episodes;
    ec.repeats = cfg.tuner_repeats;
    const TrialObjective objective = [&](const std::vector<double>& point, int) {
        return run_eval(model_policy(*model, apply_point(cfg.schedule, space, point)), validation, ec).mean;
    };
    const TuneResult result = tune(space, objective, cfg.tuner_budget, cfg.seed, cfg.tuner, [&](const TrialRecord& t) {
        log << "trial " << t.index << " success " << t.objective << '\n';
    });
    write_history_csv(result.history, space, cfg.schedule, out_path(cfg, kTuneHistoryFile));
    const OptSchedule best = apply_point(cfg.schedule, space, result.best.point);
    std::ofstream os(out_path(cfg, kBestScheduleFile), std::ios::trunc);
    if (!os) throw Error("cannot write " + out_path(cfg, kBestScheduleFile));
    os << std::setprecision(17) << "# validation success " << result.best.objective << " at trial " << result.best.index
       << '\n'
       << "policy.mode = " << to_string(best.mode) << '\n'
       << "policy.lr_pos = " << best.lr_pos << '\n'
       << "policy.lr_rot = " << best.lr_rot << '\n'
       << "policy.decay_pos = " << best.decay_pos << '\n'
       << "policy.decay_rot = " << best.decay_rot << '\n';
    if (best.mode == OptMode::Synchronous) os << "policy.steps = " << best.steps << '\n';
    log << "tune: best success " << result.best.objective << " at trial " << result.best.index << " -> "
        << out_path(cfg, kBestScheduleFile) << '\n';
    return 0;
}

int cmd_landscape(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    cfg.validate();
    prepare_output(cfg);
    const auto model = load_trained_model(opt, log);
    const auto rows = landscape_grid(*model, episode_scene(cfg.task, cfg.landscape_scene), cfg);
    std::ofstream os(out_path(cfg, kLandscapeFile), std::ios::trunc);
    if (!os) throw Error("cannot write " + out_path(cfg, kLandscapeFile));
    os << kLandscapeHeader << '\n' << std::setprecision(17);
    for (const auto& r : rows) os << r.x << ',' << r.y << ',' << r.psi << ',' << r.gx << ',' << r.gy << '\n';
    log << "landscape: " << rows.size() << " grid points -> " << out_path(cfg, kLandscapeFile) << '\n';
    return 0;
}

int cmd_report(const CommandOptions& opt, std::ostream& log) {
    const ExperimentConfig& cfg = opt.config;
    cfg.validate();
    const auto rows = read_summary_rows(opt.inputs);
    prepare_output(cfg);
    std::ofstream os(out_path(cfg, kReportFile), std::ios::trunc);
    if (!os) throw Error("cannot write " + out_path(cfg, kReportFile));
    os << kSummaryHeader << '\n' << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.task << ',' << r.policy << ',' << r.mean << ',' << r.std << '\n';
        log << std::left << std::setw(10) << r.task << std::setw(28) << r.policy << std::fixed << std::setprecision(3)
            << r.mean << " +- " << r.std << '\n'
            << std::defaultfloat;
    }
    return 0;
}

}  // namespace slopegrasp
