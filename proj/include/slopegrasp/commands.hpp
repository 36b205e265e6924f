#pragma once

// Experiment commands behind the slopegrasp executable. Every command reads
// an ExperimentConfig, writes plain-text outputs into config.out and echoes
// the resolved configuration there as config.txt.

#include "slopegrasp/config.hpp"

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace slopegrasp {

struct CommandOptions {
    ExperimentConfig config;
    bool force = false;
    std::string dataset;               // train: defaults to <out>/demos.jsonl
    std::string weights;               // train output, eval/tune/landscape input: <out>/weights.sgwt
    std::vector<std::string> inputs;   // report: eval CSV files
    std::string policy_name;           // eval/tune: defaults from training.aux and policy.mode
};

/// Output file names inside config.out.
inline constexpr const char* kConfigEcho = "config.txt";
inline constexpr const char* kDatasetFile = "demos.jsonl";
inline constexpr const char* kWeightsFile = "weights.sgwt";
inline constexpr const char* kLossCurveFile = "loss_curve.csv";
inline constexpr const char* kEvalFile = "eval.csv";
inline constexpr const char* kTuneHistoryFile = "tune_history.csv";
inline constexpr const char* kBestScheduleFile = "best_schedule.cfg";
inline constexpr const char* kLandscapeFile = "landscape.csv";
inline constexpr const char* kReportFile = "report.csv";

inline constexpr const char* kLossCurveHeader = "epoch,value_loss,aux_loss,alignment,seconds";
inline constexpr const char* kLandscapeHeader = "x,y,psi,gx,gy";
inline constexpr const char* kSummaryHeader = "task,policy,mean,std";

/// Scene field for a config: analytic, or learned and pretrained on scenes
/// derived from the master seed, then frozen.
std::shared_ptr<const SceneField> build_field(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// "value_aux_sequential", "value_only_synchronous", ...
std::string default_policy_name(const ExperimentConfig& cfg);

/// Evaluation scene for episode e of a task, matching run_eval.
Scene episode_scene(const TaskSpec& task, int episode);

struct LandscapeRow {
    double x, y, psi, gx, gy;
};

/// Psi and its x/y gradient over a regular grid at fixed height and yaw
/// (top-down orientation rotated by yaw about world z). Rows are y-major.
std::vector<LandscapeRow> landscape_grid(const ValueFunction& fn, const Scene& scene, const ExperimentConfig& cfg);

struct SummaryRow {
    std::string task, policy;
    double mean = 0.0, std = 0.0;
};

/// Summary rows (repeat == "mean") of eval CSV files, in file order.
std::vector<SummaryRow> read_summary_rows(const std::vector<std::string>& paths);

int cmd_demo_gen(const CommandOptions& opt, std::ostream& log);
int cmd_train(const CommandOptions& opt, std::ostream& log);
int cmd_eval(const CommandOptions& opt, std::ostream& log);
int cmd_tune(const CommandOptions& opt, std::ostream& log);
int cmd_landscape(const CommandOptions& opt, std::ostream& log);
int cmd_report(const CommandOptions& opt, std::ostream& log);

}  // namespace slopegrasp
