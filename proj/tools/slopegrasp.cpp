#include "slopegrasp/commands.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace slopegrasp;

int main(int argc, char** argv) {
    CLI::App app{"slopegrasp: value-function grasping experiments"};
    app.require_subcommand(1);
    app.fallthrough();

    std::vector<std::string> config_files;
    std::uint64_t seed = 0;
    std::string out;
    int threads = 0;
    CommandOptions opt;
    auto* seed_opt = app.add_option("--seed", seed, "Master seed (overrides the config)");
    app.add_option("--config", config_files, "Config file (key = value); repeat to overlay")->check(CLI::ExistingFile);
    app.add_option("--out", out, "Output directory (overrides the config)");
    app.add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);
    app.add_flag("--force", opt.force, "Overwrite existing weights");

    auto* demo = app.add_subcommand("demo-gen", "Generate scenes and oracle demonstrations");
    demo->add_option("--dataset", opt.dataset, "Dataset path (default <out>/demos.jsonl)");
    auto* train = app.add_subcommand("train", "Train a value model on a dataset");
    train->add_option("--dataset", opt.dataset, "Dataset path (default <out>/demos.jsonl)");
    train->add_option("--weights", opt.weights, "Weight file to write (default <out>/weights.sgwt)");
    auto* eval = app.add_subcommand("eval", "Evaluate a trained model");
    eval->add_option("--weights", opt.weights, "Weight file (default <out>/weights.sgwt)");
    eval->add_option("--policy", opt.policy_name, "Policy name in the report");
    auto* tune = app.add_subcommand("tune", "Tune the inference schedule of a trained model");
    tune->add_option("--weights", opt.weights, "Weight file (default <out>/weights.sgwt)");
    auto* landscape = app.add_subcommand("landscape", "Dump psi and its gradient over a 2D slice");
    landscape->add_option("--weights", opt.weights, "Weight file (default <out>/weights.sgwt)");
    auto* report = app.add_subcommand("report", "Merge eval CSVs into summary rows");
    report->add_option("inputs", opt.inputs, "Eval CSV files")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig& cfg = opt.config;
        for (const auto& path : config_files) {
            std::ifstream is(path);
            std::stringstream ss;
            ss << is.rdbuf();
            apply_config_text(cfg, ss.str(), path);
        }
        if (*seed_opt) cfg.seed = seed;
        if (!out.empty()) cfg.out = out;
        if (threads > 0) cfg.schedule.threads = cfg.train.threads = threads;
        cfg.validate();

        if (demo->parsed()) return cmd_demo_gen(opt, std::cout);
        if (train->parsed()) return cmd_train(opt, std::cout);
        if (eval->parsed()) return cmd_eval(opt, std::cout);
        if (tune->parsed()) return cmd_tune(opt, std::cout);
        if (landscape->parsed()) return cmd_landscape(opt, std::cout);
        if (report->parsed()) return cmd_report(opt, std::cout);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
