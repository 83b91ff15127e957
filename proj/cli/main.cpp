// madlab command line: train, attack, evaluate, distill, analyze, pipeline.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "madlab/pipeline.hpp"

using namespace madlab;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> workers;
    std::string checkpoint;
    std::vector<std::string> attacks;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_checkpoint) {
    cmd->add_option("--config", c.config, "INI run configuration (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "Global seed, overrides [run] seed");
    cmd->add_option("--out", c.out, "Output directory, overrides [run] out");
    cmd->add_option("--workers", c.workers, "Worker threads for per-sample work");
    cmd->add_flag("--quiet", c.quiet, "Do not log progress");
    if (needs_checkpoint) {
        cmd->add_option("--checkpoint", c.checkpoint, "Model checkpoint (default <out>/model.madn)");
    }
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    if (c.workers) {
        if (*c.workers == 0) throw ConfigError("--workers must be >= 1");
        cfg.workers = *c.workers;
    }
    return cfg;
}

int exit_code(StageError::Category c) { return static_cast<int>(c); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"madlab: maximal adversarial distortion training, attacks and analysis"};
    app.require_subcommand(1);
    Common c;
    auto* train = app.add_subcommand("train", "Train a network and write model.madn, train_log.csv, train.json");
    auto* attack = app.add_subcommand("attack", "Attack a trained network; per-sample CSV plus attacks.json");
    auto* evaluate = app.add_subcommand("evaluate", "Clean and robust accuracy table (evaluate.json)");
    auto* distill = app.add_subcommand("distill", "Distill a proxy through label/softmax queries; black-box attack");
    auto* analyze = app.add_subcommand("analyze", "Margin, MAD bound, separability and confusion reports");
    auto* pipeline = app.add_subcommand("pipeline", "train -> attacks -> analysis (-> distill)");
    add_common(train, c, false);
    add_common(pipeline, c, false);
    for (auto* cmd : {attack, evaluate, distill, analyze}) add_common(cmd, c, true);
    attack->add_option("--attack", c.attacks, "Only these attack labels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    std::optional<RunConfig> cfg;
    try {
        cfg = resolve(c);
    } catch (const Error& e) {
        std::cerr << "madlab: " << e.what() << '\n';
        return 1;
    }
    std::ostream* log = c.quiet ? nullptr : &std::clog;

    try {
        if (pipeline->parsed()) {
            run_pipeline(*cfg, log);
            return 0;
        }
        std::optional<Run> run;
        run_stage("setup", [&] { run.emplace(*cfg, log); });
        run_stage("data", [&] { run->data(); });
        if (train->parsed()) {
            run_stage("train", [&] { run->train(); });
        } else {
            const std::string ckpt = c.checkpoint.empty() ? cfg->out + "/model.madn" : c.checkpoint;
            run_stage("load", [&] { run->load(ckpt); });
            if (attack->parsed()) run_stage("attack", [&] { run->attack(c.attacks); });
            if (evaluate->parsed()) run_stage("evaluate", [&] { run->evaluate(); });
            if (analyze->parsed()) {
                if (!cfg->attacks.empty()) run_stage("attack", [&] { run->attack({}, false); });
                run_stage("analyze", [&] { run->analyze(); });
            }
            if (distill->parsed()) run_stage("distill", [&] { run->distill(); });
        }
        run_stage("report", [&] { run->finish(); });
    } catch (const StageError& e) {
        std::cerr << "madlab: " << e.what() << '\n';
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::cerr << "madlab: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
