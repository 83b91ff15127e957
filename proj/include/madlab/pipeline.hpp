#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "madlab/config.hpp"
#include "madlab/errors.hpp"

namespace madlab {

/// A pipeline stage failed. `category` decides the process exit status.
class StageError : public Error {
public:
    enum class Category { Usage = 1, Data = 2, Runtime = 3 };

    StageError(std::string stage, const std::string& cause, Category category)
        : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)), category_(category) {}
    const std::string& stage() const noexcept { return stage_; }
    Category category() const noexcept { return category_; }

private:
    std::string stage_;
    Category category_;
};

/// Runs `body` as the named stage, converting library errors into StageError.
void run_stage(const std::string& stage, const std::function<void()>& body);

struct AttackRun {
    std::string label;
    AttackEvaluation evaluation;
};

/// Shared state of a run; artifacts are written below cfg.out.
class Run {
public:
    Run(RunConfig cfg, std::ostream* log);

    const RunConfig& config() const noexcept { return cfg_; }
    const Splits& data();
    const std::vector<std::filesystem::path>& artifacts() const noexcept { return artifacts_; }

    /// Trains from the configured initialization; writes model.madn, train_log.csv, train.json.
    const Network& train();
    /// Loads a checkpoint instead of training.
    const Network& load(const std::filesystem::path& checkpoint);
    const Network& network() const;

    /// Runs the configured attacks (or only `labels` when non-empty); writes
    /// attack_<label>.csv and attacks.json.
    const std::vector<AttackRun>& attack(const std::vector<std::string>& labels = {}, bool write_samples = true);
    /// Clean accuracy and the robust-accuracy table; writes evaluate.json.
    void evaluate();
    /// margin.json, separability.json and confusion_<label>.json for every attack run so far.
    void analyze();
    /// Proxy distillation through a query-only view of the network, plus the
    /// configured black-box attack; writes proxy.madn, distill.json, blackbox.json.
    void distill();
    /// Lists every artifact written; writes manifest.json.
    void finish();

private:
    std::filesystem::path path(const std::string& name);
    void write_json(const std::string& name, const nlohmann::json& j);
    void note(const std::string& msg);
    nlohmann::json attack_summary(const AttackRun& run) const;

    RunConfig cfg_;
    std::ostream* log_;
    RunSeeds seeds_;
    std::optional<Splits> data_;
    std::optional<Network> net_;
    std::vector<AttackRun> attacks_;
    std::vector<std::filesystem::path> artifacts_;
};

/// train -> checkpoint -> attacks -> analysis (-> distillation when enabled).
std::vector<std::filesystem::path> run_pipeline(const RunConfig& cfg, std::ostream* log = nullptr);

/// Per-sample attack CSV: index,true class,pre-attack class,post-attack class,l2,linf,success,iterations.
inline constexpr const char* kAttackCsvHeader = "index,true class,pre-attack class,post-attack class,l2,linf,success,iterations";
void write_attack_csv(std::ostream& out, std::span<const SampleOutcome> samples);

}  // namespace madlab
