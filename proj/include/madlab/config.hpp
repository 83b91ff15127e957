#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "madlab/analysis.hpp"
#include "madlab/attacks.hpp"
#include "madlab/dataset.hpp"
#include "madlab/model.hpp"
#include "madlab/training.hpp"

namespace madlab {

enum class DataKind { Toy, Idx, Csv };

struct DataConfig {
    DataKind kind = DataKind::Toy;
    // toy
    ToyKind toy = ToyKind::Blobs;
    std::size_t train_samples = 400;
    std::size_t test_samples = 200;
    double noise = 0.1;
    // idx
    std::string train_images, train_labels, test_images, test_labels;
    // csv
    std::string train_csv, test_csv;
    bool normalize = false;
    // leading rows kept from each split, 0 = all
    std::size_t max_train = 0;
    std::size_t max_test = 0;

    bool operator==(const DataConfig&) const = default;
};

enum class Architecture { Mlp, Conv };

struct ModelConfig {
    Architecture arch = Architecture::Mlp;
    std::vector<std::size_t> hidden{32, 16};  // MLP hidden widths; the last one is the embedding
    double slope = 0.1;

    bool operator==(const ModelConfig&) const = default;
};

struct AttackEntry {
    std::string label;
    AttackConfig attack;
    std::size_t max_samples = 0;  // correctly classified test samples attacked, 0 = all

    bool operator==(const AttackEntry&) const = default;
};

struct AnalysisConfig {
    std::size_t margin_samples = 1000;  // leading test samples used for the margin
    bool separability = true;
    bool distill = false;
    std::size_t distill_probes = 0;  // leading training samples used as probes, 0 = all
    std::size_t distill_epochs = 20;
    DistillTargets distill_targets = DistillTargets::Soft;
    std::vector<std::size_t> proxy_hidden{16};
    std::string blackbox_attack;  // attack label replayed through the proxy; empty = none

    bool operator==(const AnalysisConfig&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "madlab-out";
    std::size_t workers = 1;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;  // train.seed and train.loss are part of the file; see [train] and [loss]
    std::vector<AttackEntry> attacks;
    AnalysisConfig analysis;

    bool operator==(const RunConfig&) const = default;
};

/// INI-style text: [run], [data], [model], [train], [loss], [attack:<label>]..., [analysis].
/// Unknown sections or keys are rejected with ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& cfg);

/// Seeds of the independent random streams of one run, all derived from cfg.seed.
struct RunSeeds {
    std::uint64_t data;
    std::uint64_t init;
    std::uint64_t train;
    std::uint64_t proxy;
    std::uint64_t attack(std::size_t k) const;
    std::uint64_t base;
};
RunSeeds run_seeds(std::uint64_t seed);

struct Splits {
    Dataset train;
    Dataset test;
};

/// Loads or generates both splits as described by cfg.data.
Splits load_data(const DataConfig& cfg, std::uint64_t seed);

/// Model spec for the configured architecture on samples of `sample_shape`.
ModelSpec build_model_spec(const ModelConfig& cfg, const Shape& sample_shape, std::size_t num_classes);

}  // namespace madlab
