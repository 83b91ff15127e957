#pragma once

#include <atomic>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "madlab/attacks.hpp"
#include "madlab/dataset.hpp"
#include "madlab/loss.hpp"
#include "madlab/model.hpp"
#include "madlab/training.hpp"

namespace madlab {

inline constexpr int kReportSchemaVersion = 1;

struct MarginReport {
    double eta = 0.0;  // smallest embedding distance between differently labelled samples
    std::size_t index_a = 0, index_b = 0;
    std::size_t class_a = 0, class_b = 0;
    double max_jacobian = 0.0;
    double mean_jacobian = 0.0;
    double epsilon_lb = 0.0;  // eta / max_jacobian; meaningless when unbounded
    bool unbounded = false;   // max_jacobian == 0
    std::size_t samples = 0;
};

/// Exact minimum over all differently labelled pairs of rows of z [n, d].
/// Jacobian statistics are taken from `jacobian_norms`.
MarginReport margin_from_embeddings(const Tensor& z, std::span<const std::size_t> labels,
                                    std::span<const double> jacobian_norms);

/// Margin and Jacobian statistics of `net` over every sample of `data`.
MarginReport embedding_margin(const Network& net, const Dataset& data, std::size_t workers = 1);

/// eta / max Jacobian norm, or nullopt (unbounded) when the max norm is 0.
std::optional<double> mad_lower_bound(const MarginReport& report);

/// Per-sample embedding Jacobian norms, computed in fixed chunks so the result
/// does not depend on `workers`.
std::vector<double> jacobian_norms_parallel(const Network& net, const Tensor& x, std::size_t workers,
                                            JacobianTarget target = JacobianTarget::Embedding);

/// Mean L2 distance to the class centroid, per class; classes without samples get 0.
std::vector<double> class_dispersion(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes);

/// Davies-Bouldin index over the classes present in `labels`.
double davies_bouldin(const Tensor& z, std::span<const std::size_t> labels);

/// [M, M] L2 distances between class centroids; every class must be present.
Tensor centroid_distance_matrix(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes);

/// Rows of z projected on the two leading principal axes -> [n, 2]. Each axis
/// is oriented so its largest-magnitude component is positive.
Tensor pca_projection(const Tensor& z, std::size_t components = 2);

struct SeparabilityReport {
    double dbi = 0.0;
    Tensor centroid_distances;  // [M, M]
    std::vector<double> sigma;
    Tensor projection;          // [n, 2]
};

SeparabilityReport separability(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes);

struct ConfusionReport {
    std::vector<std::vector<std::size_t>> counts;  // counts[i][j]: successful attacks moving i to j
    std::vector<std::size_t> attacked;             // attacked samples per true class
    /// Per source class: most frequent destination (nullopt without successes),
    /// nearest other centroid, and whether they coincide.
    std::vector<std::optional<std::size_t>> top_destination;
    std::vector<std::optional<std::size_t>> nearest_centroid;
    std::size_t correspondences = 0;  // classes where both exist and agree
    std::size_t comparable = 0;       // classes where both exist
};

ConfusionReport adversarial_confusion(std::span<const SampleOutcome> samples, std::size_t num_classes,
                                      const std::optional<Tensor>& centroid_distances = std::nullopt);

/// Fraction of successful attacks whose L2 distortion is below `bound`.
double fraction_below_bound(std::span<const SampleOutcome> samples, double bound);

/// Query-only view of a classifier: the only way to reach the wrapped network
/// is through predicted labels or softmax outputs, and every queried sample
/// is counted.
class QueryOracle {
public:
    explicit QueryOracle(const Network& target) : target_(target) {}
    QueryOracle(const QueryOracle&) = delete;
    QueryOracle& operator=(const QueryOracle&) = delete;

    std::vector<std::size_t> labels(const Tensor& x);
    Tensor probabilities(const Tensor& x);  // [B, M]

    std::size_t num_classes() const noexcept { return target_.num_classes(); }
    std::size_t queries() const noexcept { return queries_.load(); }
    std::size_t label_queries() const noexcept { return label_queries_.load(); }
    std::size_t probability_queries() const noexcept { return probability_queries_.load(); }
    /// Always zero: the interface has no gradient access.
    std::size_t gradient_queries() const noexcept { return 0; }

private:
    std::size_t rows(const Tensor& x) const;

    const Network& target_;
    std::atomic<std::size_t> queries_{0};
    std::atomic<std::size_t> label_queries_{0};
    std::atomic<std::size_t> probability_queries_{0};
};

enum class DistillTargets { Soft, Hard };

struct DistillResult {
    Network proxy;
    std::size_t queries = 0;  // oracle queries spent on labelling the probes
    double agreement = 0.0;   // on the probes themselves
};

/// Trains `proxy_init` on the oracle's answers for `probes` [N, ...].
DistillResult distill_proxy(QueryOracle& oracle, const Network& proxy_init, const Tensor& probes,
                            const TrainConfig& cfg, DistillTargets mode = DistillTargets::Soft);

/// Fraction of `x` rows on which proxy and oracle agree.
double agreement(QueryOracle& oracle, const Network& proxy, const Tensor& x);

struct BlackBoxResult {
    double robust_accuracy = 0.0;
    std::size_t attacked = 0;
    std::size_t queries = 0;  // oracle queries made by this evaluation
    std::vector<SampleOutcome> samples;
};

/// Attacks generated on `proxy`, judged by the oracle, with the same filtering
/// and per-sample seeding as evaluate_attack.
BlackBoxResult blackbox_evaluate(QueryOracle& target, const Network& proxy, const Dataset& data,
                                 const AttackConfig& cfg, std::size_t max_samples = 0, std::size_t workers = 1);

// JSON reports; every document carries "schema_version": 1.
nlohmann::json to_json(const MarginReport& report);
nlohmann::json to_json(const SeparabilityReport& report);
nlohmann::json to_json(const ConfusionReport& report);
nlohmann::json tensor_json(const Tensor& t);

}  // namespace madlab
