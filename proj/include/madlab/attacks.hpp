#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "madlab/dataset.hpp"
#include "madlab/model.hpp"
#include "madlab/rng.hpp"

namespace madlab {

enum class AttackFamily { FGSM, BIM, PGD, CW };

std::string to_string(AttackFamily family);
/// Case-insensitive; throws ConfigError on unknown names.
AttackFamily parse_attack_family(const std::string& name);

struct CwConfig {
    double c = 1.0;                  // initial (and, with one search step, fixed) constant
    double kappa = 0.0;              // confidence
    std::size_t max_iterations = 1000;
    std::size_t binary_search_steps = 1;
    double learning_rate = 0.01;     // plain gradient descent in tanh space

    bool operator==(const CwConfig&) const = default;
};

struct AttackConfig {
    AttackFamily family = AttackFamily::PGD;
    double epsilon = 0.3;                 // L-inf budget for FGSM/BIM/PGD
    std::size_t iterations = 10;          // BIM/PGD
    std::optional<double> step;           // BIM/PGD; default 2.5 * epsilon / iterations, capped at epsilon
    CwConfig cw;
    std::optional<double> linf_cap;       // CW only: post-optimization L-inf projection
    double loss_alpha = 1.0;              // label smoothing of the ascended cross-entropy
    std::uint64_t seed = 0;

    double step_size() const;
    void validate() const;
    bool operator==(const AttackConfig&) const = default;
};

/// linf_cap defaults for MNIST-like (0.3) and natural-image-like (0.03) inputs.
inline constexpr double kLinfCapDigits = 0.3;
inline constexpr double kLinfCapNatural = 0.03;

struct AdversarialResult {
    Tensor x_adv;                 // same shape as the attacked sample
    bool success = false;         // prediction differs from the true label
    std::size_t true_class = 0;
    std::size_t original_class = 0;
    std::size_t adversarial_class = 0;
    double l2 = 0.0;
    double linf = 0.0;
    std::size_t iterations = 0;
};

/// Gradient of the (smoothed) cross-entropy at `labels` with respect to the
/// input batch x [B, ...].
Tensor input_gradient(const Network& net, const Tensor& x, std::span<const std::size_t> labels, double alpha = 1.0);

/// Projects `candidate` onto {v : |v - x| <= epsilon} intersected with [0, 1],
/// such that the floating-point difference respects the budget exactly.
Tensor project_linf(const Tensor& candidate, const Tensor& x, double epsilon);

// Single-sample attacks. `x` is one sample (any shape with input_size() elements).
AdversarialResult fgsm(const Network& net, const Tensor& x, std::size_t y, double epsilon, double loss_alpha = 1.0);
AdversarialResult bim(const Network& net, const Tensor& x, std::size_t y, double epsilon, std::size_t iterations,
                      double step, double loss_alpha = 1.0);
AdversarialResult pgd(const Network& net, const Tensor& x, std::size_t y, double epsilon, std::size_t iterations,
                      double step, Rng& rng, double loss_alpha = 1.0);
AdversarialResult cw_l2(const Network& net, const Tensor& x, std::size_t y, const CwConfig& cfg,
                        std::optional<double> linf_cap);

/// Dispatches on cfg.family; randomized attacks use the stream derived from (cfg.seed, sample_index).
AdversarialResult run_attack(const Network& net, const Tensor& x, std::size_t y, const AttackConfig& cfg,
                             std::size_t sample_index);

/// Batched PGD used during training; all rows perturbed simultaneously.
Tensor pgd_batch(const Network& net, const Tensor& x, std::span<const std::size_t> y, double epsilon,
                 std::size_t iterations, double step, Rng& rng, double loss_alpha = 1.0);

struct SampleOutcome {
    std::size_t index = 0;  // row in the evaluated dataset
    std::size_t true_class = 0;
    std::size_t pre_class = 0;
    std::size_t post_class = 0;
    double l2 = 0.0;
    double linf = 0.0;
    bool success = false;
    std::size_t iterations = 0;
};

struct AttackEvaluation {
    double robust_accuracy = 0.0;   // fraction of attacked samples still correctly classified
    std::size_t evaluated = 0;      // samples inspected
    std::size_t attacked = 0;       // correctly classified before the attack
    std::vector<SampleOutcome> samples;
    std::vector<Tensor> adversarial;  // aligned with `samples`
};

/// Attacks the correctly classified samples among the first rows of `data`
/// (at most `max_samples` of them when nonzero). Per-sample work is spread over
/// `workers` threads; results do not depend on the worker count.
AttackEvaluation evaluate_attack(const Network& net, const Dataset& data, const AttackConfig& cfg,
                                 std::size_t max_samples = 0, std::size_t workers = 1);

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace madlab
