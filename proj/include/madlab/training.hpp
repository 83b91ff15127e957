#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "madlab/dataset.hpp"
#include "madlab/errors.hpp"
#include "madlab/loss.hpp"
#include "madlab/model.hpp"
#include "madlab/rng.hpp"

namespace madlab {

/// Anchors x1 with their partners x2; s[b] == 1 exactly when y1[b] == y2[b].
struct SiameseBatch {
    Tensor x1, x2;
    std::vector<std::size_t> y1, y2;
    std::vector<int> s;

    SiameseInputs inputs() const { return {x1, x2, y1, y2, s}; }
};

/// Per anchor: with probability Q a random partner of the same class, otherwise
/// a random partner from a uniformly chosen different class.
SiameseBatch build_siamese_batch(const Dataset& data, std::span<const std::size_t> indices, double Q, Rng& rng);

/// Same as above with precomputed data.class_members().
SiameseBatch build_siamese_batch(const Dataset& data, const std::vector<std::vector<std::size_t>>& members,
                                 std::span<const std::size_t> indices, double Q, Rng& rng);

enum class LrSchedule { Step, Constant };

struct AdversarialTraining {
    double epsilon = 0.3;
    std::size_t iterations = 10;
    std::optional<double> step;  // default 2.5 * epsilon / iterations, capped at epsilon
    double ratio = 0.5;          // fraction of each batch replaced by PGD examples

    double step_size() const;
    bool operator==(const AdversarialTraining&) const = default;
};

struct TrainConfig {
    double Q = 0.5;
    std::size_t batch_size = 128;
    std::size_t epochs = 80;
    double learning_rate = 0.1;
    LrSchedule schedule = LrSchedule::Step;
    double weight_decay = 0.002;
    MadLossConfig loss;
    std::optional<AdversarialTraining> adversarial;
    std::uint64_t seed = 0;
    std::size_t jacobian_rows = 0;  // rows per batch entering the Jacobian term, 0 = all

    /// Learning rate used during (zero-based) epoch `epoch`: x0.1 at 50% and again at 75%.
    double learning_rate_at(std::size_t epoch) const;
    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct TrainLogRow {
    std::size_t epoch = 0;
    std::size_t batch = 0;
    LossBreakdown loss;
    double learning_rate = 0.0;
};

struct TrainCallbacks {
    std::function<void(const TrainLogRow&)> on_batch;
    std::function<void(std::size_t epoch, const Network&)> on_epoch;
};

struct TrainResult {
    Network net;
    std::vector<TrainLogRow> log;
};

/// Thrown when the total loss stops being finite; holds the network as it was
/// after the last finite step.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, long epoch, long batch, Network last_finite)
        : DivergenceError(what, epoch, batch), net_(std::move(last_finite)) {}
    const Network& last_finite_network() const noexcept { return net_; }

private:
    Network net_;
};

/// theta <- theta - lr * (g + weight_decay * theta). `grads` holds one tensor per
/// parameter in ParamNodes::all() order.
Network sgd_step(const Network& net, std::span<const Tensor> grads, double lr, double weight_decay);

/// PGD examples against the current network; labels unchanged.
Tensor adversarial_augment(const Network& net, const Tensor& x, std::span<const std::size_t> y,
                           const AdversarialTraining& cfg, Rng& rng);

TrainResult train(const Network& net, const Dataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks = {});

/// Cross-entropy against arbitrary target distributions targets [N, M]
/// (one-hot rows for hard labels). Uses batch size, epochs, schedule, weight
/// decay and seed from `cfg`; the MAD terms are not used.
TrainResult train_soft_targets(const Network& net, const Tensor& inputs, const Tensor& targets, const TrainConfig& cfg,
                               const TrainCallbacks& callbacks = {});

inline constexpr const char* kTrainLogHeader = "epoch,batch,ce,siamese,rvl,jacobian,total,learning_rate";

void write_train_log(std::ostream& out, std::span<const TrainLogRow> rows);

/// Classification accuracy of `net` on `data`, evaluated in chunks.
double accuracy(const Network& net, const Dataset& data);

}  // namespace madlab
