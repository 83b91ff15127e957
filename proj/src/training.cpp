#include "madlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "madlab/attacks.hpp"

namespace madlab {

namespace {

// Stream ids for the independent random sequences of one training run.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kPairStream = 2;
constexpr std::uint64_t kAdversarialStream = 3;

// Replaces rows [0, head.dim(0)) of `x` by `head`.
Tensor replace_head(const Tensor& x, const Tensor& head) {
    std::vector<double> v = x.to_vector();
    std::copy(head.data().begin(), head.data().end(), v.begin());
    return Tensor(x.shape(), std::move(v));
}

}  // namespace

SiameseBatch build_siamese_batch(const Dataset& data, std::span<const std::size_t> indices, double Q, Rng& rng) {
    return build_siamese_batch(data, data.class_members(), indices, Q, rng);
}

SiameseBatch build_siamese_batch(const Dataset& data, const std::vector<std::vector<std::size_t>>& members,
                                 std::span<const std::size_t> indices, double Q, Rng& rng) {
    if (!(Q >= 0.0 && Q <= 1.0)) throw InvalidArgument("siamese batch: Q must lie in [0, 1]");
    const std::size_t M = members.size();
    if (M < 2) throw DataError(DataError::Kind::MissingClass, "siamese batch: need at least 2 classes");
    SiameseBatch b;
    b.y1.reserve(indices.size());
    std::vector<std::size_t> partners;
    partners.reserve(indices.size());
    for (std::size_t idx : indices) {
        const std::size_t y = data.labels.at(idx);
        std::size_t cls = y;
        const bool same = rng.bernoulli(Q);
        if (!same) {
            // uniform over the M - 1 other classes
            cls = static_cast<std::size_t>(rng.below(M - 1));
            if (cls >= y) ++cls;
        }
        const auto& pool = members[cls];
        if (pool.empty()) {
            throw DataError(DataError::Kind::MissingClass,
                            "siamese batch: class " + std::to_string(cls) + " has no samples to pair with");
        }
        partners.push_back(pool[static_cast<std::size_t>(rng.below(pool.size()))]);
        b.y1.push_back(y);
        b.y2.push_back(cls);
        b.s.push_back(same ? 1 : 0);
    }
    b.x1 = data.inputs.gather_rows(indices);
    b.x2 = data.inputs.gather_rows(partners);
    return b;
}

double AdversarialTraining::step_size() const {
    if (step) return *step;
    return std::min(2.5 * epsilon / static_cast<double>(std::max<std::size_t>(iterations, 1)), epsilon);
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
    if (schedule == LrSchedule::Constant) return learning_rate;
    double lr = learning_rate;
    if (epoch * 2 >= epochs) lr *= 0.1;
    if (epoch * 4 >= epochs * 3) lr *= 0.1;
    return lr;
}

void TrainConfig::validate() const {
    if (!(Q >= 0.0 && Q <= 1.0)) throw InvalidArgument("train: Q must lie in [0, 1]");
    if (batch_size == 0) throw InvalidArgument("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("train: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("train: weight_decay must be >= 0");
    loss.validate();
    if (adversarial) {
        if (!(adversarial->epsilon >= 0.0)) throw InvalidArgument("train: adversarial epsilon must be >= 0");
        if (!(adversarial->ratio >= 0.0 && adversarial->ratio <= 1.0)) {
            throw InvalidArgument("train: adversarial ratio must lie in [0, 1]");
        }
    }
}

Network sgd_step(const Network& net, std::span<const Tensor> grads, double lr, double weight_decay) {
    Network out = net;
    std::size_t k = 0;
    auto update = [&](Tensor& theta, const char* what, std::size_t layer) {
        if (theta.size() == 0) return;
        if (k >= grads.size()) throw ShapeError("sgd_step: too few gradients");
        const Tensor& g = grads[k++];
        if (g.shape() != theta.shape()) {
            throw ShapeError(std::string("sgd_step: layer ") + std::to_string(layer) + " " + what + " is " +
                             shape_str(theta.shape()) + " but its gradient is " + shape_str(g.shape()));
        }
        std::vector<double> v = theta.to_vector();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (g[i] + weight_decay * v[i]);
        theta = Tensor(theta.shape(), std::move(v));
    };
    auto& params = out.mutable_params();
    for (std::size_t l = 0; l < params.size(); ++l) {
        update(params[l].weight, "weight", l);
        update(params[l].bias, "bias", l);
    }
    if (k != grads.size()) throw ShapeError("sgd_step: too many gradients");
    return out;
}

Tensor adversarial_augment(const Network& net, const Tensor& x, std::span<const std::size_t> y,
                           const AdversarialTraining& cfg, Rng& rng) {
    return pgd_batch(net, x, y, cfg.epsilon, cfg.iterations, cfg.step_size(), rng);
}

namespace {

std::vector<Tensor> gradient_values(CompGraph& graph, NodeId total, const ParamNodes& params) {
    const std::vector<NodeId> wrt = params.all();
    const std::vector<NodeId> g = graph.grad(total, wrt);
    std::vector<Tensor> out;
    out.reserve(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        out.push_back(g[i] == kNoNode ? Tensor::zeros(graph.value(wrt[i]).shape()) : graph.value(g[i]));
    }
    return out;
}

bool finite(const LossBreakdown& l) {
    return std::isfinite(l.ce) && std::isfinite(l.siamese) && std::isfinite(l.rvl) && std::isfinite(l.jacobian) &&
           std::isfinite(l.total);
}

}  // namespace

TrainResult train(const Network& net, const Dataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks) {
    cfg.validate();
    data.validate();
    if (data.num_classes != net.num_classes()) {
        throw InvalidArgument("train: dataset has " + std::to_string(data.num_classes) + " classes, network " +
                              std::to_string(net.num_classes()));
    }
    TrainResult result{net, {}};
    if (cfg.epochs == 0 || data.size() == 0) return result;

    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream));
    Rng pair_rng(derive_seed(cfg.seed, kPairStream));
    Rng adv_rng(derive_seed(cfg.seed, kAdversarialStream));
    const auto members = data.class_members();
    std::vector<std::size_t> order(data.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.learning_rate_at(epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_rng.shuffle(order);
        std::size_t batch = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            SiameseBatch sb = build_siamese_batch(data, members, idx, cfg.Q, pair_rng);
            if (cfg.adversarial && cfg.adversarial->ratio > 0.0) {
                const auto k = static_cast<std::size_t>(std::llround(cfg.adversarial->ratio * static_cast<double>(idx.size())));
                if (k > 0) {
                    const std::span<const std::size_t> y1(sb.y1.data(), k), y2(sb.y2.data(), k);
                    sb.x1 = replace_head(sb.x1, adversarial_augment(result.net, sb.x1.slice_rows(0, k), y1,
                                                                    *cfg.adversarial, adv_rng));
                    sb.x2 = replace_head(sb.x2, adversarial_augment(result.net, sb.x2.slice_rows(0, k), y2,
                                                                    *cfg.adversarial, adv_rng));
                }
            }
            CompGraph graph;
            const ParamNodes params = result.net.bind(graph, true);
            const MadLossNodes loss = mad_loss(graph, result.net, params, sb.inputs(), cfg.loss, cfg.jacobian_rows);
            if (!finite(loss.values)) {
                throw TrainingDiverged("train: loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                           std::to_string(batch),
                                       static_cast<long>(epoch), static_cast<long>(batch) - 1, result.net);
            }
            const std::vector<Tensor> grads = gradient_values(graph, loss.total, params);
            Network next = sgd_step(result.net, grads, lr, cfg.weight_decay);
            bool ok = true;
            for (const auto& p : next.params()) ok = ok && p.weight.all_finite() && p.bias.all_finite();
            if (!ok) {
                throw TrainingDiverged("train: parameters became non-finite at epoch " + std::to_string(epoch) +
                                           ", batch " + std::to_string(batch),
                                       static_cast<long>(epoch), static_cast<long>(batch) - 1, result.net);
            }
            result.net = std::move(next);
            TrainLogRow row{epoch, batch, loss.values, lr};
            result.log.push_back(row);
            if (callbacks.on_batch) callbacks.on_batch(row);
        }
        if (callbacks.on_epoch) callbacks.on_epoch(epoch, result.net);
    }
    return result;
}

TrainResult train_soft_targets(const Network& net, const Tensor& inputs, const Tensor& targets, const TrainConfig& cfg,
                               const TrainCallbacks& callbacks) {
    cfg.validate();
    if (inputs.rank() < 2 || targets.rank() != 2 || targets.dim(0) != inputs.dim(0) ||
        targets.dim(1) != net.num_classes()) {
        throw ShapeError("train_soft_targets: inputs " + shape_str(inputs.shape()) + " vs targets " +
                         shape_str(targets.shape()));
    }
    TrainResult result{net, {}};
    const std::size_t N = inputs.dim(0);
    if (cfg.epochs == 0 || N == 0) return result;
    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream));
    std::vector<std::size_t> order(N);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.learning_rate_at(epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_rng.shuffle(order);
        std::size_t batch = 0;
        for (std::size_t begin = 0; begin < N; begin += cfg.batch_size, ++batch) {
            const std::size_t end = std::min(begin + cfg.batch_size, N);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            CompGraph graph;
            const ParamNodes params = result.net.bind(graph, true);
            const ForwardResult fr = result.net.forward(graph, params, graph.constant(inputs.gather_rows(idx)));
            const NodeId tgt = graph.constant(targets.gather_rows(idx));
            const NodeId ce = graph.scale(graph.sum(graph.mul(graph.log_softmax(fr.logits), tgt)),
                                          -1.0 / static_cast<double>(idx.size()));
            const double value = graph.value(ce).item();
            if (!std::isfinite(value)) {
                throw TrainingDiverged("train_soft_targets: loss became non-finite", static_cast<long>(epoch),
                                       static_cast<long>(batch) - 1, result.net);
            }
            result.net = sgd_step(result.net, gradient_values(graph, ce, params), lr, cfg.weight_decay);
            TrainLogRow row{epoch, batch, {value, 0.0, 0.0, 0.0, value}, lr};
            result.log.push_back(row);
            if (callbacks.on_batch) callbacks.on_batch(row);
        }
        if (callbacks.on_epoch) callbacks.on_epoch(epoch, result.net);
    }
    return result;
}

void write_train_log(std::ostream& out, std::span<const TrainLogRow> rows) {
    const auto old_precision = out.precision(17);
    out << kTrainLogHeader << '\n';
    for (const TrainLogRow& r : rows) {
        out << r.epoch << ',' << r.batch << ',' << r.loss.ce << ',' << r.loss.siamese << ',' << r.loss.rvl << ','
            << r.loss.jacobian << ',' << r.loss.total << ',' << r.learning_rate << '\n';
    }
    out.precision(old_precision);
}

double accuracy(const Network& net, const Dataset& data) {
    if (data.size() == 0) throw InvalidArgument("accuracy: empty dataset");
    std::size_t correct = 0;
    constexpr std::size_t chunk = 256;
    for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
        const std::size_t end = std::min(begin + chunk, data.size());
        const auto pred = predict(net, data.inputs.slice_rows(begin, end));
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[begin + i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace madlab
