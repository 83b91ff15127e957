#include "madlab/loss.hpp"

#include <cmath>
#include <map>

#include "madlab/errors.hpp"

namespace madlab {

void MadLossConfig::validate() const {
    for (double l : {lambda_ce, lambda_siamese, lambda_rvl, lambda_jacobian}) {
        if (!(l >= 0.0) || !std::isfinite(l)) throw InvalidArgument("loss: lambda weights must be finite and >= 0");
    }
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("loss: alpha must lie in (0, 1]");
    if (!(cosine_eps > 0.0)) throw InvalidArgument("loss: cosine_eps must be positive");
}

Tensor smoothing_target(std::size_t label, std::size_t num_classes, double alpha) {
    if (num_classes < 2 || label >= num_classes) {
        throw InvalidArgument("smoothing_target: label " + std::to_string(label) + " invalid for " +
                              std::to_string(num_classes) + " classes");
    }
    if (!(alpha > 1.0 / static_cast<double>(num_classes) && alpha <= 1.0)) {
        throw InvalidArgument("smoothing_target: alpha " + std::to_string(alpha) + " outside (1/M, 1]");
    }
    std::vector<double> t(num_classes, (1.0 - alpha) / static_cast<double>(num_classes - 1));
    t[label] = alpha;
    return Tensor::vector(std::move(t));
}

double smoothed_cross_entropy(const Tensor& logits, std::size_t label, double alpha) {
    const Tensor target = smoothing_target(label, logits.size(), alpha);
    double mx = logits[0];
    for (double v : logits.data()) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : logits.data()) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    double loss = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) loss -= target[k] * (logits[k] - lse);
    return loss;
}

NodeId smoothed_cross_entropy(CompGraph& graph, NodeId logits, std::span<const std::size_t> labels, double alpha) {
    const Tensor& lv = graph.value(logits);
    if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(lv.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
    }
    const std::size_t B = lv.dim(0), M = lv.dim(1);
    std::vector<double> targets;
    targets.reserve(B * M);
    for (std::size_t y : labels) {
        const Tensor t = smoothing_target(y, M, alpha);
        targets.insert(targets.end(), t.data().begin(), t.data().end());
    }
    const NodeId tgt = graph.constant(Tensor(Shape{B, M}, std::move(targets)));
    return graph.scale(graph.sum(graph.mul(graph.log_softmax(logits), tgt)), -1.0 / static_cast<double>(B));
}

double cosine_similarity(const Tensor& z1, const Tensor& z2, double eps) {
    if (z1.size() != z2.size()) {
        throw ShapeError("cosine_similarity: lengths " + std::to_string(z1.size()) + " and " +
                         std::to_string(z2.size()) + " differ");
    }
    double d = 0.0;
    for (std::size_t i = 0; i < z1.size(); ++i) d += z1[i] * z2[i];
    return d / (std::max(frobenius_norm(z1), eps) * std::max(frobenius_norm(z2), eps));
}

NodeId cosine_similarity_rows(CompGraph& graph, NodeId z1, NodeId z2, double eps) {
    const NodeId num = graph.row_sum(graph.mul(z1, z2));
    const NodeId n1 = graph.clamp_min(graph.row_norms(z1), eps);
    const NodeId n2 = graph.clamp_min(graph.row_norms(z2), eps);
    return graph.div(num, graph.mul(n1, n2));
}

double siamese_loss(const Tensor& z1, const Tensor& z2, int same_class, double eps) {
    const double d = static_cast<double>(same_class) - cosine_similarity(z1, z2, eps);
    return d * d;
}

NodeId siamese_loss(CompGraph& graph, NodeId z1, NodeId z2, std::span<const int> same_class, double eps) {
    const Tensor& v1 = graph.value(z1);
    if (v1.rank() != 2 || v1.shape() != graph.value(z2).shape() || v1.dim(0) != same_class.size()) {
        throw ShapeError("siamese_loss: embeddings " + shape_str(v1.shape()) + " / " +
                         shape_str(graph.value(z2).shape()) + " with " + std::to_string(same_class.size()) +
                         " targets");
    }
    std::vector<double> s(same_class.begin(), same_class.end());
    const NodeId target = graph.constant(Tensor::vector(std::move(s)));
    const NodeId diff = graph.sub(target, cosine_similarity_rows(graph, z1, z2, eps));
    return graph.mean(graph.mul(diff, diff));
}

NodeId reduce_variance_loss(CompGraph& graph, NodeId z_batch, std::span<const std::size_t> labels) {
    const Tensor& zv = graph.value(z_batch);
    if (labels.empty()) throw InvalidArgument("reduce_variance_loss: empty batch");
    if (zv.rank() != 2 || zv.dim(0) != labels.size()) {
        throw ShapeError("reduce_variance_loss: embeddings " + shape_str(zv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t d = zv.dim(1);
    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    NodeId acc = kNoNode;
    for (const auto& [cls, rows] : members) {
        const std::size_t n = rows.size();
        const NodeId zc = graph.select_rows(z_batch, rows);
        const NodeId mu = graph.scale(graph.reduce_expand(zc, n, 1, Shape{d}), 1.0 / static_cast<double>(n));
        const NodeId diff = graph.sub(zc, graph.expand(mu, n, 1, Shape{n, d}));
        const NodeId sigma = graph.mean(graph.row_norms(diff));
        acc = acc == kNoNode ? sigma : graph.add(acc, sigma);
    }
    return graph.scale(acc, 1.0 / static_cast<double>(members.size()));
}

double reduce_variance_loss(const Tensor& z_batch, std::span<const std::size_t> labels) {
    CompGraph graph;
    return graph.value(reduce_variance_loss(graph, graph.constant(z_batch), labels)).item();
}

namespace {

// Squared Frobenius norm of each sample's Jacobian -> [B]; one backward pass per output component.
NodeId jacobian_sq_norms(CompGraph& graph, const Network& net, const ParamNodes& params, const Tensor& x,
                         JacobianTarget target) {
    const NodeId xin = graph.input(x);
    const ForwardResult fr = net.forward(graph, params, xin);
    const NodeId out = target == JacobianTarget::Embedding ? fr.embedding : fr.logits;
    const Shape os = graph.value(out).shape();
    const std::size_t B = os[0], d = os[1];
    const NodeId wrt[] = {xin};
    NodeId acc = kNoNode;
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> e(B * d, 0.0);
        for (std::size_t b = 0; b < B; ++b) e[b * d + k] = 1.0;
        const NodeId seed = graph.constant(Tensor(os, std::move(e)));
        const NodeId g = graph.vjp(out, seed, wrt)[0];
        if (g == kNoNode) continue;
        const NodeId gf = graph.flatten(g);
        const NodeId sq = graph.row_sum(graph.mul(gf, gf));
        acc = acc == kNoNode ? sq : graph.add(acc, sq);
    }
    if (acc == kNoNode) acc = graph.constant(Tensor::zeros({B}));
    return acc;
}

}  // namespace

NodeId jacobian_penalty(CompGraph& graph, const Network& net, const ParamNodes& params, const Tensor& x,
                        JacobianTarget target) {
    return graph.mean(graph.sqrt(jacobian_sq_norms(graph, net, params, x, target)));
}

double jacobian_penalty(const Network& net, const Tensor& x, JacobianTarget target) {
    CompGraph graph;
    return graph.value(jacobian_penalty(graph, net, net.bind(graph, false), x, target)).item();
}

std::vector<double> jacobian_norms(const Network& net, const Tensor& x, JacobianTarget target) {
    if (x.rank() == 0) throw ShapeError("jacobian_norms: input must have a batch axis");
    constexpr std::size_t kChunk = 25;  // bounds graph memory on large batches
    std::vector<double> out;
    out.reserve(x.dim(0));
    for (std::size_t begin = 0; begin < x.dim(0); begin += kChunk) {
        CompGraph graph;
        const Tensor part = x.slice_rows(begin, std::min(begin + kChunk, x.dim(0)));
        const Tensor sq = graph.value(jacobian_sq_norms(graph, net, net.bind(graph, false), part, target));
        for (std::size_t i = 0; i < sq.size(); ++i) out.push_back(std::sqrt(sq[i]));
    }
    return out;
}

MadLossNodes mad_loss(CompGraph& graph, const Network& net, const ParamNodes& params, const SiameseInputs& in,
                      const MadLossConfig& cfg, std::size_t jacobian_rows) {
    cfg.validate();
    const std::size_t B = in.y1.size();
    if (B == 0 || in.x1.rank() == 0 || in.x2.rank() == 0 || in.x1.dim(0) != B || in.x2.dim(0) != B ||
        in.y2.size() != B || in.same_class.size() != B) {
        throw ShapeError("mad_loss: batch size mismatch between the two Siamese inputs");
    }
    MadLossNodes n;
    const NodeId x1 = graph.constant(in.x1);
    const NodeId x2 = graph.constant(in.x2);
    const ForwardResult f1 = net.forward(graph, params, x1);
    const ForwardResult f2 = net.forward(graph, params, x2);

    n.ce = graph.add(smoothed_cross_entropy(graph, f1.logits, in.y1, cfg.alpha),
                     smoothed_cross_entropy(graph, f2.logits, in.y2, cfg.alpha));
    n.siamese = siamese_loss(graph, f1.embedding, f2.embedding, in.same_class, cfg.cosine_eps);
    n.rvl = graph.add(reduce_variance_loss(graph, f1.embedding, in.y1),
                      reduce_variance_loss(graph, f2.embedding, in.y2));

    NodeId total = graph.add(graph.scale(n.ce, cfg.lambda_ce),
                             graph.add(graph.scale(n.siamese, cfg.lambda_siamese), graph.scale(n.rvl, cfg.lambda_rvl)));
    if (cfg.lambda_jacobian > 0.0) {
        const std::size_t rows = jacobian_rows == 0 ? B : std::min(jacobian_rows, B);
        const Tensor j1 = rows == B ? in.x1 : in.x1.slice_rows(0, rows);
        const Tensor j2 = rows == B ? in.x2 : in.x2.slice_rows(0, rows);
        n.jacobian = graph.add(jacobian_penalty(graph, net, params, j1, cfg.jacobian_target),
                               jacobian_penalty(graph, net, params, j2, cfg.jacobian_target));
        total = graph.add(total, graph.scale(n.jacobian, cfg.lambda_jacobian));
    }
    n.total = total;
    n.values.ce = graph.value(n.ce).item();
    n.values.siamese = graph.value(n.siamese).item();
    n.values.rvl = graph.value(n.rvl).item();
    n.values.jacobian = n.jacobian == kNoNode ? 0.0 : graph.value(n.jacobian).item();
    n.values.total = graph.value(n.total).item();
    return n;
}

LossBreakdown mad_loss(const Network& net, const SiameseInputs& in, const MadLossConfig& cfg) {
    CompGraph graph;
    const ParamNodes params = net.bind(graph, false);
    MadLossNodes n = mad_loss(graph, net, params, in, cfg);
    if (cfg.lambda_jacobian == 0.0) {
        // still report the penalty value so the breakdown is complete
        const NodeId j = graph.add(jacobian_penalty(graph, net, params, in.x1, cfg.jacobian_target),
                                   jacobian_penalty(graph, net, params, in.x2, cfg.jacobian_target));
        n.values.jacobian = graph.value(j).item();
    }
    return n.values;
}

}  // namespace madlab
