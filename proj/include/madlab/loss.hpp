#pragma once

#include <span>
#include <vector>

#include "madlab/graph.hpp"
#include "madlab/model.hpp"

namespace madlab {

enum class JacobianTarget { Embedding, Logits };

/// Weights of the combined loss and label-smoothing settings.
struct MadLossConfig {
    double lambda_ce = 1.0;
    double lambda_siamese = 1.0;
    double lambda_rvl = 1.0;
    double lambda_jacobian = 0.01;
    double alpha = 0.8;  // smoothed target activation of the true class
    double cosine_eps = 1e-12;
    JacobianTarget jacobian_target = JacobianTarget::Embedding;

    void validate() const;
    bool operator==(const MadLossConfig&) const = default;
};

struct LossBreakdown {
    double ce = 0.0;
    double siamese = 0.0;
    double rvl = 0.0;
    double jacobian = 0.0;
    double total = 0.0;
};

/// alpha on `label`, (1 - alpha) / (M - 1) elsewhere. Requires 1/M < alpha <= 1.
Tensor smoothing_target(std::size_t label, std::size_t num_classes, double alpha);

/// Cross-entropy of one logits vector against the smoothed target, log-sum-exp stabilized.
double smoothed_cross_entropy(const Tensor& logits, std::size_t label, double alpha);

/// Mean smoothed cross-entropy over the rows of logits [B, M].
NodeId smoothed_cross_entropy(CompGraph& graph, NodeId logits, std::span<const std::size_t> labels, double alpha);

/// (z1 . z2) / (max(|z1|, eps) * max(|z2|, eps)).
double cosine_similarity(const Tensor& z1, const Tensor& z2, double eps = 1e-12);

/// Row-wise cosine similarity of [B, d] embeddings -> [B].
NodeId cosine_similarity_rows(CompGraph& graph, NodeId z1, NodeId z2, double eps);

/// (same_class - cos(z1, z2))^2.
double siamese_loss(const Tensor& z1, const Tensor& z2, int same_class, double eps = 1e-12);

/// Mean of the per-pair Siamese loss over the batch.
NodeId siamese_loss(CompGraph& graph, NodeId z1, NodeId z2, std::span<const int> same_class, double eps);

/// Mean over classes present in the batch of the mean L2 distance to the class centroid.
double reduce_variance_loss(const Tensor& z_batch, std::span<const std::size_t> labels);
NodeId reduce_variance_loss(CompGraph& graph, NodeId z_batch, std::span<const std::size_t> labels);

/// Mean over the batch of the Frobenius norm of d(target layer)/dx, recorded on
/// `graph` so that its gradient with respect to `params` can be taken.
NodeId jacobian_penalty(CompGraph& graph, const Network& net, const ParamNodes& params, const Tensor& x,
                        JacobianTarget target = JacobianTarget::Embedding);
double jacobian_penalty(const Network& net, const Tensor& x, JacobianTarget target = JacobianTarget::Embedding);

/// Per-sample Frobenius norms of the input Jacobian of the chosen layer.
std::vector<double> jacobian_norms(const Network& net, const Tensor& x, JacobianTarget target = JacobianTarget::Embedding);

struct MadLossNodes {
    NodeId ce = kNoNode;
    NodeId siamese = kNoNode;
    NodeId rvl = kNoNode;
    NodeId jacobian = kNoNode;
    NodeId total = kNoNode;
    LossBreakdown values;
};

/// Inputs of one Siamese step.
struct SiameseInputs {
    const Tensor& x1;
    const Tensor& x2;
    std::span<const std::size_t> y1;
    std::span<const std::size_t> y2;
    std::span<const int> same_class;
};

/// Builds the combined loss on `graph`. Terms whose weight is zero are still
/// reported in the breakdown, except the Jacobian term, which is skipped
/// (reported as 0) when its weight is zero. `jacobian_rows` limits the
/// Jacobian term to the first rows of each batch (0 = whole batch).
MadLossNodes mad_loss(CompGraph& graph, const Network& net, const ParamNodes& params, const SiameseInputs& in,
                      const MadLossConfig& cfg, std::size_t jacobian_rows = 0);

LossBreakdown mad_loss(const Network& net, const SiameseInputs& in, const MadLossConfig& cfg);

}  // namespace madlab
