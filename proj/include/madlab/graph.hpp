#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "madlab/tensor.hpp"

namespace madlab {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

enum class OpTag : std::uint8_t {
    Input,      // leaf that gradients can be taken with respect to
    Constant,   // leaf treated as fixed
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,      // x * attrs.scalar
    Exp,
    Log,
    Sqrt,
    SafeRecip,  // 1/x for x > 0, else 0
    ClampMin,   // max(x, attrs.scalar)
    LeakyRelu,  // slope in attrs.scalar
    Matmul,
    Transpose,
    Conv2d,
    Conv2dInputGrad,
    Conv2dWeightGrad,
    MaxPool,
    Gather,
    ScatterAdd,
    Expand,        // [C] -> [outer, C, inner]
    ReduceExpand,  // adjoint of Expand
    Sum,
    Mean,
    Dot,
    L2Norm,
    Softmax,
    LogSoftmax,
    Reshape,
    Flatten,
};

std::string_view op_name(OpTag op);

/// Convolution geometry shared by the three convolution ops.
struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_h = 0, in_w = 0;          // input spatial size
    std::size_t kernel_h = 0, kernel_w = 0;
};

struct OpAttrs {
    double scalar = 0.0;
    std::size_t outer = 1, inner = 1;
    Shape shape;  // target shape for Reshape/Expand/Gather/ScatterAdd
    ConvGeometry conv;
    std::size_t pool = 2;
    std::shared_ptr<const std::vector<std::uint32_t>> index;
};

struct Node {
    OpTag op;
    std::vector<NodeId> parents;
    Tensor value;
    OpAttrs attrs;
    bool requires_grad = false;
};

/// Define-by-run reverse-mode tape. Gradients are themselves recorded as nodes,
/// so any gradient can be differentiated again.
///
/// A graph is single-owner; build one per thread.
class CompGraph {
public:
    CompGraph() = default;
    CompGraph(const CompGraph&) = delete;
    CompGraph& operator=(const CompGraph&) = delete;
    CompGraph(CompGraph&&) = default;
    CompGraph& operator=(CompGraph&&) = default;

    NodeId input(Tensor value);
    NodeId constant(Tensor value);

    /// Generic entry point; dispatches to the typed builders below.
    NodeId forward_op(OpTag op, std::span<const NodeId> inputs, const OpAttrs& attrs = {});

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId neg(NodeId a);
    NodeId scale(NodeId a, double factor);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    NodeId sqrt(NodeId a);
    NodeId safe_recip(NodeId a);
    NodeId clamp_min(NodeId a, double floor);
    NodeId leaky_relu(NodeId a, double slope);
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    /// x: [B, C, H, W], w: [K, C, kh, kw] -> [B, K, Ho, Wo].
    NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding);
    NodeId conv2d_input_grad(NodeId g, NodeId w, const ConvGeometry& geom);
    NodeId conv2d_weight_grad(NodeId x, NodeId g, const ConvGeometry& geom);
    /// Non-overlapping square pooling window; trailing rows/cols that do not fill a window are dropped.
    NodeId max_pool(NodeId x, std::size_t window);
    NodeId gather(NodeId x, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape);
    NodeId scatter_add(NodeId g, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape);
    NodeId expand(NodeId x, std::size_t outer, std::size_t inner, Shape out_shape);
    NodeId reduce_expand(NodeId g, std::size_t outer, std::size_t inner, Shape out_shape);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId dot(NodeId a, NodeId b);
    NodeId l2_norm(NodeId a);
    /// Row-wise over the last axis of a rank-1 or rank-2 tensor.
    NodeId softmax(NodeId a);
    NodeId log_softmax(NodeId a);
    NodeId reshape(NodeId a, Shape shape);
    /// [B, ...] -> [B, prod(...)].
    NodeId flatten(NodeId a);

    // Composite helpers built from the primitives above.

    /// [B, n] + bias[n].
    NodeId add_row_bias(NodeId x, NodeId bias);
    /// [B, C, H, W] + bias[C].
    NodeId add_channel_bias(NodeId x, NodeId bias);
    /// [B, n] -> [B] sums along the last axis.
    NodeId row_sum(NodeId x);
    /// [B] -> [B, n] broadcasting each entry along a row.
    NodeId broadcast_rows(NodeId v, std::size_t n);
    /// Euclidean norm of every row of [B, n] -> [B].
    NodeId row_norms(NodeId x);
    /// Selects rows of [B, ...] -> [rows.size(), ...].
    NodeId select_rows(NodeId x, std::span<const std::size_t> rows);

    /// Vector-Jacobian product of `output` with `seed`, differentiated with
    /// respect to `wrt`. Returns one gradient node per entry of `wrt`
    /// (kNoNode when the output does not depend on it). The products are
    /// recorded on this graph and may be differentiated further.
    std::vector<NodeId> vjp(NodeId output, NodeId seed, std::span<const NodeId> wrt);

    /// Gradient of a scalar `output` with respect to `wrt`; rejects non-scalar outputs.
    std::vector<NodeId> grad(NodeId output, std::span<const NodeId> wrt);

    const Node& node(NodeId id) const { return nodes_.at(id); }
    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    NodeId push(OpTag op, std::vector<NodeId> parents, Tensor value, OpAttrs attrs = {});
    const Shape& shape_of(NodeId id) const { return nodes_[id].value.shape(); }
    void check(NodeId id) const;
    NodeId binary_same_shape(OpTag op, NodeId a, NodeId b);
    NodeId mask_of(NodeId id);
    NodeId zeros_like(NodeId id);
    NodeId backward_rule(NodeId self, std::size_t which, NodeId g);

    std::deque<Node> nodes_;  // stable references across push_back
    std::unordered_map<NodeId, NodeId> mask_cache_;
};

/// Gradients of a scalar output as plain tensors, keyed by node id, for every
/// node the output depends on.
std::unordered_map<NodeId, Tensor> backward(CompGraph& graph, NodeId output);

/// Dense Jacobian of `f` at `x`, shape [dim(f(x)), dim(x)], built with one
/// backward pass per output component.
Tensor jacobian(const std::function<NodeId(CompGraph&, NodeId)>& f, const Tensor& x);

}  // namespace madlab
