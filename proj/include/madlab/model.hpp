#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "madlab/graph.hpp"
#include "madlab/tensor.hpp"

namespace madlab {

enum class LayerKind : std::uint32_t { Dense = 1, Conv2d = 2, LeakyRelu = 3, MaxPool = 4, Flatten = 5 };

std::string to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    // Dense: in/out features. Conv2d: in/out channels.
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t pool = 2;
    double slope = 0.1;

    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t stride = 1, std::size_t padding = 0);
    static LayerSpec leaky_relu(double slope = 0.1);
    static LayerSpec max_pool(std::size_t window = 2);
    static LayerSpec flatten();

    bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
    Shape input_shape;              // per-sample shape, e.g. {784} or {1, 28, 28}
    std::vector<LayerSpec> layers;
    std::size_t embedding_index = 0;  // the embedding is the output of this layer

    bool operator==(const ModelSpec&) const = default;
};

/// 784 -> 256 -> 64 (embedding) -> classes, leaky-relu 0.1.
ModelSpec mlp_spec(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t classes, double slope = 0.1);

/// conv(16) -> pool -> conv(32) -> pool -> dense 64 (embedding) -> classes on [1, side, side] inputs.
ModelSpec small_convnet_spec(std::size_t side, std::size_t classes, double slope = 0.1);

struct LayerParams {
    Tensor weight;  // Dense: [out, in]. Conv2d: [out, in, k, k].
    Tensor bias;    // [out]
    bool empty() const { return weight.size() == 0 && bias.size() == 0; }
};

/// Graph nodes holding one network's parameters.
struct ParamNodes {
    std::vector<NodeId> weight;  // kNoNode for parameterless layers
    std::vector<NodeId> bias;
    std::vector<NodeId> all() const;
};

struct ForwardResult {
    NodeId embedding;
    NodeId logits;
};

class Network {
public:
    Network(ModelSpec spec, std::vector<LayerParams> params);

    const ModelSpec& spec() const noexcept { return spec_; }
    const std::vector<LayerParams>& params() const noexcept { return params_; }
    std::vector<LayerParams>& mutable_params() noexcept { return params_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    std::size_t embedding_dim() const noexcept { return embedding_dim_; }
    std::size_t input_size() const noexcept { return shape_numel(spec_.input_shape); }
    /// Output shape (per sample) of every layer.
    const std::vector<Shape>& layer_shapes() const noexcept { return shapes_; }

    /// Parameters as graph nodes. `trainable` makes them differentiable inputs.
    ParamNodes bind(CompGraph& graph, bool trainable) const;

    /// x: [B, ...] with per-sample element count equal to input_size().
    ForwardResult forward(CompGraph& graph, const ParamNodes& params, NodeId x) const;

    /// Convenience: constant parameters, fresh graph nodes.
    ForwardResult forward(CompGraph& graph, NodeId x) const;

    std::size_t parameter_count() const;

    bool identical(const Network& other) const;

private:
    ModelSpec spec_;
    std::vector<LayerParams> params_;
    std::vector<Shape> shapes_;
    std::size_t num_classes_ = 0;
    std::size_t embedding_dim_ = 0;
};

/// Per-sample layer output shapes; throws ShapeError on an incompatible stack.
std::vector<Shape> infer_shapes(const ModelSpec& spec);

/// Scaled-uniform weights with variance 2/fan_in, zero biases.
Network init_parameters(const ModelSpec& spec, std::uint64_t seed);

/// Index of the largest logit per row; ties resolve to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// Forward pass without gradient bookkeeping beyond a scratch graph.
struct Inference {
    Tensor embedding;  // [B, d]
    Tensor logits;     // [B, M]
};
Inference infer(const Network& net, const Tensor& x);
std::vector<std::size_t> predict(const Network& net, const Tensor& x);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace madlab
