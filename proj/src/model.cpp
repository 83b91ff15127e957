#include "madlab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "madlab/errors.hpp"
#include "madlab/rng.hpp"

namespace madlab {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::LeakyRelu: return "leaky_relu";
        case LayerKind::MaxPool: return "max_pool";
        case LayerKind::Flatten: return "flatten";
    }
    return "unknown";
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in = in;
    s.out = out;
    return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in = in_channels;
    s.out = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::leaky_relu(double slope) {
    LayerSpec s;
    s.kind = LayerKind::LeakyRelu;
    s.slope = slope;
    return s;
}

LayerSpec LayerSpec::max_pool(std::size_t window) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.pool = window;
    return s;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

ModelSpec mlp_spec(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t classes, double slope) {
    ModelSpec spec;
    spec.input_shape = {inputs};
    std::size_t prev = inputs;
    for (std::size_t h : hidden) {
        spec.layers.push_back(LayerSpec::dense(prev, h));
        spec.layers.push_back(LayerSpec::leaky_relu(slope));
        prev = h;
    }
    spec.embedding_index = spec.layers.empty() ? 0 : spec.layers.size() - 1;
    spec.layers.push_back(LayerSpec::dense(prev, classes));
    return spec;
}

ModelSpec small_convnet_spec(std::size_t side, std::size_t classes, double slope) {
    // activation after the pool
    ModelSpec spec;
    spec.input_shape = {1, side, side};
    spec.layers = {
        LayerSpec::conv2d(1, 16, 3, 1, 1),
        LayerSpec::max_pool(2),
        LayerSpec::leaky_relu(slope),
        LayerSpec::conv2d(16, 32, 3, 1, 1),
        LayerSpec::max_pool(2),
        LayerSpec::leaky_relu(slope),
        LayerSpec::flatten(),
    };
    const std::size_t s = side / 2 / 2;
    spec.layers.push_back(LayerSpec::dense(32 * s * s, 64));
    spec.layers.push_back(LayerSpec::leaky_relu(slope));
    spec.embedding_index = spec.layers.size() - 1;
    spec.layers.push_back(LayerSpec::dense(64, classes));
    return spec;
}

std::vector<NodeId> ParamNodes::all() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < weight.size(); ++i) {
        if (weight[i] != kNoNode) out.push_back(weight[i]);
        if (bias[i] != kNoNode) out.push_back(bias[i]);
    }
    return out;
}

std::vector<Shape> infer_shapes(const ModelSpec& spec) {
    if (spec.layers.empty()) throw ShapeError("model: no layers");
    if (spec.embedding_index >= spec.layers.size()) {
        throw ShapeError("model: embedding index " + std::to_string(spec.embedding_index) + " out of range");
    }
    std::vector<Shape> shapes;
    Shape cur = spec.input_shape;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const std::string where = "model: layer " + std::to_string(i) + " (" + to_string(l.kind) + ") ";
        switch (l.kind) {
            case LayerKind::Dense:
                if (cur.size() != 1 || cur[0] != l.in || l.out == 0) {
                    throw ShapeError(where + "expects [" + std::to_string(l.in) + "], got " + shape_str(cur));
                }
                cur = {l.out};
                break;
            case LayerKind::Conv2d: {
                if (cur.size() != 3 || cur[0] != l.in || l.out == 0 || l.stride == 0 || l.kernel == 0 ||
                    cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) {
                    throw ShapeError(where + "incompatible with input " + shape_str(cur));
                }
                const std::size_t h = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
                const std::size_t w = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
                cur = {l.out, h, w};
                break;
            }
            case LayerKind::MaxPool:
                if (cur.size() != 3 || l.pool == 0 || cur[1] < l.pool || cur[2] < l.pool) {
                    throw ShapeError(where + "incompatible with input " + shape_str(cur));
                }
                cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
                break;
            case LayerKind::Flatten: cur = {shape_numel(cur)}; break;
            case LayerKind::LeakyRelu:
                if (!(l.slope >= 0.0) || !std::isfinite(l.slope)) throw ShapeError(where + "invalid slope");
                break;
        }
        shapes.push_back(cur);
    }
    if (shapes.back().size() != 1) throw ShapeError("model: final layer must produce a logits vector");
    return shapes;
}

Network::Network(ModelSpec spec, std::vector<LayerParams> params)
    : spec_(std::move(spec)), params_(std::move(params)), shapes_(infer_shapes(spec_)) {
    if (params_.size() != spec_.layers.size()) {
        throw ShapeError("model: " + std::to_string(params_.size()) + " parameter sets for " +
                         std::to_string(spec_.layers.size()) + " layers");
    }
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& l = spec_.layers[i];
        Shape w, b;
        if (l.kind == LayerKind::Dense) {
            w = {l.out, l.in};
            b = {l.out};
        } else if (l.kind == LayerKind::Conv2d) {
            w = {l.out, l.in, l.kernel, l.kernel};
            b = {l.out};
        }
        const bool has = !w.empty();
        if ((has && (params_[i].weight.shape() != w || params_[i].bias.shape() != b)) || (!has && !params_[i].empty())) {
            throw ShapeError("model: layer " + std::to_string(i) + " parameters " +
                             shape_str(params_[i].weight.shape()) + "/" + shape_str(params_[i].bias.shape()) +
                             " do not match " + shape_str(w) + "/" + shape_str(b));
        }
    }
    num_classes_ = shapes_.back()[0];
    embedding_dim_ = shape_numel(shapes_[spec_.embedding_index]);
}

ParamNodes Network::bind(CompGraph& graph, bool trainable) const {
    ParamNodes p;
    for (const LayerParams& lp : params_) {
        if (lp.empty()) {
            p.weight.push_back(kNoNode);
            p.bias.push_back(kNoNode);
        } else if (trainable) {
            p.weight.push_back(graph.input(lp.weight));
            p.bias.push_back(graph.input(lp.bias));
        } else {
            p.weight.push_back(graph.constant(lp.weight));
            p.bias.push_back(graph.constant(lp.bias));
        }
    }
    return p;
}

ForwardResult Network::forward(CompGraph& graph, const ParamNodes& params, NodeId x) const {
    const Tensor& xv = graph.value(x);
    if (xv.rank() < 1 || xv.dim(0) == 0 || xv.size() / xv.dim(0) != input_size()) {
        throw ShapeError("forward: input " + shape_str(xv.shape()) + " does not match model input " +
                         shape_str(spec_.input_shape));
    }
    const std::size_t batch = xv.dim(0);
    Shape s{batch};
    s.insert(s.end(), spec_.input_shape.begin(), spec_.input_shape.end());
    NodeId h = xv.shape() == s ? x : graph.reshape(x, s);
    NodeId embedding = kNoNode;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& l = spec_.layers[i];
        switch (l.kind) {
            case LayerKind::Dense:
                h = graph.add_row_bias(graph.matmul(h, graph.transpose(params.weight[i])), params.bias[i]);
                break;
            case LayerKind::Conv2d:
                h = graph.add_channel_bias(graph.conv2d(h, params.weight[i], l.stride, l.padding), params.bias[i]);
                break;
            case LayerKind::LeakyRelu: h = graph.leaky_relu(h, l.slope); break;
            case LayerKind::MaxPool: h = graph.max_pool(h, l.pool); break;
            case LayerKind::Flatten: h = graph.flatten(h); break;
        }
        if (i == spec_.embedding_index) {
            embedding = graph.value(h).rank() == 2 ? h : graph.flatten(h);
        }
    }
    return {embedding, h};
}

ForwardResult Network::forward(CompGraph& graph, NodeId x) const { return forward(graph, bind(graph, false), x); }

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const LayerParams& p : params_) n += p.weight.size() + p.bias.size();
    return n;
}

bool Network::identical(const Network& other) const {
    if (!(spec_ == other.spec_) || params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].weight.identical(other.params_[i].weight) || !params_[i].bias.identical(other.params_[i].bias))
            return false;
    }
    return true;
}

Network init_parameters(const ModelSpec& spec, std::uint64_t seed) {
    infer_shapes(spec);
    Rng rng(derive_seed(seed, 0x1417));
    std::vector<LayerParams> params;
    for (const LayerSpec& l : spec.layers) {
        LayerParams p;
        if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) {
            const std::size_t fan_in = l.kind == LayerKind::Dense ? l.in : l.in * l.kernel * l.kernel;
            const Shape ws = l.kind == LayerKind::Dense ? Shape{l.out, l.in} : Shape{l.out, l.in, l.kernel, l.kernel};
            // uniform(-a, a) has variance a^2 / 3 = 2 / fan_in
            const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::vector<double> w(shape_numel(ws));
            for (double& v : w) v = rng.uniform(-a, a);
            p.weight = Tensor(ws, std::move(w));
            p.bias = Tensor::zeros({l.out});
        }
        params.push_back(std::move(p));
    }
    return Network(spec, std::move(params));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    const std::size_t m = logits.rank() == 0 ? 1 : logits.shape().back();
    const std::size_t rows = m ? logits.size() / m : 0;
    std::vector<std::size_t> out(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < m; ++j)
            if (logits[r * m + j] > logits[r * m + best]) best = j;
        out[r] = best;
    }
    return out;
}

Inference infer(const Network& net, const Tensor& x) {
    CompGraph graph;
    const NodeId xin = graph.constant(x);
    const ForwardResult fr = net.forward(graph, xin);
    return {graph.value(fr.embedding), graph.value(fr.logits)};
}

std::vector<std::size_t> predict(const Network& net, const Tensor& x) { return argmax_rows(infer(net, x).logits); }

// ---------------------------------------------------------------------------
// Checkpoint container. All integers little-endian.
//   "MADN" | u32 version | u32 input rank | u64 dims...
//   u32 layer count | per layer:
//     u32 kind | u64 in, out, kernel, stride, padding, pool | f64 slope
//     u32 tensor count | per tensor: u32 rank | u64 dims... | f64 data...
//   u64 embedding index | u64 num classes

namespace {

constexpr char kMagic[4] = {'M', 'A', 'D', 'N'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
    buf.append(reinterpret_cast<const char*>(bits.data()), sizeof(T));
}

void put_tensor(std::string& buf, const Tensor& t) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(buf, d);
    for (double v : t.data()) put<double>(buf, v);
}

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    template <class T>
    T get() {
        if (pos_ + sizeof(T) > data_.size()) {
            throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: truncated at byte " +
                                                                      std::to_string(pos_));
        }
        std::array<unsigned char, sizeof(T)> bits;
        std::memcpy(bits.data(), data_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    std::size_t remaining() const { return data_.size() - pos_; }

    Tensor get_tensor() {
        const std::uint32_t rank = get<std::uint32_t>();
        if (rank > 8) throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: implausible tensor rank");
        Shape s(rank);
        std::size_t n = 1;
        for (auto& d : s) {
            d = static_cast<std::size_t>(get<std::uint64_t>());
            if (d != 0 && n > remaining() / d) {
                throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: tensor larger than file");
            }
            n *= d;
        }
        if (n * sizeof(double) > remaining()) {
            throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: truncated tensor data");
        }
        std::vector<double> v(n);
        for (double& x : v) x = get<double>();
        return Tensor(std::move(s), std::move(v));
    }

private:
    std::string data_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
    std::string buf(kMagic, 4);
    put<std::uint32_t>(buf, kVersion);
    const ModelSpec& spec = net.spec();
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(spec.input_shape.size()));
    for (std::size_t d : spec.input_shape) put<std::uint64_t>(buf, d);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(spec.layers.size()));
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(l.kind));
        for (std::size_t v : {l.in, l.out, l.kernel, l.stride, l.padding, l.pool}) put<std::uint64_t>(buf, v);
        put<double>(buf, l.slope);
        const LayerParams& p = net.params()[i];
        if (p.empty()) {
            put<std::uint32_t>(buf, 0);
        } else {
            put<std::uint32_t>(buf, 2);
            put_tensor(buf, p.weight);
            put_tensor(buf, p.bias);
        }
    }
    put<std::uint64_t>(buf, spec.embedding_index);
    put<std::uint64_t>(buf, net.num_classes());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: write failed for " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot open " + path.string());
    Reader r(std::string(std::istreambuf_iterator<char>(in), {}));

    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: bad magic in " + path.string());
    }
    const std::uint32_t version = r.get<std::uint32_t>();
    if (version != kVersion) {
        throw CheckpointError(CheckpointError::Kind::Version,
                              "checkpoint: unsupported version " + std::to_string(version) + " (expected 1)");
    }
    ModelSpec spec;
    const std::uint32_t in_rank = r.get<std::uint32_t>();
    if (in_rank > 8) throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: implausible input rank");
    spec.input_shape.resize(in_rank);
    for (auto& d : spec.input_shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::uint32_t nlayers = r.get<std::uint32_t>();
    if (nlayers > r.remaining()) throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: bad layer count");
    std::vector<LayerParams> params;
    for (std::uint32_t i = 0; i < nlayers; ++i) {
        LayerSpec l;
        const std::uint32_t kind = r.get<std::uint32_t>();
        if (kind < 1 || kind > 5) {
            throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: unknown layer kind " +
                                                                      std::to_string(kind));
        }
        l.kind = static_cast<LayerKind>(kind);
        for (std::size_t* f : {&l.in, &l.out, &l.kernel, &l.stride, &l.padding, &l.pool})
            *f = static_cast<std::size_t>(r.get<std::uint64_t>());
        l.slope = r.get<double>();
        spec.layers.push_back(l);
        LayerParams p;
        const std::uint32_t ntensors = r.get<std::uint32_t>();
        if (ntensors == 2) {
            p.weight = r.get_tensor();
            p.bias = r.get_tensor();
        } else if (ntensors != 0) {
            throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: bad tensor count");
        }
        params.push_back(std::move(p));
    }
    spec.embedding_index = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t classes = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (r.remaining() != 0) {
        throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: trailing bytes in " + path.string());
    }
    try {
        Network net(std::move(spec), std::move(params));
        if (net.num_classes() != classes) {
            throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                                  "checkpoint: header says " + std::to_string(classes) + " classes, layers produce " +
                                      std::to_string(net.num_classes()));
        }
        return net;
    } catch (const ShapeError& e) {
        throw CheckpointError(CheckpointError::Kind::ShapeMismatch, std::string("checkpoint: ") + e.what());
    }
}

}  // namespace madlab
