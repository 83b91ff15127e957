#include "madlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "madlab/errors.hpp"

namespace madlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Idx = Eigen::Index;

[[noreturn]] void shape_fail(OpTag op, const std::string& detail) {
    throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
    std::vector<double> out(a.size());
    const double* p = a.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(p[i]);
    return Tensor(a.shape(), std::move(out));
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
    std::vector<double> out(a.size());
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
    return Tensor(a.shape(), std::move(out));
}

Tensor transpose2d(const Tensor& a) {
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    const double* p = a.ptr();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = p[i * c + j];
    return Tensor(Shape{c, r}, std::move(out));
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// cols: [C*kh*kw, B*Ho*Wo], column index = b*Ho*Wo + oh*Wo + ow.
std::vector<double> im2col(const double* x, std::size_t B, std::size_t C, const ConvGeometry& g, std::size_t Ho,
                           std::size_t Wo) {
    const std::size_t H = g.in_h, W = g.in_w, kh = g.kernel_h, kw = g.kernel_w;
    const std::size_t ncols = B * Ho * Wo;
    std::vector<double> cols(C * kh * kw * ncols, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                double* row = cols.data() + ((c * kh + ki) * kw + kj) * ncols;
                for (std::size_t b = 0; b < B; ++b) {
                    const double* xb = x + (b * C + c) * H * W;
                    for (std::size_t oh = 0; oh < Ho; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
                        if (ih < 0 || ih >= static_cast<long>(H)) continue;
                        double* dst = row + (b * Ho + oh) * Wo;
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
                            if (iw < 0 || iw >= static_cast<long>(W)) continue;
                            dst[ow] = xb[static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)];
                        }
                    }
                }
            }
    return cols;
}

std::vector<double> col2im(const double* cols, std::size_t B, std::size_t C, const ConvGeometry& g, std::size_t Ho,
                           std::size_t Wo) {
    const std::size_t H = g.in_h, W = g.in_w, kh = g.kernel_h, kw = g.kernel_w;
    const std::size_t ncols = B * Ho * Wo;
    std::vector<double> x(B * C * H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* row = cols + ((c * kh + ki) * kw + kj) * ncols;
                for (std::size_t b = 0; b < B; ++b) {
                    double* xb = x.data() + (b * C + c) * H * W;
                    for (std::size_t oh = 0; oh < Ho; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
                        if (ih < 0 || ih >= static_cast<long>(H)) continue;
                        const double* src = row + (b * Ho + oh) * Wo;
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
                            if (iw < 0 || iw >= static_cast<long>(W)) continue;
                            xb[static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)] += src[ow];
                        }
                    }
                }
            }
    return x;
}

// [B, K, P] <-> [K, B*P]
std::vector<double> bkp_to_kbp(const double* src, std::size_t B, std::size_t K, std::size_t P) {
    std::vector<double> out(B * K * P);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            std::copy_n(src + (b * K + k) * P, P, out.data() + k * B * P + b * P);
    return out;
}

std::vector<double> kbp_to_bkp(const double* src, std::size_t B, std::size_t K, std::size_t P) {
    std::vector<double> out(B * K * P);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(src + k * B * P + b * P, P, out.data() + (b * K + k) * P);
    return out;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
    const std::size_t B = x.dim(0), C = x.dim(1), K = w.dim(0);
    const std::size_t Ho = conv_out(g.in_h, g.kernel_h, g.stride, g.padding);
    const std::size_t Wo = conv_out(g.in_w, g.kernel_w, g.stride, g.padding);
    const std::size_t P = Ho * Wo, CKK = C * g.kernel_h * g.kernel_w;
    const std::vector<double> cols = im2col(x.ptr(), B, C, g, Ho, Wo);
    std::vector<double> y(K * B * P);
    Eigen::Map<const RowMat> mw(w.ptr(), static_cast<Idx>(K), static_cast<Idx>(CKK));
    Eigen::Map<const RowMat> mc(cols.data(), static_cast<Idx>(CKK), static_cast<Idx>(B * P));
    Eigen::Map<RowMat> my(y.data(), static_cast<Idx>(K), static_cast<Idx>(B * P));
    my.noalias() = mw * mc;
    return Tensor(Shape{B, K, Ho, Wo}, kbp_to_bkp(y.data(), B, K, P));
}

Tensor conv2d_input_grad_kernel(const Tensor& gy, const Tensor& w, const ConvGeometry& g) {
    const std::size_t B = gy.dim(0), K = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    const std::size_t C = w.dim(1), P = Ho * Wo, CKK = C * g.kernel_h * g.kernel_w;
    const std::vector<double> gk = bkp_to_kbp(gy.ptr(), B, K, P);
    std::vector<double> cols(CKK * B * P);
    Eigen::Map<const RowMat> mw(w.ptr(), static_cast<Idx>(K), static_cast<Idx>(CKK));
    Eigen::Map<const RowMat> mg(gk.data(), static_cast<Idx>(K), static_cast<Idx>(B * P));
    Eigen::Map<RowMat> mc(cols.data(), static_cast<Idx>(CKK), static_cast<Idx>(B * P));
    mc.noalias() = mw.transpose() * mg;
    return Tensor(Shape{B, C, g.in_h, g.in_w}, col2im(cols.data(), B, C, g, Ho, Wo));
}

Tensor conv2d_weight_grad_kernel(const Tensor& x, const Tensor& gy, const ConvGeometry& g) {
    const std::size_t B = x.dim(0), C = x.dim(1), K = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    const std::size_t P = Ho * Wo, CKK = C * g.kernel_h * g.kernel_w;
    const std::vector<double> cols = im2col(x.ptr(), B, C, g, Ho, Wo);
    const std::vector<double> gk = bkp_to_kbp(gy.ptr(), B, K, P);
    std::vector<double> dw(K * CKK);
    Eigen::Map<const RowMat> mg(gk.data(), static_cast<Idx>(K), static_cast<Idx>(B * P));
    Eigen::Map<const RowMat> mc(cols.data(), static_cast<Idx>(CKK), static_cast<Idx>(B * P));
    Eigen::Map<RowMat> mw(dw.data(), static_cast<Idx>(K), static_cast<Idx>(CKK));
    mw.noalias() = mg * mc.transpose();
    return Tensor(Shape{K, C, g.kernel_h, g.kernel_w}, std::move(dw));
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

Tensor softmax_rows(const Tensor& a, bool log_space) {
    const std::size_t n = last_dim(a);
    const std::size_t rows = n ? a.size() / n : 0;
    std::vector<double> out(a.size());
    const double* p = a.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = p + r * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = log_space ? row[j] - lse : std::exp(row[j] - lse);
        }
    }
    return Tensor(a.shape(), std::move(out));
}

}  // namespace

std::string_view op_name(OpTag op) {
    switch (op) {
        case OpTag::Input: return "input";
        case OpTag::Constant: return "constant";
        case OpTag::Add: return "add";
        case OpTag::Sub: return "sub";
        case OpTag::Mul: return "mul";
        case OpTag::Div: return "div";
        case OpTag::Neg: return "neg";
        case OpTag::Scale: return "scale";
        case OpTag::Exp: return "exp";
        case OpTag::Log: return "log";
        case OpTag::Sqrt: return "sqrt";
        case OpTag::SafeRecip: return "safe_recip";
        case OpTag::ClampMin: return "clamp_min";
        case OpTag::LeakyRelu: return "leaky_relu";
        case OpTag::Matmul: return "matmul";
        case OpTag::Transpose: return "transpose";
        case OpTag::Conv2d: return "conv2d";
        case OpTag::Conv2dInputGrad: return "conv2d_input_grad";
        case OpTag::Conv2dWeightGrad: return "conv2d_weight_grad";
        case OpTag::MaxPool: return "max_pool";
        case OpTag::Gather: return "gather";
        case OpTag::ScatterAdd: return "scatter_add";
        case OpTag::Expand: return "expand";
        case OpTag::ReduceExpand: return "reduce_expand";
        case OpTag::Sum: return "sum";
        case OpTag::Mean: return "mean";
        case OpTag::Dot: return "dot";
        case OpTag::L2Norm: return "l2_norm";
        case OpTag::Softmax: return "softmax";
        case OpTag::LogSoftmax: return "log_softmax";
        case OpTag::Reshape: return "reshape";
        case OpTag::Flatten: return "flatten";
    }
    return "unknown";
}

void CompGraph::check(NodeId id) const {
    if (id >= nodes_.size()) throw InvalidArgument("graph: unknown node id " + std::to_string(id));
}

NodeId CompGraph::push(OpTag op, std::vector<NodeId> parents, Tensor value, OpAttrs attrs) {
    bool rg = op == OpTag::Input;
    for (NodeId p : parents) rg = rg || nodes_[p].requires_grad;
    nodes_.push_back(Node{op, std::move(parents), std::move(value), std::move(attrs), rg});
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId CompGraph::input(Tensor value) { return push(OpTag::Input, {}, std::move(value)); }

NodeId CompGraph::constant(Tensor value) { return push(OpTag::Constant, {}, std::move(value)); }

NodeId CompGraph::binary_same_shape(OpTag op, NodeId a, NodeId b) {
    check(a);
    check(b);
    if (shape_of(a) != shape_of(b)) {
        shape_fail(op, "operand shapes " + shape_str(shape_of(a)) + " and " + shape_str(shape_of(b)) + " differ");
    }
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    Tensor out;
    switch (op) {
        case OpTag::Add: out = map_binary(va, vb, [](double x, double y) { return x + y; }); break;
        case OpTag::Sub: out = map_binary(va, vb, [](double x, double y) { return x - y; }); break;
        case OpTag::Mul: out = map_binary(va, vb, [](double x, double y) { return x * y; }); break;
        case OpTag::Div: out = map_binary(va, vb, [](double x, double y) { return x / y; }); break;
        default: shape_fail(op, "not a binary elementwise op");
    }
    return push(op, {a, b}, std::move(out));
}

NodeId CompGraph::add(NodeId a, NodeId b) { return binary_same_shape(OpTag::Add, a, b); }
NodeId CompGraph::sub(NodeId a, NodeId b) { return binary_same_shape(OpTag::Sub, a, b); }
NodeId CompGraph::mul(NodeId a, NodeId b) { return binary_same_shape(OpTag::Mul, a, b); }
NodeId CompGraph::div(NodeId a, NodeId b) { return binary_same_shape(OpTag::Div, a, b); }

NodeId CompGraph::neg(NodeId a) {
    check(a);
    return push(OpTag::Neg, {a}, map_unary(nodes_[a].value, [](double x) { return -x; }));
}

NodeId CompGraph::scale(NodeId a, double factor) {
    check(a);
    OpAttrs at;
    at.scalar = factor;
    return push(OpTag::Scale, {a}, map_unary(nodes_[a].value, [factor](double x) { return x * factor; }), at);
}

NodeId CompGraph::exp(NodeId a) {
    check(a);
    return push(OpTag::Exp, {a}, map_unary(nodes_[a].value, [](double x) { return std::exp(x); }));
}

NodeId CompGraph::log(NodeId a) {
    check(a);
    return push(OpTag::Log, {a}, map_unary(nodes_[a].value, [](double x) { return std::log(x); }));
}

NodeId CompGraph::sqrt(NodeId a) {
    check(a);
    return push(OpTag::Sqrt, {a}, map_unary(nodes_[a].value, [](double x) { return std::sqrt(x); }));
}

NodeId CompGraph::safe_recip(NodeId a) {
    check(a);
    return push(OpTag::SafeRecip, {a}, map_unary(nodes_[a].value, [](double x) { return x > 0.0 ? 1.0 / x : 0.0; }));
}

NodeId CompGraph::clamp_min(NodeId a, double floor) {
    check(a);
    OpAttrs at;
    at.scalar = floor;
    return push(OpTag::ClampMin, {a}, map_unary(nodes_[a].value, [floor](double x) { return x > floor ? x : floor; }),
                at);
}

NodeId CompGraph::leaky_relu(NodeId a, double slope) {
    check(a);
    OpAttrs at;
    at.scalar = slope;
    return push(OpTag::LeakyRelu, {a},
                map_unary(nodes_[a].value, [slope](double x) { return x >= 0.0 ? x : slope * x; }), at);
}

NodeId CompGraph::matmul(NodeId a, NodeId b) {
    check(a);
    check(b);
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
        shape_fail(OpTag::Matmul, "incompatible shapes " + shape_str(va.shape()) + " and " + shape_str(vb.shape()));
    }
    return push(OpTag::Matmul, {a, b}, madlab::matmul(va, vb));
}

NodeId CompGraph::transpose(NodeId a) {
    check(a);
    if (nodes_[a].op == OpTag::Transpose) return nodes_[a].parents[0];
    if (nodes_[a].value.rank() != 2) shape_fail(OpTag::Transpose, "expects rank 2, got " + shape_str(shape_of(a)));
    return push(OpTag::Transpose, {a}, transpose2d(nodes_[a].value));
}

NodeId CompGraph::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding) {
    check(x);
    check(w);
    const Tensor& vx = nodes_[x].value;
    const Tensor& vw = nodes_[w].value;
    if (vx.rank() != 4 || vw.rank() != 4 || vx.dim(1) != vw.dim(1) || stride == 0) {
        shape_fail(OpTag::Conv2d, "input " + shape_str(vx.shape()) + " incompatible with kernel " +
                                      shape_str(vw.shape()));
    }
    ConvGeometry g{stride, padding, vx.dim(2), vx.dim(3), vw.dim(2), vw.dim(3)};
    if (g.in_h + 2 * padding < g.kernel_h || g.in_w + 2 * padding < g.kernel_w) {
        shape_fail(OpTag::Conv2d, "kernel " + shape_str(vw.shape()) + " larger than padded input " +
                                      shape_str(vx.shape()));
    }
    OpAttrs at;
    at.conv = g;
    return push(OpTag::Conv2d, {x, w}, conv2d_forward(vx, vw, g), at);
}

NodeId CompGraph::conv2d_input_grad(NodeId g, NodeId w, const ConvGeometry& geom) {
    check(g);
    check(w);
    const Tensor& vg = nodes_[g].value;
    const Tensor& vw = nodes_[w].value;
    if (vg.rank() != 4 || vw.rank() != 4 || vg.dim(1) != vw.dim(0) ||
        vg.dim(2) != conv_out(geom.in_h, geom.kernel_h, geom.stride, geom.padding) ||
        vg.dim(3) != conv_out(geom.in_w, geom.kernel_w, geom.stride, geom.padding)) {
        shape_fail(OpTag::Conv2dInputGrad, "gradient " + shape_str(vg.shape()) + " incompatible with kernel " +
                                               shape_str(vw.shape()));
    }
    OpAttrs at;
    at.conv = geom;
    return push(OpTag::Conv2dInputGrad, {g, w}, conv2d_input_grad_kernel(vg, vw, geom), at);
}

NodeId CompGraph::conv2d_weight_grad(NodeId x, NodeId g, const ConvGeometry& geom) {
    check(x);
    check(g);
    const Tensor& vx = nodes_[x].value;
    const Tensor& vg = nodes_[g].value;
    if (vx.rank() != 4 || vg.rank() != 4 || vx.dim(0) != vg.dim(0) || vx.dim(2) != geom.in_h ||
        vx.dim(3) != geom.in_w) {
        shape_fail(OpTag::Conv2dWeightGrad, "input " + shape_str(vx.shape()) + " incompatible with gradient " +
                                                shape_str(vg.shape()));
    }
    OpAttrs at;
    at.conv = geom;
    return push(OpTag::Conv2dWeightGrad, {x, g}, conv2d_weight_grad_kernel(vx, vg, geom), at);
}

NodeId CompGraph::max_pool(NodeId x, std::size_t window) {
    check(x);
    const Tensor& vx = nodes_[x].value;
    if (vx.rank() != 4 || window == 0 || vx.dim(2) < window || vx.dim(3) < window) {
        shape_fail(OpTag::MaxPool, "window " + std::to_string(window) + " on input " + shape_str(vx.shape()));
    }
    const std::size_t B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    const std::size_t Ho = H / window, Wo = W / window;
    auto idx = std::make_shared<std::vector<std::uint32_t>>(B * C * Ho * Wo);
    std::vector<double> out(idx->size());
    const double* p = vx.ptr();
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j, ++o) {
                std::size_t best = bc * H * W + (i * window) * W + j * window;
                for (std::size_t di = 0; di < window; ++di)
                    for (std::size_t dj = 0; dj < window; ++dj) {
                        const std::size_t k = bc * H * W + (i * window + di) * W + j * window + dj;
                        if (p[k] > p[best]) best = k;  // first maximum wins ties
                    }
                (*idx)[o] = static_cast<std::uint32_t>(best);
                out[o] = p[best];
            }
    OpAttrs at;
    at.pool = window;
    at.index = std::move(idx);
    return push(OpTag::MaxPool, {x}, Tensor(Shape{B, C, Ho, Wo}, std::move(out)), at);
}

NodeId CompGraph::gather(NodeId x, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
    check(x);
    const Tensor& vx = nodes_[x].value;
    if (!index || index->size() != shape_numel(out_shape)) {
        shape_fail(OpTag::Gather, "index length does not match output shape " + shape_str(out_shape));
    }
    std::vector<double> out(index->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint32_t k = (*index)[i];
        if (k >= vx.size()) shape_fail(OpTag::Gather, "index " + std::to_string(k) + " out of range");
        out[i] = vx[k];
    }
    OpAttrs at;
    at.index = std::move(index);
    at.shape = out_shape;
    return push(OpTag::Gather, {x}, Tensor(std::move(out_shape), std::move(out)), at);
}

NodeId CompGraph::scatter_add(NodeId g, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
    check(g);
    const Tensor& vg = nodes_[g].value;
    if (!index || index->size() != vg.size()) {
        shape_fail(OpTag::ScatterAdd, "index length does not match input " + shape_str(vg.shape()));
    }
    std::vector<double> out(shape_numel(out_shape), 0.0);
    for (std::size_t i = 0; i < index->size(); ++i) {
        const std::uint32_t k = (*index)[i];
        if (k >= out.size()) shape_fail(OpTag::ScatterAdd, "index " + std::to_string(k) + " out of range");
        out[k] += vg[i];
    }
    OpAttrs at;
    at.index = std::move(index);
    at.shape = out_shape;
    return push(OpTag::ScatterAdd, {g}, Tensor(std::move(out_shape), std::move(out)), at);
}

NodeId CompGraph::expand(NodeId x, std::size_t outer, std::size_t inner, Shape out_shape) {
    check(x);
    const Tensor& vx = nodes_[x].value;
    const std::size_t C = vx.size();
    if (outer * C * inner != shape_numel(out_shape)) {
        shape_fail(OpTag::Expand, "cannot expand " + shape_str(vx.shape()) + " to " + shape_str(out_shape));
    }
    std::vector<double> out(outer * C * inner);
    const double* p = vx.ptr();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c) std::fill_n(out.data() + (o * C + c) * inner, inner, p[c]);
    OpAttrs at;
    at.outer = outer;
    at.inner = inner;
    at.shape = out_shape;
    return push(OpTag::Expand, {x}, Tensor(std::move(out_shape), std::move(out)), at);
}

NodeId CompGraph::reduce_expand(NodeId g, std::size_t outer, std::size_t inner, Shape out_shape) {
    check(g);
    const Tensor& vg = nodes_[g].value;
    const std::size_t C = shape_numel(out_shape);
    if (outer * C * inner != vg.size()) {
        shape_fail(OpTag::ReduceExpand, "cannot reduce " + shape_str(vg.shape()) + " to " + shape_str(out_shape));
    }
    std::vector<double> out(C, 0.0);
    const double* p = vg.ptr();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c) {
            const double* q = p + (o * C + c) * inner;
            double s = 0.0;
            for (std::size_t i = 0; i < inner; ++i) s += q[i];
            out[c] += s;
        }
    OpAttrs at;
    at.outer = outer;
    at.inner = inner;
    at.shape = out_shape;
    return push(OpTag::ReduceExpand, {g}, Tensor(std::move(out_shape), std::move(out)), at);
}

NodeId CompGraph::sum(NodeId a) {
    check(a);
    double s = 0.0;
    for (double v : nodes_[a].value.data()) s += v;
    return push(OpTag::Sum, {a}, Tensor::scalar(s));
}

NodeId CompGraph::mean(NodeId a) {
    check(a);
    const Tensor& v = nodes_[a].value;
    if (v.size() == 0) shape_fail(OpTag::Mean, "empty tensor");
    double s = 0.0;
    for (double x : v.data()) s += x;
    return push(OpTag::Mean, {a}, Tensor::scalar(s / static_cast<double>(v.size())));
}

NodeId CompGraph::dot(NodeId a, NodeId b) {
    check(a);
    check(b);
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    if (va.size() != vb.size()) {
        shape_fail(OpTag::Dot, "operand shapes " + shape_str(va.shape()) + " and " + shape_str(vb.shape()) + " differ");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * vb[i];
    return push(OpTag::Dot, {a, b}, Tensor::scalar(s));
}

NodeId CompGraph::l2_norm(NodeId a) {
    check(a);
    return push(OpTag::L2Norm, {a}, Tensor::scalar(frobenius_norm(nodes_[a].value)));
}

NodeId CompGraph::softmax(NodeId a) {
    check(a);
    if (nodes_[a].value.rank() < 1 || nodes_[a].value.rank() > 2) {
        shape_fail(OpTag::Softmax, "expects rank 1 or 2, got " + shape_str(shape_of(a)));
    }
    return push(OpTag::Softmax, {a}, softmax_rows(nodes_[a].value, false));
}

NodeId CompGraph::log_softmax(NodeId a) {
    check(a);
    if (nodes_[a].value.rank() < 1 || nodes_[a].value.rank() > 2) {
        shape_fail(OpTag::LogSoftmax, "expects rank 1 or 2, got " + shape_str(shape_of(a)));
    }
    return push(OpTag::LogSoftmax, {a}, softmax_rows(nodes_[a].value, true));
}

NodeId CompGraph::reshape(NodeId a, Shape shape) {
    check(a);
    if (shape_numel(shape) != nodes_[a].value.size()) {
        shape_fail(OpTag::Reshape, "cannot view " + shape_str(shape_of(a)) + " as " + shape_str(shape));
    }
    OpAttrs at;
    at.shape = shape;
    return push(OpTag::Reshape, {a}, nodes_[a].value.reshaped(std::move(shape)), at);
}

NodeId CompGraph::flatten(NodeId a) {
    check(a);
    const Tensor& v = nodes_[a].value;
    if (v.rank() < 1) shape_fail(OpTag::Flatten, "scalar input");
    const std::size_t b = v.dim(0);
    return push(OpTag::Flatten, {a}, v.reshaped(Shape{b, b ? v.size() / b : 0}));
}

NodeId CompGraph::forward_op(OpTag op, std::span<const NodeId> in, const OpAttrs& at) {
    auto need = [&](std::size_t n) {
        if (in.size() != n) {
            shape_fail(op, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
        }
    };
    switch (op) {
        case OpTag::Add: need(2); return add(in[0], in[1]);
        case OpTag::Sub: need(2); return sub(in[0], in[1]);
        case OpTag::Mul: need(2); return mul(in[0], in[1]);
        case OpTag::Div: need(2); return div(in[0], in[1]);
        case OpTag::Neg: need(1); return neg(in[0]);
        case OpTag::Scale: need(1); return scale(in[0], at.scalar);
        case OpTag::Exp: need(1); return exp(in[0]);
        case OpTag::Log: need(1); return log(in[0]);
        case OpTag::Sqrt: need(1); return sqrt(in[0]);
        case OpTag::SafeRecip: need(1); return safe_recip(in[0]);
        case OpTag::ClampMin: need(1); return clamp_min(in[0], at.scalar);
        case OpTag::LeakyRelu: need(1); return leaky_relu(in[0], at.scalar);
        case OpTag::Matmul: need(2); return matmul(in[0], in[1]);
        case OpTag::Transpose: need(1); return transpose(in[0]);
        case OpTag::Conv2d: need(2); return conv2d(in[0], in[1], at.conv.stride, at.conv.padding);
        case OpTag::Conv2dInputGrad: need(2); return conv2d_input_grad(in[0], in[1], at.conv);
        case OpTag::Conv2dWeightGrad: need(2); return conv2d_weight_grad(in[0], in[1], at.conv);
        case OpTag::MaxPool: need(1); return max_pool(in[0], at.pool);
        case OpTag::Gather: need(1); return gather(in[0], at.index, at.shape);
        case OpTag::ScatterAdd: need(1); return scatter_add(in[0], at.index, at.shape);
        case OpTag::Expand: need(1); return expand(in[0], at.outer, at.inner, at.shape);
        case OpTag::ReduceExpand: need(1); return reduce_expand(in[0], at.outer, at.inner, at.shape);
        case OpTag::Sum: need(1); return sum(in[0]);
        case OpTag::Mean: need(1); return mean(in[0]);
        case OpTag::Dot: need(2); return dot(in[0], in[1]);
        case OpTag::L2Norm: need(1); return l2_norm(in[0]);
        case OpTag::Softmax: need(1); return softmax(in[0]);
        case OpTag::LogSoftmax: need(1); return log_softmax(in[0]);
        case OpTag::Reshape: need(1); return reshape(in[0], at.shape);
        case OpTag::Flatten: need(1); return flatten(in[0]);
        case OpTag::Input:
        case OpTag::Constant: break;
    }
    shape_fail(op, "leaf ops are created with input() or constant()");
}

NodeId CompGraph::add_row_bias(NodeId x, NodeId bias) {
    const Shape s = shape_of(x);
    if (s.size() != 2 || nodes_[bias].value.size() != s[1]) {
        shape_fail(OpTag::Add, "bias " + shape_str(shape_of(bias)) + " does not match rows of " + shape_str(s));
    }
    return add(x, expand(bias, s[0], 1, s));
}

NodeId CompGraph::add_channel_bias(NodeId x, NodeId bias) {
    const Shape s = shape_of(x);
    if (s.size() != 4 || nodes_[bias].value.size() != s[1]) {
        shape_fail(OpTag::Add, "bias " + shape_str(shape_of(bias)) + " does not match channels of " + shape_str(s));
    }
    return add(x, expand(bias, s[0], s[2] * s[3], s));
}

NodeId CompGraph::row_sum(NodeId x) {
    const Tensor& v = nodes_[x].value;
    const std::size_t n = last_dim(v);
    const std::size_t rows = n ? v.size() / n : 0;
    return reduce_expand(x, 1, n, Shape{rows});
}

NodeId CompGraph::broadcast_rows(NodeId v, std::size_t n) {
    const std::size_t rows = nodes_[v].value.size();
    return expand(v, 1, n, Shape{rows, n});
}

NodeId CompGraph::row_norms(NodeId x) { return sqrt(row_sum(mul(x, x))); }

NodeId CompGraph::select_rows(NodeId x, std::span<const std::size_t> rows) {
    const Shape s = shape_of(x);
    if (s.empty()) shape_fail(OpTag::Gather, "cannot select rows of a scalar");
    const std::size_t width = s[0] ? nodes_[x].value.size() / s[0] : 0;
    auto idx = std::make_shared<std::vector<std::uint32_t>>();
    idx->reserve(rows.size() * width);
    for (std::size_t r : rows) {
        if (r >= s[0]) shape_fail(OpTag::Gather, "row " + std::to_string(r) + " out of range for " + shape_str(s));
        for (std::size_t j = 0; j < width; ++j) idx->push_back(static_cast<std::uint32_t>(r * width + j));
    }
    Shape out = s;
    out[0] = rows.size();
    return gather(x, std::move(idx), std::move(out));
}

NodeId CompGraph::mask_of(NodeId id) {
    if (auto it = mask_cache_.find(id); it != mask_cache_.end()) return it->second;
    const Node& n = nodes_[id];
    const Tensor& x = nodes_[n.parents[0]].value;
    Tensor m;
    if (n.op == OpTag::LeakyRelu) {
        const double slope = n.attrs.scalar;
        // derivative at exactly 0 is taken from the positive side
        m = map_unary(x, [slope](double v) { return v >= 0.0 ? 1.0 : slope; });
    } else {
        const double floor = n.attrs.scalar;
        m = map_unary(x, [floor](double v) { return v > floor ? 1.0 : 0.0; });
    }
    const NodeId c = constant(std::move(m));
    mask_cache_.emplace(id, c);
    return c;
}

NodeId CompGraph::zeros_like(NodeId id) { return constant(Tensor::zeros(shape_of(id))); }

// Gradient contribution of node `self` to its parent number `which`, given the
// incoming gradient node `g`. Built only from differentiable graph ops.
NodeId CompGraph::backward_rule(NodeId self, std::size_t which, NodeId g) {
    const OpTag op = nodes_[self].op;
    const std::vector<NodeId> par = nodes_[self].parents;
    const OpAttrs at = nodes_[self].attrs;
    const NodeId a = par.empty() ? kNoNode : par[0];
    const NodeId b = par.size() > 1 ? par[1] : kNoNode;
    switch (op) {
        case OpTag::Add: return g;
        case OpTag::Sub: return which == 0 ? g : neg(g);
        case OpTag::Mul: return mul(g, which == 0 ? b : a);
        case OpTag::Div: return which == 0 ? div(g, b) : neg(div(mul(g, self), b));
        case OpTag::Neg: return neg(g);
        case OpTag::Scale: return scale(g, at.scalar);
        case OpTag::Exp: return mul(g, self);
        case OpTag::Log: return div(g, a);
        case OpTag::Sqrt: return mul(g, scale(safe_recip(self), 0.5));
        case OpTag::SafeRecip: return mul(g, neg(mul(self, self)));
        case OpTag::ClampMin:
        case OpTag::LeakyRelu: return mul(g, mask_of(self));
        case OpTag::Matmul: return which == 0 ? matmul(g, transpose(b)) : matmul(transpose(a), g);
        case OpTag::Transpose: return transpose(g);
        case OpTag::Conv2d:
            return which == 0 ? conv2d_input_grad(g, b, at.conv) : conv2d_weight_grad(a, g, at.conv);
        case OpTag::Conv2dInputGrad:
            return which == 0 ? conv2d(g, b, at.conv.stride, at.conv.padding) : conv2d_weight_grad(g, a, at.conv);
        case OpTag::Conv2dWeightGrad:
            return which == 0 ? conv2d_input_grad(b, g, at.conv) : conv2d(a, g, at.conv.stride, at.conv.padding);
        case OpTag::MaxPool:
        case OpTag::Gather: return scatter_add(g, at.index, shape_of(a));
        case OpTag::ScatterAdd: return gather(g, at.index, shape_of(a));
        case OpTag::Expand: return reduce_expand(g, at.outer, at.inner, shape_of(a));
        case OpTag::ReduceExpand: return expand(g, at.outer, at.inner, shape_of(a));
        case OpTag::Sum: return expand(g, 1, nodes_[a].value.size(), shape_of(a));
        case OpTag::Mean:
            return scale(expand(g, 1, nodes_[a].value.size(), shape_of(a)),
                         1.0 / static_cast<double>(nodes_[a].value.size()));
        case OpTag::Dot: {
            const NodeId other = which == 0 ? b : a;
            const NodeId gb = expand(g, 1, nodes_[other].value.size(), shape_of(other));
            return reshape(mul(gb, other), shape_of(which == 0 ? a : b));
        }
        case OpTag::L2Norm: return mul(expand(mul(g, safe_recip(self)), 1, nodes_[a].value.size(), shape_of(a)), a);
        case OpTag::Softmax: {
            const NodeId gs = mul(g, self);
            const std::size_t n = last_dim(nodes_[self].value);
            return sub(gs, mul(self, reshape(broadcast_rows(row_sum(gs), n), shape_of(self))));
        }
        case OpTag::LogSoftmax: {
            const std::size_t n = last_dim(nodes_[self].value);
            return sub(g, mul(exp(self), reshape(broadcast_rows(row_sum(g), n), shape_of(self))));
        }
        case OpTag::Reshape:
        case OpTag::Flatten: return reshape(g, shape_of(a));
        case OpTag::Input:
        case OpTag::Constant: break;
    }
    return kNoNode;
}

std::vector<NodeId> CompGraph::vjp(NodeId output, NodeId seed, std::span<const NodeId> wrt) {
    check(output);
    check(seed);
    if (shape_of(seed) != shape_of(output)) {
        throw ShapeError("vjp: seed shape " + shape_str(shape_of(seed)) + " does not match output " +
                         shape_str(shape_of(output)));
    }
    const std::size_t n = static_cast<std::size_t>(output) + 1;
    // Only nodes lying on a path from a `wrt` node to the output receive gradients.
    std::vector<char> depends(n, 0);
    for (NodeId w : wrt) {
        check(w);
        if (w < n) depends[w] = 1;
    }
    for (std::size_t k = 0; k < n; ++k) {
        if (depends[k]) continue;
        for (NodeId p : nodes_[k].parents)
            if (depends[p]) {
                depends[k] = 1;
                break;
            }
    }
    std::vector<NodeId> grads(n, kNoNode);
    grads[output] = seed;
    for (std::size_t k = n; k-- > 0;) {
        const NodeId g = grads[k];
        if (g == kNoNode || !depends[k]) continue;
        const std::size_t np = nodes_[k].parents.size();
        for (std::size_t i = 0; i < np; ++i) {
            const NodeId p = nodes_[k].parents[i];
            if (!depends[p]) continue;
            const NodeId c = backward_rule(static_cast<NodeId>(k), i, g);
            if (c == kNoNode) continue;
            grads[p] = grads[p] == kNoNode ? c : add(grads[p], c);
        }
    }
    std::vector<NodeId> out;
    out.reserve(wrt.size());
    for (NodeId w : wrt) out.push_back(w < n ? grads[w] : kNoNode);
    return out;
}

std::vector<NodeId> CompGraph::grad(NodeId output, std::span<const NodeId> wrt) {
    check(output);
    if (nodes_[output].value.size() != 1) {
        throw ShapeError("backward: output must be scalar, got shape " + shape_str(shape_of(output)));
    }
    const NodeId seed = constant(Tensor::full(shape_of(output), 1.0));
    return vjp(output, seed, wrt);
}

std::unordered_map<NodeId, Tensor> backward(CompGraph& graph, NodeId output) {
    std::vector<NodeId> wrt;
    for (NodeId k = 0; k <= output && k < graph.size(); ++k)
        if (graph.node(k).requires_grad) wrt.push_back(k);
    const std::vector<NodeId> g = graph.grad(output, wrt);
    std::unordered_map<NodeId, Tensor> out;
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        out.emplace(wrt[i], g[i] == kNoNode ? Tensor::zeros(graph.value(wrt[i]).shape()) : graph.value(g[i]));
    }
    return out;
}

Tensor jacobian(const std::function<NodeId(CompGraph&, NodeId)>& f, const Tensor& x) {
    CompGraph graph;
    const NodeId xin = graph.input(x);
    const NodeId y = f(graph, xin);
    const Tensor& yv = graph.value(y);
    const std::size_t m = yv.size(), n = x.size();
    std::vector<double> out(m * n, 0.0);
    const NodeId wrt[] = {xin};
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> e(m, 0.0);
        e[i] = 1.0;
        const NodeId seed = graph.constant(Tensor(yv.shape(), std::move(e)));
        const NodeId g = graph.vjp(y, seed, wrt)[0];
        if (g == kNoNode) continue;
        const Tensor& row = graph.value(g);
        std::copy(row.data().begin(), row.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    return Tensor(Shape{m, n}, std::move(out));
}

}  // namespace madlab
