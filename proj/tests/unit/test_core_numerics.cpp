#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <memory>

#include "madlab/errors.hpp"
#include "madlab/graph.hpp"
#include "madlab/model.hpp"
#include "madlab/training.hpp"
#include "oracles.hpp"

using namespace madlab;
using oracle::Vec;

namespace {

using Builder = std::function<NodeId(CompGraph&, const std::vector<NodeId>&)>;

struct OpCase {
    const char* name;
    std::vector<Shape> shapes;
    Builder build;
    double lo = -1.0, hi = 1.0;
    double kink = 0.0;  // inputs closer than 1e-4 to this value are redrawn (leaky relu / clamp)
    bool avoid_kink = false;
};

std::vector<Tensor> draw_inputs(const OpCase& c, Rng& rng) {
    std::vector<Tensor> out;
    for (const Shape& s : c.shapes) {
        Vec v(shape_numel(s));
        for (double& x : v) {
            do {
                x = rng.uniform(c.lo, c.hi);
            } while (c.avoid_kink && std::abs(x - c.kink) < 1e-4);
        }
        out.emplace_back(s, v);
    }
    return out;
}

// f = sum(op(inputs) * R)
struct Probe {
    const OpCase& c;
    Tensor R;
    NodeId build(CompGraph& g, const std::vector<NodeId>& in) const {
        const NodeId y = c.build(g, in);
        return g.sum(g.mul(y, g.constant(R)));
    }
};

Tensor output_of(const OpCase& c, const std::vector<Tensor>& inputs) {
    CompGraph g;
    std::vector<NodeId> in;
    for (const Tensor& t : inputs) in.push_back(g.input(t));
    return g.value(c.build(g, in));
}

double first_order(const Probe& p, const std::vector<Tensor>& inputs) {
    CompGraph g;
    std::vector<NodeId> in;
    for (const Tensor& t : inputs) in.push_back(g.input(t));
    return g.value(p.build(g, in)).item();
}

// h = sum_i sum(grad_i f * R2_i), evaluated through recorded gradients.
NodeId second_order_node(CompGraph& g, const Probe& p, const std::vector<NodeId>& in, const std::vector<Tensor>& R2) {
    const NodeId f = p.build(g, in);
    const auto grads = g.grad(f, in);
    NodeId h = g.constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (grads[i] == kNoNode) continue;
        h = g.add(h, g.sum(g.mul(grads[i], g.constant(R2[i]))));
    }
    return h;
}

std::vector<Tensor> with_entry(std::vector<Tensor> inputs, std::size_t which, std::size_t k, double delta) {
    Vec v = inputs[which].to_vector();
    v[k] += delta;
    inputs[which] = Tensor(inputs[which].shape(), v);
    return inputs;
}

void check_op(const OpCase& c, std::uint64_t seed) {
    Rng rng(seed);
    const std::vector<Tensor> inputs = draw_inputs(c, rng);
    const Tensor y = output_of(c, inputs);
    const Probe p{c, Tensor(y.shape(), oracle::random_vec(rng, y.size()))};
    std::vector<Tensor> R2;
    for (const Tensor& t : inputs) R2.emplace_back(t.shape(), oracle::random_vec(rng, t.size()));

    CompGraph g;
    std::vector<NodeId> in;
    for (const Tensor& t : inputs) in.push_back(g.input(t));
    const auto grads = g.grad(p.build(g, in), in);
    const NodeId h = second_order_node(g, p, in, R2);
    const auto hgrads = g.grad(h, in);

    constexpr double step = 1e-5;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            const double fd = (first_order(p, with_entry(inputs, i, k, step)) -
                               first_order(p, with_entry(inputs, i, k, -step))) / (2 * step);
            const double an = grads[i] == kNoNode ? 0.0 : g.value(grads[i])[k];
            INFO(c.name, " input ", i, " entry ", k, " analytic ", an, " fd ", fd);
            CHECK(oracle::rel_err(an, fd, 1e-6) <= 1e-5);

            auto h_at = [&](double d) {
                CompGraph g2;
                std::vector<NodeId> in2;
                for (const Tensor& t : with_entry(inputs, i, k, d)) in2.push_back(g2.input(t));
                return g2.value(second_order_node(g2, p, in2, R2)).item();
            };
            const double fd2 = (h_at(step) - h_at(-step)) / (2 * step);
            const double an2 = hgrads[i] == kNoNode ? 0.0 : g.value(hgrads[i])[k];
            INFO("second order: analytic ", an2, " fd ", fd2);
            CHECK(oracle::rel_err(an2, fd2, 1e-5) <= 1e-5);
        }
    }
}

std::shared_ptr<const std::vector<std::uint32_t>> idx(std::vector<std::uint32_t> v) {
    return std::make_shared<const std::vector<std::uint32_t>>(std::move(v));
}

std::vector<OpCase> op_cases() {
    ConvGeometry geo{1, 1, 5, 5, 3, 3};
    ConvGeometry geo2{2, 0, 5, 5, 3, 3};
    return {
        {"add", {{2, 3}, {2, 3}}, [](CompGraph& g, const auto& i) { return g.add(i[0], i[1]); }},
        {"sub", {{2, 3}, {2, 3}}, [](CompGraph& g, const auto& i) { return g.sub(i[0], i[1]); }},
        {"mul", {{2, 3}, {2, 3}}, [](CompGraph& g, const auto& i) { return g.mul(i[0], i[1]); }},
        {"div", {{4}, {4}}, [](CompGraph& g, const auto& i) { return g.div(i[0], i[1]); }, 0.5, 2.0},
        {"neg", {{3}}, [](CompGraph& g, const auto& i) { return g.neg(i[0]); }},
        {"scale", {{3}}, [](CompGraph& g, const auto& i) { return g.scale(i[0], 1.7); }},
        {"exp", {{4}}, [](CompGraph& g, const auto& i) { return g.exp(i[0]); }},
        {"log", {{4}}, [](CompGraph& g, const auto& i) { return g.log(i[0]); }, 0.5, 2.0},
        {"sqrt", {{4}}, [](CompGraph& g, const auto& i) { return g.sqrt(i[0]); }, 0.5, 2.0},
        {"safe_recip", {{4}}, [](CompGraph& g, const auto& i) { return g.safe_recip(i[0]); }, 0.5, 2.0},
        {"clamp_min", {{6}}, [](CompGraph& g, const auto& i) { return g.clamp_min(i[0], 0.1); }, -1, 1, 0.1, true},
        {"leaky_relu", {{2, 4}}, [](CompGraph& g, const auto& i) { return g.leaky_relu(i[0], 0.1); }, -1, 1, 0.0, true},
        {"matmul", {{3, 4}, {4, 2}}, [](CompGraph& g, const auto& i) { return g.matmul(i[0], i[1]); }},
        {"transpose", {{3, 4}}, [](CompGraph& g, const auto& i) { return g.transpose(i[0]); }},
        {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}}, [](CompGraph& g, const auto& i) { return g.conv2d(i[0], i[1], 1, 1); }},
        {"conv2d_stride2", {{1, 2, 5, 5}, {2, 2, 3, 3}}, [](CompGraph& g, const auto& i) { return g.conv2d(i[0], i[1], 2, 0); }},
        {"conv2d_input_grad", {{2, 3, 5, 5}, {3, 2, 3, 3}},
         [geo](CompGraph& g, const auto& i) { return g.conv2d_input_grad(i[0], i[1], geo); }},
        {"conv2d_weight_grad", {{2, 2, 5, 5}, {2, 3, 5, 5}},
         [geo](CompGraph& g, const auto& i) { return g.conv2d_weight_grad(i[0], i[1], geo); }},
        {"conv2d_weight_grad_stride2", {{1, 2, 5, 5}, {1, 2, 2, 2}},
         [geo2](CompGraph& g, const auto& i) { return g.conv2d_weight_grad(i[0], i[1], geo2); }},
        {"max_pool", {{2, 2, 4, 4}}, [](CompGraph& g, const auto& i) { return g.max_pool(i[0], 2); }},
        {"max_pool_odd", {{1, 1, 5, 5}}, [](CompGraph& g, const auto& i) { return g.max_pool(i[0], 2); }},
        {"gather", {{5}}, [](CompGraph& g, const auto& i) { return g.gather(i[0], idx({4, 0, 0, 2}), {2, 2}); }},
        {"scatter_add", {{4}}, [](CompGraph& g, const auto& i) { return g.scatter_add(i[0], idx({1, 1, 3, 0}), {5}); }},
        {"expand", {{3}}, [](CompGraph& g, const auto& i) { return g.expand(i[0], 2, 2, {2, 3, 2}); }},
        {"reduce_expand", {{2, 3, 2}}, [](CompGraph& g, const auto& i) { return g.reduce_expand(i[0], 2, 2, {3}); }},
        {"sum", {{2, 3}}, [](CompGraph& g, const auto& i) { return g.sum(i[0]); }},
        {"mean", {{2, 3}}, [](CompGraph& g, const auto& i) { return g.mean(i[0]); }},
        {"dot", {{5}, {5}}, [](CompGraph& g, const auto& i) { return g.dot(i[0], i[1]); }},
        {"l2_norm", {{5}}, [](CompGraph& g, const auto& i) { return g.l2_norm(i[0]); }},
        {"softmax", {{5}}, [](CompGraph& g, const auto& i) { return g.softmax(i[0]); }},
        {"softmax_rows", {{3, 4}}, [](CompGraph& g, const auto& i) { return g.softmax(i[0]); }},
        {"log_softmax", {{3, 4}}, [](CompGraph& g, const auto& i) { return g.log_softmax(i[0]); }},
        {"reshape", {{2, 3}}, [](CompGraph& g, const auto& i) { return g.reshape(i[0], {3, 2}); }},
        {"flatten", {{2, 2, 3}}, [](CompGraph& g, const auto& i) { return g.flatten(i[0]); }},
        {"add_row_bias", {{3, 4}, {4}}, [](CompGraph& g, const auto& i) { return g.add_row_bias(i[0], i[1]); }},
        {"add_channel_bias", {{2, 3, 2, 2}, {3}}, [](CompGraph& g, const auto& i) { return g.add_channel_bias(i[0], i[1]); }},
        {"row_norms", {{3, 4}}, [](CompGraph& g, const auto& i) { return g.row_norms(i[0]); }},
        {"row_sum", {{3, 4}}, [](CompGraph& g, const auto& i) { return g.row_sum(i[0]); }},
        {"broadcast_rows", {{3}}, [](CompGraph& g, const auto& i) { return g.broadcast_rows(i[0], 4); }},
        {"select_rows", {{4, 3}}, [](CompGraph& g, const auto& i) {
             const std::size_t rows[] = {3, 1, 1};
             return g.select_rows(i[0], rows);
         }},
    };
}

double sq(double v) { return v * v; }

}  // namespace

TEST_CASE("forward_op examples") {
    CompGraph g;
    const NodeId x = g.constant(Tensor::vector({-1.0, 2.0}));
    const Tensor y = g.value(g.leaky_relu(x, 0.1));
    CHECK(y[0] == doctest::Approx(-0.1).epsilon(1e-15));
    CHECK(y[1] == 2.0);

    const Tensor A({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(g.value(g.matmul(g.constant(Tensor::identity(2)), g.constant(A))).identical(A));

    const Tensor s = g.value(g.softmax(g.constant(Tensor::vector({0, 0, 0}))));
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const NodeId args[] = {g.constant(Tensor::vector({1, 2})), g.constant(Tensor::vector({3, 4}))};
    CHECK(g.value(g.forward_op(OpTag::Add, args)).identical(Tensor::vector({4, 6})));
}

TEST_CASE("shape mismatch names the op and the shapes") {
    CompGraph g;
    const NodeId a = g.constant(Tensor::zeros({2}));
    const NodeId b = g.constant(Tensor::zeros({3}));
    try {
        g.add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2]") != std::string::npos);
        CHECK(msg.find("[3]") != std::string::npos);
    }
    CHECK_THROWS_AS(g.matmul(g.constant(Tensor::zeros({2, 3})), g.constant(Tensor::zeros({2, 3}))), ShapeError);
    CHECK_THROWS_AS(g.conv2d(g.constant(Tensor::zeros({1, 2, 4, 4})), g.constant(Tensor::zeros({1, 3, 3, 3})), 1, 0),
                    ShapeError);
}

TEST_CASE("backward of x^2 at 3 is 6") {
    CompGraph g;
    const NodeId x = g.input(Tensor::scalar(3.0));
    const NodeId y = g.mul(x, x);
    const auto grads = backward(g, y);
    CHECK(grads.at(x).item() == 6.0);
}

TEST_CASE("backward rejects non-scalar outputs") {
    CompGraph g;
    const NodeId x = g.input(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(backward(g, g.scale(x, 2.0)), ShapeError);
    const NodeId wrt[] = {x};
    CHECK_THROWS_AS(g.grad(g.scale(x, 2.0), wrt), ShapeError);
}

TEST_CASE("gradient of |Wx|^2 matches finite differences") {
    Rng rng(11);
    const Vec W = oracle::random_vec(rng, 12), x0 = oracle::random_vec(rng, 4);
    auto f = [&](const Vec& x) {
        double s = 0;
        for (int r = 0; r < 3; ++r) {
            double v = 0;
            for (int c = 0; c < 4; ++c) v += W[r * 4 + c] * x[c];
            s += v * v;
        }
        return s;
    };
    CompGraph g;
    const NodeId x = g.input(Tensor::vector(x0));
    const NodeId Wx = g.reshape(g.matmul(g.constant(Tensor({3, 4}, W)), g.reshape(x, {4, 1})), {3});
    const NodeId wrt[] = {x};
    const Tensor an = g.value(g.grad(g.dot(Wx, Wx), wrt)[0]);
    const Vec fd = oracle::fd_gradient(f, x0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(oracle::rel_err(an[i], fd[i]) <= 1e-6);
}

TEST_CASE("double backprop: gradient of |d(Wx)/dx|_F^2 with respect to W") {
    Rng rng(12);
    const Vec W0 = oracle::random_vec(rng, 6), x0 = oracle::random_vec(rng, 3);
    auto g_of = [&](const Vec& Wv) {
        // build the Jacobian through the graph, then square-sum it
        CompGraph g;
        const NodeId W = g.input(Tensor({2, 3}, Wv));
        const NodeId x = g.input(Tensor({3, 1}, x0));
        const NodeId y = g.matmul(W, x);
        NodeId acc = g.constant(Tensor::scalar(0.0));
        const NodeId wrt[] = {x};
        for (int k = 0; k < 2; ++k) {
            Vec e(2, 0.0);
            e[k] = 1.0;
            const NodeId row = g.vjp(y, g.constant(Tensor({2, 1}, e)), wrt)[0];
            acc = g.add(acc, g.sum(g.mul(row, row)));
        }
        return std::pair{std::move(g), std::pair{acc, W}};
    };
    auto value = [&](const Vec& Wv) {
        auto [g, nodes] = g_of(Wv);
        return g.value(nodes.first).item();
    };
    auto [g, nodes] = g_of(W0);
    const NodeId wrt[] = {nodes.second};
    const Tensor an = g.value(g.grad(nodes.first, wrt)[0]);
    const Vec fd = oracle::fd_gradient(value, W0);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(oracle::rel_err(an[i], fd[i]) <= 1e-5);
        CHECK(an[i] == doctest::Approx(2 * W0[i]).epsilon(1e-12));  // d|W|_F^2/dW
    }
}

TEST_CASE("every differentiable op passes first and second order finite-difference checks") {
    std::uint64_t seed = 100;
    for (const OpCase& c : op_cases()) {
        SUBCASE(c.name) {}
        check_op(c, seed++);
    }
}

TEST_CASE("jacobian of a linear map is the matrix") {
    const Tensor A({2, 3}, {1, -2, 3, 0.5, 4, -1});
    const Tensor J = jacobian(
        [&](CompGraph& g, NodeId x) { return g.reshape(g.matmul(g.constant(A), g.reshape(x, {3, 1})), {2}); },
        Tensor::vector({0.3, -0.2, 0.9}));
    CHECK(J.identical(A));
    const Tensor I = jacobian([](CompGraph&, NodeId x) { return x; }, Tensor::vector({1, 2, 3, 4}));
    CHECK(I.identical(Tensor::identity(4)));
}

TEST_CASE("jacobian of a 2-layer network matches finite differences") {
    const Network net = init_parameters(mlp_spec(5, {4}, 3), 21);
    Rng rng(22);
    const Vec x0 = oracle::random_vec(rng, 5, 0.0, 1.0);
    const Tensor J = jacobian(
        [&](CompGraph& g, NodeId x) { return g.reshape(net.forward(g, g.reshape(x, {1, 5})).embedding, {4}); },
        Tensor::vector(x0));
    REQUIRE(J.shape() == Shape{4, 5});
    for (std::size_t r = 0; r < 4; ++r) {
        const Vec fd = oracle::fd_gradient([&](const Vec& x) { return oracle::mlp_forward(net, x)[1][r]; }, x0);
        for (std::size_t c = 0; c < 5; ++c) CHECK(oracle::rel_err(J.at(r, c), fd[c], 1e-6) <= 1e-5);
    }
}

TEST_CASE("frobenius norm") {
    CHECK(frobenius_norm(Tensor::identity(2)) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    CHECK(frobenius_norm(Tensor::zeros({3, 3})) == 0.0);
}

TEST_CASE("sub-multiplicativity over 1000 seeded pairs") {
    Rng rng(31);
    std::size_t violations = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng.below(5), k = 1 + rng.below(5), m = 1 + rng.below(5);
        Vec a = oracle::random_vec(rng, n * k, -3, 3), b = oracle::random_vec(rng, k * m, -3, 3);
        if (t % 10 == 0) std::fill(a.begin(), a.end(), 0.0);  // zero operand
        if (t % 10 == 1) {
            // rank one: every row a multiple of the first
            for (std::size_t r = 1; r < n; ++r)
                for (std::size_t c = 0; c < k; ++c) a[r * k + c] = a[c] * static_cast<double>(r + 1);
        }
        const Tensor A({n, k}, a), B({k, m}, b);
        // rank-one products hit equality, allow rounding
        if (frobenius_norm(matmul(A, B)) > frobenius_norm(A) * frobenius_norm(B) * (1 + 1e-12)) ++violations;
    }
    CHECK(violations == 0);
}

TEST_CASE("graph nodes are topologically ordered and replay bit-exactly") {
    const Network net = init_parameters(small_convnet_spec(8, 3), 41);
    Rng rng(42);
    const Tensor x({2, 1, 8, 8}, oracle::random_vec(rng, 128, 0, 1));
    CompGraph g;
    const ParamNodes p = net.bind(g, true);
    const ForwardResult fr = net.forward(g, p, g.input(x));
    const auto grads = g.grad(g.sum(fr.logits), p.all());
    (void)grads;
    CompGraph replay;
    for (NodeId k = 0; k < g.size(); ++k) {
        const Node& n = g.node(k);
        for (NodeId parent : n.parents) REQUIRE(parent < k);
        NodeId r;
        if (n.op == OpTag::Input) r = replay.input(n.value);
        else if (n.op == OpTag::Constant) r = replay.constant(n.value);
        else r = replay.forward_op(n.op, n.parents, n.attrs);
        REQUIRE(r == k);
        CHECK(replay.value(r).identical(n.value));
    }
}

TEST_CASE("identical seeds give identical graphs and gradients") {
    auto run = [] {
        const Network net = init_parameters(small_convnet_spec(8, 3), 51);
        Rng rng(52);
        const Tensor x({3, 1, 8, 8}, oracle::random_vec(rng, 192, 0, 1));
        CompGraph g;
        const ParamNodes p = net.bind(g, true);
        const ForwardResult fr = net.forward(g, p, g.input(x));
        const auto gr = g.grad(g.sum(g.mul(fr.embedding, fr.embedding)), p.all());
        std::vector<Tensor> out;
        for (NodeId n : gr) out.push_back(n == kNoNode ? Tensor() : g.value(n));  // head does not reach the embedding
        return std::pair{g.size(), out};
    };
    const auto a = run(), b = run();
    CHECK(a.first == b.first);
    for (std::size_t i = 0; i < a.second.size(); ++i) CHECK(a.second[i].identical(b.second[i]));
}

TEST_CASE("first-order consistency of the embedding map") {
    Dataset blobs = make_toy_dataset(ToyKind::Moons, 200, 0.1, 61);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 32;
    cfg.seed = 62;
    const Network net = train(init_parameters(mlp_spec(2, {16, 8}, 2), 63), blobs, cfg).net;

    Rng rng(64);
    for (int trial = 0; trial < 5; ++trial) {
        const Vec x0 = oracle::random_vec(rng, 2, 0.2, 0.8);
        Vec e = oracle::random_vec(rng, 2);
        const double en = oracle::norm(e);
        for (double& v : e) v /= en;
        const Tensor J = jacobian(
            [&](CompGraph& g, NodeId x) { return g.reshape(net.forward(g, g.reshape(x, {1, 2})).embedding, {8}); },
            Tensor::vector(x0));
        const double jn = frobenius_norm(J);
        Vec Je(8, 0.0);
        for (std::size_t r = 0; r < 8; ++r) Je[r] = J.at(r, 0) * e[0] + J.at(r, 1) * e[1];
        const double linear = oracle::norm(Je) / jn;  // limit of the ratio as delta -> 0
        const Vec z0 = oracle::mlp_forward(net, x0)[net.spec().embedding_index];
        double prev_gap = INFINITY, last = 0.0;
        for (double delta : {1e-2, 1e-3, 1e-4}) {
            const Vec x1{x0[0] + delta * e[0], x0[1] + delta * e[1]};
            const Vec z1 = oracle::mlp_forward(net, x1)[net.spec().embedding_index];
            Vec dz(z0.size());
            for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = z1[k] - z0[k];
            last = oracle::norm(dz) / (jn * delta);
            const double gap = std::abs(last - linear);
            CHECK(gap <= prev_gap + 1e-9);
            prev_gap = gap;
        }
        CHECK(last <= 1.05);
    }
}
