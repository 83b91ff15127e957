#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "madlab/attacks.hpp"
#include "madlab/errors.hpp"
#include "madlab/training.hpp"
#include "oracles.hpp"

using namespace madlab;
using oracle::Vec;

namespace {

TrainConfig ce_only(std::size_t epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.seed = 3;
    cfg.loss.lambda_siamese = cfg.loss.lambda_rvl = cfg.loss.lambda_jacobian = 0.0;
    cfg.loss.alpha = 1.0;
    return cfg;
}

// logits (w.x, -w.x)
Network linear_binary(const Vec& w) {
    ModelSpec spec{{w.size()}, {LayerSpec::dense(w.size(), 2)}, 0};
    Network net = init_parameters(spec, 0);
    Vec rows = w;
    for (double v : w) rows.push_back(-v);
    net.mutable_params()[0].weight = Tensor({2, w.size()}, rows);
    return net;
}

const Network& moons_model() {
    static const Network net = [] {
        const Dataset d = make_toy_dataset(ToyKind::Moons, 600, 0.1, 21);
        return train(init_parameters(mlp_spec(2, {32, 16}, 2), 22), d, ce_only(30)).net;
    }();
    return net;
}

const Dataset& moons_test() {
    static const Dataset d = make_toy_dataset(ToyKind::Moons, 500, 0.1, 23);
    return d;
}

Tensor row(const Tensor& x, std::size_t i) {
    const std::size_t w = x.size() / x.dim(0);
    return Tensor({w}, Vec(x.data().begin() + static_cast<std::ptrdiff_t>(i * w),
                           x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * w)));
}

double success_rate(const AttackConfig& cfg) {
    const AttackEvaluation ev = evaluate_attack(moons_model(), moons_test(), cfg);
    return 1.0 - ev.robust_accuracy;
}

}  // namespace

TEST_CASE("attack family names") {
    CHECK(parse_attack_family("fgsm") == AttackFamily::FGSM);
    CHECK(parse_attack_family("PGD") == AttackFamily::PGD);
    CHECK(parse_attack_family("cw") == AttackFamily::CW);
    CHECK_THROWS_AS(parse_attack_family("deepfool"), ConfigError);
    AttackConfig cfg;
    cfg.epsilon = 0.3;
    CHECK(cfg.step_size() == doctest::Approx(0.075).epsilon(1e-15));
    cfg.iterations = 1;
    CHECK(cfg.step_size() == 0.3);
}

TEST_CASE("zero budget leaves inputs unchanged") {
    const Network& net = moons_model();
    const Tensor x = row(moons_test().inputs, 0);
    const std::size_t y = moons_test().labels[0];
    Rng rng(1);
    CHECK(fgsm(net, x, y, 0.0).x_adv.identical(x));
    CHECK(bim(net, x, y, 0.0, 10, 0.0).x_adv.identical(x));
    CHECK(pgd(net, x, y, 0.0, 10, 0.0, rng).x_adv.identical(x));
    const AdversarialResult r = fgsm(net, x, y, 0.0);
    CHECK(r.success == (predict(net, x.reshaped({1, 2}))[0] != y));

    AttackConfig cfg;
    cfg.family = AttackFamily::FGSM;
    cfg.epsilon = 0.0;
    CHECK(evaluate_attack(net, moons_test(), cfg).robust_accuracy == 1.0);
}

TEST_CASE("fgsm on a linear model matches the closed form") {
    const Vec w{0.5, -0.25, 2.0, -1.0, 0.125, -0.5};
    const Network net = linear_binary(w);
    const double eps = 0.125;
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        Vec x(6);
        for (double& v : x) v = static_cast<double>(rng.below(9)) / 8.0;
        // d CE(class 0) / dx = -2 (1 - p0) w, so sign(grad) = -sign(w)
        Vec expect(6);
        for (std::size_t k = 0; k < 6; ++k) expect[k] = std::clamp(x[k] - eps * (w[k] > 0 ? 1.0 : -1.0), 0.0, 1.0);
        const AdversarialResult r = fgsm(net, Tensor::vector(x), 0, eps);
        CHECK(r.x_adv.identical(Tensor::vector(expect)));
    }
}

TEST_CASE("one-step BIM with step epsilon is FGSM") {
    const Network& net = moons_model();
    for (std::size_t i = 0; i < 50; ++i) {
        const Tensor x = row(moons_test().inputs, i);
        const std::size_t y = moons_test().labels[i];
        for (double eps : {0.01, 0.1, 0.3}) {
            const AdversarialResult a = fgsm(net, x, y, eps), b = bim(net, x, y, eps, 1, eps);
            CHECK(a.x_adv.identical(b.x_adv));
            CHECK(a.adversarial_class == b.adversarial_class);
        }
    }
}

TEST_CASE("budgets and box respected on 1000 samples") {
    const Network net = init_parameters(mlp_spec(20, {16, 8}, 4), 31);
    Rng rng(32);
    Dataset d;
    d.inputs = Tensor({1000, 20}, oracle::random_vec(rng, 20000, 0, 1));
    for (std::size_t i = 0; i < 1000; ++i) d.labels.push_back(rng.below(4));
    d.num_classes = 4;
    std::size_t violations = 0;
    AttackConfig cfg;
    cfg.seed = 33;
    for (AttackFamily f : {AttackFamily::FGSM, AttackFamily::BIM, AttackFamily::PGD, AttackFamily::CW}) {
        cfg.family = f;
        cfg.epsilon = 0.1;
        cfg.cw.max_iterations = 50;
        cfg.cw.learning_rate = 0.05;
        cfg.linf_cap = 0.1;
        for (std::size_t i = 0; i < 1000; ++i) {
            const Tensor x = row(d.inputs, i);
            const AdversarialResult r = run_attack(net, x, d.labels[i], cfg, i);
            double linf = 0;
            for (std::size_t k = 0; k < 20; ++k) {
                const double diff = std::abs(r.x_adv[k] - x[k]);
                linf = std::max(linf, diff);
                if (diff > 0.1 || r.x_adv[k] < 0.0 || r.x_adv[k] > 1.0) ++violations;
            }
            CHECK(r.linf == linf);
        }
    }
    CHECK(violations == 0);
}

TEST_CASE("project_linf respects the budget after rounding") {
    Rng rng(4);
    for (int t = 0; t < 10000; ++t) {
        const double x = rng.uniform(), c = rng.uniform(-0.5, 1.5), eps = rng.uniform(0, 0.4);
        const double p = project_linf(Tensor::vector({c}), Tensor::vector({x}), eps)[0];
        CHECK(std::abs(p - x) <= eps);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("pgd is deterministic per seed") {
    const Network& net = moons_model();
    const Tensor x = row(moons_test().inputs, 3);
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.seed = 5;
    CHECK(run_attack(net, x, 0, cfg, 7).x_adv.identical(run_attack(net, x, 0, cfg, 7).x_adv));
    cfg.step = 0.0;  // output is the random start
    CHECK_FALSE(run_attack(net, x, 0, cfg, 7).x_adv.identical(run_attack(net, x, 0, cfg, 8).x_adv));
}

TEST_CASE("stronger budgets and attacks succeed more often") {
    AttackConfig cfg;
    cfg.family = AttackFamily::BIM;
    double prev = -1;
    for (double eps : {0.01, 0.05, 0.1}) {
        cfg.epsilon = eps;
        const double s = success_rate(cfg);
        CHECK(s >= prev);
        prev = s;
    }
    cfg.epsilon = 0.05;
    cfg.family = AttackFamily::FGSM;
    const double f = success_rate(cfg);
    cfg.family = AttackFamily::PGD;
    CHECK(success_rate(cfg) >= f);

    cfg.family = AttackFamily::FGSM;
    double robust = 2;
    for (double eps : {0.0, 0.02, 0.05, 0.1}) {
        cfg.epsilon = eps;
        const double r = evaluate_attack(moons_model(), moons_test(), cfg).robust_accuracy;
        CHECK(r <= robust);
        robust = r;
    }
}

TEST_CASE("carlini-wagner") {
    const Network& net = moons_model();
    const Dataset& d = moons_test();
    CwConfig cw;
    cw.c = 10.0;
    cw.max_iterations = 200;
    cw.learning_rate = 0.01;

    double cw_l2_sum = 0, bim_l2_sum = 0;
    std::size_t cw_n = 0, bim_n = 0, checked = 0;
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
        const Tensor x = row(d.inputs, i);
        const std::size_t y = d.labels[i];
        const AdversarialResult r = cw_l2(net, x, y, cw, std::nullopt);
        if (r.original_class != y) {
            CHECK(r.success);
            CHECK(r.l2 == 0.0);
            continue;
        }
        if (r.success) {
            const Tensor z = infer(net, r.x_adv.reshaped({1, 2})).logits;
            CHECK(z[1 - y] >= z[y]);
            cw_l2_sum += r.l2;
            ++cw_n;
            ++checked;
        }
        const AdversarialResult b = bim(net, x, y, 0.3, 10, 0.075);
        if (b.success) {
            bim_l2_sum += b.l2;
            ++bim_n;
        }
    }
    REQUIRE(cw_n > 0);
    REQUIRE(bim_n > 0);
    CHECK(cw_l2_sum / static_cast<double>(cw_n) <= bim_l2_sum / static_cast<double>(bim_n));
    CHECK(checked > 0);
}

TEST_CASE("filtering and robust accuracy") {
    const Network& net = moons_model();
    const Dataset& d = moons_test();
    AttackConfig cfg;
    cfg.family = AttackFamily::FGSM;
    cfg.epsilon = 0.1;
    const AttackEvaluation ev = evaluate_attack(net, d, cfg, 100);
    const auto pred = predict(net, d.inputs);
    CHECK(ev.attacked == 100);
    std::size_t still = 0;
    for (const SampleOutcome& s : ev.samples) {
        CHECK(pred[s.index] == d.labels[s.index]);
        CHECK(s.pre_class == s.true_class);
        still += s.success ? 0 : 1;
    }
    CHECK(ev.robust_accuracy == static_cast<double>(still) / 100.0);
    std::size_t correct_prefix = 0;
    for (std::size_t i = 0; i < ev.evaluated; ++i) correct_prefix += pred[i] == d.labels[i];
    CHECK(correct_prefix == 100);

    // identical outcomes regardless of worker count
    cfg.family = AttackFamily::PGD;
    const AttackEvaluation a = evaluate_attack(net, d, cfg, 50, 1), b = evaluate_attack(net, d, cfg, 50, 3);
    for (std::size_t i = 0; i < a.adversarial.size(); ++i) CHECK(a.adversarial[i].identical(b.adversarial[i]));

    Dataset wrong = d;
    for (std::size_t i = 0; i < wrong.labels.size(); ++i) wrong.labels[i] = 1 - pred[i];
    CHECK_THROWS_AS(evaluate_attack(net, wrong, cfg), InvalidArgument);
}

TEST_CASE("undefended linear model falls to a large budget") {
    const Dataset d = make_toy_dataset(ToyKind::Blobs, 400, 0.1, 41);
    const Network net = train(init_parameters(mlp_spec(2, {}, 2), 42), d, ce_only(20)).net;
    AttackConfig cfg;
    cfg.family = AttackFamily::FGSM;
    cfg.epsilon = 0.5;
    CHECK(evaluate_attack(net, d, cfg).robust_accuracy <= 0.05);
}
