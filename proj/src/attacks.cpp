#include "madlab/attacks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <thread>

#include "madlab/errors.hpp"
#include "madlab/loss.hpp"

namespace madlab {

std::string to_string(AttackFamily family) {
    switch (family) {
        case AttackFamily::FGSM: return "fgsm";
        case AttackFamily::BIM: return "bim";
        case AttackFamily::PGD: return "pgd";
        case AttackFamily::CW: return "cw";
    }
    return "unknown";
}

AttackFamily parse_attack_family(const std::string& name) {
    std::string s;
    for (char c : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (s == "fgsm") return AttackFamily::FGSM;
    if (s == "bim") return AttackFamily::BIM;
    if (s == "pgd") return AttackFamily::PGD;
    if (s == "cw" || s == "cw_l2" || s == "cw-l2") return AttackFamily::CW;
    throw ConfigError("unknown attack family '" + name + "' (expected fgsm, bim, pgd or cw)");
}

double AttackConfig::step_size() const {
    if (step) return *step;
    const double s = 2.5 * epsilon / static_cast<double>(std::max<std::size_t>(iterations, 1));
    return std::min(s, epsilon);
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw InvalidArgument("attack: epsilon must be >= 0");
    if ((family == AttackFamily::BIM || family == AttackFamily::PGD) && iterations == 0) {
        throw InvalidArgument("attack: iterations must be >= 1");
    }
    if (step && !(*step >= 0.0)) throw InvalidArgument("attack: step must be >= 0");
    if (linf_cap && !(*linf_cap >= 0.0)) throw InvalidArgument("attack: linf_cap must be >= 0");
    if (family == AttackFamily::CW && (cw.binary_search_steps == 0 || !(cw.c >= 0.0) || !(cw.learning_rate > 0.0))) {
        throw InvalidArgument("attack: invalid C&W settings");
    }
    if (!(loss_alpha > 0.0 && loss_alpha <= 1.0)) throw InvalidArgument("attack: loss_alpha must lie in (0, 1]");
}

namespace {

Tensor as_batch(const Tensor& x) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(std::move(s));
}

std::size_t predict_one(const Network& net, const Tensor& x) { return predict(net, as_batch(x))[0]; }

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor signed_step(const Tensor& x, const Tensor& grad, double step) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + step * sign(grad[i]);
    return Tensor(x.shape(), std::move(out));
}

AdversarialResult finish(const Network& net, const Tensor& x, const Tensor& x_adv, std::size_t y, std::size_t original,
                         std::size_t iterations) {
    AdversarialResult r;
    r.x_adv = x_adv;
    r.true_class = y;
    r.original_class = original;
    r.adversarial_class = predict_one(net, x_adv);
    r.success = r.adversarial_class != y;
    double l2 = 0.0, linf = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x_adv[i] - x[i];
        l2 += d * d;
        linf = std::max(linf, std::fabs(d));
    }
    r.l2 = std::sqrt(l2);
    r.linf = linf;
    r.iterations = iterations;
    return r;
}

void check_label(const Network& net, std::size_t y) {
    if (y >= net.num_classes()) {
        throw InvalidArgument("attack: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(net.num_classes()) + ")");
    }
}

}  // namespace

Tensor input_gradient(const Network& net, const Tensor& x, std::span<const std::size_t> labels, double alpha) {
    CompGraph graph;
    const NodeId xin = graph.input(x);
    const ForwardResult fr = net.forward(graph, xin);
    const NodeId loss = smoothed_cross_entropy(graph, fr.logits, labels, alpha);
    const NodeId wrt[] = {xin};
    const NodeId g = graph.grad(loss, wrt)[0];
    return g == kNoNode ? Tensor::zeros(x.shape()) : graph.value(g).reshaped(x.shape());
}

Tensor project_linf(const Tensor& candidate, const Tensor& x, double epsilon) {
    if (candidate.size() != x.size()) throw ShapeError("project_linf: size mismatch");
    std::vector<double> out(x.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double xi = x[i];
        double v = std::clamp(candidate[i], xi - epsilon, xi + epsilon);
        // the bounds themselves are rounded; step back until the difference fits
        while (v - xi > epsilon) v = std::nextafter(v, -inf);
        while (xi - v > epsilon) v = std::nextafter(v, inf);
        out[i] = std::clamp(v, 0.0, 1.0);
    }
    return Tensor(x.shape(), std::move(out));
}

AdversarialResult fgsm(const Network& net, const Tensor& x, std::size_t y, double epsilon, double loss_alpha) {
    check_label(net, y);
    const std::size_t original = predict_one(net, x);
    const std::size_t labels[] = {y};
    const Tensor g = input_gradient(net, as_batch(x), labels, loss_alpha).reshaped(x.shape());
    return finish(net, x, project_linf(signed_step(x, g, epsilon), x, epsilon), y, original, 1);
}

AdversarialResult bim(const Network& net, const Tensor& x, std::size_t y, double epsilon, std::size_t iterations,
                      double step, double loss_alpha) {
    check_label(net, y);
    if (iterations == 0) throw InvalidArgument("bim: iterations must be >= 1");
    const std::size_t original = predict_one(net, x);
    const std::size_t labels[] = {y};
    Tensor cur = x;
    for (std::size_t it = 0; it < iterations; ++it) {
        const Tensor g = input_gradient(net, as_batch(cur), labels, loss_alpha).reshaped(x.shape());
        cur = project_linf(signed_step(cur, g, step), x, epsilon);
    }
    return finish(net, x, cur, y, original, iterations);
}

AdversarialResult pgd(const Network& net, const Tensor& x, std::size_t y, double epsilon, std::size_t iterations,
                      double step, Rng& rng, double loss_alpha) {
    check_label(net, y);
    if (iterations == 0) throw InvalidArgument("pgd: iterations must be >= 1");
    const std::size_t original = predict_one(net, x);
    std::vector<double> start(x.size());
    for (std::size_t i = 0; i < start.size(); ++i) start[i] = x[i] + rng.uniform(-epsilon, epsilon);
    Tensor cur = project_linf(Tensor(x.shape(), std::move(start)), x, epsilon);
    const std::size_t labels[] = {y};
    for (std::size_t it = 0; it < iterations; ++it) {
        const Tensor g = input_gradient(net, as_batch(cur), labels, loss_alpha).reshaped(x.shape());
        cur = project_linf(signed_step(cur, g, step), x, epsilon);
    }
    return finish(net, x, cur, y, original, iterations);
}

Tensor pgd_batch(const Network& net, const Tensor& x, std::span<const std::size_t> y, double epsilon,
                 std::size_t iterations, double step, Rng& rng, double loss_alpha) {
    if (epsilon == 0.0) return x;
    std::vector<double> start(x.size());
    for (std::size_t i = 0; i < start.size(); ++i) start[i] = x[i] + rng.uniform(-epsilon, epsilon);
    Tensor cur = project_linf(Tensor(x.shape(), std::move(start)), x, epsilon);
    for (std::size_t it = 0; it < iterations; ++it) {
        const Tensor g = input_gradient(net, cur, y, loss_alpha);
        cur = project_linf(signed_step(cur, g, step), x, epsilon);
    }
    return cur;
}

namespace {

struct CwStep {
    double margin = 0.0;  // Z_true - max wrong logit
    std::size_t predicted = 0;
    Tensor margin_grad;   // gradient of the margin w.r.t. the input
};

CwStep cw_margin(const Network& net, const Tensor& xp, std::size_t t) {
    CompGraph graph;
    const NodeId xin = graph.input(as_batch(xp));
    const ForwardResult fr = net.forward(graph, xin);
    const Tensor& z = graph.value(fr.logits);
    const std::size_t m = z.size();
    std::size_t best = t == 0 ? 1 : 0;
    for (std::size_t j = 0; j < m; ++j)
        if (j != t && z[j] > z[best]) best = j;  // subgradient of the achieving class
    CwStep s;
    s.margin = z[t] - z[best];
    s.predicted = argmax_rows(z)[0];
    std::vector<double> seed(m, 0.0);
    seed[t] = 1.0;
    seed[best] = -1.0;
    const NodeId wrt[] = {xin};
    const NodeId g = graph.vjp(fr.logits, graph.constant(Tensor(z.shape(), std::move(seed))), wrt)[0];
    s.margin_grad = g == kNoNode ? Tensor::zeros(xp.shape()) : graph.value(g).reshaped(xp.shape());
    return s;
}

double l2_distance(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

AdversarialResult cw_l2(const Network& net, const Tensor& x, std::size_t y, const CwConfig& cfg,
                        std::optional<double> linf_cap) {
    check_label(net, y);
    const std::size_t original = predict_one(net, x);
    if (original != y) return finish(net, x, x, y, original, 0);

    const std::size_t n = x.size();
    std::vector<double> w0(n);
    for (std::size_t i = 0; i < n; ++i) w0[i] = std::atanh((2.0 * x[i] - 1.0) * (1.0 - 1e-9));

    double c = cfg.c, c_lo = 0.0, c_hi = std::numeric_limits<double>::infinity();
    std::optional<Tensor> best;
    double best_l2 = std::numeric_limits<double>::infinity();
    Tensor last = x;
    std::size_t steps = 0;
    for (std::size_t search = 0; search < cfg.binary_search_steps; ++search) {
        std::vector<double> w = w0;
        bool found = false;
        for (std::size_t it = 0; it <= cfg.max_iterations; ++it) {
            std::vector<double> xp(n), dxdw(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double th = std::tanh(w[i]);
                xp[i] = 0.5 * (th + 1.0);
                dxdw[i] = 0.5 * (1.0 - th * th);
            }
            const Tensor xpt(x.shape(), std::move(xp));
            const CwStep s = cw_margin(net, xpt, y);
            if (s.predicted != y) {
                found = true;
                const double d = l2_distance(xpt, x);
                if (d < best_l2) {
                    best_l2 = d;
                    best = xpt;
                }
            }
            last = xpt;
            if (it == cfg.max_iterations) break;
            // d/dx' of |x' - x|^2 + c * max(margin, -kappa)
            const bool active = s.margin > -cfg.kappa;
            for (std::size_t i = 0; i < n; ++i) {
                double g = 2.0 * (xpt[i] - x[i]);
                if (active) g += c * s.margin_grad[i];
                w[i] -= cfg.learning_rate * g * dxdw[i];
            }
            ++steps;
        }
        if (found) {
            c_hi = std::min(c_hi, c);
            c = (c_lo + c_hi) / 2.0;
        } else {
            c_lo = std::max(c_lo, c);
            c = std::isinf(c_hi) ? c * 10.0 : (c_lo + c_hi) / 2.0;
        }
    }
    Tensor result = best ? *best : last;
    if (linf_cap) result = project_linf(result, x, *linf_cap);
    return finish(net, x, result, y, original, steps);
}

AdversarialResult run_attack(const Network& net, const Tensor& x, std::size_t y, const AttackConfig& cfg,
                             std::size_t sample_index) {
    cfg.validate();
    switch (cfg.family) {
        case AttackFamily::FGSM: return fgsm(net, x, y, cfg.epsilon, cfg.loss_alpha);
        case AttackFamily::BIM: return bim(net, x, y, cfg.epsilon, cfg.iterations, cfg.step_size(), cfg.loss_alpha);
        case AttackFamily::PGD: {
            Rng rng(derive_seed(cfg.seed, sample_index));
            return pgd(net, x, y, cfg.epsilon, cfg.iterations, cfg.step_size(), rng, cfg.loss_alpha);
        }
        case AttackFamily::CW: return cw_l2(net, x, y, cfg.cw, cfg.linf_cap);
    }
    throw InvalidArgument("attack: unknown family");
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

AttackEvaluation evaluate_attack(const Network& net, const Dataset& data, const AttackConfig& cfg,
                                 std::size_t max_samples, std::size_t workers) {
    cfg.validate();
    const std::size_t n = data.size();
    // per-sample predictions so results never depend on batch composition
    std::vector<std::size_t> pre(n);
    parallel_for(n, workers, [&](std::size_t i) { pre[i] = predict_one(net, data.inputs.slice_rows(i, i + 1)); });
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < n && (max_samples == 0 || chosen.size() < max_samples); ++i)
        if (pre[i] == data.labels[i]) chosen.push_back(i);
    if (chosen.empty()) throw InvalidArgument("evaluate_attack: no correctly classified samples to attack");

    AttackEvaluation ev;
    ev.evaluated = chosen.back() + 1;
    ev.attacked = chosen.size();
    ev.samples.resize(chosen.size());
    ev.adversarial.resize(chosen.size());
    const Shape sample = data.sample_shape();
    parallel_for(chosen.size(), workers, [&](std::size_t k) {
        const std::size_t i = chosen[k];
        const Tensor x = data.inputs.slice_rows(i, i + 1).reshaped(sample);
        const AdversarialResult r = run_attack(net, x, data.labels[i], cfg, i);
        ev.samples[k] = {i, data.labels[i], pre[i], r.adversarial_class, r.l2, r.linf, r.success, r.iterations};
        ev.adversarial[k] = r.x_adv;
    });
    std::size_t robust = 0;
    for (const SampleOutcome& s : ev.samples) robust += s.success ? 0 : 1;
    ev.robust_accuracy = static_cast<double>(robust) / static_cast<double>(ev.attacked);
    return ev;
}

}  // namespace madlab
