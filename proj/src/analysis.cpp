#include "madlab/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "madlab/errors.hpp"

namespace madlab {

namespace {

constexpr std::size_t kChunk = 25;

void check_embeddings(const Tensor& z, std::span<const std::size_t> labels, const char* who) {
    if (z.rank() != 2 || z.dim(0) != labels.size()) {
        throw ShapeError(std::string(who) + ": embeddings " + shape_str(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
}

struct Clusters {
    std::vector<std::size_t> classes;           // present classes, ascending
    std::vector<std::vector<double>> centroid;  // aligned with classes
    std::vector<double> sigma;
};

Clusters clusters(const Tensor& z, std::span<const std::size_t> labels) {
    const std::size_t d = z.dim(1);
    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    Clusters c;
    for (const auto& [cls, rows] : members) {
        std::vector<double> mu(d, 0.0);
        for (std::size_t r : rows)
            for (std::size_t k = 0; k < d; ++k) mu[k] += z[r * d + k];
        for (double& v : mu) v /= static_cast<double>(rows.size());
        double s = 0.0;
        for (std::size_t r : rows) {
            double sq = 0.0;
            for (std::size_t k = 0; k < d; ++k) sq += (z[r * d + k] - mu[k]) * (z[r * d + k] - mu[k]);
            s += std::sqrt(sq);
        }
        c.classes.push_back(cls);
        c.centroid.push_back(std::move(mu));
        c.sigma.push_back(s / static_cast<double>(rows.size()));
    }
    return c;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
}

Tensor embeddings(const Network& net, const Tensor& x, std::size_t workers) {
    const std::size_t n = x.dim(0);
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<Tensor> parts(chunks);
    parallel_for(chunks, workers, [&](std::size_t c) {
        parts[c] = infer(net, x.slice_rows(c * kChunk, std::min(n, (c + 1) * kChunk))).embedding;
    });
    std::vector<double> all;
    for (const Tensor& p : parts) all.insert(all.end(), p.data().begin(), p.data().end());
    return Tensor(Shape{n, net.embedding_dim()}, std::move(all));
}

}  // namespace

MarginReport margin_from_embeddings(const Tensor& z, std::span<const std::size_t> labels,
                                    std::span<const double> jacobian_norms) {
    check_embeddings(z, labels, "embedding_margin");
    const std::size_t n = labels.size(), d = z.dim(1);
    MarginReport r;
    r.samples = n;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (labels[i] == labels[j]) continue;
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += (z[i * d + k] - z[j * d + k]) * (z[i * d + k] - z[j * d + k]);
            if (s < best) {
                best = s;
                r.index_a = i;
                r.index_b = j;
            }
        }
    }
    if (std::isinf(best)) throw InvalidArgument("embedding_margin: subset contains a single class");
    r.eta = std::sqrt(best);
    r.class_a = labels[r.index_a];
    r.class_b = labels[r.index_b];
    double sum = 0.0;
    for (double v : jacobian_norms) {
        r.max_jacobian = std::max(r.max_jacobian, v);
        sum += v;
    }
    r.mean_jacobian = jacobian_norms.empty() ? 0.0 : sum / static_cast<double>(jacobian_norms.size());
    const auto bound = mad_lower_bound(r);
    r.unbounded = !bound.has_value();
    r.epsilon_lb = bound.value_or(0.0);
    return r;
}

std::optional<double> mad_lower_bound(const MarginReport& report) {
    if (report.eta == 0.0) return 0.0;
    if (!(report.max_jacobian > 0.0)) return std::nullopt;
    return report.eta / report.max_jacobian;
}

std::vector<double> jacobian_norms_parallel(const Network& net, const Tensor& x, std::size_t workers,
                                            JacobianTarget target) {
    const std::size_t n = x.dim(0);
    std::vector<double> out(n);
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    parallel_for(chunks, workers, [&](std::size_t c) {
        const std::size_t begin = c * kChunk, end = std::min(n, begin + kChunk);
        const auto part = jacobian_norms(net, x.slice_rows(begin, end), target);
        std::copy(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
    });
    return out;
}

MarginReport embedding_margin(const Network& net, const Dataset& data, std::size_t workers) {
    if (data.size() == 0) throw InvalidArgument("embedding_margin: empty subset");
    const Tensor z = embeddings(net, data.inputs, workers);
    const auto norms = jacobian_norms_parallel(net, data.inputs, workers);
    return margin_from_embeddings(z, data.labels, norms);
}

std::vector<double> class_dispersion(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes) {
    check_embeddings(z, labels, "class_dispersion");
    const Clusters c = clusters(z, labels);
    std::vector<double> out(num_classes, 0.0);
    for (std::size_t i = 0; i < c.classes.size(); ++i) out.at(c.classes[i]) = c.sigma[i];
    return out;
}

double davies_bouldin(const Tensor& z, std::span<const std::size_t> labels) {
    check_embeddings(z, labels, "davies_bouldin");
    const Clusters c = clusters(z, labels);
    const std::size_t m = c.classes.size();
    if (m < 2) throw InvalidArgument("davies_bouldin: need at least 2 classes");
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            const double gap = distance(c.centroid[i], c.centroid[j]);
            if (gap == 0.0) {
                throw InvalidArgument("davies_bouldin: centroids of classes " + std::to_string(c.classes[std::min(i, j)]) +
                                      " and " + std::to_string(c.classes[std::max(i, j)]) + " coincide");
            }
            worst = std::max(worst, (c.sigma[i] + c.sigma[j]) / gap);
        }
        total += worst;
    }
    return total / static_cast<double>(m);
}

Tensor centroid_distance_matrix(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes) {
    check_embeddings(z, labels, "centroid_distance_matrix");
    const Clusters c = clusters(z, labels);
    for (std::size_t k = 0; k < num_classes; ++k) {
        if (k >= c.classes.size() || c.classes[k] != k) {
            throw DataError(DataError::Kind::MissingClass,
                            "centroid_distance_matrix: class " + std::to_string(k) + " has no samples");
        }
    }
    if (c.classes.size() != num_classes) {
        throw DataError(DataError::Kind::Range, "centroid_distance_matrix: label outside [0, " +
                                                    std::to_string(num_classes) + ")");
    }
    std::vector<double> m(num_classes * num_classes, 0.0);
    for (std::size_t i = 0; i < num_classes; ++i)
        for (std::size_t j = i + 1; j < num_classes; ++j)
            m[i * num_classes + j] = m[j * num_classes + i] = distance(c.centroid[i], c.centroid[j]);
    return Tensor(Shape{num_classes, num_classes}, std::move(m));
}

Tensor pca_projection(const Tensor& z, std::size_t components) {
    if (z.rank() != 2 || z.dim(0) == 0) throw ShapeError("pca_projection: expected a non-empty [n, d] matrix");
    const std::size_t n = z.dim(0), d = z.dim(1);
    if (components > d) throw InvalidArgument("pca_projection: more components than embedding dimensions");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Mat x = Eigen::Map<const Mat>(z.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    x.rowwise() -= x.colwise().mean();
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<std::size_t>(n - 1, 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    Eigen::MatrixXd axes(d, components);
    for (std::size_t c = 0; c < components; ++c) {
        Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - c));
        Eigen::Index at = 0;
        v.cwiseAbs().maxCoeff(&at);
        if (v(at) < 0) v = -v;
        axes.col(static_cast<Eigen::Index>(c)) = v;
    }
    const Mat proj = x * axes;
    return Tensor(Shape{n, components}, std::vector<double>(proj.data(), proj.data() + proj.size()));
}

SeparabilityReport separability(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes) {
    SeparabilityReport r;
    r.dbi = davies_bouldin(z, labels);
    r.centroid_distances = centroid_distance_matrix(z, labels, num_classes);
    r.sigma = class_dispersion(z, labels, num_classes);
    r.projection = pca_projection(z, std::min<std::size_t>(2, z.dim(1)));
    return r;
}

ConfusionReport adversarial_confusion(std::span<const SampleOutcome> samples, std::size_t num_classes,
                                      const std::optional<Tensor>& centroid_distances) {
    ConfusionReport r;
    r.counts.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    r.attacked.assign(num_classes, 0);
    for (const SampleOutcome& s : samples) {
        if (s.true_class >= num_classes || s.post_class >= num_classes) {
            throw InvalidArgument("adversarial_confusion: class outside [0, " + std::to_string(num_classes) + ")");
        }
        ++r.attacked[s.true_class];
        if (s.success && s.post_class != s.true_class) ++r.counts[s.true_class][s.post_class];
    }
    r.top_destination.assign(num_classes, std::nullopt);
    r.nearest_centroid.assign(num_classes, std::nullopt);
    for (std::size_t i = 0; i < num_classes; ++i) {
        std::size_t best = 0, best_count = 0;
        for (std::size_t j = 0; j < num_classes; ++j) {
            if (r.counts[i][j] > best_count) {
                best = j;
                best_count = r.counts[i][j];
            }
        }
        if (best_count > 0) r.top_destination[i] = best;
        if (centroid_distances) {
            const Tensor& m = *centroid_distances;
            std::optional<std::size_t> nearest;
            for (std::size_t j = 0; j < num_classes; ++j) {
                if (j != i && (!nearest || m.at(i, j) < m.at(i, *nearest))) nearest = j;
            }
            r.nearest_centroid[i] = nearest;
        }
        if (r.top_destination[i] && r.nearest_centroid[i]) {
            ++r.comparable;
            if (*r.top_destination[i] == *r.nearest_centroid[i]) ++r.correspondences;
        }
    }
    return r;
}

double fraction_below_bound(std::span<const SampleOutcome> samples, double bound) {
    std::size_t succ = 0, below = 0;
    for (const SampleOutcome& s : samples) {
        if (!s.success) continue;
        ++succ;
        if (s.l2 < bound) ++below;
    }
    return succ == 0 ? 0.0 : static_cast<double>(below) / static_cast<double>(succ);
}

std::size_t QueryOracle::rows(const Tensor& x) const {
    if (x.rank() == 0 || x.size() % target_.input_size() != 0) {
        throw ShapeError("query: input " + shape_str(x.shape()) + " does not match the target input size");
    }
    return x.size() / target_.input_size();
}

std::vector<std::size_t> QueryOracle::labels(const Tensor& x) {
    const std::size_t n = rows(x);
    queries_ += n;
    label_queries_ += n;
    return predict(target_, x);
}

Tensor QueryOracle::probabilities(const Tensor& x) {
    const std::size_t n = rows(x);
    queries_ += n;
    probability_queries_ += n;
    CompGraph graph;
    const ForwardResult fr = target_.forward(graph, graph.constant(x));
    return graph.value(graph.softmax(fr.logits));
}

DistillResult distill_proxy(QueryOracle& oracle, const Network& proxy_init, const Tensor& probes,
                            const TrainConfig& cfg, DistillTargets mode) {
    if (proxy_init.num_classes() != oracle.num_classes()) {
        throw InvalidArgument("distill_proxy: proxy and target disagree on the number of classes");
    }
    const std::size_t n = probes.dim(0), m = oracle.num_classes();
    const std::size_t before = oracle.queries();
    std::vector<double> targets;
    targets.reserve(n * m);
    constexpr std::size_t chunk = 256;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const Tensor x = probes.slice_rows(begin, std::min(n, begin + chunk));
        if (mode == DistillTargets::Soft) {
            const Tensor p = oracle.probabilities(x);
            targets.insert(targets.end(), p.data().begin(), p.data().end());
        } else {
            for (std::size_t y : oracle.labels(x)) {
                std::vector<double> row(m, 0.0);
                row[y] = 1.0;
                targets.insert(targets.end(), row.begin(), row.end());
            }
        }
    }
    const Tensor t(Shape{n, m}, std::move(targets));
    DistillResult r{train_soft_targets(proxy_init, probes, t, cfg).net, oracle.queries() - before, 0.0};
    const auto teacher = argmax_rows(t);
    const auto student = predict(r.proxy, probes);
    std::size_t same = 0;
    for (std::size_t i = 0; i < n; ++i) same += teacher[i] == student[i] ? 1 : 0;
    r.agreement = n == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(n);
    return r;
}

double agreement(QueryOracle& oracle, const Network& proxy, const Tensor& x) {
    const auto a = oracle.labels(x);
    const auto b = predict(proxy, x);
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
    return a.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(a.size());
}

BlackBoxResult blackbox_evaluate(QueryOracle& target, const Network& proxy, const Dataset& data,
                                 const AttackConfig& cfg, std::size_t max_samples, std::size_t workers) {
    cfg.validate();
    const std::size_t before = target.queries();
    const Shape sample = data.sample_shape();
    auto one = [&](const Tensor& x) {
        Shape s{1};
        s.insert(s.end(), sample.begin(), sample.end());
        return target.labels(x.reshaped(s))[0];
    };
    std::vector<std::size_t> chosen, pre;
    for (std::size_t i = 0; i < data.size() && (max_samples == 0 || chosen.size() < max_samples); ++i) {
        const std::size_t p = one(data.inputs.slice_rows(i, i + 1));
        if (p == data.labels[i]) {
            chosen.push_back(i);
            pre.push_back(p);
        }
    }
    if (chosen.empty()) throw InvalidArgument("blackbox_evaluate: no correctly classified samples to attack");
    BlackBoxResult r;
    r.attacked = chosen.size();
    r.samples.resize(chosen.size());
    parallel_for(chosen.size(), workers, [&](std::size_t k) {
        const std::size_t i = chosen[k];
        const Tensor x = data.inputs.slice_rows(i, i + 1).reshaped(sample);
        const AdversarialResult a = run_attack(proxy, x, data.labels[i], cfg, i);
        const std::size_t post = one(a.x_adv);
        r.samples[k] = {i, data.labels[i], pre[k], post, a.l2, a.linf, post != data.labels[i], a.iterations};
    });
    std::size_t robust = 0;
    for (const SampleOutcome& s : r.samples) robust += s.success ? 0 : 1;
    r.robust_accuracy = static_cast<double>(robust) / static_cast<double>(r.attacked);
    r.queries = target.queries() - before;
    return r;
}

nlohmann::json tensor_json(const Tensor& t) {
    if (t.rank() == 2) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < t.dim(0); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t j = 0; j < t.dim(1); ++j) row.push_back(t.at(i, j));
            rows.push_back(std::move(row));
        }
        return rows;
    }
    return nlohmann::json(t.to_vector());
}

nlohmann::json to_json(const MarginReport& r) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "margin";
    j["samples"] = r.samples;
    j["eta"] = r.eta;
    j["pair"] = {{"indices", {r.index_a, r.index_b}}, {"classes", {r.class_a, r.class_b}}};
    j["jacobian"] = {{"max", r.max_jacobian}, {"mean", r.mean_jacobian}};
    j["unbounded"] = r.unbounded;
    j["epsilon_lb"] = r.unbounded ? nlohmann::json(nullptr) : nlohmann::json(r.epsilon_lb);
    return j;
}

nlohmann::json to_json(const SeparabilityReport& r) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "separability";
    j["dbi"] = r.dbi;
    j["centroid_distances"] = tensor_json(r.centroid_distances);
    j["sigma"] = r.sigma;
    j["projection"] = tensor_json(r.projection);
    return j;
}

nlohmann::json to_json(const ConfusionReport& r) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "confusion";
    j["counts"] = r.counts;
    j["attacked"] = r.attacked;
    auto opt = [](const std::vector<std::optional<std::size_t>>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& x : v) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
        return a;
    };
    j["top_destination"] = opt(r.top_destination);
    j["nearest_centroid"] = opt(r.nearest_centroid);
    j["correspondences"] = r.correspondences;
    j["comparable"] = r.comparable;
    return j;
}

}  // namespace madlab
