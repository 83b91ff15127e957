#pragma once
// Independent reference implementations used by the tests. Nothing here calls
// into the graph; everything is straight loops over plain vectors.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "madlab/model.hpp"
#include "madlab/rng.hpp"
#include "madlab/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences of f at x with step h.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-5) {
    Vec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

inline Vec random_vec(madlab::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    Vec v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

inline double norm(const Vec& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Dense-only forward pass: z_{l+1} = W z_l + b, leaky relu where listed.
/// Returns every layer output for one sample.
inline std::vector<Vec> mlp_forward(const madlab::Network& net, const Vec& x) {
    std::vector<Vec> outs;
    Vec cur = x;
    const auto& spec = net.spec();
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& L = spec.layers[l];
        if (L.kind == madlab::LayerKind::Dense) {
            const auto& W = net.params()[l].weight;
            const auto& b = net.params()[l].bias;
            Vec next(L.out, 0.0);
            for (std::size_t o = 0; o < L.out; ++o) {
                double s = 0;
                for (std::size_t i = 0; i < L.in; ++i) s += W[o * L.in + i] * cur[i];
                next[o] = s + b[o];
            }
            cur = next;
        } else if (L.kind == madlab::LayerKind::LeakyRelu) {
            for (double& v : cur) v = v >= 0 ? v : L.slope * v;
        }
        outs.push_back(cur);
    }
    return outs;
}

inline double smoothed_ce(const Vec& logits, std::size_t label, double alpha) {
    const std::size_t m = logits.size();
    double denom = 0;
    for (double z : logits) denom += std::exp(z);
    double loss = 0;
    for (std::size_t k = 0; k < m; ++k) {
        const double t = k == label ? alpha : (1 - alpha) / static_cast<double>(m - 1);
        loss -= t * std::log(std::exp(logits[k]) / denom);
    }
    return loss;
}

inline double cosine(const Vec& a, const Vec& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
    return d / (std::max(norm(a), 1e-12) * std::max(norm(b), 1e-12));
}

struct Clusters {
    std::map<std::size_t, Vec> mu;
    std::map<std::size_t, double> sigma;
};

/// rows: n vectors of equal length.
inline Clusters clusters(const std::vector<Vec>& rows, const std::vector<std::size_t>& labels) {
    Clusters c;
    std::map<std::size_t, std::size_t> count;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& m = c.mu[labels[i]];
        if (m.empty()) m.assign(rows[i].size(), 0.0);
        for (std::size_t k = 0; k < rows[i].size(); ++k) m[k] += rows[i][k];
        ++count[labels[i]];
    }
    for (auto& [cls, m] : c.mu)
        for (double& v : m) v /= static_cast<double>(count[cls]);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Vec& m = c.mu[labels[i]];
        double s = 0;
        for (std::size_t k = 0; k < m.size(); ++k) s += (rows[i][k] - m[k]) * (rows[i][k] - m[k]);
        c.sigma[labels[i]] += std::sqrt(s) / static_cast<double>(count[labels[i]]);
    }
    return c;
}

inline double dist(const Vec& a, const Vec& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
}

inline double rvl(const std::vector<Vec>& rows, const std::vector<std::size_t>& labels) {
    const Clusters c = clusters(rows, labels);
    double s = 0;
    for (const auto& [cls, sg] : c.sigma) s += sg;
    return s / static_cast<double>(c.sigma.size());
}

inline double dbi(const std::vector<Vec>& rows, const std::vector<std::size_t>& labels) {
    const Clusters c = clusters(rows, labels);
    double total = 0;
    for (const auto& [i, mi] : c.mu) {
        double worst = 0;
        for (const auto& [j, mj] : c.mu) {
            if (i == j) continue;
            worst = std::max(worst, (c.sigma.at(i) + c.sigma.at(j)) / dist(mi, mj));
        }
        total += worst;
    }
    return total / static_cast<double>(c.mu.size());
}

/// Smallest distance between rows with different labels.
inline double margin(const std::vector<Vec>& rows, const std::vector<std::size_t>& labels) {
    double best = INFINITY;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j)
            if (labels[i] != labels[j]) best = std::min(best, dist(rows[i], rows[j]));
    return best;
}

inline std::vector<Vec> rows_of(const madlab::Tensor& t) {
    const std::size_t n = t.dim(0), d = t.size() / n;
    std::vector<Vec> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i].assign(t.ptr() + i * d, t.ptr() + (i + 1) * d);
    return out;
}

}  // namespace oracle
