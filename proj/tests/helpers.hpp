#pragma once

// Shared test utilities: independent oracles (finite differences, naive
// loops) and small fixture builders. Everything here is deliberately written
// without reusing the library's gradient/curvature code paths.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "ccbm/common.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/model.hpp"

namespace ccbm::testing {

/// Central finite differences of a scalar function; step 1e-5 per coordinate.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double step = 1e-5) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = step * (1.0 + std::abs(x[i]));
        xp[i] = x[i] + h;
        const double fp = f(xp);
        xp[i] = x[i] - h;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Naive scalar-loop BCE concept loss; independent of the library forward.
inline double naive_concept_loss(const ConceptPredictor& g, const Dataset& d, double delta) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        const Eigen::VectorXd x = d.inputs.row(i);
        // Re-implement the forward pass with explicit loops.
        std::vector<double> act(x.begin(), x.end());
        for (int l = 0; l < g.num_layers(); ++l) {
            const auto m = g.layer_matrix(l);
            std::vector<double> next(g.layers()[l].out, 0.0);
            for (int r = 0; r < g.layers()[l].out; ++r) {
                double o = m(r, g.layers()[l].in);
                for (int c = 0; c < g.layers()[l].in; ++c) o += m(r, c) * act[c];
                next[r] = l + 1 < g.num_layers() ? std::tanh(o) : o;
            }
            act = next;
        }
        for (int j = 0; j < g.concept_dim(); ++j) {
            const double p = 1.0 / (1.0 + std::exp(-act[j]));
            const double c = d.concepts(i, j);
            total += -c * std::log(p) - (1.0 - c) * std::log(1.0 - p);
        }
    }
    return total + 0.5 * delta * g.params().squaredNorm();
}

inline double naive_label_loss(const LabelPredictor& f, const Eigen::MatrixXd& C,
                               const Eigen::VectorXi& y, double delta) {
    double total = 0.0;
    const auto m = f.matrix();
    for (Eigen::Index i = 0; i < C.rows(); ++i) {
        std::vector<double> z(f.num_classes());
        for (int r = 0; r < f.num_classes(); ++r) {
            z[r] = m(r, f.input_dim());
            for (int c = 0; c < f.input_dim(); ++c) z[r] += m(r, c) * C(i, c);
        }
        double denom = 0.0;
        for (double v : z) denom += std::exp(v);
        total += -std::log(std::exp(z[y[i]]) / denom);
    }
    return total + 0.5 * delta * f.params().squaredNorm();
}

/// Small random instances.
inline Dataset random_dataset(Eigen::Index n, int d_in, int k, int d_o, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.num_classes = d_o;
    d.inputs.resize(n, d_in);
    d.concepts.resize(n, k);
    d.labels.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < d_in; ++c) d.inputs(i, c) = rng.normal();
        for (int j = 0; j < k; ++j) d.concepts(i, j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        d.labels[i] = static_cast<int>(rng.index(d_o));
        d.ids.push_back(static_cast<std::uint64_t>(i));
    }
    return d;
}

inline void randomize_params(Eigen::VectorXd& theta, std::uint64_t seed, double scale = 0.5) {
    Rng rng(seed);
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = scale * rng.normal();
}

}  // namespace ccbm::testing
