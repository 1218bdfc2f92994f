#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "ccbm/common.hpp"
#include "ccbm/curvature.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/model.hpp"
#include "helpers.hpp"

using namespace ccbm;
using namespace ccbm::testing;

namespace {

Dataset empty_like(int d_in, int k, int d_o) {
    Dataset d;
    d.inputs.resize(0, d_in);
    d.concepts.resize(0, k);
    d.labels.resize(0);
    d.num_classes = d_o;
    return d;
}

/// Per-sample total-loss gradient of the concept predictor, assembled from
/// the single-concept entry points (independent of the batched path).
Eigen::VectorXd concept_sample_grad(const ConceptPredictor& g, const Dataset& d, Eigen::Index i) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(g.param_count());
    for (int j = 0; j < g.concept_dim(); ++j) {
        v += grad_concept_loss_single(g, d.inputs.row(i), d.concepts.row(i), j);
    }
    return v;
}

}  // namespace

TEST_CASE("label Hessian: hand-evaluated softmax covariance at p = (.5,.5)") {
    // One sample, W = 0, b = 0, two classes, one concept with value 1.
    LabelPredictor f(1, 2);
    Eigen::MatrixXd C(1, 1);
    C(0, 0) = 1.0;
    const double delta = 1e-3;
    const CurvatureOperator op = label_exact_hessian(f, C, delta);

    Eigen::MatrixXd softmax_cov(2, 2);
    softmax_cov << 0.25, -0.25, -0.25, 0.25;
    Eigen::MatrixXd expected_weight_block = softmax_cov;
    expected_weight_block.diagonal().array() += delta;
    CHECK((op.dense.topLeftCorner(2, 2) - expected_weight_block).cwiseAbs().maxCoeff() < 1e-12);

    // With the concept value 1 the cross block between weights and bias is
    // the plain softmax covariance (no damping off the diagonal).
    CHECK((op.dense.block(0, 2, 2, 2) - softmax_cov).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("label Hessian matches finite differences of the analytic gradient") {
    const Dataset d = random_dataset(12, 4, 3, 4, 31);
    LabelPredictor f(3, 4);
    randomize_params(f.params(), 8);
    const Eigen::MatrixXd C = d.concepts;
    const double delta = 1e-2;
    const CurvatureOperator op = label_exact_hessian(f, C, delta);

    LabelPredictor scratch = f;
    Eigen::MatrixXd fd(f.param_count(), f.param_count());
    for (Eigen::Index c = 0; c < f.param_count(); ++c) {
        const double eps = 1e-6;
        scratch.params() = f.params();
        scratch.params()[c] += eps;
        Eigen::VectorXd gp = Eigen::VectorXd::Zero(f.param_count());
        for (Eigen::Index i = 0; i < d.n(); ++i) {
            gp += grad_label_loss_single(scratch, C.row(i), d.labels[i]);
        }
        scratch.params()[c] = f.params()[c] - eps;
        Eigen::VectorXd gm = Eigen::VectorXd::Zero(f.param_count());
        for (Eigen::Index i = 0; i < d.n(); ++i) {
            gm += grad_label_loss_single(scratch, C.row(i), d.labels[i]);
        }
        fd.col(c) = (gp - gm) / (2.0 * eps);
    }
    fd.diagonal().array() += delta;
    CHECK((op.dense - fd).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("empty dataset curvature is the damping alone") {
    ConceptPredictor g(ConceptArch::Linear, 3, 2);
    const Dataset none = empty_like(3, 2, 2);
    const double delta = 0.7;
    for (auto op : {concept_exact_hessian(g, none, delta), concept_damped_fisher(g, none, delta)}) {
        CHECK((op.dense - delta * Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-12);
        Eigen::VectorXd v(8);
        randomize_params(v, 3);
        CHECK((op.ihvp(v) - v / delta).norm() < 1e-12);
    }
    const CurvatureOperator ek = concept_ekfac(g, none, delta);
    Eigen::VectorXd v(8);
    randomize_params(v, 4);
    CHECK((ek.ihvp(v) - v / delta).norm() < 1e-12);
}

TEST_CASE("dense payloads are symmetric") {
    const Dataset d = random_dataset(15, 4, 3, 3, 5);
    ConceptPredictor g(ConceptArch::Mlp, 4, 3, 5);
    randomize_params(g.params(), 12);
    const CurvatureOperator h = concept_exact_hessian(g, d, 1e-3);
    CHECK((h.dense - h.dense.transpose()).cwiseAbs().maxCoeff() < 1e-8);
    const CurvatureOperator fis = concept_damped_fisher(g, d, 1e-3);
    CHECK((fis.dense - fis.dense.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("one-sample Fisher is the gradient outer product plus damping") {
    Dataset d = random_dataset(1, 3, 2, 2, 6);
    ConceptPredictor g(ConceptArch::Linear, 3, 2);
    randomize_params(g.params(), 9);
    const double delta = 0.05;
    const CurvatureOperator op = concept_damped_fisher(g, d, delta);
    const Eigen::VectorXd v = concept_sample_grad(g, d, 0);
    const Eigen::MatrixXd expected =
        v * v.transpose() + delta * Eigen::MatrixXd::Identity(v.size(), v.size());
    CHECK((op.dense - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Fisher minimum eigenvalue respects the damping floor") {
    const Dataset d = random_dataset(25, 4, 3, 3, 7);
    ConceptPredictor g(ConceptArch::Mlp, 4, 3, 4);
    randomize_params(g.params(), 14);
    const double delta = 1e-2;
    const CurvatureOperator op = concept_damped_fisher(g, d, delta);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(op.dense);
    CHECK(es.eigenvalues().minCoeff() >= delta - 1e-10);
}

TEST_CASE("Fisher matches the naive outer-product loop") {
    const Dataset d = random_dataset(10, 3, 3, 2, 8);
    ConceptPredictor g(ConceptArch::Linear, 3, 3);
    randomize_params(g.params(), 15);
    const double delta = 0.01;
    const CurvatureOperator op = concept_damped_fisher(g, d, delta);

    Eigen::MatrixXd naive =
        delta * Eigen::MatrixXd::Identity(g.param_count(), g.param_count());
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        const Eigen::VectorXd v = concept_sample_grad(g, d, i);
        naive += v * v.transpose();
    }
    CHECK((op.dense - naive).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("EK-FAC with one sample reproduces the rank-one curvature exactly") {
    Dataset d = random_dataset(1, 4, 3, 2, 16);
    ConceptPredictor g(ConceptArch::Linear, 4, 3);
    randomize_params(g.params(), 23);
    const double lambda = 0.02;
    const CurvatureOperator ek = concept_ekfac(g, d, lambda);
    const Eigen::VectorXd grad = concept_sample_grad(g, d, 0);

    Rng rng(77);
    for (int t = 0; t < 10; ++t) {
        Eigen::VectorXd u(g.param_count());
        for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = rng.normal();
        const Eigen::VectorXd expected = grad * grad.dot(u) + lambda * u;
        CHECK((ek.apply(u) - expected).norm() / expected.norm() < 1e-10);
    }
}

TEST_CASE("EK-FAC eigenvector factors are orthonormal") {
    const Dataset d = random_dataset(30, 5, 4, 3, 29);
    ConceptPredictor g(ConceptArch::Mlp, 5, 4, 6);
    randomize_params(g.params(), 31);
    const CurvatureOperator ek = concept_ekfac(g, d, 1e-3);
    for (const auto& l : ek.layers) {
        const Eigen::MatrixXd io =
            l.q_omega.transpose() * l.q_omega -
            Eigen::MatrixXd::Identity(l.q_omega.cols(), l.q_omega.cols());
        const Eigen::MatrixXd ig =
            l.q_gamma.transpose() * l.q_gamma -
            Eigen::MatrixXd::Identity(l.q_gamma.cols(), l.q_gamma.cols());
        CHECK(io.cwiseAbs().maxCoeff() < 1e-8);
        CHECK(ig.cwiseAbs().maxCoeff() < 1e-8);
        CHECK(l.lambda_corr.minCoeff() >= 0.0);
    }
}

TEST_CASE("corrected eigenvalues match the naive per-sample projection loop") {
    const Dataset d = random_dataset(20, 4, 3, 2, 37);
    ConceptPredictor g(ConceptArch::Mlp, 4, 3, 5);
    randomize_params(g.params(), 41);
    const CurvatureOperator ek = concept_ekfac(g, d, 1e-3);

    const ConceptBatch b = concept_batch(g, d.inputs, d.concepts);
    for (int l = 0; l < g.num_layers(); ++l) {
        const auto& factors = ek.layers[l];
        Eigen::MatrixXd naive = Eigen::MatrixXd::Zero(factors.shape.out, factors.shape.in + 1);
        for (Eigen::Index i = 0; i < d.n(); ++i) {
            Eigen::VectorXd h(factors.shape.in + 1);
            h.head(factors.shape.in) = b.layer_inputs[l].row(i);
            h[factors.shape.in] = 1.0;
            const Eigen::MatrixXd gi = b.layer_deltas[l].row(i).transpose() * h.transpose();
            const Eigen::MatrixXd proj =
                factors.q_gamma.transpose() * gi * factors.q_omega;
            naive += proj.array().square().matrix();
        }
        naive /= static_cast<double>(d.n());
        CHECK((naive - factors.lambda_corr).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("dense ihvp agrees with an independent full-pivot solve") {
    Rng rng(53);
    const int n = 20;
    Eigen::MatrixXd a(n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) a(r, c) = rng.normal();
    }
    Eigen::MatrixXd spd = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);

    CurvatureOperator op;
    op.kind = CurvatureKind::DampedFisher;
    op.delta = 0.5;
    op.dense = spd;
    op.finalize();

    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = rng.normal();
    const Eigen::VectorXd mine = op.ihvp(v);
    const Eigen::VectorXd reference = Eigen::FullPivLU<Eigen::MatrixXd>(spd).solve(v);
    CHECK((mine - reference).norm() / reference.norm() < 1e-8);
}

TEST_CASE("ihvp inverts the forward action for every kind") {
    const Dataset d = random_dataset(18, 4, 3, 3, 61);
    ConceptPredictor g(ConceptArch::Mlp, 4, 3, 4);
    randomize_params(g.params(), 67);
    CbmModel m;
    m.g = g;
    m.f = LabelPredictor(3, 3);
    randomize_params(m.f.params(), 68);

    Rng rng(71);
    for (CurvatureKind kind :
         {CurvatureKind::ExactHessian, CurvatureKind::DampedFisher, CurvatureKind::EkFac}) {
        for (PredictorTarget target : {PredictorTarget::Concept, PredictorTarget::Label}) {
            const CurvatureOperator op = fit_curvature(kind, target, m, d, 0.05);
            Eigen::VectorXd v(op.dim());
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
            const Eigen::VectorXd back = op.ihvp(op.apply(v));
            CHECK((back - v).norm() / v.norm() < 1e-6);
        }
    }
}

TEST_CASE("EK-FAC forward action is symmetric positive semidefinite") {
    const Dataset d = random_dataset(22, 4, 3, 2, 73);
    ConceptPredictor g(ConceptArch::Mlp, 4, 3, 5);
    randomize_params(g.params(), 79);
    const CurvatureOperator ek = concept_ekfac(g, d, 1e-4);
    Rng rng(83);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd v(g.param_count()), w(g.param_count());
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
        for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.normal();
        CHECK(v.dot(ek.apply(v)) >= 0.0);
        CHECK(v.dot(ek.apply(w)) == doctest::Approx(w.dot(ek.apply(v))).epsilon(1e-10));
    }
}

TEST_CASE("EK-FAC approximates the dense Fisher action on a single layer") {
    // Concept targets drawn independently of the inputs, so the expected
    // curvature really factors as input-covariance x gradient-covariance and
    // only finite-sample fluctuation separates EK-FAC from the dense Fisher.
    const Eigen::Index n = 600;
    Rng rng(20);
    Dataset d;
    d.num_classes = 2;
    d.inputs.resize(n, 5);
    d.concepts.resize(n, 4);
    d.labels = Eigen::VectorXi::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < 5; ++c) d.inputs(i, c) = rng.normal();
        for (int j = 0; j < 4; ++j) d.concepts(i, j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        d.ids.push_back(static_cast<std::uint64_t>(i));
    }
    ConceptPredictor g(ConceptArch::Linear, 5, 4);
    randomize_params(g.params(), 97, 0.2);
    const double delta = 0.01;
    const CurvatureOperator ek = concept_ekfac(g, d, delta);
    const CurvatureOperator dense = concept_damped_fisher(g, d, delta);

    Rng vr(101);
    double worst = 0.0;
    for (int t = 0; t < 12; ++t) {
        Eigen::VectorXd v(g.param_count());
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = vr.normal();
        const Eigen::VectorXd a = ek.ihvp(v);
        const Eigen::VectorXd b = dense.ihvp(v);
        worst = std::max(worst, (a - b).norm() / b.norm());
    }
    CHECK(worst < 0.3);
}

TEST_CASE("EK-FAC is exact for whitened rank-complete statistics") {
    // One sample per (output, input-direction) grid cell, each contributing a
    // gradient along a distinct Kronecker eigendirection. The factored
    // curvature then equals the dense Fisher, so the inverse actions agree to
    // solver precision.
    const int d_in = 3, k = 3;
    const int in_h = d_in + 1;
    Rng rng(113);

    // Orthonormal input basis whose vectors can be rescaled to homogeneous
    // form [x; 1], plus an orthonormal gradient basis.
    Eigen::MatrixXd raw(in_h, in_h);
    for (int r = 0; r < in_h; ++r) {
        for (int c = 0; c < in_h; ++c) raw(r, c) = rng.normal();
    }
    const Eigen::MatrixXd basis_in = Eigen::HouseholderQR<Eigen::MatrixXd>(raw)
                                         .householderQ() *
                                     Eigen::MatrixXd::Identity(in_h, in_h);
    Eigen::MatrixXd raw2(k, k);
    for (int r = 0; r < k; ++r) {
        for (int c = 0; c < k; ++c) raw2(r, c) = rng.normal();
    }
    const Eigen::MatrixXd basis_out = Eigen::HouseholderQR<Eigen::MatrixXd>(raw2)
                                          .householderQ() *
                                      Eigen::MatrixXd::Identity(k, k);

    Dataset d;
    d.num_classes = 2;
    d.inputs.resize(k * in_h, d_in);
    d.concepts.resize(k * in_h, k);
    d.labels = Eigen::VectorXi::Zero(k * in_h);
    Eigen::Index row = 0;
    for (int u = 0; u < k; ++u) {
        for (int v = 0; v < in_h; ++v) {
            const Eigen::VectorXd b = basis_in.col(v) / basis_in(in_h - 1, v);
            d.inputs.row(row) = b.head(d_in);
            // Zero parameters give probability .5, so the pre-activation
            // residual is .5 - c; aim it along the u-th gradient basis vector
            // with a cell-specific magnitude.
            const double alpha = 0.05 + 0.017 * (u * in_h + v);
            d.concepts.row(row) =
                (Eigen::VectorXd::Constant(k, 0.5) - alpha * basis_out.col(u)).transpose();
            d.ids.push_back(static_cast<std::uint64_t>(row));
            ++row;
        }
    }
    d.validate();

    ConceptPredictor g(ConceptArch::Linear, d_in, k);  // zero parameters
    const double delta = 1e-3;
    const CurvatureOperator ek = concept_ekfac(g, d, delta);
    const CurvatureOperator dense = concept_damped_fisher(g, d, delta);

    Rng vr(127);
    for (int t = 0; t < 8; ++t) {
        Eigen::VectorXd v(g.param_count());
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = vr.normal();
        const Eigen::VectorXd a = ek.ihvp(v);
        const Eigen::VectorXd b = dense.ihvp(v);
        CHECK((a - b).norm() / b.norm() < 1e-6);
    }
}

TEST_CASE("dense builders refuse oversized parameter counts") {
    ConceptPredictor g(ConceptArch::Mlp, 100, 10, 100);
    REQUIRE(g.param_count() > kDenseParamLimit);
    const Dataset d = random_dataset(3, 100, 10, 2, 131);
    CHECK_THROWS_AS(concept_exact_hessian(g, d, 1e-3), std::invalid_argument);
    CHECK_THROWS_AS(concept_damped_fisher(g, d, 1e-3), std::invalid_argument);
}

TEST_CASE("singular operators raise a numerical error on ihvp") {
    Dataset d = random_dataset(1, 3, 2, 2, 137);
    ConceptPredictor g(ConceptArch::Linear, 3, 2);
    randomize_params(g.params(), 139);
    const CurvatureOperator op = concept_damped_fisher(g, d, 0.0);  // rank one, no damping
    Eigen::VectorXd v(g.param_count());
    randomize_params(v, 149);
    CHECK_THROWS_AS(op.ihvp(v), NumericalError);
}

TEST_CASE("concept subspace coordinates follow the reduced column-major layout") {
    ConceptPredictor g(ConceptArch::Mlp, 3, 4, 2);
    const std::vector<int> kept = {0, 2, 3};
    const auto coords = concept_subspace_coords(g, kept);
    // Hidden layer untouched: 2*(3+1) = 8 coordinates, then 3 of 4 rows in
    // each of the (2+1) final-layer columns.
    CHECK(coords.size() == 8 + 3 * 3);
    for (std::size_t i = 0; i + 1 < coords.size(); ++i) CHECK(coords[i] < coords[i + 1]);
    const Eigen::Index final_off = g.layer_offset(1);
    CHECK(coords[8] == final_off + 0);
    CHECK(coords[9] == final_off + 2);
    CHECK(coords[10] == final_off + 3);
    CHECK(coords[11] == final_off + 4);  // second column starts at row 0
}
