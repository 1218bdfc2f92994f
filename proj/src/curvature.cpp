#include "ccbm/curvature.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "ccbm/common.hpp"

namespace ccbm {

namespace {

Eigen::MatrixXd with_ones(const Eigen::MatrixXd& a) {
    Eigen::MatrixXd h(a.rows(), a.cols() + 1);
    h.leftCols(a.cols()) = a;
    h.col(a.cols()).setOnes();
    return h;
}

std::vector<int> all_concepts(const ConceptPredictor& g) {
    std::vector<int> v(g.concept_dim());
    for (int j = 0; j < g.concept_dim(); ++j) v[j] = j;
    return v;
}

void check_dense_limit(Eigen::Index dim) {
    if (dim > kDenseParamLimit) {
        throw std::invalid_argument("dense curvature: parameter count " + std::to_string(dim) +
                                    " exceeds limit " + std::to_string(kDenseParamLimit));
    }
}

Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& coords) {
    Eigen::VectorXd out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) out[i] = v[coords[i]];
    return out;
}

}  // namespace

Eigen::Index CurvatureOperator::dim() const {
    if (kind == CurvatureKind::EkFac) {
        Eigen::Index total = 0;
        for (const auto& l : layers) total += l.shape.param_count();
        return total;
    }
    return dense.rows();
}

void CurvatureOperator::finalize() {
    if (kind == CurvatureKind::EkFac) return;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense);
    if (es.info() != Eigen::Success) {
        throw NumericalError("curvature eigendecomposition failed (non-finite inputs?)");
    }
    eigvecs = es.eigenvectors();
    eigvals = es.eigenvalues();
}

Eigen::VectorXd CurvatureOperator::apply(const Eigen::VectorXd& v) const {
    if (v.size() != dim()) throw std::invalid_argument("apply: dimension mismatch");
    if (kind != CurvatureKind::EkFac) return dense * v;

    Eigen::VectorXd out(v.size());
    Eigen::Index pos = 0;
    for (const auto& l : layers) {
        const Eigen::Map<const Eigen::MatrixXd> V(v.data() + pos, l.shape.out, l.shape.in + 1);
        const double n = static_cast<double>(n_samples);
        Eigen::MatrixXd P = l.q_gamma.transpose() * V * l.q_omega;
        P.array() *= (n * l.lambda_corr.array() + l.damping);
        const Eigen::MatrixXd X = l.q_gamma * P * l.q_omega.transpose();
        out.segment(pos, l.shape.param_count()) =
            Eigen::Map<const Eigen::VectorXd>(X.data(), X.size());
        pos += l.shape.param_count();
    }
    return out;
}

Eigen::VectorXd CurvatureOperator::ihvp(const Eigen::VectorXd& v) const {
    if (v.size() != dim()) throw std::invalid_argument("ihvp: dimension mismatch");
    if (kind == CurvatureKind::EkFac) {
        Eigen::VectorXd out(v.size());
        Eigen::Index pos = 0;
        for (const auto& l : layers) {
            const Eigen::Map<const Eigen::MatrixXd> V(v.data() + pos, l.shape.out, l.shape.in + 1);
            const double n = static_cast<double>(n_samples);
            Eigen::MatrixXd P = l.q_gamma.transpose() * V * l.q_omega;
            P.array() /= (n * l.lambda_corr.array() + l.damping);
            if (!P.allFinite()) {
                throw NumericalError("ihvp: singular EK-FAC factors (zero damping?)");
            }
            const Eigen::MatrixXd X = l.q_gamma * P * l.q_omega.transpose();
            out.segment(pos, l.shape.param_count()) =
                Eigen::Map<const Eigen::VectorXd>(X.data(), X.size());
            pos += l.shape.param_count();
        }
        return out;
    }
    const double max_abs = eigvals.size() ? eigvals.cwiseAbs().maxCoeff() : 0.0;
    const double floor = std::max(1e-14 * max_abs, 1e-300);
    if (eigvals.size() == 0 || eigvals.cwiseAbs().minCoeff() <= floor) {
        throw NumericalError("ihvp: singular curvature operator (delta = 0?)");
    }
    return eigvecs * (eigvecs.transpose() * v).cwiseQuotient(eigvals);
}

std::vector<Eigen::Index> concept_subspace_coords(const ConceptPredictor& g,
                                                  const std::vector<int>& kept_rows) {
    std::vector<bool> keep(g.concept_dim(), false);
    for (int r : kept_rows) keep.at(r) = true;
    std::vector<Eigen::Index> coords;
    coords.reserve(g.param_count());
    const int last = g.final_layer();
    for (int l = 0; l < g.num_layers(); ++l) {
        const Eigen::Index off = g.layer_offset(l);
        const auto& s = g.layers()[l];
        for (int idx = 0; idx < s.param_count(); ++idx) {
            if (l == last && !keep[idx % s.out]) continue;  // column-major: row = idx % out
            coords.push_back(off + idx);
        }
    }
    return coords;
}

namespace {

struct ConceptFitContext {
    std::vector<int> include;
    std::vector<Eigen::Index> coords;  // empty = full space
    int reduced_final_out = -1;        // -1 = untouched
};

ConceptFitContext make_context(const ConceptPredictor& g, const ConceptCurvatureSpec& spec) {
    ConceptFitContext ctx;
    ctx.include = spec.include_concepts.empty() ? all_concepts(g) : spec.include_concepts;
    for (int j : ctx.include) {
        if (j < 0 || j >= g.concept_dim()) {
            throw std::invalid_argument("curvature: concept index out of range");
        }
    }
    if (spec.restrict_final_rows) {
        ctx.coords = concept_subspace_coords(g, ctx.include);
        ctx.reduced_final_out = static_cast<int>(ctx.include.size());
    }
    return ctx;
}

}  // namespace

CurvatureOperator concept_exact_hessian(const ConceptPredictor& g, const Dataset& d, double delta,
                                        const ConceptCurvatureSpec& spec) {
    const ConceptFitContext ctx = make_context(g, spec);
    const Eigen::Index full = g.param_count();
    const std::vector<Eigen::Index> coords = ctx.coords.empty()
                                                 ? [&] {
                                                       std::vector<Eigen::Index> c(full);
                                                       for (Eigen::Index i = 0; i < full; ++i)
                                                           c[i] = i;
                                                       return c;
                                                   }()
                                                 : ctx.coords;
    const Eigen::Index dim = static_cast<Eigen::Index>(coords.size());
    check_dense_limit(dim);

    ConceptPredictor scratch = g;
    auto masked_grad = [&](void) -> Eigen::VectorXd {
        if (d.n() == 0) return Eigen::VectorXd::Zero(full);
        const ConceptBatch b = concept_batch(scratch, d.inputs, d.concepts, &ctx.include);
        return b.total_gradient(scratch);
    };

    Eigen::MatrixXd h(dim, dim);
    for (Eigen::Index c = 0; c < dim; ++c) {
        const Eigen::Index idx = coords[c];
        const double theta = g.params()[idx];
        const double eps = spec.fd_step * (1.0 + std::abs(theta));
        scratch.params() = g.params();
        scratch.params()[idx] = theta + eps;
        const Eigen::VectorXd gp = masked_grad();
        scratch.params()[idx] = theta - eps;
        const Eigen::VectorXd gm = masked_grad();
        h.col(c) = gather((gp - gm) / (2.0 * eps), coords);
    }
    h = 0.5 * (h + h.transpose()).eval();
    h.diagonal().array() += delta;

    CurvatureOperator op;
    op.kind = CurvatureKind::ExactHessian;
    op.target = PredictorTarget::Concept;
    op.delta = delta;
    op.n_samples = d.n();
    op.dense = std::move(h);
    op.finalize();
    return op;
}

CurvatureOperator concept_damped_fisher(const ConceptPredictor& g, const Dataset& d, double delta,
                                        const ConceptCurvatureSpec& spec) {
    const ConceptFitContext ctx = make_context(g, spec);
    const Eigen::Index dim =
        ctx.coords.empty() ? g.param_count() : static_cast<Eigen::Index>(ctx.coords.size());
    check_dense_limit(dim);

    Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(dim, dim);
    if (d.n() > 0) {
        const ConceptBatch b = concept_batch(g, d.inputs, d.concepts, &ctx.include);
        Eigen::MatrixXd grads(dim, d.n());  // one column per sample
        for (Eigen::Index i = 0; i < d.n(); ++i) {
            Eigen::VectorXd gi = b.sample_gradient(g, i);
            if (!ctx.coords.empty()) gi = gather(gi, ctx.coords);
            grads.col(i) = gi;
        }
        fisher.selfadjointView<Eigen::Lower>().rankUpdate(grads, 1.0);
        fisher.triangularView<Eigen::StrictlyUpper>() =
            fisher.triangularView<Eigen::StrictlyLower>().transpose();
    }
    fisher.diagonal().array() += delta;

    CurvatureOperator op;
    op.kind = CurvatureKind::DampedFisher;
    op.target = PredictorTarget::Concept;
    op.delta = delta;
    op.n_samples = d.n();
    op.dense = std::move(fisher);
    op.finalize();
    return op;
}

namespace {

EkfacLayerFactors ekfac_layer(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& deltas,
                              double lambda) {
    const Eigen::Index n = inputs.rows();
    EkfacLayerFactors f;
    f.shape = {static_cast<int>(inputs.cols()), static_cast<int>(deltas.cols())};
    f.damping = lambda;

    const Eigen::MatrixXd h = with_ones(inputs);
    const double scale = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
    f.omega = scale * (h.transpose() * h);
    f.gamma = scale * (deltas.transpose() * deltas);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eo(f.omega);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eg(f.gamma);
    if (eo.info() != Eigen::Success || eg.info() != Eigen::Success) {
        throw NumericalError("ekfac_fit: eigendecomposition failed (non-finite inputs?)");
    }
    f.q_omega = eo.eigenvectors();
    f.q_gamma = eg.eigenvectors();

    // Corrected eigenvalues: exact diagonal of the mean gradient second
    // moment in the Kronecker eigenbasis, batched as projected row products.
    const Eigen::MatrixXd ph = h * f.q_omega;        // n x (in+1)
    const Eigen::MatrixXd pd = deltas * f.q_gamma;   // n x out
    f.lambda_corr = Eigen::MatrixXd::Zero(deltas.cols(), h.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        f.lambda_corr += (pd.row(i).transpose() * ph.row(i)).array().square().matrix();
    }
    f.lambda_corr *= scale;
    return f;
}

}  // namespace

CurvatureOperator concept_ekfac(const ConceptPredictor& g, const Dataset& d, double lambda,
                                const ConceptCurvatureSpec& spec) {
    const ConceptFitContext ctx = make_context(g, spec);
    CurvatureOperator op;
    op.kind = CurvatureKind::EkFac;
    op.target = PredictorTarget::Concept;
    op.delta = lambda;
    op.n_samples = d.n();

    ConceptBatch b;
    if (d.n() > 0) {
        b = concept_batch(g, d.inputs, d.concepts, &ctx.include);
    } else {
        for (int l = 0; l < g.num_layers(); ++l) {
            b.layer_inputs.emplace_back(0, g.layers()[l].in);
            b.layer_deltas.emplace_back(0, g.layers()[l].out);
        }
    }
    for (int l = 0; l < g.num_layers(); ++l) {
        Eigen::MatrixXd deltas = b.layer_deltas[l];
        if (l == g.final_layer() && ctx.reduced_final_out >= 0) {
            // Row restriction: keep only the retained concepts' rows.
            Eigen::MatrixXd reduced(deltas.rows(), ctx.include.size());
            for (std::size_t c = 0; c < ctx.include.size(); ++c) {
                reduced.col(c) = deltas.col(ctx.include[c]);
            }
            deltas = std::move(reduced);
        }
        op.layers.push_back(ekfac_layer(b.layer_inputs[l], deltas, lambda));
    }
    return op;
}

CurvatureOperator label_exact_hessian(const LabelPredictor& f, const Eigen::MatrixXd& C,
                                      double delta, bool exclude_bias) {
    const int d_o = f.num_classes();
    const int in = f.input_dim();
    const Eigen::Index dim = static_cast<Eigen::Index>(d_o) * (exclude_bias ? in : in + 1);
    check_dense_limit(dim);
    const int cols = exclude_bias ? in : in + 1;

    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    for (Eigen::Index i = 0; i < C.rows(); ++i) {
        const Eigen::VectorXd p = f.forward(C.row(i).transpose());
        const Eigen::MatrixXd s =
            Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();  // softmax covariance
        Eigen::VectorXd ct(cols);
        ct.head(in) = C.row(i);
        if (!exclude_bias) ct[in] = 1.0;
        for (int c1 = 0; c1 < cols; ++c1) {
            for (int c2 = 0; c2 < cols; ++c2) {
                h.block(c1 * d_o, c2 * d_o, d_o, d_o) += ct[c1] * ct[c2] * s;
            }
        }
    }
    h.diagonal().array() += delta;

    CurvatureOperator op;
    op.kind = CurvatureKind::ExactHessian;
    op.target = PredictorTarget::Label;
    op.delta = delta;
    op.n_samples = C.rows();
    op.dense = std::move(h);
    op.finalize();
    return op;
}

CurvatureOperator label_damped_fisher(const LabelPredictor& f, const Eigen::MatrixXd& C,
                                      const Eigen::VectorXi& y, double delta, bool exclude_bias) {
    const Eigen::Index weight_dim = static_cast<Eigen::Index>(f.num_classes()) * f.input_dim();
    const Eigen::Index dim = exclude_bias ? weight_dim : f.param_count();
    check_dense_limit(dim);

    Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(dim, dim);
    if (C.rows() > 0) {
        const LabelBatch b = label_batch(f, C, y);
        Eigen::MatrixXd grads(dim, C.rows());
        for (Eigen::Index i = 0; i < C.rows(); ++i) {
            Eigen::VectorXd gi = b.sample_gradient(f, i);
            if (exclude_bias) gi.conservativeResize(weight_dim);
            grads.col(i) = gi;
        }
        fisher.selfadjointView<Eigen::Lower>().rankUpdate(grads, 1.0);
        fisher.triangularView<Eigen::StrictlyUpper>() =
            fisher.triangularView<Eigen::StrictlyLower>().transpose();
    }
    fisher.diagonal().array() += delta;

    CurvatureOperator op;
    op.kind = CurvatureKind::DampedFisher;
    op.target = PredictorTarget::Label;
    op.delta = delta;
    op.n_samples = C.rows();
    op.dense = std::move(fisher);
    op.finalize();
    return op;
}

CurvatureOperator label_ekfac(const LabelPredictor& f, const Eigen::MatrixXd& C,
                              const Eigen::VectorXi& y, double lambda, bool exclude_bias) {
    if (exclude_bias) {
        throw std::invalid_argument("label_ekfac: bias exclusion is not representable");
    }
    CurvatureOperator op;
    op.kind = CurvatureKind::EkFac;
    op.target = PredictorTarget::Label;
    op.delta = lambda;
    op.n_samples = C.rows();
    if (C.rows() > 0) {
        const LabelBatch b = label_batch(f, C, y);
        op.layers.push_back(ekfac_layer(b.inputs, b.deltas, lambda));
    } else {
        op.layers.push_back(
            ekfac_layer(Eigen::MatrixXd(0, f.input_dim()), Eigen::MatrixXd(0, f.num_classes()),
                        lambda));
    }
    return op;
}

CurvatureOperator exact_hessian(PredictorTarget target, const CbmModel& m, const Dataset& d,
                                double delta) {
    if (target == PredictorTarget::Concept) return concept_exact_hessian(m.g, d, delta);
    return label_exact_hessian(m.f, label_inputs(m.g, d.inputs), delta, m.f.pure_linear());
}

CurvatureOperator damped_fisher(PredictorTarget target, const CbmModel& m, const Dataset& d,
                                double delta) {
    if (target == PredictorTarget::Concept) return concept_damped_fisher(m.g, d, delta);
    return label_damped_fisher(m.f, label_inputs(m.g, d.inputs), d.labels, delta,
                               m.f.pure_linear());
}

CurvatureOperator ekfac_fit(PredictorTarget target, const CbmModel& m, const Dataset& d,
                            double lambda) {
    if (target == PredictorTarget::Concept) return concept_ekfac(m.g, d, lambda);
    return label_ekfac(m.f, label_inputs(m.g, d.inputs), d.labels, lambda);
}

CurvatureOperator fit_curvature(CurvatureKind kind, PredictorTarget target, const CbmModel& m,
                                const Dataset& d, double delta) {
    switch (kind) {
        case CurvatureKind::ExactHessian: return exact_hessian(target, m, d, delta);
        case CurvatureKind::DampedFisher: return damped_fisher(target, m, d, delta);
        case CurvatureKind::EkFac: return ekfac_fit(target, m, d, delta);
    }
    throw std::invalid_argument("fit_curvature: unknown kind");
}

}  // namespace ccbm
