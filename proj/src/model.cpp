#include "ccbm/model.hpp"

#include <cmath>
#include <stdexcept>

#include "ccbm/common.hpp"

namespace ccbm {

namespace {

Eigen::MatrixXd with_ones(const Eigen::MatrixXd& a) {
    Eigen::MatrixXd h(a.rows(), a.cols() + 1);
    h.leftCols(a.cols()) = a;
    h.col(a.cols()).setOnes();
    return h;
}

inline double sigmoid(double o) {
    return o >= 0.0 ? 1.0 / (1.0 + std::exp(-o)) : std::exp(o) / (1.0 + std::exp(o));
}

inline double softplus(double o) {
    // log(1 + exp(o)) without overflow.
    return o > 0.0 ? o + std::log1p(std::exp(-o)) : std::log1p(std::exp(o));
}

}  // namespace

// ---- ConceptPredictor -----------------------------------------------------

ConceptPredictor::ConceptPredictor(ConceptArch arch, int d_in, int k, int hidden)
    : arch_(arch), d_in_(d_in), k_(k), hidden_(arch == ConceptArch::Mlp ? hidden : 0) {
    if (d_in < 1 || k < 1) throw std::invalid_argument("ConceptPredictor: bad dimensions");
    if (arch == ConceptArch::Mlp && hidden < 1) {
        throw std::invalid_argument("ConceptPredictor: hidden width must be positive");
    }
    if (arch == ConceptArch::Linear) {
        layers_ = {{d_in, k}};
    } else {
        layers_ = {{d_in, hidden}, {hidden, k}};
    }
    Eigen::Index total = 0;
    for (const auto& l : layers_) {
        offsets_.push_back(total);
        total += l.param_count();
    }
    params_ = Eigen::VectorXd::Zero(total);
}

Eigen::Index ConceptPredictor::layer_offset(int l) const { return offsets_.at(l); }

Eigen::Map<const Eigen::MatrixXd> ConceptPredictor::layer_matrix(int l) const {
    const auto& s = layers_.at(l);
    return {params_.data() + offsets_[l], s.out, s.in + 1};
}

Eigen::Map<Eigen::MatrixXd> ConceptPredictor::layer_matrix(int l) {
    const auto& s = layers_.at(l);
    return {params_.data() + offsets_[l], s.out, s.in + 1};
}

Eigen::VectorXd ConceptPredictor::forward(const Eigen::VectorXd& x) const {
    if (x.size() != d_in_) throw std::invalid_argument("forward: input dimension mismatch");
    Eigen::VectorXd a = x;
    for (int l = 0; l < num_layers(); ++l) {
        const auto m = layer_matrix(l);
        Eigen::VectorXd o = m.leftCols(a.size()) * a + m.col(a.size());
        if (l + 1 < num_layers()) {
            a = o.array().tanh();
        } else {
            a = o.unaryExpr([](double v) { return sigmoid(v); });
        }
    }
    return a;
}

Eigen::MatrixXd ConceptPredictor::forward_batch(const Eigen::MatrixXd& X) const {
    if (X.cols() != d_in_) throw std::invalid_argument("forward_batch: input dimension mismatch");
    Eigen::MatrixXd a = X;
    for (int l = 0; l < num_layers(); ++l) {
        const auto m = layer_matrix(l);
        Eigen::MatrixXd o = a * m.leftCols(a.cols()).transpose();
        o.rowwise() += m.col(a.cols()).transpose();
        if (l + 1 < num_layers()) {
            a = o.array().tanh();
        } else {
            a = o.unaryExpr([](double v) { return sigmoid(v); });
        }
    }
    return a;
}

// ---- LabelPredictor ---------------------------------------------------------

LabelPredictor::LabelPredictor(int k, int d_o, bool pure_linear)
    : shape_{k, d_o}, pure_linear_(pure_linear) {
    if (k < 1 || d_o < 2) throw std::invalid_argument("LabelPredictor: bad dimensions");
    params_ = Eigen::VectorXd::Zero(shape_.param_count());
}

Eigen::Map<const Eigen::MatrixXd> LabelPredictor::matrix() const {
    return {params_.data(), shape_.out, shape_.in + 1};
}

Eigen::Map<Eigen::MatrixXd> LabelPredictor::matrix() {
    return {params_.data(), shape_.out, shape_.in + 1};
}

void LabelPredictor::enforce_pure_linear() {
    if (pure_linear_) matrix().col(shape_.in).setZero();
}

Eigen::VectorXd LabelPredictor::logits(const Eigen::VectorXd& c) const {
    if (c.size() != shape_.in) throw std::invalid_argument("logits: concept dimension mismatch");
    const auto m = matrix();
    Eigen::VectorXd z(shape_.out);
    for (int r = 0; r < shape_.out; ++r) {
        double acc = m(r, shape_.in);  // bias
        for (int j = 0; j < shape_.in; ++j) acc += m(r, j) * c[j];
        z[r] = acc;
    }
    return z;
}

Eigen::VectorXd LabelPredictor::forward(const Eigen::VectorXd& c) const {
    return softmax(logits(c));
}

LabelPredictor LabelPredictor::drop_inputs(const std::vector<int>& concept_indices) const {
    std::vector<bool> drop(shape_.in, false);
    for (int j : concept_indices) {
        if (j < 0 || j >= shape_.in) throw std::invalid_argument("drop_inputs: index out of range");
        drop[j] = true;
    }
    const int kept = shape_.in - static_cast<int>(concept_indices.size());
    LabelPredictor out(kept, shape_.out, pure_linear_);
    auto src = matrix();
    auto dst = out.matrix();
    int col = 0;
    for (int j = 0; j < shape_.in; ++j) {
        if (drop[j]) continue;
        dst.col(col++) = src.col(j);
    }
    dst.col(kept) = src.col(shape_.in);
    return out;
}

// ---- elementary numerics ----------------------------------------------------

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
    const double m = z.maxCoeff();
    Eigen::VectorXd e = (z.array() - m).exp();
    return e / e.sum();
}

double cross_entropy_from_logits(const Eigen::VectorXd& z, int y) {
    if (y < 0 || y >= z.size()) throw std::invalid_argument("cross_entropy: label out of range");
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    return lse - z[y];
}

double bce_from_logit(double o, double target) {
    // -c log sigmoid(o) - (1-c) log(1-sigmoid(o)) = softplus(o) - c*o
    return softplus(o) - target * o;
}

// ---- CbmModel ----------------------------------------------------------------

Eigen::VectorXi CbmModel::predict(const Eigen::MatrixXd& X) const {
    const Eigen::MatrixXd C = g.forward_batch(X);
    Eigen::VectorXi out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        Eigen::Index best;
        f.logits(C.row(i).transpose()).maxCoeff(&best);
        out[i] = static_cast<int>(best);
    }
    return out;
}

// ---- losses -------------------------------------------------------------------

namespace {

/// Pre-activations of the final concept layer for every sample, plus hidden
/// activations when present.
struct ConceptForward {
    std::vector<Eigen::MatrixXd> layer_inputs;  // per layer, n x in
    Eigen::MatrixXd final_pre;                  // n x k
};

ConceptForward concept_forward(const ConceptPredictor& g, const Eigen::MatrixXd& X) {
    ConceptForward fw;
    Eigen::MatrixXd a = X;
    for (int l = 0; l < g.num_layers(); ++l) {
        fw.layer_inputs.push_back(a);
        const auto m = g.layer_matrix(l);
        Eigen::MatrixXd o = a * m.leftCols(a.cols()).transpose();
        o.rowwise() += m.col(a.cols()).transpose();
        if (l + 1 < g.num_layers()) {
            a = o.array().tanh();
        } else {
            fw.final_pre = std::move(o);
        }
    }
    return fw;
}

}  // namespace

double concept_loss(const ConceptPredictor& g, const Dataset& d, double delta) {
    if (!g.params().allFinite()) throw NumericalError("concept_loss: non-finite parameters");
    return concept_loss_terms(g, d).sum() + 0.5 * delta * g.params().squaredNorm();
}

Eigen::VectorXd concept_loss_terms(const ConceptPredictor& g, const Dataset& d) {
    const ConceptForward fw = concept_forward(g, d.inputs);
    Eigen::VectorXd terms = Eigen::VectorXd::Zero(g.concept_dim());
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        for (int j = 0; j < g.concept_dim(); ++j) {
            terms[j] += bce_from_logit(fw.final_pre(i, j), d.concepts(i, j));
        }
    }
    return terms;
}

double concept_loss_on(const ConceptPredictor& g, const Eigen::MatrixXd& X,
                       const Eigen::MatrixXd& C, double delta) {
    if (!g.params().allFinite()) throw NumericalError("concept_loss: non-finite parameters");
    const ConceptForward fw = concept_forward(g, X);
    double total = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        for (int j = 0; j < g.concept_dim(); ++j) {
            total += bce_from_logit(fw.final_pre(i, j), C(i, j));
        }
    }
    return total + 0.5 * delta * g.params().squaredNorm();
}

double label_loss_on(const LabelPredictor& f, const Eigen::MatrixXd& C, const Eigen::VectorXi& y,
                     double delta) {
    if (!f.params().allFinite()) throw NumericalError("label_loss: non-finite parameters");
    double total = 0.0;
    for (Eigen::Index i = 0; i < C.rows(); ++i) {
        total += cross_entropy_from_logits(f.logits(C.row(i).transpose()), y[i]);
    }
    return total + 0.5 * delta * f.params().squaredNorm();
}

double label_loss(const LabelPredictor& f, const ConceptPredictor& g, const Dataset& d,
                  double delta) {
    return label_loss_on(f, g.forward_batch(d.inputs), d.labels, delta);
}

// ---- batched backward -----------------------------------------------------------

ConceptBatch concept_batch(const ConceptPredictor& g, const Eigen::MatrixXd& X,
                           const Eigen::MatrixXd& C, const std::vector<int>* include) {
    ConceptForward fw = concept_forward(g, X);
    ConceptBatch b;
    b.layer_inputs = std::move(fw.layer_inputs);
    b.final_pre = std::move(fw.final_pre);
    b.probs = b.final_pre.unaryExpr([](double v) { return sigmoid(v); });

    // BCE through sigmoid: pre-activation gradient is prob - target.
    Eigen::MatrixXd delta_out = b.probs - C;
    if (include) {
        std::vector<bool> keep(g.concept_dim(), false);
        for (int j : *include) keep.at(j) = true;
        for (int j = 0; j < g.concept_dim(); ++j) {
            if (!keep[j]) delta_out.col(j).setZero();
        }
    }

    b.layer_deltas.resize(g.num_layers());
    b.layer_deltas[g.final_layer()] = std::move(delta_out);
    for (int l = g.final_layer(); l > 0; --l) {
        const auto m = g.layer_matrix(l);
        // tanh'(o) = 1 - a^2 with a the layer-(l-1) output = layer-l input.
        const Eigen::MatrixXd& a = b.layer_inputs[l];
        b.layer_deltas[l - 1] =
            (b.layer_deltas[l] * m.leftCols(a.cols())).array() * (1.0 - a.array().square());
    }
    return b;
}

Eigen::VectorXd ConceptBatch::total_gradient(const ConceptPredictor& g) const {
    Eigen::VectorXd grad(g.param_count());
    for (int l = 0; l < g.num_layers(); ++l) {
        const Eigen::MatrixXd gl = layer_deltas[l].transpose() * with_ones(layer_inputs[l]);
        grad.segment(g.layer_offset(l), g.layers()[l].param_count()) =
            Eigen::Map<const Eigen::VectorXd>(gl.data(), gl.size());
    }
    return grad;
}

Eigen::VectorXd ConceptBatch::sample_gradient(const ConceptPredictor& g, Eigen::Index i) const {
    Eigen::VectorXd grad(g.param_count());
    for (int l = 0; l < g.num_layers(); ++l) {
        Eigen::VectorXd h(layer_inputs[l].cols() + 1);
        h.head(layer_inputs[l].cols()) = layer_inputs[l].row(i);
        h[layer_inputs[l].cols()] = 1.0;
        const Eigen::MatrixXd gl = layer_deltas[l].row(i).transpose() * h.transpose();
        grad.segment(g.layer_offset(l), g.layers()[l].param_count()) =
            Eigen::Map<const Eigen::VectorXd>(gl.data(), gl.size());
    }
    return grad;
}

LabelBatch label_batch(const LabelPredictor& f, const Eigen::MatrixXd& C,
                       const Eigen::VectorXi& y) {
    if (C.cols() != f.input_dim()) throw std::invalid_argument("label_batch: dimension mismatch");
    LabelBatch b;
    b.inputs = C;
    b.logits.resize(C.rows(), f.num_classes());
    b.probs.resize(C.rows(), f.num_classes());
    b.deltas.resize(C.rows(), f.num_classes());
    for (Eigen::Index i = 0; i < C.rows(); ++i) {
        const Eigen::VectorXd z = f.logits(C.row(i).transpose());
        const Eigen::VectorXd p = softmax(z);
        b.logits.row(i) = z;
        b.probs.row(i) = p;
        b.deltas.row(i) = p;
        b.deltas(i, y[i]) -= 1.0;
    }
    return b;
}

Eigen::VectorXd LabelBatch::total_gradient(const LabelPredictor& f) const {
    const Eigen::MatrixXd gl = deltas.transpose() * with_ones(inputs);
    Eigen::VectorXd grad = Eigen::Map<const Eigen::VectorXd>(gl.data(), gl.size());
    if (f.pure_linear()) {
        grad.tail(f.num_classes()).setZero();
    }
    return grad;
}

Eigen::VectorXd LabelBatch::sample_gradient(const LabelPredictor& f, Eigen::Index i) const {
    Eigen::VectorXd h(inputs.cols() + 1);
    h.head(inputs.cols()) = inputs.row(i);
    h[inputs.cols()] = 1.0;
    const Eigen::MatrixXd gl = deltas.row(i).transpose() * h.transpose();
    Eigen::VectorXd grad = Eigen::Map<const Eigen::VectorXd>(gl.data(), gl.size());
    if (f.pure_linear()) {
        grad.tail(f.num_classes()).setZero();
    }
    return grad;
}

Eigen::MatrixXd label_inputs(const ConceptPredictor& g, const Eigen::MatrixXd& X,
                             bool soft_concepts) {
    Eigen::MatrixXd C = g.forward_batch(X);
    if (!soft_concepts) {
        C = (C.array() > 0.5).cast<double>();
    }
    return C;
}

// ---- per-sample analytic gradients ----------------------------------------------

Eigen::VectorXd grad_concept_loss_single(const ConceptPredictor& g, const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& c, int j) {
    if (j < 0 || j >= g.concept_dim()) {
        throw std::invalid_argument("grad_concept_loss_single: concept index out of range");
    }
    const std::vector<int> include{j};
    const ConceptBatch b = concept_batch(g, x.transpose(), c.transpose(), &include);
    return b.sample_gradient(g, 0);
}

Eigen::VectorXd grad_concept_loss_total(const ConceptPredictor& g, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& c, const std::vector<int>* include) {
    const ConceptBatch b = concept_batch(g, x.transpose(), c.transpose(), include);
    return b.sample_gradient(g, 0);
}

Eigen::VectorXd grad_label_loss_single(const LabelPredictor& f, const Eigen::VectorXd& c, int y) {
    Eigen::VectorXi yy(1);
    yy[0] = y;
    const LabelBatch b = label_batch(f, c.transpose(), yy);
    return b.sample_gradient(f, 0);
}

}  // namespace ccbm
