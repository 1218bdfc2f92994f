#include "ccbm/editor.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

#include "ccbm/common.hpp"

namespace ccbm {

namespace {

// Label-side curvature plus the bookkeeping for pure-linear predictors whose
// operator lives on the weight block only.
struct LabelCurv {
    CurvatureOperator op;
    bool exclude_bias = false;

    Eigen::VectorXd solve(const Eigen::VectorXd& grad) const {
        if (!exclude_bias) return op.ihvp(grad);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(grad.size());
        out.head(op.dim()) = op.ihvp(grad.head(op.dim()));
        return out;
    }
};

LabelCurv fit_label_curv(CurvatureKind kind, const LabelPredictor& f, const Eigen::MatrixXd& C,
                         const Eigen::VectorXi& y, const EditOptions& opt) {
    LabelCurv c;
    c.exclude_bias = f.pure_linear();
    if (c.exclude_bias && kind == CurvatureKind::EkFac) {
        throw std::invalid_argument("EK-FAC curvature does not support pure-linear predictors");
    }
    switch (kind) {
        case CurvatureKind::ExactHessian:
            c.op = label_exact_hessian(f, C, opt.delta, c.exclude_bias);
            break;
        case CurvatureKind::DampedFisher:
            c.op = label_damped_fisher(f, C, y, opt.delta, c.exclude_bias);
            break;
        case CurvatureKind::EkFac:
            c.op = label_ekfac(f, C, y, opt.lambda());
            break;
    }
    return c;
}

CurvatureOperator fit_concept_curv(CurvatureKind kind, const ConceptPredictor& g, const Dataset& d,
                                   const EditOptions& opt, const ConceptCurvatureSpec& spec = {}) {
    switch (kind) {
        case CurvatureKind::ExactHessian: return concept_exact_hessian(g, d, opt.delta, spec);
        case CurvatureKind::DampedFisher: return concept_damped_fisher(g, d, opt.delta, spec);
        case CurvatureKind::EkFac: return concept_ekfac(g, d, opt.lambda(), spec);
    }
    throw std::invalid_argument("unknown curvature kind");
}

/// Sum of label-predictor gradients over the rows of C.
Eigen::VectorXd label_grad_sum(const LabelPredictor& f, const Eigen::MatrixXd& C,
                               const Eigen::VectorXi& y) {
    if (C.rows() == 0) return Eigen::VectorXd::Zero(f.param_count());
    return label_batch(f, C, y).total_gradient(f);
}

std::vector<Eigen::Index> rows_of_ids(const Dataset& d, const std::vector<std::uint64_t>& ids) {
    std::vector<Eigen::Index> rows;
    rows.reserve(ids.size());
    for (std::uint64_t id : ids) rows.push_back(d.row_of(id));
    return rows;
}

std::vector<Eigen::Index> complement_rows(const Dataset& d,
                                          const std::vector<Eigen::Index>& rows) {
    std::vector<bool> removed(d.n(), false);
    for (Eigen::Index r : rows) removed[r] = true;
    std::vector<Eigen::Index> rest;
    rest.reserve(d.n() - static_cast<Eigen::Index>(rows.size()));
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        if (!removed[i]) rest.push_back(i);
    }
    return rest;
}

EditOutcome identity_outcome(const CbmModel& m, const EditOptions& opt) {
    EditOutcome out;
    out.edited = m;
    out.curvature = opt.curvature;
    out.delta = opt.delta;
    out.g_step = Eigen::VectorXd::Zero(m.g.param_count());
    out.label_shift_a = Eigen::VectorXd::Zero(m.f.param_count());
    return out;
}

void check_concept_indices(const CbmModel& m, const std::vector<int>& concepts) {
    for (int j : concepts) {
        if (j < 0 || j >= m.g.concept_dim()) {
            throw std::invalid_argument("edit: concept index " + std::to_string(j) +
                                        " out of range");
        }
    }
}

}  // namespace

EditOutcome edit_concept_labels(const CbmModel& m, const Dataset& d, const ConceptLabelFix& req,
                                const EditOptions& opt) {
    if (req.fixes.empty()) throw std::invalid_argument("edit_concept_labels: empty request");

    // Drop no-op corrections; an edit where nothing changes is the identity.
    std::vector<ConceptLabelFix::Fix> active;
    for (const auto& fix : req.fixes) {
        if (fix.corrected != 0.0 && fix.corrected != 1.0) {
            throw std::invalid_argument("edit_concept_labels: corrected values must be 0 or 1");
        }
        const Eigen::Index row = d.row_of(fix.sample_id);
        if (fix.concept_index < 0 || fix.concept_index >= d.concept_dim()) {
            throw std::invalid_argument("edit_concept_labels: concept index out of range");
        }
        if (d.concepts(row, fix.concept_index) == fix.corrected) {
            log::warn("edit_concept_labels: correction equals current value for sample " +
                      std::to_string(fix.sample_id) + ", concept " +
                      std::to_string(fix.concept_index) + "; skipped");
            continue;
        }
        active.push_back(fix);
    }
    if (active.empty()) return identity_outcome(m, opt);

    EditOutcome out;
    out.curvature = opt.curvature;
    out.delta = opt.delta;

    Stopwatch sw;
    const CurvatureOperator h_g = fit_concept_curv(opt.curvature, m.g, d, opt);
    Eigen::VectorXd moment = Eigen::VectorXd::Zero(m.g.param_count());
    for (const auto& fix : active) {
        const Eigen::Index row = d.row_of(fix.sample_id);
        const Eigen::VectorXd x = d.inputs.row(row);
        Eigen::VectorXd corrected = d.concepts.row(row);
        corrected[fix.concept_index] = fix.corrected;
        moment += grad_concept_loss_single(m.g, x, corrected, fix.concept_index) -
                  grad_concept_loss_single(m.g, x, d.concepts.row(row), fix.concept_index);
    }
    out.g_step = -h_g.ihvp(moment);
    out.edited.g = m.g;
    out.edited.g.params() += out.g_step;
    out.stage1_ms = sw.elapsed_ms();

    sw.reset();
    const Eigen::MatrixXd c_orig = label_inputs(m.g, d.inputs, opt.soft_concepts);
    const Eigen::MatrixXd c_new = label_inputs(out.edited.g, d.inputs, opt.soft_concepts);
    const LabelCurv h_f = fit_label_curv(opt.curvature, m.f, c_orig, d.labels, opt);
    const Eigen::VectorXd diff =
        label_grad_sum(m.f, c_orig, d.labels) - label_grad_sum(m.f, c_new, d.labels);
    out.label_shift_a = h_f.solve(diff);
    out.edited.f = m.f;
    out.edited.f.params() += out.label_shift_a;
    out.edited.f.enforce_pure_linear();
    out.stage2_ms = sw.elapsed_ms();

    out.edited.g_info = m.g_info;
    out.edited.f_info = m.f_info;
    return out;
}

EditOutcome remove_concepts(const CbmModel& m, const Dataset& d, const ConceptRemoval& req,
                            const EditOptions& opt) {
    check_concept_indices(m, req.concepts);
    const std::set<int> removed(req.concepts.begin(), req.concepts.end());
    if (static_cast<int>(removed.size()) >= m.g.concept_dim()) {
        throw std::invalid_argument("remove_concepts: cannot remove every concept");
    }
    std::vector<int> kept;
    for (int j = 0; j < m.g.concept_dim(); ++j) {
        if (!removed.count(j)) kept.push_back(j);
    }
    const std::vector<int> removed_sorted(removed.begin(), removed.end());

    EditOutcome out;
    out.curvature = opt.curvature;
    out.delta = opt.delta;

    // Stage 1: pin the removed rows to zero and take the influence step in
    // the remaining coordinate subspace.
    Stopwatch sw;
    ConceptPredictor g_star = m.g;
    {
        auto w = g_star.layer_matrix(g_star.final_layer());
        for (int r : removed_sorted) w.row(r).setZero();
    }
    ConceptCurvatureSpec spec;
    spec.include_concepts = kept;
    spec.restrict_final_rows = true;
    const CurvatureOperator h_g = fit_concept_curv(opt.curvature, g_star, d, opt, spec);

    // Unlike the difference-form edits, this is a Newton step on the full
    // restricted objective, so the regularizer gradient takes part; without
    // it the step is not stationary at the trained optimum when M is empty.
    const ConceptBatch batch = concept_batch(g_star, d.inputs, d.concepts, &kept);
    const Eigen::VectorXd grad_full =
        batch.total_gradient(g_star) + opt.delta * g_star.params();
    const std::vector<Eigen::Index> coords = concept_subspace_coords(g_star, kept);
    Eigen::VectorXd grad_sub(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) grad_sub[i] = grad_full[coords[i]];

    const Eigen::VectorXd step_sub = -h_g.ihvp(grad_sub);
    out.g_step = Eigen::VectorXd::Zero(m.g.param_count());
    for (std::size_t i = 0; i < coords.size(); ++i) out.g_step[coords[i]] = step_sub[i];
    g_star.params() += out.g_step;
    out.stage1_ms = sw.elapsed_ms();

    // Stage 2: refit target uses the pinned predictor's outputs with the
    // removed coordinates filled with exact zeros (a zeroed final-layer row
    // still emits sigmoid(0) = 1/2, but the label stage must see dead
    // concepts as zero for column deletion to be lossless). Again a
    // full-objective Newton step, so the regularizer gradient is included.
    sw.reset();
    Eigen::MatrixXd c_star = label_inputs(g_star, d.inputs, opt.soft_concepts);
    for (int r : removed_sorted) c_star.col(r).setZero();
    const LabelCurv h_f = fit_label_curv(opt.curvature, m.f, c_star, d.labels, opt);
    const Eigen::VectorXd grad_f =
        label_grad_sum(m.f, c_star, d.labels) + opt.delta * m.f.params();
    out.label_shift_a = -h_f.solve(grad_f);
    LabelPredictor f_zero = m.f;
    f_zero.params() += out.label_shift_a;
    f_zero.enforce_pure_linear();
    out.stage2_ms = sw.elapsed_ms();

    // Map out the removed dimensions.
    out.edited.g = drop_concept_rows(g_star, removed_sorted);
    out.edited.f = f_zero.drop_inputs(removed_sorted);
    out.edited.g_info = m.g_info;
    out.edited.f_info = m.f_info;
    out.padded_g = std::move(g_star);
    out.padded_f = std::move(f_zero);
    return out;
}

EditOutcome remove_data(const CbmModel& m, const Dataset& d, const DataRemoval& req,
                        const EditOptions& opt) {
    if (req.ids.empty()) return identity_outcome(m, opt);
    if (static_cast<Eigen::Index>(req.ids.size()) >= d.n()) {
        throw std::invalid_argument("remove_data: request covers the whole dataset");
    }
    const std::vector<Eigen::Index> rows = rows_of_ids(d, req.ids);
    const std::vector<Eigen::Index> rest = complement_rows(d, rows);

    EditOutcome out;
    out.curvature = opt.curvature;
    out.delta = opt.delta;

    // Stage 1: add back the removed samples' gradient (inverse operation).
    Stopwatch sw;
    const CurvatureOperator h_g = fit_concept_curv(opt.curvature, m.g, d, opt);
    Eigen::VectorXd moment = Eigen::VectorXd::Zero(m.g.param_count());
    {
        const ConceptBatch b = concept_batch(m.g, d.inputs, d.concepts);
        for (Eigen::Index r : rows) moment += b.sample_gradient(m.g, r);
    }
    out.g_step = h_g.ihvp(moment);
    out.edited.g = m.g;
    out.edited.g.params() += out.g_step;
    out.stage1_ms = sw.elapsed_ms();

    // Stage 2.
    sw.reset();
    const Eigen::MatrixXd c_orig = label_inputs(m.g, d.inputs, opt.soft_concepts);
    const LabelCurv h_f = fit_label_curv(opt.curvature, m.f, c_orig, d.labels, opt);

    auto rows_matrix = [&](const Eigen::MatrixXd& c, const std::vector<Eigen::Index>& which) {
        Eigen::MatrixXd sub(which.size(), c.cols());
        for (std::size_t i = 0; i < which.size(); ++i) sub.row(i) = c.row(which[i]);
        return sub;
    };
    auto labels_of = [&](const std::vector<Eigen::Index>& which) {
        Eigen::VectorXi sub(which.size());
        for (std::size_t i = 0; i < which.size(); ++i) sub[i] = d.labels[which[i]];
        return sub;
    };

    // A: shift for the shrunken sample set at fixed concepts. The summation
    // set is disputed between the statement and the listing; the statement
    // (over the removed samples) is the default.
    Eigen::VectorXd sum_a;
    if (opt.appendix_form) {
        sum_a = label_grad_sum(m.f, rows_matrix(c_orig, rest), labels_of(rest));
    } else {
        sum_a = label_grad_sum(m.f, rows_matrix(c_orig, rows), labels_of(rows));
    }
    out.label_shift_a = h_f.solve(sum_a);
    LabelPredictor f_star = m.f;
    f_star.params() += out.label_shift_a;
    f_star.enforce_pure_linear();

    // B: correction for the concept predictor's drift, on the retained set,
    // with curvature rebuilt at the shifted predictor.
    const Eigen::MatrixXd c_new = label_inputs(out.edited.g, d.inputs, opt.soft_concepts);
    const Eigen::MatrixXd c_orig_rest = rows_matrix(c_orig, rest);
    const Eigen::MatrixXd c_new_rest = rows_matrix(c_new, rest);
    const Eigen::VectorXi y_rest = labels_of(rest);

    const LabelCurv h_fstar = opt.reuse_label_curvature
                                  ? h_f
                                  : fit_label_curv(opt.curvature, f_star, c_orig_rest, y_rest, opt);
    const Eigen::VectorXd sum_b =
        label_grad_sum(f_star, c_new_rest, y_rest) - label_grad_sum(f_star, c_orig_rest, y_rest);
    out.label_shift_b = -h_fstar.solve(sum_b);

    out.edited.f = m.f;
    out.edited.f.params() += out.label_shift_a + out.label_shift_b;
    out.edited.f.enforce_pure_linear();
    out.stage2_ms = sw.elapsed_ms();

    out.edited.g_info = m.g_info;
    out.edited.f_info = m.f_info;
    return out;
}

EditOutcome add_data(const CbmModel& m, const Dataset& d, const DataAddition& req,
                     const EditOptions& opt) {
    const Dataset& s = req.samples;
    if (s.n() == 0) throw std::invalid_argument("add_data: empty sample batch");
    if (s.input_dim() != d.input_dim() || s.concept_dim() != d.concept_dim() ||
        s.num_classes != d.num_classes) {
        throw std::invalid_argument("add_data: shape mismatch with the training data");
    }
    {
        std::unordered_set<std::uint64_t> existing(d.ids.begin(), d.ids.end());
        for (std::uint64_t id : s.ids) {
            if (existing.count(id)) {
                throw std::invalid_argument("add_data: duplicate sample id " + std::to_string(id));
            }
        }
    }

    EditOutcome out;
    out.curvature = opt.curvature;
    out.delta = opt.delta;

    // Stage 1: descend along the new samples' gradients under the original
    // curvature (precomputable before the batch arrives).
    Stopwatch sw;
    const CurvatureOperator h_g = fit_concept_curv(opt.curvature, m.g, d, opt);
    Eigen::VectorXd moment = Eigen::VectorXd::Zero(m.g.param_count());
    {
        const ConceptBatch b = concept_batch(m.g, s.inputs, s.concepts);
        for (Eigen::Index i = 0; i < s.n(); ++i) moment += b.sample_gradient(m.g, i);
    }
    out.g_step = -h_g.ihvp(moment);
    out.edited.g = m.g;
    out.edited.g.params() += out.g_step;
    out.stage1_ms = sw.elapsed_ms();

    // Stage 2.
    sw.reset();
    const Eigen::MatrixXd c_orig = label_inputs(m.g, d.inputs, opt.soft_concepts);
    const Eigen::MatrixXd c_orig_new_batch = label_inputs(m.g, s.inputs, opt.soft_concepts);
    const LabelCurv h_f = fit_label_curv(opt.curvature, m.f, c_orig, d.labels, opt);

    const Eigen::VectorXd sum_a = label_grad_sum(m.f, c_orig_new_batch, s.labels);
    out.label_shift_a = -h_f.solve(sum_a);
    LabelPredictor f_star = m.f;
    f_star.params() += out.label_shift_a;
    f_star.enforce_pure_linear();

    // Union views over D and the new batch.
    auto vstack = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
        Eigen::MatrixXd out_m(a.rows() + b.rows(), a.cols());
        out_m.topRows(a.rows()) = a;
        out_m.bottomRows(b.rows()) = b;
        return out_m;
    };
    Eigen::VectorXi y_union(d.n() + s.n());
    y_union.head(d.n()) = d.labels;
    y_union.tail(s.n()) = s.labels;

    const Eigen::MatrixXd c_union_orig = vstack(c_orig, c_orig_new_batch);
    const Eigen::MatrixXd c_union_new =
        vstack(label_inputs(out.edited.g, d.inputs, opt.soft_concepts),
               label_inputs(out.edited.g, s.inputs, opt.soft_concepts));

    const LabelCurv h_fstar =
        opt.reuse_label_curvature
            ? h_f
            : fit_label_curv(opt.curvature, f_star, c_union_orig, y_union, opt);

    // B: drift correction; the statement sums over the union, the appendix
    // derivation over the new batch only.
    Eigen::VectorXd sum_b;
    if (opt.appendix_form) {
        sum_b = label_grad_sum(f_star, label_inputs(out.edited.g, s.inputs, opt.soft_concepts),
                               s.labels) -
                label_grad_sum(f_star, c_orig_new_batch, s.labels);
    } else {
        sum_b = label_grad_sum(f_star, c_union_new, y_union) -
                label_grad_sum(f_star, c_union_orig, y_union);
    }
    out.label_shift_b = -h_fstar.solve(sum_b);

    out.edited.f = m.f;
    out.edited.f.params() += out.label_shift_a + out.label_shift_b;
    out.edited.f.enforce_pure_linear();
    out.stage2_ms = sw.elapsed_ms();

    out.edited.g_info = m.g_info;
    out.edited.f_info = m.f_info;
    return out;
}

EditOutcome apply_edit(const CbmModel& m, const Dataset& d, const EditRequest& req,
                       const EditOptions& opt) {
    return std::visit(
        [&](const auto& r) -> EditOutcome {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, ConceptLabelFix>) {
                return edit_concept_labels(m, d, r, opt);
            } else if constexpr (std::is_same_v<T, ConceptRemoval>) {
                return remove_concepts(m, d, r, opt);
            } else if constexpr (std::is_same_v<T, DataRemoval>) {
                return remove_data(m, d, r, opt);
            } else {
                return add_data(m, d, r, opt);
            }
        },
        req);
}

Dataset apply_edit_to_dataset(const Dataset& d, const EditRequest& req) {
    return std::visit(
        [&](const auto& r) -> Dataset {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, ConceptLabelFix>) {
                Dataset out = d;
                for (const auto& fix : r.fixes) {
                    out.concepts(out.row_of(fix.sample_id), fix.concept_index) = fix.corrected;
                }
                return out;
            } else if constexpr (std::is_same_v<T, ConceptRemoval>) {
                return d.drop_concepts(r.concepts);
            } else if constexpr (std::is_same_v<T, DataRemoval>) {
                std::vector<Eigen::Index> rows = rows_of_ids(d, r.ids);
                return d.select_rows(complement_rows(d, rows));
            } else {
                Dataset out = d;
                const Dataset& s = r.samples;
                const Eigen::Index n0 = d.n();
                out.inputs.conservativeResize(n0 + s.n(), Eigen::NoChange);
                out.concepts.conservativeResize(n0 + s.n(), Eigen::NoChange);
                out.labels.conservativeResize(n0 + s.n());
                out.inputs.bottomRows(s.n()) = s.inputs;
                out.concepts.bottomRows(s.n()) = s.concepts;
                out.labels.tail(s.n()) = s.labels;
                out.ids.insert(out.ids.end(), s.ids.begin(), s.ids.end());
                out.validate();
                return out;
            }
        },
        req);
}

ConceptPredictor drop_concept_rows(const ConceptPredictor& g, const std::vector<int>& rows) {
    const std::set<int> dropped(rows.begin(), rows.end());
    const int new_k = g.concept_dim() - static_cast<int>(dropped.size());
    if (new_k < 1) throw std::invalid_argument("drop_concept_rows: would remove every output");
    ConceptPredictor out(g.arch(), g.input_dim(), new_k, g.hidden_dim());
    for (int l = 0; l + 1 < g.num_layers(); ++l) {
        out.layer_matrix(l) = g.layer_matrix(l);
    }
    const auto src = g.layer_matrix(g.final_layer());
    auto dst = out.layer_matrix(out.final_layer());
    int row = 0;
    for (int r = 0; r < g.concept_dim(); ++r) {
        if (dropped.count(r)) continue;
        dst.row(row++) = src.row(r);
    }
    return out;
}

ConceptPredictor insert_zero_concept_rows(const ConceptPredictor& g, const std::vector<int>& rows) {
    const std::set<int> inserted(rows.begin(), rows.end());
    const int new_k = g.concept_dim() + static_cast<int>(inserted.size());
    for (int r : inserted) {
        if (r < 0 || r >= new_k) throw std::invalid_argument("insert_zero_concept_rows: bad index");
    }
    ConceptPredictor out(g.arch(), g.input_dim(), new_k, g.hidden_dim());
    for (int l = 0; l + 1 < g.num_layers(); ++l) {
        out.layer_matrix(l) = g.layer_matrix(l);
    }
    const auto src = g.layer_matrix(g.final_layer());
    auto dst = out.layer_matrix(out.final_layer());
    dst.setZero();
    int row = 0;
    for (int r = 0; r < new_k; ++r) {
        if (inserted.count(r)) continue;
        dst.row(r) = src.row(row++);
    }
    return out;
}

}  // namespace ccbm
