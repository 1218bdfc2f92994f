#include "ccbm/oracle.hpp"

#include <cmath>

#include "ccbm/common.hpp"
#include "ccbm/editor.hpp"
#include "ccbm/evaluation.hpp"

namespace ccbm {

CbmModel retrain(const Dataset& edited_data, const TrainConfig& cfg, ConceptArch arch, int hidden,
                 bool strict) {
    if (cfg.tolerance > 1e-8) {
        log::info("retrain: tolerance " + std::to_string(cfg.tolerance) +
                  " is looser than the oracle recommendation of 1e-8");
    }
    CbmModel m = train_cbm(edited_data, cfg, arch, hidden);
    if (!m.g_info.converged || !m.f_info.converged) {
        log::warn("retrain: training stopped before reaching tolerance (grad norms " +
                  std::to_string(m.g_info.final_grad_norm) + ", " +
                  std::to_string(m.f_info.final_grad_norm) + ")");
    }
    if (strict) {
        if (m.g_info.final_grad_norm > 1e-10 || m.f_info.final_grad_norm > 1e-10) {
            throw NumericalError("retrain: strict mode requires gradient norms <= 1e-10");
        }
    }
    return m;
}

namespace {

double symmetric_kl(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
    double kl_pq = 0.0, kl_qp = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        kl_pq += p[i] * (std::log(p[i]) - std::log(q[i]));
        kl_qp += q[i] * (std::log(q[i]) - std::log(p[i]));
    }
    return 0.5 * (kl_pq + kl_qp);
}

}  // namespace

ComparisonReport compare(const CbmModel& a, const CbmModel& b, const Dataset& probe) {
    if (a.g.param_count() != b.g.param_count() || a.f.param_count() != b.f.param_count()) {
        throw std::invalid_argument("compare: model shapes differ");
    }
    ComparisonReport r;
    r.g_param_distance = (a.g.params() - b.g.params()).norm();
    r.f_param_distance = (a.f.params() - b.f.params()).norm();

    const Eigen::MatrixXd ca = a.g.forward_batch(probe.inputs);
    const Eigen::MatrixXd cb = b.g.forward_batch(probe.inputs);
    double kl_sum = 0.0;
    Eigen::Index agree = 0;
    Eigen::VectorXi preds_a(probe.n()), preds_b(probe.n());
    for (Eigen::Index i = 0; i < probe.n(); ++i) {
        const Eigen::VectorXd pa = softmax(a.f.logits(ca.row(i).transpose()));
        const Eigen::VectorXd pb = softmax(b.f.logits(cb.row(i).transpose()));
        kl_sum += symmetric_kl(pa, pb);
        Eigen::Index ia, ib;
        pa.maxCoeff(&ia);
        pb.maxCoeff(&ib);
        preds_a[i] = static_cast<int>(ia);
        preds_b[i] = static_cast<int>(ib);
        if (ia == ib) ++agree;
    }
    r.functional_distance = kl_sum / static_cast<double>(probe.n());
    r.agreement = static_cast<double>(agree) / static_cast<double>(probe.n());
    r.f1_a = f1_macro(preds_a, probe.labels, probe.num_classes);
    r.f1_b = f1_macro(preds_b, probe.labels, probe.num_classes);
    return r;
}

std::vector<LooRow> loo_influence_check(const Dataset& d, TrainConfig cfg,
                                        std::uint64_t sample_id,
                                        const std::vector<double>& delta_grid, ConceptArch arch,
                                        int hidden, CurvatureKind kind) {
    std::vector<LooRow> table;
    table.reserve(delta_grid.size());
    const DataRemoval request{{sample_id}};
    const Dataset loo_data = apply_edit_to_dataset(d, EditRequest{request});

    for (double delta : delta_grid) {
        cfg.delta = delta;
        const CbmModel original = train_cbm(d, cfg, arch, hidden);

        EditOptions opt;
        opt.curvature = kind;
        opt.delta = delta;
        const EditOutcome edit = remove_data(original, d, request, opt);
        const CbmModel reference = retrain(loo_data, cfg, arch, hidden);

        LooRow row;
        row.delta = delta;
        row.g_err = (edit.edited.g.params() - reference.g.params()).norm();
        row.g_rel_err = row.g_err / reference.g.params().norm();
        row.g_move = (original.g.params() - reference.g.params()).norm();
        row.f_err = (edit.edited.f.params() - reference.f.params()).norm();
        row.f_rel_err = row.f_err / reference.f.params().norm();
        row.f_move = (original.f.params() - reference.f.params()).norm();
        table.push_back(row);
    }
    return table;
}

}  // namespace ccbm
