#include <cmath>
#include <deque>
#include <functional>

#include "ccbm/common.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

namespace {

// Deterministic full-batch L-BFGS with Armijo backtracking. Gradient-only;
// the history approximates curvature, so tight gradient tolerances are
// reachable on the convex label stage and the near-quadratic basin of the
// concept stage.
struct Problem {
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)> eval;  // loss, optional grad
};

TrainInfo lbfgs(const Problem& p, Eigen::VectorXd& x, const TrainConfig& cfg) {
    constexpr int history = 10;
    constexpr double armijo_c = 1e-4;

    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;

    Eigen::VectorXd grad(x.size());
    double loss = p.eval(x, &grad);

    TrainInfo info;
    info.delta = cfg.delta;
    info.seed = cfg.seed;

    int iter = 0;
    for (; iter < cfg.max_iterations; ++iter) {
        const double gnorm = grad.norm();
        if (!std::isfinite(loss) || !grad.allFinite()) {
            throw NumericalError("training diverged to non-finite values");
        }
        if (gnorm <= cfg.tolerance) {
            info.converged = true;
            break;
        }

        // Two-loop recursion.
        Eigen::VectorXd dir = -grad;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(dir);
            dir -= alpha[i] * y_hist[i];
        }
        if (!s_hist.empty()) {
            const double gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            dir *= gamma;
        }
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(dir);
            dir += (alpha[i] - beta) * s_hist[i];
        }

        double slope = grad.dot(dir);
        if (slope >= 0.0) {
            // Curvature history unusable; restart with steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -grad;
            slope = -grad.squaredNorm();
        }

        double step = s_hist.empty() ? std::min(cfg.init_step, 1.0 / std::max(1.0, gnorm)) : 1.0;
        Eigen::VectorXd x_new;
        Eigen::VectorXd grad_new;
        double loss_new = loss;
        bool accepted = false;
        bool have_new_grad = false;
        for (int ls = 0; ls < 60; ++ls) {
            x_new = x + step * dir;
            loss_new = p.eval(x_new, nullptr);
            if (std::isfinite(loss_new) && loss_new <= loss + armijo_c * step * slope) {
                accepted = true;
                break;
            }
            if (std::abs(step * slope) < 1e-12 * (std::abs(loss) + 1.0)) {
                // The predicted decrease is below the resolution of the loss;
                // fall back to accepting on gradient-norm progress so tight
                // tolerances stay reachable.
                grad_new.resize(x.size());
                const double l = p.eval(x_new, &grad_new);
                if (std::isfinite(l) && grad_new.allFinite() && grad_new.norm() < gnorm) {
                    loss_new = l;
                    accepted = true;
                    have_new_grad = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if (!accepted) break;  // numerical floor; report the best point found

        if (!have_new_grad) {
            grad_new.resize(x.size());
            loss_new = p.eval(x_new, &grad_new);
        }

        const Eigen::VectorXd s = x_new - x;
        const Eigen::VectorXd yv = grad_new - grad;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            if (static_cast<int>(s_hist.size()) == history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(yv);
            rho_hist.push_back(1.0 / sy);
        }
        x = std::move(x_new);
        grad = std::move(grad_new);
        loss = loss_new;
    }

    info.iterations = iter;
    info.final_grad_norm = grad.norm();
    if (grad.norm() <= cfg.tolerance) info.converged = true;
    return info;
}

Eigen::VectorXd seeded_init(const std::vector<LayerShape>& layers, const TrainConfig& cfg) {
    Eigen::Index total = 0;
    for (const auto& l : layers) total += l.param_count();
    Eigen::VectorXd x(total);
    Rng rng(cfg.seed);
    Eigen::Index pos = 0;
    for (const auto& l : layers) {
        const double scale = cfg.init_scale / std::sqrt(static_cast<double>(l.in + 1));
        for (int i = 0; i < l.param_count(); ++i) x[pos++] = scale * rng.normal();
    }
    return x;
}

}  // namespace

ConceptPredictor train_concept_predictor(const Dataset& d, const TrainConfig& cfg,
                                         ConceptArch arch, int hidden, TrainInfo* info_out) {
    if (cfg.delta <= 0.0 || cfg.tolerance <= 0.0) {
        throw std::invalid_argument("TrainConfig: delta and tolerance must be positive");
    }
    d.validate();
    ConceptPredictor g(arch, static_cast<int>(d.input_dim()), static_cast<int>(d.concept_dim()),
                       hidden);
    Eigen::VectorXd x = seeded_init(g.layers(), cfg);

    ConceptPredictor scratch = g;
    Problem prob;
    prob.eval = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
        scratch.params() = theta;
        if (grad) {
            const ConceptBatch b = concept_batch(scratch, d.inputs, d.concepts);
            *grad = b.total_gradient(scratch) + cfg.delta * theta;
            double loss = 0.0;
            for (Eigen::Index i = 0; i < d.n(); ++i) {
                for (int j = 0; j < scratch.concept_dim(); ++j) {
                    loss += bce_from_logit(b.final_pre(i, j), d.concepts(i, j));
                }
            }
            return loss + 0.5 * cfg.delta * theta.squaredNorm();
        }
        return concept_loss_on(scratch, d.inputs, d.concepts, cfg.delta);
    };

    const TrainInfo info = lbfgs(prob, x, cfg);
    g.params() = x;
    if (info_out) *info_out = info;
    if (!info.converged) {
        log::info("concept predictor stopped at grad norm " +
                  std::to_string(info.final_grad_norm));
    }
    return g;
}

LabelPredictor train_label_predictor(const ConceptPredictor& g, const Dataset& d,
                                     const TrainConfig& cfg, bool pure_linear,
                                     TrainInfo* info_out) {
    if (cfg.delta <= 0.0 || cfg.tolerance <= 0.0) {
        throw std::invalid_argument("TrainConfig: delta and tolerance must be positive");
    }
    const Eigen::MatrixXd C = label_inputs(g, d.inputs, cfg.soft_concepts);
    LabelPredictor f(static_cast<int>(C.cols()), d.num_classes, pure_linear);
    Eigen::VectorXd x = seeded_init({f.shape()}, cfg);

    LabelPredictor scratch = f;
    auto project = [&](Eigen::VectorXd& theta) {
        if (pure_linear) theta.tail(f.num_classes()).setZero();
    };
    project(x);

    Problem prob;
    prob.eval = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
        scratch.params() = theta;
        if (grad) {
            const LabelBatch b = label_batch(scratch, C, d.labels);
            *grad = b.total_gradient(scratch) + cfg.delta * theta;
            project(*grad);
            double loss = 0.0;
            for (Eigen::Index i = 0; i < C.rows(); ++i) {
                loss += cross_entropy_from_logits(b.logits.row(i).transpose(), d.labels[i]);
            }
            return loss + 0.5 * cfg.delta * theta.squaredNorm();
        }
        return label_loss_on(scratch, C, d.labels, cfg.delta);
    };

    const TrainInfo info = lbfgs(prob, x, cfg);
    f.params() = x;
    f.enforce_pure_linear();
    if (info_out) *info_out = info;
    return f;
}

CbmModel train_cbm(const Dataset& d, const TrainConfig& cfg, ConceptArch arch, int hidden) {
    CbmModel m;
    m.g = train_concept_predictor(d, cfg, arch, hidden, &m.g_info);
    m.f = train_label_predictor(m.g, d, cfg, false, &m.f_info);
    return m;
}

}  // namespace ccbm
