#pragma once

#include <vector>

#include <Eigen/Core>

#include "ccbm/dataset.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

enum class CurvatureKind { ExactHessian, DampedFisher, EkFac };
enum class PredictorTarget { Concept, Label };

/**
 * @brief Per-layer Kronecker factors with corrected eigenvalues.
 *
 * omega is the homogeneous input covariance (1/n) sum h~ h~^T, gamma the
 * pre-activation gradient covariance (1/n) sum d d^T. lambda_corr holds the
 * exact diagonal of the mean per-sample gradient second moment in the
 * eigenbasis q_gamma x q_omega, entry (u,v) = (1/n) sum_i
 * (q_gamma^T G_i q_omega)_{uv}^2 with G_i = d_i h~_i^T.
 */
struct EkfacLayerFactors {
    LayerShape shape;             ///< out may be reduced by a row restriction
    Eigen::MatrixXd omega;        ///< (in+1) x (in+1)
    Eigen::MatrixXd gamma;        ///< out x out
    Eigen::MatrixXd q_omega;      ///< eigenvectors of omega
    Eigen::MatrixXd q_gamma;      ///< eigenvectors of gamma
    Eigen::MatrixXd lambda_corr;  ///< out x (in+1), nonnegative
    double damping = 0.0;         ///< per-layer lambda_l
};

/**
 * @brief Immutable curvature surrogate exposing forward products and
 *        inverse-curvature-vector products on the flat parameter space.
 *
 * Dense kinds store H + delta I and its eigendecomposition. The EK-FAC kind
 * stores per-layer factors; its action is n * (Omega (x) Gamma corrected) +
 * lambda, i.e. the factors are per-sample averages scaled back to the
 * summed-loss convention shared with the dense kinds, and no Kronecker
 * product is ever materialized.
 */
class CurvatureOperator {
public:
    CurvatureKind kind = CurvatureKind::ExactHessian;
    PredictorTarget target = PredictorTarget::Concept;
    double delta = 0.0;
    Eigen::Index n_samples = 0;

    Eigen::MatrixXd dense;    ///< dense kinds only; includes +delta I
    Eigen::MatrixXd eigvecs;  ///< cached for ihvp
    Eigen::VectorXd eigvals;

    std::vector<EkfacLayerFactors> layers;  ///< EkFac kind only

    Eigen::Index dim() const;

    /// Forward action H v.
    Eigen::VectorXd apply(const Eigen::VectorXd& v) const;

    /// Inverse action H^{-1} v; throws NumericalError on a singular operator.
    Eigen::VectorXd ihvp(const Eigen::VectorXd& v) const;

    /// Recomputes the cached eigendecomposition (dense kinds).
    void finalize();
};

/// Largest parameter count for which dense operators are built.
inline constexpr Eigen::Index kDenseParamLimit = 5000;

/// Restriction of a concept-predictor fit: which concepts' loss terms are
/// summed and, optionally, removal of the final-layer rows outside that set
/// from the parameterization (the operator then lives on the subspace).
struct ConceptCurvatureSpec {
    std::vector<int> include_concepts;  ///< empty means all
    bool restrict_final_rows = false;
    double fd_step = 1e-5;
};

/// Flat coordinates that survive deleting the final-layer rows not listed in
/// kept_rows; ascending order (matches the reduced column-major layout).
std::vector<Eigen::Index> concept_subspace_coords(const ConceptPredictor& g,
                                                  const std::vector<int>& kept_rows);

// Concept-predictor builders. The exact Hessian is a symmetrized central
// finite difference of the analytic gradient; Fisher and EK-FAC use
// per-sample gradients of the (possibly concept-masked) summed BCE loss.
CurvatureOperator concept_exact_hessian(const ConceptPredictor& g, const Dataset& d, double delta,
                                        const ConceptCurvatureSpec& spec = {});
CurvatureOperator concept_damped_fisher(const ConceptPredictor& g, const Dataset& d, double delta,
                                        const ConceptCurvatureSpec& spec = {});
CurvatureOperator concept_ekfac(const ConceptPredictor& g, const Dataset& d, double lambda,
                                const ConceptCurvatureSpec& spec = {});

// Label-predictor builders on explicit concept inputs C (n x k) and labels.
// exclude_bias restricts to the weight block (pure-linear predictors).
CurvatureOperator label_exact_hessian(const LabelPredictor& f, const Eigen::MatrixXd& C,
                                      double delta, bool exclude_bias = false);
CurvatureOperator label_damped_fisher(const LabelPredictor& f, const Eigen::MatrixXd& C,
                                      const Eigen::VectorXi& y, double delta,
                                      bool exclude_bias = false);
CurvatureOperator label_ekfac(const LabelPredictor& f, const Eigen::MatrixXd& C,
                              const Eigen::VectorXi& y, double lambda, bool exclude_bias = false);

// Whole-model entry points; the label target consumes soft concepts from g.
CurvatureOperator exact_hessian(PredictorTarget target, const CbmModel& m, const Dataset& d,
                                double delta);
CurvatureOperator damped_fisher(PredictorTarget target, const CbmModel& m, const Dataset& d,
                                double delta);
CurvatureOperator ekfac_fit(PredictorTarget target, const CbmModel& m, const Dataset& d,
                            double lambda);
CurvatureOperator fit_curvature(CurvatureKind kind, PredictorTarget target, const CbmModel& m,
                                const Dataset& d, double delta);

}  // namespace ccbm
