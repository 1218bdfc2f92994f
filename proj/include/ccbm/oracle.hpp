#pragma once

#include <cstdint>
#include <vector>

#include "ccbm/curvature.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

/**
 * @brief Side-by-side comparison of two models over a probe set.
 *
 * Parameter distances require matching shapes; the functional distance is the
 * mean symmetric KL divergence between the label distributions, which stays
 * meaningful under hidden-layer reparameterization.
 */
struct ComparisonReport {
    double g_param_distance = 0.0;
    double f_param_distance = 0.0;
    double functional_distance = 0.0;
    double agreement = 0.0;  ///< fraction of probe rows with equal predictions
    double f1_a = 0.0;
    double f1_b = 0.0;
    double wall_ms_a = 0.0;  ///< filled by the caller (edit / retrain timings)
    double wall_ms_b = 0.0;
};

/// Ground-truth reference: fresh seeded training on the edited dataset.
/// strict additionally verifies both final gradient norms are below 1e-10.
CbmModel retrain(const Dataset& edited_data, const TrainConfig& cfg, ConceptArch arch,
                 int hidden = 16, bool strict = false);

ComparisonReport compare(const CbmModel& a, const CbmModel& b, const Dataset& probe);

/// One row of the damping-sweep table for a single-sample removal.
struct LooRow {
    double delta = 0.0;
    double g_err = 0.0;       ///< ||edited - retrained|| on the concept predictor
    double g_rel_err = 0.0;   ///< g_err / ||retrained||
    double g_move = 0.0;      ///< ||original - retrained||
    double f_err = 0.0;       ///< same quantities for the label predictor
    double f_rel_err = 0.0;
    double f_move = 0.0;
};

/// Trains with each damping value, removes one sample through the editor,
/// retrains with the matching regularizer and tabulates the edit-vs-retrain
/// parameter errors.
std::vector<LooRow> loo_influence_check(const Dataset& d, TrainConfig cfg,
                                        std::uint64_t sample_id,
                                        const std::vector<double>& delta_grid,
                                        ConceptArch arch = ConceptArch::Linear, int hidden = 16,
                                        CurvatureKind kind = CurvatureKind::ExactHessian);

}  // namespace ccbm
