#pragma once

#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include "ccbm/curvature.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

/// Correct individual concept annotations: each entry names a (sample,
/// concept) coordinate and the value it should have had (0 or 1).
struct ConceptLabelFix {
    struct Fix {
        std::uint64_t sample_id = 0;
        int concept_index = 0;
        double corrected = 0.0;
    };
    std::vector<Fix> fixes;
};

/// Remove a set of concepts from the model (and semantically from the data).
struct ConceptRemoval {
    std::vector<int> concepts;
};

/// Forget a set of training samples.
struct DataRemoval {
    std::vector<std::uint64_t> ids;
};

/// Incorporate a batch of new samples without retraining.
struct DataAddition {
    Dataset samples;
};

using EditRequest = std::variant<ConceptLabelFix, ConceptRemoval, DataRemoval, DataAddition>;

struct EditOptions {
    CurvatureKind curvature = CurvatureKind::DampedFisher;
    double delta = 1e-3;          ///< damping; should match the training regularizer
    double layer_damping = -1.0;  ///< EK-FAC lambda_l; negative means use delta
    /// Switch the disputed stage-2 sums to their appendix-listing variants
    /// (data removal: A over the retained samples; addition: B over the new
    /// samples only). Off by default.
    bool appendix_form = false;
    /// Reuse the label curvature fitted at f for the drift-correction stage
    /// instead of rebuilding it at the shifted predictor.
    bool reuse_label_curvature = false;
    bool soft_concepts = true;

    double lambda() const { return layer_damping < 0.0 ? delta : layer_damping; }
};

/**
 * @brief Edited model plus the intermediate quantities of the update.
 *
 * g_step is the influence step applied to the concept predictor, in the
 * original flat parameterization (zeros at coordinates a concept removal
 * pinned). label_shift_a is the stage-2 shift from the changed sample set or
 * corrected concepts; label_shift_b, when present, the correction for the
 * concept predictor's displacement. For ConceptRemoval, padded_g keeps the
 * k-output predictor with exact zero rows and padded_f the k-input label
 * predictor before column deletion.
 */
struct EditOutcome {
    CbmModel edited;
    CurvatureKind curvature = CurvatureKind::DampedFisher;
    double delta = 0.0;
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;

    Eigen::VectorXd g_step;
    Eigen::VectorXd label_shift_a;
    Eigen::VectorXd label_shift_b;

    std::optional<ConceptPredictor> padded_g;
    std::optional<LabelPredictor> padded_f;
};

EditOutcome edit_concept_labels(const CbmModel& m, const Dataset& d, const ConceptLabelFix& req,
                                const EditOptions& opt = {});
EditOutcome remove_concepts(const CbmModel& m, const Dataset& d, const ConceptRemoval& req,
                            const EditOptions& opt = {});
EditOutcome remove_data(const CbmModel& m, const Dataset& d, const DataRemoval& req,
                        const EditOptions& opt = {});
EditOutcome add_data(const CbmModel& m, const Dataset& d, const DataAddition& req,
                     const EditOptions& opt = {});

EditOutcome apply_edit(const CbmModel& m, const Dataset& d, const EditRequest& req,
                       const EditOptions& opt = {});

/// The dataset a retrained reference model would see after the edit.
Dataset apply_edit_to_dataset(const Dataset& d, const EditRequest& req);

/// Dimension mapping: delete the listed final-layer rows (weights and bias)
/// of the concept predictor, shrinking its output to k - |rows|.
ConceptPredictor drop_concept_rows(const ConceptPredictor& g, const std::vector<int>& rows);

/// Inverse mapping: re-insert exact zero rows at the listed positions
/// (positions refer to the expanded k-output indexing).
ConceptPredictor insert_zero_concept_rows(const ConceptPredictor& g, const std::vector<int>& rows);

}  // namespace ccbm
