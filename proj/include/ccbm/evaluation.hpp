#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccbm/dataset.hpp"
#include "ccbm/editor.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

// ---- metrics ---------------------------------------------------------------

/// Unweighted mean over all num_classes classes of 2PR/(P+R); a class with
/// P + R = 0 contributes 0.
double f1_macro(const Eigen::VectorXi& preds, const Eigen::VectorXi& labels, int num_classes);

double accuracy(const Eigen::VectorXi& preds, const Eigen::VectorXi& labels);

// ---- membership inference ---------------------------------------------------

struct RmiaConfig {
    int min_population = 20;  ///< smallest allowed reference population
    double sigma_min = 1e-6;  ///< Gaussian fit floor
};

struct GaussianFit {
    double mu = 0.0;
    double sigma = 1.0;
};

/// Population Gaussian over scores with the standard deviation floored.
GaussianFit fit_gaussian(const std::vector<double>& scores, double sigma_min);

/// Membership score: logit of the true-class softmax probability.
double membership_score(const CbmModel& m, const Eigen::VectorXd& x, int y);

/// Mean over the reference scores of the two-factor likelihood ratio between
/// the member and non-member Gaussians; always finite and nonnegative.
double rmia_score(double target_score, const GaussianFit& member, const GaussianFit& nonmember,
                  const std::vector<double>& reference_scores);

// ---- experiment drivers ------------------------------------------------------

struct BenchmarkConfig {
    GeneratorConfig gen;
    TrainConfig train;
    EditOptions edit;
    ConceptArch arch = ConceptArch::Mlp;
    int hidden = 16;
    double train_frac = 0.7;
    double noise_ratio = 0.1;
    int rounds = 10;
    double per_round_ratio = 0.01;
    std::vector<double> data_ratios = {0.01, 0.02, 0.04, 0.06, 0.08, 0.10};
    int max_concepts_removed = 4;
    std::uint64_t seed = 0;
};

/// One measured configuration: metrics on the held-out split for the noisy /
/// pre-edit model, the influence-edited model and the retrained reference.
struct MetricsRow {
    std::string label;
    double ratio = 0.0;
    double acc_before = 0.0, f1_before = 0.0;
    double acc_edited = 0.0, f1_edited = 0.0;
    double acc_retrained = 0.0, f1_retrained = 0.0;
    double edit_ms = 0.0, retrain_ms = 0.0;
};

struct BenchmarkResult {
    std::string protocol;
    nlohmann::json config;
    std::vector<MetricsRow> rows;

    std::string to_markdown() const;
    std::string to_csv() const;
};

/// Injects noise at each granularity, trains on the corrupted data, cleans it
/// up through the matching edit and through retraining, and records the
/// before/edited/retrained metrics.
BenchmarkResult run_harmful_removal(const BenchmarkConfig& cfg);

/// Sequential cleanup: the noisy units are split into `rounds` slices; the
/// edited trajectory applies each round's edit to the previous round's edited
/// model, the reference trajectory retrains per round.
BenchmarkResult run_periodic(const BenchmarkConfig& cfg, NoiseLevel level = NoiseLevel::DataLabel);

/// Edited-vs-retrained metrics over growing removal ratios (data level) and
/// removed-concept counts (concept level).
BenchmarkResult run_ratio_sweep(const BenchmarkConfig& cfg);

/// Influence ranking: F1 drop on the validation split when removing each
/// concept through the editor; descending scores, ties by index.
std::vector<std::pair<int, double>> rank_concepts(const CbmModel& m, const Dataset& train_data,
                                                  const Dataset& val, const EditOptions& opt);

// ---- unlearning audit ---------------------------------------------------------

struct RmiaAuditConfig {
    GeneratorConfig gen;
    TrainConfig train;
    EditOptions edit;
    ConceptArch arch = ConceptArch::Mlp;
    int hidden = 16;
    int audit_size = 200;  ///< removed-member and non-member target groups
    int cal_size = 200;    ///< calibration populations for the Gaussian fits
    RmiaConfig rmia;
    std::uint64_t seed = 0;
};

struct RmiaAuditResult {
    double mean_member_rmia_before = 0.0;
    double mean_nonmember_rmia_before = 0.0;
    double mean_member_rmia_after = 0.0;
    double mean_nonmember_rmia_after = 0.0;
    double gap_before = 0.0;  ///< |mean member - mean non-member| pre-edit
    double gap_after = 0.0;   ///< same after unlearning the member group
    double mean_member_score_before = 0.0;   ///< raw logit scores
    double mean_nonmember_score_before = 0.0;
};

/// Trains, removes the audited member group through the editor and measures
/// how far their RMIA scores move toward the non-member population.
RmiaAuditResult run_rmia_audit(const RmiaAuditConfig& cfg);

}  // namespace ccbm
