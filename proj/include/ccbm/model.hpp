#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ccbm/dataset.hpp"

namespace ccbm {

enum class ConceptArch { Linear, Mlp };

/// One dense layer; its parameters live in the flat vector as the
/// column-major entries of the homogeneous matrix [W | b], shape out x (in+1).
struct LayerShape {
    int in = 0;
    int out = 0;
    int param_count() const { return out * (in + 1); }
};

/**
 * @brief Concept predictor g: R^d_in -> (0,1)^k.
 *
 * Linear: sigmoid(W x + b). Mlp: sigmoid(W2 tanh(W1 x + b1) + b2) with a
 * tanh hidden layer of the given width. Parameters are a single flat vector;
 * layer views map into it without copying.
 */
class ConceptPredictor {
public:
    ConceptPredictor() = default;
    ConceptPredictor(ConceptArch arch, int d_in, int k, int hidden = 16);

    ConceptArch arch() const { return arch_; }
    int input_dim() const { return d_in_; }
    int concept_dim() const { return k_; }
    int hidden_dim() const { return hidden_; }
    const std::vector<LayerShape>& layers() const { return layers_; }
    int num_layers() const { return static_cast<int>(layers_.size()); }
    int final_layer() const { return num_layers() - 1; }
    Eigen::Index param_count() const { return params_.size(); }

    const Eigen::VectorXd& params() const { return params_; }
    Eigen::VectorXd& params() { return params_; }

    /// View of layer l's parameters as the homogeneous matrix [W | b].
    Eigen::Map<const Eigen::MatrixXd> layer_matrix(int l) const;
    Eigen::Map<Eigen::MatrixXd> layer_matrix(int l);

    /// Flat offset of layer l's parameter block.
    Eigen::Index layer_offset(int l) const;

    /// Concept probabilities for one input (componentwise sigmoid).
    Eigen::VectorXd forward(const Eigen::VectorXd& x) const;

    /// Concept probabilities for every row of X; returns n x k.
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const;

private:
    ConceptArch arch_ = ConceptArch::Linear;
    int d_in_ = 0, k_ = 0, hidden_ = 0;
    std::vector<LayerShape> layers_;
    std::vector<Eigen::Index> offsets_;
    Eigen::VectorXd params_;
};

/**
 * @brief Linear label predictor f: R^k -> class logits/probabilities.
 *
 * When pure_linear is set the bias is pinned to exactly zero and excluded
 * from training and edits.
 */
class LabelPredictor {
public:
    LabelPredictor() = default;
    LabelPredictor(int k, int d_o, bool pure_linear = false);

    int input_dim() const { return shape_.in; }
    int num_classes() const { return shape_.out; }
    bool pure_linear() const { return pure_linear_; }
    const LayerShape& shape() const { return shape_; }
    Eigen::Index param_count() const { return params_.size(); }

    const Eigen::VectorXd& params() const { return params_; }
    Eigen::VectorXd& params() { return params_; }

    Eigen::Map<const Eigen::MatrixXd> matrix() const;  ///< [W | b], d_o x (k+1)
    Eigen::Map<Eigen::MatrixXd> matrix();

    /// Zeroes the bias column; called after updates when pure_linear is set.
    void enforce_pure_linear();

    /// Class logits W c + b. The accumulation is a plain sequential loop so
    /// that zeroing an input entry and deleting the corresponding column give
    /// bit-identical sums.
    Eigen::VectorXd logits(const Eigen::VectorXd& c) const;

    /// softmax(W c + b); sums to one.
    Eigen::VectorXd forward(const Eigen::VectorXd& c) const;

    /// New predictor with the listed input columns deleted.
    LabelPredictor drop_inputs(const std::vector<int>& concept_indices) const;

private:
    LayerShape shape_;
    bool pure_linear_ = false;
    Eigen::VectorXd params_;
};

Eigen::VectorXd softmax(const Eigen::VectorXd& z);

/// Stable -log softmax_y(z).
double cross_entropy_from_logits(const Eigen::VectorXd& z, int y);

/// Stable binary cross-entropy from the pre-activation o (prob = sigmoid(o)).
double bce_from_logit(double o, double target);

struct TrainInfo {
    int iterations = 0;
    double final_grad_norm = 0.0;
    bool converged = false;
    double delta = 0.0;
    std::uint64_t seed = 0;
};

/// Trained CBM: concept predictor, label predictor and training metadata.
struct CbmModel {
    ConceptPredictor g;
    LabelPredictor f;
    TrainInfo g_info;
    TrainInfo f_info;

    /// Predicted class indices for every row of X (soft concepts feed f).
    Eigen::VectorXi predict(const Eigen::MatrixXd& X) const;
};

/**
 * @brief Deterministic full-batch training settings.
 *
 * delta is both the L2 regularization strength and the curvature damping; the
 * objectives are sum_i loss_i + (delta/2)||theta||^2. Training runs seeded
 * L-BFGS (gradient-only) with backtracking line search from init_step until
 * the gradient norm falls below tolerance or max_iterations is hit.
 */
struct TrainConfig {
    double delta = 1e-3;
    int max_iterations = 4000;
    double tolerance = 1e-8;
    double init_step = 1.0;
    double init_scale = 0.1;
    std::uint64_t seed = 0;
    bool soft_concepts = true;  ///< f consumes g's probabilities, not hard labels
};

// ---- losses -------------------------------------------------------------

/// Total concept loss: sum_i sum_j BCE(g^j(x_i), c_i^j) + (delta/2)||theta_g||^2.
double concept_loss(const ConceptPredictor& g, const Dataset& d, double delta);

/// Per-concept loss terms (regularizer excluded), length k.
Eigen::VectorXd concept_loss_terms(const ConceptPredictor& g, const Dataset& d);

/// Concept loss on explicit matrices (same value as concept_loss on a dataset).
double concept_loss_on(const ConceptPredictor& g, const Eigen::MatrixXd& X,
                       const Eigen::MatrixXd& C, double delta);

/// Label loss on explicit concept inputs: sum_i CE(f(C.row(i)), y_i) + (delta/2)||theta_f||^2.
double label_loss_on(const LabelPredictor& f, const Eigen::MatrixXd& C,
                     const Eigen::VectorXi& y, double delta);

/// Label loss of the CBM pipeline (concepts from g).
double label_loss(const LabelPredictor& f, const ConceptPredictor& g, const Dataset& d,
                  double delta);

// ---- per-sample analytic gradients (regularizer excluded) ----------------

/// Gradient of the j-th concept's BCE term for one sample, flat over theta_g.
Eigen::VectorXd grad_concept_loss_single(const ConceptPredictor& g, const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& c, int j);

/// Gradient of sum_j BCE for one sample, flat over theta_g. An optional
/// include mask restricts the sum to the listed concepts.
Eigen::VectorXd grad_concept_loss_total(const ConceptPredictor& g, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& c,
                                        const std::vector<int>* include = nullptr);

/// Gradient of CE(f(c), y) for one sample, flat over theta_f.
Eigen::VectorXd grad_label_loss_single(const LabelPredictor& f, const Eigen::VectorXd& c, int y);

// ---- batched evaluation (shared by trainer, curvature and editor) --------

/// Forward/backward pass over a whole dataset for the concept predictor.
/// layer_inputs[l] is the n x in matrix of layer inputs (without the
/// homogeneous one); layer_deltas[l] the n x out matrix of pre-activation
/// gradients of the (optionally concept-masked) summed BCE loss.
struct ConceptBatch {
    std::vector<Eigen::MatrixXd> layer_inputs;
    std::vector<Eigen::MatrixXd> layer_deltas;
    Eigen::MatrixXd final_pre;  // n x k pre-activations
    Eigen::MatrixXd probs;      // n x k

    /// Flat gradient of the summed loss (regularizer excluded).
    Eigen::VectorXd total_gradient(const ConceptPredictor& g) const;

    /// Flat gradient of sample i's loss term.
    Eigen::VectorXd sample_gradient(const ConceptPredictor& g, Eigen::Index i) const;
};
ConceptBatch concept_batch(const ConceptPredictor& g, const Eigen::MatrixXd& X,
                           const Eigen::MatrixXd& C, const std::vector<int>* include = nullptr);

/// Forward/backward over explicit concept inputs for the label predictor.
struct LabelBatch {
    Eigen::MatrixXd inputs;  // n x k (what f consumed)
    Eigen::MatrixXd logits;  // n x d_o
    Eigen::MatrixXd probs;   // n x d_o
    Eigen::MatrixXd deltas;  // n x d_o, softmax minus one-hot

    Eigen::VectorXd total_gradient(const LabelPredictor& f) const;
    Eigen::VectorXd sample_gradient(const LabelPredictor& f, Eigen::Index i) const;
};
LabelBatch label_batch(const LabelPredictor& f, const Eigen::MatrixXd& C,
                       const Eigen::VectorXi& y);

/// Concept inputs the label stage consumes: soft probabilities or, with
/// soft_concepts = false, hard 0/1 thresholds at 0.5.
Eigen::MatrixXd label_inputs(const ConceptPredictor& g, const Eigen::MatrixXd& X,
                             bool soft_concepts = true);

// ---- training -------------------------------------------------------------

ConceptPredictor train_concept_predictor(const Dataset& d, const TrainConfig& cfg,
                                         ConceptArch arch, int hidden, TrainInfo* info = nullptr);

LabelPredictor train_label_predictor(const ConceptPredictor& g, const Dataset& d,
                                     const TrainConfig& cfg, bool pure_linear = false,
                                     TrainInfo* info = nullptr);

/// Trains both stages sequentially (f is fit on g's outputs).
CbmModel train_cbm(const Dataset& d, const TrainConfig& cfg, ConceptArch arch, int hidden = 16);

}  // namespace ccbm
