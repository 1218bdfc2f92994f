#pragma once

#include <cstdint>
#include <filesystem>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace ccbm {

/**
 * @brief Tabular sample store: real input features, concept annotations in
 *        [0,1] (binary in generated data), integer class labels, and stable
 *        unique sample ids.
 *
 * All rows are aligned: inputs.row(i), concepts.row(i), labels[i] and ids[i]
 * describe the same sample. Value semantics throughout; safe to share
 * read-only across threads.
 */
struct Dataset {
    Eigen::MatrixXd inputs;            ///< n x d_in
    Eigen::MatrixXd concepts;          ///< n x k, entries in [0,1]
    Eigen::VectorXi labels;            ///< n, entries in [0, num_classes)
    std::vector<std::uint64_t> ids;    ///< n, unique
    int num_classes = 0;

    Eigen::Index n() const { return inputs.rows(); }
    Eigen::Index input_dim() const { return inputs.cols(); }
    Eigen::Index concept_dim() const { return concepts.cols(); }

    /// Checks row alignment, value ranges and id uniqueness; throws
    /// std::invalid_argument on violation.
    void validate() const;

    /// Row index of the sample with the given id; throws if absent.
    Eigen::Index row_of(std::uint64_t id) const;

    /// New dataset holding the given rows (in the given order).
    Dataset select_rows(const std::vector<Eigen::Index>& rows) const;

    /// New dataset without the listed concept columns.
    Dataset drop_concepts(const std::vector<int>& concept_indices) const;

    bool operator==(const Dataset& other) const;
};

/**
 * @brief Recipe for synthetic CBM data with a planted concept/label structure.
 *
 * Concepts are a thresholded linear map of the inputs, labels an argmax of a
 * linear map of the *clean* concepts, so labels depend on inputs only through
 * the concepts. Noise rates flip an exact (floored) count of entries.
 */
struct GeneratorConfig {
    Eigen::Index n = 200;
    int d_in = 10;
    int k = 8;
    int d_o = 4;
    std::uint64_t planted_seed = 1;   ///< seeds the hidden linear maps
    double concept_noise = 0.0;       ///< in [0, 0.5)
    double label_noise = 0.0;         ///< in [0, 0.5)
    std::uint64_t seed = 0;           ///< seeds inputs and noise placement

    void validate() const;
};

enum class NoiseLevel {
    ConceptLabel,   ///< individual concept entries flipped
    DataLabel,      ///< class labels re-drawn
    ConceptColumn,  ///< whole concept columns scrambled on half the samples
};

/**
 * @brief Noise-injection request plus, after application, the exact log of
 *        what was touched. Re-applying the log restores the original data.
 */
struct NoiseSpec {
    NoiseLevel level = NoiseLevel::ConceptLabel;
    double ratio = 0.1;       ///< in (0,1)
    std::uint64_t seed = 0;

    // Filled on application.
    std::vector<std::pair<std::uint64_t, int>> flipped_entries;   ///< (sample id, concept index)
    std::vector<std::tuple<std::uint64_t, int, int>> relabeled;   ///< (sample id, old label, new label)
    std::vector<int> affected_columns;                            ///< concept-column level only
};

/// Deterministic synthetic dataset; identical config gives identical bytes.
Dataset generate(const GeneratorConfig& cfg);

/// Clean concepts/labels for the same config (noise rates forced to zero).
Dataset generate_clean(const GeneratorConfig& cfg);

/// Applies the requested noise; returns the noisy data and the spec with its
/// log filled in.
std::pair<Dataset, NoiseSpec> inject_noise(const Dataset& d, const NoiseSpec& spec);

/// Inverse of inject_noise given the filled log.
Dataset undo_noise(const Dataset& d, const NoiseSpec& applied);

/// Seeded shuffle split into (train, rest); floor(train_frac * n) train rows.
std::pair<Dataset, Dataset> split(const Dataset& d, double train_frac, std::uint64_t seed);

/// JSON-lines round trip: one {"id","x","c","y"} record per sample.
void save_jsonl(const Dataset& d, const std::filesystem::path& path);
Dataset load_jsonl(const std::filesystem::path& path);

}  // namespace ccbm
