#include "ccbm/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "ccbm/common.hpp"

namespace ccbm {

using nlohmann::json;

void Dataset::validate() const {
    const Eigen::Index rows = n();
    if (rows < 1) throw std::invalid_argument("Dataset: needs at least one row");
    if (concepts.rows() != rows || labels.size() != rows ||
        static_cast<Eigen::Index>(ids.size()) != rows) {
        throw std::invalid_argument("Dataset: row counts disagree");
    }
    if (num_classes < 1) throw std::invalid_argument("Dataset: num_classes must be positive");
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw std::invalid_argument("Dataset: label out of range at row " + std::to_string(i));
        }
    }
    if ((concepts.array() < 0.0).any() || (concepts.array() > 1.0).any()) {
        throw std::invalid_argument("Dataset: concept entries must lie in [0,1]");
    }
    std::unordered_set<std::uint64_t> seen(ids.begin(), ids.end());
    if (seen.size() != ids.size()) throw std::invalid_argument("Dataset: duplicate sample ids");
}

Eigen::Index Dataset::row_of(std::uint64_t id) const {
    for (Eigen::Index i = 0; i < n(); ++i) {
        if (ids[i] == id) return i;
    }
    throw std::invalid_argument("Dataset: unknown sample id " + std::to_string(id));
}

Dataset Dataset::select_rows(const std::vector<Eigen::Index>& rows) const {
    Dataset out;
    out.num_classes = num_classes;
    out.inputs.resize(rows.size(), inputs.cols());
    out.concepts.resize(rows.size(), concepts.cols());
    out.labels.resize(rows.size());
    out.ids.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Eigen::Index r = rows[i];
        out.inputs.row(i) = inputs.row(r);
        out.concepts.row(i) = concepts.row(r);
        out.labels[i] = labels[r];
        out.ids.push_back(ids[r]);
    }
    return out;
}

Dataset Dataset::drop_concepts(const std::vector<int>& concept_indices) const {
    const std::set<int> dropped(concept_indices.begin(), concept_indices.end());
    for (int j : dropped) {
        if (j < 0 || j >= concepts.cols()) {
            throw std::invalid_argument("drop_concepts: index out of range");
        }
    }
    Dataset out;
    out.inputs = inputs;
    out.labels = labels;
    out.ids = ids;
    out.num_classes = num_classes;
    out.concepts.resize(n(), concepts.cols() - static_cast<Eigen::Index>(dropped.size()));
    Eigen::Index col = 0;
    for (Eigen::Index j = 0; j < concepts.cols(); ++j) {
        if (dropped.count(static_cast<int>(j))) continue;
        out.concepts.col(col++) = concepts.col(j);
    }
    return out;
}

bool Dataset::operator==(const Dataset& other) const {
    auto same = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    return same(inputs, other.inputs) && same(concepts, other.concepts) &&
           labels.size() == other.labels.size() && labels == other.labels &&
           ids == other.ids && num_classes == other.num_classes;
}

void GeneratorConfig::validate() const {
    if (n < d_o) throw std::invalid_argument("GeneratorConfig: n must be >= d_o");
    if (k < 2) throw std::invalid_argument("GeneratorConfig: k must be >= 2");
    if (d_in < 1 || d_o < 2) throw std::invalid_argument("GeneratorConfig: bad dimensions");
    if (concept_noise < 0.0 || concept_noise >= 0.5 || label_noise < 0.0 || label_noise >= 0.5) {
        throw std::invalid_argument("GeneratorConfig: noise rates must lie in [0, 0.5)");
    }
}

namespace {

struct PlantedMaps {
    Eigen::MatrixXd w_concept;  // k x d_in
    Eigen::VectorXd b_concept;  // k
    Eigen::MatrixXd w_label;    // d_o x k
};

PlantedMaps planted_maps(const GeneratorConfig& cfg) {
    Rng rng(cfg.planted_seed);
    PlantedMaps m;
    m.w_concept.resize(cfg.k, cfg.d_in);
    m.b_concept.resize(cfg.k);
    m.w_label.resize(cfg.d_o, cfg.k);
    for (int r = 0; r < cfg.k; ++r) {
        for (int c = 0; c < cfg.d_in; ++c) m.w_concept(r, c) = rng.normal();
    }
    // Biases near zero keep the thresholded concepts roughly balanced.
    for (int r = 0; r < cfg.k; ++r) m.b_concept[r] = 0.3 * rng.normal();
    for (int r = 0; r < cfg.d_o; ++r) {
        for (int c = 0; c < cfg.k; ++c) m.w_label(r, c) = rng.normal();
    }
    return m;
}

Dataset generate_impl(const GeneratorConfig& cfg, bool with_noise) {
    cfg.validate();
    const PlantedMaps maps = planted_maps(cfg);

    Dataset d;
    d.num_classes = cfg.d_o;
    d.inputs.resize(cfg.n, cfg.d_in);
    d.concepts.resize(cfg.n, cfg.k);
    d.labels.resize(cfg.n);
    d.ids.reserve(cfg.n);

    Rng rng(cfg.seed);
    for (Eigen::Index i = 0; i < cfg.n; ++i) {
        for (int c = 0; c < cfg.d_in; ++c) d.inputs(i, c) = rng.normal();
        d.ids.push_back(static_cast<std::uint64_t>(i));
    }

    // Clean concepts: 1[W_c x + b_c > 0]; clean labels: argmax of a linear
    // map of the centered clean concepts. Centering keeps the argmax
    // distribution balanced across classes, which macro-F1 needs.
    for (Eigen::Index i = 0; i < cfg.n; ++i) {
        const Eigen::VectorXd z = maps.w_concept * d.inputs.row(i).transpose() + maps.b_concept;
        for (int j = 0; j < cfg.k; ++j) d.concepts(i, j) = z[j] > 0.0 ? 1.0 : 0.0;
        Eigen::Index best;
        (maps.w_label * (d.concepts.row(i).transpose().array() - 0.5).matrix()).maxCoeff(&best);
        d.labels[i] = static_cast<int>(best);
    }

    if (with_noise) {
        // Exact flip counts, sampled without replacement over coordinates.
        const auto n_concept_flips =
            static_cast<std::size_t>(cfg.concept_noise * static_cast<double>(cfg.n) * cfg.k);
        for (std::size_t pick : rng.sample_without_replacement(
                 static_cast<std::size_t>(cfg.n) * cfg.k, n_concept_flips)) {
            const Eigen::Index i = static_cast<Eigen::Index>(pick / cfg.k);
            const int j = static_cast<int>(pick % cfg.k);
            d.concepts(i, j) = 1.0 - d.concepts(i, j);
        }
        const auto n_label_flips =
            static_cast<std::size_t>(cfg.label_noise * static_cast<double>(cfg.n));
        for (std::size_t i : rng.sample_without_replacement(static_cast<std::size_t>(cfg.n),
                                                            n_label_flips)) {
            const int shift = 1 + static_cast<int>(rng.index(cfg.d_o - 1));
            d.labels[static_cast<Eigen::Index>(i)] =
                (d.labels[static_cast<Eigen::Index>(i)] + shift) % cfg.d_o;
        }
    }
    return d;
}

}  // namespace

Dataset generate(const GeneratorConfig& cfg) { return generate_impl(cfg, true); }

Dataset generate_clean(const GeneratorConfig& cfg) { return generate_impl(cfg, false); }

std::pair<Dataset, NoiseSpec> inject_noise(const Dataset& d, const NoiseSpec& spec) {
    if (!(spec.ratio > 0.0 && spec.ratio < 1.0)) {
        throw std::invalid_argument("inject_noise: ratio must lie in (0,1)");
    }
    Dataset out = d;
    NoiseSpec log = spec;
    log.flipped_entries.clear();
    log.relabeled.clear();
    log.affected_columns.clear();
    Rng rng(spec.seed);
    const Eigen::Index n = d.n();
    const Eigen::Index k = d.concept_dim();

    switch (spec.level) {
        case NoiseLevel::ConceptLabel: {
            const auto count = static_cast<std::size_t>(spec.ratio * static_cast<double>(n * k));
            for (std::size_t pick :
                 rng.sample_without_replacement(static_cast<std::size_t>(n * k), count)) {
                const Eigen::Index i = static_cast<Eigen::Index>(pick) / k;
                const int j = static_cast<int>(static_cast<Eigen::Index>(pick) % k);
                out.concepts(i, j) = 1.0 - out.concepts(i, j);
                log.flipped_entries.emplace_back(d.ids[i], j);
            }
            break;
        }
        case NoiseLevel::DataLabel: {
            const auto count = static_cast<std::size_t>(spec.ratio * static_cast<double>(n));
            for (std::size_t i :
                 rng.sample_without_replacement(static_cast<std::size_t>(n), count)) {
                const auto row = static_cast<Eigen::Index>(i);
                const int old_label = out.labels[row];
                const int shift = 1 + static_cast<int>(rng.index(d.num_classes - 1));
                out.labels[row] = (old_label + shift) % d.num_classes;
                log.relabeled.emplace_back(d.ids[row], old_label, out.labels[row]);
            }
            break;
        }
        case NoiseLevel::ConceptColumn: {
            // Each chosen column is flipped on half the samples, which
            // decorrelates it from the inputs instead of merely negating it.
            const auto cols = static_cast<std::size_t>(spec.ratio * static_cast<double>(k));
            for (std::size_t j :
                 rng.sample_without_replacement(static_cast<std::size_t>(k), cols)) {
                log.affected_columns.push_back(static_cast<int>(j));
                for (std::size_t i : rng.sample_without_replacement(
                         static_cast<std::size_t>(n), static_cast<std::size_t>(n / 2))) {
                    const auto row = static_cast<Eigen::Index>(i);
                    out.concepts(row, static_cast<Eigen::Index>(j)) =
                        1.0 - out.concepts(row, static_cast<Eigen::Index>(j));
                    log.flipped_entries.emplace_back(d.ids[row], static_cast<int>(j));
                }
            }
            break;
        }
    }
    return {std::move(out), std::move(log)};
}

Dataset undo_noise(const Dataset& d, const NoiseSpec& applied) {
    Dataset out = d;
    for (const auto& [id, j] : applied.flipped_entries) {
        const Eigen::Index i = out.row_of(id);
        out.concepts(i, j) = 1.0 - out.concepts(i, j);
    }
    for (const auto& [id, old_label, new_label] : applied.relabeled) {
        const Eigen::Index i = out.row_of(id);
        if (out.labels[i] != new_label) {
            throw std::invalid_argument("undo_noise: log does not match dataset");
        }
        out.labels[i] = old_label;
    }
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& d, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw std::invalid_argument("split: train_frac must lie in (0,1)");
    }
    std::vector<Eigen::Index> order(d.n());
    for (Eigen::Index i = 0; i < d.n(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_train = static_cast<std::size_t>(train_frac * static_cast<double>(d.n()));
    std::vector<Eigen::Index> train_rows(order.begin(), order.begin() + n_train);
    std::vector<Eigen::Index> rest_rows(order.begin() + n_train, order.end());
    return {d.select_rows(train_rows), d.select_rows(rest_rows)};
}

void save_jsonl(const Dataset& d, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_jsonl: cannot open " + path.string());
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        json rec;
        rec["id"] = d.ids[i];
        rec["x"] = std::vector<double>(d.inputs.row(i).begin(), d.inputs.row(i).end());
        rec["c"] = std::vector<double>(d.concepts.row(i).begin(), d.concepts.row(i).end());
        rec["y"] = d.labels[i];
        out << rec.dump() << "\n";
    }
    // Trailing metadata record keeps the class count explicit even when the
    // top class never occurs in a subset.
    json meta;
    meta["meta"] = {{"num_classes", d.num_classes}};
    out << meta.dump() << "\n";
}

Dataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_jsonl: cannot open " + path.string());
    std::vector<std::vector<double>> xs, cs;
    std::vector<int> ys;
    std::vector<std::uint64_t> ids;
    int num_classes = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json rec = json::parse(line);
        if (rec.contains("meta")) {
            num_classes = rec["meta"]["num_classes"].get<int>();
            continue;
        }
        ids.push_back(rec["id"].get<std::uint64_t>());
        xs.push_back(rec["x"].get<std::vector<double>>());
        cs.push_back(rec["c"].get<std::vector<double>>());
        ys.push_back(rec["y"].get<int>());
    }
    if (xs.empty()) throw std::runtime_error("load_jsonl: no records in " + path.string());
    Dataset d;
    d.inputs.resize(xs.size(), xs[0].size());
    d.concepts.resize(cs.size(), cs[0].size());
    d.labels.resize(ys.size());
    d.ids = std::move(ids);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != static_cast<std::size_t>(d.inputs.cols()) ||
            cs[i].size() != static_cast<std::size_t>(d.concepts.cols())) {
            throw std::runtime_error("load_jsonl: ragged rows");
        }
        for (std::size_t c = 0; c < xs[i].size(); ++c) d.inputs(i, c) = xs[i][c];
        for (std::size_t c = 0; c < cs[i].size(); ++c) d.concepts(i, c) = cs[i][c];
        d.labels[static_cast<Eigen::Index>(i)] = ys[i];
    }
    if (num_classes == 0) num_classes = d.labels.maxCoeff() + 1;
    d.num_classes = num_classes;
    d.validate();
    return d;
}

}  // namespace ccbm
