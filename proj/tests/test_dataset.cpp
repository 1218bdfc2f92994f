#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "ccbm/dataset.hpp"
#include "ccbm/model.hpp"
#include "helpers.hpp"

using namespace ccbm;

namespace {

GeneratorConfig base_cfg() {
    GeneratorConfig cfg;
    cfg.n = 200;
    cfg.d_in = 10;
    cfg.k = 8;
    cfg.d_o = 4;
    cfg.planted_seed = 3;
    cfg.seed = 7;
    return cfg;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("generate is deterministic: same config gives identical bytes") {
    const GeneratorConfig cfg = base_cfg();
    const Dataset a = generate(cfg);
    const Dataset b = generate(cfg);
    CHECK(a == b);

    const auto pa = temp_file("ccbm_det_a.jsonl");
    const auto pb = temp_file("ccbm_det_b.jsonl");
    save_jsonl(a, pa);
    save_jsonl(b, pb);
    std::ifstream fa(pa), fb(pb);
    const std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    std::filesystem::remove(pa);
    std::filesystem::remove(pb);
}

TEST_CASE("noiseless planted concepts are linearly separable from inputs") {
    GeneratorConfig cfg = base_cfg();
    cfg.concept_noise = 0.0;
    const Dataset d = generate(cfg);

    // A linear concept predictor must reach 100% train accuracy on every
    // concept; train one and threshold its probabilities.
    TrainConfig tc;
    tc.delta = 1e-6;  // nearly unregularized
    tc.tolerance = 1e-7;
    tc.max_iterations = 3000;
    const ConceptPredictor g = train_concept_predictor(d, tc, ConceptArch::Linear, 0);
    const Eigen::MatrixXd probs = g.forward_batch(d.inputs);
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        for (int j = 0; j < cfg.k; ++j) {
            correct += (probs(i, j) > 0.5 ? 1.0 : 0.0) == d.concepts(i, j);
        }
    }
    CHECK(correct == d.n() * cfg.k);
}

TEST_CASE("label noise rate is realized exactly up to rounding") {
    GeneratorConfig cfg = base_cfg();
    cfg.n = 1000;
    cfg.label_noise = 0.1;
    const Dataset noisy = generate(cfg);
    const Dataset clean = generate_clean(cfg);
    Eigen::Index flips = 0;
    for (Eigen::Index i = 0; i < noisy.n(); ++i) flips += noisy.labels[i] != clean.labels[i];
    const double measured = static_cast<double>(flips) / static_cast<double>(cfg.n);
    CHECK(std::abs(measured - 0.1) <= 1.0 / static_cast<double>(cfg.n));
}

TEST_CASE("generated labels depend on inputs only through the clean concepts") {
    GeneratorConfig cfg = base_cfg();
    cfg.concept_noise = 0.2;
    const Dataset noisy = generate(cfg);
    const Dataset clean = generate_clean(cfg);
    CHECK(noisy.labels == clean.labels);  // label noise off; concept noise must not leak
    CHECK(noisy.inputs == clean.inputs);
}

TEST_CASE("inject_noise concept-label level flips the exact count and logs it") {
    const Dataset d = generate(base_cfg());
    NoiseSpec spec;
    spec.level = NoiseLevel::ConceptLabel;
    spec.ratio = 0.1;
    spec.seed = 11;
    const auto [noisy, log] = inject_noise(d, spec);

    const auto expected = static_cast<std::size_t>(0.1 * 200 * 8);
    CHECK(log.flipped_entries.size() == expected);
    Eigen::Index changed = 0;
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        for (int j = 0; j < d.concept_dim(); ++j) changed += noisy.concepts(i, j) != d.concepts(i, j);
    }
    CHECK(static_cast<std::size_t>(changed) == expected);

    std::set<std::pair<std::uint64_t, int>> unique(log.flipped_entries.begin(),
                                                   log.flipped_entries.end());
    CHECK(unique.size() == expected);  // sampled without replacement
}

TEST_CASE("inject_noise is an involution given its log") {
    const Dataset d = generate(base_cfg());
    for (NoiseLevel level :
         {NoiseLevel::ConceptLabel, NoiseLevel::DataLabel, NoiseLevel::ConceptColumn}) {
        NoiseSpec spec;
        spec.level = level;
        spec.ratio = level == NoiseLevel::ConceptColumn ? 0.25 : 0.1;
        spec.seed = 5;
        const auto [noisy, log] = inject_noise(d, spec);
        CHECK_FALSE(noisy == d);
        CHECK(undo_noise(noisy, log) == d);
    }
}

TEST_CASE("inject_noise data-label level re-draws to a different label") {
    const Dataset d = generate(base_cfg());
    NoiseSpec spec;
    spec.level = NoiseLevel::DataLabel;
    spec.ratio = 0.2;
    spec.seed = 9;
    const auto [noisy, log] = inject_noise(d, spec);
    CHECK(log.relabeled.size() == static_cast<std::size_t>(0.2 * 200));
    for (const auto& [id, old_label, new_label] : log.relabeled) {
        CHECK(old_label != new_label);
        CHECK(noisy.labels[noisy.row_of(id)] == new_label);
    }
}

TEST_CASE("inject_noise rejects out-of-range ratios") {
    const Dataset d = generate(base_cfg());
    NoiseSpec spec;
    spec.ratio = 0.0;
    CHECK_THROWS_AS(inject_noise(d, spec), std::invalid_argument);
    spec.ratio = 1.0;
    CHECK_THROWS_AS(inject_noise(d, spec), std::invalid_argument);
}

TEST_CASE("split halves and preserves ids") {
    GeneratorConfig cfg = base_cfg();
    cfg.n = 10;
    const Dataset d = generate(cfg);
    const auto [train, rest] = split(d, 0.5, 3);
    CHECK(train.n() == 5);
    CHECK(rest.n() == 5);

    std::set<std::uint64_t> all(d.ids.begin(), d.ids.end());
    std::set<std::uint64_t> got(train.ids.begin(), train.ids.end());
    got.insert(rest.ids.begin(), rest.ids.end());
    CHECK(got == all);

    const auto [train2, rest2] = split(d, 0.5, 3);
    CHECK(train.ids == train2.ids);
}

TEST_CASE("jsonl round trip is bit exact") {
    GeneratorConfig cfg = base_cfg();
    cfg.concept_noise = 0.05;
    cfg.label_noise = 0.05;
    const Dataset d = generate(cfg);
    const auto path = temp_file("ccbm_roundtrip.jsonl");
    save_jsonl(d, path);
    const Dataset loaded = load_jsonl(path);
    CHECK(loaded == d);
    std::filesystem::remove(path);
}

TEST_CASE("validate rejects malformed datasets") {
    Dataset d = generate(base_cfg());
    SUBCASE("duplicate ids") {
        d.ids[1] = d.ids[0];
        CHECK_THROWS_AS(d.validate(), std::invalid_argument);
    }
    SUBCASE("label out of range") {
        d.labels[0] = d.num_classes;
        CHECK_THROWS_AS(d.validate(), std::invalid_argument);
    }
    SUBCASE("concept out of range") {
        d.concepts(0, 0) = 1.5;
        CHECK_THROWS_AS(d.validate(), std::invalid_argument);
    }
}

TEST_CASE("generator config invariants") {
    GeneratorConfig cfg = base_cfg();
    cfg.k = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = base_cfg();
    cfg.n = 2;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = base_cfg();
    cfg.concept_noise = 0.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
