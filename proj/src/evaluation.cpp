#include "ccbm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ccbm/common.hpp"
#include "ccbm/io.hpp"
#include "ccbm/oracle.hpp"

namespace ccbm {

double f1_macro(const Eigen::VectorXi& preds, const Eigen::VectorXi& labels, int num_classes) {
    if (preds.size() != labels.size() || preds.size() == 0) {
        throw std::invalid_argument("f1_macro: prediction/label lengths differ or are zero");
    }
    double sum = 0.0;
    for (int c = 0; c < num_classes; ++c) {
        Eigen::Index tp = 0, fp = 0, fn = 0;
        for (Eigen::Index i = 0; i < preds.size(); ++i) {
            const bool p = preds[i] == c;
            const bool t = labels[i] == c;
            tp += p && t;
            fp += p && !t;
            fn += !p && t;
        }
        const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        if (precision + recall > 0.0) {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    return sum / static_cast<double>(num_classes);
}

double accuracy(const Eigen::VectorXi& preds, const Eigen::VectorXi& labels) {
    if (preds.size() != labels.size() || preds.size() == 0) {
        throw std::invalid_argument("accuracy: prediction/label lengths differ or are zero");
    }
    return static_cast<double>((preds.array() == labels.array()).count()) /
           static_cast<double>(preds.size());
}

GaussianFit fit_gaussian(const std::vector<double>& scores, double sigma_min) {
    if (scores.empty()) throw std::invalid_argument("fit_gaussian: empty score list");
    GaussianFit fit;
    fit.mu = std::accumulate(scores.begin(), scores.end(), 0.0) /
             static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) var += (s - fit.mu) * (s - fit.mu);
    var /= static_cast<double>(scores.size());
    fit.sigma = std::max(std::sqrt(var), sigma_min);
    return fit;
}

double membership_score(const CbmModel& m, const Eigen::VectorXd& x, int y) {
    const Eigen::VectorXd p = softmax(m.f.logits(m.g.forward(x)));
    const double py = std::clamp(p[y], 1e-15, 1.0 - 1e-15);
    return std::log(py / (1.0 - py));
}

namespace {

double log_normal_pdf(double s, const GaussianFit& fit) {
    const double z = (s - fit.mu) / fit.sigma;
    return -0.5 * z * z - std::log(fit.sigma) - 0.918938533204672742;  // 0.5*log(2*pi)
}

}  // namespace

double rmia_score(double target_score, const GaussianFit& member, const GaussianFit& nonmember,
                  const std::vector<double>& reference_scores) {
    if (reference_scores.empty()) throw std::invalid_argument("rmia_score: empty reference set");
    const double target_log_ratio =
        log_normal_pdf(target_score, member) - log_normal_pdf(target_score, nonmember);
    double sum = 0.0;
    for (double z : reference_scores) {
        const double log_ratio =
            target_log_ratio + log_normal_pdf(z, member) - log_normal_pdf(z, nonmember);
        sum += std::exp(std::min(log_ratio, 700.0));  // clamp keeps the output finite
    }
    return sum / static_cast<double>(reference_scores.size());
}

// ---- drivers -----------------------------------------------------------------

namespace {

struct EvalPair {
    double acc = 0.0;
    double f1 = 0.0;
};

EvalPair eval_model(const CbmModel& m, const Dataset& probe) {
    const Eigen::VectorXi preds = m.predict(probe.inputs);
    return {accuracy(preds, probe.labels), f1_macro(preds, probe.labels, probe.num_classes)};
}

EditRequest cleanup_request(NoiseLevel level, const Dataset& clean, const NoiseSpec& log) {
    switch (level) {
        case NoiseLevel::ConceptLabel: {
            ConceptLabelFix fix;
            for (const auto& [id, j] : log.flipped_entries) {
                fix.fixes.push_back({id, j, clean.concepts(clean.row_of(id), j)});
            }
            return fix;
        }
        case NoiseLevel::DataLabel: {
            DataRemoval rm;
            for (const auto& [id, old_label, new_label] : log.relabeled) {
                (void)old_label;
                (void)new_label;
                rm.ids.push_back(id);
            }
            return rm;
        }
        case NoiseLevel::ConceptColumn: {
            return ConceptRemoval{log.affected_columns};
        }
    }
    throw std::invalid_argument("unknown noise level");
}

std::string level_name(NoiseLevel level) {
    switch (level) {
        case NoiseLevel::ConceptLabel: return "concept-label";
        case NoiseLevel::DataLabel: return "data-label";
        case NoiseLevel::ConceptColumn: return "concept-column";
    }
    return "?";
}

}  // namespace

BenchmarkResult run_harmful_removal(const BenchmarkConfig& cfg) {
    BenchmarkResult result;
    result.protocol = "harmful-removal";
    result.config = nlohmann::json(cfg);

    const Dataset all = generate(cfg.gen);
    auto [train_clean, held] = split(all, cfg.train_frac, cfg.seed);

    const NoiseLevel levels[] = {NoiseLevel::ConceptLabel, NoiseLevel::DataLabel,
                                 NoiseLevel::ConceptColumn};
    std::uint64_t noise_seed = cfg.seed + 1;
    for (NoiseLevel level : levels) {
        NoiseSpec spec;
        spec.level = level;
        spec.ratio = cfg.noise_ratio;
        spec.seed = noise_seed++;
        auto [noisy, log] = inject_noise(train_clean, spec);

        const CbmModel before = train_cbm(noisy, cfg.train, cfg.arch, cfg.hidden);
        const EditRequest request = cleanup_request(level, train_clean, log);

        Stopwatch sw_edit;
        const EditOutcome outcome = apply_edit(before, noisy, request, cfg.edit);
        const double edit_ms = sw_edit.elapsed_ms();

        Stopwatch sw_retrain;
        const Dataset cleaned = apply_edit_to_dataset(noisy, request);
        const CbmModel reference = retrain(cleaned, cfg.train, cfg.arch, cfg.hidden);
        const double retrain_ms = sw_retrain.elapsed_ms();

        MetricsRow row;
        row.label = level_name(level);
        row.ratio = cfg.noise_ratio;
        const EvalPair b = eval_model(before, held);
        const EvalPair e = eval_model(outcome.edited, held);
        const EvalPair r = eval_model(reference, held);
        row.acc_before = b.acc;
        row.f1_before = b.f1;
        row.acc_edited = e.acc;
        row.f1_edited = e.f1;
        row.acc_retrained = r.acc;
        row.f1_retrained = r.f1;
        row.edit_ms = edit_ms;
        row.retrain_ms = retrain_ms;
        result.rows.push_back(row);
    }
    return result;
}

BenchmarkResult run_periodic(const BenchmarkConfig& cfg, NoiseLevel level) {
    BenchmarkResult result;
    result.protocol = "periodic-" + level_name(level);
    result.config = nlohmann::json(cfg);

    const Dataset all = generate(cfg.gen);
    auto [train_clean, held] = split(all, cfg.train_frac, cfg.seed);

    NoiseSpec spec;
    spec.level = level;
    spec.ratio = cfg.noise_ratio;
    spec.seed = cfg.seed + 17;
    auto [noisy, log] = inject_noise(train_clean, spec);

    const CbmModel initial = train_cbm(noisy, cfg.train, cfg.arch, cfg.hidden);
    const EvalPair init_eval = eval_model(initial, held);

    MetricsRow round0;
    round0.label = "round-0";
    round0.ratio = 0.0;
    round0.acc_before = round0.acc_edited = round0.acc_retrained = init_eval.acc;
    round0.f1_before = round0.f1_edited = round0.f1_retrained = init_eval.f1;
    result.rows.push_back(round0);

    // Split the noisy units into per-round slices.
    const std::size_t total = level == NoiseLevel::DataLabel ? log.relabeled.size()
                              : level == NoiseLevel::ConceptLabel ? log.flipped_entries.size()
                                                                  : log.affected_columns.size();
    CbmModel edited_model = initial;
    Dataset current = noisy;

    for (int round = 0; round < cfg.rounds; ++round) {
        const std::size_t lo = round * total / cfg.rounds;
        const std::size_t hi = (round + 1) * total / cfg.rounds;

        EditRequest request = DataRemoval{};
        switch (level) {
            case NoiseLevel::DataLabel: {
                DataRemoval rm;
                for (std::size_t i = lo; i < hi; ++i) rm.ids.push_back(std::get<0>(log.relabeled[i]));
                request = rm;
                break;
            }
            case NoiseLevel::ConceptLabel: {
                ConceptLabelFix fix;
                for (std::size_t i = lo; i < hi; ++i) {
                    const auto& [id, j] = log.flipped_entries[i];
                    fix.fixes.push_back({id, j, train_clean.concepts(train_clean.row_of(id), j)});
                }
                request = fix;
                break;
            }
            case NoiseLevel::ConceptColumn: {
                ConceptRemoval rm;
                for (std::size_t i = lo; i < hi; ++i) rm.concepts.push_back(log.affected_columns[i]);
                request = rm;
                break;
            }
        }

        MetricsRow row;
        row.label = "round-" + std::to_string(round + 1);
        row.ratio = static_cast<double>(hi) / std::max<std::size_t>(total, 1);
        const EvalPair before = eval_model(edited_model, held);
        row.acc_before = before.acc;
        row.f1_before = before.f1;

        const bool empty_slice = lo == hi;
        Stopwatch sw_edit;
        if (!empty_slice) {
            const EditOutcome outcome = apply_edit(edited_model, current, request, cfg.edit);
            edited_model = outcome.edited;
            current = apply_edit_to_dataset(current, request);
        }
        row.edit_ms = sw_edit.elapsed_ms();

        Stopwatch sw_retrain;
        const CbmModel reference = retrain(current, cfg.train, cfg.arch, cfg.hidden);
        row.retrain_ms = sw_retrain.elapsed_ms();

        const EvalPair e = eval_model(edited_model, held);
        const EvalPair r = eval_model(reference, held);
        row.acc_edited = e.acc;
        row.f1_edited = e.f1;
        row.acc_retrained = r.acc;
        row.f1_retrained = r.f1;
        result.rows.push_back(row);
    }
    return result;
}

BenchmarkResult run_ratio_sweep(const BenchmarkConfig& cfg) {
    BenchmarkResult result;
    result.protocol = "ratio-sweep";
    result.config = nlohmann::json(cfg);

    const Dataset all = generate(cfg.gen);
    auto [train_data, held] = split(all, cfg.train_frac, cfg.seed);
    const CbmModel base = train_cbm(train_data, cfg.train, cfg.arch, cfg.hidden);
    const EvalPair base_eval = eval_model(base, held);

    // Data-removal ratios.
    Rng rng(cfg.seed + 23);
    std::vector<std::uint64_t> shuffled_ids = train_data.ids;
    rng.shuffle(shuffled_ids);
    for (double ratio : cfg.data_ratios) {
        const auto count = static_cast<std::size_t>(ratio * static_cast<double>(train_data.n()));
        DataRemoval rm;
        rm.ids.assign(shuffled_ids.begin(), shuffled_ids.begin() + count);

        MetricsRow row;
        row.label = "data-removal";
        row.ratio = ratio;
        row.acc_before = base_eval.acc;
        row.f1_before = base_eval.f1;

        Stopwatch sw_edit;
        const EditOutcome outcome = remove_data(base, train_data, rm, cfg.edit);
        row.edit_ms = sw_edit.elapsed_ms();

        Stopwatch sw_retrain;
        const Dataset reduced = apply_edit_to_dataset(train_data, EditRequest{rm});
        const CbmModel reference = retrain(reduced, cfg.train, cfg.arch, cfg.hidden);
        row.retrain_ms = sw_retrain.elapsed_ms();

        const EvalPair e = eval_model(outcome.edited, held);
        const EvalPair r = eval_model(reference, held);
        row.acc_edited = e.acc;
        row.f1_edited = e.f1;
        row.acc_retrained = r.acc;
        row.f1_retrained = r.f1;
        result.rows.push_back(row);
    }

    // Concept-removal counts.
    std::vector<int> concept_order(train_data.concept_dim());
    std::iota(concept_order.begin(), concept_order.end(), 0);
    rng.shuffle(concept_order);
    for (int m = 1; m <= cfg.max_concepts_removed; ++m) {
        ConceptRemoval rm;
        rm.concepts.assign(concept_order.begin(), concept_order.begin() + m);
        std::sort(rm.concepts.begin(), rm.concepts.end());

        MetricsRow row;
        row.label = "concept-removal";
        row.ratio = static_cast<double>(m);
        row.acc_before = base_eval.acc;
        row.f1_before = base_eval.f1;

        Stopwatch sw_edit;
        const EditOutcome outcome = remove_concepts(base, train_data, rm, cfg.edit);
        row.edit_ms = sw_edit.elapsed_ms();

        Stopwatch sw_retrain;
        const Dataset reduced = apply_edit_to_dataset(train_data, EditRequest{rm});
        const CbmModel reference = retrain(reduced, cfg.train, cfg.arch, cfg.hidden);
        row.retrain_ms = sw_retrain.elapsed_ms();

        const EvalPair e = eval_model(outcome.edited, held);
        const EvalPair r = eval_model(reference, held);
        row.acc_edited = e.acc;
        row.f1_edited = e.f1;
        row.acc_retrained = r.acc;
        row.f1_retrained = r.f1;
        result.rows.push_back(row);
    }
    return result;
}

std::vector<std::pair<int, double>> rank_concepts(const CbmModel& m, const Dataset& train_data,
                                                  const Dataset& val, const EditOptions& opt) {
    const Eigen::VectorXi base_preds = m.predict(val.inputs);
    const double base_f1 = f1_macro(base_preds, val.labels, val.num_classes);

    std::vector<std::pair<int, double>> scores;
    scores.reserve(m.g.concept_dim());
    for (int j = 0; j < m.g.concept_dim(); ++j) {
        const EditOutcome outcome = remove_concepts(m, train_data, ConceptRemoval{{j}}, opt);
        const Eigen::VectorXi preds = outcome.edited.predict(val.inputs);
        scores.emplace_back(j, base_f1 - f1_macro(preds, val.labels, val.num_classes));
    }
    std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return scores;
}

RmiaAuditResult run_rmia_audit(const RmiaAuditConfig& cfg) {
    const Dataset all = generate(cfg.gen);
    auto [train_data, outside] = split(all, 0.5, cfg.seed);
    const int need = cfg.audit_size + cfg.cal_size;
    if (train_data.n() < need || outside.n() < need) {
        throw std::invalid_argument("run_rmia_audit: dataset too small for the requested groups");
    }
    if (cfg.audit_size < cfg.rmia.min_population || cfg.cal_size < cfg.rmia.min_population) {
        throw std::invalid_argument("run_rmia_audit: population below the configured minimum");
    }

    // Disjoint audit targets and calibration populations on both sides.
    std::vector<Eigen::Index> member_rows(train_data.n());
    std::iota(member_rows.begin(), member_rows.end(), 0);
    Rng rng(cfg.seed + 31);
    rng.shuffle(member_rows);
    const std::vector<Eigen::Index> audit_members(member_rows.begin(),
                                                  member_rows.begin() + cfg.audit_size);
    const std::vector<Eigen::Index> cal_members(member_rows.begin() + cfg.audit_size,
                                                member_rows.begin() + need);
    std::vector<Eigen::Index> outside_rows(outside.n());
    std::iota(outside_rows.begin(), outside_rows.end(), 0);
    rng.shuffle(outside_rows);
    const std::vector<Eigen::Index> audit_nonmembers(outside_rows.begin(),
                                                     outside_rows.begin() + cfg.audit_size);
    const std::vector<Eigen::Index> cal_nonmembers(outside_rows.begin() + cfg.audit_size,
                                                   outside_rows.begin() + need);

    const CbmModel model = train_cbm(train_data, cfg.train, cfg.arch, cfg.hidden);

    auto scores_of = [&](const CbmModel& m, const Dataset& d,
                         const std::vector<Eigen::Index>& rows) {
        std::vector<double> s;
        s.reserve(rows.size());
        for (Eigen::Index r : rows) {
            s.push_back(membership_score(m, d.inputs.row(r).transpose(), d.labels[r]));
        }
        return s;
    };
    auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    auto rmia_mean = [&](const std::vector<double>& targets, const GaussianFit& member,
                         const GaussianFit& nonmember, const std::vector<double>& refs) {
        double sum = 0.0;
        for (double s : targets) sum += rmia_score(s, member, nonmember, refs);
        return sum / static_cast<double>(targets.size());
    };

    RmiaAuditResult result;
    {
        const auto member_cal_scores = scores_of(model, train_data, cal_members);
        const auto nonmember_cal_scores = scores_of(model, outside, cal_nonmembers);
        const GaussianFit member_fit = fit_gaussian(member_cal_scores, cfg.rmia.sigma_min);
        const GaussianFit nonmember_fit = fit_gaussian(nonmember_cal_scores, cfg.rmia.sigma_min);

        const auto target_member_scores = scores_of(model, train_data, audit_members);
        const auto target_nonmember_scores = scores_of(model, outside, audit_nonmembers);
        result.mean_member_score_before = mean(target_member_scores);
        result.mean_nonmember_score_before = mean(target_nonmember_scores);
        result.mean_member_rmia_before =
            rmia_mean(target_member_scores, member_fit, nonmember_fit, nonmember_cal_scores);
        result.mean_nonmember_rmia_before =
            rmia_mean(target_nonmember_scores, member_fit, nonmember_fit, nonmember_cal_scores);
        result.gap_before =
            std::abs(result.mean_member_rmia_before - result.mean_nonmember_rmia_before);
    }

    DataRemoval removal;
    for (Eigen::Index r : audit_members) removal.ids.push_back(train_data.ids[r]);
    const EditOutcome outcome = remove_data(model, train_data, removal, cfg.edit);
    const CbmModel& unlearned = outcome.edited;

    {
        const auto member_cal_scores = scores_of(unlearned, train_data, cal_members);
        const auto nonmember_cal_scores = scores_of(unlearned, outside, cal_nonmembers);
        const GaussianFit member_fit = fit_gaussian(member_cal_scores, cfg.rmia.sigma_min);
        const GaussianFit nonmember_fit = fit_gaussian(nonmember_cal_scores, cfg.rmia.sigma_min);

        const auto target_member_scores = scores_of(unlearned, train_data, audit_members);
        const auto target_nonmember_scores = scores_of(unlearned, outside, audit_nonmembers);
        result.mean_member_rmia_after =
            rmia_mean(target_member_scores, member_fit, nonmember_fit, nonmember_cal_scores);
        result.mean_nonmember_rmia_after =
            rmia_mean(target_nonmember_scores, member_fit, nonmember_fit, nonmember_cal_scores);
        result.gap_after =
            std::abs(result.mean_member_rmia_after - result.mean_nonmember_rmia_after);
    }
    return result;
}

// ---- rendering -----------------------------------------------------------------

std::string BenchmarkResult::to_markdown() const {
    std::ostringstream out;
    out << "## " << protocol << "\n\n";
    out << "| setting | ratio | F1 before | F1 edited | F1 retrained | acc before | acc edited "
           "| acc retrained | edit RT (min) | retrain RT (min) |\n";
    out << "|---|---|---|---|---|---|---|---|---|---|\n";
    out << std::fixed;
    for (const auto& r : rows) {
        out.precision(4);
        out << "| " << r.label << " | " << r.ratio << " | " << r.f1_before << " | " << r.f1_edited
            << " | " << r.f1_retrained << " | " << r.acc_before << " | " << r.acc_edited << " | "
            << r.acc_retrained << " | ";
        out.precision(2);
        out << r.edit_ms / 60000.0 << " | " << r.retrain_ms / 60000.0 << " |\n";
    }
    return out.str();
}

std::string BenchmarkResult::to_csv() const {
    std::ostringstream out;
    out << "label,ratio,f1_before,f1_edited,f1_retrained,acc_before,acc_edited,acc_retrained,"
           "edit_ms,retrain_ms\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.label << ',' << r.ratio << ',' << r.f1_before << ',' << r.f1_edited << ','
            << r.f1_retrained << ',' << r.acc_before << ',' << r.acc_edited << ','
            << r.acc_retrained << ',' << r.edit_ms << ',' << r.retrain_ms << "\n";
    }
    return out.str();
}

}  // namespace ccbm
