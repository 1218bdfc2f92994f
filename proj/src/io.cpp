#include "ccbm/io.hpp"

#include <fstream>

#include "ccbm/evaluation.hpp"

namespace ccbm {

using nlohmann::json;

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    if (rows.empty()) return {};
    Eigen::MatrixXd m(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) throw std::invalid_argument("ragged matrix in JSON");
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
    }
    return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
    return std::vector<double>(v.begin(), v.end());
}

Eigen::VectorXd vector_from_json(const json& j) {
    const auto vals = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(vals.data(), vals.size());
}

std::string arch_name(ConceptArch a) { return a == ConceptArch::Linear ? "linear" : "mlp"; }

ConceptArch arch_from_name(const std::string& s) {
    if (s == "linear") return ConceptArch::Linear;
    if (s == "mlp") return ConceptArch::Mlp;
    throw std::invalid_argument("unknown architecture: " + s);
}

std::string noise_level_name(NoiseLevel l) {
    switch (l) {
        case NoiseLevel::ConceptLabel: return "concept-label";
        case NoiseLevel::DataLabel: return "data-label";
        case NoiseLevel::ConceptColumn: return "concept-column";
    }
    return "?";
}

NoiseLevel noise_level_from_name(const std::string& s) {
    if (s == "concept-label") return NoiseLevel::ConceptLabel;
    if (s == "data-label") return NoiseLevel::DataLabel;
    if (s == "concept-column") return NoiseLevel::ConceptColumn;
    throw std::invalid_argument("unknown noise level: " + s);
}

}  // namespace

std::string curvature_kind_name(CurvatureKind k) {
    switch (k) {
        case CurvatureKind::ExactHessian: return "exact";
        case CurvatureKind::DampedFisher: return "fisher";
        case CurvatureKind::EkFac: return "ekfac";
    }
    return "?";
}

CurvatureKind curvature_kind_from_name(const std::string& name) {
    if (name == "exact") return CurvatureKind::ExactHessian;
    if (name == "fisher") return CurvatureKind::DampedFisher;
    if (name == "ekfac") return CurvatureKind::EkFac;
    throw std::invalid_argument("unknown curvature kind: " + name);
}

void to_json(json& j, const GeneratorConfig& v) {
    j = json{{"n", v.n},
             {"d_in", v.d_in},
             {"k", v.k},
             {"d_o", v.d_o},
             {"planted_seed", v.planted_seed},
             {"concept_noise", v.concept_noise},
             {"label_noise", v.label_noise},
             {"seed", v.seed}};
}

void from_json(const json& j, GeneratorConfig& v) {
    v = GeneratorConfig{};
    if (j.contains("n")) v.n = j["n"].get<Eigen::Index>();
    if (j.contains("d_in")) v.d_in = j["d_in"].get<int>();
    if (j.contains("k")) v.k = j["k"].get<int>();
    if (j.contains("d_o")) v.d_o = j["d_o"].get<int>();
    if (j.contains("planted_seed")) v.planted_seed = j["planted_seed"].get<std::uint64_t>();
    if (j.contains("concept_noise")) v.concept_noise = j["concept_noise"].get<double>();
    if (j.contains("label_noise")) v.label_noise = j["label_noise"].get<double>();
    if (j.contains("seed")) v.seed = j["seed"].get<std::uint64_t>();
}

void to_json(json& j, const NoiseSpec& v) {
    j = json{{"level", noise_level_name(v.level)}, {"ratio", v.ratio}, {"seed", v.seed}};
    json flips = json::array();
    for (const auto& [id, c] : v.flipped_entries) flips.push_back({{"id", id}, {"concept", c}});
    j["flipped_entries"] = flips;
    json relabels = json::array();
    for (const auto& [id, o, n] : v.relabeled) {
        relabels.push_back({{"id", id}, {"old", o}, {"new", n}});
    }
    j["relabeled"] = relabels;
    j["affected_columns"] = v.affected_columns;
}

void from_json(const json& j, NoiseSpec& v) {
    v = NoiseSpec{};
    v.level = noise_level_from_name(j.at("level").get<std::string>());
    v.ratio = j.at("ratio").get<double>();
    if (j.contains("seed")) v.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("flipped_entries")) {
        for (const auto& e : j["flipped_entries"]) {
            v.flipped_entries.emplace_back(e.at("id").get<std::uint64_t>(),
                                           e.at("concept").get<int>());
        }
    }
    if (j.contains("relabeled")) {
        for (const auto& e : j["relabeled"]) {
            v.relabeled.emplace_back(e.at("id").get<std::uint64_t>(), e.at("old").get<int>(),
                                     e.at("new").get<int>());
        }
    }
    if (j.contains("affected_columns")) {
        v.affected_columns = j["affected_columns"].get<std::vector<int>>();
    }
}

void to_json(json& j, const TrainConfig& v) {
    j = json{{"delta", v.delta},
             {"max_iterations", v.max_iterations},
             {"tolerance", v.tolerance},
             {"init_step", v.init_step},
             {"init_scale", v.init_scale},
             {"seed", v.seed},
             {"soft_concepts", v.soft_concepts}};
}

void from_json(const json& j, TrainConfig& v) {
    v = TrainConfig{};
    if (j.contains("delta")) v.delta = j["delta"].get<double>();
    if (j.contains("max_iterations")) v.max_iterations = j["max_iterations"].get<int>();
    if (j.contains("tolerance")) v.tolerance = j["tolerance"].get<double>();
    if (j.contains("init_step")) v.init_step = j["init_step"].get<double>();
    if (j.contains("init_scale")) v.init_scale = j["init_scale"].get<double>();
    if (j.contains("seed")) v.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("soft_concepts")) v.soft_concepts = j["soft_concepts"].get<bool>();
}

void to_json(json& j, const TrainInfo& v) {
    j = json{{"iterations", v.iterations},
             {"final_grad_norm", v.final_grad_norm},
             {"converged", v.converged},
             {"delta", v.delta},
             {"seed", v.seed}};
}

void from_json(const json& j, TrainInfo& v) {
    v = TrainInfo{};
    if (j.contains("iterations")) v.iterations = j["iterations"].get<int>();
    if (j.contains("final_grad_norm")) v.final_grad_norm = j["final_grad_norm"].get<double>();
    if (j.contains("converged")) v.converged = j["converged"].get<bool>();
    if (j.contains("delta")) v.delta = j["delta"].get<double>();
    if (j.contains("seed")) v.seed = j["seed"].get<std::uint64_t>();
}

void to_json(json& j, const ConceptPredictor& v) {
    j["arch"] = arch_name(v.arch());
    j["d_in"] = v.input_dim();
    j["k"] = v.concept_dim();
    j["hidden"] = v.hidden_dim();
    json layers = json::array();
    for (int l = 0; l < v.num_layers(); ++l) {
        const auto m = v.layer_matrix(l);
        json layer;
        layer["in"] = v.layers()[l].in;
        layer["out"] = v.layers()[l].out;
        layer["weight"] = matrix_to_json(m.leftCols(v.layers()[l].in));
        layer["bias"] = vector_to_json(m.col(v.layers()[l].in));
        layers.push_back(layer);
    }
    j["layers"] = layers;
}

void from_json(const json& j, ConceptPredictor& v) {
    v = ConceptPredictor(arch_from_name(j.at("arch").get<std::string>()), j.at("d_in").get<int>(),
                         j.at("k").get<int>(),
                         j.contains("hidden") ? j["hidden"].get<int>() : 16);
    const auto& layers = j.at("layers");
    if (static_cast<int>(layers.size()) != v.num_layers()) {
        throw std::invalid_argument("checkpoint: layer count mismatch");
    }
    for (int l = 0; l < v.num_layers(); ++l) {
        auto m = v.layer_matrix(l);
        const Eigen::MatrixXd w = matrix_from_json(layers[l].at("weight"));
        const Eigen::VectorXd b = vector_from_json(layers[l].at("bias"));
        if (w.rows() != v.layers()[l].out || w.cols() != v.layers()[l].in ||
            b.size() != v.layers()[l].out) {
            throw std::invalid_argument("checkpoint: layer shape mismatch");
        }
        m.leftCols(w.cols()) = w;
        m.col(w.cols()) = b;
    }
}

void to_json(json& j, const LabelPredictor& v) {
    j["k"] = v.input_dim();
    j["d_o"] = v.num_classes();
    j["pure_linear"] = v.pure_linear();
    const auto m = v.matrix();
    j["weight"] = matrix_to_json(m.leftCols(v.input_dim()));
    j["bias"] = vector_to_json(m.col(v.input_dim()));
}

void from_json(const json& j, LabelPredictor& v) {
    v = LabelPredictor(j.at("k").get<int>(), j.at("d_o").get<int>(),
                       j.contains("pure_linear") && j["pure_linear"].get<bool>());
    auto m = v.matrix();
    const Eigen::MatrixXd w = matrix_from_json(j.at("weight"));
    const Eigen::VectorXd b = vector_from_json(j.at("bias"));
    if (w.rows() != v.num_classes() || w.cols() != v.input_dim() || b.size() != v.num_classes()) {
        throw std::invalid_argument("checkpoint: label predictor shape mismatch");
    }
    m.leftCols(w.cols()) = w;
    m.col(w.cols()) = b;
    v.enforce_pure_linear();
}

void to_json(json& j, const CbmModel& v) {
    j["g"] = v.g;
    j["f"] = v.f;
    j["g_info"] = v.g_info;
    j["f_info"] = v.f_info;
}

void from_json(const json& j, CbmModel& v) {
    v.g = j.at("g").get<ConceptPredictor>();
    v.f = j.at("f").get<LabelPredictor>();
    if (j.contains("g_info")) v.g_info = j["g_info"].get<TrainInfo>();
    if (j.contains("f_info")) v.f_info = j["f_info"].get<TrainInfo>();
    if (v.g.concept_dim() != v.f.input_dim()) {
        throw std::invalid_argument("checkpoint: concept dimension mismatch between g and f");
    }
}

void to_json(json& j, const EditOptions& v) {
    j = json{{"curvature", curvature_kind_name(v.curvature)},
             {"delta", v.delta},
             {"layer_damping", v.layer_damping},
             {"appendix_form", v.appendix_form},
             {"reuse_label_curvature", v.reuse_label_curvature},
             {"soft_concepts", v.soft_concepts}};
}

void from_json(const json& j, EditOptions& v) {
    v = EditOptions{};
    if (j.contains("curvature")) {
        v.curvature = curvature_kind_from_name(j["curvature"].get<std::string>());
    }
    if (j.contains("delta")) v.delta = j["delta"].get<double>();
    if (j.contains("layer_damping")) v.layer_damping = j["layer_damping"].get<double>();
    if (j.contains("appendix_form")) v.appendix_form = j["appendix_form"].get<bool>();
    if (j.contains("reuse_label_curvature")) {
        v.reuse_label_curvature = j["reuse_label_curvature"].get<bool>();
    }
    if (j.contains("soft_concepts")) v.soft_concepts = j["soft_concepts"].get<bool>();
}

void to_json(json& j, const EditRequest& v) {
    std::visit(
        [&](const auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, ConceptLabelFix>) {
                j["type"] = "concept-label";
                json fixes = json::array();
                for (const auto& f : r.fixes) {
                    fixes.push_back({{"id", f.sample_id},
                                     {"concept", f.concept_index},
                                     {"corrected", f.corrected}});
                }
                j["fixes"] = fixes;
            } else if constexpr (std::is_same_v<T, ConceptRemoval>) {
                j["type"] = "concept-remove";
                j["concepts"] = r.concepts;
            } else if constexpr (std::is_same_v<T, DataRemoval>) {
                j["type"] = "data-remove";
                j["ids"] = r.ids;
            } else {
                j["type"] = "data-add";
                json samples = json::array();
                for (Eigen::Index i = 0; i < r.samples.n(); ++i) {
                    samples.push_back(
                        {{"id", r.samples.ids[i]},
                         {"x", std::vector<double>(r.samples.inputs.row(i).begin(),
                                                   r.samples.inputs.row(i).end())},
                         {"c", std::vector<double>(r.samples.concepts.row(i).begin(),
                                                   r.samples.concepts.row(i).end())},
                         {"y", r.samples.labels[i]}});
                }
                j["samples"] = samples;
                j["num_classes"] = r.samples.num_classes;
            }
        },
        v);
}

void from_json(const json& j, EditRequest& v) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "concept-label") {
        ConceptLabelFix fix;
        for (const auto& e : j.at("fixes")) {
            fix.fixes.push_back({e.at("id").get<std::uint64_t>(), e.at("concept").get<int>(),
                                 e.at("corrected").get<double>()});
        }
        v = fix;
    } else if (type == "concept-remove") {
        v = ConceptRemoval{j.at("concepts").get<std::vector<int>>()};
    } else if (type == "data-remove") {
        v = DataRemoval{j.at("ids").get<std::vector<std::uint64_t>>()};
    } else if (type == "data-add") {
        DataAddition add;
        const auto& samples = j.at("samples");
        if (samples.empty()) throw std::invalid_argument("data-add request without samples");
        const auto first_x = samples[0].at("x").get<std::vector<double>>();
        const auto first_c = samples[0].at("c").get<std::vector<double>>();
        add.samples.inputs.resize(samples.size(), first_x.size());
        add.samples.concepts.resize(samples.size(), first_c.size());
        add.samples.labels.resize(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto x = samples[i].at("x").get<std::vector<double>>();
            const auto c = samples[i].at("c").get<std::vector<double>>();
            for (std::size_t q = 0; q < x.size(); ++q) add.samples.inputs(i, q) = x[q];
            for (std::size_t q = 0; q < c.size(); ++q) add.samples.concepts(i, q) = c[q];
            add.samples.labels[static_cast<Eigen::Index>(i)] = samples[i].at("y").get<int>();
            add.samples.ids.push_back(samples[i].at("id").get<std::uint64_t>());
        }
        add.samples.num_classes = j.contains("num_classes")
                                      ? j["num_classes"].get<int>()
                                      : add.samples.labels.maxCoeff() + 1;
        v = add;
    } else {
        throw std::invalid_argument("unknown edit request type: " + type);
    }
}

void to_json(json& j, const EditOutcome& v) {
    j["curvature"] = curvature_kind_name(v.curvature);
    j["delta"] = v.delta;
    j["stage1_ms"] = v.stage1_ms;
    j["stage2_ms"] = v.stage2_ms;
    j["g_step_norm"] = v.g_step.norm();
    j["label_shift_a_norm"] = v.label_shift_a.norm();
    j["label_shift_b_norm"] = v.label_shift_b.size() ? v.label_shift_b.norm() : 0.0;
}

void to_json(json& j, const ComparisonReport& v) {
    j = json{{"g_param_distance", v.g_param_distance},
             {"f_param_distance", v.f_param_distance},
             {"functional_distance", v.functional_distance},
             {"agreement", v.agreement},
             {"f1_a", v.f1_a},
             {"f1_b", v.f1_b},
             {"wall_ms_a", v.wall_ms_a},
             {"wall_ms_b", v.wall_ms_b}};
}

void from_json(const json& j, ComparisonReport& v) {
    v = ComparisonReport{};
    v.g_param_distance = j.at("g_param_distance").get<double>();
    v.f_param_distance = j.at("f_param_distance").get<double>();
    v.functional_distance = j.at("functional_distance").get<double>();
    v.agreement = j.at("agreement").get<double>();
    v.f1_a = j.at("f1_a").get<double>();
    v.f1_b = j.at("f1_b").get<double>();
    if (j.contains("wall_ms_a")) v.wall_ms_a = j["wall_ms_a"].get<double>();
    if (j.contains("wall_ms_b")) v.wall_ms_b = j["wall_ms_b"].get<double>();
}

void to_json(json& j, const LooRow& v) {
    j = json{{"delta", v.delta},   {"g_err", v.g_err},
             {"g_rel_err", v.g_rel_err}, {"g_move", v.g_move},
             {"f_err", v.f_err},   {"f_rel_err", v.f_rel_err},
             {"f_move", v.f_move}};
}

void to_json(json& j, const CurvatureOperator& v) {
    j["kind"] = curvature_kind_name(v.kind);
    j["target"] = v.target == PredictorTarget::Concept ? "concept" : "label";
    j["delta"] = v.delta;
    j["n_samples"] = v.n_samples;
    if (v.kind == CurvatureKind::EkFac) {
        json layers = json::array();
        for (const auto& l : v.layers) {
            layers.push_back({{"in", l.shape.in},
                              {"out", l.shape.out},
                              {"omega", matrix_to_json(l.omega)},
                              {"gamma", matrix_to_json(l.gamma)},
                              {"q_omega", matrix_to_json(l.q_omega)},
                              {"q_gamma", matrix_to_json(l.q_gamma)},
                              {"lambda_corr", matrix_to_json(l.lambda_corr)},
                              {"damping", l.damping}});
        }
        j["layers"] = layers;
    } else {
        j["dense"] = matrix_to_json(v.dense);
    }
}

void from_json(const json& j, CurvatureOperator& v) {
    v = CurvatureOperator{};
    v.kind = curvature_kind_from_name(j.at("kind").get<std::string>());
    v.target = j.at("target").get<std::string>() == "concept" ? PredictorTarget::Concept
                                                              : PredictorTarget::Label;
    v.delta = j.at("delta").get<double>();
    v.n_samples = j.at("n_samples").get<Eigen::Index>();
    if (v.kind == CurvatureKind::EkFac) {
        for (const auto& lj : j.at("layers")) {
            EkfacLayerFactors l;
            l.shape = {lj.at("in").get<int>(), lj.at("out").get<int>()};
            l.omega = matrix_from_json(lj.at("omega"));
            l.gamma = matrix_from_json(lj.at("gamma"));
            l.q_omega = matrix_from_json(lj.at("q_omega"));
            l.q_gamma = matrix_from_json(lj.at("q_gamma"));
            l.lambda_corr = matrix_from_json(lj.at("lambda_corr"));
            l.damping = lj.at("damping").get<double>();
            v.layers.push_back(std::move(l));
        }
    } else {
        v.dense = matrix_from_json(j.at("dense"));
        v.finalize();
    }
}

void save_model(const CbmModel& m, const std::filesystem::path& path) {
    save_json_file(json(m), path);
}

CbmModel load_model(const std::filesystem::path& path) {
    return load_json_file(path).get<CbmModel>();
}

json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open " + path.string());
    json j;
    in >> j;
    return j;
}

void save_json_file(const json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

// ---- benchmark configs/results ---------------------------------------------------

void to_json(json& j, const BenchmarkConfig& v) {
    j = json{{"gen", v.gen},
             {"train", v.train},
             {"edit", v.edit},
             {"arch", arch_name(v.arch)},
             {"hidden", v.hidden},
             {"train_frac", v.train_frac},
             {"noise_ratio", v.noise_ratio},
             {"rounds", v.rounds},
             {"per_round_ratio", v.per_round_ratio},
             {"data_ratios", v.data_ratios},
             {"max_concepts_removed", v.max_concepts_removed},
             {"seed", v.seed}};
}

void from_json(const json& j, BenchmarkConfig& v) {
    v = BenchmarkConfig{};
    if (j.contains("gen")) v.gen = j["gen"].get<GeneratorConfig>();
    if (j.contains("train")) v.train = j["train"].get<TrainConfig>();
    if (j.contains("edit")) v.edit = j["edit"].get<EditOptions>();
    if (j.contains("arch")) v.arch = arch_from_name(j["arch"].get<std::string>());
    if (j.contains("hidden")) v.hidden = j["hidden"].get<int>();
    if (j.contains("train_frac")) v.train_frac = j["train_frac"].get<double>();
    if (j.contains("noise_ratio")) v.noise_ratio = j["noise_ratio"].get<double>();
    if (j.contains("rounds")) v.rounds = j["rounds"].get<int>();
    if (j.contains("per_round_ratio")) v.per_round_ratio = j["per_round_ratio"].get<double>();
    if (j.contains("data_ratios")) v.data_ratios = j["data_ratios"].get<std::vector<double>>();
    if (j.contains("max_concepts_removed")) {
        v.max_concepts_removed = j["max_concepts_removed"].get<int>();
    }
    if (j.contains("seed")) v.seed = j["seed"].get<std::uint64_t>();
}

void to_json(json& j, const MetricsRow& v) {
    j = json{{"label", v.label},
             {"ratio", v.ratio},
             {"acc_before", v.acc_before},
             {"f1_before", v.f1_before},
             {"acc_edited", v.acc_edited},
             {"f1_edited", v.f1_edited},
             {"acc_retrained", v.acc_retrained},
             {"f1_retrained", v.f1_retrained},
             {"edit_ms", v.edit_ms},
             {"retrain_ms", v.retrain_ms}};
}

void to_json(json& j, const BenchmarkResult& v) {
    j = json{{"protocol", v.protocol}, {"config", v.config}, {"rows", v.rows}};
}

void to_json(json& j, const RmiaAuditConfig& v) {
    j = json{{"gen", v.gen},
             {"train", v.train},
             {"edit", v.edit},
             {"arch", arch_name(v.arch)},
             {"hidden", v.hidden},
             {"audit_size", v.audit_size},
             {"cal_size", v.cal_size},
             {"sigma_min", v.rmia.sigma_min},
             {"min_population", v.rmia.min_population},
             {"seed", v.seed}};
}

void from_json(const json& j, RmiaAuditConfig& v) {
    v = RmiaAuditConfig{};
    if (j.contains("gen")) v.gen = j["gen"].get<GeneratorConfig>();
    if (j.contains("train")) v.train = j["train"].get<TrainConfig>();
    if (j.contains("edit")) v.edit = j["edit"].get<EditOptions>();
    if (j.contains("arch")) v.arch = arch_from_name(j["arch"].get<std::string>());
    if (j.contains("hidden")) v.hidden = j["hidden"].get<int>();
    if (j.contains("audit_size")) v.audit_size = j["audit_size"].get<int>();
    if (j.contains("cal_size")) v.cal_size = j["cal_size"].get<int>();
    if (j.contains("sigma_min")) v.rmia.sigma_min = j["sigma_min"].get<double>();
    if (j.contains("min_population")) v.rmia.min_population = j["min_population"].get<int>();
    if (j.contains("seed")) v.seed = j["seed"].get<std::uint64_t>();
}

void to_json(json& j, const RmiaAuditResult& v) {
    j = json{{"mean_member_rmia_before", v.mean_member_rmia_before},
             {"mean_nonmember_rmia_before", v.mean_nonmember_rmia_before},
             {"mean_member_rmia_after", v.mean_member_rmia_after},
             {"mean_nonmember_rmia_after", v.mean_nonmember_rmia_after},
             {"gap_before", v.gap_before},
             {"gap_after", v.gap_after},
             {"mean_member_score_before", v.mean_member_score_before},
             {"mean_nonmember_score_before", v.mean_nonmember_score_before}};
}

}  // namespace ccbm
