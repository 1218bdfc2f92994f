#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "ccbm/curvature.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/editor.hpp"
#include "ccbm/model.hpp"
#include "ccbm/oracle.hpp"

namespace ccbm {

// ADL (de)serializers; weight matrices are written row-major.

void to_json(nlohmann::json& j, const GeneratorConfig& v);
void from_json(const nlohmann::json& j, GeneratorConfig& v);

void to_json(nlohmann::json& j, const NoiseSpec& v);
void from_json(const nlohmann::json& j, NoiseSpec& v);

void to_json(nlohmann::json& j, const TrainConfig& v);
void from_json(const nlohmann::json& j, TrainConfig& v);

void to_json(nlohmann::json& j, const TrainInfo& v);
void from_json(const nlohmann::json& j, TrainInfo& v);

void to_json(nlohmann::json& j, const ConceptPredictor& v);
void from_json(const nlohmann::json& j, ConceptPredictor& v);

void to_json(nlohmann::json& j, const LabelPredictor& v);
void from_json(const nlohmann::json& j, LabelPredictor& v);

void to_json(nlohmann::json& j, const CbmModel& v);
void from_json(const nlohmann::json& j, CbmModel& v);

void to_json(nlohmann::json& j, const EditOptions& v);
void from_json(const nlohmann::json& j, EditOptions& v);

void to_json(nlohmann::json& j, const EditRequest& v);
void from_json(const nlohmann::json& j, EditRequest& v);

/// Outcome summary: curvature kind, damping, stage timings and step norms
/// (the edited model itself is saved as a checkpoint).
void to_json(nlohmann::json& j, const EditOutcome& v);

void to_json(nlohmann::json& j, const ComparisonReport& v);
void from_json(const nlohmann::json& j, ComparisonReport& v);

void to_json(nlohmann::json& j, const LooRow& v);

void to_json(nlohmann::json& j, const CurvatureOperator& v);
void from_json(const nlohmann::json& j, CurvatureOperator& v);

std::string curvature_kind_name(CurvatureKind k);
CurvatureKind curvature_kind_from_name(const std::string& name);

// Checkpoint files.
void save_model(const CbmModel& m, const std::filesystem::path& path);
CbmModel load_model(const std::filesystem::path& path);

nlohmann::json load_json_file(const std::filesystem::path& path);
void save_json_file(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace ccbm

namespace ccbm {
struct BenchmarkConfig;
struct MetricsRow;
struct BenchmarkResult;
struct RmiaAuditConfig;
struct RmiaAuditResult;

void to_json(nlohmann::json& j, const BenchmarkConfig& v);
void from_json(const nlohmann::json& j, BenchmarkConfig& v);
void to_json(nlohmann::json& j, const MetricsRow& v);
void to_json(nlohmann::json& j, const BenchmarkResult& v);
void to_json(nlohmann::json& j, const RmiaAuditConfig& v);
void from_json(const nlohmann::json& j, RmiaAuditConfig& v);
void to_json(nlohmann::json& j, const RmiaAuditResult& v);
}  // namespace ccbm
