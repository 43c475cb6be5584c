#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "upass/active.hpp"
#include "upass/curation.hpp"
#include "upass/deferral.hpp"
#include "upass/dynamics.hpp"
#include "upass/refmodel.hpp"

namespace upass {

enum class Stage { collect, select, active, defer };

inline constexpr Stage kAllStages[] = {Stage::collect, Stage::select, Stage::active, Stage::defer};

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);
/// Comma-separated stage list ("all" for every stage), returned in pipeline order.
std::vector<Stage> parse_stage_list(std::string_view list);

/// Synthetic train/test pair. The test side is label-clean and split into
/// longer recordings, each with its own feature offset.
struct SyntheticInputs {
    SyntheticSpec train;
    std::size_t test_samples = 2000;
    std::size_t test_recording_length = 500;
    double test_recording_shift = 1.5;
};

SyntheticSpec test_spec(const SyntheticInputs& inputs);

nlohmann::ordered_json synthetic_spec_to_json(const SyntheticSpec& spec);
/// Missing keys keep their defaults; unknown keys are rejected.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec base = {});

struct PipelineConfig {
    std::filesystem::path output_dir = "upass_out";
    std::uint64_t seed = 0;

    std::optional<SyntheticInputs> synthetic;
    std::optional<std::filesystem::path> train_features;
    std::optional<std::filesystem::path> test_features;
    /// Externally produced training dynamics; used instead of training when no features are given.
    std::optional<std::filesystem::path> dynamics_log;
    /// Trained checkpoint; takes precedence over models written by earlier stages.
    std::optional<std::filesystem::path> model;

    TrainConfig train;

    double top_pct = 1.0;
    double easy_hard_pct = 1.0;
    AmbiguityKind ambiguity = AmbiguityKind::aleatoric;

    double drop_pct = 1.0;
    RankingMetric ranking_metric = RankingMetric::v_al;
    std::vector<double> drop_sweep;

    double select_pct = 40.0;
    double batch_pct = 1.0;
    std::size_t al_epochs = 10;
    /// Epochs of label-free self-training used to rank recordings.
    std::size_t adapt_epochs = 5;
    FineTuneConfig finetune;

    DeferralMetric deferral_metric = DeferralMetric::wknn_confidence;
    std::size_t neighbors = kDefaultNeighbors;
    DistanceMetric distance = DistanceMetric::euclidean;
    double target_accuracy = 0.85;
    double grid_step = 0.01;
};

/// The bundled five-class benchmark.
SyntheticInputs benchmark_inputs(std::uint64_t seed);
PipelineConfig benchmark_config(std::uint64_t seed);

/// Relative input paths resolve against `base_dir`.
PipelineConfig parse_pipeline_config(std::string_view json, const std::filesystem::path& base_dir = {});
std::string pipeline_config_to_json(const PipelineConfig& config);
/// UPASS_OUT, when set and non-empty, replaces the output directory.
void apply_environment(PipelineConfig& config);

struct StageReport {
    Stage stage = Stage::collect;
    /// Headline accuracy on the labeled test set; absent when there is none.
    std::optional<double> accuracy;
    /// "ok", or "unreachable" when the deferral target cannot be met.
    std::string status = "ok";
    nlohmann::ordered_json parameters = nlohmann::ordered_json::object();
    /// Paths relative to the output directory.
    std::vector<std::string> artifacts;
    nlohmann::ordered_json details = nlohmann::ordered_json::object();
};

nlohmann::ordered_json stage_report_json(const StageReport& report);
std::string summary_to_json(std::span<const StageReport> reports);

/// Runs the requested stages in pipeline order, writing artifacts under
/// config.output_dir plus summary.json. Missing inputs throw NotFoundError,
/// invalid configuration ValidationError.
std::vector<StageReport> run_pipeline(const PipelineConfig& config, std::span<const Stage> stages);

/// 0 for success, 2 for missing inputs or invalid configuration, 1 otherwise.
int exit_code_for(const std::exception& error);

}  // namespace upass
