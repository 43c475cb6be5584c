#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "upass/dynamics.hpp"

namespace upass {

struct ConfigReport {
    std::string config_id;
    double mean_confidence = 0.0;
    double mean_v_al = 0.0;
    std::size_t num_samples = 0;
    std::optional<double> test_accuracy;
};

/// One report per labeled log, sorted ascending by mean_v_al, ties by config_id.
std::vector<ConfigReport> compare_configs(std::span<const std::pair<std::string, DynamicsLog>> configs);

/// Averages over precomputed metrics; used when the caller already has them.
ConfigReport summarize_config(std::string config_id, std::span<const SampleUncertainty> metrics);

std::string config_reports_to_csv(std::span<const ConfigReport> reports);

enum class RankingMetric { v_al, v_al_entropy };

std::string_view to_string(RankingMetric m);
RankingMetric parse_ranking_metric(std::string_view name);

struct SelectionManifest {
    double drop_pct = 0.0;
    RankingMetric ranking_metric = RankingMetric::v_al;
    std::string source_digest;
    std::vector<std::string> kept;
    std::vector<std::string> dropped;
};

/// Drops the ceil(N * drop_pct / 100) samples with highest data uncertainty
/// (ties by ascending sample_id). `kept` preserves input order; `dropped` is
/// in ranking order.
SelectionManifest select_data(std::span<const SampleUncertainty> metrics, double drop_pct,
                              RankingMetric metric = RankingMetric::v_al, std::string source_digest = {});

/// Digest used to tie a manifest to the log it was computed from.
std::string log_digest(const DynamicsLog& log);

std::string manifest_to_json(const SelectionManifest& manifest);
SelectionManifest parse_manifest_json(std::string_view text);

}  // namespace upass
