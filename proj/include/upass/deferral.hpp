#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "upass/neighbors.hpp"
#include "upass/stats.hpp"

namespace upass {

/// Post-hoc uncertainty scores. Every metric is oriented so that a higher
/// score means a more uncertain sample.
enum class DeferralMetric {
    output_entropy,          ///< H(p) in nats
    max_prob,                ///< 1 - max_k p_k
    knn_distance,            ///< mean distance to the n nearest training samples
    class_distance_ratio,    ///< d_min / d_second over per-class mean n-NN distances
    wknn_confidence,         ///< 1 - inverse-distance weighted neighbour confidence
    wknn_data_uncertainty,   ///< inverse-distance weighted neighbour v_al
    wknn_model_uncertainty,  ///< inverse-distance weighted neighbour v_ep
};

inline constexpr DeferralMetric kAllDeferralMetrics[] = {
    DeferralMetric::output_entropy,        DeferralMetric::max_prob,
    DeferralMetric::knn_distance,          DeferralMetric::class_distance_ratio,
    DeferralMetric::wknn_confidence,       DeferralMetric::wknn_data_uncertainty,
    DeferralMetric::wknn_model_uncertainty};

std::string_view to_string(DeferralMetric metric);
DeferralMetric parse_deferral_metric(std::string_view name);
bool uses_neighbors(DeferralMetric metric);

struct Explanation {
    double mean_neighbor_distance = 0.0;
    std::optional<double> mean_neighbor_confidence;
};

struct DeferralScore {
    std::string sample_id;
    DeferralMetric metric = DeferralMetric::output_entropy;
    double score = 0.0;
    std::optional<Explanation> explanation;
};

inline constexpr double kDefaultWeightEpsilon = 1e-8;
inline constexpr std::size_t kDefaultNeighbors = 20;

struct ScoreInputs {
    std::span<const std::string> sample_ids;
    /// N x C output probabilities; needed by the output-based metrics.
    const Eigen::MatrixXd* probs = nullptr;
    /// N x h test embeddings; needed with `index` by the neighbour metrics.
    const Eigen::MatrixXd* embeddings = nullptr;
    const NeighborIndex* index = nullptr;
    std::size_t n = kDefaultNeighbors;
    double epsilon = kDefaultWeightEpsilon;
};

std::vector<DeferralScore> score(DeferralMetric metric, const ScoreInputs& inputs);

/// Header: sample_id,metric_id,score,mean_neighbor_distance,mean_neighbor_confidence
std::string scores_to_csv(std::span<const DeferralScore> scores);
std::vector<DeferralScore> parse_scores_csv(std::string_view text);

enum class RetentionView {
    most_certain,    ///< accuracy over the z lowest-score samples
    most_uncertain,  ///< accuracy over the z highest-score samples
};

struct RetentionPoint {
    double z = 0.0;
    double accuracy = 0.0;
    std::size_t retained = 0;
    /// Score of the last sample inside the retained set.
    double last_score = 0.0;
};

struct RetentionCurve {
    std::string metric_id;
    RetentionView view = RetentionView::most_certain;
    std::string tie_break = "sample_id_ascending";
    std::vector<RetentionPoint> points;
};

/// z = 0.01, 0.02, ..., 1.00
std::vector<double> default_retention_grid();

/// For each z, accuracy over the ceil(N z) samples ranked first (lowest
/// scores for most_certain, highest for most_uncertain; ties by sample_id).
/// `correct[i]` belongs to `scores[i]`. The grid is sorted and deduplicated.
RetentionCurve retention_curve(std::span<const DeferralScore> scores, const std::vector<bool>& correct,
                               std::span<const double> grid,
                               RetentionView view = RetentionView::most_certain);

std::string curve_to_csv(const RetentionCurve& curve);

struct Threshold {
    double z = 0.0;
    double score_threshold = 0.0;
    double accuracy = 0.0;
    std::size_t retained = 0;
};

/// Largest grid z whose accuracy reaches `target_accuracy`; nullopt when none does.
std::optional<Threshold> pick_threshold(const RetentionCurve& curve, double target_accuracy);

/// The ceil(N fraction) most uncertain samples, highest score first, ties by sample_id.
std::vector<DeferralScore> most_uncertain(std::span<const DeferralScore> scores, double fraction);

struct RecordingExplanation {
    std::string recording_id;
    std::size_t num_samples = 0;
    double accuracy = 0.0;
    double mean_neighbor_distance = 0.0;
    std::optional<double> mean_neighbor_confidence;
};

struct ExplanationReport {
    std::vector<RecordingExplanation> recordings;
    std::optional<Correlation> accuracy_vs_distance;
    std::optional<Correlation> accuracy_vs_confidence;
    std::string notice;
};

/// Per-recording aggregates of the explanation factors and their Spearman
/// correlation with per-recording accuracy. Recordings are sorted by id.
ExplanationReport explain(std::span<const DeferralScore> scores, const std::vector<bool>& correct,
                          std::span<const std::string> recording_ids,
                          PValueMethod method = PValueMethod::t_approximation);

std::string explanation_to_json(const ExplanationReport& report);

}  // namespace upass
