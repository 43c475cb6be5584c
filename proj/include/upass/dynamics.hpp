#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace upass {

/// Per-sample class-probability trajectories recorded after every training epoch.
///
/// Probabilities are stored densely as [sample][epoch][class].
struct DynamicsLog {
    std::size_t num_epochs = 0;
    std::size_t num_classes = 0;
    std::vector<std::string> sample_ids;
    std::vector<std::string> recording_ids;
    std::vector<std::optional<int>> labels;
    std::vector<double> probs;

    std::size_t size() const noexcept { return sample_ids.size(); }

    std::span<const double> prob(std::size_t sample, std::size_t epoch) const {
        return {probs.data() + (sample * num_epochs + epoch) * num_classes, num_classes};
    }
    std::span<double> prob(std::size_t sample, std::size_t epoch) {
        return {probs.data() + (sample * num_epochs + epoch) * num_classes, num_classes};
    }

    bool fully_labeled() const;

    /// Throws ValidationError on any broken invariant (shapes, ranges, sums, unique ids).
    void validate() const;
};

enum class LogFormat { jsonl, csv };

LogFormat log_format_from_path(const std::filesystem::path& path);
LogFormat parse_log_format(std::string_view name);

DynamicsLog ingest_log(const std::filesystem::path& path, LogFormat format);
DynamicsLog parse_log_jsonl(std::string_view text);
DynamicsLog parse_log_csv(std::string_view text);

/// Records are emitted epoch-major within each sample, in log order.
std::string log_to_jsonl(const DynamicsLog& log);
std::string log_to_csv(const DynamicsLog& log);

/// Keeps the given samples (by position), preserving the order of `indices`.
DynamicsLog subset_log(const DynamicsLog& log, std::span<const std::size_t> indices);

/// Groups samples by recording_id; recordings in order of first appearance.
std::vector<std::pair<std::string, DynamicsLog>> split_by_recording(const DynamicsLog& log);

/// Shannon entropy in nats with 0 log 0 = 0.
double entropy(std::span<const double> p);

enum class Stratum { easy, hard, model_ambiguous, data_ambiguous, other };

std::string_view to_string(Stratum s);
Stratum parse_stratum(std::string_view name);

struct SampleUncertainty {
    std::string sample_id;
    double confidence = 0.0;
    double v_al = 0.0;
    double v_ep = 0.0;
    double v_al_entropy = 0.0;
    double v_ep_entropy = 0.0;
    Stratum stratum = Stratum::other;
};

struct EntropyUncertainty {
    std::string sample_id;
    double v_al_entropy = 0.0;
    double v_ep_entropy = 0.0;
};

/// Confidence and variance decomposition of the true-class probability
/// over epochs (population variance, divisor = number of epochs), plus the
/// entropy decomposition of the full output vectors. Requires every label.
std::vector<SampleUncertainty> sample_metrics(const DynamicsLog& log);

/// Label-free decomposition: aleatoric = mean per-epoch entropy,
/// epistemic = entropy of the epoch-mean distribution minus that mean.
std::vector<EntropyUncertainty> sample_metrics_entropy(const DynamicsLog& log);

enum class AmbiguityKind { aleatoric, epistemic };

AmbiguityKind parse_ambiguity_kind(std::string_view name);
std::string_view to_string(AmbiguityKind kind);

/// Tags the top_pct most ambiguous samples, then among the rest the
/// easy_hard_pct highest (c - v) as easy and highest (-c - v) as hard.
/// Ties break by ascending sample_id. Returns one stratum per input sample.
std::vector<Stratum> stratify(std::span<const SampleUncertainty> metrics, AmbiguityKind kind,
                              double top_pct, double easy_hard_pct);

/// Same as stratify() but writes the result into each metric's stratum field.
void apply_strata(std::vector<SampleUncertainty>& metrics, AmbiguityKind kind, double top_pct,
                  double easy_hard_pct);

/// Header: sample_id,c,v_al,v_ep,v_al_entropy,v_ep_entropy,stratum
std::string metrics_to_csv(std::span<const SampleUncertainty> metrics);
std::vector<SampleUncertainty> parse_metrics_csv(std::string_view text);

}  // namespace upass
