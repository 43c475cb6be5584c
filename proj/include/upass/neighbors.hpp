#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "upass/dynamics.hpp"
#include "upass/refmodel.hpp"

namespace upass {

/// Optional per-sample values carried alongside stored vectors. Each present
/// column must cover every sample of the index.
struct NeighborAttachments {
    std::optional<std::vector<double>> confidence;
    std::optional<std::vector<double>> v_al;
    std::optional<std::vector<double>> v_ep;
    std::optional<std::vector<int>> label;
};

/// Aligns training metrics and labels (by sample_id) to the order of `ids`.
NeighborAttachments attachments_from_metrics(std::span<const std::string> ids,
                                             std::span<const SampleUncertainty> metrics,
                                             std::span<const std::string> label_ids = {},
                                             std::span<const int> labels = {});

/// Attachment CSV: sample_id,label,c,v_al,v_ep (empty field = absent). All
/// rows must agree on which columns are present.
std::string attachments_to_csv(std::span<const std::string> ids, const NeighborAttachments& att);
NeighborAttachments parse_attachments_csv(std::string_view text, std::span<const std::string> ids);

enum class DistanceMetric { euclidean, cosine };

DistanceMetric parse_distance_metric(std::string_view name);

struct Neighbor {
    std::size_t row = 0;
    std::string sample_id;
    double distance = 0.0;
};

/// Exact k-nearest-neighbour index over a fixed set of vectors.
///
/// Queries scan every candidate with a bounded max-heap and abandon a
/// candidate's distance accumulation once it provably exceeds the current
/// n-th best; results are identical to a full sort by (distance, sample_id).
/// Immutable after build, so concurrent queries are safe.
class NeighborIndex {
public:
    static NeighborIndex build(const EmbeddingSet& embeddings, NeighborAttachments attachments = {},
                               DistanceMetric metric = DistanceMetric::euclidean);

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t dims() const noexcept { return dims_; }
    DistanceMetric metric() const noexcept { return metric_; }
    const std::string& sample_id(std::size_t row) const { return ids_.at(row); }
    const NeighborAttachments& attachments() const noexcept { return attachments_; }

    /// Classes present in the label attachment, ascending, with their sizes.
    const std::map<int, std::vector<std::size_t>>& class_rows() const noexcept { return class_rows_; }

    std::vector<Neighbor> query(std::span<const double> query, std::size_t n,
                                std::optional<int> class_filter = std::nullopt) const;

private:
    std::size_t dims_ = 0;
    DistanceMetric metric_ = DistanceMetric::euclidean;
    std::vector<std::string> ids_;
    std::vector<double> data_;   // row-major
    std::vector<double> norms_;  // cosine only
    NeighborAttachments attachments_;
    std::map<int, std::vector<std::size_t>> class_rows_;
};

}  // namespace upass
