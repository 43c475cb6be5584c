#include "upass/neighbors.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <unordered_map>
#include <unordered_set>

#include "upass/error.hpp"
#include "upass/io.hpp"

namespace upass {

NeighborAttachments attachments_from_metrics(std::span<const std::string> ids,
                                             std::span<const SampleUncertainty> metrics,
                                             std::span<const std::string> label_ids, std::span<const int> labels) {
    NeighborAttachments att;
    if (!metrics.empty()) {
        std::unordered_map<std::string_view, const SampleUncertainty*> by_id;
        for (const auto& m : metrics) by_id.emplace(m.sample_id, &m);
        att.confidence.emplace();
        att.v_al.emplace();
        att.v_ep.emplace();
        for (const auto& id : ids) {
            const auto it = by_id.find(id);
            if (it == by_id.end()) throw ValidationError("no metrics attachment for sample " + id);
            att.confidence->push_back(it->second->confidence);
            att.v_al->push_back(it->second->v_al);
            att.v_ep->push_back(it->second->v_ep);
        }
    }
    if (!labels.empty()) {
        if (label_ids.size() != labels.size()) throw ValidationError("label ids and labels differ in length");
        std::unordered_map<std::string_view, int> by_id;
        for (std::size_t i = 0; i < labels.size(); ++i) by_id.emplace(label_ids[i], labels[i]);
        att.label.emplace();
        for (const auto& id : ids) {
            const auto it = by_id.find(id);
            if (it == by_id.end()) throw ValidationError("no label attachment for sample " + id);
            att.label->push_back(it->second);
        }
    }
    return att;
}

std::string attachments_to_csv(std::span<const std::string> ids, const NeighborAttachments& att) {
    std::string out = "sample_id,label,c,v_al,v_ep\n";
    auto cell = [](const std::optional<std::vector<double>>& col, std::size_t i) {
        return col ? format_double((*col)[i]) : std::string();
    };
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out += ids[i] + ',' + (att.label ? std::to_string((*att.label)[i]) : std::string()) + ',' +
               cell(att.confidence, i) + ',' + cell(att.v_al, i) + ',' + cell(att.v_ep, i) + '\n';
    }
    return out;
}

NeighborAttachments parse_attachments_csv(std::string_view text, std::span<const std::string> ids) {
    struct Row {
        std::string label, c, v_al, v_ep;
    };
    std::unordered_map<std::string, Row> rows;
    std::size_t line_no = 0;
    std::size_t start = 0;
    bool header = false;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        ++line_no;
        const auto line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const auto f = split_csv(line);
        if (!header) {
            if (f != std::vector<std::string>{"sample_id", "label", "c", "v_al", "v_ep"}) {
                throw ParseError(line_no, "expected header sample_id,label,c,v_al,v_ep");
            }
            header = true;
            continue;
        }
        if (f.size() != 5) throw ParseError(line_no, "expected 5 fields");
        if (!rows.emplace(f[0], Row{f[1], f[2], f[3], f[4]}).second) {
            throw ParseError(line_no, "duplicate sample_id " + f[0]);
        }
    }
    NeighborAttachments att;
    if (ids.empty()) return att;
    const auto first = rows.find(ids.front());
    if (first == rows.end()) throw ValidationError("attachment missing for sample " + ids.front());
    const bool has_label = !first->second.label.empty();
    const bool has_c = !first->second.c.empty();
    const bool has_al = !first->second.v_al.empty();
    const bool has_ep = !first->second.v_ep.empty();
    if (has_label) att.label.emplace();
    if (has_c) att.confidence.emplace();
    if (has_al) att.v_al.emplace();
    if (has_ep) att.v_ep.emplace();
    for (const auto& id : ids) {
        const auto it = rows.find(id);
        if (it == rows.end()) throw ValidationError("attachment missing for sample " + id);
        const auto& r = it->second;
        if (has_label != !r.label.empty() || has_c != !r.c.empty() || has_al != !r.v_al.empty() ||
            has_ep != !r.v_ep.empty()) {
            throw ValidationError("attachment columns inconsistent for sample " + id);
        }
        if (has_label) att.label->push_back(static_cast<int>(parse_int(r.label, "label")));
        if (has_c) att.confidence->push_back(parse_double(r.c, "c"));
        if (has_al) att.v_al->push_back(parse_double(r.v_al, "v_al"));
        if (has_ep) att.v_ep->push_back(parse_double(r.v_ep, "v_ep"));
    }
    return att;
}

DistanceMetric parse_distance_metric(std::string_view name) {
    if (name == "euclidean") return DistanceMetric::euclidean;
    if (name == "cosine") return DistanceMetric::cosine;
    throw ValidationError("unknown distance metric '" + std::string(name) + "'");
}

NeighborIndex NeighborIndex::build(const EmbeddingSet& embeddings, NeighborAttachments attachments,
                                   DistanceMetric metric) {
    const auto m = embeddings.size();
    if (m == 0) throw ValidationError("index needs at least one vector");
    if (static_cast<std::size_t>(embeddings.vectors.rows()) != m) {
        throw ValidationError("embedding rows do not match sample ids");
    }
    NeighborIndex idx;
    idx.dims_ = embeddings.dims();
    if (idx.dims_ == 0) throw ValidationError("embedding dimension must be positive");
    idx.metric_ = metric;
    std::unordered_set<std::string_view> seen;
    for (const auto& id : embeddings.sample_ids) {
        if (!seen.insert(id).second) throw ValidationError("duplicate sample_id " + id);
    }
    idx.ids_ = embeddings.sample_ids;
    idx.data_.resize(m * idx.dims_);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < idx.dims_; ++k) {
            const double v = embeddings.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
            if (!std::isfinite(v)) throw ValidationError("non-finite embedding for sample " + idx.ids_[i]);
            idx.data_[i * idx.dims_ + k] = v;
        }
    }
    if (metric == DistanceMetric::cosine) {
        idx.norms_.resize(m);
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < idx.dims_; ++k) s += idx.data_[i * idx.dims_ + k] * idx.data_[i * idx.dims_ + k];
            idx.norms_[i] = std::sqrt(s);
        }
    }
    auto check = [&](const auto& col, const char* name) {
        if (col && col->size() != m) {
            throw ValidationError(std::string("attachment '") + name + "' covers " + std::to_string(col->size()) +
                                  " of " + std::to_string(m) + " samples");
        }
    };
    check(attachments.confidence, "c");
    check(attachments.v_al, "v_al");
    check(attachments.v_ep, "v_ep");
    check(attachments.label, "label");
    idx.attachments_ = std::move(attachments);
    if (idx.attachments_.label) {
        for (std::size_t i = 0; i < m; ++i) idx.class_rows_[(*idx.attachments_.label)[i]].push_back(i);
    }
    return idx;
}

std::vector<Neighbor> NeighborIndex::query(std::span<const double> q, std::size_t n,
                                           std::optional<int> class_filter) const {
    if (q.size() != dims_) {
        throw ValidationError("query dimension " + std::to_string(q.size()) + " does not match index " +
                              std::to_string(dims_));
    }
    const std::vector<std::size_t>* candidates = nullptr;
    std::size_t available = size();
    if (class_filter) {
        if (!attachments_.label) throw ValidationError("class filter needs a label attachment");
        const auto it = class_rows_.find(*class_filter);
        available = it == class_rows_.end() ? 0 : it->second.size();
        candidates = it == class_rows_.end() ? nullptr : &it->second;
    }
    if (n < 1) throw ValidationError("n must be at least 1");
    if (n > available) {
        throw ValidationError("requested " + std::to_string(n) + " neighbours but only " + std::to_string(available) +
                              " points are available" +
                              (class_filter ? " in class " + std::to_string(*class_filter) : std::string()));
    }

    struct Entry {
        double distance;
        std::size_t row;
    };
    // Max-heap on (distance, sample_id): top is the current worst of the best n.
    auto worse = [this](const Entry& a, const Entry& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return ids_[a.row] < ids_[b.row];
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);

    double qnorm = 0.0;
    if (metric_ == DistanceMetric::cosine) {
        for (double v : q) qnorm += v * v;
        qnorm = std::sqrt(qnorm);
    }

    auto visit = [&](std::size_t row) {
        const double* x = data_.data() + row * dims_;
        double dist = 0.0;
        if (metric_ == DistanceMetric::euclidean) {
            const bool full = heap.size() == n;
            const double bound_sq = full ? heap.top().distance * heap.top().distance : 0.0;
            double acc = 0.0;
            for (std::size_t k = 0; k < dims_; ++k) {
                const double diff = q[k] - x[k];
                acc += diff * diff;
                // Partial sums only grow, so once sqrt(acc) exceeds the worst kept
                // distance the candidate cannot enter (ties need the full value).
                if (full && acc > bound_sq && std::sqrt(acc) > heap.top().distance) return;
            }
            dist = std::sqrt(acc);
        } else {
            double dot = 0.0;
            for (std::size_t k = 0; k < dims_; ++k) dot += q[k] * x[k];
            const double denom = qnorm * norms_[row];
            dist = denom > 0.0 ? 1.0 - dot / denom : 1.0;
        }
        const Entry e{dist, row};
        if (heap.size() < n) {
            heap.push(e);
        } else if (worse(e, heap.top())) {
            heap.pop();
            heap.push(e);
        }
    };

    if (candidates) {
        for (auto row : *candidates) visit(row);
    } else {
        for (std::size_t row = 0; row < size(); ++row) visit(row);
    }

    std::vector<Neighbor> out(heap.size());
    for (auto i = out.size(); i > 0; --i) {
        const auto e = heap.top();
        heap.pop();
        out[i - 1] = {e.row, ids_[e.row], e.distance};
    }
    return out;
}

}  // namespace upass
