#include "upass/deferral.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "upass/dynamics.hpp"
#include "upass/error.hpp"
#include "upass/io.hpp"

namespace upass {

std::string_view to_string(DeferralMetric metric) {
    switch (metric) {
        case DeferralMetric::output_entropy: return "output_entropy";
        case DeferralMetric::max_prob: return "max_prob";
        case DeferralMetric::knn_distance: return "knn_distance";
        case DeferralMetric::class_distance_ratio: return "class_distance_ratio";
        case DeferralMetric::wknn_confidence: return "wknn_confidence";
        case DeferralMetric::wknn_data_uncertainty: return "wknn_data_uncertainty";
        case DeferralMetric::wknn_model_uncertainty: return "wknn_model_uncertainty";
    }
    return "";
}

DeferralMetric parse_deferral_metric(std::string_view name) {
    for (auto m : kAllDeferralMetrics) {
        if (to_string(m) == name) return m;
    }
    throw ValidationError("unknown deferral metric '" + std::string(name) + "'");
}

bool uses_neighbors(DeferralMetric metric) {
    return metric != DeferralMetric::output_entropy && metric != DeferralMetric::max_prob;
}

namespace {

const std::vector<double>& weighted_column(DeferralMetric metric, const NeighborAttachments& att) {
    const std::optional<std::vector<double>>* col = nullptr;
    const char* name = "";
    switch (metric) {
        case DeferralMetric::wknn_confidence: col = &att.confidence; name = "c"; break;
        case DeferralMetric::wknn_data_uncertainty: col = &att.v_al; name = "v_al"; break;
        case DeferralMetric::wknn_model_uncertainty: col = &att.v_ep; name = "v_ep"; break;
        default: throw ValidationError("not a weighted neighbour metric");
    }
    if (!*col) {
        throw ValidationError(std::string(to_string(metric)) + " needs the '" + name + "' attachment on the index");
    }
    return **col;
}

}  // namespace

std::vector<DeferralScore> score(DeferralMetric metric, const ScoreInputs& in) {
    const auto n_samples = in.sample_ids.size();
    std::vector<DeferralScore> out;
    out.reserve(n_samples);

    if (!uses_neighbors(metric)) {
        if (in.probs == nullptr) throw ValidationError(std::string(to_string(metric)) + " needs output probabilities");
        if (static_cast<std::size_t>(in.probs->rows()) != n_samples) {
            throw ValidationError("probability rows do not match sample ids");
        }
        std::vector<double> p(static_cast<std::size_t>(in.probs->cols()));
        for (std::size_t i = 0; i < n_samples; ++i) {
            for (std::size_t k = 0; k < p.size(); ++k) p[k] = (*in.probs)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
            const double s = metric == DeferralMetric::output_entropy
                                 ? entropy(p)
                                 : 1.0 - *std::max_element(p.begin(), p.end());
            out.push_back({in.sample_ids[i], metric, s, std::nullopt});
        }
        return out;
    }

    if (in.index == nullptr || in.embeddings == nullptr) {
        throw ValidationError(std::string(to_string(metric)) + " needs test embeddings and a neighbour index");
    }
    if (static_cast<std::size_t>(in.embeddings->rows()) != n_samples) {
        throw ValidationError("embedding rows do not match sample ids");
    }
    const auto& index = *in.index;
    const auto& att = index.attachments();
    const std::vector<double>* weighted = nullptr;
    if (metric == DeferralMetric::wknn_confidence || metric == DeferralMetric::wknn_data_uncertainty ||
        metric == DeferralMetric::wknn_model_uncertainty) {
        weighted = &weighted_column(metric, att);
    }
    if (metric == DeferralMetric::class_distance_ratio) {
        if (!att.label) throw ValidationError("class_distance_ratio needs the 'label' attachment on the index");
        if (index.class_rows().size() < 2) throw ValidationError("class_distance_ratio needs at least two classes");
        for (const auto& [cls, rows] : index.class_rows()) {
            if (rows.size() < in.n) {
                throw ValidationError("class " + std::to_string(cls) + " has only " + std::to_string(rows.size()) +
                                      " training samples, fewer than n = " + std::to_string(in.n));
            }
        }
    }

    std::vector<double> q(index.dims());
    std::vector<double> class_means;
    for (std::size_t i = 0; i < n_samples; ++i) {
        for (std::size_t k = 0; k < q.size(); ++k) q[k] = (*in.embeddings)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        const auto nn = index.query(q, in.n);
        Explanation ex;
        for (const auto& nb : nn) ex.mean_neighbor_distance += nb.distance;
        ex.mean_neighbor_distance /= static_cast<double>(nn.size());
        if (att.confidence) {
            double c = 0.0;
            for (const auto& nb : nn) c += (*att.confidence)[nb.row];
            ex.mean_neighbor_confidence = c / static_cast<double>(nn.size());
        }

        double s = 0.0;
        switch (metric) {
            case DeferralMetric::knn_distance:
                s = ex.mean_neighbor_distance;
                break;
            case DeferralMetric::class_distance_ratio: {
                class_means.clear();
                for (const auto& [cls, rows] : index.class_rows()) {
                    const auto per_class = index.query(q, in.n, cls);
                    double d = 0.0;
                    for (const auto& nb : per_class) d += nb.distance;
                    class_means.push_back(d / static_cast<double>(per_class.size()));
                }
                std::partial_sort(class_means.begin(), class_means.begin() + 2, class_means.end());
                s = class_means[1] > 0.0 ? class_means[0] / class_means[1] : 1.0;
                break;
            }
            default: {
                double wsum = 0.0;
                double vsum = 0.0;
                for (const auto& nb : nn) {
                    const double w = 1.0 / (nb.distance + in.epsilon);
                    wsum += w;
                    vsum += w * (*weighted)[nb.row];
                }
                const double avg = vsum / wsum;
                s = metric == DeferralMetric::wknn_confidence ? 1.0 - avg : avg;
                break;
            }
        }
        if (!std::isfinite(s)) throw NumericError("non-finite score for sample " + in.sample_ids[i]);
        out.push_back({in.sample_ids[i], metric, s, ex});
    }
    return out;
}

std::string scores_to_csv(std::span<const DeferralScore> scores) {
    std::string out = "sample_id,metric_id,score,mean_neighbor_distance,mean_neighbor_confidence\n";
    for (const auto& s : scores) {
        out += s.sample_id + ',' + std::string(to_string(s.metric)) + ',' + format_double(s.score) + ',';
        if (s.explanation) {
            out += format_double(s.explanation->mean_neighbor_distance);
            out += ',';
            if (s.explanation->mean_neighbor_confidence) out += format_double(*s.explanation->mean_neighbor_confidence);
        } else {
            out += ',';
        }
        out += '\n';
    }
    return out;
}

std::vector<DeferralScore> parse_scores_csv(std::string_view text) {
    std::vector<DeferralScore> out;
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
            if (f != std::vector<std::string>{"sample_id", "metric_id", "score", "mean_neighbor_distance",
                                              "mean_neighbor_confidence"}) {
                throw ParseError(line_no, "unexpected scores header");
            }
            header = true;
            continue;
        }
        if (f.size() != 5) throw ParseError(line_no, "expected 5 fields");
        try {
            DeferralScore s{f[0], parse_deferral_metric(f[1]), parse_double(f[2], "score"), std::nullopt};
            if (!f[3].empty()) {
                Explanation ex{parse_double(f[3], "mean_neighbor_distance"), std::nullopt};
                if (!f[4].empty()) ex.mean_neighbor_confidence = parse_double(f[4], "mean_neighbor_confidence");
                s.explanation = ex;
            }
            out.push_back(std::move(s));
        } catch (const ValidationError& e) {
            throw ParseError(line_no, e.what());
        }
    }
    return out;
}

std::vector<double> default_retention_grid() {
    std::vector<double> grid;
    for (int k = 1; k <= 100; ++k) grid.push_back(static_cast<double>(k) / 100.0);
    return grid;
}

namespace {

std::vector<std::size_t> ranking(std::span<const DeferralScore> scores, RetentionView view) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a].score != scores[b].score) {
            return view == RetentionView::most_certain ? scores[a].score < scores[b].score
                                                       : scores[a].score > scores[b].score;
        }
        return scores[a].sample_id < scores[b].sample_id;
    });
    return order;
}

std::size_t retained_count(std::size_t n, double z) {
    return std::clamp<std::size_t>(percent_count(n, z * 100.0), 1, n);
}

}  // namespace

RetentionCurve retention_curve(std::span<const DeferralScore> scores, const std::vector<bool>& correct,
                               std::span<const double> grid, RetentionView view) {
    if (scores.empty() || grid.empty()) throw ValidationError("retention curve needs scores and a grid");
    if (correct.size() != scores.size()) throw ValidationError("correctness must cover every scored sample");
    std::vector<double> zs(grid.begin(), grid.end());
    for (double z : zs) {
        if (!(z > 0.0 && z <= 1.0)) throw ValidationError("grid values must lie in (0, 1]");
    }
    std::sort(zs.begin(), zs.end());
    zs.erase(std::unique(zs.begin(), zs.end()), zs.end());

    const auto order = ranking(scores, view);
    std::vector<std::size_t> cumulative(order.size() + 1, 0);
    for (std::size_t r = 0; r < order.size(); ++r) cumulative[r + 1] = cumulative[r] + (correct[order[r]] ? 1 : 0);

    RetentionCurve curve;
    curve.metric_id = std::string(to_string(scores.front().metric));
    curve.view = view;
    for (double z : zs) {
        const auto k = retained_count(scores.size(), z);
        curve.points.push_back({z, static_cast<double>(cumulative[k]) / static_cast<double>(k), k,
                                scores[order[k - 1]].score});
    }
    return curve;
}

std::string curve_to_csv(const RetentionCurve& curve) {
    std::string out = "z,accuracy\n";
    for (const auto& p : curve.points) out += format_double(p.z) + ',' + format_double(p.accuracy) + '\n';
    return out;
}

std::optional<Threshold> pick_threshold(const RetentionCurve& curve, double target_accuracy) {
    for (auto it = curve.points.rbegin(); it != curve.points.rend(); ++it) {
        if (it->accuracy >= target_accuracy) return Threshold{it->z, it->last_score, it->accuracy, it->retained};
    }
    return std::nullopt;
}

std::vector<DeferralScore> most_uncertain(std::span<const DeferralScore> scores, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("deferral fraction must be in (0, 1]");
    if (scores.empty()) return {};
    const auto order = ranking(scores, RetentionView::most_uncertain);
    const auto k = retained_count(scores.size(), fraction);
    std::vector<DeferralScore> out;
    out.reserve(k);
    for (std::size_t r = 0; r < k; ++r) out.push_back(scores[order[r]]);
    return out;
}

ExplanationReport explain(std::span<const DeferralScore> scores, const std::vector<bool>& correct,
                          std::span<const std::string> recording_ids, PValueMethod method) {
    if (scores.empty()) throw ValidationError("explain needs scores");
    if (correct.size() != scores.size() || recording_ids.size() != scores.size()) {
        throw ValidationError("correctness and recording ids must cover every scored sample");
    }
    struct Acc {
        std::size_t n = 0, correct = 0, with_conf = 0;
        double distance = 0.0, confidence = 0.0;
    };
    std::map<std::string, Acc> groups;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!scores[i].explanation) {
            throw ValidationError("sample " + scores[i].sample_id + " has no explanation; use a neighbour-based metric");
        }
        auto& g = groups[recording_ids[i]];
        ++g.n;
        g.correct += correct[i] ? 1 : 0;
        g.distance += scores[i].explanation->mean_neighbor_distance;
        if (scores[i].explanation->mean_neighbor_confidence) {
            ++g.with_conf;
            g.confidence += *scores[i].explanation->mean_neighbor_confidence;
        }
    }
    ExplanationReport report;
    bool all_conf = true;
    for (const auto& [rec, g] : groups) {
        RecordingExplanation r{rec, g.n, static_cast<double>(g.correct) / static_cast<double>(g.n),
                               g.distance / static_cast<double>(g.n), std::nullopt};
        if (g.with_conf == g.n) {
            r.mean_neighbor_confidence = g.confidence / static_cast<double>(g.n);
        } else {
            all_conf = false;
        }
        report.recordings.push_back(std::move(r));
    }
    if (report.recordings.size() < 3) {
        report.notice = "fewer than 3 recordings: correlations omitted";
        return report;
    }
    std::vector<double> acc, dist, conf;
    for (const auto& r : report.recordings) {
        acc.push_back(r.accuracy);
        dist.push_back(r.mean_neighbor_distance);
        if (all_conf) conf.push_back(*r.mean_neighbor_confidence);
    }
    report.accuracy_vs_distance = spearman(acc, dist, method);
    if (all_conf) report.accuracy_vs_confidence = spearman(acc, conf, method);
    return report;
}

std::string explanation_to_json(const ExplanationReport& report) {
    nlohmann::ordered_json j;
    auto recs = nlohmann::ordered_json::array();
    for (const auto& r : report.recordings) {
        nlohmann::ordered_json e;
        e["recording_id"] = r.recording_id;
        e["num_samples"] = r.num_samples;
        e["accuracy"] = r.accuracy;
        e["mean_neighbor_distance"] = r.mean_neighbor_distance;
        e["mean_neighbor_confidence"] =
            r.mean_neighbor_confidence ? nlohmann::ordered_json(*r.mean_neighbor_confidence) : nlohmann::ordered_json();
        recs.push_back(std::move(e));
    }
    j["recordings"] = std::move(recs);
    auto corr = [](const std::optional<Correlation>& c) {
        if (!c) return nlohmann::ordered_json();
        nlohmann::ordered_json e;
        e["spearman_r"] = c->r;
        e["p_value"] = c->p_value;
        e["n"] = c->n;
        return e;
    };
    j["accuracy_vs_distance"] = corr(report.accuracy_vs_distance);
    j["accuracy_vs_confidence"] = corr(report.accuracy_vs_confidence);
    j["notice"] = report.notice;
    return j.dump(2) + "\n";
}

}  // namespace upass
