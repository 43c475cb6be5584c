#include "upass/curation.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

#include "upass/error.hpp"
#include "upass/io.hpp"

namespace upass {

ConfigReport summarize_config(std::string config_id, std::span<const SampleUncertainty> metrics) {
    if (metrics.empty()) throw ValidationError("configuration " + config_id + " has no samples");
    double c = 0.0;
    double v = 0.0;
    for (const auto& m : metrics) {
        c += m.confidence;
        v += m.v_al;
    }
    const auto n = static_cast<double>(metrics.size());
    return {std::move(config_id), c / n, v / n, metrics.size(), std::nullopt};
}

std::vector<ConfigReport> compare_configs(std::span<const std::pair<std::string, DynamicsLog>> configs) {
    if (configs.empty()) throw ValidationError("need at least one configuration");
    std::vector<ConfigReport> out;
    for (const auto& [id, log] : configs) {
        if (!log.fully_labeled()) throw ValidationError("configuration " + id + " has an unlabeled log");
        out.push_back(summarize_config(id, sample_metrics(log)));
    }
    std::sort(out.begin(), out.end(), [](const ConfigReport& a, const ConfigReport& b) {
        if (a.mean_v_al != b.mean_v_al) return a.mean_v_al < b.mean_v_al;
        return a.config_id < b.config_id;
    });
    return out;
}

std::string config_reports_to_csv(std::span<const ConfigReport> reports) {
    std::string out = "config_id,mean_confidence,mean_v_al,num_samples,test_accuracy\n";
    for (const auto& r : reports) {
        out += r.config_id + ',' + format_double(r.mean_confidence) + ',' + format_double(r.mean_v_al) + ',' +
               std::to_string(r.num_samples) + ',' + (r.test_accuracy ? format_double(*r.test_accuracy) : "") + '\n';
    }
    return out;
}

std::string_view to_string(RankingMetric m) {
    return m == RankingMetric::v_al ? "v_al" : "v_al_entropy";
}

RankingMetric parse_ranking_metric(std::string_view name) {
    if (name == "v_al") return RankingMetric::v_al;
    if (name == "v_al_entropy") return RankingMetric::v_al_entropy;
    throw ValidationError("unknown ranking metric '" + std::string(name) + "'");
}

SelectionManifest select_data(std::span<const SampleUncertainty> metrics, double drop_pct, RankingMetric metric,
                              std::string source_digest) {
    if (metrics.empty()) throw ValidationError("empty metrics list");
    if (!(drop_pct >= 0.0 && drop_pct < 100.0)) throw ValidationError("drop_pct must be in [0, 100)");
    auto key = [&](std::size_t i) {
        return metric == RankingMetric::v_al ? metrics[i].v_al : metrics[i].v_al_entropy;
    };
    std::vector<std::size_t> idx(metrics.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (key(a) != key(b)) return key(a) > key(b);
        return metrics[a].sample_id < metrics[b].sample_id;
    });
    const auto n_drop = percent_count(metrics.size(), drop_pct);

    SelectionManifest m;
    m.drop_pct = drop_pct;
    m.ranking_metric = metric;
    m.source_digest = std::move(source_digest);
    std::vector<bool> drop(metrics.size(), false);
    for (std::size_t r = 0; r < n_drop; ++r) {
        drop[idx[r]] = true;
        m.dropped.push_back(metrics[idx[r]].sample_id);
    }
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        if (!drop[i]) m.kept.push_back(metrics[i].sample_id);
    }
    return m;
}

std::string log_digest(const DynamicsLog& log) {
    return sha256_hex(log_to_jsonl(log));
}

std::string manifest_to_json(const SelectionManifest& manifest) {
    nlohmann::ordered_json j;
    j["drop_pct"] = manifest.drop_pct;
    j["ranking_metric"] = std::string(to_string(manifest.ranking_metric));
    j["source_digest"] = manifest.source_digest;
    j["kept"] = manifest.kept;
    j["dropped"] = manifest.dropped;
    return j.dump(2) + "\n";
}

SelectionManifest parse_manifest_json(std::string_view text) {
    SelectionManifest m;
    try {
        const auto j = nlohmann::json::parse(text);
        m.drop_pct = j.at("drop_pct").get<double>();
        m.ranking_metric = parse_ranking_metric(j.at("ranking_metric").get<std::string>());
        m.source_digest = j.at("source_digest").get<std::string>();
        m.kept = j.at("kept").get<std::vector<std::string>>();
        m.dropped = j.at("dropped").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed manifest: ") + e.what());
    }
    std::unordered_set<std::string> seen(m.kept.begin(), m.kept.end());
    for (const auto& id : m.dropped) {
        if (!seen.insert(id).second) throw ValidationError("sample " + id + " both kept and dropped");
    }
    return m;
}

}  // namespace upass
