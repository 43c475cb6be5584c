#include "upass/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "upass/error.hpp"
#include "upass/io.hpp"

namespace upass {

namespace {

constexpr double kSumTolerance = 1e-6;

struct Record {
    std::size_t line = 0;
    std::string sample_id;
    std::string recording_id;
    long long epoch = 0;
    std::vector<double> probs;
    std::optional<int> label;
};

void check_probs(const Record& r) {
    double sum = 0.0;
    for (double p : r.probs) {
        if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
            throw ParseError(r.line, "probability out of [0,1] for sample " + r.sample_id);
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) {
        throw ParseError(r.line, "probability sum " + format_double(sum) + " differs from 1 for sample " +
                                     r.sample_id);
    }
}

// Collects records of arbitrary order into a dense log.
class LogAssembler {
public:
    void add(Record r) {
        if (r.probs.size() < 2) throw ParseError(r.line, "need at least 2 class probabilities");
        if (num_classes_ == 0) {
            num_classes_ = r.probs.size();
        } else if (r.probs.size() != num_classes_) {
            throw ParseError(r.line, "inconsistent number of classes: expected " + std::to_string(num_classes_) +
                                         ", got " + std::to_string(r.probs.size()));
        }
        if (r.epoch < 0) throw ParseError(r.line, "negative epoch");
        if (r.label && (*r.label < 0 || static_cast<std::size_t>(*r.label) >= num_classes_)) {
            throw ParseError(r.line, "label out of range for sample " + r.sample_id);
        }
        check_probs(r);

        auto [it, inserted] = index_.try_emplace(r.sample_id, samples_.size());
        if (inserted) {
            samples_.push_back({r.sample_id, r.recording_id, r.label, {}});
        }
        auto& s = samples_[it->second];
        if (s.recording_id != r.recording_id) {
            throw ParseError(r.line, "recording_id changes for sample " + r.sample_id);
        }
        if (s.label != r.label) throw ParseError(r.line, "label changes for sample " + r.sample_id);
        const auto epoch = static_cast<std::size_t>(r.epoch);
        if (s.epochs.size() <= epoch) s.epochs.resize(epoch + 1);
        if (!s.epochs[epoch].empty()) {
            throw ParseError(r.line, "duplicate epoch " + std::to_string(epoch) + " for sample " + r.sample_id);
        }
        s.epochs[epoch] = std::move(r.probs);
    }

    DynamicsLog finish() {
        if (samples_.empty()) throw ValidationError("empty dynamics log");
        std::size_t num_epochs = 0;
        for (const auto& s : samples_) num_epochs = std::max(num_epochs, s.epochs.size());
        DynamicsLog log;
        log.num_epochs = num_epochs;
        log.num_classes = num_classes_;
        log.probs.reserve(samples_.size() * num_epochs * num_classes_);
        for (auto& s : samples_) {
            for (std::size_t e = 0; e < num_epochs; ++e) {
                if (e >= s.epochs.size() || s.epochs[e].empty()) {
                    throw ValidationError("missing epoch " + std::to_string(e) + " for sample " + s.id);
                }
                log.probs.insert(log.probs.end(), s.epochs[e].begin(), s.epochs[e].end());
            }
            log.sample_ids.push_back(std::move(s.id));
            log.recording_ids.push_back(std::move(s.recording_id));
            log.labels.push_back(s.label);
        }
        return log;
    }

private:
    struct Sample {
        std::string id;
        std::string recording_id;
        std::optional<int> label;
        std::vector<std::vector<double>> epochs;
    };
    std::size_t num_classes_ = 0;
    std::vector<Sample> samples_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename F>
void for_each_line(std::string_view text, F&& f) {
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        ++line_no;
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        f(line_no, line);
        start = end + 1;
    }
}

bool blank(std::string_view line) {
    return line.find_first_not_of(" \t") == std::string_view::npos;
}

}  // namespace

bool DynamicsLog::fully_labeled() const {
    return std::all_of(labels.begin(), labels.end(), [](const auto& l) { return l.has_value(); });
}

void DynamicsLog::validate() const {
    if (num_classes < 2) throw ValidationError("num_classes must be at least 2");
    if (num_epochs < 1) throw ValidationError("num_epochs must be positive");
    const auto n = sample_ids.size();
    if (recording_ids.size() != n || labels.size() != n) {
        throw ValidationError("sample_ids, recording_ids and labels differ in length");
    }
    if (probs.size() != n * num_epochs * num_classes) throw ValidationError("probability tensor has wrong size");
    std::unordered_set<std::string_view> seen;
    for (std::size_t i = 0; i < n; ++i) {
        if (!seen.insert(sample_ids[i]).second) throw ValidationError("duplicate sample_id " + sample_ids[i]);
        if (labels[i] && (*labels[i] < 0 || static_cast<std::size_t>(*labels[i]) >= num_classes)) {
            throw ValidationError("label out of range for sample " + sample_ids[i]);
        }
        for (std::size_t e = 0; e < num_epochs; ++e) {
            double sum = 0.0;
            for (double p : prob(i, e)) {
                if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
                    throw ValidationError("probability out of [0,1] for sample " + sample_ids[i]);
                }
                sum += p;
            }
            if (std::abs(sum - 1.0) > kSumTolerance) {
                throw ValidationError("probability sum " + format_double(sum) + " differs from 1 for sample " +
                                      sample_ids[i] + " epoch " + std::to_string(e));
            }
        }
    }
}

LogFormat log_format_from_path(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? LogFormat::csv : LogFormat::jsonl;
}

LogFormat parse_log_format(std::string_view name) {
    if (name == "jsonl") return LogFormat::jsonl;
    if (name == "csv") return LogFormat::csv;
    throw ValidationError("unknown log format '" + std::string(name) + "'");
}

DynamicsLog ingest_log(const std::filesystem::path& path, LogFormat format) {
    const auto text = read_file(path);
    return format == LogFormat::jsonl ? parse_log_jsonl(text) : parse_log_csv(text);
}

DynamicsLog parse_log_jsonl(std::string_view text) {
    LogAssembler assembler;
    for_each_line(text, [&](std::size_t line_no, std::string_view line) {
        if (blank(line)) return;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(line_no, std::string("malformed record: ") + e.what());
        }
        Record r;
        r.line = line_no;
        try {
            r.sample_id = j.at("sample_id").get<std::string>();
            r.recording_id = j.at("recording_id").get<std::string>();
            r.epoch = j.at("epoch").get<long long>();
            r.probs = j.at("probs").get<std::vector<double>>();
            const auto& label = j.at("label");
            if (!label.is_null()) r.label = label.get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line_no, std::string("malformed record: ") + e.what());
        }
        assembler.add(std::move(r));
    });
    return assembler.finish();
}

DynamicsLog parse_log_csv(std::string_view text) {
    LogAssembler assembler;
    std::size_t num_classes = 0;
    bool header_seen = false;
    for_each_line(text, [&](std::size_t line_no, std::string_view line) {
        if (blank(line)) return;
        auto fields = split_csv(line);
        if (!header_seen) {
            if (fields.size() < 6 || fields[0] != "sample_id" || fields[1] != "recording_id" ||
                fields[2] != "epoch" || fields[3] != "label") {
                throw ParseError(line_no, "expected header sample_id,recording_id,epoch,label,p0,...");
            }
            for (std::size_t k = 4; k < fields.size(); ++k) {
                if (fields[k] != "p" + std::to_string(k - 4)) {
                    throw ParseError(line_no, "unexpected probability column '" + fields[k] + "'");
                }
            }
            num_classes = fields.size() - 4;
            header_seen = true;
            return;
        }
        if (fields.size() != num_classes + 4) {
            throw ParseError(line_no, "malformed record: expected " + std::to_string(num_classes + 4) +
                                          " fields, got " + std::to_string(fields.size()));
        }
        Record r;
        r.line = line_no;
        try {
            r.sample_id = fields[0];
            r.recording_id = fields[1];
            r.epoch = parse_int(fields[2], "epoch");
            if (!fields[3].empty()) r.label = static_cast<int>(parse_int(fields[3], "label"));
            for (std::size_t k = 0; k < num_classes; ++k) r.probs.push_back(parse_double(fields[4 + k], "probability"));
        } catch (const ParseError&) {
            throw;
        } catch (const ValidationError& e) {
            throw ParseError(line_no, std::string("malformed record: ") + e.what());
        }
        assembler.add(std::move(r));
    });
    if (!header_seen) throw ValidationError("empty dynamics log");
    return assembler.finish();
}

std::string log_to_jsonl(const DynamicsLog& log) {
    std::string out;
    for (std::size_t i = 0; i < log.size(); ++i) {
        for (std::size_t e = 0; e < log.num_epochs; ++e) {
            out += "{\"sample_id\":" + nlohmann::json(log.sample_ids[i]).dump();
            out += ",\"recording_id\":" + nlohmann::json(log.recording_ids[i]).dump();
            out += ",\"epoch\":" + std::to_string(e) + ",\"probs\":[";
            const auto p = log.prob(i, e);
            for (std::size_t k = 0; k < p.size(); ++k) {
                if (k) out += ',';
                out += format_double(p[k]);
            }
            out += "],\"label\":";
            out += log.labels[i] ? std::to_string(*log.labels[i]) : "null";
            out += "}\n";
        }
    }
    return out;
}

std::string log_to_csv(const DynamicsLog& log) {
    std::string out = "sample_id,recording_id,epoch,label";
    for (std::size_t k = 0; k < log.num_classes; ++k) out += ",p" + std::to_string(k);
    out += '\n';
    for (std::size_t i = 0; i < log.size(); ++i) {
        for (std::size_t e = 0; e < log.num_epochs; ++e) {
            out += log.sample_ids[i] + ',' + log.recording_ids[i] + ',' + std::to_string(e) + ',';
            if (log.labels[i]) out += std::to_string(*log.labels[i]);
            for (double p : log.prob(i, e)) out += ',' + format_double(p);
            out += '\n';
        }
    }
    return out;
}

DynamicsLog subset_log(const DynamicsLog& log, std::span<const std::size_t> indices) {
    DynamicsLog out;
    out.num_epochs = log.num_epochs;
    out.num_classes = log.num_classes;
    const auto stride = log.num_epochs * log.num_classes;
    for (auto i : indices) {
        if (i >= log.size()) throw ValidationError("subset index out of range");
        out.sample_ids.push_back(log.sample_ids[i]);
        out.recording_ids.push_back(log.recording_ids[i]);
        out.labels.push_back(log.labels[i]);
        const auto* first = log.probs.data() + i * stride;
        out.probs.insert(out.probs.end(), first, first + stride);
    }
    return out;
}

std::vector<std::pair<std::string, DynamicsLog>> split_by_recording(const DynamicsLog& log) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < log.size(); ++i) {
        auto [it, inserted] = members.try_emplace(log.recording_ids[i]);
        if (inserted) order.push_back(log.recording_ids[i]);
        it->second.push_back(i);
    }
    std::vector<std::pair<std::string, DynamicsLog>> out;
    out.reserve(order.size());
    for (const auto& rec : order) out.emplace_back(rec, subset_log(log, members[rec]));
    return out;
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double x : p) {
        if (x > 0.0) h -= x * std::log(x);
    }
    return h;
}

std::string_view to_string(Stratum s) {
    switch (s) {
        case Stratum::easy: return "easy";
        case Stratum::hard: return "hard";
        case Stratum::model_ambiguous: return "model_ambiguous";
        case Stratum::data_ambiguous: return "data_ambiguous";
        case Stratum::other: return "other";
    }
    return "other";
}

Stratum parse_stratum(std::string_view name) {
    for (auto s : {Stratum::easy, Stratum::hard, Stratum::model_ambiguous, Stratum::data_ambiguous, Stratum::other}) {
        if (to_string(s) == name) return s;
    }
    throw ValidationError("unknown stratum '" + std::string(name) + "'");
}

namespace {

EntropyUncertainty entropy_decomposition(const DynamicsLog& log, std::size_t i, std::vector<double>& mean) {
    mean.assign(log.num_classes, 0.0);
    double mean_entropy = 0.0;
    for (std::size_t e = 0; e < log.num_epochs; ++e) {
        const auto p = log.prob(i, e);
        mean_entropy += entropy(p);
        for (std::size_t k = 0; k < p.size(); ++k) mean[k] += p[k];
    }
    const double inv = 1.0 / static_cast<double>(log.num_epochs);
    mean_entropy *= inv;
    for (auto& m : mean) m *= inv;
    return {log.sample_ids[i], mean_entropy, entropy(mean) - mean_entropy};
}

}  // namespace

std::vector<SampleUncertainty> sample_metrics(const DynamicsLog& log) {
    log.validate();
    for (std::size_t i = 0; i < log.size(); ++i) {
        if (!log.labels[i]) throw ValidationError("sample " + log.sample_ids[i] + " has no label");
    }
    std::vector<SampleUncertainty> out;
    out.reserve(log.size());
    std::vector<double> mean;
    const double inv = 1.0 / static_cast<double>(log.num_epochs);
    for (std::size_t i = 0; i < log.size(); ++i) {
        const auto y = static_cast<std::size_t>(*log.labels[i]);
        double c = 0.0;
        for (std::size_t e = 0; e < log.num_epochs; ++e) c += log.prob(i, e)[y];
        c *= inv;
        double v_ep = 0.0;
        double v_al = 0.0;
        for (std::size_t e = 0; e < log.num_epochs; ++e) {
            const double p = log.prob(i, e)[y];
            v_ep += (p - c) * (p - c);
            v_al += p * (1.0 - p);
        }
        const auto ent = entropy_decomposition(log, i, mean);
        out.push_back({log.sample_ids[i], c, v_al * inv, v_ep * inv, ent.v_al_entropy, ent.v_ep_entropy,
                       Stratum::other});
    }
    return out;
}

std::vector<EntropyUncertainty> sample_metrics_entropy(const DynamicsLog& log) {
    log.validate();
    std::vector<EntropyUncertainty> out;
    out.reserve(log.size());
    std::vector<double> mean;
    for (std::size_t i = 0; i < log.size(); ++i) out.push_back(entropy_decomposition(log, i, mean));
    return out;
}

std::string_view to_string(AmbiguityKind kind) {
    return kind == AmbiguityKind::aleatoric ? "aleatoric" : "epistemic";
}

AmbiguityKind parse_ambiguity_kind(std::string_view name) {
    if (name == "aleatoric" || name == "data") return AmbiguityKind::aleatoric;
    if (name == "epistemic" || name == "model") return AmbiguityKind::epistemic;
    throw ValidationError("unknown ambiguity kind '" + std::string(name) + "'");
}

std::vector<Stratum> stratify(std::span<const SampleUncertainty> metrics, AmbiguityKind kind, double top_pct,
                              double easy_hard_pct) {
    if (!(top_pct > 0.0 && top_pct <= 100.0)) throw ValidationError("top_pct must be in (0, 100]");
    if (!(easy_hard_pct > 0.0 && easy_hard_pct <= 100.0)) throw ValidationError("easy_hard_pct must be in (0, 100]");
    const auto n = metrics.size();
    const auto n_ambiguous = percent_count(n, top_pct);
    const auto n_easy_hard = percent_count(n, easy_hard_pct);
    if (n_ambiguous + 2 * n_easy_hard > n) {
        throw ValidationError("stratum quotas (" + std::to_string(n_ambiguous) + " ambiguous + 2 x " +
                              std::to_string(n_easy_hard) + ") exceed " + std::to_string(n) + " samples");
    }
    auto ambiguity = [&](std::size_t i) {
        return kind == AmbiguityKind::aleatoric ? metrics[i].v_al : metrics[i].v_ep;
    };
    // Orders indices by descending key, then ascending sample_id.
    auto rank_by = [&](std::vector<std::size_t>& idx, auto key) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            const double ka = key(a);
            const double kb = key(b);
            if (ka != kb) return ka > kb;
            return metrics[a].sample_id < metrics[b].sample_id;
        });
    };

    std::vector<Stratum> out(n, Stratum::other);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rank_by(idx, ambiguity);
    const auto ambiguous = kind == AmbiguityKind::aleatoric ? Stratum::data_ambiguous : Stratum::model_ambiguous;
    for (std::size_t r = 0; r < n_ambiguous; ++r) out[idx[r]] = ambiguous;

    std::vector<std::size_t> rest(idx.begin() + static_cast<std::ptrdiff_t>(n_ambiguous), idx.end());
    rank_by(rest, [&](std::size_t i) { return metrics[i].confidence - ambiguity(i); });
    for (std::size_t r = 0; r < n_easy_hard; ++r) out[rest[r]] = Stratum::easy;

    rest.erase(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_easy_hard));
    rank_by(rest, [&](std::size_t i) { return -metrics[i].confidence - ambiguity(i); });
    for (std::size_t r = 0; r < n_easy_hard; ++r) out[rest[r]] = Stratum::hard;
    return out;
}

void apply_strata(std::vector<SampleUncertainty>& metrics, AmbiguityKind kind, double top_pct,
                  double easy_hard_pct) {
    const auto strata = stratify(metrics, kind, top_pct, easy_hard_pct);
    for (std::size_t i = 0; i < metrics.size(); ++i) metrics[i].stratum = strata[i];
}

std::string metrics_to_csv(std::span<const SampleUncertainty> metrics) {
    std::string out = "sample_id,c,v_al,v_ep,v_al_entropy,v_ep_entropy,stratum\n";
    for (const auto& m : metrics) {
        out += m.sample_id + ',' + format_double(m.confidence) + ',' + format_double(m.v_al) + ',' +
               format_double(m.v_ep) + ',' + format_double(m.v_al_entropy) + ',' + format_double(m.v_ep_entropy) +
               ',' + std::string(to_string(m.stratum)) + '\n';
    }
    return out;
}

std::vector<SampleUncertainty> parse_metrics_csv(std::string_view text) {
    std::vector<SampleUncertainty> out;
    bool header_seen = false;
    for_each_line(text, [&](std::size_t line_no, std::string_view line) {
        if (blank(line)) return;
        const auto f = split_csv(line);
        if (!header_seen) {
            if (line != "sample_id,c,v_al,v_ep,v_al_entropy,v_ep_entropy,stratum") {
                throw ParseError(line_no, "unexpected metrics header");
            }
            header_seen = true;
            return;
        }
        if (f.size() != 7) throw ParseError(line_no, "expected 7 fields");
        try {
            out.push_back({f[0], parse_double(f[1], "c"), parse_double(f[2], "v_al"), parse_double(f[3], "v_ep"),
                           parse_double(f[4], "v_al_entropy"), parse_double(f[5], "v_ep_entropy"),
                           parse_stratum(f[6])});
        } catch (const ValidationError& e) {
            throw ParseError(line_no, e.what());
        }
    });
    return out;
}

}  // namespace upass
