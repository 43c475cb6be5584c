#include "upass/active.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "upass/error.hpp"
#include "upass/io.hpp"

namespace upass {

std::vector<RecordingRanking> rank_recordings(std::span<const std::pair<std::string, DynamicsLog>> logs,
                                              double select_pct) {
    if (!(select_pct > 0.0 && select_pct <= 100.0)) throw ValidationError("select_pct must be in (0, 100]");
    std::vector<RecordingRanking> out;
    out.reserve(logs.size());
    for (const auto& [rec, log] : logs) {
        if (log.size() == 0) throw ValidationError("recording " + rec + " is empty");
        const auto ent = sample_metrics_entropy(log);
        double sum = 0.0;
        for (const auto& e : ent) sum += e.v_ep_entropy;
        out.push_back({rec, sum / static_cast<double>(ent.size()), 0, false});
    }
    std::sort(out.begin(), out.end(), [](const RecordingRanking& a, const RecordingRanking& b) {
        if (a.v_ep_entropy != b.v_ep_entropy) return a.v_ep_entropy > b.v_ep_entropy;
        return a.recording_id < b.recording_id;
    });
    const auto n_selected = percent_count(out.size(), select_pct);
    for (std::size_t r = 0; r < out.size(); ++r) {
        out[r].rank = r + 1;
        out[r].selected = r < n_selected;
    }
    return out;
}

std::string rankings_to_csv(std::span<const RecordingRanking> rankings) {
    std::string out = "recording_id,v_ep_entropy,rank,selected\n";
    for (const auto& r : rankings) {
        out += r.recording_id + ',' + format_double(r.v_ep_entropy) + ',' + std::to_string(r.rank) + ',' +
               (r.selected ? "true" : "false") + '\n';
    }
    return out;
}

std::string_view to_string(SessionStatus status) {
    return status == SessionStatus::running ? "running" : "finished";
}

bool ALSession::is_labeled(std::string_view sample_id) const {
    return std::any_of(labeled.begin(), labeled.end(), [&](const auto& l) { return l.first == sample_id; });
}

const std::vector<std::string>& ALSession::outstanding_batch() const {
    if (!batch_outstanding()) throw ConflictError("no outstanding query batch");
    return query_history[epoch];
}

std::string ALSession::batch_token() const {
    return recording_id + "/e" + std::to_string(epoch);
}

ALSession start_session(std::string recording_id, std::vector<std::string> sample_ids,
                        Eigen::MatrixXd initial_outputs, std::size_t max_epochs, double batch_pct,
                        std::string trainer_id) {
    if (sample_ids.empty()) throw ValidationError("recording " + recording_id + " is empty");
    if (static_cast<std::size_t>(initial_outputs.rows()) != sample_ids.size()) {
        throw ValidationError("initial outputs do not match the recording's samples");
    }
    if (max_epochs == 0) throw ValidationError("max_epochs must be positive");
    if (!(batch_pct > 0.0 && batch_pct <= 100.0)) throw ValidationError("batch_pct must be in (0, 100]");
    std::set<std::string_view> seen;
    for (const auto& id : sample_ids) {
        if (!seen.insert(id).second) throw ValidationError("duplicate sample_id " + id);
    }
    ALSession s;
    s.recording_id = std::move(recording_id);
    s.sample_ids = std::move(sample_ids);
    s.max_epochs = max_epochs;
    s.batch_pct = batch_pct;
    s.outputs.push_back(std::move(initial_outputs));
    s.trainer_id = std::move(trainer_id);
    return s;
}

namespace {

std::size_t batch_size(const ALSession& session, double batch_pct, std::size_t unlabeled) {
    if (!(batch_pct > 0.0 && batch_pct <= 100.0)) throw ValidationError("batch_pct must be in (0, 100]");
    return std::min(percent_count(session.size(), batch_pct), unlabeled);
}

std::vector<std::size_t> unlabeled_rows(const ALSession& session) {
    std::set<std::string_view> done;
    for (const auto& [id, _] : session.labeled) done.insert(id);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < session.size(); ++i) {
        if (!done.count(session.sample_ids[i])) rows.push_back(i);
    }
    return rows;
}

}  // namespace

std::vector<std::string> next_query_batch(const ALSession& session, const Eigen::MatrixXd& outputs,
                                          double batch_pct) {
    if (static_cast<std::size_t>(outputs.rows()) != session.size()) {
        throw ValidationError("outputs do not match the recording's samples");
    }
    auto rows = unlabeled_rows(session);
    const auto k = batch_size(session, batch_pct, rows.size());
    std::vector<double> h(session.size(), 0.0);
    std::vector<double> p(static_cast<std::size_t>(outputs.cols()));
    for (auto r : rows) {
        for (std::size_t c = 0; c < p.size(); ++c) p[c] = outputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        h[r] = entropy(p);
    }
    std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k), rows.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (h[a] != h[b]) return h[a] > h[b];
                          return session.sample_ids[a] < session.sample_ids[b];
                      });
    std::vector<std::string> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(session.sample_ids[rows[i]]);
    return out;
}

std::vector<std::string> random_query_batch(const ALSession& session, double batch_pct, Rng& rng) {
    auto rows = unlabeled_rows(session);
    const auto k = batch_size(session, batch_pct, rows.size());
    rng.shuffle(rows);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(session.sample_ids[rows[i]]);
    return out;
}

const std::vector<std::string>& issue_batch(ALSession& session, std::vector<std::string> batch) {
    if (session.status == SessionStatus::finished) throw ConflictError("session is finished");
    if (session.batch_outstanding()) return session.query_history[session.epoch];
    std::set<std::string_view> known(session.sample_ids.begin(), session.sample_ids.end());
    std::set<std::string_view> in_batch;
    for (const auto& id : batch) {
        if (!known.count(id)) throw ValidationError("sample " + id + " is not in recording " + session.recording_id);
        if (session.is_labeled(id)) throw ValidationError("sample " + id + " is already labeled");
        if (!in_batch.insert(id).second) throw ValidationError("sample " + id + " appears twice in the batch");
    }
    session.query_history.push_back(std::move(batch));
    return session.query_history.back();
}

const std::vector<std::string>& issue_entropy_batch(ALSession& session) {
    if (session.batch_outstanding()) return session.query_history[session.epoch];
    return issue_batch(session, next_query_batch(session, session.current_outputs(), session.batch_pct));
}

void al_step(ALSession& session, const std::map<std::string, int>& answers, Trainer& trainer) {
    if (session.status == SessionStatus::finished) throw ConflictError("session is finished");
    const auto& batch = session.outstanding_batch();
    for (const auto& id : batch) {
        if (!answers.count(id)) throw ValidationError("missing answer for sample " + id);
    }
    for (const auto& [id, _] : answers) {
        if (std::find(batch.begin(), batch.end(), id) == batch.end()) {
            throw ValidationError("answer for sample " + id + " which was not queried");
        }
    }
    const auto classes = static_cast<int>(session.current_outputs().cols());
    for (const auto& [id, label] : answers) {
        if (label < 0 || label >= classes) throw ValidationError("label out of range for sample " + id);
    }

    for (const auto& id : batch) session.labeled.emplace_back(id, answers.at(id));

    std::unordered_map<std::string_view, std::size_t> row_of;
    for (std::size_t i = 0; i < session.size(); ++i) row_of.emplace(session.sample_ids[i], i);
    std::vector<LabeledSample> labeled;
    labeled.reserve(session.labeled.size());
    for (const auto& [id, label] : session.labeled) labeled.push_back({row_of.at(id), label});

    auto outputs = trainer.train_epoch(labeled, session.epoch);
    if (outputs.rows() != session.current_outputs().rows() || outputs.cols() != session.current_outputs().cols()) {
        throw ValidationError("trainer returned outputs of the wrong shape");
    }
    session.outputs.push_back(std::move(outputs));
    session.trainer_state = trainer.save_state();
    ++session.epoch;
    if (session.epoch >= session.max_epochs) session.status = SessionStatus::finished;
}

std::map<std::string, int> simulated_answers(const std::vector<std::string>& batch,
                                             const std::map<std::string, int>& truth) {
    std::map<std::string, int> out;
    for (const auto& id : batch) {
        const auto it = truth.find(id);
        if (it == truth.end()) throw NotFoundError("no ground truth for sample " + id);
        out.emplace(id, it->second);
    }
    return out;
}

FineTuneTrainer::FineTuneTrainer(ModelCheckpoint model, FeatureTable recording, FineTuneConfig config,
                                 std::uint64_t seed)
    : model_(std::move(model)), recording_(std::move(recording)), config_(config), seed_(seed) {
    if (recording_.dims() != model_.input_dim()) throw ValidationError("recording features do not match the model");
}

Eigen::MatrixXd FineTuneTrainer::train_epoch(std::span<const LabeledSample> labeled, std::size_t epoch) {
    if (!labeled.empty()) {
        std::vector<int> labels(recording_.size(), 0);
        std::vector<std::size_t> rows;
        rows.reserve(labeled.size());
        for (const auto& l : labeled) {
            labels[l.row] = l.label;
            rows.push_back(l.row);
        }
        TrainConfig tc;
        tc.batch_size = config_.batch_size;
        tc.learning_rate = config_.learning_rate;
        tc.weight_decay = config_.weight_decay;
        Rng rng(Rng::derive(seed_, 1000 + epoch));
        for (std::size_t pass = 0; pass < config_.passes; ++pass) {
            sgd_epoch(model_, recording_.features, labels, rows, tc, rng, epoch);
        }
    }
    model_.epoch = epoch;
    return outputs();
}

Eigen::MatrixXd FineTuneTrainer::outputs() const {
    return predict_proba(model_, recording_.features);
}

std::string FineTuneTrainer::save_state() const {
    return checkpoint_to_json(model_);
}

void FineTuneTrainer::load_state(std::string_view state) {
    model_ = parse_checkpoint_json(state);
}

namespace {

nlohmann::ordered_json matrix_to_json(const Eigen::MatrixXd& m) {
    auto rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto v = j[static_cast<std::size_t>(r)].get<std::vector<double>>();
        if (static_cast<Eigen::Index>(v.size()) != cols) throw ValidationError("ragged output matrix");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(c)];
    }
    return m;
}

}  // namespace

std::string session_to_json(const ALSession& s) {
    nlohmann::ordered_json j;
    j["recording_id"] = s.recording_id;
    j["sample_ids"] = s.sample_ids;
    j["epoch"] = s.epoch;
    j["max_epochs"] = s.max_epochs;
    j["batch_pct"] = s.batch_pct;
    auto labeled = nlohmann::ordered_json::array();
    for (const auto& [id, label] : s.labeled) labeled.push_back({{"sample_id", id}, {"label", label}});
    j["labeled"] = std::move(labeled);
    j["query_history"] = s.query_history;
    auto outputs = nlohmann::ordered_json::array();
    for (const auto& m : s.outputs) outputs.push_back(matrix_to_json(m));
    j["outputs"] = std::move(outputs);
    j["trainer_id"] = s.trainer_id;
    j["trainer_state"] = s.trainer_state;
    j["status"] = std::string(to_string(s.status));
    return j.dump();
}

ALSession parse_session_json(std::string_view text) {
    ALSession s;
    try {
        const auto j = nlohmann::json::parse(text);
        s.recording_id = j.at("recording_id").get<std::string>();
        s.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
        s.epoch = j.at("epoch").get<std::size_t>();
        s.max_epochs = j.at("max_epochs").get<std::size_t>();
        s.batch_pct = j.at("batch_pct").get<double>();
        for (const auto& l : j.at("labeled")) {
            s.labeled.emplace_back(l.at("sample_id").get<std::string>(), l.at("label").get<int>());
        }
        s.query_history = j.at("query_history").get<std::vector<std::vector<std::string>>>();
        for (const auto& m : j.at("outputs")) s.outputs.push_back(matrix_from_json(m));
        s.trainer_id = j.at("trainer_id").get<std::string>();
        s.trainer_state = j.at("trainer_state").get<std::string>();
        const auto status = j.at("status").get<std::string>();
        if (status != "running" && status != "finished") throw ValidationError("unknown session status " + status);
        s.status = status == "running" ? SessionStatus::running : SessionStatus::finished;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed session: ") + e.what());
    }
    if (s.outputs.size() != s.epoch + 1) throw ValidationError("session outputs do not match its epoch counter");
    return s;
}

}  // namespace upass
