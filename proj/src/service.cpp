#include "upass/service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>

#include <httplib.h>

#include "upass/error.hpp"
#include "upass/io.hpp"
#include "upass/rng.hpp"

namespace upass {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

Response json_response(int status, const ojson& body) { return {status, body.dump() + "\n"}; }

struct Prediction {
    std::string recording_id;
    std::optional<int> label;
    int prediction = 0;
};

std::map<std::string, Prediction> parse_predictions_csv(std::string_view text) {
    std::map<std::string, Prediction> out;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        if (++line_no == 1 || line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != 4) throw ParseError(line_no, "expected sample_id,recording_id,label,prediction");
        Prediction p;
        p.recording_id = f[1];
        if (!f[2].empty()) p.label = static_cast<int>(parse_int(f[2], "label"));
        p.prediction = static_cast<int>(parse_int(f[3], "prediction"));
        out.emplace(f[0], p);
    }
    return out;
}

const std::map<std::string, std::string>& artifact_paths() {
    static const std::map<std::string, std::string> paths = {
        {"curve", "defer/curve_all.csv"},        {"explanation", "defer/explanation.json"},
        {"manifest", "select/manifest.json"},    {"map", "collect/map.csv"},
        {"metrics", "collect/metrics.csv"},      {"outputs", "defer/outputs.csv"},
        {"predictions", "defer/predictions.csv"}, {"queue", "defer/queue.csv"},
        {"rankings", "active/rankings.csv"},     {"scores", "defer/scores.csv"},
        {"summary", "summary.json"},
    };
    return paths;
}

}  // namespace

struct SessionService::Session {
    mutable std::mutex mutex;
    std::string id;
    std::string mode;
    std::string recording_id;
    ojson params;

    // active learning
    std::optional<ALSession> al;
    std::optional<FineTuneTrainer> trainer;
    std::vector<std::string> sample_ids;
    std::vector<std::optional<int>> truth;
    std::optional<Eigen::MatrixXd> coords;
    std::map<std::string, Explanation> explanations;

    // deferral review
    double z = 0.0;
    std::vector<DeferralScore> queue;
    std::map<std::string, Prediction> predictions;  // every sample of the session
    std::optional<OutputTable> outputs;
    std::map<std::string, std::pair<std::string, std::optional<int>>> resolutions;

    bool running() const {
        if (al) return al->status == SessionStatus::running;
        return resolutions.size() < queue.size();
    }
};

Response error_response(const std::exception& e) {
    const char* code = "internal";
    int status = 500;
    if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e)) {
        code = "bad_request";
        status = 400;
    } else if (dynamic_cast<const NotFoundError*>(&e)) {
        code = "not_found";
        status = 404;
    } else if (dynamic_cast<const ConflictError*>(&e)) {
        code = "conflict";
        status = 409;
    }
    ojson body;
    body["error"] = code;
    body["message"] = e.what();
    return json_response(status, body);
}

SessionService::SessionService(ServiceOptions options) : options_(std::move(options)) {
    if (options_.event_log.empty()) options_.event_log = options_.artifacts_dir / "service" / "events.jsonl";
    if (!options_.clock) options_.clock = utc_now;
    replay();
}

SessionService::~SessionService() = default;

// ---------------------------------------------------------------- event log

void SessionService::append_event(const std::string& kind, const std::string& session_id, ojson payload) {
    if (replaying_) return;
    std::lock_guard lock(log_mutex_);
    ojson rec;
    rec["seq"] = next_seq_;
    rec["timestamp"] = options_.clock();
    rec["kind"] = kind;
    rec["session_id"] = session_id;
    rec["payload"] = std::move(payload);
    fs::create_directories(options_.event_log.parent_path());
    std::ofstream out(options_.event_log, std::ios::app | std::ios::binary);
    out << rec.dump() << '\n';
    out.flush();
    if (!out) throw Error("cannot append to event log " + options_.event_log.string());
    ++next_seq_;
}

void SessionService::replay() {
    if (!fs::exists(options_.event_log)) return;
    const auto text = read_file(options_.event_log);
    replaying_ = true;
    std::size_t pos = 0, line_no = 0;
    std::uint64_t last_seq = 0;
    auto diverged = [&](const std::string& why) {
        return Error("event log replay failed at line " + std::to_string(line_no) + ": " + why);
    };
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        const bool torn = end == std::string::npos;
        if (torn) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json ev;
        try {
            ev = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            if (torn) {
                // interrupted append: the mutation was never acknowledged
                std::cerr << "upass: ignoring incomplete final event log record\n";
                std::error_code ec;
                fs::resize_file(options_.event_log, text.size() - line.size(), ec);
                break;
            }
            throw diverged("malformed record");
        }
        const auto seq = ev.at("seq").get<std::uint64_t>();
        if (seq <= last_seq) throw diverged("sequence numbers must increase");
        last_seq = seq;
        const auto kind = ev.at("kind").get<std::string>();
        const auto sid = ev.at("session_id").get<std::string>();
        const auto& payload = ev.at("payload");

        if (kind == "session_created") {
            auto s = build_session(sid, payload.at("params"));
            sessions_[sid] = s;
            next_id_ = std::max(next_id_, static_cast<std::size_t>(std::stoul(sid.substr(1))) + 1);
            continue;
        }
        auto s = find(sid);
        if (kind == "batch_issued") {
            const auto r = do_issue(*s);
            if (r.status != 200 || s->al->outstanding_batch() != payload.at("sample_ids").get<std::vector<std::string>>())
                throw diverged("re-issued batch differs");
        } else if (kind == "label_submitted") {
            const auto r = do_submit(*s, payload);
            if (r.status != 200) throw diverged("label submission rejected: " + r.body);
        } else if (kind == "epoch_finished") {
            if (s->al->epoch != payload.at("epoch").get<std::size_t>()) throw diverged("epoch mismatch");
        } else if (kind == "deferral_issued") {
            std::vector<std::string> ids;
            for (const auto& q : s->queue) ids.push_back(q.sample_id);
            if (ids != payload.at("queue").get<std::vector<std::string>>()) throw diverged("deferral queue differs");
        } else if (kind == "deferral_resolved") {
            const auto r = do_resolve(*s, payload.at("sample_id").get<std::string>(), payload);
            if (r.status != 200) throw diverged("resolution rejected: " + r.body);
        } else {
            throw diverged("unknown event kind " + kind);
        }
    }
    next_seq_ = last_seq + 1;
    replaying_ = false;
}

// ---------------------------------------------------------------- sessions

std::shared_ptr<SessionService::Session> SessionService::find(const std::string& id) const {
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session " + id);
    return it->second;
}

ojson SessionService::session_params(const nlohmann::json& req) const {
    if (!req.is_object()) throw ValidationError("request body must be a JSON object");
    for (const auto& [k, v] : req.items()) {
        static const std::set<std::string> known = {"mode", "recording_id", "batch_pct", "epochs", "z"};
        if (!known.count(k)) throw ValidationError("unknown field '" + k + "'");
    }
    ojson p;
    const auto mode = req.value("mode", std::string("active_learning"));
    p["mode"] = mode;
    if (mode == "active_learning") {
        if (!req.contains("recording_id")) throw ValidationError("recording_id is required");
        p["recording_id"] = req.at("recording_id").get<std::string>();
        const double batch_pct = req.value("batch_pct", 1.0);
        if (!(batch_pct > 0.0 && batch_pct <= 100.0)) throw ValidationError("batch_pct must be in (0, 100]");
        const auto epochs = req.value("epochs", std::size_t{10});
        if (epochs < 1) throw ValidationError("epochs must be positive");
        p["batch_pct"] = batch_pct;
        p["epochs"] = epochs;
    } else if (mode == "deferral_review") {
        p["recording_id"] = req.value("recording_id", std::string());
        const double z = req.value("z", 0.2);
        if (!(z > 0.0 && z <= 1.0)) throw ValidationError("z must be in (0, 1]");
        p["z"] = z;
    } else {
        throw ValidationError("mode must be active_learning or deferral_review");
    }
    return p;
}

std::shared_ptr<SessionService::Session> SessionService::build_session(const std::string& id, const nlohmann::json& p) {
    auto s = std::make_shared<Session>();
    s->id = id;
    s->mode = p.at("mode").get<std::string>();
    s->recording_id = p.at("recording_id").get<std::string>();
    s->params = p;
    const auto& dir = options_.artifacts_dir;
    auto need = [&](const fs::path& rel) {
        const auto path = dir / rel;
        if (!fs::exists(path)) throw NotFoundError("artifact " + rel.string() + " not found");
        return path;
    };

    if (s->mode == "active_learning") {
        fs::path model_path = dir / "select" / "model.json";
        if (!fs::exists(model_path)) model_path = need("collect/model.json");
        const auto model = parse_checkpoint_json(read_file(model_path));
        const auto test = load_feature_csv(need("data/test_features.csv"));
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < test.size(); ++i)
            if (test.recording_ids[i] == s->recording_id) rows.push_back(i);
        if (rows.empty()) throw NotFoundError("unknown recording " + s->recording_id);
        const auto rec = subset_rows(test, rows);
        if (p.contains("model_digest") && p.at("model_digest").get<std::string>() != sha256_hex(checkpoint_to_json(model)))
            throw Error("model artifact changed since session " + id + " was created");
        s->params["model_digest"] = sha256_hex(checkpoint_to_json(model));
        s->sample_ids = rec.sample_ids;
        s->truth = rec.labels;
        const auto seed = Rng::derive(options_.seed, std::stoull(id.substr(1)));
        s->trainer.emplace(model, rec, options_.finetune, seed);
        s->al = start_session(s->recording_id, rec.sample_ids, s->trainer->outputs(), p.at("epochs").get<std::size_t>(),
                              p.at("batch_pct").get<double>(), s->trainer->id());
        try {
            s->coords = project_2d(embed(model, rec));
        } catch (const Error&) {
            s->coords.reset();
        }
        if (fs::exists(dir / "defer" / "scores.csv")) {
            for (auto& sc : parse_scores_csv(read_file(dir / "defer" / "scores.csv")))
                if (sc.explanation) s->explanations.emplace(sc.sample_id, *sc.explanation);
        }
        return s;
    }

    auto scores = parse_scores_csv(read_file(need("defer/scores.csv")));
    const auto preds = parse_predictions_csv(read_file(need("defer/predictions.csv")));
    if (fs::exists(dir / "defer" / "outputs.csv")) s->outputs = parse_outputs_csv(read_file(dir / "defer" / "outputs.csv"));
    std::vector<DeferralScore> pool;
    for (auto& sc : scores) {
        auto it = preds.find(sc.sample_id);
        if (it == preds.end()) throw NotFoundError("no prediction for scored sample " + sc.sample_id);
        if (!s->recording_id.empty() && it->second.recording_id != s->recording_id) continue;
        s->predictions.emplace(sc.sample_id, it->second);
        pool.push_back(std::move(sc));
    }
    if (pool.empty()) throw NotFoundError("no scored samples for recording " + s->recording_id);
    s->z = p.at("z").get<double>();
    s->queue = most_uncertain(pool, s->z);
    return s;
}

Response SessionService::create_session(std::string_view body) {
    try {
        const auto params = session_params(nlohmann::json::parse(body));
        std::unique_lock lock(sessions_mutex_);
        for (const auto& [sid, other] : sessions_) {
            std::lock_guard sl(other->mutex);
            if (other->mode == params["mode"] && other->recording_id == params["recording_id"] && other->running())
                throw ConflictError("session " + sid + " is already running for recording '" +
                                    params["recording_id"].get<std::string>() + "'");
        }
        char buf[16];
        std::snprintf(buf, sizeof buf, "s%04zu", next_id_);
        const std::string id = buf;
        auto s = build_session(id, params);
        append_event("session_created", id, {{"params", s->params}});
        if (s->mode == "deferral_review") {
            std::vector<std::string> ids;
            for (const auto& q : s->queue) ids.push_back(q.sample_id);
            append_event("deferral_issued", id, {{"queue", ids}});
        }
        sessions_[id] = s;
        ++next_id_;
        std::lock_guard sl(s->mutex);
        return {201, summary_locked(*s)};
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

std::vector<std::string> SessionService::session_ids() const {
    std::shared_lock lock(sessions_mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, s] : sessions_) ids.push_back(id);
    return ids;
}

Response SessionService::list_sessions() const {
    ojson out;
    out["sessions"] = ojson::array();
    for (const auto& id : session_ids()) out["sessions"].push_back(ojson::parse(summary(id)));
    return json_response(200, out);
}

std::string SessionService::summary(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return summary_locked(*s);
}

std::string SessionService::summary_locked(const Session& s) const {
    ojson j;
    j["session_id"] = s.id;
    j["mode"] = s.mode;
    j["recording_id"] = s.recording_id;
    j["status"] = s.running() ? "running" : "finished";
    j["simulation"] = options_.simulation;
    if (s.al) {
        const auto& a = *s.al;
        j["epoch"] = a.epoch;
        j["max_epochs"] = a.max_epochs;
        j["batch_pct"] = a.batch_pct;
        j["num_samples"] = a.size();
        j["labeled"] = a.labeled.size();
        j["batch_token"] = a.batch_outstanding() ? ojson(a.batch_token()) : ojson(nullptr);
        j["accuracy"] = nullptr;
        if (options_.simulation &&
            std::all_of(s.truth.begin(), s.truth.end(), [](const auto& t) { return t.has_value(); })) {
            std::vector<int> y;
            for (const auto& t : s.truth) y.push_back(*t);
            j["accuracy"] = accuracy(a.current_outputs(), y);
        }
        j["state_digest"] = sha256_hex(session_to_json(a));
    } else {
        j["z"] = s.z;
        j["num_samples"] = s.predictions.size();
        j["queue_size"] = s.queue.size();
        j["resolved"] = s.resolutions.size();
        j["remaining"] = s.queue.size() - s.resolutions.size();
        j["accuracy"] = nullptr;
        j["corrected_accuracy"] = nullptr;
        const bool labeled = std::all_of(s.predictions.begin(), s.predictions.end(),
                                         [](const auto& kv) { return kv.second.label.has_value(); });
        if (options_.simulation && labeled) {
            std::size_t right = 0, corrected = 0;
            for (const auto& [sid, pr] : s.predictions) {
                right += pr.prediction == *pr.label;
                int final_pred = pr.prediction;
                if (auto it = s.resolutions.find(sid); it != s.resolutions.end() && it->second.first == "relabel")
                    final_pred = *it->second.second;
                corrected += final_pred == *pr.label;
            }
            const auto n = static_cast<double>(s.predictions.size());
            j["accuracy"] = static_cast<double>(right) / n;
            j["corrected_accuracy"] = static_cast<double>(corrected) / n;
        }
        ojson res = ojson::object();
        for (const auto& [sid, r] : s.resolutions) {
            ojson one;
            one["decision"] = r.first;
            if (r.second) one["label"] = *r.second;
            res[sid] = one;
        }
        j["state_digest"] = sha256_hex(res.dump());
    }
    return j.dump() + "\n";
}

Response SessionService::get_session(const std::string& id) const {
    try {
        return {200, summary(id)};
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

// ---------------------------------------------------------------- active learning

Response SessionService::do_issue(Session& s) {
    if (!s.al) throw ConflictError("session " + s.id + " is not an active-learning session");
    auto& a = *s.al;
    if (a.status == SessionStatus::finished) throw ConflictError("session " + s.id + " is finished");
    if (!a.batch_outstanding()) {
        const auto batch = next_query_batch(a, a.current_outputs(), a.batch_pct);
        append_event("batch_issued", s.id, {{"epoch", a.epoch}, {"batch_token", a.batch_token()}, {"sample_ids", batch}});
        issue_batch(a, batch);
    }
    ojson out;
    out["session_id"] = s.id;
    out["epoch"] = a.epoch;
    out["batch_token"] = a.batch_token();
    out["items"] = ojson::array();
    std::map<std::string, std::size_t> row;
    for (std::size_t i = 0; i < a.size(); ++i) row[a.sample_ids[i]] = i;
    const auto& probs = a.current_outputs();
    for (const auto& sid : a.outstanding_batch()) {
        const auto r = static_cast<Eigen::Index>(row.at(sid));
        ojson item;
        item["sample_id"] = sid;
        std::vector<double> p(static_cast<std::size_t>(probs.cols()));
        for (Eigen::Index k = 0; k < probs.cols(); ++k) p[static_cast<std::size_t>(k)] = probs(r, k);
        item["probs"] = p;
        if (auto it = s.explanations.find(sid); it != s.explanations.end()) {
            item["explanation"]["mean_neighbor_distance"] = it->second.mean_neighbor_distance;
            if (it->second.mean_neighbor_confidence)
                item["explanation"]["mean_neighbor_confidence"] = *it->second.mean_neighbor_confidence;
        }
        if (s.coords) item["coords"] = {(*s.coords)(r, 0), (*s.coords)(r, 1)};
        out["items"].push_back(item);
    }
    return json_response(200, out);
}

Response SessionService::get_queries(const std::string& id) {
    try {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        return do_issue(*s);
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

Response SessionService::do_submit(Session& s, const nlohmann::json& body) {
    if (!s.al) throw ConflictError("session " + s.id + " is not an active-learning session");
    if (!body.is_object() || !body.contains("batch_token")) throw ValidationError("batch_token is required");
    const auto token = body.at("batch_token").get<std::string>();
    const auto& a = *s.al;
    if (a.status == SessionStatus::finished) throw ConflictError("session " + s.id + " is finished");
    if (!a.batch_outstanding() || token != a.batch_token())
        throw ConflictError("stale batch token " + token + "; fetch the current queries");

    std::map<std::string, int> answers;
    if (body.contains("oracle")) {
        if (body.at("oracle") != "simulated") throw ValidationError("oracle must be \"simulated\"");
        if (!options_.simulation) throw ValidationError("the simulated oracle needs simulation mode");
        std::map<std::string, int> truth;
        for (std::size_t i = 0; i < s.sample_ids.size(); ++i)
            if (s.truth[i]) truth[s.sample_ids[i]] = *s.truth[i];
        answers = simulated_answers(a.outstanding_batch(), truth);
    } else {
        if (!body.contains("labels") || !body.at("labels").is_object()) throw ValidationError("labels object is required");
        for (const auto& [sid, v] : body.at("labels").items()) {
            if (!v.is_number_integer()) throw ValidationError("label for sample " + sid + " must be an integer");
            answers[sid] = v.get<int>();
        }
    }

    // apply on copies so a failure leaves the session untouched
    ALSession next = a;
    FineTuneTrainer trainer = *s.trainer;
    al_step(next, answers, trainer);
    append_event("label_submitted", s.id, {{"batch_token", token}, {"labels", answers}});
    append_event("epoch_finished", s.id, {{"epoch", next.epoch}, {"status", std::string(to_string(next.status))}});
    *s.al = std::move(next);
    *s.trainer = std::move(trainer);
    return {200, summary_locked(s)};
}

Response SessionService::submit_labels(const std::string& id, std::string_view body) {
    try {
        const auto parsed = nlohmann::json::parse(body);
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        return do_submit(*s, parsed);
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

// ---------------------------------------------------------------- deferral review

Response SessionService::get_deferrals(const std::string& id) const {
    try {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        if (s->al) throw ConflictError("session " + id + " is not a deferral session");
        std::optional<Eigen::MatrixXd> probs;
        std::map<std::string, Eigen::Index> out_row;
        if (s->outputs)
            for (std::size_t i = 0; i < s->outputs->sample_ids.size(); ++i)
                out_row[s->outputs->sample_ids[i]] = static_cast<Eigen::Index>(i);
        ojson out;
        out["session_id"] = id;
        out["z"] = s->z;
        out["queue_size"] = s->queue.size();
        out["resolved"] = s->resolutions.size();
        out["items"] = ojson::array();
        for (const auto& q : s->queue) {
            if (s->resolutions.count(q.sample_id)) continue;
            ojson item;
            item["sample_id"] = q.sample_id;
            item["metric_id"] = to_string(q.metric);
            item["score"] = q.score;
            const auto& pr = s->predictions.at(q.sample_id);
            item["recording_id"] = pr.recording_id;
            item["prediction"] = pr.prediction;
            if (auto it = out_row.find(q.sample_id); it != out_row.end()) {
                std::vector<double> p;
                for (Eigen::Index k = 0; k < s->outputs->probs.cols(); ++k) p.push_back(s->outputs->probs(it->second, k));
                item["probs"] = p;
            }
            if (q.explanation) {
                item["explanation"]["mean_neighbor_distance"] = q.explanation->mean_neighbor_distance;
                if (q.explanation->mean_neighbor_confidence)
                    item["explanation"]["mean_neighbor_confidence"] = *q.explanation->mean_neighbor_confidence;
            }
            out["items"].push_back(item);
        }
        return json_response(200, out);
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

Response SessionService::do_resolve(Session& s, const std::string& sample_id, const nlohmann::json& body) {
    if (s.al) throw ConflictError("session " + s.id + " is not a deferral session");
    const bool queued = std::any_of(s.queue.begin(), s.queue.end(), [&](const auto& q) { return q.sample_id == sample_id; });
    if (!queued) throw NotFoundError("sample " + sample_id + " is not in the deferral queue");
    if (s.resolutions.count(sample_id)) throw ConflictError("sample " + sample_id + " is already resolved");
    if (!body.is_object() || !body.contains("decision")) throw ValidationError("decision is required");
    const auto decision = body.at("decision").get<std::string>();
    std::optional<int> label;
    if (decision == "relabel") {
        if (!body.contains("label") || !body.at("label").is_number_integer())
            throw ValidationError("relabel needs an integer label");
        label = body.at("label").get<int>();
        const auto classes = s.outputs ? s.outputs->probs.cols() : Eigen::Index{-1};
        if (*label < 0 || (classes > 0 && *label >= classes)) throw ValidationError("label out of range");
    } else if (decision != "confirm_model" && decision != "skip") {
        throw ValidationError("decision must be relabel, confirm_model or skip");
    }
    ojson payload = {{"sample_id", sample_id}, {"decision", decision}};
    if (label) payload["label"] = *label;
    append_event("deferral_resolved", s.id, payload);
    s.resolutions[sample_id] = {decision, label};
    return {200, summary_locked(s)};
}

Response SessionService::resolve_deferral(const std::string& id, const std::string& sample_id, std::string_view body) {
    try {
        const auto parsed = nlohmann::json::parse(body);
        auto s = find(id);
        {
            std::lock_guard lock(s->mutex);
            const auto r = do_resolve(*s, sample_id, parsed);
            if (r.status != 200) return r;
        }
        return get_deferrals(id);
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

// ---------------------------------------------------------------- artifacts

Response SessionService::get_artifact(const std::string& kind) const {
    try {
        const auto& paths = artifact_paths();
        auto it = paths.find(kind);
        if (it == paths.end()) {
            std::string known;
            for (const auto& [k, v] : paths) known += (known.empty() ? "" : ", ") + k;
            throw NotFoundError("unknown artifact kind '" + kind + "' (known: " + known + ")");
        }
        const auto path = options_.artifacts_dir / it->second;
        if (!fs::exists(path)) throw NotFoundError("artifact " + it->second + " has not been produced");
        const auto text = read_file(path);
        ojson out;
        out["kind"] = kind;
        out["path"] = it->second;
        const bool is_json = path.extension() == ".json";
        out["media_type"] = is_json ? "application/json" : "text/csv";
        out["content"] = is_json ? ojson::parse(text) : ojson(text);
        return json_response(200, out);
    } catch (const std::exception& e) {
        return error_response(e);
    }
}

// ---------------------------------------------------------------- HTTP

struct HttpServer::Impl {
    httplib::Server server;
};

HttpServer::HttpServer(SessionService& service) : impl_(std::make_unique<Impl>()) {
    auto& srv = impl_->server;
    auto send = [](httplib::Response& res, const Response& r) {
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Headers", "Content-Type"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    srv.Post("/sessions", [&service, send](const httplib::Request& req, httplib::Response& res) {
        send(res, service.create_session(req.body));
    });
    srv.Get("/sessions", [&service, send](const httplib::Request&, httplib::Response& res) {
        send(res, service.list_sessions());
    });
    srv.Get(R"(/sessions/([^/]+))", [&service, send](const httplib::Request& req, httplib::Response& res) {
        send(res, service.get_session(req.matches[1]));
    });
    srv.Get(R"(/sessions/([^/]+)/queries)", [&service, send](const httplib::Request& req, httplib::Response& res) {
        send(res, service.get_queries(req.matches[1]));
    });
    srv.Post(R"(/sessions/([^/]+)/labels)", [&service, send](const httplib::Request& req, httplib::Response& res) {
        send(res, service.submit_labels(req.matches[1], req.body));
    });
    srv.Get(R"(/sessions/([^/]+)/deferrals)", [&service, send](const httplib::Request& req, httplib::Response& res) {
        send(res, service.get_deferrals(req.matches[1]));
    });
    srv.Post(R"(/sessions/([^/]+)/deferrals/([^/]+))",
             [&service, send](const httplib::Request& req, httplib::Response& res) {
                 send(res, service.resolve_deferral(req.matches[1], req.matches[2], req.body));
             });
    srv.Get(R"(/artifacts/([^/]+))", [&service, send](const httplib::Request& req, httplib::Response& res) {
        send(res, service.get_artifact(req.matches[1]));
    });
    srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return;
        ojson body;
        body["error"] = res.status == 404 ? "not_found" : "bad_request";
        body["message"] = "no route for " + req.method + " " + req.path;
        res.set_content(body.dump() + "\n", "application/json");
    });
}

HttpServer::~HttpServer() = default;

bool HttpServer::bind(const std::string& host, int port) {
    if (port == 0) {
        port_ = impl_->server.bind_to_any_port(host);
        return port_ > 0;
    }
    port_ = port;
    return impl_->server.bind_to_port(host, port);
}

bool HttpServer::serve() { return impl_->server.listen_after_bind(); }

bool HttpServer::listen(const std::string& host, int port) { return bind(host, port) && serve(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace upass
