#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "upass/active.hpp"
#include "upass/deferral.hpp"
#include "upass/refmodel.hpp"

namespace upass {

/// HTTP-shaped result: status code plus a JSON body.
struct Response {
    int status = 200;
    std::string body;
};

struct ServiceOptions {
    /// Pipeline output directory the sessions read their artifacts from.
    std::filesystem::path artifacts_dir;
    /// Append-only event log; defaults to <artifacts_dir>/service/events.jsonl.
    std::filesystem::path event_log;
    /// Ground truth from the feature files acts as oracle and scores accuracy.
    bool simulation = false;
    /// Fine-tuning for active-learning sessions.
    FineTuneConfig finetune;
    std::uint64_t seed = 0;
    /// Timestamp source for event records (UTC ISO-8601 by default).
    std::function<std::string()> clock;
};

/// Event kinds written to the log.
inline constexpr const char* kEventKinds[] = {"session_created", "batch_issued",    "label_submitted",
                                              "epoch_finished",  "deferral_issued", "deferral_resolved"};

/// Session store behind the HTTP API. Every mutation is appended to the
/// event log before it becomes visible; constructing a service over an
/// existing log replays it. Requests on different sessions run in parallel,
/// requests on one session are serialized.
class SessionService {
public:
    explicit SessionService(ServiceOptions options);
    ~SessionService();
    SessionService(const SessionService&) = delete;
    SessionService& operator=(const SessionService&) = delete;

    Response create_session(std::string_view body);
    Response list_sessions() const;
    Response get_session(const std::string& id) const;
    Response get_queries(const std::string& id);
    Response submit_labels(const std::string& id, std::string_view body);
    Response get_deferrals(const std::string& id) const;
    Response resolve_deferral(const std::string& id, const std::string& sample_id, std::string_view body);
    Response get_artifact(const std::string& kind) const;

    /// Canonical summary JSON of one session (no timestamps).
    std::string summary(const std::string& id) const;
    std::vector<std::string> session_ids() const;
    const ServiceOptions& options() const noexcept { return options_; }

    struct Session;

private:
    ServiceOptions options_;
    mutable std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::size_t next_id_ = 1;
    std::mutex log_mutex_;
    std::uint64_t next_seq_ = 1;
    bool replaying_ = false;

    void replay();
    void append_event(const std::string& kind, const std::string& session_id, nlohmann::ordered_json payload);
    std::shared_ptr<Session> find(const std::string& id) const;
    std::shared_ptr<Session> build_session(const std::string& id, const nlohmann::json& params);
    std::string summary_locked(const Session& s) const;
    nlohmann::ordered_json session_params(const nlohmann::json& request) const;
    Response do_submit(Session& s, const nlohmann::json& body);
    Response do_issue(Session& s);
    Response do_resolve(Session& s, const std::string& sample_id, const nlohmann::json& body);
};

/// Maps an exception to the API error body and status (400/404/409/500).
Response error_response(const std::exception& e);

/// Blocking HTTP server for the service routes. Returns when `stop` is called
/// from another thread (through the handle) or the listener fails.
class HttpServer {
public:
    explicit HttpServer(SessionService& service);
    ~HttpServer();
    /// Binds and serves; port 0 picks a free port (see port()).
    bool listen(const std::string& host, int port);
    bool bind(const std::string& host, int port);
    bool serve();
    int port() const noexcept { return port_; }
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

}  // namespace upass
