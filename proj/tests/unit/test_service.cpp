#include <doctest.h>

#include <fstream>
#include <set>
#include <thread>

#include <json.hpp>

#include "test_support.hpp"
#include "upass/io.hpp"
#include "upass/pipeline.hpp"
#include "upass/service.hpp"

// after Eigen: resolv.h defines a _res macro
#include <httplib.h>

using namespace upass;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Fixture {
    test::TempDir dir{"service"};
    FeatureTable test_table;

    Fixture() {
        auto c = benchmark_config(21);
        c.synthetic->train.num_samples = 400;
        c.synthetic->test_samples = 2000;
        c.synthetic->test_recording_length = 1000;
        c.train.epochs = 4;
        c.al_epochs = 3;
        c.output_dir = dir.path;
        run_pipeline(c, kAllStages);
        test_table = load_feature_csv(dir.path / "data" / "test_features.csv");
    }

    ServiceOptions options(bool simulation = true) const {
        ServiceOptions o;
        o.artifacts_dir = dir.path;
        o.simulation = simulation;
        o.seed = 9;
        o.clock = [] { return std::string("2024-01-01T00:00:00.000Z"); };
        return o;
    }

    std::map<std::string, int> truth() const {
        std::map<std::string, int> t;
        for (std::size_t i = 0; i < test_table.size(); ++i) t[test_table.sample_ids[i]] = *test_table.labels[i];
        return t;
    }
};

json body(const Response& r) { return json::parse(r.body); }

std::string labels_for(const json& queries, const std::map<std::string, int>& truth, bool drop_one = false) {
    json b;
    b["batch_token"] = queries["batch_token"];
    b["labels"] = json::object();
    for (const auto& item : queries["items"]) b["labels"][item["sample_id"].get<std::string>()] = truth.at(item["sample_id"]);
    if (drop_one) b["labels"].erase(b["labels"].begin());
    return b.dump();
}

}  // namespace

TEST_CASE("active-learning session lifecycle") {
    Fixture f;
    SessionService svc(f.options());
    const auto truth = f.truth();

    auto r = svc.create_session(R"({"mode":"active_learning","recording_id":"test000","batch_pct":1,"epochs":3})");
    REQUIRE(r.status == 201);
    CHECK(body(r)["session_id"] == "s0001");
    CHECK(body(r)["num_samples"] == 1000);
    CHECK(svc.create_session(R"({"mode":"active_learning","recording_id":"test000"})").status == 409);
    CHECK(svc.create_session(R"({"mode":"active_learning","recording_id":"nope"})").status == 404);
    CHECK(svc.create_session(R"({"mode":"active_learning"})").status == 400);
    CHECK(svc.create_session(R"({"mode":"other","recording_id":"test001"})").status == 400);
    CHECK(svc.create_session("{").status == 400);

    auto q1 = svc.get_queries("s0001");
    REQUIRE(q1.status == 200);
    const auto qj = body(q1);
    CHECK(qj["items"].size() == 10);
    CHECK(qj["batch_token"] == "test000/e0");
    for (const auto& item : qj["items"]) {
        CHECK(item["probs"].size() == 5);
        CHECK(item["coords"].size() == 2);
    }
    CHECK(svc.get_queries("s0001").body == q1.body);

    auto missing = svc.submit_labels("s0001", labels_for(qj, truth, true));
    CHECK(missing.status == 400);
    CHECK(body(missing)["error"] == "bad_request");
    std::string dropped = qj["items"][0]["sample_id"];
    for (const auto& item : qj["items"]) dropped = std::min(dropped, item["sample_id"].get<std::string>());
    CHECK(body(missing)["message"].get<std::string>().find(dropped) != std::string::npos);
    json stale = {{"batch_token", "test000/e7"}, {"labels", json::object()}};
    CHECK(svc.submit_labels("s0001", stale.dump()).status == 409);

    const auto good = labels_for(qj, truth);
    auto ok = svc.submit_labels("s0001", good);
    REQUIRE(ok.status == 200);
    CHECK(body(ok)["epoch"] == 1);
    CHECK(body(ok)["labeled"] == 10);
    auto replayed = svc.submit_labels("s0001", good);
    CHECK(replayed.status == 409);
    CHECK(body(replayed)["error"] == "conflict");

    const auto q2 = body(svc.get_queries("s0001"));
    CHECK(q2["batch_token"] == "test000/e1");
    for (const auto& item : q2["items"]) CHECK(qj["items"].dump().find(item["sample_id"].get<std::string>()) == std::string::npos);

    for (int e = 1; e < 3; ++e) {
        const auto q = body(svc.get_queries("s0001"));
        json sim = {{"batch_token", q["batch_token"]}, {"oracle", "simulated"}};
        REQUIRE(svc.submit_labels("s0001", sim.dump()).status == 200);
    }
    const auto done = body(svc.get_session("s0001"));
    CHECK(done["status"] == "finished");
    CHECK(done["labeled"] == 30);
    CHECK(done["accuracy"].is_number());
    CHECK(svc.get_queries("s0001").status == 409);
    CHECK(svc.get_session("s0404").status == 404);

    // a finished session frees its recording
    CHECK(svc.create_session(R"({"mode":"active_learning","recording_id":"test000"})").status == 201);
}

TEST_CASE("simulated oracle needs simulation mode") {
    Fixture f;
    SessionService svc(f.options(false));
    REQUIRE(svc.create_session(R"({"recording_id":"test001"})").status == 201);
    const auto q = body(svc.get_queries("s0001"));
    json sim = {{"batch_token", q["batch_token"]}, {"oracle", "simulated"}};
    CHECK(svc.submit_labels("s0001", sim.dump()).status == 400);
    CHECK(body(svc.get_session("s0001"))["accuracy"].is_null());
}

TEST_CASE("deferral review session") {
    Fixture f;
    SessionService svc(f.options());
    auto r = svc.create_session(R"({"mode":"deferral_review","z":0.2})");
    REQUIRE(r.status == 201);
    const auto id = body(r)["session_id"].get<std::string>();
    CHECK(svc.create_session(R"({"mode":"deferral_review","z":0.3})").status == 409);
    CHECK(svc.create_session(R"({"mode":"deferral_review","z":1.5})").status == 400);

    auto d = svc.get_deferrals(id);
    REQUIRE(d.status == 200);
    auto dj = body(d);
    CHECK(dj["items"].size() == 400);
    const auto scores = parse_scores_csv(read_file(f.dir.path / "defer" / "scores.csv"));
    const auto expected = most_uncertain(scores, 0.2);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(dj["items"][i]["sample_id"] == expected[i].sample_id);

    const auto truth = f.truth();
    std::string wrong;
    for (const auto& item : dj["items"])
        if (item["prediction"] != truth.at(item["sample_id"])) {
            wrong = item["sample_id"];
            break;
        }
    REQUIRE(!wrong.empty());
    const auto before = body(svc.get_session(id));
    json fix = {{"decision", "relabel"}, {"label", truth.at(wrong)}};
    auto res = svc.resolve_deferral(id, wrong, fix.dump());
    REQUIRE(res.status == 200);
    CHECK(body(res)["items"].size() == 399);
    const auto after = body(svc.get_session(id));
    CHECK(after["corrected_accuracy"].get<double>() > before["corrected_accuracy"].get<double>());
    CHECK(after["accuracy"] == before["accuracy"]);

    CHECK(svc.resolve_deferral(id, wrong, fix.dump()).status == 409);
    CHECK(svc.resolve_deferral(id, "t-missing", R"({"decision":"skip"})").status == 404);
    const auto next = dj["items"][1]["sample_id"].get<std::string>() == wrong ? dj["items"][0]["sample_id"]
                                                                               : dj["items"][1]["sample_id"];
    CHECK(svc.resolve_deferral(id, next, R"({"decision":"maybe"})").status == 400);
    CHECK(svc.resolve_deferral(id, next, R"({"decision":"relabel","label":99})").status == 400);
    CHECK(svc.resolve_deferral(id, next, R"({"decision":"confirm_model"})").status == 200);
}

TEST_CASE("deferral: full expert review matches recomputation from artifacts") {
    Fixture f;
    SessionService svc(f.options());
    const auto truth = f.truth();
    const auto id = body(svc.create_session(R"({"mode":"deferral_review","recording_id":"test001","z":0.2})"))["session_id"]
                        .get<std::string>();
    const auto items = body(svc.get_deferrals(id))["items"];
    REQUIRE(items.size() == 200);

    // oracle: predictions file, queue membership, ground truth
    std::map<std::string, int> pred;
    {
        const auto text = read_file(f.dir.path / "defer" / "predictions.csv");
        std::size_t pos = text.find('\n') + 1;
        while (pos < text.size()) {
            const auto end = text.find('\n', pos);
            const auto fields = split_csv(std::string_view(text).substr(pos, end - pos));
            if (fields[1] == "test001") pred[fields[0]] = std::stoi(fields[3]);
            pos = end + 1;
        }
    }
    REQUIRE(pred.size() == 1000);
    std::set<std::string> queued;
    for (const auto& item : items) queued.insert(item["sample_id"].get<std::string>());
    std::size_t right_outside = 0, right_all = 0;
    for (const auto& [sid, p] : pred) {
        right_all += p == truth.at(sid);
        if (!queued.count(sid)) right_outside += p == truth.at(sid);
    }

    bool confirmed_correct = false;
    for (const auto& item : items) {
        const auto sid = item["sample_id"].get<std::string>();
        const auto before = body(svc.get_session(id))["corrected_accuracy"];
        if (!confirmed_correct && pred.at(sid) == truth.at(sid)) {
            REQUIRE(svc.resolve_deferral(id, sid, R"({"decision":"confirm_model"})").status == 200);
            CHECK(body(svc.get_session(id))["corrected_accuracy"] == before);
            confirmed_correct = true;
            continue;
        }
        json fix = {{"decision", "relabel"}, {"label", truth.at(sid)}};
        REQUIRE(svc.resolve_deferral(id, sid, fix.dump()).status == 200);
    }
    CHECK(confirmed_correct);
    const auto done = body(svc.get_session(id));
    CHECK(done["status"] == "finished");
    CHECK(done["remaining"] == 0);
    CHECK(done["accuracy"].get<double>() == doctest::Approx(right_all / 1000.0).epsilon(1e-12));
    CHECK(done["corrected_accuracy"].get<double>() ==
          doctest::Approx((right_outside + queued.size()) / 1000.0).epsilon(1e-12));
}

TEST_CASE("artifacts route") {
    Fixture f;
    SessionService svc(f.options());
    auto m = svc.get_artifact("metrics");
    REQUIRE(m.status == 200);
    CHECK(body(m)["media_type"] == "text/csv");
    CHECK(body(m)["content"].get<std::string>().starts_with("sample_id,"));
    auto s = svc.get_artifact("summary");
    REQUIRE(s.status == 200);
    CHECK(body(s)["content"]["stages"].size() == 4);
    CHECK(svc.get_artifact("secrets").status == 404);
}

TEST_CASE("event log replay reproduces summaries") {
    Fixture f;
    std::vector<std::string> before;
    {
        SessionService svc(f.options());
        REQUIRE(svc.create_session(R"({"recording_id":"test000","epochs":2})").status == 201);
        REQUIRE(svc.create_session(R"({"mode":"deferral_review","recording_id":"test001","z":0.1})").status == 201);
        const auto truth = f.truth();
        const auto q = body(svc.get_queries("s0001"));
        REQUIRE(svc.submit_labels("s0001", labels_for(q, truth)).status == 200);
        svc.get_queries("s0001");
        const auto d = body(svc.get_deferrals("s0002"));
        REQUIRE(svc.resolve_deferral("s0002", d["items"][0]["sample_id"], R"({"decision":"skip"})").status == 200);
        for (const auto& id : svc.session_ids()) before.push_back(svc.summary(id));
    }
    const auto log_path = f.dir.path / "service" / "events.jsonl";
    const auto log_text = read_file(log_path);
    CHECK(log_text.find("\"kind\":\"batch_issued\"") != std::string::npos);

    auto replayed = [&] {
        SessionService svc(f.options());
        std::vector<std::string> out;
        for (const auto& id : svc.session_ids()) out.push_back(svc.summary(id));
        return out;
    };
    CHECK(replayed() == before);

    // an interrupted append leaves a torn last line, which is dropped
    {
        std::ofstream out(log_path, std::ios::app);
        out << R"({"seq":99,"kind":"label_sub)";
    }
    CHECK(replayed() == before);
    CHECK(read_file(log_path) == log_text);

    SessionService svc(f.options());
    CHECK(svc.create_session(R"({"recording_id":"test000"})").status == 409);
    CHECK(body(svc.create_session(R"({"recording_id":"test001"})"))["session_id"] == "s0003");
}

TEST_CASE("http routes") {
    Fixture f;
    SessionService svc(f.options());
    HttpServer server(svc);
    REQUIRE(server.bind("127.0.0.1", 0));
    std::thread th([&] { server.serve(); });
    httplib::Client cli("127.0.0.1", server.port());
    for (int i = 0; i < 100 && !cli.Get("/sessions"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));

    auto created = cli.Post("/sessions", R"({"recording_id":"test000"})", "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    CHECK(created->get_header_value("Content-Type") == "application/json");
    auto q = cli.Get("/sessions/s0001/queries");
    REQUIRE(q);
    CHECK(q->status == 200);
    CHECK(json::parse(q->body)["items"].size() == 10);
    auto bad = cli.Post("/sessions/s0001/labels", R"({"batch_token":"x","labels":{}})", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 409);
    auto art = cli.Get("/artifacts/scores");
    REQUIRE(art);
    CHECK(art->status == 200);
    auto none = cli.Get("/nowhere");
    REQUIRE(none);
    CHECK(none->status == 404);
    CHECK(json::parse(none->body)["error"] == "not_found");

    server.stop();
    th.join();
}
