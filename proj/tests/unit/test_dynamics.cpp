#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_support.hpp"
#include "upass/dynamics.hpp"
#include "upass/error.hpp"

using namespace upass;

namespace {

const char* kThreeByTwo =
    R"({"sample_id":"a","recording_id":"r1","epoch":0,"probs":[0.2,0.3,0.5],"label":2}
{"sample_id":"a","recording_id":"r1","epoch":1,"probs":[0.1,0.2,0.7],"label":2}
{"sample_id":"b","recording_id":"r1","epoch":1,"probs":[0.6,0.3,0.1],"label":0}
{"sample_id":"b","recording_id":"r1","epoch":0,"probs":[0.4,0.4,0.2],"label":0}
{"sample_id":"c","recording_id":"r2","epoch":0,"probs":[0.3,0.3,0.4],"label":null}
{"sample_id":"c","recording_id":"r2","epoch":1,"probs":[0.3,0.4,0.3],"label":null}
)";

std::string parse_error_message(const std::string& text) {
    try {
        parse_log_jsonl(text);
    } catch (const ParseError& e) {
        return std::string(e.what()) + "#line=" + std::to_string(e.line());
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "no error";
}

}  // namespace

TEST_CASE("ingest: well-formed JSONL") {
    const auto log = parse_log_jsonl(kThreeByTwo);
    CHECK(log.size() == 3);
    CHECK(log.num_epochs == 2);
    CHECK(log.num_classes == 3);
    CHECK(log.sample_ids == std::vector<std::string>{"a", "b", "c"});
    CHECK(log.prob(1, 0)[0] == doctest::Approx(0.4));
    CHECK(log.prob(1, 1)[0] == doctest::Approx(0.6));
    CHECK_FALSE(log.labels[2].has_value());
    CHECK(log.labels[0] == 2);
    CHECK_FALSE(log.fully_labeled());
}

TEST_CASE("ingest: probability sum error names the line") {
    const std::string text =
        R"({"sample_id":"a","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":0}
{"sample_id":"a","recording_id":"r","epoch":1,"probs":[0.5,0.3],"label":0}
)";
    const auto msg = parse_error_message(text);
    CHECK(msg.find("probability sum") != std::string::npos);
    CHECK(msg.find("#line=2") != std::string::npos);
}

TEST_CASE("ingest: missing epoch") {
    const std::string text =
        R"({"sample_id":"a","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":0}
{"sample_id":"a","recording_id":"r","epoch":1,"probs":[0.5,0.5],"label":0}
{"sample_id":"b","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":0}
)";
    CHECK(parse_error_message(text).find("missing epoch") != std::string::npos);
}

TEST_CASE("ingest: other malformed inputs") {
    CHECK(parse_error_message("{not json}\n").find("#line=1") != std::string::npos);
    CHECK(parse_error_message(R"({"sample_id":"a","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":0}
{"sample_id":"b","recording_id":"r","epoch":0,"probs":[0.2,0.3,0.5],"label":0}
)").find("inconsistent number of classes") != std::string::npos);
    CHECK(parse_error_message(R"({"sample_id":"a","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":0}
{"sample_id":"a","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":0}
)").find("duplicate epoch") != std::string::npos);
    CHECK(parse_error_message(R"({"sample_id":"a","recording_id":"r","epoch":0,"probs":[0.5,0.5],"label":5}
)").find("label out of range") != std::string::npos);
    CHECK(parse_error_message(R"({"sample_id":"a","recording_id":"r","epoch":0,"probs":[1.5,-0.5],"label":0}
)").find("out of [0,1]") != std::string::npos);
}

TEST_CASE("ingest: CSV matches JSONL and both serializations round-trip") {
    const auto log = parse_log_jsonl(kThreeByTwo);
    const auto csv = log_to_csv(log);
    CHECK(csv.rfind("sample_id,recording_id,epoch,label,p0,p1,p2\n", 0) == 0);
    const auto from_csv = parse_log_csv(csv);
    CHECK(from_csv.probs == log.probs);
    CHECK(from_csv.labels == log.labels);
    CHECK(log_to_jsonl(parse_log_jsonl(log_to_jsonl(log))) == log_to_jsonl(log));
}

TEST_CASE("ingest: CSV errors") {
    CHECK_THROWS_AS(parse_log_csv("id,recording_id,epoch,label,p0,p1\n"), ParseError);
    try {
        parse_log_csv("sample_id,recording_id,epoch,label,p0,p1\na,r,0,0,0.5\n");
        FAIL("expected error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("sample_metrics: hand values") {
    const auto m = sample_metrics(test::binary_log({{1.0, 1.0, 1.0}}));
    CHECK(m[0].confidence == 1.0);
    CHECK(m[0].v_ep == 0.0);
    CHECK(m[0].v_al == 0.0);

    const auto half = sample_metrics(test::binary_log({{0.5, 0.5}}));
    CHECK(half[0].confidence == 0.5);
    CHECK(half[0].v_ep == 0.0);
    CHECK(half[0].v_al == 0.25);

    // c = 0.5; deviations (-.3,-.1,.1,.3) -> v_ep = (.09+.01+.01+.09)/4 = .05;
    // p(1-p) = (.16,.24,.24,.16) -> v_al = .20
    const auto ramp = sample_metrics(test::binary_log({{0.2, 0.4, 0.6, 0.8}}));
    CHECK(ramp[0].confidence == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(ramp[0].v_ep == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(ramp[0].v_al == doctest::Approx(0.20).epsilon(1e-12));
    CHECK(std::abs(ramp[0].v_ep + ramp[0].v_al - 0.25) < 1e-12);
}

TEST_CASE("sample_metrics: requires labels") {
    auto log = test::binary_log({{0.5, 0.5}});
    log.labels[0].reset();
    CHECK_THROWS_AS(sample_metrics(log), ValidationError);
}

TEST_CASE("sample_metrics_entropy: hand values") {
    auto constant = test::binary_log({{0.7, 0.7, 0.7}});
    auto e = sample_metrics_entropy(constant);
    const double h = -(0.7 * std::log(0.7) + 0.3 * std::log(0.3));
    CHECK(e[0].v_al_entropy == doctest::Approx(h).epsilon(1e-12));
    CHECK(e[0].v_al_entropy == doctest::Approx(0.6109).epsilon(1e-4));
    CHECK(std::abs(e[0].v_ep_entropy) < 1e-12);

    e = sample_metrics_entropy(test::binary_log({{1.0, 0.0}}));
    CHECK(e[0].v_al_entropy == 0.0);
    CHECK(e[0].v_ep_entropy == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    e = sample_metrics_entropy(test::binary_log({{1.0, 1.0}}));
    CHECK(e[0].v_al_entropy == 0.0);
    CHECK(e[0].v_ep_entropy == 0.0);

    // label-free
    auto unlabeled = test::binary_log({{0.3, 0.9}});
    unlabeled.labels[0].reset();
    CHECK_NOTHROW(sample_metrics_entropy(unlabeled));
}

TEST_CASE("sample_metrics: decomposition identities on random logs") {
    Rng rng(7);
    for (int trial = 0; trial < 300; ++trial) {
        const auto log = test::random_log(rng, 5, 1 + rng.below(8), 2 + rng.below(5));
        for (const auto& m : sample_metrics(log)) {
            CHECK(std::abs(m.v_ep + m.v_al - m.confidence * (1.0 - m.confidence)) < 1e-9);
            CHECK(m.v_ep >= 0.0);
            CHECK(m.v_ep <= 0.25);
            CHECK(m.v_al >= 0.0);
            CHECK(m.v_al <= 0.25);
            CHECK(m.v_ep_entropy >= -1e-12);
            CHECK(m.v_al_entropy + m.v_ep_entropy <= std::log(static_cast<double>(log.num_classes)) + 1e-9);
        }
    }
}

TEST_CASE("sample_metrics: permutation equivariant and deterministic") {
    Rng rng(11);
    const auto log = test::random_log(rng, 40, 4, 3);
    std::vector<std::size_t> perm(log.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    const auto base = sample_metrics(log);
    const auto shuffled = sample_metrics(subset_log(log, perm));
    for (std::size_t r = 0; r < perm.size(); ++r) {
        CHECK(shuffled[r].sample_id == base[perm[r]].sample_id);
        CHECK(shuffled[r].v_al == base[perm[r]].v_al);
        CHECK(shuffled[r].v_ep == base[perm[r]].v_ep);
        CHECK(shuffled[r].v_ep_entropy == base[perm[r]].v_ep_entropy);
    }
    CHECK(metrics_to_csv(sample_metrics(log)) == metrics_to_csv(base));
}

TEST_CASE("metrics CSV round-trips") {
    Rng rng(3);
    auto m = sample_metrics(test::random_log(rng, 12, 3, 4));
    apply_strata(m, AmbiguityKind::aleatoric, 10, 10);
    const auto csv = metrics_to_csv(m);
    CHECK(csv.rfind("sample_id,c,v_al,v_ep,v_al_entropy,v_ep_entropy,stratum\n", 0) == 0);
    CHECK(metrics_to_csv(parse_metrics_csv(csv)) == csv);
}

namespace {

std::vector<SampleUncertainty> synthetic_metrics(std::size_t n, Rng& rng) {
    std::vector<SampleUncertainty> m(n);
    for (std::size_t i = 0; i < n; ++i) {
        m[i].sample_id = "x" + std::to_string(10000 + i);
        m[i].confidence = rng.uniform();
        m[i].v_al = 0.25 * rng.uniform();
        m[i].v_ep = 0.25 * rng.uniform();
    }
    return m;
}

}  // namespace

TEST_CASE("stratify: 1% of 1000 are ambiguous") {
    Rng rng(5);
    const auto m = synthetic_metrics(1000, rng);
    const auto s = stratify(m, AmbiguityKind::aleatoric, 1.0, 1.0);
    CHECK(std::count(s.begin(), s.end(), Stratum::data_ambiguous) == 10);
    CHECK(std::count(s.begin(), s.end(), Stratum::easy) == 10);
    CHECK(std::count(s.begin(), s.end(), Stratum::hard) == 10);
    CHECK(std::count(s.begin(), s.end(), Stratum::other) == 970);
    const auto e = stratify(m, AmbiguityKind::epistemic, 1.0, 1.0);
    CHECK(std::count(e.begin(), e.end(), Stratum::model_ambiguous) == 10);
}

TEST_CASE("stratify: identical metrics fall back to sample_id order") {
    std::vector<SampleUncertainty> m;
    for (const char* id : {"e", "b", "d", "a", "c", "f"}) m.push_back({id, 0.5, 0.1, 0.1, 0, 0, Stratum::other});
    const auto s = stratify(m, AmbiguityKind::aleatoric, 10, 10);
    // ceil(0.6) = 1 each: a ambiguous; then b easy; then c hard.
    CHECK(s[3] == Stratum::data_ambiguous);
    CHECK(s[1] == Stratum::easy);
    CHECK(s[4] == Stratum::hard);
    CHECK(s[0] == Stratum::other);
    CHECK(s[2] == Stratum::other);
    CHECK(s[5] == Stratum::other);
}

TEST_CASE("stratify: five hand-built samples against a brute-force sort") {
    std::vector<SampleUncertainty> m = {
        {"s1", 0.90, 0.05, 0.01, 0, 0, Stratum::other},
        {"s2", 0.20, 0.10, 0.02, 0, 0, Stratum::other},
        {"s3", 0.50, 0.24, 0.03, 0, 0, Stratum::other},
        {"s4", 0.60, 0.15, 0.04, 0, 0, Stratum::other},
        {"s5", 0.95, 0.02, 0.05, 0, 0, Stratum::other},
    };
    const auto s = stratify(m, AmbiguityKind::aleatoric, 20, 20);
    // brute force: argmax v_al = s3; remaining c - v_al: s1 .85, s2 .10, s4 .45, s5 .93 -> s5 easy;
    // remaining -c - v_al: s1 -.95, s2 -.30, s4 -.75 -> s2 hard.
    CHECK(s[2] == Stratum::data_ambiguous);
    CHECK(s[4] == Stratum::easy);
    CHECK(s[1] == Stratum::hard);
    CHECK(s[0] == Stratum::other);
    CHECK(s[3] == Stratum::other);
}

TEST_CASE("stratify: disjoint strata with exact quota sizes; bad quotas rejected") {
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        const auto n = 5 + rng.below(300);
        const auto m = synthetic_metrics(n, rng);
        const double top = 0.5 + 20.0 * rng.uniform();
        const double eh = 0.5 + 20.0 * rng.uniform();
        const auto a = static_cast<long>(std::ceil(n * top / 100.0 - 1e-9));
        const auto b = static_cast<long>(std::ceil(n * eh / 100.0 - 1e-9));
        if (a + 2 * b > static_cast<long>(n)) {
            CHECK_THROWS_AS(stratify(m, AmbiguityKind::epistemic, top, eh), ValidationError);
            continue;
        }
        const auto s = stratify(m, AmbiguityKind::epistemic, top, eh);
        CHECK(std::count(s.begin(), s.end(), Stratum::model_ambiguous) == a);
        CHECK(std::count(s.begin(), s.end(), Stratum::easy) == b);
        CHECK(std::count(s.begin(), s.end(), Stratum::hard) == b);
        CHECK(std::count(s.begin(), s.end(), Stratum::data_ambiguous) == 0);
    }
    Rng r2(1);
    CHECK_THROWS_AS(stratify(synthetic_metrics(10, r2), AmbiguityKind::aleatoric, 0.0, 1.0), ValidationError);
    CHECK_THROWS_AS(stratify(synthetic_metrics(10, r2), AmbiguityKind::aleatoric, 50.0, 30.0), ValidationError);
}

TEST_CASE("split_by_recording keeps first-appearance order") {
    Rng rng(2);
    const auto log = test::random_log(rng, 7, 2, 2);
    const auto parts = split_by_recording(log);
    REQUIRE(parts.size() == 3);
    CHECK(parts[0].first == "r0");
    CHECK(parts[0].second.sample_ids == std::vector<std::string>{"s0", "s3", "s6"});
}
