#include <doctest.h>

#include <algorithm>
#include <set>

#include "test_support.hpp"
#include "upass/curation.hpp"
#include "upass/error.hpp"
#include "upass/refmodel.hpp"

using namespace upass;

namespace {

std::vector<SampleUncertainty> with_v_al(const std::vector<double>& v) {
    std::vector<SampleUncertainty> m;
    for (std::size_t i = 0; i < v.size(); ++i) m.push_back({"s" + std::to_string(i + 1), 0.5, v[i], 0.0, 0, 0, Stratum::other});
    return m;
}

}  // namespace

TEST_CASE("compare_configs: identical logs order by config_id") {
    Rng rng(4);
    const auto log = test::random_log(rng, 30, 3, 3);
    std::vector<std::pair<std::string, DynamicsLog>> in = {{"zeta", log}, {"alpha", log}};
    const auto reports = compare_configs(in);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].config_id == "alpha");
    CHECK(reports[0].mean_v_al == reports[1].mean_v_al);
    CHECK(reports[0].mean_confidence == reports[1].mean_confidence);
    CHECK(reports[0].num_samples == 30);

    double sum = 0.0;
    for (const auto& m : sample_metrics(log)) sum += m.v_al;
    CHECK(std::abs(reports[0].mean_v_al - sum / 30.0) < 1e-12);
}

TEST_CASE("compare_configs: unlabeled or missing input rejected") {
    Rng rng(4);
    std::vector<std::pair<std::string, DynamicsLog>> in = {{"u", test::random_log(rng, 3, 2, 2, false)}};
    CHECK_THROWS_AS(compare_configs(in), ValidationError);
    CHECK_THROWS_AS(compare_configs({}), ValidationError);
}

TEST_CASE("compare_configs: an informative feature lowers mean v_al") {
    int ordered = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SyntheticSpec spec;
        spec.num_classes = 2;
        spec.dims = 1;
        spec.noise_dims = 2;
        spec.separation = 3.0;
        spec.num_samples = 300;
        spec.seed = seed;
        const auto data = generate_synthetic(spec).table();
        const std::vector<std::size_t> informative = {0, 1, 2};
        const std::vector<std::size_t> noise = {1, 2};
        TrainConfig cfg;
        cfg.epochs = 10;
        std::vector<std::pair<std::string, DynamicsLog>> in = {
            {"informative", train_logged(subset_columns(data, informative), cfg, seed).log},
            {"noise", train_logged(subset_columns(data, noise), cfg, seed).log}};
        const auto reports = compare_configs(in);
        if (reports.front().config_id == "informative") ++ordered;
    }
    CHECK(ordered == 20);
}

TEST_CASE("select_data: hand examples") {
    const auto m = with_v_al({.01, .24, .02, .03, .04});
    const auto man = select_data(m, 20.0);
    CHECK(man.dropped == std::vector<std::string>{"s2"});
    CHECK(man.kept == std::vector<std::string>{"s1", "s3", "s4", "s5"});

    const auto none = select_data(m, 0.0);
    CHECK(none.dropped.empty());
    CHECK(none.kept.size() == 5);

    std::vector<double> big(44000);
    Rng rng(1);
    for (auto& v : big) v = 0.25 * rng.uniform();
    CHECK(select_data(with_v_al(big), 1.0).dropped.size() == 440);
}

TEST_CASE("select_data: ties broken by sample_id and bad inputs rejected") {
    const auto m = with_v_al({.1, .2, .2, .2});
    CHECK(select_data(m, 50.0).dropped == std::vector<std::string>{"s2", "s3"});
    CHECK_THROWS_AS(select_data({}, 1.0), ValidationError);
    CHECK_THROWS_AS(select_data(m, 100.0), ValidationError);
    CHECK_THROWS_AS(select_data(m, -1.0), ValidationError);
}

TEST_CASE("select_data: entropy ranking") {
    auto m = with_v_al({.3, .1, .2});
    m[0].v_al_entropy = 0.1;
    m[1].v_al_entropy = 0.9;
    m[2].v_al_entropy = 0.5;
    CHECK(select_data(m, 10.0, RankingMetric::v_al_entropy).dropped == std::vector<std::string>{"s2"});
    CHECK(select_data(m, 10.0, RankingMetric::v_al).dropped == std::vector<std::string>{"s1"});
}

TEST_CASE("select_data: nested, idempotent, partitioning") {
    Rng rng(8);
    for (int t = 0; t < 30; ++t) {
        std::vector<double> v(1 + rng.below(200));
        for (auto& x : v) x = std::round(25.0 * rng.uniform()) / 100.0;  // coarse grid forces ties
        const auto m = with_v_al(v);
        const double p1 = 99.0 * rng.uniform();
        const double p2 = p1 + (99.0 - p1) * rng.uniform();
        const auto a = select_data(m, p1);
        const auto b = select_data(m, p2);
        const std::set<std::string> ka(a.kept.begin(), a.kept.end());
        for (const auto& id : b.kept) CHECK(ka.count(id) == 1);

        std::set<std::string> all(a.kept.begin(), a.kept.end());
        for (const auto& id : a.dropped) CHECK(all.insert(id).second);
        CHECK(all.size() == m.size());
        CHECK(a.dropped.size() == static_cast<std::size_t>(std::ceil(m.size() * p1 / 100.0 - 1e-9)));

        std::vector<SampleUncertainty> kept_m;
        for (const auto& s : m)
            if (ka.count(s.sample_id)) kept_m.push_back(s);
        const auto again = select_data(kept_m, 0.0);
        CHECK(again.kept == a.kept);
        CHECK(again.dropped.empty());
    }
}

TEST_CASE("manifest JSON round-trips exactly") {
    Rng rng(5);
    const auto log = test::random_log(rng, 20, 3, 3);
    const auto man = select_data(sample_metrics(log), 15.0, RankingMetric::v_al, log_digest(log));
    CHECK(man.source_digest.size() == 64);
    const auto json = manifest_to_json(man);
    CHECK(json.find("\"ranking_metric\": \"v_al\"") != std::string::npos);
    const auto back = parse_manifest_json(json);
    CHECK(back.kept == man.kept);
    CHECK(back.dropped == man.dropped);
    CHECK(back.drop_pct == man.drop_pct);
    CHECK(manifest_to_json(back) == json);
    CHECK_THROWS_AS(parse_manifest_json(R"({"drop_pct":1,"ranking_metric":"v_al","source_digest":"",
        "kept":["a"],"dropped":["a"]})"),
                    ValidationError);
}

TEST_CASE("log_digest tracks content") {
    Rng rng(6);
    auto log = test::random_log(rng, 4, 2, 2);
    const auto d = log_digest(log);
    CHECK(d == log_digest(log));
    log.labels[0] = 1 - *log.labels[0];
    CHECK(d != log_digest(log));
}

TEST_CASE("flipped samples carry higher mean v_al") {
    int higher = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SyntheticSpec spec;
        spec.overlap = 0.3;
        spec.noise_rate = 0.1;
        spec.noise_mode = NoiseMode::confusion;
        spec.num_samples = 1000;
        spec.seed = seed;
        const auto data = generate_synthetic(spec);
        TrainConfig cfg;
        const auto m = sample_metrics(train_logged(data.table(), cfg, seed).log);
        double flipped = 0, clean = 0;
        for (std::size_t i = 0; i < m.size(); ++i) (data.flip_mask[i] ? flipped : clean) += m[i].v_al;
        if (flipped / 100.0 > clean / 900.0) ++higher;
    }
    CHECK(higher == 20);
}
