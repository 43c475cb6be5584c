// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "upass/active.hpp"
#include "upass/curation.hpp"
#include "upass/deferral.hpp"
#include "upass/dynamics.hpp"
#include "upass/io.hpp"
#include "upass/neighbors.hpp"
#include "upass/pipeline.hpp"
#include "upass/refmodel.hpp"
#include "upass/service.hpp"
#include "upass/stats.hpp"

using namespace upass;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 20;

struct Outcome {
    bool pass = true;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double entropy_oracle(const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

// ------------------------------------------------------------ 1, 2

DynamicsLog random_shape_log(Rng& rng) {
    const auto samples = 1 + rng.below(8);
    const auto epochs = 2 + rng.below(11);
    const auto classes = 2 + rng.below(5);
    return test::random_log(rng, samples, epochs, classes);
}

Outcome decomposition_identity() {
    Rng rng(101);
    double worst = 0.0;
    std::size_t bound_violations = 0, checked = 0;
    for (int t = 0; t < 10000; ++t) {
        const auto log = random_shape_log(rng);
        for (const auto& m : sample_metrics(log)) {
            ++checked;
            worst = std::max(worst, std::abs(m.v_al + m.v_ep - m.confidence * (1.0 - m.confidence)));
            if (!(m.v_ep >= 0.0 && m.v_ep <= 0.25 && m.v_al >= 0.0 && m.v_al <= 0.25)) ++bound_violations;
        }
    }
    return {worst <= 1e-9 && bound_violations == 0,
            std::to_string(checked) + " samples, max |v_al+v_ep-c(1-c)| = " + fmt("%.3g", worst) +
                ", bound violations " + std::to_string(bound_violations)};
}

Outcome entropy_decomposition() {
    Rng rng(202);
    double worst = 0.0, min_ep = 0.0;
    std::size_t checked = 0;
    for (int t = 0; t < 10000; ++t) {
        const auto log = random_shape_log(rng);
        const auto m = sample_metrics_entropy(log);
        for (std::size_t i = 0; i < log.size(); ++i) {
            std::vector<double> mean(log.num_classes, 0.0);
            for (std::size_t e = 0; e < log.num_epochs; ++e) {
                const auto p = log.prob(i, e);
                for (std::size_t k = 0; k < log.num_classes; ++k) mean[k] += p[k] / static_cast<double>(log.num_epochs);
            }
            worst = std::max(worst, std::abs(m[i].v_al_entropy + m[i].v_ep_entropy - entropy_oracle(mean)));
            min_ep = std::min(min_ep, m[i].v_ep_entropy);
            ++checked;
        }
    }
    return {worst <= 1e-9 && min_ep >= -1e-12,
            std::to_string(checked) + " samples, max |sum-H(mean)| = " + fmt("%.3g", worst) +
                ", min v_ep_entropy = " + fmt("%.3g", min_ep)};
}

// ------------------------------------------------------------ 3

EmbeddingSet line_points(const std::vector<double>& xs) {
    EmbeddingSet s;
    s.vectors.resize(static_cast<Eigen::Index>(xs.size()), 1);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        s.sample_ids.push_back("t" + std::to_string(i));
        s.vectors(static_cast<Eigen::Index>(i), 0) = xs[i];
    }
    return s;
}

Outcome hand_values() {
    std::vector<std::string> failed;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok) failed.push_back(what);
    };
    auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

    {
        const auto m = sample_metrics(test::binary_log({{0.2, 0.4, 0.6, 0.8}}))[0];
        check(near(m.confidence, 0.5, 1e-12) && near(m.v_ep, 0.05, 1e-12) && near(m.v_al, 0.20, 1e-12),
              "4-epoch variance example");
    }
    {
        DynamicsLog log;
        log.num_classes = 2;
        log.num_epochs = 3;
        log.sample_ids = {"a"};
        log.recording_ids = {"r"};
        log.labels = {0};
        log.probs = {0.7, 0.3, 0.7, 0.3, 0.7, 0.3};
        const auto m = sample_metrics_entropy(log)[0];
        check(near(m.v_ep_entropy, 0.0, 1e-12) && near(m.v_al_entropy, 0.6109, 5e-5), "constant [0.7,0.3]");
        log.num_epochs = 2;
        log.probs = {1.0, 0.0, 0.0, 1.0};
        const auto f = sample_metrics_entropy(log)[0];
        check(near(f.v_al_entropy, 0.0, 1e-12) && near(f.v_ep_entropy, std::log(2.0), 1e-12) &&
                  near(f.v_ep_entropy, 0.6931, 5e-5),
              "flip dynamics ln 2");
    }
    {
        Rng rng(5);
        const auto log = test::random_log(rng, 1000, 3, 3);
        auto m = sample_metrics(log);
        const auto strata = stratify(m, AmbiguityKind::aleatoric, 1.0, 1.0);
        check(std::count(strata.begin(), strata.end(), Stratum::data_ambiguous) == 10, "1% of 1000 tagged");
        std::vector<SampleUncertainty> five(5);
        const double v[] = {0.01, 0.05, 0.2, 0.03, 0.1};
        for (int i = 0; i < 5; ++i) five[i] = {"s" + std::to_string(i + 1), 0.5, v[i], 0.0, 0, 0, Stratum::other};
        const auto s5 = stratify(five, AmbiguityKind::aleatoric, 20.0, 20.0);
        check(s5[2] == Stratum::data_ambiguous && std::count(s5.begin(), s5.end(), Stratum::data_ambiguous) == 1,
              "5-sample ambiguous tag");
    }
    {
        std::vector<SampleUncertainty> m;
        const double v[] = {0.01, 0.24, 0.02, 0.03, 0.04};
        for (int i = 0; i < 5; ++i) m.push_back({"s" + std::to_string(i + 1), 0.5, v[i], 0.0, 0, 0, Stratum::other});
        const auto man = select_data(m, 20.0);
        check(man.dropped == std::vector<std::string>{"s2"}, "drop_pct 20 of 5");
        check(percent_count(44000, 1.0) == 440, "1% of 44000");
    }
    {
        auto train = line_points({1.0, 3.0});
        NeighborAttachments att;
        att.confidence = std::vector<double>{0.9, 0.5};
        const auto idx = NeighborIndex::build(train, att);
        Eigen::MatrixXd q = Eigen::MatrixXd::Zero(1, 1);
        const std::vector<std::string> ids = {"q"};
        ScoreInputs in;
        in.sample_ids = ids;
        in.embeddings = &q;
        in.index = &idx;
        in.n = 2;
        in.epsilon = 0.0;
        const auto s = score(DeferralMetric::wknn_confidence, in)[0].score;
        check(near(1.0 - s, 0.8, 1e-12) && near(s, 0.2, 1e-12), "wknn_confidence 0.8");
    }
    {
        auto train = line_points({2.0, -2.0, 4.0, -4.0, 8.0, -8.0});
        NeighborAttachments att;
        att.label = std::vector<int>{0, 0, 1, 1, 2, 2};
        const auto idx = NeighborIndex::build(train, att);
        Eigen::MatrixXd q = Eigen::MatrixXd::Zero(1, 1);
        const std::vector<std::string> ids = {"q"};
        ScoreInputs in;
        in.sample_ids = ids;
        in.embeddings = &q;
        in.index = &idx;
        in.n = 2;
        check(near(score(DeferralMetric::class_distance_ratio, in)[0].score, 0.5, 1e-12), "class ratio 0.5");
        auto eq = line_points({3.0, -3.0});
        NeighborAttachments eq_att;
        eq_att.label = std::vector<int>{0, 1};
        const auto eq_idx = NeighborIndex::build(eq, eq_att);
        in.index = &eq_idx;
        in.n = 1;
        check(score(DeferralMetric::class_distance_ratio, in)[0].score == 1.0, "class ratio 1.0");
    }
    {
        Eigen::MatrixXd u = Eigen::MatrixXd::Constant(1, 5, 0.2);
        const std::vector<std::string> ids = {"u"};
        ScoreInputs in;
        in.sample_ids = ids;
        in.probs = &u;
        const auto h = score(DeferralMetric::output_entropy, in)[0].score;
        check(near(h, std::log(5.0), 1e-12) && near(h, 1.6094, 5e-5), "uniform entropy ln 5");
    }
    {
        RetentionCurve c;
        c.points = {{0.5, 1.0, 5, 0.1}, {0.8, 0.9, 8, 0.2}, {1.0, 0.8, 10, 0.3}};
        const auto th = pick_threshold(c, 0.85);
        check(th && th->z == 0.8, "threshold z*=0.8");
    }
    {
        std::vector<std::pair<std::string, DynamicsLog>> recs;
        Rng rng(9);
        for (int r = 0; r < 45; ++r) recs.emplace_back("r" + std::to_string(r), test::random_log(rng, 4, 2, 3, false));
        const auto ranks = rank_recordings(recs, 40.0);
        check(std::count_if(ranks.begin(), ranks.end(), [](const auto& x) { return x.selected; }) == 18,
              "18 of 45 recordings");
        // constant vs flipping two-epoch dynamics
        DynamicsLog steady, flip;
        for (auto* l : {&steady, &flip}) {
            l->num_classes = 2;
            l->num_epochs = 2;
            l->sample_ids = {"x"};
            l->recording_ids = {"r"};
            l->labels = {std::nullopt};
        }
        steady.probs = {0.8, 0.2, 0.8, 0.2};
        flip.probs = {0.9, 0.1, 0.1, 0.9};
        std::vector<std::pair<std::string, DynamicsLog>> two = {{"steady", steady}, {"flip", flip}};
        check(rank_recordings(two, 50.0)[0].recording_id == "flip", "flipping recording first");
    }
    {
        std::vector<std::string> ids;
        for (int i = 0; i < 1000; ++i) ids.push_back("s" + std::to_string(i));
        Eigen::MatrixXd p = Eigen::MatrixXd::Constant(1000, 2, 0.5);
        auto s = start_session("rec", ids, p, 10, 1.0, "noop");
        check(next_query_batch(s, p, 1.0).size() == 10, "1% of 1000 queried");
        Eigen::MatrixXd three(3, 2);
        // entropies about 0.10, 0.67 and 0.42 nats
        three << 0.98, 0.02, 0.6, 0.4, 0.85, 0.15;
        auto s3 = start_session("rec", {"a", "b", "c"}, three, 1, 1.0, "noop");
        check(next_query_batch(s3, three, 1.0) == std::vector<std::string>{"b"}, "argmax entropy query");
    }

    std::string detail = failed.empty() ? "all worked examples reproduced" : "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
    return {failed.empty(), detail};
}

// ------------------------------------------------------------ 4

Outcome knn_exactness() {
    Rng rng(404);
    std::size_t mismatches = 0;
    const int triples = 1000;
    for (int t = 0; t < triples; ++t) {
        const auto m = 1 + rng.below(120);
        const auto dims = 1 + rng.below(8);
        const auto n = 1 + rng.below(std::min<std::size_t>(25, m));
        const bool grid = t % 5 == 0;  // coarse coordinates force distance ties
        EmbeddingSet set;
        set.vectors.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(dims));
        for (std::size_t i = 0; i < m; ++i) {
            set.sample_ids.push_back("id" + std::to_string(rng.below(1000000)) + "_" + std::to_string(i));
            for (std::size_t d = 0; d < dims; ++d)
                set.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) =
                    grid ? static_cast<double>(rng.below(3)) : rng.normal();
        }
        const auto index = NeighborIndex::build(set);
        std::vector<double> q(dims);
        for (auto& x : q) x = grid ? static_cast<double>(rng.below(3)) : rng.normal();

        std::vector<std::pair<double, std::string>> all;
        for (std::size_t i = 0; i < m; ++i) {
            double d2 = 0.0;
            for (std::size_t d = 0; d < dims; ++d) {
                const double diff = set.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) - q[d];
                d2 += diff * diff;
            }
            all.emplace_back(std::sqrt(d2), set.sample_ids[i]);
        }
        std::sort(all.begin(), all.end());
        const auto got = index.query(q, n);
        bool ok = got.size() == n;
        for (std::size_t i = 0; ok && i < n; ++i) ok = got[i].sample_id == all[i].second;
        if (!ok) ++mismatches;
    }
    return {mismatches == 0, std::to_string(triples) + " random (set, query, n) triples, " +
                                 std::to_string(mismatches) + " mismatches against exhaustive scan"};
}

// ------------------------------------------------------------ 5, 6

struct NoiseRun {
    double auroc = 0.0;
    double acc_keep_all = 0.0;
    double acc_dropped = 0.0;
    double in_domain_keep_all = 0.0;
    double in_domain_dropped = 0.0;
};

NoiseRun noise_run(std::uint64_t seed) {
    const auto cfg = benchmark_config(seed);
    const auto train = generate_synthetic(cfg.synthetic->train);
    const auto table = train.table();
    const auto test = generate_synthetic(test_spec(*cfg.synthetic)).table(true);
    auto in_domain_spec = cfg.synthetic->train;
    in_domain_spec.noise_rate = 0.0;
    in_domain_spec.seed = Rng::derive(seed, 77);
    in_domain_spec.id_prefix = "d";
    const auto in_domain = generate_synthetic(in_domain_spec).table(true);
    auto labels = [](const FeatureTable& t) {
        std::vector<int> y;
        for (const auto& l : t.labels) y.push_back(*l);
        return y;
    };
    const auto y_test = labels(test), y_dom = labels(in_domain);

    const auto full = train_logged(table, cfg.train, Rng::derive(seed, 10));
    const auto metrics = sample_metrics(full.log);
    std::vector<double> v_al;
    for (const auto& m : metrics) v_al.push_back(m.v_al);
    NoiseRun r;
    r.auroc = auroc(v_al, train.flip_mask);

    const auto flips = static_cast<double>(std::count(train.flip_mask.begin(), train.flip_mask.end(), true));
    const double flip_pct = 100.0 * flips / static_cast<double>(train.size());
    const auto manifest = select_data(metrics, flip_pct);
    const auto kept = train_logged(select_samples(table, manifest.kept), cfg.train, Rng::derive(seed, 10));
    const auto& m0 = full.checkpoints.back();
    const auto& m1 = kept.checkpoints.back();
    r.acc_keep_all = accuracy(predict_proba(m0, test.features), y_test);
    r.acc_dropped = accuracy(predict_proba(m1, test.features), y_test);
    r.in_domain_keep_all = accuracy(predict_proba(m0, in_domain.features), y_dom);
    r.in_domain_dropped = accuracy(predict_proba(m1, in_domain.features), y_dom);
    return r;
}

std::vector<NoiseRun>& noise_runs() {
    static std::vector<NoiseRun> runs = [] {
        std::vector<NoiseRun> v;
        for (int s = 0; s < kSeeds; ++s) v.push_back(noise_run(1000 + static_cast<std::uint64_t>(s)));
        return v;
    }();
    return runs;
}

Outcome label_noise_surfacing() {
    double sum = 0.0, lo = 1.0;
    for (const auto& r : noise_runs()) {
        sum += r.auroc;
        lo = std::min(lo, r.auroc);
    }
    const double mean = sum / kSeeds;
    return {mean >= 0.70, "mean AUROC of v_al for flipped labels " + fmt("%.4f", mean) + " over " +
                              std::to_string(kSeeds) + " seeds (min " + fmt("%.4f", lo) + "), threshold 0.70"};
}

Outcome data_selection_benefit() {
    double diff = 0.0, dom = 0.0;
    int not_worse = 0;
    for (const auto& r : noise_runs()) {
        diff += r.acc_dropped - r.acc_keep_all;
        dom += r.in_domain_dropped - r.in_domain_keep_all;
        not_worse += r.acc_dropped >= r.acc_keep_all;
    }
    diff /= kSeeds;
    dom /= kSeeds;
    return {diff >= 0.0, "mean clean-test accuracy change " + fmt("%+.3f", 100.0 * diff) + " pp (" +
                             std::to_string(not_worse) + "/" + std::to_string(kSeeds) +
                             " seeds not worse); in-domain clean set " + fmt("%+.3f", 100.0 * dom) + " pp"};
}

// ------------------------------------------------------------ 7

struct AlRun {
    double entropy = 0.0, random = 0.0, none = 0.0;
};

AlRun al_run(std::uint64_t seed) {
    auto cfg = benchmark_config(seed);
    const auto train = generate_synthetic(cfg.synthetic->train).table();
    const auto test = generate_synthetic(test_spec(*cfg.synthetic)).table(true);
    const auto model = train_logged(train, cfg.train, Rng::derive(seed, 10)).checkpoints.back();

    std::map<std::string, std::vector<std::size_t>> rec_rows;
    for (std::size_t i = 0; i < test.size(); ++i) rec_rows[test.recording_ids[i]].push_back(i);
    AlRun out;
    std::size_t k = 0;
    for (const auto& [rec, rows] : rec_rows) {
        const auto table = subset_rows(test, rows);
        std::vector<int> truth;
        std::map<std::string, int> oracle;
        for (std::size_t i = 0; i < table.size(); ++i) {
            truth.push_back(*table.labels[i]);
            oracle[table.sample_ids[i]] = *table.labels[i];
        }
        const auto trainer_seed = Rng::derive(seed, 2000 + k);
        {
            FineTuneTrainer trainer(model, table, cfg.finetune, trainer_seed);
            out.none += accuracy(trainer.outputs(), truth);
            auto s = start_session(rec, table.sample_ids, trainer.outputs(), 10, 1.0, trainer.id());
            while (s.status == SessionStatus::running)
                al_step(s, simulated_answers(issue_entropy_batch(s), oracle), trainer);
            out.entropy += accuracy(s.current_outputs(), truth);
        }
        {
            FineTuneTrainer trainer(model, table, cfg.finetune, trainer_seed);
            Rng pick(Rng::derive(seed, 3000 + k));
            auto s = start_session(rec, table.sample_ids, trainer.outputs(), 10, 1.0, trainer.id());
            while (s.status == SessionStatus::running) {
                const auto& batch = issue_batch(s, random_query_batch(s, 1.0, pick));
                al_step(s, simulated_answers(batch, oracle), trainer);
            }
            out.random += accuracy(s.current_outputs(), truth);
        }
        ++k;
    }
    out.entropy /= static_cast<double>(k);
    out.random /= static_cast<double>(k);
    out.none /= static_cast<double>(k);
    return out;
}

Outcome al_effectiveness() {
    AlRun mean;
    for (int s = 0; s < kSeeds; ++s) {
        const auto r = al_run(3000 + static_cast<std::uint64_t>(s));
        mean.entropy += r.entropy / kSeeds;
        mean.random += r.random / kSeeds;
        mean.none += r.none / kSeeds;
    }
    const bool ok = mean.entropy >= mean.random - 0.005 && mean.entropy >= mean.none;
    return {ok, "mean final accuracy: entropy " + fmt("%.4f", mean.entropy) + ", random " + fmt("%.4f", mean.random) +
                    ", no query " + fmt("%.4f", mean.none) + " (E=10, batch_pct=1, " + std::to_string(kSeeds) +
                    " paired seeds)"};
}

// ------------------------------------------------------------ 8

Outcome deferral_oracle() {
    Rng rng(808);
    std::size_t oracle_fail = 0, reachable = 0, threshold_fail = 0;
    const int instances = 500;
    const auto grid = default_retention_grid();
    for (int t = 0; t < instances; ++t) {
        const auto n = 1 + rng.below(300);
        const double p_right = rng.uniform();
        std::vector<DeferralScore> oracle(n), noisy(n);
        std::vector<bool> correct(n);
        std::size_t right = 0;
        for (std::size_t i = 0; i < n; ++i) {
            correct[i] = rng.uniform() < p_right;
            right += correct[i];
            const auto id = "s" + std::to_string(i);
            oracle[i] = {id, DeferralMetric::output_entropy, correct[i] ? 0.0 : 1.0, std::nullopt};
            // imperfect score: oracle plus noise, with coarse values for ties
            noisy[i] = {id, DeferralMetric::output_entropy,
                        std::round(4.0 * ((correct[i] ? 0.0 : 0.6) + rng.uniform())) / 4.0, std::nullopt};
        }
        const double overall = static_cast<double>(right) / static_cast<double>(n);
        for (const auto& pt : retention_curve(oracle, correct, grid).points)
            if (pt.z <= overall && pt.accuracy != 1.0) {
                ++oracle_fail;
                break;
            }

        const auto curve = retention_curve(noisy, correct, grid);
        const double target = rng.uniform();
        // brute force over the grid for the largest reachable z
        std::optional<double> best;
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const auto keep = percent_count(n, 100.0 * grid[g]);
            std::vector<std::pair<double, std::string>> order;
            for (std::size_t i = 0; i < n; ++i) order.emplace_back(noisy[i].score, noisy[i].sample_id);
            std::vector<std::size_t> idx(n);
            std::iota(idx.begin(), idx.end(), 0);
            std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return order[a] < order[b]; });
            std::size_t ok = 0;
            for (std::size_t j = 0; j < keep; ++j) ok += correct[idx[j]];
            if (keep > 0 && static_cast<double>(ok) / static_cast<double>(keep) >= target) best = grid[g];
        }
        const auto th = pick_threshold(curve, target);
        if (best) {
            ++reachable;
            if (!th || th->accuracy < target || th->z != *best) ++threshold_fail;
        } else if (th) {
            ++threshold_fail;
        }
    }
    return {oracle_fail == 0 && threshold_fail == 0,
            std::to_string(instances) + " random instances: oracle-score curves below 1.0 at z <= accuracy: " +
                std::to_string(oracle_fail) + "; threshold errors " + std::to_string(threshold_fail) + " (" +
                std::to_string(reachable) + " reachable targets)"};
}

// ------------------------------------------------------------ 9

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
    return files;
}

Outcome reproducibility() {
    test::TempDir a("accept_a"), b("accept_b");
    auto ca = benchmark_config(4242), cb = benchmark_config(4242);
    ca.output_dir = a.path;
    cb.output_dir = b.path;
    const auto ra = run_pipeline(ca, kAllStages);
    const auto rb = run_pipeline(cb, kAllStages);
    const auto fa = snapshot(a.path), fb = snapshot(b.path);
    std::size_t differing = fa.size() == fb.size() ? 0 : 1;
    for (const auto& [rel, bytes] : fa) {
        auto it = fb.find(rel);
        if (it == fb.end() || it->second != bytes) ++differing;
    }
    const bool reports_equal = summary_to_json(ra) == summary_to_json(rb);

    // scripted service session, then replay from the event log
    ServiceOptions opt;
    opt.artifacts_dir = a.path;
    opt.simulation = true;
    opt.seed = 7;
    std::vector<std::string> live, replayed;
    {
        SessionService svc(opt);
        std::set<std::string> recs;
        const auto test = load_feature_csv(a.path / "data" / "test_features.csv");
        for (const auto& r : test.recording_ids) recs.insert(r);
        for (const auto& rec : recs) {
            const auto created = svc.create_session(R"({"recording_id":")" + rec + R"(","epochs":3})");
            if (created.status != 201) return {false, "service create failed: " + created.body};
        }
        for (const auto& id : svc.session_ids()) {
            for (int e = 0; e < 2; ++e) {
                const auto q = nlohmann::json::parse(svc.get_queries(id).body);
                nlohmann::json body = {{"batch_token", q["batch_token"]}, {"oracle", "simulated"}};
                svc.submit_labels(id, body.dump());
            }
            svc.get_queries(id);
        }
        const auto d = svc.create_session(R"({"mode":"deferral_review","z":0.2})");
        const auto did = nlohmann::json::parse(d.body)["session_id"].get<std::string>();
        const auto items = nlohmann::json::parse(svc.get_deferrals(did).body)["items"];
        for (std::size_t i = 0; i < 25 && i < items.size(); ++i)
            svc.resolve_deferral(did, items[i]["sample_id"], R"({"decision":"confirm_model"})");
        for (const auto& id : svc.session_ids()) live.push_back(svc.summary(id));
    }
    {
        SessionService svc(opt);
        for (const auto& id : svc.session_ids()) replayed.push_back(svc.summary(id));
    }
    const bool replay_equal = live == replayed && !live.empty();
    return {differing == 0 && reports_equal && replay_equal,
            std::to_string(fa.size()) + " artifacts, " + std::to_string(differing) + " differing; StageReports " +
                (reports_equal ? "identical" : "differ") + "; " + std::to_string(live.size()) +
                " replayed session summaries " + (replay_equal ? "identical" : "differ")};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"decomposition_identity", decomposition_identity},
        {"entropy_decomposition", entropy_decomposition},
        {"hand_values", hand_values},
        {"knn_exactness", knn_exactness},
        {"label_noise_surfacing", label_noise_surfacing},
        {"data_selection_benefit", data_selection_benefit},
        {"al_effectiveness", al_effectiveness},
        {"deferral_oracle", deferral_oracle},
        {"reproducibility", reproducibility},
    };
    int failures = 0;
    const auto start = std::chrono::steady_clock::now();
    for (const auto& [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%d/%zu criteria passed in %.1f s\n", static_cast<int>(criteria.size()) - failures, criteria.size(),
                secs);
    return failures == 0 ? 0 : 1;
}
