// upass command-line tool.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "upass/active.hpp"
#include "upass/curation.hpp"
#include "upass/dynamics.hpp"
#include "upass/error.hpp"
#include "upass/io.hpp"
#include "upass/pipeline.hpp"
#include "upass/refmodel.hpp"
#include "upass/service.hpp"
#include "upass/svg.hpp"

namespace fs = std::filesystem;
using namespace upass;

namespace {

struct Common {
    std::string out_dir = "upass_out";
    std::uint64_t seed = 0;

    fs::path out() const {
        if (const char* env = std::getenv("UPASS_OUT"); env != nullptr && *env != '\0') return env;
        return out_dir;
    }
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("-o,--out-dir", c.out_dir, "Output directory (UPASS_OUT overrides)")->capture_default_str();
    cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
}

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
    cmd->add_option("--hidden", t.hidden, "Hidden units of the reference model (0 = linear)")->capture_default_str();
    cmd->add_option("--train-epochs", t.epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--batch-size", t.batch_size, "Mini-batch size")->capture_default_str();
    cmd->add_option("--lr", t.learning_rate, "Learning rate")->capture_default_str();
    cmd->add_option("--weight-decay", t.weight_decay, "L2 penalty")->capture_default_str();
}

DynamicsLog load_log(const std::string& path, const std::string& format) {
    return ingest_log(path, format == "auto" ? log_format_from_path(path) : parse_log_format(format));
}

void print_reports(const std::vector<StageReport>& reports, const fs::path& out) {
    for (const auto& r : reports) {
        std::cout << to_string(r.stage) << ": ";
        if (r.accuracy) std::cout << "accuracy " << format_double(*r.accuracy);
        else std::cout << "no labeled test set";
        if (r.status != "ok") std::cout << " (" << r.status << ")";
        std::cout << '\n';
    }
    std::cout << "artifacts in " << out.string() << '\n';
}

// staged-accuracy report from a finished run
int report(const fs::path& dir) {
    const auto path = dir / "summary.json";
    if (!fs::exists(path)) throw NotFoundError("no summary.json in " + dir.string());
    const auto j = nlohmann::json::parse(read_file(path));
    std::string csv = "step,stage,accuracy,status\n";
    PlotSeries s{"headline accuracy", {}, {}};
    std::size_t step = 0;
    for (const auto& st : j.at("stages")) {
        const auto stage = st.at("stage").get<std::string>();
        const auto& acc = st.at("accuracy");
        const auto status = st.at("status").get<std::string>();
        csv += std::to_string(step) + ',' + stage + ',' + (acc.is_null() ? "" : format_double(acc.get<double>())) + ',' +
               status + '\n';
        std::cout << stage << '\t' << (acc.is_null() ? "-" : format_double(acc.get<double>())) << '\t' << status << '\n';
        if (!acc.is_null()) {
            s.x.push_back(static_cast<double>(step));
            s.y.push_back(acc.get<double>());
        }
        ++step;
    }
    write_file(dir / "report.csv", csv);
    const std::vector<PlotSeries> series = {s};
    write_file(dir / "report.svg", line_plot_svg("Accuracy after each step", "step", "accuracy", series));
    return 0;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-guided pipeline for sequence classification: training-dynamics metrics, "
                 "data selection, active learning and deferral"};
    app.require_subcommand(1);
    std::function<int()> action;

    // ingest
    Common ingest_c;
    std::string ingest_log_path, ingest_format = "auto";
    auto* ingest = app.add_subcommand("ingest", "Validate a dynamics log and write it as JSONL");
    ingest->add_option("--log", ingest_log_path, "Dynamics log (.jsonl or .csv)")->required();
    ingest->add_option("--format", ingest_format, "auto, jsonl or csv")->capture_default_str();
    add_common(ingest, ingest_c);
    ingest->callback([&] {
        action = [&] {
            const auto log = load_log(ingest_log_path, ingest_format);
            write_file(ingest_c.out() / "dynamics.jsonl", log_to_jsonl(log));
            const auto recs = split_by_recording(log);
            std::cout << log.size() << " samples, " << log.num_epochs << " epochs, " << log.num_classes << " classes, "
                      << recs.size() << " recordings\n";
            return 0;
        };
    });

    // metrics / stratify
    Common metrics_c;
    std::string metrics_log, metrics_format = "auto";
    auto* metrics = app.add_subcommand("metrics", "Per-sample confidence and uncertainty decomposition");
    metrics->add_option("--log", metrics_log, "Dynamics log")->required();
    metrics->add_option("--format", metrics_format, "auto, jsonl or csv")->capture_default_str();
    add_common(metrics, metrics_c);
    metrics->callback([&] {
        action = [&] {
            const auto log = load_log(metrics_log, metrics_format);
            const bool labeled = std::all_of(log.labels.begin(), log.labels.end(), [](const auto& l) { return l.has_value(); });
            if (labeled) {
                write_file(metrics_c.out() / "metrics.csv", metrics_to_csv(sample_metrics(log)));
                std::cout << "wrote metrics.csv for " << log.size() << " samples\n";
            } else {
                // no labels: only the entropy decomposition is defined
                std::string csv = "sample_id,v_al_entropy,v_ep_entropy\n";
                for (const auto& m : sample_metrics_entropy(log))
                    csv += m.sample_id + ',' + format_double(m.v_al_entropy) + ',' + format_double(m.v_ep_entropy) + '\n';
                write_file(metrics_c.out() / "metrics_entropy.csv", csv);
                std::cout << "unlabeled log: wrote metrics_entropy.csv for " << log.size() << " samples\n";
            }
            return 0;
        };
    });

    Common strat_c;
    std::string strat_log, strat_format = "auto", strat_kind = "aleatoric";
    double top_pct = 1.0, easy_hard_pct = 1.0;
    auto* strat = app.add_subcommand("stratify", "Tag ambiguous, easy and hard samples");
    strat->add_option("--log", strat_log, "Dynamics log")->required();
    strat->add_option("--format", strat_format, "auto, jsonl or csv")->capture_default_str();
    strat->add_option("--top-pct", top_pct, "Percent tagged ambiguous")->capture_default_str();
    strat->add_option("--easy-hard-pct", easy_hard_pct, "Percent tagged easy and hard each")->capture_default_str();
    strat->add_option("--ambiguity", strat_kind, "aleatoric or epistemic")->capture_default_str();
    add_common(strat, strat_c);
    strat->callback([&] {
        action = [&] {
            auto m = sample_metrics(load_log(strat_log, strat_format));
            apply_strata(m, parse_ambiguity_kind(strat_kind), top_pct, easy_hard_pct);
            write_file(strat_c.out() / "metrics.csv", metrics_to_csv(m));
            std::map<std::string, std::size_t> counts;
            for (const auto& x : m) ++counts[std::string(to_string(x.stratum))];
            for (const auto& [k, v] : counts) std::cout << k << '\t' << v << '\n';
            return 0;
        };
    });

    // compare
    Common cmp_c;
    std::vector<std::string> cmp_logs;
    auto* cmp = app.add_subcommand("compare", "Rank model configurations by mean data uncertainty");
    cmp->add_option("--log", cmp_logs, "config_id=path, repeated")->required();
    add_common(cmp, cmp_c);
    cmp->callback([&] {
        action = [&] {
            std::vector<std::pair<std::string, DynamicsLog>> in;
            for (const auto& spec : cmp_logs) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos) throw ValidationError("--log expects config_id=path, got " + spec);
                const auto path = spec.substr(eq + 1);
                in.emplace_back(spec.substr(0, eq), ingest_log(path, log_format_from_path(path)));
            }
            const auto csv = config_reports_to_csv(compare_configs(in));
            write_file(cmp_c.out() / "compare.csv", csv);
            std::cout << csv;
            return 0;
        };
    });

    // select
    Common sel_c;
    PipelineConfig sel_cfg;
    std::string sel_log, sel_metric = "v_al", sel_train, sel_test;
    auto* sel = app.add_subcommand("select", "Drop the most data-uncertain samples and optionally retrain");
    sel->add_option("--log", sel_log, "Dynamics log of the training set")->required();
    sel->add_option("--drop-pct", sel_cfg.drop_pct, "Percent of samples dropped")->capture_default_str();
    sel->add_option("--ranking-metric", sel_metric, "v_al or v_al_entropy")->capture_default_str();
    sel->add_option("--sweep", sel_cfg.drop_sweep, "drop_pct values to evaluate downstream")->delimiter(',');
    sel->add_option("--train-features", sel_train, "Training features; retrains on the kept samples");
    sel->add_option("--test-features", sel_test, "Labeled test features for accuracy");
    add_train_flags(sel, sel_cfg.train);
    add_common(sel, sel_c);
    sel->callback([&] {
        action = [&] {
            sel_cfg.output_dir = sel_c.out();
            sel_cfg.seed = sel_c.seed;
            sel_cfg.dynamics_log = sel_log;
            sel_cfg.ranking_metric = parse_ranking_metric(sel_metric);
            if (!sel_train.empty()) sel_cfg.train_features = sel_train;
            if (!sel_test.empty()) sel_cfg.test_features = sel_test;
            if (!sel_cfg.drop_sweep.empty() && (sel_train.empty() || sel_test.empty()))
                throw ValidationError("--sweep needs --train-features and --test-features");
            const std::vector<Stage> stages = {Stage::select};
            const auto reports = run_pipeline(sel_cfg, stages);
            std::cout << "dropped " << reports[0].details["dropped"].get<std::size_t>() << ", kept "
                      << reports[0].details["kept"].get<std::size_t>() << '\n';
            print_reports(reports, sel_cfg.output_dir);
            return 0;
        };
    });

    // rank
    Common rank_c;
    std::string rank_log, rank_format = "auto";
    double rank_pct = 40.0;
    auto* rank = app.add_subcommand("rank", "Rank recordings by model uncertainty for labeling");
    rank->add_option("--log", rank_log, "Dynamics log covering the candidate recordings (labels optional)")->required();
    rank->add_option("--format", rank_format, "auto, jsonl or csv")->capture_default_str();
    rank->add_option("--select-pct", rank_pct, "Percent of recordings selected")->capture_default_str();
    add_common(rank, rank_c);
    rank->callback([&] {
        action = [&] {
            const auto logs = split_by_recording(load_log(rank_log, rank_format));
            const auto csv = rankings_to_csv(rank_recordings(logs, rank_pct));
            write_file(rank_c.out() / "rankings.csv", csv);
            std::cout << csv;
            return 0;
        };
    });

    // al
    Common al_c;
    PipelineConfig al_cfg;
    std::string al_model, al_test;
    auto* al = app.add_subcommand("al", "Simulated active learning on labeled target recordings");
    al->add_option("--model", al_model, "Trained checkpoint (model.json)")->required();
    al->add_option("--test-features", al_test, "Labeled target-domain features")->required();
    al->add_option("--select-pct", al_cfg.select_pct, "Percent of recordings selected")->capture_default_str();
    al->add_option("--batch-pct", al_cfg.batch_pct, "Percent of a recording queried per epoch")->capture_default_str();
    al->add_option("-E,--epochs", al_cfg.al_epochs, "Active-learning epochs")->capture_default_str();
    al->add_option("--adapt-epochs", al_cfg.adapt_epochs, "Self-training epochs used for ranking")->capture_default_str();
    al->add_option("--ft-lr", al_cfg.finetune.learning_rate, "Fine-tuning learning rate")->capture_default_str();
    al->add_option("--ft-passes", al_cfg.finetune.passes, "Fine-tuning passes per epoch")->capture_default_str();
    add_train_flags(al, al_cfg.train);
    add_common(al, al_c);
    al->callback([&] {
        action = [&] {
            al_cfg.output_dir = al_c.out();
            al_cfg.seed = al_c.seed;
            al_cfg.model = al_model;
            al_cfg.test_features = al_test;
            const std::vector<Stage> stages = {Stage::active};
            print_reports(run_pipeline(al_cfg, stages), al_cfg.output_dir);
            return 0;
        };
    });

    // defer
    Common def_c;
    PipelineConfig def_cfg;
    std::string def_model, def_train, def_test, def_log, def_metric = "wknn_confidence", def_distance = "euclidean";
    auto* def = app.add_subcommand("defer", "Score test samples, build the retention curve and pick a threshold");
    def->add_option("--model", def_model, "Trained checkpoint (model.json)")->required();
    def->add_option("--test-features", def_test, "Labeled test features")->required();
    def->add_option("--train-features", def_train, "Training features for the neighbour index");
    def->add_option("--log", def_log, "Training dynamics log for neighbour confidence");
    def->add_option("--metric", def_metric, "Deferral metric")->capture_default_str();
    def->add_option("-n,--neighbors", def_cfg.neighbors, "Neighbours per query")->capture_default_str();
    def->add_option("--distance", def_distance, "euclidean or cosine")->capture_default_str();
    def->add_option("--target-accuracy", def_cfg.target_accuracy, "Accuracy the retained set must reach")
        ->capture_default_str();
    def->add_option("--grid-step", def_cfg.grid_step, "Spacing of the retention grid")->capture_default_str();
    add_common(def, def_c);
    def->callback([&] {
        action = [&] {
            def_cfg.output_dir = def_c.out();
            def_cfg.seed = def_c.seed;
            def_cfg.model = def_model;
            def_cfg.test_features = def_test;
            if (!def_train.empty()) def_cfg.train_features = def_train;
            if (!def_log.empty()) def_cfg.dynamics_log = def_log;
            def_cfg.deferral_metric = parse_deferral_metric(def_metric);
            def_cfg.distance = parse_distance_metric(def_distance);
            const std::vector<Stage> stages = {Stage::defer};
            const auto reports = run_pipeline(def_cfg, stages);
            const auto& d = reports[0].details["including_queried"];
            if (d["status"] == "ok")
                std::cout << "z = " << format_double(d["z"].get<double>()) << ", deferred "
                          << d["deferred"].get<std::size_t>() << '\n';
            else
                std::cout << "target accuracy unreachable; overall accuracy "
                          << format_double(d["overall_accuracy"].get<double>()) << '\n';
            print_reports(reports, def_cfg.output_dir);
            return 0;
        };
    });

    // report
    std::string report_dir = "upass_out";
    auto* rep = app.add_subcommand("report", "Staged-accuracy table and plot of a pipeline run");
    rep->add_option("-o,--out-dir", report_dir, "Pipeline output directory (UPASS_OUT overrides)")->capture_default_str();
    rep->callback([&] {
        action = [&] {
            Common c;
            c.out_dir = report_dir;
            return report(c.out());
        };
    });

    // serve
    std::string serve_dir = "upass_out", host = "127.0.0.1", event_log;
    int port = 8080;
    bool simulation = false;
    std::uint64_t serve_seed = 0;
    auto* serve = app.add_subcommand("serve", "HTTP session service for labeling and deferral review");
    serve->add_option("-o,--out-dir", serve_dir, "Pipeline output directory (UPASS_OUT overrides)")->capture_default_str();
    serve->add_option("--host", host, "Bind address")->capture_default_str();
    serve->add_option("--port", port, "Port (0 picks a free one)")->capture_default_str();
    serve->add_option("--event-log", event_log, "Event log path (default <out-dir>/service/events.jsonl)");
    serve->add_flag("--simulation", simulation, "Ground truth answers queries and scores accuracy");
    serve->add_option("--seed", serve_seed, "Random seed")->capture_default_str();
    serve->callback([&] {
        action = [&] {
            Common c;
            c.out_dir = serve_dir;
            ServiceOptions opt;
            opt.artifacts_dir = c.out();
            if (!event_log.empty()) opt.event_log = event_log;
            opt.simulation = simulation;
            opt.seed = serve_seed;
            SessionService service(opt);
            HttpServer server(service);
            if (!server.bind(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "listening on http://" << host << ':' << server.port() << " ("
                      << service.session_ids().size() << " sessions restored)" << std::endl;
            server.serve();
            g_server = nullptr;
            return 0;
        };
    });

    // pipeline
    std::string config_path, stages_arg = "all";
    bool benchmark = false;
    Common pipe_c;
    auto* pipe = app.add_subcommand("pipeline", "Run collect, select, active and defer stages");
    pipe->add_option("-c,--config", config_path, "JSON configuration");
    pipe->add_flag("--benchmark", benchmark, "Use the bundled synthetic benchmark");
    pipe->add_option("--stages", stages_arg, "Comma-separated stages or all")->capture_default_str();
    pipe->add_option("-o,--out-dir", pipe_c.out_dir, "Output directory (UPASS_OUT overrides)");
    auto* pipe_seed = pipe->add_option("--seed", pipe_c.seed, "Seed for --benchmark");
    pipe->callback([&] {
        action = [&] {
            if (config_path.empty() == !benchmark) throw ValidationError("give exactly one of --config and --benchmark");
            PipelineConfig cfg;
            if (benchmark) {
                cfg = benchmark_config(pipe_c.seed);
            } else {
                if (!fs::exists(config_path)) throw NotFoundError("config not found: " + config_path);
                cfg = parse_pipeline_config(read_file(config_path), fs::path(config_path).parent_path());
                if (pipe_seed->count() > 0) throw ValidationError("--seed applies to --benchmark; set seed in the config");
            }
            if (pipe->count("--out-dir") > 0) cfg.output_dir = pipe_c.out_dir;
            apply_environment(cfg);
            const auto stages = parse_stage_list(stages_arg);
            print_reports(run_pipeline(cfg, stages), cfg.output_dir);
            return 0;
        };
    });

    // synth
    Common synth_c;
    auto* synth = app.add_subcommand("synth", "Write the synthetic benchmark as feature files plus a config");
    add_common(synth, synth_c);
    synth->callback([&] {
        action = [&] {
            const auto out = synth_c.out();
            const auto inputs = benchmark_inputs(synth_c.seed);
            const auto train = generate_synthetic(inputs.train);
            write_file(out / "train_features.csv", feature_table_to_csv(train.table()));
            write_file(out / "test_features.csv", feature_table_to_csv(generate_synthetic(test_spec(inputs)).table(true)));
            std::string flips = "sample_id,flipped\n";
            for (std::size_t i = 0; i < train.size(); ++i)
                flips += train.sample_ids[i] + ',' + (train.flip_mask[i] ? "1" : "0") + '\n';
            write_file(out / "flips.csv", flips);
            auto cfg = benchmark_config(synth_c.seed);
            cfg.synthetic.reset();
            cfg.train_features = "train_features.csv";
            cfg.test_features = "test_features.csv";
            cfg.output_dir = "run";
            write_file(out / "config.json", pipeline_config_to_json(cfg));
            std::cout << "wrote " << train.size() << " training samples to " << out.string() << '\n';
            return 0;
        };
    });

    // train
    Common train_c;
    TrainConfig train_cfg = benchmark_config(0).train;
    std::string train_features;
    auto* train = app.add_subcommand("train", "Train the reference classifier and log its training dynamics");
    train->add_option("--features", train_features, "Labeled training features")->required();
    add_train_flags(train, train_cfg);
    add_common(train, train_c);
    train->callback([&] {
        action = [&] {
            const auto table = load_feature_csv(train_features);
            const auto res = train_logged(table, train_cfg, train_c.seed);
            write_file(train_c.out() / "dynamics.jsonl", log_to_jsonl(res.log));
            write_file(train_c.out() / "model.json", checkpoint_to_json(res.checkpoints.back()));
            std::cout << "trained " << res.checkpoints.size() << " epochs on " << table.size() << " samples\n";
            return 0;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        return action ? action() : 0;
    } catch (const std::exception& e) {
        std::cerr << "upass: " << e.what() << '\n';
        return exit_code_for(e);
    }
}
