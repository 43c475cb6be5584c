#include "upass/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <set>

#include "upass/error.hpp"
#include "upass/io.hpp"
#include "upass/neighbors.hpp"
#include "upass/stats.hpp"
#include "upass/svg.hpp"

namespace upass {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string_view to_string(Stage stage) {
    switch (stage) {
        case Stage::collect: return "collect";
        case Stage::select: return "select";
        case Stage::active: return "active";
        case Stage::defer: return "defer";
    }
    return "?";
}

Stage parse_stage(std::string_view name) {
    for (Stage s : kAllStages)
        if (to_string(s) == name) return s;
    throw ValidationError("unknown stage '" + std::string(name) + "'");
}

std::vector<Stage> parse_stage_list(std::string_view list) {
    if (list == "all") return {std::begin(kAllStages), std::end(kAllStages)};
    std::set<Stage> chosen;
    for (const auto& name : split_csv(list)) {
        if (name.empty()) continue;
        chosen.insert(parse_stage(name));
    }
    if (chosen.empty()) throw ValidationError("no stages requested");
    return {chosen.begin(), chosen.end()};
}

// ---------------------------------------------------------------- config

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, std::string_view where) {
    if (!j.is_object()) throw ValidationError(std::string(where) + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ValidationError("unknown key '" + key + "' in " + std::string(where));
    }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

void check_pct(double v, const char* name, bool allow_zero, bool allow_hundred) {
    const bool ok = (allow_zero ? v >= 0.0 : v > 0.0) && (allow_hundred ? v <= 100.0 : v < 100.0);
    if (!ok) throw ValidationError(std::string(name) + " out of range");
}

void validate(const PipelineConfig& c) {
    check_pct(c.top_pct, "top_pct", false, true);
    check_pct(c.easy_hard_pct, "easy_hard_pct", true, true);
    check_pct(c.drop_pct, "drop_pct", true, false);
    for (double p : c.drop_sweep) check_pct(p, "drop sweep value", true, false);
    check_pct(c.select_pct, "select_pct", false, true);
    check_pct(c.batch_pct, "batch_pct", false, true);
    if (c.al_epochs < 1) throw ValidationError("active epochs must be positive");
    if (c.adapt_epochs < 2) throw ValidationError("adapt_epochs must be at least 2");
    if (c.train.epochs < 2) throw ValidationError("training needs at least 2 epochs");
    if (c.neighbors < 1) throw ValidationError("n must be positive");
    if (!(c.target_accuracy >= 0.0 && c.target_accuracy <= 1.0)) throw ValidationError("target_accuracy must be in [0, 1]");
    if (!(c.grid_step > 0.0 && c.grid_step <= 1.0)) throw ValidationError("grid_step must be in (0, 1]");
    if (c.synthetic && (c.train_features || c.test_features))
        throw ValidationError("choose either synthetic inputs or feature files, not both");
}

}  // namespace

SyntheticSpec test_spec(const SyntheticInputs& inputs) {
    SyntheticSpec s = inputs.train;
    s.noise_rate = 0.0;
    s.num_samples = inputs.test_samples;
    s.recording_length = inputs.test_recording_length;
    s.recording_shift = inputs.test_recording_shift;
    s.id_prefix = "t";
    s.recording_prefix = "test";
    s.seed = Rng::derive(inputs.train.seed, 1);
    return s;
}

ojson synthetic_spec_to_json(const SyntheticSpec& s) {
    ojson j;
    j["num_classes"] = s.num_classes;
    j["dims"] = s.dims;
    j["noise_dims"] = s.noise_dims;
    if (!s.cluster_means.empty()) j["cluster_means"] = s.cluster_means;
    j["separation"] = s.separation;
    j["cluster_spread"] = s.cluster_spread;
    j["overlap"] = s.overlap;
    j["noise_rate"] = s.noise_rate;
    j["noise_mode"] = std::string(to_string(s.noise_mode));
    j["outlier_rate"] = s.outlier_rate;
    j["recording_shift"] = s.recording_shift;
    j["stay_prob"] = s.stay_prob;
    j["num_samples"] = s.num_samples;
    j["recording_length"] = s.recording_length;
    j["id_prefix"] = s.id_prefix;
    j["recording_prefix"] = s.recording_prefix;
    j["seed"] = s.seed;
    return j;
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec s) {
    reject_unknown(j,
                   {"num_classes", "dims", "noise_dims", "cluster_means", "separation", "cluster_spread", "overlap",
                    "noise_rate", "noise_mode", "outlier_rate", "recording_shift", "stay_prob", "num_samples",
                    "recording_length", "id_prefix", "recording_prefix", "seed", "test_samples",
                    "test_recording_length", "test_recording_shift"},
                   "synthetic spec");
    try {
        read(j, "num_classes", s.num_classes);
        read(j, "dims", s.dims);
        read(j, "noise_dims", s.noise_dims);
        read(j, "cluster_means", s.cluster_means);
        read(j, "separation", s.separation);
        read(j, "cluster_spread", s.cluster_spread);
        read(j, "overlap", s.overlap);
        read(j, "noise_rate", s.noise_rate);
        if (j.contains("noise_mode")) s.noise_mode = parse_noise_mode(j.at("noise_mode").get<std::string>());
        read(j, "outlier_rate", s.outlier_rate);
        read(j, "recording_shift", s.recording_shift);
        read(j, "stay_prob", s.stay_prob);
        read(j, "num_samples", s.num_samples);
        read(j, "recording_length", s.recording_length);
        read(j, "id_prefix", s.id_prefix);
        read(j, "recording_prefix", s.recording_prefix);
        read(j, "seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("synthetic spec: ") + e.what());
    }
    return s;
}

SyntheticInputs benchmark_inputs(std::uint64_t seed) {
    SyntheticInputs in;
    in.train.num_classes = 5;
    in.train.dims = 8;
    in.train.separation = 8.0;
    in.train.overlap = 0.55;
    in.train.noise_rate = 0.1;
    in.train.noise_mode = NoiseMode::confusion;
    in.train.num_samples = 2000;
    in.train.recording_length = 100;
    in.train.seed = seed;
    in.test_samples = 2000;
    in.test_recording_length = 500;
    in.test_recording_shift = 1.5;
    return in;
}

PipelineConfig benchmark_config(std::uint64_t seed) {
    PipelineConfig c;
    c.seed = seed;
    c.synthetic = benchmark_inputs(seed);
    c.train.hidden = 16;
    c.train.epochs = 10;
    c.train.batch_size = 32;
    c.train.learning_rate = 0.1;
    return c;
}

PipelineConfig parse_pipeline_config(std::string_view text, const fs::path& base_dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(j, {"output_dir", "seed", "inputs", "train", "collect", "select", "active", "defer"}, "config");
    PipelineConfig c;
    auto path = [&](const nlohmann::json& v) {
        fs::path p = v.get<std::string>();
        return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    try {
        if (j.contains("output_dir")) c.output_dir = path(j["output_dir"]);
        read(j, "seed", c.seed);
        if (j.contains("inputs")) {
            const auto& in = j["inputs"];
            reject_unknown(in, {"synthetic", "train_features", "test_features", "dynamics_log", "model"}, "inputs");
            if (in.contains("synthetic")) {
                const auto& sj = in["synthetic"];
                SyntheticInputs si = benchmark_inputs(c.seed);
                si.train = synthetic_spec_from_json(sj, si.train);
                if (!sj.contains("seed")) si.train.seed = c.seed;
                read(sj, "test_samples", si.test_samples);
                read(sj, "test_recording_length", si.test_recording_length);
                read(sj, "test_recording_shift", si.test_recording_shift);
                c.synthetic = si;
            }
            if (in.contains("train_features")) c.train_features = path(in["train_features"]);
            if (in.contains("test_features")) c.test_features = path(in["test_features"]);
            if (in.contains("dynamics_log")) c.dynamics_log = path(in["dynamics_log"]);
            if (in.contains("model")) c.model = path(in["model"]);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            reject_unknown(t, {"hidden", "epochs", "batch_size", "learning_rate", "weight_decay"}, "train");
            read(t, "hidden", c.train.hidden);
            read(t, "epochs", c.train.epochs);
            read(t, "batch_size", c.train.batch_size);
            read(t, "learning_rate", c.train.learning_rate);
            read(t, "weight_decay", c.train.weight_decay);
        }
        if (j.contains("collect")) {
            const auto& t = j["collect"];
            reject_unknown(t, {"top_pct", "easy_hard_pct", "ambiguity"}, "collect");
            read(t, "top_pct", c.top_pct);
            read(t, "easy_hard_pct", c.easy_hard_pct);
            if (t.contains("ambiguity")) c.ambiguity = parse_ambiguity_kind(t["ambiguity"].get<std::string>());
        }
        if (j.contains("select")) {
            const auto& t = j["select"];
            reject_unknown(t, {"drop_pct", "ranking_metric", "sweep"}, "select");
            read(t, "drop_pct", c.drop_pct);
            if (t.contains("ranking_metric"))
                c.ranking_metric = parse_ranking_metric(t["ranking_metric"].get<std::string>());
            read(t, "sweep", c.drop_sweep);
        }
        if (j.contains("active")) {
            const auto& t = j["active"];
            reject_unknown(t, {"select_pct", "batch_pct", "epochs", "adapt_epochs", "finetune"}, "active");
            read(t, "select_pct", c.select_pct);
            read(t, "batch_pct", c.batch_pct);
            read(t, "epochs", c.al_epochs);
            read(t, "adapt_epochs", c.adapt_epochs);
            if (t.contains("finetune")) {
                const auto& f = t["finetune"];
                reject_unknown(f, {"learning_rate", "batch_size", "passes", "weight_decay"}, "finetune");
                read(f, "learning_rate", c.finetune.learning_rate);
                read(f, "batch_size", c.finetune.batch_size);
                read(f, "passes", c.finetune.passes);
                read(f, "weight_decay", c.finetune.weight_decay);
            }
        }
        if (j.contains("defer")) {
            const auto& t = j["defer"];
            reject_unknown(t, {"metric", "n", "distance", "target_accuracy", "grid_step"}, "defer");
            if (t.contains("metric")) c.deferral_metric = parse_deferral_metric(t["metric"].get<std::string>());
            read(t, "n", c.neighbors);
            if (t.contains("distance")) c.distance = parse_distance_metric(t["distance"].get<std::string>());
            read(t, "target_accuracy", c.target_accuracy);
            read(t, "grid_step", c.grid_step);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    validate(c);
    return c;
}

std::string pipeline_config_to_json(const PipelineConfig& c) {
    ojson j;
    j["output_dir"] = c.output_dir.string();
    j["seed"] = c.seed;
    ojson in = ojson::object();
    if (c.synthetic) {
        auto s = synthetic_spec_to_json(c.synthetic->train);
        s["test_samples"] = c.synthetic->test_samples;
        s["test_recording_length"] = c.synthetic->test_recording_length;
        s["test_recording_shift"] = c.synthetic->test_recording_shift;
        in["synthetic"] = s;
    }
    if (c.train_features) in["train_features"] = c.train_features->string();
    if (c.test_features) in["test_features"] = c.test_features->string();
    if (c.dynamics_log) in["dynamics_log"] = c.dynamics_log->string();
    if (c.model) in["model"] = c.model->string();
    j["inputs"] = in;
    j["train"] = {{"hidden", c.train.hidden},
                  {"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"weight_decay", c.train.weight_decay}};
    j["collect"] = {{"top_pct", c.top_pct}, {"easy_hard_pct", c.easy_hard_pct}, {"ambiguity", to_string(c.ambiguity)}};
    j["select"] = {{"drop_pct", c.drop_pct}, {"ranking_metric", to_string(c.ranking_metric)}, {"sweep", c.drop_sweep}};
    j["active"] = {{"select_pct", c.select_pct},
                   {"batch_pct", c.batch_pct},
                   {"epochs", c.al_epochs},
                   {"adapt_epochs", c.adapt_epochs},
                   {"finetune",
                    {{"learning_rate", c.finetune.learning_rate},
                     {"batch_size", c.finetune.batch_size},
                     {"passes", c.finetune.passes},
                     {"weight_decay", c.finetune.weight_decay}}}};
    j["defer"] = {{"metric", to_string(c.deferral_metric)},
                  {"n", c.neighbors},
                  {"distance", c.distance == DistanceMetric::euclidean ? "euclidean" : "cosine"},
                  {"target_accuracy", c.target_accuracy},
                  {"grid_step", c.grid_step}};
    return j.dump(2) + "\n";
}

void apply_environment(PipelineConfig& config) {
    if (const char* out = std::getenv("UPASS_OUT"); out != nullptr && *out != '\0') config.output_dir = out;
}

ojson stage_report_json(const StageReport& r) {
    ojson j;
    j["stage"] = to_string(r.stage);
    j["status"] = r.status;
    j["accuracy"] = r.accuracy ? ojson(*r.accuracy) : ojson(nullptr);
    j["parameters"] = r.parameters;
    j["artifacts"] = r.artifacts;
    j["details"] = r.details;
    return j;
}

std::string summary_to_json(std::span<const StageReport> reports) {
    ojson j;
    j["stages"] = ojson::array();
    for (const auto& r : reports) j["stages"].push_back(stage_report_json(r));
    return j.dump(2) + "\n";
}

int exit_code_for(const std::exception& error) {
    if (dynamic_cast<const NotFoundError*>(&error) || dynamic_cast<const ValidationError*>(&error)) return 2;
    return 1;
}

// ---------------------------------------------------------------- stages

namespace {

std::string predictions_csv(const FeatureTable& table, const Eigen::MatrixXd& probs) {
    const auto pred = argmax_rows(probs);
    std::string out = "sample_id,recording_id,label,prediction\n";
    for (std::size_t i = 0; i < table.size(); ++i) {
        out += table.sample_ids[i] + ',' + table.recording_ids[i] + ',' +
               (table.labels[i] ? std::to_string(*table.labels[i]) : std::string()) + ',' + std::to_string(pred[i]) +
               '\n';
    }
    return out;
}

std::vector<int> require_labels(const FeatureTable& table, std::string_view what) {
    std::vector<int> out;
    out.reserve(table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (!table.labels[i]) throw ValidationError(std::string(what) + " needs labels; sample " + table.sample_ids[i] + " has none");
        out.push_back(*table.labels[i]);
    }
    return out;
}

bool fully_labeled(const FeatureTable& table) {
    return std::all_of(table.labels.begin(), table.labels.end(), [](const auto& l) { return l.has_value(); });
}

ojson train_params(const TrainConfig& t) {
    return {{"hidden", t.hidden},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"weight_decay", t.weight_decay}};
}

constexpr std::uint64_t kTrainStream = 10;

class Runner {
public:
    Runner(const PipelineConfig& config) : c_(config), out_(config.output_dir) {}

    std::vector<StageReport> run(std::span<const Stage> stages) {
        validate(c_);
        check_inputs();
        load_data();
        std::vector<Stage> order(stages.begin(), stages.end());
        std::sort(order.begin(), order.end());
        order.erase(std::unique(order.begin(), order.end()), order.end());
        std::vector<StageReport> reports;
        for (Stage s : order) {
            StageReport r;
            switch (s) {
                case Stage::collect: r = collect(); break;
                case Stage::select: r = select(); break;
                case Stage::active: r = active(); break;
                case Stage::defer: r = defer(); break;
            }
            write(std::string(to_string(s)) + "/report.json", stage_report_json(r).dump(2) + "\n", nullptr);
            reports.push_back(std::move(r));
        }
        write_file(out_ / "summary.json", summary_to_json(reports));
        return reports;
    }

private:
    const PipelineConfig& c_;
    fs::path out_;

    std::optional<SyntheticDataset> synth_train_;
    std::optional<FeatureTable> train_;
    std::optional<FeatureTable> test_;
    std::optional<DynamicsLog> log_;
    std::vector<SampleUncertainty> metrics_;
    std::optional<ModelCheckpoint> model_;
    std::string model_source_;
    std::optional<std::vector<std::string>> kept_;
    std::optional<Eigen::MatrixXd> test_outputs_;
    std::set<std::string> queried_;

    void write(const std::string& rel, std::string_view contents, StageReport* report) {
        write_file(out_ / rel, contents);
        if (report) report->artifacts.push_back(rel);
    }

    void check_inputs() const {
        for (const auto* p : {&c_.train_features, &c_.test_features, &c_.dynamics_log, &c_.model}) {
            if (*p && !fs::exists(**p)) throw NotFoundError("input not found: " + (*p)->string());
        }
    }

    void load_data() {
        if (c_.synthetic) {
            synth_train_ = generate_synthetic(c_.synthetic->train);
            train_ = synth_train_->table();
            test_ = generate_synthetic(test_spec(*c_.synthetic)).table(true);
        } else {
            if (c_.train_features) train_ = load_feature_csv(*c_.train_features);
            if (c_.test_features) test_ = load_feature_csv(*c_.test_features);
        }
        if (train_) write_file(out_ / "data" / "train_features.csv", feature_table_to_csv(*train_));
        if (test_) write_file(out_ / "data" / "test_features.csv", feature_table_to_csv(*test_));
    }

    std::optional<double> test_accuracy(const Eigen::MatrixXd& probs) const {
        if (!test_ || !fully_labeled(*test_)) return std::nullopt;
        return accuracy(probs, require_labels(*test_, "accuracy"));
    }

    const DynamicsLog& need_log() {
        if (!log_) {
            fs::path p = c_.dynamics_log ? *c_.dynamics_log : out_ / "collect" / "dynamics.jsonl";
            if (!fs::exists(p)) throw NotFoundError("no training dynamics log: run collect or set inputs.dynamics_log");
            log_ = ingest_log(p, log_format_from_path(p));
        }
        if (metrics_.empty()) {
            metrics_ = sample_metrics(*log_);
            apply_strata(metrics_, c_.ambiguity, c_.top_pct, c_.easy_hard_pct);
        }
        return *log_;
    }

    const FeatureTable& need_train() const {
        if (!train_) throw NotFoundError("no training features: set inputs.train_features or inputs.synthetic");
        return *train_;
    }

    const FeatureTable& need_test() const {
        if (!test_) throw NotFoundError("no test features: set inputs.test_features or inputs.synthetic");
        return *test_;
    }

    const ModelCheckpoint& need_model() {
        if (!model_ && c_.model) {
            model_ = parse_checkpoint_json(read_file(*c_.model));
            model_source_ = c_.model->string();
        }
        if (!model_) {
            for (const char* stage : {"select", "collect"}) {
                const auto p = out_ / stage / "model.json";
                if (fs::exists(p)) {
                    model_ = parse_checkpoint_json(read_file(p));
                    model_source_ = std::string(stage) + "/model.json";
                    break;
                }
            }
            if (!model_) throw NotFoundError("no trained model: run collect or select first");
        }
        return *model_;
    }

    std::vector<std::string> kept_ids() {
        if (!kept_) {
            const auto p = out_ / "select" / "manifest.json";
            if (fs::exists(p)) kept_ = parse_manifest_json(read_file(p)).kept;
        }
        return kept_ ? *kept_ : need_train().sample_ids;
    }

    TrainResult train_on(const FeatureTable& table) const {
        return train_logged(table, c_.train, Rng::derive(c_.seed, kTrainStream));
    }

    // -------------------------------------------------------- collect

    StageReport collect() {
        StageReport r;
        r.stage = Stage::collect;
        r.parameters = {{"top_pct", c_.top_pct},
                        {"easy_hard_pct", c_.easy_hard_pct},
                        {"ambiguity", to_string(c_.ambiguity)},
                        {"train", train_params(c_.train)},
                        {"seed", c_.seed}};
        if (train_) {
            auto run = train_on(*train_);
            log_ = std::move(run.log);
            model_ = run.checkpoints.back();
            model_source_ = "collect/model.json";
            write("collect/dynamics.jsonl", log_to_jsonl(*log_), &r);
            write("collect/model.json", checkpoint_to_json(*model_), &r);
        } else if (!c_.dynamics_log) {
            throw NotFoundError("collect needs training features or a dynamics log");
        }
        need_log();
        write("collect/metrics.csv", metrics_to_csv(metrics_), &r);

        std::map<Stratum, PlotSeries> map;
        std::string map_csv = "sample_id,v_al,c,stratum\n";
        for (const auto& m : metrics_) {
            auto& s = map[m.stratum];
            s.name = std::string(to_string(m.stratum));
            s.scatter = true;
            s.x.push_back(m.v_al);
            s.y.push_back(m.confidence);
            map_csv += m.sample_id + ',' + format_double(m.v_al) + ',' + format_double(m.confidence) + ',' +
                       std::string(to_string(m.stratum)) + '\n';
        }
        std::vector<PlotSeries> series;
        for (auto& [k, s] : map) series.push_back(std::move(s));
        write("collect/map.csv", map_csv, &r);
        write("collect/map.svg", line_plot_svg("Training data map", "data uncertainty v_al", "confidence c", series), &r);

        ojson counts = ojson::object();
        for (const auto& m : metrics_) counts[std::string(to_string(m.stratum))] = counts.value(std::string(to_string(m.stratum)), 0) + 1;
        const auto summary = summarize_config("train", metrics_);
        r.details["num_samples"] = summary.num_samples;
        r.details["mean_confidence"] = summary.mean_confidence;
        r.details["mean_v_al"] = summary.mean_v_al;
        r.details["strata"] = counts;
        if (synth_train_) {
            std::vector<double> v_al;
            for (const auto& m : metrics_) v_al.push_back(m.v_al);
            const auto flips = std::count(synth_train_->flip_mask.begin(), synth_train_->flip_mask.end(), true);
            if (flips > 0 && static_cast<std::size_t>(flips) < v_al.size())
                r.details["label_noise_auroc"] = auroc(v_al, synth_train_->flip_mask);
        }
        if (model_ && test_) {
            const auto probs = predict_proba(*model_, test_->features);
            r.accuracy = test_accuracy(probs);
            write("collect/predictions.csv", predictions_csv(*test_, probs), &r);
        }
        return r;
    }

    // -------------------------------------------------------- select

    StageReport select() {
        StageReport r;
        r.stage = Stage::select;
        r.parameters = {{"drop_pct", c_.drop_pct},
                        {"ranking_metric", to_string(c_.ranking_metric)},
                        {"sweep", c_.drop_sweep},
                        {"train", train_params(c_.train)},
                        {"seed", c_.seed}};
        const auto& log = need_log();
        const auto manifest = select_data(metrics_, c_.drop_pct, c_.ranking_metric, log_digest(log));
        kept_ = manifest.kept;
        write("select/manifest.json", manifest_to_json(manifest), &r);
        r.details["kept"] = manifest.kept.size();
        r.details["dropped"] = manifest.dropped.size();
        if (synth_train_) {
            std::set<std::string> flipped;
            for (std::size_t i = 0; i < synth_train_->size(); ++i)
                if (synth_train_->flip_mask[i]) flipped.insert(synth_train_->sample_ids[i]);
            std::size_t hits = 0;
            for (const auto& id : manifest.dropped) hits += flipped.count(id);
            r.details["dropped_flipped"] = hits;
        }
        if (!train_) return r;

        auto run = train_on(select_samples(*train_, manifest.kept));
        model_ = run.checkpoints.back();
        model_source_ = "select/model.json";
        write("select/model.json", checkpoint_to_json(*model_), &r);
        if (test_) {
            const auto probs = predict_proba(*model_, test_->features);
            r.accuracy = test_accuracy(probs);
            write("select/predictions.csv", predictions_csv(*test_, probs), &r);
        }
        if (!c_.drop_sweep.empty() && test_ && fully_labeled(*test_)) {
            const auto truth = require_labels(*test_, "sweep");
            PlotSeries s{"test accuracy", {}, {}};
            std::string csv = "drop_pct,dropped,accuracy\n";
            for (double p : c_.drop_sweep) {
                const auto m = select_data(metrics_, p, c_.ranking_metric);
                const auto model = train_on(select_samples(*train_, m.kept)).checkpoints.back();
                const double acc = accuracy(predict_proba(model, test_->features), truth);
                csv += format_double(p) + ',' + std::to_string(m.dropped.size()) + ',' + format_double(acc) + '\n';
                s.x.push_back(p);
                s.y.push_back(acc);
            }
            write("select/sweep.csv", csv, &r);
            write("select/sweep.svg", line_plot_svg("Accuracy after removing ambiguous data", "dropped (%)", "accuracy", std::span(&s, 1)), &r);
        }
        return r;
    }

    // -------------------------------------------------------- active

    StageReport active() {
        StageReport r;
        r.stage = Stage::active;
        r.parameters = {{"select_pct", c_.select_pct},
                        {"batch_pct", c_.batch_pct},
                        {"epochs", c_.al_epochs},
                        {"adapt_epochs", c_.adapt_epochs},
                        {"finetune",
                         {{"learning_rate", c_.finetune.learning_rate},
                          {"batch_size", c_.finetune.batch_size},
                          {"passes", c_.finetune.passes},
                          {"weight_decay", c_.finetune.weight_decay}}},
                        {"seed", c_.seed}};
        const auto& model = need_model();
        const auto& test = need_test();
        const auto truth = require_labels(test, "active learning with a simulated oracle");
        r.details["model"] = model_source_;

        // recordings in first-appearance order
        std::vector<std::string> rec_order;
        std::map<std::string, std::vector<std::size_t>> rec_rows;
        for (std::size_t i = 0; i < test.size(); ++i) {
            auto& rows = rec_rows[test.recording_ids[i]];
            if (rows.empty()) rec_order.push_back(test.recording_ids[i]);
            rows.push_back(i);
        }

        TrainConfig adapt = c_.train;
        adapt.epochs = c_.adapt_epochs;
        std::vector<std::pair<std::string, DynamicsLog>> logs;
        for (std::size_t k = 0; k < rec_order.size(); ++k) {
            const auto table = subset_rows(test, rec_rows[rec_order[k]]);
            logs.emplace_back(rec_order[k], self_train_logged(model, table, adapt, Rng::derive(c_.seed, 1000 + k)));
        }
        const auto rankings = rank_recordings(logs, c_.select_pct);
        write("active/rankings.csv", rankings_to_csv(rankings), &r);

        Eigen::MatrixXd outputs = predict_proba(model, test.features);
        const double before = accuracy(outputs, truth);
        std::vector<double> curve(c_.al_epochs + 1, 0.0);
        std::size_t selected = 0;
        ojson per_rec = ojson::array();
        std::string queried_csv = "sample_id,recording_id,epoch\n";
        queried_.clear();
        for (std::size_t k = 0; k < rec_order.size(); ++k) {
            const auto& rec = rec_order[k];
            const bool chosen = std::any_of(rankings.begin(), rankings.end(),
                                            [&](const auto& x) { return x.recording_id == rec && x.selected; });
            if (!chosen) continue;
            ++selected;
            const auto& rows = rec_rows[rec];
            const auto table = subset_rows(test, rows);
            std::vector<int> rec_truth;
            std::map<std::string, int> oracle;
            for (std::size_t i = 0; i < table.size(); ++i) {
                rec_truth.push_back(*table.labels[i]);
                oracle[table.sample_ids[i]] = *table.labels[i];
            }
            FineTuneTrainer trainer(model, table, c_.finetune, Rng::derive(c_.seed, 2000 + k));
            auto session = start_session(rec, table.sample_ids, trainer.outputs(), c_.al_epochs, c_.batch_pct, trainer.id());
            while (session.status == SessionStatus::running)
                al_step(session, simulated_answers(issue_entropy_batch(session), oracle), trainer);
            session.trainer_state = trainer.save_state();
            write("active/sessions/" + rec + ".json", session_to_json(session), &r);

            for (std::size_t e = 0; e < session.query_history.size(); ++e)
                for (const auto& id : session.query_history[e]) {
                    queried_.insert(id);
                    queried_csv += id + ',' + rec + ',' + std::to_string(e) + '\n';
                }
            for (std::size_t e = 0; e < session.outputs.size(); ++e) curve[e] += accuracy(session.outputs[e], rec_truth);
            const auto& final_out = session.current_outputs();
            for (std::size_t i = 0; i < rows.size(); ++i)
                outputs.row(static_cast<Eigen::Index>(rows[i])) = final_out.row(static_cast<Eigen::Index>(i));
            per_rec.push_back({{"recording_id", rec},
                               {"before", accuracy(session.outputs.front(), rec_truth)},
                               {"after", accuracy(final_out, rec_truth)},
                               {"labeled", session.labeled.size()}});
        }
        test_outputs_ = outputs;
        write("active/queried.csv", queried_csv, &r);
        write("active/outputs.csv", outputs_to_csv(test.sample_ids, outputs), &r);
        write("active/predictions.csv", predictions_csv(test, outputs), &r);
        if (selected > 0) {
            PlotSeries s{"selected recordings", {}, {}};
            std::string csv = "epoch,accuracy\n";
            for (std::size_t e = 0; e < curve.size(); ++e) {
                const double a = curve[e] / static_cast<double>(selected);
                csv += std::to_string(e) + ',' + format_double(a) + '\n';
                s.x.push_back(static_cast<double>(e));
                s.y.push_back(a);
            }
            write("active/al_curve.csv", csv, &r);
            write("active/al_curve.svg", line_plot_svg("Active learning", "epoch", "accuracy", std::span(&s, 1)), &r);
        }
        r.accuracy = accuracy(outputs, truth);
        r.details["accuracy_before"] = before;
        r.details["recordings"] = rec_order.size();
        r.details["selected"] = selected;
        r.details["queried"] = queried_.size();
        r.details["sessions"] = per_rec;
        return r;
    }

    // -------------------------------------------------------- defer

    StageReport defer() {
        StageReport r;
        r.stage = Stage::defer;
        r.parameters = {{"metric", to_string(c_.deferral_metric)},
                        {"n", c_.neighbors},
                        {"distance", c_.distance == DistanceMetric::euclidean ? "euclidean" : "cosine"},
                        {"target_accuracy", c_.target_accuracy},
                        {"grid_step", c_.grid_step}};
        const auto& model = need_model();
        const auto& test = need_test();
        const auto truth = require_labels(test, "deferral evaluation");

        std::string outputs_source = "model";
        if (!test_outputs_ && fs::exists(out_ / "active" / "outputs.csv")) {
            test_outputs_ = align_outputs(parse_outputs_csv(read_file(out_ / "active" / "outputs.csv")), test.sample_ids);
            const auto qp = out_ / "active" / "queried.csv";
            if (fs::exists(qp)) {
                const auto text = read_file(qp);
                std::size_t pos = text.find('\n');
                while (pos != std::string::npos && pos + 1 < text.size()) {
                    const auto end = text.find('\n', pos + 1);
                    const auto line = text.substr(pos + 1, end - pos - 1);
                    if (!line.empty()) queried_.insert(split_csv(line)[0]);
                    pos = end;
                }
            }
        }
        if (test_outputs_) outputs_source = "active";
        const Eigen::MatrixXd probs = test_outputs_ ? *test_outputs_ : predict_proba(model, test.features);
        r.details["outputs"] = outputs_source;

        ScoreInputs in;
        in.sample_ids = test.sample_ids;
        in.probs = &probs;
        in.n = c_.neighbors;
        std::optional<NeighborIndex> index;
        Eigen::MatrixXd test_emb;
        if (uses_neighbors(c_.deferral_metric)) {
            const auto kept = kept_ids();
            const auto train_table = select_samples(need_train(), kept);
            const auto train_emb = embed(model, train_table);
            NeighborAttachments att;
            bool have_metrics = log_.has_value() || c_.dynamics_log || fs::exists(out_ / "collect" / "dynamics.jsonl");
            if (have_metrics) {
                need_log();
                std::vector<int> labels;
                std::vector<std::string> label_ids;
                for (std::size_t i = 0; i < train_table.size(); ++i)
                    if (train_table.labels[i]) {
                        label_ids.push_back(train_table.sample_ids[i]);
                        labels.push_back(*train_table.labels[i]);
                    }
                att = attachments_from_metrics(train_emb.sample_ids, metrics_, label_ids, labels);
            } else {
                std::vector<int> labels = require_labels(train_table, "neighbour attachments");
                att.label = labels;
            }
            index = NeighborIndex::build(train_emb, att, c_.distance);
            test_emb = embed(model, test).vectors;
            in.embeddings = &test_emb;
            in.index = &*index;
        }
        const auto scores = score(c_.deferral_metric, in);
        write("defer/scores.csv", scores_to_csv(scores), &r);
        write("defer/predictions.csv", predictions_csv(test, probs), &r);
        write("defer/outputs.csv", outputs_to_csv(test.sample_ids, probs), &r);

        const auto pred = argmax_rows(probs);
        std::vector<bool> correct(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) correct[i] = pred[i] == truth[i];

        std::vector<double> grid;
        const auto steps = static_cast<std::size_t>(std::llround(1.0 / c_.grid_step));
        for (std::size_t k = 1; k <= steps; ++k) grid.push_back(std::min(1.0, static_cast<double>(k) * c_.grid_step));
        if (grid.empty() || grid.back() != 1.0) grid.push_back(1.0);

        auto evaluate = [&](const std::vector<DeferralScore>& s, const std::vector<bool>& ok, const std::string& tag,
                            ojson& out) {
            auto curve = retention_curve(s, ok, grid);
            curve.metric_id = std::string(to_string(c_.deferral_metric));
            const auto th = pick_threshold(curve, c_.target_accuracy);
            write("defer/curve_" + tag + ".csv", curve_to_csv(curve), &r);
            out["samples"] = s.size();
            out["overall_accuracy"] = curve.points.back().accuracy;
            if (th) {
                out["status"] = "ok";
                out["z"] = th->z;
                out["score_threshold"] = th->score_threshold;
                out["retained"] = th->retained;
                out["deferred"] = s.size() - th->retained;
                out["accuracy"] = th->accuracy;
            } else {
                out["status"] = "unreachable";
                out["accuracy"] = curve.points.back().accuracy;
            }
            return curve;
        };

        ojson all = ojson::object(), excl = ojson::object();
        const auto curve_all = evaluate(scores, correct, "all", all);
        std::vector<DeferralScore> s_ex;
        std::vector<bool> c_ex;
        for (std::size_t i = 0; i < scores.size(); ++i)
            if (!queried_.count(scores[i].sample_id)) {
                s_ex.push_back(scores[i]);
                c_ex.push_back(correct[i]);
            }
        std::vector<PlotSeries> plot;
        auto to_series = [](const RetentionCurve& c, std::string name) {
            PlotSeries s{std::move(name), {}, {}};
            for (const auto& p : c.points) {
                s.x.push_back(p.z);
                s.y.push_back(p.accuracy);
            }
            return s;
        };
        plot.push_back(to_series(curve_all, "all test samples"));
        if (!s_ex.empty()) {
            const auto curve_ex = evaluate(s_ex, c_ex, "excluding_queried", excl);
            if (!queried_.empty()) plot.push_back(to_series(curve_ex, "excluding queried"));
        }
        write("defer/curve.svg",
              line_plot_svg("Accuracy of the retained samples (" + std::string(to_string(c_.deferral_metric)) + ")",
                            "retained fraction z", "accuracy", plot),
              &r);

        // the deferral queue at the chosen threshold, most uncertain first
        if (all["status"] == "ok" && all["deferred"].get<std::size_t>() > 0) {
            const double frac = static_cast<double>(all["deferred"].get<std::size_t>()) / static_cast<double>(scores.size());
            std::string q = "sample_id,score\n";
            for (const auto& s : most_uncertain(scores, frac)) q += s.sample_id + ',' + format_double(s.score) + '\n';
            write("defer/queue.csv", q, &r);
        }
        if (uses_neighbors(c_.deferral_metric)) {
            const auto rep = explain(scores, correct, test.recording_ids);
            write("defer/explanation.json", explanation_to_json(rep), &r);
        }

        r.status = all["status"].get<std::string>();
        r.accuracy = all["accuracy"].get<double>();
        r.details["including_queried"] = all;
        if (!s_ex.empty()) r.details["excluding_queried"] = excl;
        r.details["queried"] = queried_.size();
        return r;
    }
};

}  // namespace

std::vector<StageReport> run_pipeline(const PipelineConfig& config, std::span<const Stage> stages) {
    if (stages.empty()) throw ValidationError("no stages requested");
    Runner runner(config);
    return runner.run(stages);
}

}  // namespace upass
