#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "upass/active.hpp"
#include "upass/curation.hpp"
#include "upass/deferral.hpp"
#include "upass/dynamics.hpp"
#include "upass/error.hpp"
#include "upass/neighbors.hpp"
#include "upass/pipeline.hpp"
#include "upass/stats.hpp"

namespace py = pybind11;
using namespace upass;

namespace {

using Probs = py::array_t<double, py::array::c_style | py::array::forcecast>;

// (N, E, C) array plus labels into a log; ids default to s0..s{N-1}.
DynamicsLog make_log(const Probs& probs, const std::vector<std::optional<int>>& labels,
                     std::optional<std::vector<std::string>> sample_ids,
                     std::optional<std::vector<std::string>> recording_ids) {
    if (probs.ndim() != 3) throw ValidationError("probs must have shape (samples, epochs, classes)");
    DynamicsLog log;
    const auto n = static_cast<std::size_t>(probs.shape(0));
    log.num_epochs = static_cast<std::size_t>(probs.shape(1));
    log.num_classes = static_cast<std::size_t>(probs.shape(2));
    log.probs.assign(probs.data(), probs.data() + probs.size());
    if (labels.size() != n) throw ValidationError("labels must have one entry per sample");
    log.labels = labels;
    if (sample_ids) {
        log.sample_ids = *sample_ids;
    } else {
        for (std::size_t i = 0; i < n; ++i) log.sample_ids.push_back("s" + std::to_string(i));
    }
    log.recording_ids = recording_ids ? *recording_ids : std::vector<std::string>(n, "r0");
    log.validate();
    return log;
}

py::dict metrics_dict(const std::vector<SampleUncertainty>& m) {
    std::vector<std::string> ids;
    std::vector<double> c, v_al, v_ep, h_al, h_ep;
    std::vector<std::string> strata;
    for (const auto& x : m) {
        ids.push_back(x.sample_id);
        c.push_back(x.confidence);
        v_al.push_back(x.v_al);
        v_ep.push_back(x.v_ep);
        h_al.push_back(x.v_al_entropy);
        h_ep.push_back(x.v_ep_entropy);
        strata.emplace_back(to_string(x.stratum));
    }
    py::dict d;
    d["sample_id"] = ids;
    d["confidence"] = py::array(py::cast(c));
    d["v_al"] = py::array(py::cast(v_al));
    d["v_ep"] = py::array(py::cast(v_ep));
    d["v_al_entropy"] = py::array(py::cast(h_al));
    d["v_ep_entropy"] = py::array(py::cast(h_ep));
    d["stratum"] = strata;
    return d;
}

// zero-padded so that sample_id order equals row order
std::vector<std::string> row_ids(Eigen::Index rows) {
    const auto width = std::to_string(std::max<Eigen::Index>(rows - 1, 0)).size();
    std::vector<std::string> ids;
    for (Eigen::Index i = 0; i < rows; ++i) {
        auto s = std::to_string(i);
        ids.push_back("n" + std::string(width - s.size(), '0') + s);
    }
    return ids;
}

std::vector<DeferralScore> to_scores(const std::vector<std::string>& ids, const std::vector<double>& values) {
    if (ids.size() != values.size()) throw ValidationError("sample_ids and scores differ in length");
    std::vector<DeferralScore> out(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out[i].sample_id = ids[i];
        out[i].score = values[i];
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_upass, m) {
    m.doc() = "Training-dynamics uncertainty, data selection, active learning and deferral";

    // translators run last-registered first, so the base class goes first
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<NotFoundError>(m, "NotFoundError", PyExc_FileNotFoundError);
    py::register_exception<ConflictError>(m, "ConflictError", PyExc_RuntimeError);

    m.def(
        "sample_metrics",
        [](const Probs& probs, const std::vector<std::optional<int>>& labels,
           std::optional<std::vector<std::string>> ids, const std::string& ambiguity, double top_pct,
           double easy_hard_pct) {
            auto metrics = sample_metrics(make_log(probs, labels, std::move(ids), std::nullopt));
            apply_strata(metrics, parse_ambiguity_kind(ambiguity), top_pct, easy_hard_pct);
            return metrics_dict(metrics);
        },
        py::arg("probs"), py::arg("labels"), py::arg("sample_ids") = std::nullopt, py::arg("ambiguity") = "aleatoric",
        py::arg("top_pct") = 1.0, py::arg("easy_hard_pct") = 1.0,
        "Confidence, variance and entropy decompositions of a (samples, epochs, classes) array, with strata.");

    m.def(
        "entropy_metrics",
        [](const Probs& probs) {
            const auto n = static_cast<std::size_t>(probs.ndim() == 3 ? probs.shape(0) : 0);
            const auto m = sample_metrics_entropy(
                make_log(probs, std::vector<std::optional<int>>(n), std::nullopt, std::nullopt));
            std::vector<double> al, ep;
            for (const auto& x : m) {
                al.push_back(x.v_al_entropy);
                ep.push_back(x.v_ep_entropy);
            }
            return py::make_tuple(py::array(py::cast(al)), py::array(py::cast(ep)));
        },
        py::arg("probs"), "Label-free (aleatoric, epistemic) entropy terms per sample.");

    m.def(
        "load_log_metrics",
        [](const std::filesystem::path& path) {
            return metrics_dict(sample_metrics(ingest_log(path, log_format_from_path(path))));
        },
        py::arg("path"), "Metrics of a labeled dynamics log file (.jsonl or .csv).");

    m.def(
        "select_data",
        [](const std::vector<std::string>& ids, const std::vector<double>& v_al, double drop_pct) {
            if (ids.size() != v_al.size()) throw ValidationError("sample_ids and v_al differ in length");
            std::vector<SampleUncertainty> metrics(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                metrics[i].sample_id = ids[i];
                metrics[i].v_al = v_al[i];
            }
            const auto manifest = select_data(metrics, drop_pct);
            return py::make_tuple(manifest.kept, manifest.dropped);
        },
        py::arg("sample_ids"), py::arg("v_al"), py::arg("drop_pct") = 1.0,
        "Returns (kept, dropped) after removing the most data-uncertain samples.");

    m.def(
        "knn",
        [](const Eigen::MatrixXd& stored, const Eigen::MatrixXd& queries, std::size_t n, const std::string& distance) {
            EmbeddingSet set;
            set.vectors = stored;
            set.sample_ids = row_ids(stored.rows());
            const auto index = NeighborIndex::build(set, {}, parse_distance_metric(distance));
            const auto k = std::min<std::size_t>(n, index.size());
            Eigen::MatrixXi rows(queries.rows(), static_cast<Eigen::Index>(k));
            Eigen::MatrixXd dist(queries.rows(), static_cast<Eigen::Index>(k));
            std::vector<double> q(static_cast<std::size_t>(queries.cols()));
            for (Eigen::Index i = 0; i < queries.rows(); ++i) {
                for (Eigen::Index j = 0; j < queries.cols(); ++j) q[static_cast<std::size_t>(j)] = queries(i, j);
                const auto res = index.query(q, n);
                for (std::size_t j = 0; j < res.size(); ++j) {
                    rows(i, static_cast<Eigen::Index>(j)) = static_cast<int>(res[j].row);
                    dist(i, static_cast<Eigen::Index>(j)) = res[j].distance;
                }
            }
            return py::make_tuple(rows, dist);
        },
        py::arg("stored"), py::arg("queries"), py::arg("n") = kDefaultNeighbors, py::arg("distance") = "euclidean",
        "Exact nearest neighbours: (row indices, distances), ties by row.");

    m.def(
        "deferral_scores",
        [](const std::string& metric, const Eigen::MatrixXd& probs, std::optional<Eigen::MatrixXd> train_embeddings,
           std::optional<Eigen::MatrixXd> test_embeddings, std::optional<std::vector<int>> train_labels,
           std::optional<std::vector<double>> train_confidence, std::size_t n) {
            const auto mid = parse_deferral_metric(metric);
            std::vector<std::string> ids;
            for (Eigen::Index i = 0; i < probs.rows(); ++i) ids.push_back("q" + std::to_string(i));
            ScoreInputs in;
            in.sample_ids = ids;
            in.probs = &probs;
            in.n = n;
            std::optional<NeighborIndex> index;
            if (uses_neighbors(mid)) {
                if (!train_embeddings || !test_embeddings)
                    throw ValidationError("metric " + metric + " needs train_embeddings and test_embeddings");
                EmbeddingSet set;
                set.vectors = *train_embeddings;
                set.sample_ids = row_ids(set.vectors.rows());
                NeighborAttachments att;
                if (train_labels) att.label = *train_labels;
                if (train_confidence) att.confidence = *train_confidence;
                index = NeighborIndex::build(set, att);
                in.embeddings = &*test_embeddings;
                in.index = &*index;
            }
            std::vector<double> out;
            for (const auto& s : score(mid, in)) out.push_back(s.score);
            return py::array(py::cast(out));
        },
        py::arg("metric"), py::arg("probs"), py::arg("train_embeddings") = std::nullopt,
        py::arg("test_embeddings") = std::nullopt, py::arg("train_labels") = std::nullopt,
        py::arg("train_confidence") = std::nullopt, py::arg("n") = kDefaultNeighbors,
        "Per-sample deferral scores, higher = more uncertain.");

    m.def(
        "retention_curve",
        [](const std::vector<std::string>& ids, const std::vector<double>& scores, const std::vector<bool>& correct,
           std::optional<std::vector<double>> grid, const std::string& view) {
            const auto g = grid ? *grid : default_retention_grid();
            RetentionView v;
            if (view == "most_certain") v = RetentionView::most_certain;
            else if (view == "most_uncertain") v = RetentionView::most_uncertain;
            else throw ValidationError("view must be most_certain or most_uncertain");
            const auto curve = retention_curve(to_scores(ids, scores), correct, g, v);
            std::vector<double> z, acc;
            for (const auto& p : curve.points) {
                z.push_back(p.z);
                acc.push_back(p.accuracy);
            }
            return py::make_tuple(py::array(py::cast(z)), py::array(py::cast(acc)));
        },
        py::arg("sample_ids"), py::arg("scores"), py::arg("correct"), py::arg("grid") = std::nullopt,
        py::arg("view") = "most_certain", "Returns (z, accuracy) arrays.");

    m.def(
        "pick_threshold",
        [](const std::vector<std::string>& ids, const std::vector<double>& scores, const std::vector<bool>& correct,
           double target_accuracy, std::optional<std::vector<double>> grid) -> py::object {
            const auto g = grid ? *grid : default_retention_grid();
            const auto th = pick_threshold(retention_curve(to_scores(ids, scores), correct, g), target_accuracy);
            if (!th) return py::none();
            py::dict d;
            d["z"] = th->z;
            d["score_threshold"] = th->score_threshold;
            d["accuracy"] = th->accuracy;
            d["retained"] = th->retained;
            return d;
        },
        py::arg("sample_ids"), py::arg("scores"), py::arg("correct"), py::arg("target_accuracy") = 0.85,
        py::arg("grid") = std::nullopt, "Largest retention z meeting the target, or None when unreachable.");

    m.def(
        "next_query_batch",
        [](const std::vector<std::string>& ids, const Eigen::MatrixXd& probs, const std::vector<std::string>& labeled,
           double batch_pct) {
            auto s = start_session("recording", ids, probs, 1, batch_pct, "external");
            for (const auto& id : labeled) s.labeled.emplace_back(id, 0);
            return next_query_batch(s, probs, batch_pct);
        },
        py::arg("sample_ids"), py::arg("probs"), py::arg("labeled") = std::vector<std::string>{},
        py::arg("batch_pct") = 1.0, "Highest-entropy unlabeled samples, ties by sample_id.");

    m.def(
        "rank_recordings",
        [](const Probs& probs, const std::vector<std::string>& recording_ids, double select_pct) {
            const auto n = static_cast<std::size_t>(probs.ndim() == 3 ? probs.shape(0) : 0);
            const auto log = make_log(probs, std::vector<std::optional<int>>(n), std::nullopt, recording_ids);
            std::vector<py::dict> out;
            for (const auto& r : rank_recordings(split_by_recording(log), select_pct)) {
                py::dict d;
                d["recording_id"] = r.recording_id;
                d["v_ep_entropy"] = r.v_ep_entropy;
                d["rank"] = r.rank;
                d["selected"] = r.selected;
                out.push_back(d);
            }
            return out;
        },
        py::arg("probs"), py::arg("recording_ids"), py::arg("select_pct") = 40.0,
        "Recordings by descending mean epistemic entropy; the top select_pct are flagged.");

    m.def(
        "spearman",
        [](const std::vector<double>& x, const std::vector<double>& y, bool exact) {
            const auto c = spearman(x, y, exact ? PValueMethod::exact_permutation : PValueMethod::t_approximation);
            return py::make_tuple(c.r, c.p_value);
        },
        py::arg("x"), py::arg("y"), py::arg("exact") = false, "Spearman (r, two-sided p).");

    m.def("benchmark_config", [](std::uint64_t seed) { return pipeline_config_to_json(benchmark_config(seed)); },
          py::arg("seed") = 0, "Pipeline configuration JSON for the bundled synthetic benchmark.");

    m.def(
        "run_pipeline",
        [](const std::string& config_json, const std::string& stages) {
            auto config = parse_pipeline_config(config_json);
            const auto list = parse_stage_list(stages);
            std::vector<StageReport> reports;
            {
                py::gil_scoped_release release;
                reports = run_pipeline(config, list);
            }
            return summary_to_json(reports);
        },
        py::arg("config_json"), py::arg("stages") = "all", "Runs the pipeline; returns the summary JSON.");
}
