#include "upass/refmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "upass/error.hpp"
#include "upass/io.hpp"

namespace upass {

namespace {

std::string padded(const std::string& prefix, std::size_t value, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*zu", width, value);
    return prefix + buf;
}

template <typename F>
void for_each_data_line(std::string_view text, F&& f) {
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        ++line_no;
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") != std::string_view::npos) f(line_no, line);
        start = end + 1;
    }
}

void softmax_rows(Eigen::MatrixXd& z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        z.row(i) = (z.row(i).array() - m).exp();
        z.row(i) /= z.row(i).sum();
    }
}

Eigen::MatrixXd hidden_layer(const ModelCheckpoint& model, const Eigen::MatrixXd& x) {
    Eigen::MatrixXd a = x * model.hidden_weights.transpose();
    a.rowwise() += model.hidden_bias.transpose();
    return a.array().tanh().matrix();
}

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& x, std::span<const std::size_t> rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(rows[r]));
    return out;
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
    auto j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        j.push_back(row);
    }
    return j;
}

Eigen::MatrixXd json_matrix(const nlohmann::json& j, Eigen::Index cols_if_empty = 0) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    if (rows == 0) return Eigen::MatrixXd(0, cols_if_empty);
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto row = j[static_cast<std::size_t>(r)].get<std::vector<double>>();
        if (static_cast<Eigen::Index>(row.size()) != cols) throw ValidationError("ragged matrix in checkpoint");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
    }
    return m;
}

Eigen::VectorXd json_vector(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Feature tables

FeatureTable parse_feature_csv(std::string_view text) {
    FeatureTable t;
    std::size_t dims = 0;
    bool header_seen = false;
    std::vector<double> values;
    for_each_data_line(text, [&](std::size_t line_no, std::string_view line) {
        const auto f = split_csv(line);
        if (!header_seen) {
            if (f.size() < 4 || f[0] != "sample_id" || f[1] != "recording_id" || f[2] != "label") {
                throw ParseError(line_no, "expected header sample_id,recording_id,label,f0,...");
            }
            for (std::size_t k = 3; k < f.size(); ++k) {
                if (f[k] != "f" + std::to_string(k - 3)) throw ParseError(line_no, "unexpected column '" + f[k] + "'");
            }
            dims = f.size() - 3;
            header_seen = true;
            return;
        }
        if (f.size() != dims + 3) throw ParseError(line_no, "expected " + std::to_string(dims + 3) + " fields");
        try {
            t.sample_ids.push_back(f[0]);
            t.recording_ids.push_back(f[1]);
            t.labels.push_back(f[2].empty() ? std::nullopt
                                            : std::optional<int>(static_cast<int>(parse_int(f[2], "label"))));
            for (std::size_t k = 0; k < dims; ++k) {
                const double v = parse_double(f[3 + k], "feature");
                if (!std::isfinite(v)) throw ValidationError("non-finite feature");
                values.push_back(v);
            }
        } catch (const ParseError&) {
            throw;
        } catch (const ValidationError& e) {
            throw ParseError(line_no, e.what());
        }
    });
    if (!header_seen) throw ValidationError("empty feature file");
    t.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), static_cast<Eigen::Index>(t.sample_ids.size()), static_cast<Eigen::Index>(dims));
    return t;
}

FeatureTable load_feature_csv(const std::filesystem::path& path) {
    return parse_feature_csv(read_file(path));
}

std::string feature_table_to_csv(const FeatureTable& table) {
    std::string out = "sample_id,recording_id,label";
    for (std::size_t k = 0; k < table.dims(); ++k) out += ",f" + std::to_string(k);
    out += '\n';
    for (std::size_t i = 0; i < table.size(); ++i) {
        out += table.sample_ids[i] + ',' + table.recording_ids[i] + ',';
        if (table.labels[i]) out += std::to_string(*table.labels[i]);
        for (Eigen::Index k = 0; k < table.features.cols(); ++k) {
            out += ',' + format_double(table.features(static_cast<Eigen::Index>(i), k));
        }
        out += '\n';
    }
    return out;
}

FeatureTable subset_rows(const FeatureTable& table, std::span<const std::size_t> rows) {
    FeatureTable out;
    for (auto r : rows) {
        if (r >= table.size()) throw ValidationError("row index out of range");
        out.sample_ids.push_back(table.sample_ids[r]);
        out.recording_ids.push_back(table.recording_ids[r]);
        out.labels.push_back(table.labels[r]);
    }
    out.features = rows_of(table.features, rows);
    return out;
}

FeatureTable subset_columns(const FeatureTable& table, std::span<const std::size_t> columns) {
    FeatureTable out = table;
    out.features.resize(table.features.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t c = 0; c < columns.size(); ++c) {
        if (columns[c] >= table.dims()) throw ValidationError("column index out of range");
        out.features.col(static_cast<Eigen::Index>(c)) = table.features.col(static_cast<Eigen::Index>(columns[c]));
    }
    return out;
}

FeatureTable select_samples(const FeatureTable& table, std::span<const std::string> sample_ids) {
    std::unordered_map<std::string_view, std::size_t> pos;
    for (std::size_t i = 0; i < table.size(); ++i) pos.emplace(table.sample_ids[i], i);
    std::vector<std::size_t> rows;
    rows.reserve(sample_ids.size());
    for (const auto& id : sample_ids) {
        const auto it = pos.find(id);
        if (it == pos.end()) throw NotFoundError("sample " + id + " not in feature table");
        rows.push_back(it->second);
    }
    return subset_rows(table, rows);
}

// ---------------------------------------------------------------------------
// Synthetic data

NoiseMode parse_noise_mode(std::string_view name) {
    if (name == "uniform") return NoiseMode::uniform;
    if (name == "confusion") return NoiseMode::confusion;
    if (name == "directional") return NoiseMode::directional;
    throw ValidationError("unknown noise mode '" + std::string(name) + "'");
}

std::string_view to_string(NoiseMode mode) {
    switch (mode) {
        case NoiseMode::uniform: return "uniform";
        case NoiseMode::confusion: return "confusion";
        case NoiseMode::directional: return "directional";
    }
    return "uniform";
}

FeatureTable SyntheticDataset::table(bool clean) const {
    FeatureTable t;
    t.sample_ids = sample_ids;
    t.recording_ids = recording_ids;
    const auto& src = clean ? true_labels : labels;
    t.labels.assign(src.begin(), src.end());
    t.features = features;
    return t;
}

std::vector<std::vector<double>> class_means(const SyntheticSpec& spec) {
    if (!spec.cluster_means.empty()) return spec.cluster_means;
    const auto c = spec.num_classes;
    const auto d = spec.dims;
    const double sep = spec.separation * (1.0 - spec.overlap);
    std::vector<std::vector<double>> means(c, std::vector<double>(d, 0.0));
    if (d >= c) {
        // Scaled simplex corners: every pair of means is `sep` apart.
        for (std::size_t k = 0; k < c; ++k) means[k][k] = sep / std::numbers::sqrt2;
    } else if (d >= 2) {
        const double radius = sep / (2.0 * std::sin(std::numbers::pi / static_cast<double>(c)));
        for (std::size_t k = 0; k < c; ++k) {
            const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(c);
            means[k][0] = radius * std::cos(angle);
            means[k][1] = radius * std::sin(angle);
        }
    } else {
        for (std::size_t k = 0; k < c; ++k) means[k][0] = sep * static_cast<double>(k);
    }
    return means;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes < 2) throw ValidationError("num_classes must be at least 2");
    if (spec.dims < 1) throw ValidationError("dims must be positive");
    if (spec.num_samples < 1) throw ValidationError("num_samples must be positive");
    if (spec.recording_length < 1) throw ValidationError("recording_length must be positive");
    if (!(spec.cluster_spread >= 0.0)) throw ValidationError("cluster_spread must be non-negative");
    if (!(spec.overlap >= 0.0 && spec.overlap < 1.0)) throw ValidationError("overlap must be in [0, 1)");
    if (!(spec.noise_rate >= 0.0 && spec.noise_rate < 1.0)) throw ValidationError("noise_rate must be in [0, 1)");
    if (!(spec.outlier_rate >= 0.0 && spec.outlier_rate <= 1.0)) throw ValidationError("outlier_rate must be in [0, 1]");
    if (!(spec.recording_shift >= 0.0)) throw ValidationError("recording_shift must be non-negative");
    if (!(spec.stay_prob >= 0.0 && spec.stay_prob <= 1.0)) throw ValidationError("stay_prob must be in [0, 1]");
    const auto means = class_means(spec);
    if (means.size() != spec.num_classes) throw ValidationError("cluster_means must have one row per class");
    for (const auto& m : means) {
        if (m.size() != spec.dims) throw ValidationError("cluster_means rows must have `dims` entries");
    }

    const auto n = spec.num_samples;
    const auto d = spec.dims;
    const auto total_dims = d + spec.noise_dims;
    const auto num_recordings = (n + spec.recording_length - 1) / spec.recording_length;

    SyntheticDataset ds;
    ds.seed = spec.seed;
    ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(total_dims));
    ds.true_labels.resize(n);
    ds.flip_mask.assign(n, false);

    Rng label_rng(Rng::derive(spec.seed, 1));
    Rng feature_rng(Rng::derive(spec.seed, 2));
    Rng noise_rng(Rng::derive(spec.seed, 3));
    Rng shift_rng(Rng::derive(spec.seed, 4));

    std::vector<std::vector<double>> shifts(num_recordings, std::vector<double>(d, 0.0));
    for (auto& s : shifts) {
        for (auto& v : s) v = spec.recording_shift * shift_rng.normal();
    }

    const int width = num_recordings > 1000 ? 6 : 3;
    for (std::size_t i = 0; i < n; ++i) {
        const auto rec = i / spec.recording_length;
        const bool first_in_recording = i % spec.recording_length == 0;
        int label = 0;
        if (!first_in_recording && spec.stay_prob > 0.0 && label_rng.uniform() < spec.stay_prob) {
            label = ds.true_labels[i - 1];
        } else {
            label = static_cast<int>(label_rng.below(spec.num_classes));
        }
        ds.true_labels[i] = label;
        const bool outlier = spec.outlier_rate > 0.0 && feature_rng.uniform() < spec.outlier_rate;
        const double spread = spec.cluster_spread * (outlier ? 3.0 : 1.0);
        const auto row = static_cast<Eigen::Index>(i);
        for (std::size_t k = 0; k < d; ++k) {
            ds.features(row, static_cast<Eigen::Index>(k)) =
                means[static_cast<std::size_t>(label)][k] + shifts[rec][k] + spread * feature_rng.normal();
        }
        for (std::size_t k = d; k < total_dims; ++k) {
            ds.features(row, static_cast<Eigen::Index>(k)) = spec.cluster_spread * feature_rng.normal();
        }
        ds.sample_ids.push_back(padded(spec.id_prefix, i, 6));
        ds.recording_ids.push_back(padded(spec.recording_prefix, rec, width));
    }

    ds.labels = ds.true_labels;
    const auto n_flip = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.noise_rate + 1e-9));
    if (n_flip == 0) return ds;

    const auto c = spec.num_classes;
    if (spec.noise_mode == NoiseMode::uniform) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        noise_rng.shuffle(order);
        for (std::size_t r = 0; r < n_flip; ++r) {
            const auto i = order[r];
            const auto shift = 1 + static_cast<int>(noise_rng.below(c - 1));
            ds.labels[i] = (ds.true_labels[i] + shift) % static_cast<int>(c);
            ds.flip_mask[i] = true;
        }
        return ds;
    }

    // Confusion noise: a sample is flipped with weight equal to the generative
    // posterior mass outside its true class, to the most probable other class.
    // Weighted sampling without replacement by exponential keys u^(1/w).
    const double var = std::max(spec.cluster_spread * spec.cluster_spread, 1e-12);
    std::vector<std::pair<double, std::size_t>> keys(n);
    std::vector<int> runner_up(n, 0);
    std::vector<double> loglik(c);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < c; ++k) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) -
                                    shifts[i / spec.recording_length][j] - means[k][j];
                sq += diff * diff;
            }
            loglik[k] = -sq / (2.0 * var);
        }
        const double mx = *std::max_element(loglik.begin(), loglik.end());
        double z = 0.0;
        for (double v : loglik) z += std::exp(v - mx);
        const auto y = static_cast<std::size_t>(ds.true_labels[i]);
        std::size_t target = (y + 1) % c;
        double weight = 0.0;
        if (spec.noise_mode == NoiseMode::directional) {
            weight = std::exp(loglik[target] - mx) / z + 1e-6;
        } else {
            weight = 1.0 - std::exp(loglik[y] - mx) / z + 1e-6;
            target = y == 0 ? 1 : 0;
            for (std::size_t k = 0; k < c; ++k) {
                if (k != y && loglik[k] > loglik[target]) target = k;
            }
        }
        runner_up[i] = static_cast<int>(target);
        double u = noise_rng.uniform();
        while (u <= 0.0) u = noise_rng.uniform();
        keys[i] = {std::log(u) / weight, i};
    }
    std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t r = 0; r < n_flip; ++r) {
        const auto i = keys[r].second;
        ds.labels[i] = runner_up[i];
        ds.flip_mask[i] = true;
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Model

std::string checkpoint_to_json(const ModelCheckpoint& model) {
    nlohmann::ordered_json j;
    j["epoch"] = model.epoch;
    j["seed"] = model.seed;
    j["input_dim"] = model.input_dim();
    j["hidden_weights"] = matrix_json(model.hidden_weights);
    j["hidden_bias"] = std::vector<double>(model.hidden_bias.data(), model.hidden_bias.data() + model.hidden_bias.size());
    j["output_weights"] = matrix_json(model.output_weights);
    j["output_bias"] = std::vector<double>(model.output_bias.data(), model.output_bias.data() + model.output_bias.size());
    return j.dump();
}

ModelCheckpoint parse_checkpoint_json(std::string_view text) {
    ModelCheckpoint m;
    try {
        const auto j = nlohmann::json::parse(text);
        m.epoch = j.at("epoch").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        const auto input_dim = j.at("input_dim").get<Eigen::Index>();
        m.hidden_weights = json_matrix(j.at("hidden_weights"), input_dim);
        m.hidden_bias = json_vector(j.at("hidden_bias"));
        m.output_weights = json_matrix(j.at("output_weights"));
        m.output_bias = json_vector(j.at("output_bias"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint: ") + e.what());
    }
    if (m.output_bias.size() != m.output_weights.rows() || m.hidden_bias.size() != m.hidden_weights.rows() ||
        (!m.linear() && m.output_weights.cols() != m.hidden_weights.rows())) {
        throw ValidationError("checkpoint shapes are inconsistent");
    }
    return m;
}

ModelCheckpoint init_model(std::size_t input_dim, std::size_t num_classes, std::size_t hidden, std::uint64_t seed) {
    if (input_dim == 0 || num_classes < 2) throw ValidationError("model needs input_dim >= 1 and >= 2 classes");
    Rng rng(Rng::derive(seed, 11));
    ModelCheckpoint m;
    m.seed = seed;
    const auto d = static_cast<Eigen::Index>(input_dim);
    const auto c = static_cast<Eigen::Index>(num_classes);
    auto fill = [&](Eigen::MatrixXd& w, Eigen::Index rows, Eigen::Index cols) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        w.resize(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index k = 0; k < cols; ++k) w(r, k) = rng.uniform(-bound, bound);
        }
    };
    if (hidden > 0) {
        const auto h = static_cast<Eigen::Index>(hidden);
        fill(m.hidden_weights, h, d);
        m.hidden_bias = Eigen::VectorXd::Zero(h);
        fill(m.output_weights, c, h);
    } else {
        m.hidden_weights.resize(0, d);
        m.hidden_bias.resize(0);
        fill(m.output_weights, c, d);
    }
    m.output_bias = Eigen::VectorXd::Zero(c);
    return m;
}

Eigen::MatrixXd predict_proba(const ModelCheckpoint& model, const Eigen::MatrixXd& features) {
    if (static_cast<std::size_t>(features.cols()) != model.input_dim()) {
        throw ValidationError("feature dimension " + std::to_string(features.cols()) + " does not match model input " +
                              std::to_string(model.input_dim()));
    }
    Eigen::MatrixXd z = model.linear() ? Eigen::MatrixXd(features * model.output_weights.transpose())
                                       : Eigen::MatrixXd(hidden_layer(model, features) * model.output_weights.transpose());
    z.rowwise() += model.output_bias.transpose();
    softmax_rows(z);
    return z;
}

double loss_and_gradient(const ModelCheckpoint& model, const Eigen::MatrixXd& features, std::span<const int> labels,
                         double weight_decay, Gradient* grad) {
    const auto b = features.rows();
    if (static_cast<std::size_t>(b) != labels.size() || b == 0) throw ValidationError("batch/label size mismatch");
    const Eigen::MatrixXd h = model.linear() ? features : hidden_layer(model, features);
    Eigen::MatrixXd p = h * model.output_weights.transpose();
    p.rowwise() += model.output_bias.transpose();
    softmax_rows(p);

    double loss = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        loss -= std::log(std::max(p(i, labels[static_cast<std::size_t>(i)]), 1e-300));
    }
    loss /= static_cast<double>(b);
    loss += 0.5 * weight_decay * (model.output_weights.squaredNorm() + model.hidden_weights.squaredNorm());
    if (grad == nullptr) return loss;

    Eigen::MatrixXd dz = p;
    for (Eigen::Index i = 0; i < b; ++i) dz(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    dz /= static_cast<double>(b);
    grad->output_weights = dz.transpose() * h + weight_decay * model.output_weights;
    grad->output_bias = dz.colwise().sum().transpose();
    if (model.linear()) {
        grad->hidden_weights.resize(0, model.hidden_weights.cols());
        grad->hidden_bias.resize(0);
    } else {
        const Eigen::MatrixXd da = ((dz * model.output_weights).array() * (1.0 - h.array().square())).matrix();
        grad->hidden_weights = da.transpose() * features + weight_decay * model.hidden_weights;
        grad->hidden_bias = da.colwise().sum().transpose();
    }
    return loss;
}

void sgd_epoch(ModelCheckpoint& model, const Eigen::MatrixXd& features, std::span<const int> labels,
               std::span<const std::size_t> rows, const TrainConfig& config, Rng& rng, std::size_t epoch) {
    if (config.batch_size == 0) throw ValidationError("batch_size must be positive");
    std::vector<std::size_t> order(rows.begin(), rows.end());
    rng.shuffle(order);
    Gradient g;
    std::vector<int> batch_labels;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
        const auto end = std::min(order.size(), start + config.batch_size);
        const std::span<const std::size_t> batch(order.data() + start, end - start);
        batch_labels.clear();
        for (auto r : batch) batch_labels.push_back(labels[r]);
        const double loss = loss_and_gradient(model, rows_of(features, batch), batch_labels, config.weight_decay, &g);
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                               std::to_string(batch_no));
        }
        model.output_weights -= config.learning_rate * g.output_weights;
        model.output_bias -= config.learning_rate * g.output_bias;
        if (!model.linear()) {
            model.hidden_weights -= config.learning_rate * g.hidden_weights;
            model.hidden_bias -= config.learning_rate * g.hidden_bias;
        }
    }
}

namespace {

void append_epoch(DynamicsLog& log, const Eigen::MatrixXd& p, std::size_t epoch) {
    const auto c = log.num_classes;
    for (std::size_t i = 0; i < log.size(); ++i) {
        auto dst = log.prob(i, epoch);
        for (std::size_t k = 0; k < c; ++k) dst[k] = p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    }
}

DynamicsLog empty_log(const FeatureTable& data, std::size_t epochs, std::size_t classes) {
    DynamicsLog log;
    log.num_epochs = epochs;
    log.num_classes = classes;
    log.sample_ids = data.sample_ids;
    log.recording_ids = data.recording_ids;
    log.labels = data.labels;
    log.probs.assign(data.size() * epochs * classes, 0.0);
    return log;
}

}  // namespace

TrainResult train_logged(const FeatureTable& data, const TrainConfig& config, std::uint64_t seed,
                         const std::optional<ModelCheckpoint>& init) {
    if (config.epochs < 2) throw ValidationError("training needs at least 2 epochs");
    if (data.size() == 0) throw ValidationError("empty training table");
    std::vector<int> labels;
    labels.reserve(data.size());
    int max_label = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!data.labels[i]) throw ValidationError("training sample " + data.sample_ids[i] + " has no label");
        labels.push_back(*data.labels[i]);
        max_label = std::max(max_label, *data.labels[i]);
    }
    ModelCheckpoint model = init ? *init
                                 : init_model(data.dims(), std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1),
                                              config.hidden, seed);
    if (model.input_dim() != data.dims()) throw ValidationError("initial model does not match feature dimension");
    if (static_cast<std::size_t>(max_label) >= model.num_classes()) throw ValidationError("label exceeds model classes");

    TrainResult result;
    result.log = empty_log(data, config.epochs, model.num_classes());
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Rng rng(Rng::derive(seed, 12));
    for (std::size_t e = 0; e < config.epochs; ++e) {
        sgd_epoch(model, data.features, labels, rows, config, rng, e);
        model.epoch = e;
        append_epoch(result.log, predict_proba(model, data.features), e);
        result.checkpoints.push_back(model);
    }
    return result;
}

DynamicsLog self_train_logged(const ModelCheckpoint& start, const FeatureTable& data, const TrainConfig& config,
                              std::uint64_t seed) {
    if (config.epochs < 2) throw ValidationError("adaptation needs at least 2 epochs");
    if (data.size() == 0) throw ValidationError("empty recording");
    ModelCheckpoint model = start;
    DynamicsLog log = empty_log(data, config.epochs, model.num_classes());
    std::fill(log.labels.begin(), log.labels.end(), std::nullopt);
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Rng rng(Rng::derive(seed, 13));
    for (std::size_t e = 0; e < config.epochs; ++e) {
        const auto pseudo = argmax_rows(predict_proba(model, data.features));
        sgd_epoch(model, data.features, pseudo, rows, config, rng, e);
        append_epoch(log, predict_proba(model, data.features), e);
    }
    return log;
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& probs) {
    std::vector<int> out(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index k = 0;
        probs.row(i).maxCoeff(&k);
        out[static_cast<std::size_t>(i)] = static_cast<int>(k);
    }
    return out;
}

std::string outputs_to_csv(std::span<const std::string> sample_ids, const Eigen::MatrixXd& probs) {
    if (static_cast<std::size_t>(probs.rows()) != sample_ids.size()) throw ValidationError("output rows do not match sample ids");
    std::string out = "sample_id";
    for (Eigen::Index k = 0; k < probs.cols(); ++k) out += ",p" + std::to_string(k);
    out += '\n';
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
        out += sample_ids[i];
        for (Eigen::Index k = 0; k < probs.cols(); ++k) out += ',' + format_double(probs(static_cast<Eigen::Index>(i), k));
        out += '\n';
    }
    return out;
}

OutputTable parse_outputs_csv(std::string_view text) {
    OutputTable t;
    std::vector<double> flat;
    std::size_t classes = 0, line_no = 0, pos = 0;
    bool header_seen = false;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (!header_seen) {
            if (f.size() < 3 || f[0] != "sample_id") throw ParseError(line_no, "expected header sample_id,p0,p1,...");
            for (std::size_t k = 1; k < f.size(); ++k)
                if (f[k] != "p" + std::to_string(k - 1)) throw ParseError(line_no, "unexpected column '" + f[k] + "'");
            classes = f.size() - 1;
            header_seen = true;
            continue;
        }
        if (f.size() != classes + 1) throw ParseError(line_no, "expected " + std::to_string(classes + 1) + " fields");
        try {
            for (std::size_t k = 1; k < f.size(); ++k) flat.push_back(parse_double(f[k], "probability"));
        } catch (const ValidationError& e) {
            throw ParseError(line_no, e.what());
        }
        t.sample_ids.push_back(f[0]);
    }
    if (!header_seen) throw ValidationError("empty outputs file");
    t.probs.resize(static_cast<Eigen::Index>(t.sample_ids.size()), static_cast<Eigen::Index>(classes));
    for (std::size_t i = 0; i < t.sample_ids.size(); ++i)
        for (std::size_t k = 0; k < classes; ++k)
            t.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = flat[i * classes + k];
    return t;
}

Eigen::MatrixXd align_outputs(const OutputTable& table, std::span<const std::string> sample_ids) {
    std::unordered_map<std::string, Eigen::Index> pos;
    for (std::size_t i = 0; i < table.sample_ids.size(); ++i) pos.emplace(table.sample_ids[i], static_cast<Eigen::Index>(i));
    Eigen::MatrixXd out(static_cast<Eigen::Index>(sample_ids.size()), table.probs.cols());
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
        auto it = pos.find(sample_ids[i]);
        if (it == pos.end()) throw NotFoundError("no outputs for sample " + sample_ids[i]);
        out.row(static_cast<Eigen::Index>(i)) = table.probs.row(it->second);
    }
    return out;
}

double accuracy(const Eigen::MatrixXd& probs, std::span<const int> labels) {
    if (labels.empty()) throw ValidationError("accuracy of an empty set");
    const auto pred = argmax_rows(probs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Embeddings

EmbeddingSet embed(const ModelCheckpoint& model, const FeatureTable& data) {
    if (data.dims() != model.input_dim()) {
        throw ValidationError("feature dimension " + std::to_string(data.dims()) + " does not match model input " +
                              std::to_string(model.input_dim()));
    }
    EmbeddingSet out;
    out.sample_ids = data.sample_ids;
    out.vectors = model.linear() ? data.features : hidden_layer(model, data.features);
    out.epoch = model.epoch;
    return out;
}

std::string embeddings_to_csv(const EmbeddingSet& set) {
    std::string out = "sample_id";
    for (std::size_t k = 0; k < set.dims(); ++k) out += ",e" + std::to_string(k);
    out += '\n';
    for (std::size_t i = 0; i < set.size(); ++i) {
        out += set.sample_ids[i];
        for (Eigen::Index k = 0; k < set.vectors.cols(); ++k) {
            out += ',' + format_double(set.vectors(static_cast<Eigen::Index>(i), k));
        }
        out += '\n';
    }
    return out;
}

EmbeddingSet parse_embeddings_csv(std::string_view text) {
    EmbeddingSet set;
    std::size_t dims = 0;
    bool header_seen = false;
    std::vector<double> values;
    for_each_data_line(text, [&](std::size_t line_no, std::string_view line) {
        const auto f = split_csv(line);
        if (!header_seen) {
            if (f.size() < 2 || f[0] != "sample_id") throw ParseError(line_no, "expected header sample_id,e0,...");
            for (std::size_t k = 1; k < f.size(); ++k) {
                if (f[k] != "e" + std::to_string(k - 1)) throw ParseError(line_no, "unexpected column '" + f[k] + "'");
            }
            dims = f.size() - 1;
            header_seen = true;
            return;
        }
        if (f.size() != dims + 1) throw ParseError(line_no, "expected " + std::to_string(dims + 1) + " fields");
        set.sample_ids.push_back(f[0]);
        for (std::size_t k = 0; k < dims; ++k) {
            try {
                values.push_back(parse_double(f[1 + k], "embedding value"));
            } catch (const ValidationError& e) {
                throw ParseError(line_no, e.what());
            }
        }
    });
    if (!header_seen) throw ValidationError("empty embedding file");
    set.vectors = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), static_cast<Eigen::Index>(set.sample_ids.size()), static_cast<Eigen::Index>(dims));
    return set;
}

Eigen::MatrixXd project_2d(const EmbeddingSet& embeddings) {
    const auto n = embeddings.vectors.rows();
    const auto d = embeddings.vectors.cols();
    if (n < 2) throw ValidationError("projection needs at least 2 samples");
    if (d < 2) throw ValidationError("projection needs dimension >= 2");
    const Eigen::RowVectorXd mean = embeddings.vectors.colwise().mean();
    const Eigen::MatrixXd centered = embeddings.vectors.rowwise() - mean;
    if (centered.cwiseAbs().maxCoeff() == 0.0) throw ValidationError("degenerate cloud: all points identical");
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("eigen-decomposition failed");
    // Eigenvalues ascend; take the last two columns.
    Eigen::MatrixXd axes(d, 2);
    axes.col(0) = solver.eigenvectors().col(d - 1);
    axes.col(1) = solver.eigenvectors().col(d - 2);
    for (Eigen::Index a = 0; a < 2; ++a) {
        Eigen::Index arg = 0;
        axes.col(a).cwiseAbs().maxCoeff(&arg);
        if (axes(arg, a) < 0.0) axes.col(a) *= -1.0;
    }
    return centered * axes;
}

}  // namespace upass
