#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "upass/dynamics.hpp"
#include "upass/rng.hpp"

namespace upass {

/// Feature matrix plus per-row identity. Rows are samples.
struct FeatureTable {
    std::vector<std::string> sample_ids;
    std::vector<std::string> recording_ids;
    std::vector<std::optional<int>> labels;
    Eigen::MatrixXd features;

    std::size_t size() const noexcept { return sample_ids.size(); }
    std::size_t dims() const noexcept { return static_cast<std::size_t>(features.cols()); }
};

/// Header: sample_id,recording_id,label,f0..f{d-1}; empty label = unlabeled.
FeatureTable parse_feature_csv(std::string_view text);
FeatureTable load_feature_csv(const std::filesystem::path& path);
std::string feature_table_to_csv(const FeatureTable& table);

FeatureTable subset_rows(const FeatureTable& table, std::span<const std::size_t> rows);
FeatureTable subset_columns(const FeatureTable& table, std::span<const std::size_t> columns);
FeatureTable select_samples(const FeatureTable& table, std::span<const std::string> sample_ids);

enum class NoiseMode {
    uniform,    ///< flipped label drawn uniformly among the other classes
    confusion,  ///< flips favour samples near a class boundary and go to the closest other class
    /// flips go from class k to class k+1 (mod C), favouring samples the
    /// generative model finds plausible for k+1: a systematic scorer bias
    directional,
};

NoiseMode parse_noise_mode(std::string_view name);
std::string_view to_string(NoiseMode mode);

struct SyntheticSpec {
    std::size_t num_classes = 5;
    std::size_t dims = 8;
    /// Extra pure-noise feature columns appended after the informative ones.
    std::size_t noise_dims = 0;
    /// Explicit class means (num_classes x dims); generated when empty.
    std::vector<std::vector<double>> cluster_means;
    /// Distance between neighbouring generated class means, before overlap shrinkage.
    double separation = 8.0;
    double cluster_spread = 1.0;
    /// In [0, 1): generated means are pulled together by this fraction.
    double overlap = 0.0;
    double noise_rate = 0.0;
    NoiseMode noise_mode = NoiseMode::uniform;
    /// Fraction of samples drawn with three times the cluster spread.
    double outlier_rate = 0.0;
    /// Standard deviation of a per-recording feature offset (domain shift).
    double recording_shift = 0.0;
    /// Probability that a sample repeats the previous sample's class within a recording.
    double stay_prob = 0.0;
    std::size_t num_samples = 1000;
    std::size_t recording_length = 100;
    std::string id_prefix = "s";
    std::string recording_prefix = "rec";
    std::uint64_t seed = 0;
};

struct SyntheticDataset {
    Eigen::MatrixXd features;
    /// Observed labels (after noise injection).
    std::vector<int> labels;
    std::vector<int> true_labels;
    std::vector<std::string> sample_ids;
    std::vector<std::string> recording_ids;
    std::vector<bool> flip_mask;
    std::uint64_t seed = 0;

    std::size_t size() const noexcept { return labels.size(); }
    /// Observed labels as a FeatureTable; `clean` substitutes the true labels.
    FeatureTable table(bool clean = false) const;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

/// Class means the generator uses for `spec` (explicit or derived).
std::vector<std::vector<double>> class_means(const SyntheticSpec& spec);

/// Softmax classifier with an optional tanh hidden layer.
struct ModelCheckpoint {
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
    Eigen::MatrixXd hidden_weights;  ///< h x d; empty for the linear model
    Eigen::VectorXd hidden_bias;
    Eigen::MatrixXd output_weights;  ///< C x h (or C x d)
    Eigen::VectorXd output_bias;

    bool linear() const noexcept { return hidden_weights.size() == 0; }
    std::size_t input_dim() const noexcept {
        return static_cast<std::size_t>(linear() ? output_weights.cols() : hidden_weights.cols());
    }
    std::size_t num_classes() const noexcept { return static_cast<std::size_t>(output_weights.rows()); }
    std::size_t embedding_dim() const noexcept { return static_cast<std::size_t>(output_weights.cols()); }
};

std::string checkpoint_to_json(const ModelCheckpoint& model);
ModelCheckpoint parse_checkpoint_json(std::string_view text);

ModelCheckpoint init_model(std::size_t input_dim, std::size_t num_classes, std::size_t hidden, std::uint64_t seed);

/// N x C class probabilities.
Eigen::MatrixXd predict_proba(const ModelCheckpoint& model, const Eigen::MatrixXd& features);

/// Mean cross-entropy (plus L2 term) and its gradient, in ModelCheckpoint layout.
struct Gradient {
    Eigen::MatrixXd hidden_weights;
    Eigen::VectorXd hidden_bias;
    Eigen::MatrixXd output_weights;
    Eigen::VectorXd output_bias;
};

double loss_and_gradient(const ModelCheckpoint& model, const Eigen::MatrixXd& features, std::span<const int> labels,
                         double weight_decay, Gradient* grad);

struct TrainConfig {
    std::size_t hidden = 0;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double learning_rate = 0.1;
    double weight_decay = 0.0;
};

/// One pass of mini-batch gradient descent over `rows` (shuffled by `rng`).
/// `epoch` is only used to label a non-finite-loss error.
void sgd_epoch(ModelCheckpoint& model, const Eigen::MatrixXd& features, std::span<const int> labels,
               std::span<const std::size_t> rows, const TrainConfig& config, Rng& rng, std::size_t epoch);

struct TrainResult {
    DynamicsLog log;
    std::vector<ModelCheckpoint> checkpoints;
};

/// Trains from scratch (or from `init`) and records full-table probabilities
/// after every epoch. Every row of `data` must be labeled.
TrainResult train_logged(const FeatureTable& data, const TrainConfig& config, std::uint64_t seed,
                         const std::optional<ModelCheckpoint>& init = std::nullopt);

/// Label-free adaptation run: each epoch refits on the model's own argmax
/// pseudo-labels and logs the outputs. Recorded labels are left empty.
DynamicsLog self_train_logged(const ModelCheckpoint& model, const FeatureTable& data, const TrainConfig& config,
                              std::uint64_t seed);

/// Per-sample class probabilities. Header: sample_id,p0..p{C-1}
struct OutputTable {
    std::vector<std::string> sample_ids;
    Eigen::MatrixXd probs;
};

std::string outputs_to_csv(std::span<const std::string> sample_ids, const Eigen::MatrixXd& probs);
OutputTable parse_outputs_csv(std::string_view text);
/// Rows reordered to `sample_ids`; every id must be present.
Eigen::MatrixXd align_outputs(const OutputTable& table, std::span<const std::string> sample_ids);

double accuracy(const Eigen::MatrixXd& probs, std::span<const int> labels);
std::vector<int> argmax_rows(const Eigen::MatrixXd& probs);

struct EmbeddingSet {
    std::vector<std::string> sample_ids;
    Eigen::MatrixXd vectors;
    std::optional<std::size_t> epoch;

    std::size_t size() const noexcept { return sample_ids.size(); }
    std::size_t dims() const noexcept { return static_cast<std::size_t>(vectors.cols()); }
};

/// Hidden-layer activations, or the raw features for a linear model.
EmbeddingSet embed(const ModelCheckpoint& model, const FeatureTable& data);

/// Header: sample_id,e0..e{h-1}
std::string embeddings_to_csv(const EmbeddingSet& set);
EmbeddingSet parse_embeddings_csv(std::string_view text);

/// Mean-centred projection on the top two principal axes; each axis is
/// signed so its largest-magnitude loading is positive.
Eigen::MatrixXd project_2d(const EmbeddingSet& embeddings);

}  // namespace upass
