#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "upass/dynamics.hpp"
#include "upass/refmodel.hpp"
#include "upass/rng.hpp"

namespace upass {

struct RecordingRanking {
    std::string recording_id;
    /// Mean over the recording's samples of the entropy-based epistemic term.
    double v_ep_entropy = 0.0;
    std::size_t rank = 0;
    bool selected = false;
};

/// Sorts recordings by descending mean v_ep_entropy (ties by recording_id)
/// and flags the top ceil(R * select_pct / 100). Logs may be unlabeled.
std::vector<RecordingRanking> rank_recordings(std::span<const std::pair<std::string, DynamicsLog>> logs,
                                              double select_pct);

std::string rankings_to_csv(std::span<const RecordingRanking> rankings);

enum class SessionStatus { running, finished };

std::string_view to_string(SessionStatus status);

/// Active-learning state for one recording.
struct ALSession {
    std::string recording_id;
    std::vector<std::string> sample_ids;
    std::size_t epoch = 0;
    std::size_t max_epochs = 10;
    double batch_pct = 1.0;
    /// Cumulative answers in acquisition order.
    std::vector<std::pair<std::string, int>> labeled;
    /// query_history[e] is the batch issued before training epoch e.
    std::vector<std::vector<std::string>> query_history;
    /// outputs[0] comes from the starting model, outputs[e] after epoch e.
    std::vector<Eigen::MatrixXd> outputs;
    std::string trainer_id;
    std::string trainer_state;
    SessionStatus status = SessionStatus::running;

    std::size_t size() const noexcept { return sample_ids.size(); }
    const Eigen::MatrixXd& current_outputs() const { return outputs.back(); }
    bool is_labeled(std::string_view sample_id) const;
    /// True when the batch for the current epoch has been issued and not yet answered.
    bool batch_outstanding() const noexcept { return status == SessionStatus::running && query_history.size() > epoch; }
    const std::vector<std::string>& outstanding_batch() const;
    /// Token identifying the current batch; answers must echo it.
    std::string batch_token() const;
};

ALSession start_session(std::string recording_id, std::vector<std::string> sample_ids,
                        Eigen::MatrixXd initial_outputs, std::size_t max_epochs, double batch_pct,
                        std::string trainer_id);

/// The ceil(size * batch_pct / 100) unlabeled samples with highest output
/// entropy, capped by the number still unlabeled; ties by ascending sample_id.
/// `outputs` rows align with session.sample_ids.
std::vector<std::string> next_query_batch(const ALSession& session, const Eigen::MatrixXd& outputs,
                                          double batch_pct);

/// Uniformly random batch of the same size, for baselines.
std::vector<std::string> random_query_batch(const ALSession& session, double batch_pct, Rng& rng);

/// Records `batch` as the current epoch's query (returns the outstanding one if already issued).
const std::vector<std::string>& issue_batch(ALSession& session, std::vector<std::string> batch);

/// Issues the entropy batch for the current epoch from the session's current outputs.
const std::vector<std::string>& issue_entropy_batch(ALSession& session);

struct LabeledSample {
    std::size_t row = 0;
    int label = 0;
};

/// Fine-tuning step contract: receives the cumulative labeled set (rows
/// index the session's samples) and returns new N x C outputs.
class Trainer {
public:
    virtual ~Trainer() = default;
    virtual std::string id() const = 0;
    virtual Eigen::MatrixXd train_epoch(std::span<const LabeledSample> labeled, std::size_t epoch) = 0;
    virtual Eigen::MatrixXd outputs() const = 0;
    virtual std::string save_state() const { return {}; }
    virtual void load_state(std::string_view) {}
};

/// Leaves the model untouched.
class NoOpTrainer final : public Trainer {
public:
    explicit NoOpTrainer(Eigen::MatrixXd outputs) : outputs_(std::move(outputs)) {}
    std::string id() const override { return "noop"; }
    Eigen::MatrixXd train_epoch(std::span<const LabeledSample>, std::size_t) override { return outputs_; }
    Eigen::MatrixXd outputs() const override { return outputs_; }

private:
    Eigen::MatrixXd outputs_;
};

struct FineTuneConfig {
    double learning_rate = 0.05;
    std::size_t batch_size = 8;
    /// Passes over the labeled set per active-learning epoch.
    std::size_t passes = 5;
    double weight_decay = 0.0;
};

/// Supervised fine-tuning of a reference model on the cumulative labels.
class FineTuneTrainer final : public Trainer {
public:
    FineTuneTrainer(ModelCheckpoint model, FeatureTable recording, FineTuneConfig config, std::uint64_t seed);

    std::string id() const override { return "finetune"; }
    Eigen::MatrixXd train_epoch(std::span<const LabeledSample> labeled, std::size_t epoch) override;
    Eigen::MatrixXd outputs() const override;
    std::string save_state() const override;
    void load_state(std::string_view state) override;

    const ModelCheckpoint& model() const noexcept { return model_; }

private:
    ModelCheckpoint model_;
    FeatureTable recording_;
    FineTuneConfig config_;
    std::uint64_t seed_;
};

/// Applies the answers for the outstanding batch, runs one trainer epoch on
/// the cumulative labels and records the new outputs. Throws ValidationError
/// when answers do not cover exactly the outstanding batch and ConflictError
/// when the session is finished or no batch is outstanding.
void al_step(ALSession& session, const std::map<std::string, int>& answers, Trainer& trainer);

/// Answers drawn from ground truth (sample_id -> class).
std::map<std::string, int> simulated_answers(const std::vector<std::string>& batch,
                                             const std::map<std::string, int>& truth);

std::string session_to_json(const ALSession& session);
ALSession parse_session_json(std::string_view text);

}  // namespace upass
