#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "octc/checkpoint.hpp"
#include "octc/model.hpp"
#include "octc/optim.hpp"

namespace octc {

struct TrainConfig {
  std::size_t batch_size = 16;
  /// Probability that a training example joins several same-language
  /// utterances, and the most it joins. Joined examples match the
  /// multi-sentence inputs seen by long-form decoding and always train
  /// recognition: utterance boundaries are not marked in the features, so a
  /// joined translation target would be ambiguous.
  double concat_probability = 0.25;
  std::size_t max_concat = 3;
  std::size_t total_steps = 20000;
  std::size_t warmup_steps = 1000;
  double peak_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  /// Write a checkpoint every this many steps (0: only at the end).
  std::size_t checkpoint_interval = 0;
  /// Stop after this step even if the schedule is longer (0: run to total_steps).
  std::size_t stop_after = 0;
  double divergence_factor = 10.0;
  std::size_t divergence_window = 100;
  std::string train_corpus;
  std::string dev_corpus;
  std::string checkpoint_dir;
  std::string log_path;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainState {
  AdamState adam;
  std::mt19937_64 rng;
  double initial_loss = 0.0;
  bool has_initial_loss = false;
  std::size_t over_count = 0;
  bool diverged = false;
  std::string diverged_reason;

  std::size_t step() const { return adam.step; }
};

struct StepReport {
  std::size_t step = 0;
  double lr = 0.0;
  double total_loss = 0.0;
  std::vector<double> per_layer_losses;
  double grad_norm = 0.0;
  double wall_ms = 0.0;

  /// Metrics-log line; wall time is left out when `with_time` is false.
  nlohmann::json to_json(bool with_time = true) const;
};

/// One training example: encoder input and per-head references.
struct TrainingExample {
  EncoderInput input;
  std::vector<std::vector<int>> references;
};

/// Draws the task (uniform over available tasks, unless `task` is given) and
/// conditioning for `utt`.
TrainingExample sample_example(const SpeechModel& model, const UtteranceRecord& utt, std::mt19937_64& rng,
                               std::optional<int> task = std::nullopt);

class Trainer {
 public:
  Trainer(SpeechModel model, TrainConfig config);
  Trainer(SpeechModel model, TrainConfig config, TrainState state);

  /// One optimisation step on a batch drawn from `corpus`.
  StepReport step(const Corpus& corpus);

  const SpeechModel& model() const { return model_; }
  SpeechModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  const TrainState& state() const { return state_; }
  bool finished() const;

 private:
  void update_divergence(double loss);

  SpeechModel model_;
  TrainConfig config_;
  TrainState state_;
};

CheckpointData make_checkpoint(const Trainer& trainer);
void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer);
/// Restores model and optimizer state; `config` replaces the stored training
/// config when given (the schedule fields must agree).
Trainer load_checkpoint(const std::filesystem::path& path, const TrainConfig* config = nullptr);
Trainer trainer_from_checkpoint(const CheckpointData& data, const TrainConfig* config = nullptr);

struct TrainResult {
  std::size_t steps_run = 0;
  bool diverged = false;
  std::string reason;
  double last_loss = 0.0;
  std::vector<std::filesystem::path> checkpoints;
};

/// Runs until the schedule ends, `stop_after` is reached, or the divergence
/// detector fires. Each step is written to `log` as one JSON line.
TrainResult train_loop(Trainer& trainer, const Corpus& corpus, std::ostream* log,
                       const std::function<void(const StepReport&)>& on_step = {});

/// Mean per-head losses on a held-out corpus. Every utterance is scored for
/// each ST target (task == Translate) or for ASR, with the true language token
/// and the <na> prompt.
std::vector<double> heldout_losses(const SpeechModel& model, const Corpus& corpus, TokenKind task,
                                   std::size_t batch_size = 16);

}  // namespace octc
