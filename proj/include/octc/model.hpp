#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "json.hpp"
#include "octc/corpus.hpp"
#include "octc/ops.hpp"
#include "octc/vocabulary.hpp"

namespace octc {

/// Architecture hyperparameters. Layer indices are 1-based.
struct ModelConfig {
  int num_layers = 6;
  int d_model = 64;
  int heads = 4;
  /// Intermediate self-conditioned CTC layers, ascending, within [1, N-1].
  std::vector<int> inter_layers{2, 4};
  /// Leading entries of inter_layers that are supervised with the transcript only.
  int num_asr_layers = 1;
  /// Layers followed by prompt cross-attention, within [1, N].
  std::vector<int> inject_layers{3, 6};
  int prompt_layers = 2;
  int prompt_dim = 32;
  int prompt_heads = 4;
  int prompt_ffn = 64;
  /// Hidden width of the convolutional gating branch.
  int cg_hidden = 64;
  int conv_kernel = 31;
  int downsample = 2;
  int feature_dim = 16;
  int vocab_size = 0;
  bool self_conditioning = true;
  AsrOnlyTaskToken asr_only_task = AsrOnlyTaskToken::Echo;

  int num_task_dependent() const { return static_cast<int>(inter_layers.size()) - num_asr_layers; }
  /// Number of CTC heads: one per intermediate layer plus the final layer.
  std::size_t num_ctc_layers() const { return inter_layers.size() + 1; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

class SpeechModel {
 public:
  SpeechModel() = default;
  SpeechModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed);
  SpeechModel(ModelConfig config, Vocabulary vocab, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  const Tensor& param(const std::string& name) const { return params_.at(name); }
  Tensor& param(const std::string& name) { return params_.at(name); }

  /// Role of CTC head k (0-based over inter_layers, then the final layer).
  LayerRole ctc_role(std::size_t k) const;
  /// Encoder layer index (1-based) of CTC head k.
  int ctc_layer(std::size_t k) const;

  /// Augmented references for every CTC head, in head order.
  std::vector<std::vector<int>> references(const UtteranceRecord& utt, int task_token) const;

  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  ParameterSet params_;
};

/// Initial parameters. Cross-attention output projections start at zero.
ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed);

struct EncoderInput {
  const Tensor* features = nullptr;  // T_raw x feature_dim
  std::size_t valid_frames = 0;      // raw frames that are real input
  int lang_token = 0;
  int task_token = 0;
  std::vector<int> prompt;
};

/// Everything the forward pass produces, packed over the batch.
struct ForwardTrace {
  Layout layout;         // (T + 2)-row segments of the encoder stream
  Layout prompt_layout;  // T'-row segments of the prompt stream
  std::vector<Var> hidden;  // X(0) .. X(N)
  std::map<int, Var> pre_conditioning;  // A(s)
  std::map<int, Var> posteriors;        // B(s)
  std::map<int, Var> pre_injection;     // D(t)
  Var prompt;                           // X_prompt
  std::vector<int> ctc_layers;          // encoder layer of each CTC head
  std::vector<Var> ctc_log_probs;       // per head, packed (T + 2) x V
  std::size_t attention_cells = 0;

  /// Rows of an encoder-stream value that belong to sequence `seq`.
  Tensor rows_of(const Var& v, std::size_t seq) const;
  /// X_prompt rows of sequence `seq`.
  Tensor prompt_rows(std::size_t seq) const;
  /// Per-head log-probabilities of one sequence, valid rows only.
  Tensor log_probs(std::size_t head, std::size_t seq) const;
};

/// Encoded length after the front-end: ceil(raw / downsample).
std::size_t encoded_frames(std::size_t raw_frames, int downsample);

/// Strided front-end; returns the T x d speech stream and its layout.
Var downsample_frontend(Tape& tape, const SpeechModel& model, std::span<const EncoderInput> batch,
                        Layout& layout);
/// Prepends the language and task embeddings to every segment.
Var prepend_tokens(Tape& tape, const SpeechModel& model, const Var& speech, const Layout& layout,
                   std::span<const EncoderInput> batch, Layout& out_layout);
Var speech_enc_layer(Tape& tape, const SpeechModel& model, int layer, const Var& x,
                     const Layout& layout);
Var prompt_encode(Tape& tape, const SpeechModel& model, std::span<const std::vector<int>> prompts,
                  Layout& layout);

ForwardTrace encode_speech(Tape& tape, const SpeechModel& model, std::span<const EncoderInput> batch);

struct LossBreakdown {
  Var total;  // mean over the batch of per-utterance totals
  std::vector<std::vector<double>> per_sequence;  // [seq][head]
  std::vector<double> per_layer;                  // mean over the batch, per head
  std::vector<double> sequence_totals;
  double final_loss() const { return per_layer.back(); }
};

/// CTC loss per head and the average over heads; references[seq][head].
LossBreakdown compute_losses(const SpeechModel& model, const ForwardTrace& trace,
                             const std::vector<std::vector<std::vector<int>>>& references);

}  // namespace octc
