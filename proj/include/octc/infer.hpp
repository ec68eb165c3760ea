#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "octc/model.hpp"

namespace octc {

struct DecodeRequest {
  const Tensor* features = nullptr;
  std::size_t valid_frames = 0;  // raw frames; 0 means all rows
  int task_token = 0;
  int lang_hint = 0;
  std::vector<int> prompt;  // empty means [<na>]
};

struct Hypothesis {
  std::optional<int> language;  // a <lang-k> token when one was emitted first
  double language_posterior = 0.0;
  std::vector<int> text;        // symbols only
  std::vector<int> frame_path;  // final-layer argmax per encoder row, tokens included
  /// Collapsed decodes of each intermediate CTC head, special tokens kept.
  std::vector<std::vector<int>> layer_decodes;
  /// Encoder frame (after downsampling) at which each text token starts.
  std::vector<std::size_t> token_frames;
};

/// Encodes a batch and greedily decodes every sequence. Results do not depend
/// on how requests are grouped into batches.
std::vector<Hypothesis> recognize_batch(const SpeechModel& model, std::span<const DecodeRequest> requests);

Hypothesis recognize(const SpeechModel& model, const Tensor& features, int task_token, int lang_hint,
                     std::vector<int> prompt = {});

struct LanguageId {
  std::optional<int> language;  // empty: no language token was emitted
  double posterior = 0.0;
};

/// Decodes with <nolang> and <asr>; the posterior is the softmax probability
/// of the emitted language token at its first frame.
LanguageId identify_language(const SpeechModel& model, const Tensor& features);

nlohmann::json hypothesis_to_json(std::uint32_t utterance_id, const Hypothesis& hyp, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Long-form decoding over overlapped chunks

struct ChunkSpan {
  std::size_t start;       // first frame of the window
  std::size_t keep_begin;  // absolute keep region [keep_begin, keep_end)
  std::size_t keep_end;
};

struct ChunkPlan {
  std::size_t total = 0;
  std::size_t window = 0;
  std::size_t context = 0;
  std::vector<ChunkSpan> chunks;
};

/// Chunk i starts at i * (W - 2L); its keep region is [start + L, start + W - L),
/// except that the first keeps from 0 and the last keeps to `total`.
ChunkPlan plan_chunks(std::size_t total, std::size_t window, std::size_t context);

struct LongformOptions {
  /// Window and context in encoder frames (raw frames / downsample).
  std::size_t window = 40;
  std::size_t context = 8;
  std::size_t batch_size = 8;
  int task_token = 0;  // 0: <asr>
  int lang_hint = 0;   // 0: <nolang>
};

struct LongformResult {
  std::optional<int> language;
  std::vector<int> text;
  std::vector<std::size_t> token_frames;
  ChunkPlan plan;
};

/// Decodes overlapping windows in batches and keeps each chunk's frames
/// inside its keep region. The kept frame paths form one path over the input,
/// which is collapsed once; the language comes from the first chunk.
LongformResult longform_decode(const SpeechModel& model, const Tensor& features, const LongformOptions& options);

}  // namespace octc
