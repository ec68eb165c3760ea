#include <algorithm>
#include <stdexcept>
#include <string>

#include "octc/infer.hpp"

namespace octc {

ChunkPlan plan_chunks(std::size_t total, std::size_t window, std::size_t context) {
  if (window <= 2 * context) {
    throw std::invalid_argument("plan_chunks: window " + std::to_string(window) + " must exceed twice the context " +
                                std::to_string(context));
  }
  ChunkPlan plan{total, window, context, {}};
  if (total == 0) return plan;
  const std::size_t stride = window - 2 * context;
  for (std::size_t start = 0;; start += stride) {
    ChunkSpan c{start, plan.chunks.empty() ? 0 : start + context, start + window - context};
    const bool last = start + window >= total;
    if (last) c.keep_end = total;
    plan.chunks.push_back(c);
    if (last) break;
  }
  return plan;
}

LongformResult longform_decode(const SpeechModel& model, const Tensor& features, const LongformOptions& options) {
  const Vocabulary& vocab = model.vocab();
  const auto factor = static_cast<std::size_t>(model.config().downsample);
  const std::size_t raw_total = features.rows();
  const std::size_t dim = features.cols();
  LongformResult result;
  result.plan = plan_chunks(encoded_frames(raw_total, model.config().downsample), options.window, options.context);
  if (options.batch_size == 0) throw std::invalid_argument("longform_decode: batch size must be positive");
  const int task = options.task_token == 0 ? vocab.asr() : options.task_token;
  const int lang = options.lang_hint == 0 ? vocab.nolang() : options.lang_hint;

  // Raw-frame windows, right-padded with zeros to the full window.
  const std::size_t raw_window = options.window * factor;
  std::vector<Tensor> windows;
  std::vector<std::size_t> valid;
  for (const ChunkSpan& c : result.plan.chunks) {
    const std::size_t begin = c.start * factor;
    const std::size_t n = std::min(raw_window, raw_total - begin);
    Tensor w({raw_window, dim}, 0.0);
    std::copy(features.data() + begin * dim, features.data() + (begin + n) * dim, w.data());
    windows.push_back(std::move(w));
    valid.push_back(n);
  }

  // Kept rows of every chunk's frame path, stitched into one path over the
  // whole input. Collapsing it once merges a token only when its frames run
  // contiguously across a seam, so genuine repeats near a seam survive.
  // Entries 0 and 1 hold the first chunk's language and task rows, so a
  // single chunk decodes exactly like short-form recognition.
  std::vector<int> path(result.plan.total + 2, Vocabulary::blank());
  for (std::size_t first = 0; first < windows.size(); first += options.batch_size) {
    const std::size_t last = std::min(windows.size(), first + options.batch_size);
    std::vector<DecodeRequest> reqs;
    for (std::size_t i = first; i < last; ++i) reqs.push_back({&windows[i], valid[i], task, lang, {}});
    const std::vector<Hypothesis> hyps = recognize_batch(model, reqs);
    for (std::size_t i = first; i < last; ++i) {
      const Hypothesis& h = hyps[i - first];
      const ChunkSpan& c = result.plan.chunks[i];
      if (i == 0) {
        result.language = h.language;
        path[0] = h.frame_path.at(0);
        path[1] = h.frame_path.at(1);
      }
      for (std::size_t f = c.keep_begin; f < c.keep_end; ++f) path[f + 2] = h.frame_path.at(f - c.start + 2);
    }
  }
  int prev = Vocabulary::blank();
  for (std::size_t row = 0; row < path.size(); ++row) {
    const int tok = path[row];
    if (tok != prev && vocab.is_symbol(tok)) {
      result.text.push_back(tok);
      result.token_frames.push_back(row < 2 ? 0 : row - 2);
    }
    prev = tok;
  }
  return result;
}

}  // namespace octc
