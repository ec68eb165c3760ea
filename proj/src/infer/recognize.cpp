#include "octc/ctc.hpp"
#include "octc/infer.hpp"

#include <cmath>

namespace octc {

std::vector<Hypothesis> recognize_batch(const SpeechModel& model, std::span<const DecodeRequest> requests) {
  std::vector<Hypothesis> out;
  if (requests.empty()) return out;
  const Vocabulary& vocab = model.vocab();
  std::vector<EncoderInput> inputs;
  inputs.reserve(requests.size());
  for (const DecodeRequest& r : requests) {
    if (r.features == nullptr) throw std::invalid_argument("decode request without features");
    EncoderInput in;
    in.features = r.features;
    in.valid_frames = r.valid_frames == 0 ? r.features->rows() : r.valid_frames;
    in.lang_token = r.lang_hint;
    in.task_token = r.task_token;
    in.prompt = r.prompt.empty() ? std::vector<int>{vocab.na()} : r.prompt;
    inputs.push_back(std::move(in));
  }
  Tape tape(model.params(), false);
  const ForwardTrace trace = encode_speech(tape, model, inputs);
  const std::size_t heads = trace.ctc_log_probs.size();
  const int blank = Vocabulary::blank();

  for (std::size_t i = 0; i < requests.size(); ++i) {
    Hypothesis h;
    const Tensor lp = trace.log_probs(heads - 1, i);
    const GreedyResult g = greedy_decode(lp, lp.rows(), blank);
    h.frame_path = g.frame_path;
    for (std::size_t j = 0; j < g.tokens.size(); ++j) {
      const int tok = g.tokens[j];
      const std::size_t row = g.emission_frames[j];
      if (j == 0 && vocab.kind(tok) == TokenKind::Language) {
        h.language = tok;
        h.language_posterior = std::exp(lp.at(row, static_cast<std::size_t>(tok)));
        continue;
      }
      if (!vocab.is_symbol(tok)) continue;
      h.text.push_back(tok);
      h.token_frames.push_back(row < 2 ? 0 : row - 2);
    }
    for (std::size_t k = 0; k + 1 < heads; ++k) {
      const Tensor lk = trace.log_probs(k, i);
      h.layer_decodes.push_back(greedy_decode(lk, lk.rows(), blank).tokens);
    }
    out.push_back(std::move(h));
  }
  return out;
}

Hypothesis recognize(const SpeechModel& model, const Tensor& features, int task_token, int lang_hint,
                     std::vector<int> prompt) {
  DecodeRequest r{&features, features.rows(), task_token, lang_hint, std::move(prompt)};
  return std::move(recognize_batch(model, std::span<const DecodeRequest>(&r, 1)).front());
}

LanguageId identify_language(const SpeechModel& model, const Tensor& features) {
  const Vocabulary& vocab = model.vocab();
  const Hypothesis h = recognize(model, features, vocab.asr(), vocab.nolang());
  return {h.language, h.language ? h.language_posterior : 0.0};
}

nlohmann::json hypothesis_to_json(std::uint32_t utterance_id, const Hypothesis& hyp, const Vocabulary& vocab) {
  nlohmann::json j;
  j["utterance_id"] = utterance_id;
  j["language"] = hyp.language ? nlohmann::json(vocab.name(*hyp.language)) : nlohmann::json(nullptr);
  j["language_posterior"] = hyp.language_posterior;
  j["tokens"] = hyp.text;
  j["token_frames"] = hyp.token_frames;
  j["frame_alignment"] = hyp.frame_path;
  j["per_layer_decodes"] = hyp.layer_decodes;
  return j;
}

}  // namespace octc
