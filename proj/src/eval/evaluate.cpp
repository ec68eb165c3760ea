#include <chrono>
#include <stdexcept>

#include "octc/eval.hpp"

namespace octc {

double EvalSummary::lid_accuracy() const {
  return lid_total == 0 ? 0.0 : static_cast<double>(lid_correct) / static_cast<double>(lid_total);
}

double EvalSummary::cascade_fraction() const {
  return cascade_total == 0 ? 0.0 : static_cast<double>(cascade_in_source) / static_cast<double>(cascade_total);
}

namespace {

struct Item {
  const UtteranceRecord* utt;
  int task;
  int target;  // -1 for ASR
};

nlohmann::json tally_json(const ErrorTally& t) {
  return {{"ter", t.rate()}, {"errors", t.errors}, {"ref_tokens", t.ref_tokens}, {"utterances", t.utterances}};
}

}  // namespace

EvalSummary evaluate_corpus(const SpeechModel& model, const Corpus& corpus, const EvalOptions& options,
                            const nlohmann::json& provenance) {
  const Vocabulary& vocab = model.vocab();
  if (!(corpus.vocab == vocab)) throw std::invalid_argument("corpus vocabulary does not match the checkpoint");
  if (options.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<Item> items;
  for (const auto& utt : corpus.records) {
    if (options.task != EvalTask::Translate) items.push_back({&utt, vocab.asr(), -1});
    if (options.task != EvalTask::Asr) {
      for (const auto& [target, _] : utt.translations) {
        if (options.st_target >= 0 && target != options.st_target) continue;
        items.push_back({&utt, vocab.st_token(target), target});
      }
    }
  }

  EvalSummary s;
  nlohmann::json details = nlohmann::json::array();
  const std::size_t asr_heads = static_cast<std::size_t>(model.config().num_asr_layers);
  for (std::size_t first = 0; first < items.size(); first += options.batch_size) {
    const std::size_t last = std::min(items.size(), first + options.batch_size);
    std::vector<DecodeRequest> reqs;
    for (std::size_t i = first; i < last; ++i) {
      const UtteranceRecord& u = *items[i].utt;
      DecodeRequest r{&u.features, u.frames(), items[i].task,
                      options.true_language ? vocab.lang_token(u.language) : vocab.nolang(), {}};
      if (options.previous_prompt && u.previous_transcript) r.prompt = *u.previous_transcript;
      reqs.push_back(std::move(r));
    }
    const std::vector<Hypothesis> hyps = recognize_batch(model, reqs);
    for (std::size_t i = first; i < last; ++i) {
      const Item& it = items[i];
      const Hypothesis& h = hyps[i - first];
      const std::vector<int>& ref = it.target < 0 ? it.utt->transcript : it.utt->translations.at(it.target);
      const EditCounts e = edit_distance(ref, h.text);
      const bool asr = it.target < 0;
      (asr ? s.asr : s.st).add(e, ref.size());
      if (asr) {
        ++s.lid_total;
        if (h.language && *h.language == vocab.lang_token(it.utt->language)) ++s.lid_correct;
      } else {
        for (std::size_t k = 0; k < asr_heads && k < h.layer_decodes.size(); ++k) {
          for (int tok : h.layer_decodes[k]) {
            if (!vocab.is_symbol(tok)) continue;
            ++s.cascade_total;
            if (vocab.language_of(tok) == it.utt->language) ++s.cascade_in_source;
          }
        }
      }
      if (options.include_details) {
        details.push_back({{"utterance_id", it.utt->id},
                           {"task", vocab.name(it.task)},
                           {"reference", ref},
                           {"hypothesis", h.text},
                           {"language", h.language ? nlohmann::json(vocab.name(*h.language)) : nlohmann::json(nullptr)},
                           {"substitutions", e.substitutions},
                           {"insertions", e.insertions},
                           {"deletions", e.deletions}});
      }
    }
  }
  s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  ErrorTally all = s.asr;
  all.errors += s.st.errors;
  all.ref_tokens += s.st.ref_tokens;
  all.utterances += s.st.utterances;
  nlohmann::json& r = s.report;
  r["provenance"] = provenance;
  r["model_config"] = model.config().to_json();
  r["corpus"] = {{"split", corpus.split}, {"spec", corpus.spec.to_json()}, {"utterances", corpus.records.size()}};
  r["options"] = {{"task", to_string(options.task)},
                  {"st_target", options.st_target},
                  {"true_language", options.true_language},
                  {"previous_prompt", options.previous_prompt}};
  r["ter"] = all.rate();
  r["per_task"] = {{"asr", tally_json(s.asr)}, {"st", tally_json(s.st)}};
  r["lid_accuracy"] = s.lid_accuracy();
  r["lid_utterances"] = s.lid_total;
  r["cascade_source_fraction"] = s.cascade_fraction();
  if (options.include_timing) {
    r["wall_seconds"] = s.wall_seconds;
    r["utterances_per_second"] = s.wall_seconds > 0 ? static_cast<double>(items.size()) / s.wall_seconds : 0.0;
  }
  if (options.include_details) r["details"] = std::move(details);
  return s;
}

ThroughputReport measure_throughput(const SpeechModel& model, const Corpus& corpus,
                                    std::span<const std::size_t> batch_sizes) {
  ThroughputReport rep;
  if (corpus.records.empty()) return rep;
  const Vocabulary& vocab = model.vocab();
  std::vector<std::vector<int>> reference_tokens;
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw std::invalid_argument("batch size must be positive");
    std::vector<std::vector<int>> tokens;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t first = 0; first < corpus.records.size(); first += b) {
      const std::size_t last = std::min(corpus.records.size(), first + b);
      std::vector<DecodeRequest> reqs;
      for (std::size_t i = first; i < last; ++i) {
        const UtteranceRecord& u = corpus.records[i];
        reqs.push_back({&u.features, u.frames(), vocab.asr(), vocab.nolang(), {}});
      }
      for (auto& h : recognize_batch(model, reqs)) tokens.push_back(std::move(h.frame_path));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.rows.push_back({b, secs, secs > 0 ? static_cast<double>(corpus.records.size()) / secs : 0.0});
    if (reference_tokens.empty()) {
      reference_tokens = std::move(tokens);
    } else if (tokens != reference_tokens) {
      rep.tokens_identical = false;
    }
  }
  return rep;
}

}  // namespace octc
