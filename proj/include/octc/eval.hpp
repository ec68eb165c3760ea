#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "octc/infer.hpp"

namespace octc {

struct EditCounts {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
};

/// Unit-cost Levenshtein distance. Among optimal alignments the backtrace
/// prefers substitution, then deletion, then insertion.
EditCounts edit_distance(std::span<const int> ref, std::span<const int> hyp);

struct ErrorTally {
  std::size_t errors = 0;
  std::size_t ref_tokens = 0;
  std::size_t utterances = 0;
  void add(const EditCounts& e, std::size_t ref_len);
  /// errors / ref_tokens, or 0 for an empty tally.
  double rate() const;
};

enum class EvalTask { Asr, Translate, All };
EvalTask parse_eval_task(const std::string& s);
std::string to_string(EvalTask t);

struct EvalOptions {
  EvalTask task = EvalTask::All;
  /// Restrict translation to this target language (-1: every available target).
  int st_target = -1;
  /// Input language token: <nolang> when false, the true <lang-k> when true.
  bool true_language = false;
  /// Prompt with the previous transcript where one exists instead of [<na>].
  bool previous_prompt = false;
  std::size_t batch_size = 16;
  bool include_timing = false;
  bool include_details = true;
};

struct EvalSummary {
  ErrorTally asr;
  ErrorTally st;
  std::size_t lid_correct = 0;
  std::size_t lid_total = 0;
  /// Tokens of ASR-only intermediate decodes that fall in the source language
  /// range, over all such tokens, for translation items.
  std::size_t cascade_in_source = 0;
  std::size_t cascade_total = 0;
  double wall_seconds = 0.0;
  nlohmann::json report;

  double lid_accuracy() const;
  double cascade_fraction() const;
};

/// Decodes every utterance for the requested tasks and scores it. `provenance`
/// (checkpoint digest, seeds, ...) is copied into the report.
EvalSummary evaluate_corpus(const SpeechModel& model, const Corpus& corpus, const EvalOptions& options,
                            const nlohmann::json& provenance = nlohmann::json::object());

struct ThroughputRow {
  std::size_t batch_size = 0;
  double seconds = 0.0;
  double utterances_per_second = 0.0;
};

struct ThroughputReport {
  std::vector<ThroughputRow> rows;
  bool tokens_identical = true;
};

/// ASR decoding of the whole corpus at each batch size.
ThroughputReport measure_throughput(const SpeechModel& model, const Corpus& corpus,
                                    std::span<const std::size_t> batch_sizes);

}  // namespace octc
