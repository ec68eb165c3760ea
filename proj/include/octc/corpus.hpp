#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "octc/tensor.hpp"
#include "octc/vocabulary.hpp"

namespace octc {

/// Parameters of the synthetic multilingual corpus.
struct CorpusSpec {
  int num_languages = 3;
  int symbols_per_language = 12;
  int min_symbols = 3;
  int max_symbols = 10;
  int min_frames_per_symbol = 4;
  int max_frames_per_symbol = 6;
  int feature_dim = 16;
  double noise_std = 0.3;
  /// Utterances per synthetic recording; utterances after the first carry
  /// their predecessor's transcript.
  int max_recording_length = 4;
  /// Encoder downsampling the corpus must stay feasible for.
  int downsample = 2;
  std::uint64_t translation_seed = 11;
  std::size_t train_size = 2000;
  std::size_t dev_size = 100;
  std::size_t test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

struct UtteranceRecord {
  std::uint32_t id = 0;
  int language = 0;
  Tensor features;  // T_raw x feature_dim, values representable as float
  std::vector<int> transcript;
  std::map<int, std::vector<int>> translations;  // target language -> tokens
  std::optional<std::vector<int>> previous_transcript;

  std::size_t frames() const { return features.rows(); }
  friend bool operator==(const UtteranceRecord&, const UtteranceRecord&) = default;
};

struct Corpus {
  CorpusSpec spec;
  Vocabulary vocab;
  std::string split;
  std::vector<UtteranceRecord> records;
};

/// Bijection from `from`-language symbols onto `to`-language symbols followed
/// by swapping each adjacent pair: [a,b,c,d,e] -> [m(b),m(a),m(d),m(c),m(e)].
std::vector<int> translate_tokens(const Vocabulary& vocab, const CorpusSpec& spec,
                                  std::span<const int> source, int from, int to);

Vocabulary build_vocabulary(const CorpusSpec& spec);

struct CorpusSplits {
  Corpus train, dev, test;
};
CorpusSplits generate_corpus(const CorpusSpec& spec);
/// Writes train.octc, dev.octc and test.octc into `dir`.
void write_corpus_dir(const std::filesystem::path& dir, const CorpusSplits& splits);

// ---------------------------------------------------------------------------
// Targets and conditioning

enum class LayerRole { AsrOnly, TaskDependent };
/// Task token placed in ASR-only references when the input task is ST.
enum class AsrOnlyTaskToken { Echo, ForceAsr };

/// [<lang-true>, task] ++ text, where text is the transcript for ASR-only
/// layers or the ASR task, and the translation otherwise.
std::vector<int> build_augmented_reference(const Vocabulary& vocab, const UtteranceRecord& utt,
                                           int task_token, LayerRole role,
                                           AsrOnlyTaskToken asr_only_task = AsrOnlyTaskToken::Echo);

struct Conditioning {
  int lang_token = 0;
  std::vector<int> prompt;
};

/// Language input is the true <lang-k> or <nolang> with probability 0.5 each;
/// prompt is the previous transcript or [<na>] with probability 0.5 each
/// ([<na>] when there is no previous sentence). Always draws two numbers.
Conditioning sample_conditioning(const Vocabulary& vocab, const UtteranceRecord& utt,
                                 std::mt19937_64& rng);

/// Joins same-language utterances into one recording: features, transcripts
/// and translations are concatenated, and the previous transcript is the
/// first part's.
UtteranceRecord concatenate_utterances(std::span<const UtteranceRecord* const> parts);

/// Tasks available for an utterance: <asr> plus <st-k> for each translation.
std::vector<int> available_tasks(const Vocabulary& vocab, const UtteranceRecord& utt);

// ---------------------------------------------------------------------------
// Binary corpus files

class CorpusFormatError : public std::runtime_error {
 public:
  CorpusFormatError(const std::string& what, std::size_t offset);
  std::size_t offset;
};

void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);
std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(std::string_view bytes);

}  // namespace octc
