#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "octc/corpus.hpp"
#include "octc/ctc.hpp"

namespace octc {

void CorpusSpec::validate() const {
  if (num_languages < 2) throw std::invalid_argument("corpus: num_languages must be >= 2");
  if (symbols_per_language < 1) throw std::invalid_argument("corpus: symbols_per_language must be >= 1");
  if (min_symbols < 1 || max_symbols < min_symbols) throw std::invalid_argument("corpus: bad symbol length range");
  if (downsample < 1 || (downsample & (downsample - 1)) != 0) {
    throw std::invalid_argument("corpus: downsample must be a power of two");
  }
  if (min_frames_per_symbol < 2 || min_frames_per_symbol < 2 * downsample) {
    throw std::invalid_argument("corpus: min_frames_per_symbol must be >= 2 and >= 2 * downsample");
  }
  if (max_frames_per_symbol < min_frames_per_symbol) throw std::invalid_argument("corpus: bad frames-per-symbol range");
  if (feature_dim < 1 || feature_dim > 65535) throw std::invalid_argument("corpus: bad feature_dim");
  if (noise_std < 0.0) throw std::invalid_argument("corpus: noise_std must be >= 0");
  if (max_recording_length < 1) throw std::invalid_argument("corpus: max_recording_length must be >= 1");
}

nlohmann::json CorpusSpec::to_json() const {
  return {{"num_languages", num_languages},
          {"symbols_per_language", symbols_per_language},
          {"min_symbols", min_symbols},
          {"max_symbols", max_symbols},
          {"min_frames_per_symbol", min_frames_per_symbol},
          {"max_frames_per_symbol", max_frames_per_symbol},
          {"feature_dim", feature_dim},
          {"noise_std", noise_std},
          {"max_recording_length", max_recording_length},
          {"downsample", downsample},
          {"translation_seed", translation_seed},
          {"train_size", train_size},
          {"dev_size", dev_size},
          {"test_size", test_size},
          {"seed", seed}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  CorpusSpec s;
  const auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("num_languages", s.num_languages);
  get("symbols_per_language", s.symbols_per_language);
  get("min_symbols", s.min_symbols);
  get("max_symbols", s.max_symbols);
  get("min_frames_per_symbol", s.min_frames_per_symbol);
  get("max_frames_per_symbol", s.max_frames_per_symbol);
  get("feature_dim", s.feature_dim);
  get("noise_std", s.noise_std);
  get("max_recording_length", s.max_recording_length);
  get("downsample", s.downsample);
  get("translation_seed", s.translation_seed);
  get("train_size", s.train_size);
  get("dev_size", s.dev_size);
  get("test_size", s.test_size);
  get("seed", s.seed);
  for (const auto& [key, _] : j.items()) {
    if (!s.to_json().contains(key)) throw std::invalid_argument("unknown corpus field: " + key);
  }
  return s;
}

Vocabulary build_vocabulary(const CorpusSpec& spec) {
  return Vocabulary(spec.num_languages, spec.symbols_per_language);
}

namespace {

std::vector<int> permutation(const CorpusSpec& spec, int from, int to) {
  std::mt19937_64 rng(spec.translation_seed);
  std::vector<int> perm(static_cast<std::size_t>(spec.symbols_per_language));
  for (int f = 0; f < spec.num_languages; ++f) {
    for (int t = 0; t < spec.num_languages; ++t) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      if (f == from && t == to) return perm;
    }
  }
  throw std::out_of_range("translation language out of range");
}

float to_float(double v) { return static_cast<float>(v); }

}  // namespace

std::vector<int> translate_tokens(const Vocabulary& vocab, const CorpusSpec& spec,
                                  std::span<const int> source, int from, int to) {
  const std::vector<int> perm = permutation(spec, from, to);
  std::vector<int> out;
  out.reserve(source.size());
  for (int tok : source) {
    if (vocab.language_of(tok) != from || !vocab.is_symbol(tok)) {
      throw std::invalid_argument("translate_tokens: token not in source language");
    }
    out.push_back(vocab.symbol_begin(to) + perm[static_cast<std::size_t>(tok - vocab.symbol_begin(from))]);
  }
  for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  return out;
}

CorpusSplits generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const Vocabulary vocab = build_vocabulary(spec);
  const std::size_t dim = static_cast<std::size_t>(spec.feature_dim);

  // One embedding row per token id; only symbol rows are used.
  std::mt19937_64 emb_rng(spec.seed ^ 0x5eed5eed5eed5eedULL);
  std::normal_distribution<double> unit(0.0, 1.0);
  Tensor embedding({static_cast<std::size_t>(vocab.size()), dim});
  for (double& v : embedding.values()) v = unit(emb_rng);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  std::uint32_t next_id = 0;

  const auto make_split = [&](const std::string& name, std::size_t count) {
    Corpus c{spec, vocab, name, {}};
    while (c.records.size() < count) {
      const int rec_len = std::uniform_int_distribution<int>(1, spec.max_recording_length)(rng);
      const int lang = std::uniform_int_distribution<int>(0, spec.num_languages - 1)(rng);
      std::optional<std::vector<int>> prev;
      for (int u = 0; u < rec_len && c.records.size() < count; ++u) {
        UtteranceRecord r;
        r.id = next_id++;
        r.language = lang;
        const int len = std::uniform_int_distribution<int>(spec.min_symbols, spec.max_symbols)(rng);
        std::uniform_int_distribution<int> sym(vocab.symbol_begin(lang), vocab.symbol_end(lang) - 1);
        std::uniform_int_distribution<int> fps(spec.min_frames_per_symbol, spec.max_frames_per_symbol);
        std::vector<int> durations;
        for (int i = 0; i < len; ++i) {
          r.transcript.push_back(sym(rng));
          durations.push_back(fps(rng));
        }
        const std::size_t frames = static_cast<std::size_t>(std::accumulate(durations.begin(), durations.end(), 0));
        r.features = Tensor({frames, dim});
        std::size_t row = 0;
        for (int i = 0; i < len; ++i) {
          const auto e = embedding.row(static_cast<std::size_t>(r.transcript[static_cast<std::size_t>(i)]));
          for (int f = 0; f < durations[static_cast<std::size_t>(i)]; ++f, ++row) {
            for (std::size_t j = 0; j < dim; ++j) {
              r.features.at(row, j) = to_float(e[j] + noise(rng));
            }
          }
        }
        for (int k = 0; k < spec.num_languages; ++k) {
          if (k != lang) r.translations[k] = translate_tokens(vocab, spec, r.transcript, lang, k);
        }
        r.previous_transcript = prev;
        prev = r.transcript;
        c.records.push_back(std::move(r));
      }
    }
    return c;
  };

  CorpusSplits out;
  out.train = make_split("train", spec.train_size);
  out.dev = make_split("dev", spec.dev_size);
  out.test = make_split("test", spec.test_size);
  return out;
}

void write_corpus_dir(const std::filesystem::path& dir, const CorpusSplits& splits) {
  std::filesystem::create_directories(dir);
  write_corpus(dir / "train.octc", splits.train);
  write_corpus(dir / "dev.octc", splits.dev);
  write_corpus(dir / "test.octc", splits.test);
}

std::vector<int> build_augmented_reference(const Vocabulary& vocab, const UtteranceRecord& utt,
                                           int task_token, LayerRole role,
                                           AsrOnlyTaskToken asr_only_task) {
  if (!vocab.is_task(task_token)) throw std::invalid_argument("reference needs a task token");
  std::vector<int> ref{vocab.lang_token(utt.language), task_token};
  const bool use_transcript = role == LayerRole::AsrOnly || task_token == vocab.asr();
  if (role == LayerRole::AsrOnly && asr_only_task == AsrOnlyTaskToken::ForceAsr) ref[1] = vocab.asr();
  if (use_transcript) {
    ref.insert(ref.end(), utt.transcript.begin(), utt.transcript.end());
  } else {
    const int target = vocab.language_of(task_token);
    const auto it = utt.translations.find(target);
    if (it == utt.translations.end()) {
      throw std::invalid_argument("utterance " + std::to_string(utt.id) + " has no translation into language " +
                                  std::to_string(target));
    }
    ref.insert(ref.end(), it->second.begin(), it->second.end());
  }
  return ref;
}

Conditioning sample_conditioning(const Vocabulary& vocab, const UtteranceRecord& utt,
                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lang_draw = u(rng);
  const double prompt_draw = u(rng);
  Conditioning c;
  c.lang_token = lang_draw < 0.5 ? vocab.nolang() : vocab.lang_token(utt.language);
  if (utt.previous_transcript && !utt.previous_transcript->empty() && prompt_draw < 0.5) {
    c.prompt = *utt.previous_transcript;
  } else {
    c.prompt = {vocab.na()};
  }
  return c;
}

UtteranceRecord concatenate_utterances(std::span<const UtteranceRecord* const> parts) {
  if (parts.empty()) throw std::invalid_argument("nothing to concatenate");
  const UtteranceRecord& first = *parts.front();
  UtteranceRecord out;
  out.id = first.id;
  out.language = first.language;
  out.previous_transcript = first.previous_transcript;
  out.translations = first.translations;
  for (auto& [_, t] : out.translations) t.clear();
  std::vector<double> values;
  std::size_t rows = 0;
  for (const UtteranceRecord* p : parts) {
    if (p->language != first.language) throw std::invalid_argument("concatenated utterances must share a language");
    if (p->features.cols() != first.features.cols()) throw ShapeError("feature dimensions differ");
    values.insert(values.end(), p->features.values().begin(), p->features.values().end());
    rows += p->frames();
    out.transcript.insert(out.transcript.end(), p->transcript.begin(), p->transcript.end());
    for (auto& [lang, t] : out.translations) {
      const auto& src = p->translations.at(lang);
      t.insert(t.end(), src.begin(), src.end());
    }
  }
  out.features = Tensor({rows, first.features.cols()}, std::move(values));
  return out;
}

std::vector<int> available_tasks(const Vocabulary& vocab, const UtteranceRecord& utt) {
  std::vector<int> tasks{vocab.asr()};
  for (const auto& [lang, _] : utt.translations) tasks.push_back(vocab.st_token(lang));
  return tasks;
}

}  // namespace octc
