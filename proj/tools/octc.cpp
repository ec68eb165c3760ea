// Command-line driver: data generation, training, decoding, alignment,
// long-form decoding, evaluation and throughput.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "octc/checkpoint.hpp"
#include "octc/ctc.hpp"
#include "octc/eval.hpp"
#include "octc/infer.hpp"
#include "octc/train.hpp"

using nlohmann::json;
using namespace octc;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config " + path + ": " + e.what());
  }
}

// key=value with a dotted key; the value is parsed as JSON when possible.
void apply_override(json& cfg, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + item + "'");
  const std::string key = item.substr(0, eq);
  const std::string text = item.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &cfg;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = value;
}

json load_config(const std::string& path, const std::vector<std::string>& sets) {
  json cfg = path.empty() ? json::object() : read_json_file(path);
  for (const auto& s : sets) apply_override(cfg, s);
  return cfg;
}

json section(const json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

void emit(const json& j, std::ostream& out) { out << j.dump() << '\n'; }

int task_from_string(const Vocabulary& vocab, const std::string& s) {
  if (s == "asr") return vocab.asr();
  if (s.rfind("st-", 0) == 0) {
    const int k = std::stoi(s.substr(3));
    if (k < 0 || k >= vocab.num_languages()) throw UsageError("no such target language: " + s);
    return vocab.st_token(k);
  }
  throw UsageError("task must be 'asr' or 'st-K', got '" + s + "'");
}

const UtteranceRecord& find_utterance(const Corpus& corpus, std::uint32_t id) {
  for (const auto& r : corpus.records)
    if (r.id == id) return r;
  throw std::runtime_error("utterance " + std::to_string(id) + " not in corpus");
}

struct Loaded {
  SpeechModel model;
  json provenance;
};

Loaded load_model(const std::string& path) {
  CheckpointData data = read_checkpoint(path);
  json prov = {{"checkpoint", path}, {"checkpoint_digest", file_digest(path)}};
  if (data.header_extra.contains("train")) {
    const auto& t = data.header_extra.at("train");
    prov["seed"] = t.at("config").at("seed");
    prov["step"] = t.at("step");
  }
  return {model_from_checkpoint(data), prov};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task self-conditioned CTC speech model on a synthetic corpus"};
  app.require_subcommand(1);

  std::string config_path, out_path, checkpoint, corpus_path, resume, task = "asr";
  std::vector<std::string> sets;
  bool quiet_time = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--config", config_path, "Corpus spec (JSON)");
  gen->add_option("--out", out_path, "Output directory")->required();
  gen->add_option("--set", sets, "Override key=value");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "Config with corpus/model/train sections");
  train->add_option("--set", sets, "Override section.key=value");
  train->add_option("--resume", resume, "Continue from a training checkpoint");
  train->add_flag("--no-timing", quiet_time, "Leave wall time out of the metrics log");

  std::size_t batch = 16, limit = 0, count = 20, start = 0, window = 40, context = 8;
  std::uint32_t utt_id = 0;
  bool true_lang = false, prev_prompt = false, timing = false;
  std::vector<std::size_t> batch_sizes{1, 8};

  auto* decode = app.add_subcommand("decode", "Greedy decoding to JSON lines");
  decode->add_option("--checkpoint", checkpoint)->required();
  decode->add_option("--corpus", corpus_path)->required();
  decode->add_option("--task", task, "asr or st-K");
  decode->add_flag("--true-lang", true_lang, "Give the true language token instead of <nolang>");
  decode->add_flag("--prev-prompt", prev_prompt, "Prompt with the previous transcript");
  decode->add_option("--batch", batch);
  decode->add_option("--limit", limit, "Decode at most this many utterances");
  decode->add_option("--out", out_path, "Output file (default stdout)");

  auto* align = app.add_subcommand("align", "Forced alignment of one utterance");
  align->add_option("--checkpoint", checkpoint)->required();
  align->add_option("--corpus", corpus_path)->required();
  align->add_option("--utt", utt_id)->required();
  align->add_option("--task", task, "asr or st-K");

  auto* longform = app.add_subcommand("longform", "Chunked decoding of concatenated utterances");
  longform->add_option("--checkpoint", checkpoint)->required();
  longform->add_option("--corpus", corpus_path)->required();
  longform->add_option("--start", start, "Index of the first utterance");
  longform->add_option("--count", count, "Utterances to concatenate");
  longform->add_option("--window", window, "Window in encoder frames");
  longform->add_option("--context", context, "Context per side in encoder frames");
  longform->add_option("--batch", batch);

  std::string eval_task = "all";
  auto* eval = app.add_subcommand("eval", "Token error rate and LID accuracy report");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--corpus", corpus_path)->required();
  eval->add_option("--task", eval_task, "asr, st or all");
  eval->add_flag("--true-lang", true_lang);
  eval->add_flag("--prev-prompt", prev_prompt);
  eval->add_flag("--timing", timing, "Include wall time in the report");
  eval->add_option("--batch", batch);
  eval->add_option("--out", out_path, "Report file (default stdout)");

  auto* thr = app.add_subcommand("throughput", "Decoding speed per batch size");
  thr->add_option("--checkpoint", checkpoint)->required();
  thr->add_option("--corpus", corpus_path)->required();
  thr->add_option("--batch-sizes", batch_sizes)->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 1;
  }

  try {
    std::ofstream file_out;
    auto out_stream = [&]() -> std::ostream& {
      if (out_path.empty()) return std::cout;
      file_out.open(out_path);
      if (!file_out) throw std::runtime_error("cannot write " + out_path);
      return file_out;
    };

    if (*gen) {
      json cfg = load_config(config_path, sets);
      const CorpusSpec spec = CorpusSpec::from_json(cfg.contains("corpus") ? cfg.at("corpus") : cfg);
      const CorpusSplits splits = generate_corpus(spec);
      write_corpus_dir(out_path, splits);
      emit({{"written", out_path},
            {"train", splits.train.records.size()},
            {"dev", splits.dev.records.size()},
            {"test", splits.test.records.size()},
            {"vocab_size", splits.train.vocab.size()}},
           std::cout);
      return 0;
    }

    if (*train) {
      const json cfg = load_config(config_path, sets);
      const TrainConfig tc = TrainConfig::from_json(section(cfg, "train"));
      if (tc.train_corpus.empty()) throw UsageError("train.train_corpus is required");
      const Corpus corpus = read_corpus(tc.train_corpus);
      std::optional<Trainer> trainer;
      if (!resume.empty()) {
        trainer.emplace(load_checkpoint(resume, &tc));
      } else {
        ModelConfig mc = ModelConfig::from_json(section(cfg, "model"));
        if (mc.feature_dim != corpus.spec.feature_dim) mc.feature_dim = corpus.spec.feature_dim;
        trainer.emplace(SpeechModel(mc, corpus.vocab, tc.seed), tc);
      }
      std::ofstream log_file;
      std::ostream* log = &std::cout;
      if (!tc.log_path.empty()) {
        log_file.open(tc.log_path, resume.empty() ? std::ios::trunc : std::ios::app);
        if (!log_file) throw std::runtime_error("cannot write " + tc.log_path);
        log = &log_file;
      }
      const TrainResult r = train_loop(*trainer, corpus, nullptr, [&](const StepReport& s) {
        *log << s.to_json(!quiet_time).dump() << '\n';
      });
      log->flush();
      json summary = {{"steps_run", r.steps_run}, {"step", trainer->state().step()}, {"last_loss", r.last_loss},
                      {"status", r.diverged ? "diverged" : "ok"}};
      if (r.diverged) summary["reason"] = r.reason;
      if (!r.checkpoints.empty()) summary["checkpoint"] = r.checkpoints.back().string();
      emit(summary, log == &std::cout ? std::cerr : std::cout);
      return 0;
    }

    const Loaded loaded = load_model(checkpoint);
    const SpeechModel& model = loaded.model;
    const Vocabulary& vocab = model.vocab();
    const Corpus corpus = read_corpus(corpus_path);
    if (!(corpus.vocab == vocab)) throw std::runtime_error("corpus vocabulary does not match the checkpoint");

    if (*decode) {
      if (batch == 0) throw UsageError("--batch must be positive");
      const int task_tok = task_from_string(vocab, task);
      std::ostream& out = out_stream();
      std::vector<const UtteranceRecord*> utts;
      for (const auto& u : corpus.records) {
        if (limit != 0 && utts.size() >= limit) break;
        if (task_tok != vocab.asr() && !u.translations.count(vocab.language_of(task_tok))) continue;
        utts.push_back(&u);
      }
      for (std::size_t first = 0; first < utts.size(); first += batch) {
        std::vector<DecodeRequest> reqs;
        for (std::size_t i = first; i < std::min(utts.size(), first + batch); ++i) {
          const UtteranceRecord& u = *utts[i];
          DecodeRequest r{&u.features, u.frames(), task_tok, true_lang ? vocab.lang_token(u.language) : vocab.nolang(), {}};
          if (prev_prompt && u.previous_transcript) r.prompt = *u.previous_transcript;
          reqs.push_back(std::move(r));
        }
        const auto hyps = recognize_batch(model, reqs);
        for (std::size_t i = 0; i < hyps.size(); ++i) emit(hypothesis_to_json(utts[first + i]->id, hyps[i], vocab), out);
      }
      return 0;
    }

    if (*align) {
      const UtteranceRecord& u = find_utterance(corpus, utt_id);
      const int task_tok = task_from_string(vocab, task);
      const std::vector<int> target = model.references(u, task_tok).back();
      EncoderInput in{&u.features, u.frames(), vocab.lang_token(u.language), task_tok, {vocab.na()}};
      Tape tape(model.params(), false);
      const ForwardTrace trace = encode_speech(tape, model, std::span<const EncoderInput>(&in, 1));
      const Tensor lp = trace.log_probs(trace.ctc_log_probs.size() - 1, 0);
      const Alignment a = forced_align(lp, target, lp.rows(), Vocabulary::blank());
      emit({{"utterance_id", u.id},
            {"reference", target},
            {"frame_path", a.frame_path},
            {"log_prob", a.log_prob},
            {"collapse_matches", ctc_collapse(a.frame_path, Vocabulary::blank()) == target}},
           std::cout);
      return 0;
    }

    if (*longform) {
      if (start + count > corpus.records.size()) throw UsageError("not enough utterances in corpus");
      std::vector<double> values;
      std::vector<int> ref;
      std::size_t rows = 0;
      for (std::size_t i = start; i < start + count; ++i) {
        const auto& u = corpus.records[i];
        values.insert(values.end(), u.features.values().begin(), u.features.values().end());
        ref.insert(ref.end(), u.transcript.begin(), u.transcript.end());
        rows += u.frames();
      }
      const Tensor feats({rows, static_cast<std::size_t>(corpus.spec.feature_dim)}, std::move(values));
      LongformOptions opt;
      opt.window = window;
      opt.context = context;
      opt.batch_size = batch;
      const LongformResult r = longform_decode(model, feats, opt);
      const EditCounts e = edit_distance(ref, r.text);
      emit({{"provenance", loaded.provenance},
            {"utterances", count},
            {"chunks", r.plan.chunks.size()},
            {"language", r.language ? json(vocab.name(*r.language)) : json(nullptr)},
            {"tokens", r.text},
            {"reference", ref},
            {"ter", ref.empty() ? 0.0 : static_cast<double>(e.distance) / static_cast<double>(ref.size())}},
           std::cout);
      return 0;
    }

    if (*eval) {
      EvalOptions opt;
      opt.task = parse_eval_task(eval_task);
      opt.true_language = true_lang;
      opt.previous_prompt = prev_prompt;
      opt.batch_size = batch;
      opt.include_timing = timing;
      const EvalSummary s = evaluate_corpus(model, corpus, opt, loaded.provenance);
      emit(s.report, out_stream());
      return 0;
    }

    if (*thr) {
      const ThroughputReport r = measure_throughput(model, corpus, batch_sizes);
      for (const auto& row : r.rows) {
        emit({{"provenance", loaded.provenance},
              {"batch_size", row.batch_size},
              {"seconds", row.seconds},
              {"utterances_per_second", row.utterances_per_second}},
             std::cout);
      }
      emit({{"tokens_identical", r.tokens_identical}}, std::cout);
      return r.tokens_identical ? 0 : 2;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
