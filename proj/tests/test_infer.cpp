#include <cmath>
#include <random>

#include "doctest.h"
#include "octc/eval.hpp"
#include "octc/infer.hpp"

using namespace octc;

namespace {

struct Small {
  CorpusSplits data;
  SpeechModel model;
  Small() {
    CorpusSpec spec;
    spec.symbols_per_language = 5;
    spec.train_size = 4;
    spec.dev_size = 2;
    spec.test_size = 12;
    data = generate_corpus(spec);
    ModelConfig c;
    c.num_layers = 3;
    c.d_model = 16;
    c.heads = 2;
    c.inter_layers = {1, 2};
    c.inject_layers = {3};
    c.prompt_layers = 1;
    c.prompt_dim = 8;
    c.prompt_heads = 2;
    c.prompt_ffn = 16;
    c.cg_hidden = 16;
    c.conv_kernel = 3;
    model = SpeechModel(c, data.train.vocab, 5);
  }
  const Vocabulary& vocab() const { return model.vocab(); }
};

Tensor concat_features(const Corpus& c, std::size_t n) {
  std::vector<double> v;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = c.records[i].features;
    v.insert(v.end(), f.values().begin(), f.values().end());
    rows += f.rows();
  }
  return Tensor({rows, c.records[0].features.cols()}, std::move(v));
}

}  // namespace

TEST_CASE("chunk plan example") {
  const ChunkPlan p = plan_chunks(100, 40, 10);
  REQUIRE(p.chunks.size() == 4);
  const std::size_t keeps[4][2] = {{0, 30}, {30, 50}, {50, 70}, {70, 100}};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p.chunks[i].start == 20 * i);
    CHECK(p.chunks[i].keep_begin == keeps[i][0]);
    CHECK(p.chunks[i].keep_end == keeps[i][1]);
  }
}

TEST_CASE("chunk plan edge cases") {
  const ChunkPlan disjoint = plan_chunks(100, 30, 0);
  CHECK(disjoint.chunks.size() == 4);
  for (std::size_t i = 0; i + 1 < disjoint.chunks.size(); ++i) {
    CHECK(disjoint.chunks[i].keep_end - disjoint.chunks[i].keep_begin == 30);
  }
  const ChunkPlan single = plan_chunks(25, 40, 10);
  REQUIRE(single.chunks.size() == 1);
  CHECK(single.chunks[0].keep_begin == 0);
  CHECK(single.chunks[0].keep_end == 25);
  CHECK_THROWS(plan_chunks(100, 20, 10));
  CHECK(plan_chunks(0, 5, 1).chunks.empty());
}

TEST_CASE("keep regions tile the frame axis") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> total_d(1, 400), w_d(1, 60);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t total = total_d(rng), w = w_d(rng);
    const std::size_t l = std::uniform_int_distribution<std::size_t>(0, (w - 1) / 2)(rng);
    const ChunkPlan p = plan_chunks(total, w, l);
    std::size_t next = 0;
    for (const auto& c : p.chunks) {
      CHECK(c.keep_begin == next);
      CHECK(c.keep_end > c.keep_begin);
      CHECK(c.keep_begin >= c.start);
      CHECK(c.keep_end <= c.start + w);
      next = c.keep_end;
    }
    CHECK(next == total);
  }
}

TEST_CASE("recognition is deterministic and strips special tokens") {
  Small s;
  const auto& u = s.data.test.records[0];
  const Hypothesis a = recognize(s.model, u.features, s.vocab().asr(), s.vocab().nolang());
  const Hypothesis b = recognize(s.model, u.features, s.vocab().asr(), s.vocab().nolang());
  CHECK(a.text == b.text);
  CHECK(a.frame_path == b.frame_path);
  CHECK(a.frame_path.size() == encoded_frames(u.frames(), 2) + 2);
  CHECK(a.layer_decodes.size() == 2);
  CHECK(a.token_frames.size() == a.text.size());
  for (int t : a.text) CHECK(s.vocab().is_symbol(t));
  if (a.language) CHECK(s.vocab().kind(*a.language) == TokenKind::Language);

  // a zero model emits blanks only: every row ties and the lowest id wins
  SpeechModel zero = s.model;
  for (double& v : zero.param("ctc.w1").values()) v = 0.0;
  const Hypothesis z = recognize(zero, u.features, s.vocab().asr(), s.vocab().nolang());
  CHECK(z.text.empty());
  CHECK_FALSE(z.language.has_value());
  for (int t : z.frame_path) CHECK(t == 0);
}

TEST_CASE("batched recognition matches single recognition") {
  Small s;
  std::vector<DecodeRequest> reqs;
  for (const auto& u : s.data.test.records) reqs.push_back({&u.features, u.frames(), s.vocab().asr(), s.vocab().nolang(), {}});
  const auto batched = recognize_batch(s.model, reqs);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const auto single = recognize_batch(s.model, std::span<const DecodeRequest>(&reqs[i], 1));
    CHECK(single[0].frame_path == batched[i].frame_path);
    CHECK(single[0].layer_decodes == batched[i].layer_decodes);
  }
}

TEST_CASE("language identification is total") {
  Small s;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor noise({30, 16});
  for (double& v : noise.values()) v = n(rng);
  const LanguageId id = identify_language(s.model, noise);
  if (id.language) {
    CHECK(id.posterior > 0.0);
    CHECK(id.posterior <= 1.0);
  } else {
    CHECK(id.posterior == 0.0);
  }
}

TEST_CASE("long-form decoding is independent of the batch size") {
  Small s;
  const Tensor feats = concat_features(s.data.test, 8);
  LongformOptions opt;
  opt.window = 24;
  opt.context = 4;
  opt.batch_size = 1;
  const LongformResult one = longform_decode(s.model, feats, opt);
  CHECK(one.plan.chunks.size() > 2);
  for (std::size_t b : {4, 8}) {
    opt.batch_size = b;
    const LongformResult r = longform_decode(s.model, feats, opt);
    CHECK(r.text == one.text);
    CHECK(r.token_frames == one.token_frames);
  }
  for (std::size_t i = 1; i < one.token_frames.size(); ++i) CHECK(one.token_frames[i] >= one.token_frames[i - 1]);
}

TEST_CASE("a single long-form chunk matches short-form decoding") {
  Small s;
  const auto& u = s.data.test.records[1];
  LongformOptions opt;
  opt.window = encoded_frames(u.frames(), 2) + 3;
  opt.context = 1;
  const LongformResult r = longform_decode(s.model, u.features, opt);
  REQUIRE(r.plan.chunks.size() == 1);
  const Hypothesis h = recognize(s.model, u.features, s.vocab().asr(), s.vocab().nolang());
  CHECK(r.text == h.text);
  CHECK(r.token_frames == h.token_frames);
  CHECK(r.language == h.language);
}

TEST_CASE("edit distance") {
  const std::vector<int> kitten{'k', 'i', 't', 't', 'e', 'n'}, sitting{'s', 'i', 't', 't', 'i', 'n', 'g'};
  const EditCounts e = edit_distance(kitten, sitting);
  CHECK(e.distance == 3);
  CHECK(e.substitutions == 2);
  CHECK(e.insertions == 1);
  CHECK(e.deletions == 0);
  CHECK(edit_distance(kitten, kitten).distance == 0);
  const std::vector<int> none;
  const EditCounts ins = edit_distance(none, sitting);
  CHECK(ins.distance == 7);
  CHECK(ins.insertions == 7);
  const EditCounts del = edit_distance(kitten, none);
  CHECK(del.deletions == 6);
  // tie between substitution and deletion+insertion prefers substitution
  const std::vector<int> a{1, 2}, b{1, 3};
  CHECK(edit_distance(a, b).substitutions == 1);
}

TEST_CASE("corpus evaluation on an untrained model") {
  Small s;
  EvalOptions opt;
  const EvalSummary r = evaluate_corpus(s.model, s.data.test, opt, {{"checkpoint_digest", "abc"}});
  CHECK(r.asr.utterances == s.data.test.records.size());
  CHECK(r.st.utterances == 2 * s.data.test.records.size());
  CHECK(r.asr.rate() >= 0.0);
  CHECK(r.report.at("provenance").at("checkpoint_digest") == "abc");
  CHECK(r.report.contains("model_config"));
  CHECK(r.report.at("details").size() == 3 * s.data.test.records.size());
  const EvalSummary again = evaluate_corpus(s.model, s.data.test, opt, {{"checkpoint_digest", "abc"}});
  CHECK(again.report == r.report);

  opt.task = EvalTask::Translate;
  opt.st_target = 1;
  const EvalSummary st = evaluate_corpus(s.model, s.data.test, opt);
  CHECK(st.asr.utterances == 0);
  for (const auto& d : st.report.at("details")) CHECK(d.at("task") == s.vocab().name(s.vocab().st_token(1)));

  Corpus other = s.data.test;
  other.vocab = Vocabulary(2, 3);
  CHECK_THROWS(evaluate_corpus(s.model, other, opt));
  CHECK(parse_eval_task("asr") == EvalTask::Asr);
  CHECK_THROWS(parse_eval_task("mt"));
}

TEST_CASE("throughput table") {
  Small s;
  const std::size_t sizes[] = {1, 4};
  const ThroughputReport r = measure_throughput(s.model, s.data.test, sizes);
  CHECK(r.rows.size() == 2);
  CHECK(r.tokens_identical);
  Corpus empty = s.data.test;
  empty.records.clear();
  CHECK(measure_throughput(s.model, empty, sizes).rows.empty());
}
