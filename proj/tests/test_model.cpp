#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "octc/checkpoint.hpp"
#include "octc/ctc.hpp"
#include "octc/model.hpp"
#include "support.hpp"

using namespace octc;

namespace {

struct Fixture {
  CorpusSpec spec;
  CorpusSplits data;
  Fixture() {
    spec.symbols_per_language = 6;
    spec.train_size = 12;
    spec.dev_size = 2;
    spec.test_size = 2;
    data = generate_corpus(spec);
  }
  const Vocabulary& vocab() const { return data.train.vocab; }
  const UtteranceRecord& utt(std::size_t i) const { return data.train.records.at(i); }
  EncoderInput input(std::size_t i, int task = -1) const {
    const auto& u = utt(i);
    return {&u.features, u.frames(), vocab().lang_token(u.language), task < 0 ? vocab().asr() : task, {vocab().na()}};
  }
};

ModelConfig small_config() {
  ModelConfig c;
  c.num_layers = 4;
  c.d_model = 16;
  c.heads = 2;
  c.inter_layers = {1, 2};
  c.num_asr_layers = 1;
  c.inject_layers = {2, 4};
  c.prompt_layers = 1;
  c.prompt_dim = 8;
  c.prompt_heads = 2;
  c.prompt_ffn = 16;
  c.cg_hidden = 16;
  c.conv_kernel = 3;
  return c;
}

ForwardTrace run(const SpeechModel& m, Tape& tape, std::vector<EncoderInput> batch) {
  return encode_speech(tape, m, batch);
}

}  // namespace

TEST_CASE("encoded frame count") {
  CHECK(encoded_frames(16, 4) == 4);
  CHECK(encoded_frames(17, 4) == 5);
  CHECK(encoded_frames(9, 1) == 9);
}

TEST_CASE("trace shapes and posterior normalisation") {
  Fixture f;
  const SpeechModel m(ModelConfig{}, f.vocab(), 3);
  Tape tape(m.params());
  const ForwardTrace tr = run(m, tape, {f.input(0), f.input(1)});
  const std::size_t T = encoded_frames(f.utt(0).frames(), 2);
  CHECK(tr.hidden.size() == 7);
  CHECK(tr.rows_of(tr.hidden[3], 0).rows() == T + 2);
  CHECK(tr.rows_of(tr.hidden[3], 0).cols() == 64);
  CHECK(tr.ctc_log_probs.size() == 3);
  CHECK(tr.ctc_layers == std::vector<int>{2, 4, 6});
  CHECK(tr.log_probs(0, 0).cols() == static_cast<std::size_t>(f.vocab().size()));
  CHECK(tr.prompt_rows(1).rows() == 1);
  for (const auto& [s, b] : tr.posteriors) {
    const Tensor& v = b.value();
    for (std::size_t r = 0; r < v.rows(); ++r) {
      double sum = 0;
      for (double x : v.row(r)) sum += x;
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("four intermediate layers yield five grids") {
  Fixture f;
  ModelConfig c = small_config();
  c.num_layers = 27;
  c.inter_layers = {6, 12, 15, 21};
  c.num_asr_layers = 3;
  c.inject_layers = {3, 6, 9, 12, 15, 18, 21, 24, 27};
  const SpeechModel m(c, f.vocab(), 1);
  Tape tape(m.params(), false);
  CHECK(run(m, tape, {f.input(0)}).ctc_log_probs.size() == 5);
}

TEST_CASE("total loss is the mean of the layer losses") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 4);
  Tape tape(m.params());
  const int st = f.vocab().st_token(f.utt(0).translations.begin()->first);
  const ForwardTrace tr = run(m, tape, {f.input(0, st)});
  const LossBreakdown lb = compute_losses(m, tr, {m.references(f.utt(0), st)});
  double mean = 0;
  for (double l : lb.per_layer) mean += l / 3.0;
  CHECK(std::abs(lb.total.value().item() - mean) <= 1e-12);
  // each term equals a direct CTC call on the recorded grid
  const auto refs = m.references(f.utt(0), st);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor lp = tr.log_probs(k, 0);
    CHECK(lb.per_layer[k] == ctc_loss_value(lp, refs[k], lp.rows(), 0));
  }
}

TEST_CASE("no intermediate layers leaves the final loss alone") {
  Fixture f;
  ModelConfig c = small_config();
  c.inter_layers = {};
  c.num_asr_layers = 0;
  const SpeechModel m(c, f.vocab(), 4);
  Tape tape(m.params());
  const ForwardTrace tr = run(m, tape, {f.input(2)});
  const LossBreakdown lb = compute_losses(m, tr, {m.references(f.utt(2), f.vocab().asr())});
  CHECK(lb.total.value().item() == lb.final_loss());
}

TEST_CASE("zero re-injection matrix reproduces the plain encoder") {
  Fixture f;
  SpeechModel m(small_config(), f.vocab(), 5);
  for (double& v : m.param("ctc.w2").values()) v = 0.0;
  ModelConfig plain_cfg = m.config();
  plain_cfg.self_conditioning = false;
  const SpeechModel plain(plain_cfg, f.vocab(), m.params());
  Tape a(m.params()), b(plain.params());
  const ForwardTrace ta = run(m, a, {f.input(0), f.input(3)});
  const ForwardTrace tb = run(plain, b, {f.input(0), f.input(3)});
  for (std::size_t k = 0; k < ta.ctc_log_probs.size(); ++k) {
    CHECK(ta.ctc_log_probs[k].value() == tb.ctc_log_probs[k].value());
  }
  CHECK(ta.hidden.back().value() == tb.hidden.back().value());
}

TEST_CASE("fresh cross-attention ignores the prompt") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 6);
  EncoderInput a = f.input(1), b = f.input(1);
  b.prompt = {f.vocab().symbol(0, 1), f.vocab().symbol(0, 4), f.vocab().symbol(0, 2)};
  Tape ta(m.params()), tb(m.params());
  const ForwardTrace x = run(m, ta, {a});
  const ForwardTrace y = run(m, tb, {b});
  CHECK_FALSE(x.prompt.value() == y.prompt.value());
  for (std::size_t k = 0; k < x.ctc_log_probs.size(); ++k) CHECK(x.ctc_log_probs[k].value() == y.ctc_log_probs[k].value());
}

TEST_CASE("padding beyond the valid frames does not change losses") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 7);
  const UtteranceRecord& u = f.utt(4);
  Tensor padded({u.frames() + 9, u.features.cols()});
  std::copy(u.features.data(), u.features.data() + u.features.size(), padded.data());
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 5.0);
  for (std::size_t i = u.features.size(); i < padded.size(); ++i) padded[i] = n(rng);
  EncoderInput a = f.input(4), b = a;
  b.features = &padded;
  const auto refs = m.references(u, f.vocab().asr());
  Tape ta(m.params()), tb(m.params());
  const LossBreakdown la = compute_losses(m, run(m, ta, {a}), {refs});
  const LossBreakdown lb = compute_losses(m, run(m, tb, {b}), {refs});
  for (std::size_t k = 0; k < la.per_layer.size(); ++k) CHECK(std::abs(la.per_layer[k] - lb.per_layer[k]) <= 1e-10);
}

TEST_CASE("batching does not change per-sequence results") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 8);
  Tape tb(m.params(), false);
  const ForwardTrace batched = run(m, tb, {f.input(0), f.input(5), f.input(7)});
  const std::size_t idx[] = {0, 5, 7};
  for (std::size_t i = 0; i < 3; ++i) {
    Tape t(m.params(), false);
    const ForwardTrace single = run(m, t, {f.input(idx[i])});
    for (std::size_t k = 0; k < 3; ++k) CHECK(single.log_probs(k, 0) == batched.log_probs(k, i));
  }
}

TEST_CASE("token prepending") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 9);
  EncoderInput a = f.input(0), b = a;
  b.lang_token = f.vocab().nolang();
  Tape ta(m.params()), tb(m.params());
  const Tensor xa = run(m, ta, {a}).hidden[0].value();
  const Tensor xb = run(m, tb, {b}).hidden[0].value();
  CHECK(xa.rows() == encoded_frames(f.utt(0).frames(), 2) + 2);
  for (std::size_t r = 0; r < xa.rows(); ++r) {
    const bool same = xa.slice_rows(r, 1) == xb.slice_rows(r, 1);
    CHECK(same == (r != 0));
  }
  double norm = 0;
  for (double v : m.param("embed.special").row(static_cast<std::size_t>(f.vocab().nolang()))) norm += v * v;
  CHECK(norm > 0);

  EncoderInput bad = a;
  bad.lang_token = f.vocab().symbol(0, 0);
  Tape tc(m.params());
  CHECK_THROWS(run(m, tc, {bad}));
  bad = a;
  bad.task_token = f.vocab().lang_token(0);
  Tape td(m.params());
  CHECK_THROWS(run(m, td, {bad}));
}

TEST_CASE("front-end checks") {
  Fixture f;
  ModelConfig c = small_config();
  c.downsample = 4;
  const SpeechModel m(c, f.vocab(), 10);
  Tensor tiny({3, 16}, 0.5);
  EncoderInput in{&tiny, 3, f.vocab().nolang(), f.vocab().asr(), {f.vocab().na()}};
  Tape t(m.params());
  CHECK_THROWS(run(m, t, {in}));

  // factor 1 with an identity projection passes frames through
  ModelConfig one = small_config();
  one.downsample = 1;
  SpeechModel id(one, f.vocab(), 11);
  Tensor& w = id.param("frontend.proj.w");
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) w.at(i, j) = i == j ? 1.0 : 0.0;
  for (double& v : id.param("frontend.proj.b").values()) v = 0.0;
  const UtteranceRecord& u = f.utt(0);
  const EncoderInput e{&u.features, u.frames(), f.vocab().nolang(), f.vocab().asr(), {f.vocab().na()}};
  Tape t2(id.params());
  Layout lay;
  const Tensor out = downsample_frontend(t2, id, std::span<const EncoderInput>(&e, 1), lay).value();
  CHECK(out == u.features);
}

TEST_CASE("zero merge projection makes a layer the identity") {
  Fixture f;
  SpeechModel m(small_config(), f.vocab(), 12);
  for (double& v : m.param("enc.02.merge.w").values()) v = 0.0;
  for (double& v : m.param("enc.02.merge.b").values()) v = 0.0;
  Tape t(m.params());
  const ForwardTrace tr = run(m, t, {f.input(0)});
  const Tensor y = speech_enc_layer(t, m, 2, tr.hidden[1], tr.layout).value();
  CHECK(y == tr.hidden[1].value());
  CHECK(y.shape() == tr.hidden[1].value().shape());
}

TEST_CASE("prompt encoder") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 13);
  const std::vector<std::vector<int>> na{{f.vocab().na()}};
  Tape t(m.params());
  Layout lay;
  const Tensor p = prompt_encode(t, m, na, lay).value();
  CHECK(p.rows() == 1);
  CHECK(p.cols() == 8);
  Tape t2(m.params());
  CHECK(prompt_encode(t2, m, na, lay).value() == p);
  const std::vector<std::vector<int>> bad{{f.vocab().asr()}};
  Tape t3(m.params());
  CHECK_THROWS(prompt_encode(t3, m, bad, lay));
  const std::vector<std::vector<int>> empty{{}};
  Tape t4(m.params());
  CHECK_THROWS(prompt_encode(t4, m, empty, lay));
}

TEST_CASE("infeasible references name the layer") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 14);
  Tape t(m.params());
  const ForwardTrace tr = run(m, t, {f.input(0)});
  auto refs = m.references(f.utt(0), f.vocab().asr());
  refs[1].insert(refs[1].end(), 60, f.vocab().symbol(0, 0));
  try {
    compute_losses(m, tr, {refs});
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}

TEST_CASE("gradients through one layer and through the prompt encoder") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 15);
  const UtteranceRecord& u = f.utt(1);
  const EncoderInput in{&u.features, u.frames(), f.vocab().nolang(), f.vocab().asr(),
                        {f.vocab().symbol(u.language, 0), f.vocab().symbol(u.language, 2)}};

  // encoder layer 3 only, on a fixed input
  Tape t0(m.params(), false);
  const ForwardTrace tr = run(m, t0, {in});
  const Tensor x = tr.hidden[2].value();
  ParameterSet layer;
  for (const auto& [name, v] : m.params())
    if (name.rfind("enc.03.", 0) == 0) layer.emplace(name, v);
  layer.emplace("x", x);
  const auto layer_fn = [&](Tape& t) {
    return octc::testing::contract(t, speech_enc_layer(t, m, 3, t.param("x"), tr.layout));
  };
  const GradCheckResult lr = octc::testing::check_graph(layer, layer_fn, 12);
  INFO("worst ", lr.worst_param, "[", lr.worst_index, "] analytic ", lr.worst_analytic, " numeric ", lr.worst_numeric);
  CHECK(lr.max_rel_error <= 1e-4);

  ParameterSet prompt;
  for (const auto& [name, v] : m.params())
    if (name.rfind("prompt.", 0) == 0) prompt.emplace(name, v);
  const auto prompt_fn = [&](Tape& t) {
    Layout lay;
    const std::vector<std::vector<int>> p{in.prompt};
    return octc::testing::contract(t, prompt_encode(t, m, p, lay));
  };
  const GradCheckResult pr = octc::testing::check_graph(prompt, prompt_fn, 12);
  INFO("worst ", pr.worst_param, "[", pr.worst_index, "] analytic ", pr.worst_analytic, " numeric ", pr.worst_numeric);
  CHECK(pr.max_rel_error <= 1e-4);
}

TEST_CASE("checkpoint round trip") {
  Fixture f;
  const SpeechModel m(small_config(), f.vocab(), 16);
  CheckpointData d{m.config(), m.vocab(), {{"note", "x"}}, m.params()};
  const std::string bytes = serialize_checkpoint(d);
  const CheckpointData back = parse_checkpoint(bytes);
  CHECK(back.config == m.config());
  CHECK(back.vocab == m.vocab());
  CHECK(back.header_extra.at("note") == "x");
  for (const auto& [name, t] : m.params()) CHECK(back.tensors.at(name) == t);
  const SpeechModel again = model_from_checkpoint(back);
  CHECK(again.params().size() == m.params().size());

  std::string bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(bad), CheckpointFormatError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad), doctest::Contains("version"), CheckpointFormatError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointFormatError);

  const auto path = std::filesystem::temp_directory_path() / "octc_model_test.ockp";
  write_checkpoint(path, d);
  CHECK(file_digest(path) == file_digest(path));
  CHECK(file_digest(path).size() == 16);
  std::filesystem::remove(path);
}
