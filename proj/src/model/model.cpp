#include "octc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "octc/ctc.hpp"

namespace octc {

namespace {

std::string layer_prefix(const char* group, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s.%02d.", group, index);
  return buf;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

std::size_t num_stages(int downsample) {
  std::size_t n = 0;
  for (int f = downsample; f > 1; f /= 2) ++n;
  return n;
}

class Initializer {
 public:
  Initializer(ParameterSet& out, std::uint64_t seed) : out_(out), rng_(seed) {}

  void normal(const std::string& name, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.values()) v = dist(rng_);
    out_[name] = std::move(t);
  }
  /// Weight [in x out] scaled by 1/sqrt(in).
  void weight(const std::string& name, std::size_t in, std::size_t out) {
    normal(name, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  }
  void constant(const std::string& name, Shape shape, double v) { out_[name] = Tensor(std::move(shape), v); }
  void dense(const std::string& prefix, std::size_t in, std::size_t out) {
    weight(prefix + "w", in, out);
    constant(prefix + "b", {out}, 0.0);
  }
  void norm(const std::string& prefix, std::size_t dim) {
    constant(prefix + "g", {dim}, 1.0);
    constant(prefix + "b", {dim}, 0.0);
  }
  void attention(const std::string& prefix, std::size_t dq, std::size_t dkv, std::size_t d) {
    dense(prefix + "q.", dq, d);
    weight(prefix + "k.w", dkv, d);  // a key bias only shifts each score row, which softmax ignores
    dense(prefix + "v.", dkv, d);
    dense(prefix + "o.", d, dq);
  }

 private:
  ParameterSet& out_;
  std::mt19937_64 rng_;
};

struct Dense {
  Var w, b;
  Dense(Tape& t, const std::string& prefix) : w(t.param(prefix + "w")), b(t.param(prefix + "b")) {}
  Var operator()(const Var& x) const { return linear(x, w, b); }
};

Var norm(Tape& t, const std::string& prefix, const Var& x) {
  return layer_norm(x, t.param(prefix + "g"), t.param(prefix + "b"));
}

Var multi_head(Tape& t, const std::string& prefix, const Var& query, const Var& memory,
               std::size_t heads, const Layout& q_layout, const Layout& kv_layout) {
  const Var q = Dense(t, prefix + "q.")(query);
  const Var k = linear(memory, t.param(prefix + "k.w"));
  const Var v = Dense(t, prefix + "v.")(memory);
  return Dense(t, prefix + "o.")(attention(q, k, v, heads, q_layout, kv_layout));
}

Tensor positions_for(const Layout& layout, std::size_t dim) {
  std::size_t longest = 0;
  for (const Segment& s : layout) longest = std::max(longest, s.length);
  const Tensor table = sinusoidal_positions(longest, dim);
  Tensor out({layout_rows(layout), dim});
  for (const Segment& s : layout)
    std::copy(table.data(), table.data() + s.length * dim, out.data() + s.offset * dim);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

ParameterSet init_parameters(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParameterSet p;
  Initializer init(p, seed);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dp = static_cast<std::size_t>(c.prompt_dim);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto h = static_cast<std::size_t>(c.cg_hidden);

  std::size_t in = static_cast<std::size_t>(c.feature_dim);
  for (std::size_t s = 0; s < num_stages(c.downsample); ++s) {
    init.dense(layer_prefix("frontend.stage", static_cast<int>(s)), 3 * in, d);
    in = d;
  }
  init.dense("frontend.proj.", in, d);
  init.normal("embed.special", {v, d}, 1.0);

  for (int l = 1; l <= c.num_layers; ++l) {
    const std::string pre = layer_prefix("enc", l);
    init.norm(pre + "ln_att.", d);
    init.attention(pre + "att.", d, d, d);
    init.norm(pre + "ln_cg.", d);
    init.dense(pre + "cg.up.", d, 2 * h);
    init.norm(pre + "cg.ln.", h);
    init.normal(pre + "cg.conv.w", {static_cast<std::size_t>(c.conv_kernel), h},
                1.0 / std::sqrt(static_cast<double>(c.conv_kernel)));
    init.constant(pre + "cg.conv.b", {h}, 0.0);
    init.dense(pre + "cg.down.", h, d);
    init.dense(pre + "merge.", 2 * d, d);
    if (contains(c.inject_layers, l)) {
      const std::string xa = layer_prefix("xatt", l);
      init.norm(xa + "ln.", d);
      init.attention(xa, d, dp, d);
      init.constant(xa + "o.w", {d, d}, 0.0);
      init.constant(xa + "o.b", {d}, 0.0);
    }
  }
  init.norm("enc.out_norm.", d);
  init.weight("ctc.w1", d, v);
  init.normal("ctc.w2", {v, d}, 1.0 / std::sqrt(static_cast<double>(d)));

  init.normal("prompt.embed", {v, dp}, 1.0);
  for (int l = 1; l <= c.prompt_layers; ++l) {
    const std::string pre = layer_prefix("prompt", l);
    init.norm(pre + "ln_att.", dp);
    init.attention(pre + "att.", dp, dp, dp);
    init.norm(pre + "ln_ffn.", dp);
    init.dense(pre + "ffn.in.", dp, static_cast<std::size_t>(c.prompt_ffn));
    init.dense(pre + "ffn.out.", static_cast<std::size_t>(c.prompt_ffn), dp);
  }
  init.norm("prompt.out_norm.", dp);
  return p;
}

SpeechModel::SpeechModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
  if (config_.vocab_size != vocab_.size()) throw std::invalid_argument("model vocab_size disagrees with vocabulary");
  params_ = init_parameters(config_, seed);
}

SpeechModel::SpeechModel(ModelConfig config, Vocabulary vocab, ParameterSet params)
    : config_(std::move(config)), vocab_(std::move(vocab)), params_(std::move(params)) {
  if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
  config_.validate();
  if (config_.vocab_size != vocab_.size()) throw std::invalid_argument("model vocab_size disagrees with vocabulary");
  const ParameterSet expected = init_parameters(config_, 0);
  for (const auto& [name, t] : expected) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("missing parameter " + name);
    if (it->second.shape() != t.shape()) throw ShapeError("parameter " + name + " has wrong shape");
  }
  if (params_.size() != expected.size()) throw std::invalid_argument("unexpected extra parameters");
}

LayerRole SpeechModel::ctc_role(std::size_t k) const {
  return static_cast<int>(k) < config_.num_asr_layers ? LayerRole::AsrOnly : LayerRole::TaskDependent;
}

int SpeechModel::ctc_layer(std::size_t k) const {
  return k < config_.inter_layers.size() ? config_.inter_layers[k] : config_.num_layers;
}

std::vector<std::vector<int>> SpeechModel::references(const UtteranceRecord& utt, int task_token) const {
  std::vector<std::vector<int>> refs;
  for (std::size_t k = 0; k < config_.num_ctc_layers(); ++k) {
    refs.push_back(build_augmented_reference(vocab_, utt, task_token, ctc_role(k), config_.asr_only_task));
  }
  return refs;
}

std::size_t SpeechModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------

std::size_t encoded_frames(std::size_t raw_frames, int downsample) {
  const auto f = static_cast<std::size_t>(downsample);
  return (raw_frames + f - 1) / f;
}

Var downsample_frontend(Tape& tape, const SpeechModel& model, std::span<const EncoderInput> batch,
                        Layout& layout) {
  const ModelConfig& c = model.config();
  const auto dim = static_cast<std::size_t>(c.feature_dim);
  std::vector<std::size_t> lengths, valids;
  std::size_t rows = 0;
  for (const EncoderInput& in : batch) {
    if (in.features == nullptr) throw std::invalid_argument("encoder input without features");
    if (in.features->rank() != 2 || in.features->cols() != dim) {
      throw ShapeError("features must be T x " + std::to_string(dim) + ", got " + shape_string(in.features->shape()));
    }
    if (in.features->rows() < static_cast<std::size_t>(c.downsample)) {
      throw std::invalid_argument("input shorter than the downsampling factor");
    }
    if (in.valid_frames == 0 || in.valid_frames > in.features->rows()) {
      throw std::invalid_argument("valid frame count out of range");
    }
    lengths.push_back(in.features->rows());
    valids.push_back(in.valid_frames);
    rows += in.features->rows();
  }
  Tensor packed({rows, dim});
  std::size_t off = 0;
  for (const EncoderInput& in : batch) {
    // Frames past valid_frames are never read, so they may hold anything.
    std::copy(in.features->data(), in.features->data() + in.valid_frames * dim, packed.data() + off * dim);
    off += in.features->rows();
  }
  layout = make_layout(lengths, valids);
  Var x = tape.constant(std::move(packed));
  for (std::size_t s = 0; s < num_stages(c.downsample); ++s) {
    x = stack_stride2(x, layout);
    layout = halve_layout(layout);
    x = silu(Dense(tape, layer_prefix("frontend.stage", static_cast<int>(s)))(x));
  }
  return Dense(tape, "frontend.proj.")(x);
}

Var prepend_tokens(Tape& tape, const SpeechModel& model, const Var& speech, const Layout& layout,
                   std::span<const EncoderInput> batch, Layout& out_layout) {
  const Vocabulary& vocab = model.vocab();
  if (batch.size() != layout.size()) throw ShapeError("prepend_tokens: batch and layout differ");
  std::vector<int> ids;
  for (const EncoderInput& in : batch) {
    const auto lk = vocab.kind(in.lang_token);
    if (lk != TokenKind::Language && lk != TokenKind::NoLanguage) {
      throw std::invalid_argument("language slot needs <lang-k> or <nolang>, got " + vocab.name(in.lang_token));
    }
    if (!vocab.is_task(in.task_token)) {
      throw std::invalid_argument("task slot needs <asr> or <st-k>, got " + vocab.name(in.task_token));
    }
    ids.push_back(in.lang_token);
    ids.push_back(in.task_token);
  }
  const Var special = gather_rows(tape.param("embed.special"), ids);
  std::vector<Var> parts;
  std::vector<std::size_t> lengths, valids;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    parts.push_back(slice_rows(special, 2 * i, 2));
    parts.push_back(slice_rows(speech, layout[i].offset, layout[i].length));
    lengths.push_back(layout[i].length + 2);
    valids.push_back(layout[i].valid + 2);
  }
  out_layout = make_layout(lengths, valids);
  return concat_rows(parts);
}

Var speech_enc_layer(Tape& tape, const SpeechModel& model, int layer, const Var& x, const Layout& layout) {
  const ModelConfig& c = model.config();
  const std::string pre = layer_prefix("enc", layer);
  const auto h = static_cast<std::size_t>(c.cg_hidden);

  const Var hn = norm(tape, pre + "ln_att.", x);
  const Var att = multi_head(tape, pre + "att.", hn, hn, static_cast<std::size_t>(c.heads), layout, layout);

  const Var up = silu(Dense(tape, pre + "cg.up.")(norm(tape, pre + "ln_cg.", x)));
  const Var gate = depthwise_conv1d(norm(tape, pre + "cg.ln.", slice_cols(up, h, h)),
                                    tape.param(pre + "cg.conv.w"), tape.param(pre + "cg.conv.b"), layout);
  const Var cg = Dense(tape, pre + "cg.down.")(mul(slice_cols(up, 0, h), gate));

  return add(x, Dense(tape, pre + "merge.")(concat_cols(att, cg)));
}

Var prompt_encode(Tape& tape, const SpeechModel& model, std::span<const std::vector<int>> prompts,
                  Layout& layout) {
  const ModelConfig& c = model.config();
  const Vocabulary& vocab = model.vocab();
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
  for (const auto& p : prompts) {
    if (p.empty()) throw std::invalid_argument("prompt must be non-empty (use <na>)");
    for (int tok : p) {
      if (tok < 0 || tok >= vocab.size() || !(vocab.is_symbol(tok) || tok == vocab.na())) {
        throw std::invalid_argument("prompt token " + std::to_string(tok) + " is not a text symbol or <na>");
      }
      ids.push_back(tok);
    }
    lengths.push_back(p.size());
  }
  layout = make_layout(lengths, lengths);
  const auto dp = static_cast<std::size_t>(c.prompt_dim);
  Var x = add(gather_rows(tape.param("prompt.embed"), ids), tape.constant(positions_for(layout, dp)));
  for (int l = 1; l <= c.prompt_layers; ++l) {
    const std::string pre = layer_prefix("prompt", l);
    const Var hn = norm(tape, pre + "ln_att.", x);
    x = add(x, multi_head(tape, pre + "att.", hn, hn, static_cast<std::size_t>(c.prompt_heads), layout, layout));
    const Var f = Dense(tape, pre + "ffn.out.")(silu(Dense(tape, pre + "ffn.in.")(norm(tape, pre + "ln_ffn.", x))));
    x = add(x, f);
  }
  return norm(tape, "prompt.out_norm.", x);
}

ForwardTrace encode_speech(Tape& tape, const SpeechModel& model, std::span<const EncoderInput> batch) {
  const ModelConfig& c = model.config();
  if (batch.empty()) throw std::invalid_argument("encode_speech: empty batch");
  const std::size_t cells_before = tape.attention_cells;
  ForwardTrace tr;

  Layout speech_layout;
  const Var speech = downsample_frontend(tape, model, batch, speech_layout);
  Var x = prepend_tokens(tape, model, speech, speech_layout, batch, tr.layout);
  x = add(x, tape.constant(positions_for(tr.layout, static_cast<std::size_t>(c.d_model))));
  tr.hidden.push_back(x);

  if (!c.inject_layers.empty()) {
    std::vector<std::vector<int>> prompts;
    for (const EncoderInput& in : batch) prompts.push_back(in.prompt);
    tr.prompt = prompt_encode(tape, model, prompts, tr.prompt_layout);
  }

  const Var w1 = tape.param("ctc.w1");
  const Var w2 = tape.param("ctc.w2");
  const auto head = [&](const Var& a) {
    return log_softmax_lastdim(matmul(norm(tape, "enc.out_norm.", a), w1));
  };

  for (int l = 1; l <= c.num_layers; ++l) {
    Var y = speech_enc_layer(tape, model, l, x, tr.layout);
    if (contains(c.inject_layers, l)) {
      tr.pre_injection[l] = y;
      const std::string xa = layer_prefix("xatt", l);
      y = add(y, multi_head(tape, xa, norm(tape, xa + "ln.", y), tr.prompt, static_cast<std::size_t>(c.heads),
                            tr.layout, tr.prompt_layout));
    }
    if (contains(c.inter_layers, l)) {
      tr.pre_conditioning[l] = y;
      const Var logp = head(y);
      const Var b = exp(logp);
      tr.posteriors[l] = b;
      tr.ctc_layers.push_back(l);
      tr.ctc_log_probs.push_back(logp);
      if (c.self_conditioning) y = add(y, matmul(b, w2));
    }
    x = y;
    tr.hidden.push_back(x);
  }
  tr.ctc_layers.push_back(c.num_layers);
  tr.ctc_log_probs.push_back(head(x));
  tr.attention_cells = tape.attention_cells - cells_before;
  return tr;
}

Tensor ForwardTrace::rows_of(const Var& v, std::size_t seq) const {
  return v.value().slice_rows(layout.at(seq).offset, layout.at(seq).length);
}

Tensor ForwardTrace::prompt_rows(std::size_t seq) const {
  return prompt.value().slice_rows(prompt_layout.at(seq).offset, prompt_layout.at(seq).length);
}

Tensor ForwardTrace::log_probs(std::size_t head, std::size_t seq) const {
  const Segment& s = layout.at(seq);
  return ctc_log_probs.at(head).value().slice_rows(s.offset, s.valid);
}

LossBreakdown compute_losses(const SpeechModel& model, const ForwardTrace& trace,
                             const std::vector<std::vector<std::vector<int>>>& references) {
  const std::size_t heads = trace.ctc_log_probs.size();
  const std::size_t batch = trace.layout.size();
  if (references.size() != batch) throw std::invalid_argument("compute_losses: one reference set per sequence");
  for (const auto& r : references) {
    if (r.size() != heads) {
      throw std::invalid_argument("compute_losses: expected " + std::to_string(heads) + " references per sequence");
    }
  }
  LossBreakdown out;
  out.per_sequence.assign(batch, std::vector<double>(heads, 0.0));
  out.per_layer.assign(heads, 0.0);
  out.sequence_totals.assign(batch, 0.0);

  std::vector<Var> head_losses;
  for (std::size_t k = 0; k < heads; ++k) {
    std::vector<std::vector<int>> targets;
    for (std::size_t i = 0; i < batch; ++i) targets.push_back(references[i][k]);
    try {
      head_losses.push_back(ctc_loss_packed(trace.ctc_log_probs[k], trace.layout, targets, model.vocab().blank()));
    } catch (const InfeasibleTarget& e) {
      throw std::runtime_error("CTC layer " + std::to_string(trace.ctc_layers[k]) + ": " + e.what());
    }
    const Tensor& v = head_losses.back().value();
    for (std::size_t i = 0; i < batch; ++i) {
      out.per_sequence[i][k] = v[i];
      out.per_layer[k] += v[i] / static_cast<double>(batch);
    }
  }
  Var sum = head_losses.front();
  for (std::size_t k = 1; k < heads; ++k) sum = add(sum, head_losses[k]);
  const Var per_seq = scale(sum, 1.0 / static_cast<double>(heads));
  for (std::size_t i = 0; i < batch; ++i) out.sequence_totals[i] = per_seq.value()[i];
  out.total = mean_all(per_seq);
  return out;
}

}  // namespace octc
