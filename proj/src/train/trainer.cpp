#include "octc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace octc {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (total_steps == 0) throw std::invalid_argument("total_steps must be positive");
  if (warmup_steps >= total_steps) throw std::invalid_argument("warmup_steps must be below total_steps");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("peak_lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (!(concat_probability >= 0.0 && concat_probability <= 1.0))
    throw std::invalid_argument("concat_probability must lie in [0, 1]");
  if (max_concat == 0) throw std::invalid_argument("max_concat must be positive");
  if (divergence_window == 0) throw std::invalid_argument("divergence_window must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"concat_probability", concat_probability},
          {"max_concat", max_concat},
          {"total_steps", total_steps},
          {"warmup_steps", warmup_steps},
          {"peak_lr", peak_lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"clip_norm", clip_norm},
          {"seed", seed},
          {"checkpoint_interval", checkpoint_interval},
          {"stop_after", stop_after},
          {"divergence_factor", divergence_factor},
          {"divergence_window", divergence_window},
          {"train_corpus", train_corpus},
          {"dev_corpus", dev_corpus},
          {"checkpoint_dir", checkpoint_dir},
          {"log_path", log_path}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw std::invalid_argument("unknown train config field '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("concat_probability", c.concat_probability);
  get("max_concat", c.max_concat);
  get("total_steps", c.total_steps);
  get("warmup_steps", c.warmup_steps);
  get("peak_lr", c.peak_lr);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("eps", c.eps);
  get("clip_norm", c.clip_norm);
  get("seed", c.seed);
  get("checkpoint_interval", c.checkpoint_interval);
  get("stop_after", c.stop_after);
  get("divergence_factor", c.divergence_factor);
  get("divergence_window", c.divergence_window);
  get("train_corpus", c.train_corpus);
  get("dev_corpus", c.dev_corpus);
  get("checkpoint_dir", c.checkpoint_dir);
  get("log_path", c.log_path);
  c.validate();
  return c;
}

nlohmann::json StepReport::to_json(bool with_time) const {
  nlohmann::json j = {{"step", step}, {"lr", lr}, {"total_loss", total_loss}, {"per_layer_losses", per_layer_losses}};
  if (with_time) j["wall_ms"] = wall_ms;
  return j;
}

TrainingExample sample_example(const SpeechModel& model, const UtteranceRecord& utt, std::mt19937_64& rng,
                               std::optional<int> task_token) {
  const Vocabulary& vocab = model.vocab();
  int task = 0;
  if (task_token) {
    task = *task_token;
  } else {
    const std::vector<int> tasks = available_tasks(vocab, utt);
    std::uniform_int_distribution<std::size_t> pick(0, tasks.size() - 1);
    task = tasks[pick(rng)];
  }
  Conditioning cond = sample_conditioning(vocab, utt, rng);
  TrainingExample ex;
  ex.input.features = &utt.features;
  ex.input.valid_frames = utt.frames();
  ex.input.lang_token = cond.lang_token;
  ex.input.task_token = task;
  ex.input.prompt = std::move(cond.prompt);
  ex.references = model.references(utt, task);
  return ex;
}

Trainer::Trainer(SpeechModel model, TrainConfig config) : model_(std::move(model)), config_(std::move(config)) {
  config_.validate();
  state_.rng.seed(config_.seed ^ 0x7a11ba7c4ULL);
}

Trainer::Trainer(SpeechModel model, TrainConfig config, TrainState state)
    : model_(std::move(model)), config_(std::move(config)), state_(std::move(state)) {
  config_.validate();
  for (const auto& [name, p] : model_.params()) {
    for (const ParameterSet* moments : {&state_.adam.m, &state_.adam.v}) {
      auto it = moments->find(name);
      if (it != moments->end() && it->second.shape() != p.shape()) {
        throw ShapeError("optimizer moment shape mismatch for " + name);
      }
    }
  }
}

bool Trainer::finished() const {
  if (state_.diverged) return true;
  const std::size_t limit =
      config_.stop_after == 0 ? config_.total_steps : std::min(config_.stop_after, config_.total_steps);
  return state_.step() >= limit;
}

void Trainer::update_divergence(double loss) {
  if (!std::isfinite(loss)) {
    state_.diverged = true;
    state_.diverged_reason = "non-finite loss at step " + std::to_string(state_.step() + 1);
    return;
  }
  if (!state_.has_initial_loss) {
    state_.initial_loss = loss;
    state_.has_initial_loss = true;
  }
  if (loss > config_.divergence_factor * state_.initial_loss) {
    if (++state_.over_count >= config_.divergence_window) {
      state_.diverged = true;
      state_.diverged_reason = "loss above " + std::to_string(config_.divergence_factor) + "x initial for " +
                               std::to_string(config_.divergence_window) + " steps";
    }
  } else {
    state_.over_count = 0;
  }
}

StepReport Trainer::step(const Corpus& corpus) {
  if (corpus.records.empty()) throw std::invalid_argument("training corpus is empty");
  if (!(corpus.vocab == model_.vocab())) throw std::invalid_argument("corpus vocabulary differs from the model's");
  if (finished()) throw std::logic_error("training already finished");
  const auto t0 = std::chrono::steady_clock::now();

  std::uniform_int_distribution<std::size_t> pick(0, corpus.records.size() - 1);
  const bool joins = config_.max_concat > 1 && config_.concat_probability > 0.0;
  std::vector<std::vector<const UtteranceRecord*>> by_language;
  if (joins) {
    by_language.resize(static_cast<std::size_t>(corpus.spec.num_languages));
    for (const auto& r : corpus.records) by_language.at(static_cast<std::size_t>(r.language)).push_back(&r);
  }
  std::vector<UtteranceRecord> joined;
  joined.reserve(config_.batch_size);
  std::vector<TrainingExample> examples;
  examples.reserve(config_.batch_size);
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    const UtteranceRecord& utt = corpus.records[pick(state_.rng)];
    if (!joins || std::uniform_real_distribution<double>(0.0, 1.0)(state_.rng) >= config_.concat_probability) {
      examples.push_back(sample_example(model_, utt, state_.rng));
      continue;
    }
    const std::size_t count = std::uniform_int_distribution<std::size_t>(2, config_.max_concat)(state_.rng);
    const auto& pool = by_language[static_cast<std::size_t>(utt.language)];
    std::uniform_int_distribution<std::size_t> pick_same(0, pool.size() - 1);
    std::vector<const UtteranceRecord*> parts{&utt};
    while (parts.size() < count) parts.push_back(pool[pick_same(state_.rng)]);
    joined.push_back(concatenate_utterances(parts));
    examples.push_back(sample_example(model_, joined.back(), state_.rng, model_.vocab().asr()));
  }
  std::vector<EncoderInput> inputs;
  std::vector<std::vector<std::vector<int>>> refs;
  for (auto& ex : examples) {
    inputs.push_back(ex.input);
    refs.push_back(ex.references);
  }

  StepReport report;
  report.step = state_.step() + 1;
  report.lr = lr_at_step(report.step, config_.warmup_steps, config_.total_steps, config_.peak_lr);

  Tape tape(model_.params());
  const ForwardTrace trace = encode_speech(tape, model_, inputs);
  const LossBreakdown losses = compute_losses(model_, trace, refs);
  report.total_loss = losses.total.value().item();
  report.per_layer_losses = losses.per_layer;

  update_divergence(report.total_loss);
  if (!state_.diverged) {
    Gradients grads = tape.backward(losses.total);
    report.grad_norm = clip_global_norm(grads, config_.clip_norm);
    if (!std::isfinite(report.grad_norm)) {
      state_.diverged = true;
      state_.diverged_reason = "non-finite gradient at step " + std::to_string(report.step);
    } else {
      adam_step(model_.params(), grads, state_.adam, report.lr, {config_.beta1, config_.beta2, config_.eps});
    }
  }
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace {

constexpr const char* kMomentM = "adam.m/";
constexpr const char* kMomentV = "adam.v/";

void check_schedule_agrees(const TrainConfig& a, const TrainConfig& b) {
  if (a.batch_size != b.batch_size || a.total_steps != b.total_steps || a.warmup_steps != b.warmup_steps ||
      a.peak_lr != b.peak_lr || a.beta1 != b.beta1 || a.beta2 != b.beta2 || a.eps != b.eps ||
      a.clip_norm != b.clip_norm || a.seed != b.seed) {
    throw std::invalid_argument("training config does not match the checkpoint's schedule");
  }
}

}  // namespace

CheckpointData make_checkpoint(const Trainer& trainer) {
  CheckpointData data;
  data.config = trainer.model().config();
  data.vocab = trainer.model().vocab();
  const TrainState& st = trainer.state();
  std::ostringstream rng;
  rng << st.rng;
  data.header_extra["train"] = {{"step", st.step()},
                                {"rng", rng.str()},
                                {"initial_loss", st.initial_loss},
                                {"has_initial_loss", st.has_initial_loss},
                                {"over_count", st.over_count},
                                {"diverged", st.diverged},
                                {"diverged_reason", st.diverged_reason},
                                {"config", trainer.config().to_json()}};
  data.tensors = trainer.model().params();
  for (const auto& [name, t] : st.adam.m) data.tensors.emplace(kMomentM + name, t);
  for (const auto& [name, t] : st.adam.v) data.tensors.emplace(kMomentV + name, t);
  return data;
}

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer) {
  write_checkpoint(path, make_checkpoint(trainer));
}

Trainer trainer_from_checkpoint(const CheckpointData& data, const TrainConfig* config) {
  if (!data.header_extra.contains("train")) throw CheckpointFormatError("checkpoint has no training state");
  const auto& h = data.header_extra.at("train");
  SpeechModel model = model_from_checkpoint(data);
  TrainConfig stored;
  TrainState st;
  try {
    stored = TrainConfig::from_json(h.at("config"));
    st.adam.step = h.at("step").get<std::size_t>();
    std::istringstream rng(h.at("rng").get<std::string>());
    rng >> st.rng;
    if (!rng) throw CheckpointFormatError("bad rng state");
    st.initial_loss = h.at("initial_loss").get<double>();
    st.has_initial_loss = h.at("has_initial_loss").get<bool>();
    st.over_count = h.at("over_count").get<std::size_t>();
    st.diverged = h.at("diverged").get<bool>();
    st.diverged_reason = h.at("diverged_reason").get<std::string>();
  } catch (const CheckpointFormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointFormatError(std::string("bad training state: ") + e.what());
  }
  const std::string m(kMomentM), v(kMomentV);
  for (const auto& [name, t] : data.tensors) {
    if (name.rfind(m, 0) == 0) st.adam.m.emplace(name.substr(m.size()), t);
    if (name.rfind(v, 0) == 0) st.adam.v.emplace(name.substr(v.size()), t);
  }
  if (config != nullptr) {
    check_schedule_agrees(stored, *config);
    stored = *config;
  }
  return Trainer(std::move(model), std::move(stored), std::move(st));
}

Trainer load_checkpoint(const std::filesystem::path& path, const TrainConfig* config) {
  return trainer_from_checkpoint(read_checkpoint(path), config);
}

TrainResult train_loop(Trainer& trainer, const Corpus& corpus, std::ostream* log,
                       const std::function<void(const StepReport&)>& on_step) {
  TrainResult result;
  const TrainConfig& cfg = trainer.config();
  const std::filesystem::path dir = cfg.checkpoint_dir;
  while (!trainer.finished()) {
    const StepReport r = trainer.step(corpus);
    ++result.steps_run;
    result.last_loss = r.total_loss;
    if (log != nullptr) *log << r.to_json().dump() << '\n';
    if (on_step) on_step(r);
    if (!dir.empty() && cfg.checkpoint_interval > 0 && r.step % cfg.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu.ockp", r.step);
      save_checkpoint(dir / name, trainer);
      result.checkpoints.push_back(dir / name);
    }
  }
  if (log != nullptr) log->flush();
  result.diverged = trainer.state().diverged;
  result.reason = trainer.state().diverged_reason;
  if (!dir.empty()) {
    save_checkpoint(dir / "last.ockp", trainer);
    result.checkpoints.push_back(dir / "last.ockp");
  }
  return result;
}

std::vector<double> heldout_losses(const SpeechModel& model, const Corpus& corpus, TokenKind task,
                                   std::size_t batch_size) {
  if (task != TokenKind::Asr && task != TokenKind::Translate) {
    throw std::invalid_argument("heldout_losses: task must be ASR or translation");
  }
  const Vocabulary& vocab = model.vocab();
  struct Item {
    const UtteranceRecord* utt;
    int task;
  };
  std::vector<Item> items;
  for (const auto& utt : corpus.records) {
    if (task == TokenKind::Asr) {
      items.push_back({&utt, vocab.asr()});
    } else {
      for (const auto& [target, _] : utt.translations) items.push_back({&utt, vocab.st_token(target)});
    }
  }
  std::vector<double> sums(model.config().num_ctc_layers(), 0.0);
  if (items.empty()) return sums;
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::size_t end = std::min(items.size(), start + batch_size);
    std::vector<EncoderInput> inputs;
    std::vector<std::vector<std::vector<int>>> refs;
    for (std::size_t i = start; i < end; ++i) {
      const UtteranceRecord& u = *items[i].utt;
      inputs.push_back({&u.features, u.frames(), vocab.lang_token(u.language), items[i].task, {vocab.na()}});
      refs.push_back(model.references(u, items[i].task));
    }
    Tape tape(model.params());
    const ForwardTrace trace = encode_speech(tape, model, inputs);
    const LossBreakdown losses = compute_losses(model, trace, refs);
    for (const auto& row : losses.per_sequence)
      for (std::size_t k = 0; k < row.size(); ++k) sums[k] += row[k];
  }
  for (double& s : sums) s /= static_cast<double>(items.size());
  return sums;
}

}  // namespace octc
