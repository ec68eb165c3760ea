#include "octc/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace octc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void check_target(std::span<const int> target, std::size_t vocab, int blank) {
  for (int tok : target) {
    if (tok == blank) throw std::invalid_argument("CTC target contains the blank id");
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw std::out_of_range("CTC target token " + std::to_string(tok) + " outside vocabulary");
    }
  }
}

std::vector<int> expand(std::span<const int> target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

// Whether state s may be entered directly from s - 2.
bool can_skip(const std::vector<int>& ext, std::size_t s, int blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

// Loss and optional gradient on a contiguous T x V block.
double ctc_rows(const double* lp, std::size_t vocab, std::size_t frames, std::span<const int> target,
                int blank, double* grad) {
  if (frames == 0) throw InfeasibleTarget(std::max<std::size_t>(1, ctc_min_frames(target)), 0);
  check_target(target, vocab, blank);
  const std::size_t need = ctc_min_frames(target);
  if (need > frames) throw InfeasibleTarget(need, frames);

  const std::vector<int> ext = expand(target, blank);
  const std::size_t S = ext.size();
  const auto at = [&](std::size_t t, std::size_t s) { return lp[t * vocab + static_cast<std::size_t>(ext[s])]; };

  std::vector<double> alpha(frames * S, kNegInf);
  alpha[0] = at(0, 0);
  if (S > 1) alpha[1] = at(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    const double* prev = alpha.data() + (t - 1) * S;
    double* cur = alpha.data() + t * S;
    for (std::size_t s = 0; s < S; ++s) {
      double v = prev[s];
      if (s >= 1) v = log_add(v, prev[s - 1]);
      if (can_skip(ext, s, blank)) v = log_add(v, prev[s - 2]);
      cur[s] = v == kNegInf ? kNegInf : v + at(t, s);
    }
  }
  const double* last = alpha.data() + (frames - 1) * S;
  const double log_p = S > 1 ? log_add(last[S - 1], last[S - 2]) : last[S - 1];
  // Feasible targets only reach here; a non-finite value means the inputs
  // were non-finite or zero-probability, which the caller must see.
  if (!std::isfinite(log_p)) {
    if (grad != nullptr) std::fill(grad, grad + frames * vocab, std::numeric_limits<double>::quiet_NaN());
    return std::isnan(log_p) ? log_p : std::numeric_limits<double>::infinity();
  }

  if (grad != nullptr) {
    std::vector<double> beta(frames * S, kNegInf);
    double* bl = beta.data() + (frames - 1) * S;
    bl[S - 1] = at(frames - 1, S - 1);
    if (S > 1) bl[S - 2] = at(frames - 1, S - 2);
    for (std::size_t t = frames - 1; t-- > 0;) {
      const double* next = beta.data() + (t + 1) * S;
      double* cur = beta.data() + t * S;
      for (std::size_t s = 0; s < S; ++s) {
        double v = next[s];
        if (s + 1 < S) v = log_add(v, next[s + 1]);
        if (s + 2 < S && can_skip(ext, s + 2, blank)) v = log_add(v, next[s + 2]);
        cur[s] = v == kNegInf ? kNegInf : v + at(t, s);
      }
    }
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t s = 0; s < S; ++s) {
        const double a = alpha[t * S + s];
        const double b = beta[t * S + s];
        if (a == kNegInf || b == kNegInf) continue;
        const double occ = std::exp(a + b - at(t, s) - log_p);
        grad[t * vocab + static_cast<std::size_t>(ext[s])] -= occ;
      }
    }
  }
  return -log_p;
}

}  // namespace

InfeasibleTarget::InfeasibleTarget(std::size_t need, std::size_t avail)
    : std::runtime_error("infeasible CTC target: needs " + std::to_string(need) +
                         " frames, only " + std::to_string(avail) + " available"),
      needed(need),
      available(avail) {}

std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

double ctc_loss_value(const Tensor& log_probs, std::span<const int> target, std::size_t valid_len,
                      int blank, Tensor* grad) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss: log_probs must be T x V");
  if (valid_len > log_probs.rows()) throw ShapeError("ctc_loss: valid_len exceeds frames");
  if (grad != nullptr) *grad = Tensor(log_probs.shape(), 0.0);
  return ctc_rows(log_probs.data(), log_probs.cols(), valid_len, target, blank,
                  grad ? grad->data() : nullptr);
}

Var ctc_loss(const Var& log_probs, std::span<const int> target, std::size_t valid_len, int blank) {
  Tensor g;
  const double loss = ctc_loss_value(log_probs.value(), target, valid_len, blank, &g);
  const auto il = log_probs.id();
  return log_probs.tape().record(Tensor::scalar(loss), log_probs.requires_grad(),
                                 [il, g = std::move(g)](Tape& t, std::uint32_t self) {
                                   const double up = t.grad(self)[0];
                                   Tensor& gl = t.grad(il);
                                   for (std::size_t i = 0; i < g.size(); ++i) gl[i] += up * g[i];
                                 });
}

Var ctc_loss_packed(const Var& log_probs, const Layout& layout,
                    const std::vector<std::vector<int>>& targets, int blank) {
  const Tensor& lp = log_probs.value();
  if (lp.rank() != 2) throw ShapeError("ctc_loss_packed: log_probs must be 2-D");
  if (layout.size() != targets.size()) throw ShapeError("ctc_loss_packed: one target per segment");
  if (layout_rows(layout) != lp.rows()) throw ShapeError("ctc_loss_packed: layout mismatch");
  const std::size_t vocab = lp.cols();
  Tensor losses({layout.size()});
  Tensor g(lp.shape(), 0.0);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Segment& s = layout[i];
    losses[i] = ctc_rows(lp.data() + s.offset * vocab, vocab, s.valid, targets[i], blank,
                         g.data() + s.offset * vocab);
  }
  const auto il = log_probs.id();
  return log_probs.tape().record(
      std::move(losses), log_probs.requires_grad(),
      [il, g = std::move(g), layout, vocab](Tape& t, std::uint32_t self) {
        const Tensor& up = t.grad(self);
        Tensor& gl = t.grad(il);
        for (std::size_t i = 0; i < layout.size(); ++i) {
          const std::size_t begin = layout[i].offset * vocab;
          const std::size_t end = (layout[i].offset + layout[i].valid) * vocab;
          for (std::size_t j = begin; j < end; ++j) gl[j] += up[i] * g[j];
        }
      });
}

double ctc_oracle(const Tensor& probs, std::span<const int> target, int blank) {
  if (probs.rank() != 2) throw ShapeError("ctc_oracle: probs must be T x V");
  const std::size_t frames = probs.rows(), vocab = probs.cols();
  if (frames > 8 || vocab > 5) {
    throw std::invalid_argument("ctc_oracle: enumeration bound exceeded (T <= 8, V <= 5)");
  }
  check_target(target, vocab, blank);
  std::vector<int> path(frames, 0);
  double total = 0.0;
  while (true) {
    if (ctc_collapse(path, blank) == std::vector<int>(target.begin(), target.end())) {
      double p = 1.0;
      for (std::size_t t = 0; t < frames; ++t) p *= probs.at(t, static_cast<std::size_t>(path[t]));
      total += p;
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == static_cast<int>(vocab)) path[t++] = 0;
    if (t == frames) break;
  }
  return total;
}

std::vector<int> ctc_collapse(std::span<const int> path, int blank) {
  std::vector<int> out;
  for (std::size_t t = 0; t < path.size(); ++t) {
    if (t > 0 && path[t] == path[t - 1]) continue;
    if (path[t] != blank) out.push_back(path[t]);
  }
  return out;
}

GreedyResult greedy_decode(const Tensor& log_probs, std::size_t valid_len, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("greedy_decode: log_probs must be T x V");
  if (valid_len > log_probs.rows()) throw ShapeError("greedy_decode: valid_len exceeds frames");
  GreedyResult r;
  r.frame_path.resize(valid_len);
  for (std::size_t t = 0; t < valid_len; ++t) {
    auto row = log_probs.row(t);
    // max_element returns the first maximum, i.e. the lowest id on ties.
    r.frame_path[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (r.frame_path[t] != blank && (t == 0 || r.frame_path[t] != r.frame_path[t - 1])) {
      r.tokens.push_back(r.frame_path[t]);
      r.emission_frames.push_back(t);
    }
  }
  return r;
}

Alignment forced_align(const Tensor& log_probs, std::span<const int> target, std::size_t valid_len,
                       int blank) {
  if (log_probs.rank() != 2) throw ShapeError("forced_align: log_probs must be T x V");
  if (valid_len > log_probs.rows()) throw ShapeError("forced_align: valid_len exceeds frames");
  const std::size_t vocab = log_probs.cols();
  check_target(target, vocab, blank);
  const std::size_t need = ctc_min_frames(target);
  if (need > valid_len || valid_len == 0) throw InfeasibleTarget(std::max<std::size_t>(need, 1), valid_len);

  const std::vector<int> ext = expand(target, blank);
  const std::size_t S = ext.size();
  const std::size_t T = valid_len;
  std::vector<double> score(T * S, kNegInf);
  std::vector<unsigned char> back(T * S, 0);  // predecessor offset 0, 1 or 2
  const auto at = [&](std::size_t t, std::size_t s) {
    return log_probs.at(t, static_cast<std::size_t>(ext[s]));
  };
  score[0] = at(0, 0);
  if (S > 1) score[1] = at(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double best = score[(t - 1) * S + s];
      unsigned char from = 0;
      if (s >= 1 && score[(t - 1) * S + s - 1] > best) {
        best = score[(t - 1) * S + s - 1];
        from = 1;
      }
      if (can_skip(ext, s, blank) && score[(t - 1) * S + s - 2] > best) {
        best = score[(t - 1) * S + s - 2];
        from = 2;
      }
      if (best == kNegInf) continue;
      score[t * S + s] = best + at(t, s);
      back[t * S + s] = from;
    }
  }
  std::size_t s = S - 1;
  if (S > 1 && score[(T - 1) * S + S - 2] > score[(T - 1) * S + S - 1]) s = S - 2;
  Alignment a;
  a.log_prob = score[(T - 1) * S + s];
  a.frame_path.resize(T);
  for (std::size_t t = T; t-- > 0;) {
    a.frame_path[t] = ext[s];
    s -= back[t * S + s];
  }
  return a;
}

}  // namespace octc
