#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "octc/ops.hpp"

namespace octc {

/// Raised when a target needs more frames than are available.
class InfeasibleTarget : public std::runtime_error {
 public:
  InfeasibleTarget(std::size_t needed, std::size_t available);
  std::size_t needed;
  std::size_t available;
};

/// Frames needed to emit `target`: its length plus one separating blank for
/// every pair of equal adjacent tokens.
std::size_t ctc_min_frames(std::span<const int> target);

/// -log P_CTC(target | log_probs[0, valid_len)). When `grad` is non-null it
/// receives d(loss)/d(log_probs) with the shape of `log_probs` (zero past
/// valid_len). Log-probabilities are treated as free inputs.
double ctc_loss_value(const Tensor& log_probs, std::span<const int> target, std::size_t valid_len,
                      int blank, Tensor* grad = nullptr);

/// Differentiable CTC loss (scalar) on a T x V log-probability grid.
Var ctc_loss(const Var& log_probs, std::span<const int> target, std::size_t valid_len, int blank);

/// One loss per segment of a packed grid, returned as a [B] vector. Each
/// segment uses its own `valid` rows.
Var ctc_loss_packed(const Var& log_probs, const Layout& layout,
                    const std::vector<std::vector<int>>& targets, int blank);

/// Brute-force P(target | probs) summing over every frame path. Bounded to
/// T <= 8, V <= 5.
double ctc_oracle(const Tensor& probs, std::span<const int> target, int blank);

/// Merge repeats, then drop blanks.
std::vector<int> ctc_collapse(std::span<const int> path, int blank);

struct GreedyResult {
  std::vector<int> tokens;
  std::vector<int> frame_path;
  /// Frame at which each entry of `tokens` starts.
  std::vector<std::size_t> emission_frames;
};

/// Per-frame argmax (ties go to the lowest id) then collapse.
GreedyResult greedy_decode(const Tensor& log_probs, std::size_t valid_len, int blank);

struct Alignment {
  std::vector<int> frame_path;
  double log_prob = 0.0;
};

/// Best single path through the blank-interleaved lattice that collapses to `target`.
Alignment forced_align(const Tensor& log_probs, std::span<const int> target, std::size_t valid_len,
                       int blank);

}  // namespace octc
