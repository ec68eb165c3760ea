#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "octc/ctc.hpp"
#include "support.hpp"

using namespace octc;
using octc::testing::all_targets;
using octc::testing::random_log_probs;

namespace {

Tensor exp_of(const Tensor& lp) {
  Tensor p = lp;
  for (double& v : p.values()) v = std::exp(v);
  return p;
}

Tensor one_hot_path(const std::vector<int>& path, std::size_t V) {
  Tensor lp({path.size(), V}, -1e4);
  for (std::size_t t = 0; t < path.size(); ++t) lp.at(t, static_cast<std::size_t>(path[t])) = 0.0;
  return lp;
}

}  // namespace

TEST_CASE("two-frame uniform example") {
  const Tensor lp({2, 2}, std::log(0.5));
  const std::vector<int> a{1};
  CHECK(ctc_loss_value(lp, a, 2, 0) == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(ctc_loss_value(lp, a, 2, 0) == doctest::Approx(0.287682).epsilon(1e-6));
}

TEST_CASE("single-path case") {
  const std::vector<int> path{0, 1, 1, 0, 2};
  Tensor lp({5, 3});
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t v = 0; v < 3; ++v) lp.at(t, v) = std::log(v == static_cast<std::size_t>(path[t]) ? 1.0 - 2e-12 : 1e-12);
  }
  const std::vector<int> target{1, 2};
  double nll = 0;
  for (std::size_t t = 0; t < 5; ++t) nll -= lp.at(t, static_cast<std::size_t>(path[t]));
  CHECK(std::abs(ctc_loss_value(lp, target, 5, 0) - nll) < 1e-9);
}

TEST_CASE("infeasible targets raise") {
  const Tensor lp({2, 2}, std::log(0.5));
  const std::vector<int> aa{1, 1};
  CHECK(ctc_min_frames(aa) == 3);
  CHECK_THROWS_AS(ctc_loss_value(lp, aa, 2, 0), InfeasibleTarget);
  CHECK_THROWS_AS(forced_align(lp, aa, 2, 0), InfeasibleTarget);
  const std::vector<int> with_blank{0};
  CHECK_THROWS(ctc_loss_value(lp, with_blank, 2, 0));
}

TEST_CASE("loss matches the enumeration oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t T = 1 + trial % 5;
    const Tensor lp = random_log_probs(T, 3, rng);
    const Tensor p = exp_of(lp);
    for (const auto& target : all_targets(3, 3)) {
      const double oracle = ctc_oracle(p, target, 0);
      if (ctc_min_frames(target) > T) {
        CHECK(oracle == 0.0);
        continue;
      }
      CHECK(std::abs(std::exp(-ctc_loss_value(lp, target, T, 0)) - oracle) <= 1e-9);
    }
  }
}

TEST_CASE("oracle sums to one over all output strings") {
  std::mt19937_64 rng(12);
  for (std::size_t T = 1; T <= 4; ++T) {
    const Tensor p = exp_of(random_log_probs(T, 3, rng));
    double s = 0;
    for (const auto& target : all_targets(3, T)) s += ctc_oracle(p, target, 0);
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
  const Tensor p = exp_of(random_log_probs(3, 2, rng));
  CHECK(ctc_oracle(p, std::vector<int>{}, 0) == doctest::Approx(p.at(0, 0) * p.at(1, 0) * p.at(2, 0)));
  CHECK_THROWS(ctc_oracle(Tensor({9, 2}, 0.5), std::vector<int>{}, 0));
}

TEST_CASE("shift invariance before softmax") {
  std::mt19937_64 rng(13);
  Tensor logits = octc::testing::random_tensor({6, 4}, rng);
  const std::vector<int> target{1, 3, 3};
  const double a = ctc_loss_value(log_softmax_lastdim(logits), target, 6, 0);
  for (std::size_t v = 0; v < 4; ++v) logits.at(2, v) += 17.25;
  const double b = ctc_loss_value(log_softmax_lastdim(logits), target, 6, 0);
  CHECK(std::abs(a - b) <= 1e-10);
}

TEST_CASE("loss gradient matches finite differences") {
  std::mt19937_64 rng(14);
  const Tensor lp = random_log_probs(7, 4, rng);
  const std::vector<int> target{2, 2, 3};
  Tensor g;
  const double base = ctc_loss_value(lp, target, 6, 0, &g);
  CHECK(std::isfinite(base));
  const double eps = 1e-6;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    Tensor hi = lp, lo = lp;
    hi[i] += eps;
    lo[i] -= eps;
    const double num = (ctc_loss_value(hi, target, 6, 0) - ctc_loss_value(lo, target, 6, 0)) / (2 * eps);
    CHECK(std::abs(g[i] - num) <= 1e-6 * std::max(1.0, std::abs(num)));
  }
  // frames past valid_len receive no gradient
  for (std::size_t v = 0; v < 4; ++v) CHECK(g.at(6, v) == 0.0);
}

TEST_CASE("packed loss equals per-sequence loss and ignores padding") {
  std::mt19937_64 rng(15);
  const Tensor a = random_log_probs(6, 4, rng), b = random_log_probs(5, 4, rng);
  const std::vector<std::vector<int>> targets{{1, 2}, {3}};
  const std::vector<std::size_t> len{6, 5}, valid{6, 3};
  const Layout lay = make_layout(len, valid);
  Tensor packed({11, 4});
  std::copy(a.data(), a.data() + a.size(), packed.data());
  std::copy(b.data(), b.data() + b.size(), packed.data() + a.size());
  Tape tape;
  const Tensor out = ctc_loss_packed(tape.constant(packed), lay, targets, 0).value();
  CHECK(out[0] == ctc_loss_value(a, targets[0], 6, 0));
  CHECK(out[1] == ctc_loss_value(b, targets[1], 3, 0));
  Tensor b2 = b;
  for (std::size_t t = 3; t < 5; ++t)
    for (std::size_t v = 0; v < 4; ++v) b2.at(t, v) = -0.1 * static_cast<double>(v + t);
  CHECK(ctc_loss_value(b2, targets[1], 3, 0) == out[1]);
}

TEST_CASE("greedy decoding") {
  CHECK(greedy_decode(one_hot_path({1, 1, 0, 1}, 3), 4, 0).tokens == std::vector<int>{1, 1});
  CHECK(greedy_decode(one_hot_path({0, 0, 0}, 3), 3, 0).tokens.empty());
  const GreedyResult g = greedy_decode(one_hot_path({0, 2, 2, 0, 1, 0}, 3), 6, 0);
  CHECK(g.tokens == std::vector<int>{2, 1});
  CHECK(g.emission_frames == std::vector<std::size_t>{1, 4});
  // ties go to the lowest id
  CHECK(greedy_decode(Tensor({2, 3}, 0.0), 2, 0).frame_path == std::vector<int>{0, 0});
  const Tensor tie = Tensor::from_rows({{-5, -1, -1}});
  CHECK(greedy_decode(tie, 1, 0).tokens == std::vector<int>{1});
  // frames past valid_len are not decoded
  CHECK(greedy_decode(one_hot_path({1, 0, 2}, 3), 2, 0).tokens == std::vector<int>{1});
}

TEST_CASE("decoded tokens are a fixed point of blank-interleaved re-decoding") {
  std::mt19937_64 rng(16);
  std::uniform_int_distribution<int> tok(0, 3);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> p(10);
    for (int& v : p) v = tok(rng);
    const auto once = ctc_collapse(p, 0);
    std::vector<int> spaced;
    for (int t : once) {
      spaced.push_back(t);
      spaced.push_back(0);
    }
    CHECK(ctc_collapse(spaced, 0) == once);
    CHECK(std::find(once.begin(), once.end(), 0) == once.end());
  }
  // repeats separated by a blank survive, so collapsing twice is not a no-op
  CHECK(ctc_collapse(std::vector<int>{1, 0, 1}, 0) == std::vector<int>{1, 1});
}

TEST_CASE("forced alignment") {
  const Tensor lp = log_softmax_lastdim(Tensor::from_rows({{2.0, 0.0}, {0.0, 2.0}}));
  CHECK(forced_align(lp, std::vector<int>{1}, 2, 0).frame_path == std::vector<int>{0, 1});

  // T = 2L + 1 with min_frames = T: only [a, blank, a, blank, a] survives
  std::mt19937_64 rng(17);
  const Tensor lp2 = random_log_probs(5, 3, rng);
  CHECK(forced_align(lp2, std::vector<int>{1, 1, 1}, 5, 0).frame_path == std::vector<int>{1, 0, 1, 0, 1});

  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 2 + trial % 4;
    const Tensor l = random_log_probs(T, 3, rng);
    for (const auto& target : all_targets(3, 2)) {
      if (ctc_min_frames(target) > T) continue;
      const Alignment a = forced_align(l, target, T, 0);
      CHECK(ctc_collapse(a.frame_path, 0) == target);
      CHECK(std::exp(a.log_prob) <= std::exp(-ctc_loss_value(l, target, T, 0)) + 1e-12);
      // brute-force best path
      double best = -INFINITY;
      std::vector<int> path(T, 0);
      while (true) {
        if (ctc_collapse(path, 0) == target) {
          double s = 0;
          for (std::size_t t = 0; t < T; ++t) s += l.at(t, static_cast<std::size_t>(path[t]));
          best = std::max(best, s);
        }
        std::size_t t = 0;
        while (t < T && ++path[t] == 3) path[t++] = 0;
        if (t == T) break;
      }
      CHECK(a.log_prob == doctest::Approx(best).epsilon(1e-12));
    }
  }
}
