#include <cmath>

#include "doctest.h"
#include "support.hpp"

using namespace octc;
using octc::testing::check_graph;
using octc::testing::contract;
using octc::testing::random_tensor;

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK(Tensor::scalar(4).item() == 4);
  const Tensor r = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  CHECK(r.slice_rows(1, 2) == Tensor::from_rows({{3, 4}, {5, 6}}));
}

TEST_CASE("gemm variants agree with the naive product") {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  Tensor c({4, 3});
  kernel::gemm_nn(4, 5, 3, a.data(), b.data(), c.data());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("matmul rows do not depend on the other rows") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({7, 16}, rng), w = random_tensor({16, 9}, rng);
  Tape tape;
  const Tensor full = matmul(tape.constant(x), tape.constant(w)).value();
  for (std::size_t r = 0; r < 7; ++r) {
    const Tensor one = matmul(tape.constant(x.slice_rows(r, 1)), tape.constant(w)).value();
    for (std::size_t j = 0; j < 9; ++j) CHECK(one.at(0, j) == full.at(r, j));
  }
}

TEST_CASE("softmax helpers") {
  const Tensor x = Tensor::from_rows({{1, 2, 3}, {-1000, 0, 1000}});
  const Tensor lse = logsumexp_lastdim(x);
  CHECK(lse[0] == doctest::Approx(std::log(std::exp(1) + std::exp(2) + std::exp(3))));
  CHECK(lse[1] == doctest::Approx(1000.0));
  const Tensor sm = softmax_lastdim(x);
  CHECK(sm.at(0, 0) + sm.at(0, 1) + sm.at(0, 2) == doctest::Approx(1.0));
  CHECK(std::isfinite(log_softmax_lastdim(x).at(1, 0)));
  CHECK_THROWS(logsumexp_lastdim(Tensor({2, 0})));
}

TEST_CASE("elementwise and linear gradients") {
  std::mt19937_64 rng(3);
  ParameterSet p{{"a", random_tensor({3, 4}, rng)},
                 {"b", random_tensor({3, 4}, rng)},
                 {"w", random_tensor({4, 5}, rng)},
                 {"bias", random_tensor({5}, rng)}};
  auto r = check_graph(p, [](Tape& t) {
    Var a = t.param("a"), b = t.param("b");
    Var y = add(mul(a, b), scale(sub(a, b), 0.7));
    y = linear(silu(y), t.param("w"), t.param("bias"));
    return contract(t, exp(scale(y, 0.3)));
  });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax-family gradients") {
  std::mt19937_64 rng(4);
  ParameterSet p{{"x", random_tensor({3, 6}, rng)}};
  CHECK(check_graph(p, [](Tape& t) { return contract(t, softmax_lastdim(t.param("x"))); }).max_rel_error < 1e-6);
  CHECK(check_graph(p, [](Tape& t) { return contract(t, log_softmax_lastdim(t.param("x"))); }).max_rel_error < 1e-6);
  CHECK(check_graph(p, [](Tape& t) { return contract(t, logsumexp_lastdim(t.param("x"))); }).max_rel_error < 1e-6);
}

TEST_CASE("layer norm gradient") {
  std::mt19937_64 rng(5);
  ParameterSet p{{"x", random_tensor({4, 8}, rng)}, {"g", random_tensor({8}, rng)}, {"b", random_tensor({8}, rng)}};
  auto r = check_graph(p, [](Tape& t) { return contract(t, layer_norm(t.param("x"), t.param("g"), t.param("b"))); });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("structural op gradients") {
  std::mt19937_64 rng(6);
  ParameterSet p{{"x", random_tensor({5, 4}, rng)}, {"y", random_tensor({5, 3}, rng)}, {"e", random_tensor({6, 4}, rng)}};
  auto r = check_graph(p, [](Tape& t) {
    Var c = concat_cols(t.param("x"), t.param("y"));
    Var s = slice_cols(c, 2, 4);
    const std::vector<int> ids{5, 0, 0, 3};
    Var g = gather_rows(t.param("e"), ids);
    std::vector<Var> parts{slice_rows(s, 1, 3), g};
    return contract(t, concat_rows(parts));
  });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("stride-2 stacking reads only valid frames") {
  const std::vector<std::size_t> len{5, 4}, valid{3, 4};
  const Layout lay = make_layout(len, valid);
  Tensor x({9, 1});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i + 1);
  Tape tape;
  const Tensor y = stack_stride2(tape.constant(x), lay).value();
  const Layout half = halve_layout(lay);
  CHECK(half[0].length == 3);
  CHECK(half[0].valid == 2);
  CHECK(half[1].offset == 3);
  CHECK(y.rows() == 5);
  // segment 0 row 0: [x(-1), x(0), x(1)] = [0, 1, 2]; row 1: [x1, x2, x3->pad]
  CHECK(y.at(0, 0) == 0);
  CHECK(y.at(0, 1) == 1);
  CHECK(y.at(0, 2) == 2);
  CHECK(y.at(1, 0) == 2);
  CHECK(y.at(1, 1) == 3);
  CHECK(y.at(1, 2) == 0);
  // padded output row is all zero
  CHECK(y.at(2, 0) == 0);
  CHECK(y.at(2, 1) == 0);
  // segment 1 row 1: [x(1), x(2), x(3)] = rows 6, 7, 8 -> 7, 8, 9
  CHECK(y.at(4, 0) == 7);
  CHECK(y.at(4, 2) == 9);
}

TEST_CASE("conv, stacking and masking gradients") {
  std::mt19937_64 rng(7);
  const std::vector<std::size_t> len{6, 5}, valid{6, 3};
  const Layout lay = make_layout(len, valid);
  ParameterSet p{{"x", random_tensor({11, 3}, rng)}, {"w", random_tensor({5, 3}, rng)}, {"b", random_tensor({3}, rng)}};
  auto r = check_graph(p, [&](Tape& t) {
    Var c = depthwise_conv1d(t.param("x"), t.param("w"), t.param("b"), lay);
    Var s = stack_stride2(mask_rows(c, lay), lay);
    return contract(t, s);
  });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("attention gradient and key masking") {
  std::mt19937_64 rng(8);
  const std::vector<std::size_t> ql{4, 3}, qv{4, 2}, kl{5, 3}, kv{3, 3};
  const Layout qlay = make_layout(ql, qv), klay = make_layout(kl, kv);
  ParameterSet p{{"q", random_tensor({7, 8}, rng)}, {"k", random_tensor({8, 8}, rng)}, {"v", random_tensor({8, 8}, rng)}};
  auto build = [&](Tape& t) { return contract(t, attention(t.param("q"), t.param("k"), t.param("v"), 2, qlay, klay)); };
  CHECK(check_graph(p, build).max_rel_error < 1e-6);

  Tape t1(p);
  const Tensor out1 = attention(t1.param("q"), t1.param("k"), t1.param("v"), 2, qlay, klay).value();
  CHECK(t1.attention_cells == 2 * (4 * 3 + 3 * 3));
  ParameterSet p2 = p;
  for (std::size_t r = 3; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      p2.at("k").at(r, c) = 1e3;
      p2.at("v").at(r, c) = -7;
    }
  Tape t2(p2);
  const Tensor out2 = attention(t2.param("q"), t2.param("k"), t2.param("v"), 2, qlay, klay).value();
  CHECK(out1 == out2);
}

TEST_CASE("tape backward bookkeeping") {
  ParameterSet p{{"used", Tensor({2}, 1.0)}, {"unused", Tensor({3}, 2.0)}};
  Tape tape(p);
  Var loss = sum_all(mul(tape.param("used"), tape.param("used")));
  Gradients g = tape.backward(loss);
  CHECK(g.at("used")[0] == 2.0);
  CHECK(g.at("unused") == Tensor({3}, 0.0));
  CHECK_THROWS(tape.backward(loss));
  Tape t2(p);
  CHECK_THROWS(t2.backward(t2.param("used")));
}

TEST_CASE("inference tapes keep no gradients") {
  ParameterSet p{{"w", Tensor({2, 2}, 1.0)}};
  Tape tape(p, false);
  Var y = matmul(tape.param("w"), tape.param("w"));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.value().at(0, 0) == 2.0);
}

TEST_CASE("sinusoidal positions") {
  const Tensor pe = sinusoidal_positions(3, 4);
  CHECK(pe.at(0, 0) == 0.0);
  CHECK(pe.at(0, 1) == 1.0);
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)));
}

TEST_CASE("five-point stencil") {
  const ParameterSet p{{"x", Tensor({2}, std::vector<double>{0.3, -1.2})}};
  auto f = [](const ParameterSet& q) { return std::sin(q.at("x")[0]) * std::exp(q.at("x")[1]); };
  const Gradients g{{"x", Tensor({2}, std::vector<double>{std::cos(0.3) * std::exp(-1.2), std::sin(0.3) * std::exp(-1.2)})}};
  GradCheckOptions opt;
  opt.eps = 1e-2;
  const double central = finite_difference_check(f, p, g, opt).max_rel_error;
  opt.stencil = FiniteDifference::FivePoint;
  const double five = finite_difference_check(f, p, g, opt).max_rel_error;
  CHECK(five < 1e-7);
  CHECK(five < central / 100);
}
