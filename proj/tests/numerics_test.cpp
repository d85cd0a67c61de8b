#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pmt/gradcheck.hpp"
#include "pmt/ops.hpp"
#include "pmt/rng.hpp"

#include <cmath>
#include <cstring>

using namespace pmt;

TEST_CASE("tensor shape and element access") {
  auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(-1) == 3);
  CHECK(t.at({1, 2}) == 6.0f);
  CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
  CHECK_THROWS_AS((Tensor<float>::from({2, 2}, {1, 2, 3})), std::invalid_argument);

  auto m = t.matrix(2, 3);
  CHECK(m(0, 1) == 2.0f);
  CHECK(m(1, 0) == 4.0f);
}

TEST_CASE("tensor handles share nodes; clone and detached do not") {
  auto a = Tensor<float>::full({3}, 2.0f);
  Tensor<float> b = a;
  b.data()[0] = 7.0f;
  CHECK(a.data()[0] == 7.0f);
  CHECK(a.same_node(b));

  auto c = a.clone();
  c.data()[0] = 1.0f;
  CHECK(a.data()[0] == 7.0f);
  CHECK_FALSE(a.same_node(c));

  a.set_requires_grad(true);
  auto d = a.detached();
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("frozen tensors never receive gradient writes") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  b.set_requires_grad(true);
  Tape<double> tape;
  auto y = sum_all(&tape, mul(&tape, a, b));
  tape.backward(y);
  CHECK_FALSE(a.has_grad());
  CHECK(b.grad()(0) == 1.0);
  CHECK_THROWS_AS(a.grad_ref(), std::logic_error);
}

TEST_CASE("tape is single use until cleared") {
  auto x = Tensor<double>::full({1}, 3.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  auto y = mul_scalar(&tape, x, 2.0);
  tape.backward(y);
  CHECK(x.grad()(0) == 2.0);
  auto y2 = mul_scalar(&tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y2), std::logic_error);
  tape.clear();
  x.zero_grad();
  auto y3 = mul_scalar(&tape, x, 5.0);
  tape.backward(y3);
  CHECK(x.grad()(0) == 5.0);
}

TEST_CASE("matmul identity and hand contraction") {
  Rng rng(1);
  auto m = randn<double>(rng, {3, 3});
  auto eye = Tensor<double>::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
  auto y = matmul<double>(nullptr, eye, m);
  for (Index i = 0; i < 9; ++i) CHECK(y.data()[i] == m.data()[i]);

  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 1}, {0, 1});
  auto c = matmul<double>(nullptr, a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at({0, 0}) == 2.0);
  CHECK(c.at({1, 0}) == 4.0);

  CHECK_THROWS_AS(matmul<double>(nullptr, a, Tensor<double>::zeros({3, 2})),
                  std::invalid_argument);
}

TEST_CASE("grad of sum(A*B) wrt A is ones * B^T") {
  Rng rng(7);
  auto a = randn<double>(rng, {3, 4});
  auto b = randn<double>(rng, {4, 2});
  a.set_requires_grad(true);
  Tape<double> tape;
  auto y = sum_all(&tape, matmul(&tape, a, b));
  tape.backward(y);
  auto expected = Mat<double>(3, 4);
  expected = Mat<double>::Ones(3, 2) * ConstMatMap<double>(b.data(), 4, 2).transpose();
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j)
      CHECK(a.grad()(i * 4 + j) == doctest::Approx(expected(i, j)).epsilon(1e-12));
}

TEST_CASE("batched and shared-operand matmul") {
  Rng rng(3);
  auto a = randn<double>(rng, {2, 3, 2});
  auto b = randn<double>(rng, {2, 2, 4});
  auto y = matmul<double>(nullptr, a, b);
  CHECK(y.shape() == Shape{2, 3, 4});
  for (Index i = 0; i < 2; ++i) {
    Mat<double> ref = ConstMatMap<double>(a.data() + i * 6, 3, 2) *
                      ConstMatMap<double>(b.data() + i * 8, 2, 4);
    for (Index r = 0; r < 3; ++r)
      for (Index c = 0; c < 4; ++c)
        CHECK(y.at({i, r, c}) == doctest::Approx(ref(r, c)).epsilon(1e-12));
  }

  auto shared = randn<double>(rng, {2, 4});
  auto y2 = matmul<double>(nullptr, a, shared);
  CHECK(y2.shape() == Shape{2, 3, 4});
  Mat<double> ref0 =
      ConstMatMap<double>(a.data(), 3, 2) * ConstMatMap<double>(shared.data(), 2, 4);
  CHECK(y2.at({0, 1, 1}) == doctest::Approx(ref0(1, 1)).epsilon(1e-12));
}

TEST_CASE("linear matches matmul plus bias") {
  Rng rng(11);
  auto x = randn<double>(rng, {4, 3});
  auto w = randn<double>(rng, {5, 3});
  auto b = randn<double>(rng, {5});
  auto y = linear<double>(nullptr, x, w, b);
  CHECK(y.shape() == Shape{4, 5});
  Mat<double> ref = ConstMatMap<double>(x.data(), 4, 3) *
                    ConstMatMap<double>(w.data(), 5, 3).transpose();
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 5; ++c)
      CHECK(y.at({r, c}) == doctest::Approx(ref(r, c) + b.data()[c]).epsilon(1e-12));
}

TEST_CASE("softmax uniform, stability, row sums") {
  auto u = softmax<double>(nullptr, Tensor<double>::from({3}, {0, 0, 0}), 0);
  for (Index i = 0; i < 3; ++i) CHECK(u.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto s = softmax<double>(nullptr, Tensor<double>::from({2}, {1e4, 0.0}), 0);
  CHECK(s.data()[0] == doctest::Approx(1.0));
  CHECK(s.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(s.data()[0]));

  Rng rng(5);
  auto x = randn<double>(rng, {4, 7}, 10.0);
  auto y = softmax<double>(nullptr, x, -1);
  for (Index r = 0; r < 4; ++r) {
    double sum = 0;
    for (Index c = 0; c < 7; ++c) sum += y.at({r, c});
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("sigmoid and gelu point values") {
  auto s = sigmoid<double>(nullptr, Tensor<double>::from({3}, {0.0, 100.0, -100.0}));
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.data()[1] == doctest::Approx(1.0));
  CHECK(s.data()[2] == doctest::Approx(0.0));

  auto g = gelu<double>(nullptr, Tensor<double>::from({3}, {0.0, 10.0, -10.0}));
  CHECK(g.data()[0] == 0.0);
  CHECK(g.data()[1] == doctest::Approx(10.0).epsilon(1e-6));
  CHECK(g.data()[2] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("layer_norm constant row and affine") {
  auto x = Tensor<double>::full({2, 4}, 3.0);
  auto gamma = Tensor<double>::full({4}, 1.0);
  auto beta = Tensor<double>::zeros({4});
  auto y = layer_norm<double>(nullptr, x, gamma, beta);
  for (Index i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(0.0));

  auto gamma0 = Tensor<double>::zeros({4});
  auto beta2 = Tensor<double>::from({4}, {1, 2, 3, 4});
  Rng rng(9);
  auto xr = randn<double>(rng, {3, 4});
  auto y2 = layer_norm<double>(nullptr, xr, gamma0, beta2);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 4; ++c) CHECK(y2.at({r, c}) == beta2.data()[c]);

  auto y3 = layer_norm<double>(nullptr, xr, gamma, beta);
  for (Index r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (Index c = 0; c < 4; ++c) mean += y3.at({r, c});
    mean /= 4;
    for (Index c = 0; c < 4; ++c) var += (y3.at({r, c}) - mean) * (y3.at({r, c}) - mean);
    var /= 4;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("batch_norm identity in fresh eval mode and beta on constant batch") {
  BatchNormState<double> st{Tensor<double>::full({3}, 1.0), Tensor<double>::zeros({3}),
                            Tensor<double>::zeros({3}), Tensor<double>::full({3}, 1.0)};
  Rng rng(2);
  auto x = randn<double>(rng, {4, 3});
  auto y = batch_norm<double>(nullptr, x, st, false);
  for (Index i = 0; i < x.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));

  BatchNormState<double> st2{Tensor<double>::full({2}, 1.0),
                             Tensor<double>::from({2}, {0.5, -0.5}),
                             Tensor<double>::zeros({2}), Tensor<double>::full({2}, 1.0)};
  auto xc = Tensor<double>::full({5, 2}, 4.0);
  auto y2 = batch_norm<double>(nullptr, xc, st2, true);
  for (Index r = 0; r < 5; ++r) {
    CHECK(y2.at({r, 0}) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(y2.at({r, 1}) == doctest::Approx(-0.5).epsilon(1e-9));
  }
}

TEST_CASE("batch_norm running-stat momentum update") {
  BatchNormState<double> st{Tensor<double>::full({1}, 1.0), Tensor<double>::zeros({1}),
                            Tensor<double>::zeros({1}), Tensor<double>::full({1}, 1.0)};
  auto x = Tensor<double>::from({3, 1}, {1, 2, 3});
  batch_norm<double>(nullptr, x, st, true);
  CHECK(st.run_mean.data()[0] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(st.run_var.data()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0).epsilon(1e-12));
}

TEST_CASE("bilinear_upsample2x constant and 2x2 ramp") {
  auto c = Tensor<double>::full({2, 3, 3}, 1.5);
  auto yc = bilinear_upsample2x<double>(nullptr, c);
  CHECK(yc.shape() == Shape{2, 6, 6});
  for (Index i = 0; i < yc.size(); ++i) CHECK(yc.data()[i] == 1.5);

  auto ramp = Tensor<double>::from({1, 2, 2}, {0, 1, 2, 3});
  auto y = bilinear_upsample2x<double>(nullptr, ramp);
  double expected[16] = {0,   0.25, 0.75, 1,   0.5, 0.75, 1.25, 1.5,
                         1.5, 1.75, 2.25, 2.5, 2,   2.25, 2.75, 3};
  for (Index i = 0; i < 16; ++i)
    CHECK(y.data()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("extract_patches layout and inverse gradient") {
  auto img = Tensor<double>::zeros({2, 4, 4});
  for (Index c = 0; c < 2; ++c)
    for (Index yy = 0; yy < 4; ++yy)
      for (Index xx = 0; xx < 4; ++xx) img.at({c, yy, xx}) = 100.0 * c + 10.0 * yy + xx;
  auto p = extract_patches<double>(nullptr, img, 2);
  CHECK(p.shape() == Shape{4, 8});
  CHECK(p.at({1, 6}) == 112.0);
  CHECK(p.at({0, 0}) == 0.0);
  CHECK(p.at({3, 3}) == 33.0);
  CHECK(p.at({2, 4}) == 120.0);
}

TEST_CASE("permute round trip") {
  Rng rng(4);
  auto x = randn<double>(rng, {2, 3, 4});
  auto y = permute<double>(nullptr, x, {2, 0, 1});
  CHECK(y.shape() == Shape{4, 2, 3});
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (Index k = 0; k < 4; ++k) CHECK(y.at({k, i, j}) == x.at({i, j, k}));
  auto z = permute<double>(nullptr, y, {1, 2, 0});
  for (Index i = 0; i < x.size(); ++i) CHECK(z.data()[i] == x.data()[i]);
}

TEST_CASE("slice and concat invert each other") {
  Rng rng(6);
  auto x = randn<double>(rng, {5, 3});
  auto top = slice_rows<double>(nullptr, x, 0, 2);
  auto bottom = slice_rows<double>(nullptr, x, 2, 3);
  auto back = concat_rows<double>(nullptr, top, bottom);
  CHECK(back.shape() == x.shape());
  for (Index i = 0; i < x.size(); ++i) CHECK(back.data()[i] == x.data()[i]);
  CHECK_THROWS_AS(slice_rows<double>(nullptr, x, 4, 2), std::invalid_argument);
}

TEST_CASE("add broadcasts a trailing-shape operand") {
  auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from({3}, {10, 20, 30});
  auto y = add<double>(nullptr, a, b);
  double expected[6] = {11, 22, 33, 14, 25, 36};
  for (Index i = 0; i < 6; ++i) CHECK(y.data()[i] == expected[i]);
  CHECK_THROWS_AS(add<double>(nullptr, a, Tensor<double>::zeros({2})), std::invalid_argument);
}

TEST_CASE("rope_rotate identity tables and norm preservation") {
  Rng rng(8);
  auto x = randn<double>(rng, {2, 3, 4});
  auto cs = Tensor<double>::full({3, 2}, 1.0);
  auto sn = Tensor<double>::zeros({3, 2});
  auto y = rope_rotate<double>(nullptr, x, cs, sn);
  for (Index i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);

  for (Index i = 0; i < 6; ++i) {
    double a = 0.3 + 0.7 * static_cast<double>(i);
    cs.data()[i] = std::cos(a);
    sn.data()[i] = std::sin(a);
  }
  auto y2 = rope_rotate<double>(nullptr, x, cs, sn);
  CHECK(y2.value().norm() == doctest::Approx(x.value().norm()).epsilon(1e-10));
  CHECK_THROWS_AS(rope_rotate<double>(nullptr, randn<double>(rng, {2, 3, 3}), cs, sn),
                  std::invalid_argument);
}

TEST_CASE("bce_with_logits values and stability") {
  auto x = Tensor<double>::from({4}, {0.0, 100.0, -100.0, 100.0});
  auto t = Tensor<double>::from({4}, {0.5, 1.0, 0.0, 0.0});
  auto y = bce_with_logits<double>(nullptr, x, t);
  CHECK(y.data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(0.0));
  CHECK(y.data()[2] == doctest::Approx(0.0));
  CHECK(y.data()[3] == doctest::Approx(100.0).epsilon(1e-12));
  for (Index i = 0; i < 4; ++i) CHECK(std::isfinite(y.data()[i]));
}

TEST_CASE("weighted cross entropy matches hand computation") {
  auto logits = Tensor<double>::from({2, 2}, {1, 0, 1, 0});
  auto loss =
      weighted_cross_entropy<double>(nullptr, logits, {0, 1}, std::vector<double>{1.0, 0.1});
  double lse = std::log(std::exp(1.0) + 1.0);
  double expected = (1.0 * (lse - 1.0) + 0.1 * lse) / 1.1;
  CHECK(loss.data()[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("two forward passes are bit identical") {
  Rng rng(12345);
  auto x = randn<float>(rng, {7, 5});
  auto w = randn<float>(rng, {5, 5});
  auto run = [&]() {
    auto h = linear<float>(nullptr, x, w, Tensor<float>());
    return gelu<float>(nullptr, softmax<float>(nullptr, h, -1));
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}

TEST_CASE("rng stream is reproducible and serializable") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  auto saved = a.state();
  double x1 = a.uniform();
  Rng c(0);
  c.set_state(saved);
  CHECK(c.uniform() == x1);
  CHECK(hash_bernoulli(1, 2, 3, 0.5) == hash_bernoulli(1, 2, 3, 0.5));
  CHECK(hash_bernoulli(1, 2, 3, 1.0));
  CHECK_FALSE(hash_bernoulli(1, 2, 3, 0.0));
}

TEST_CASE("linear function gradient is exact") {
  Rng rng(77);
  auto x = randn<double>(rng, {6});
  auto rep = gradcheck(
      [](Tape<double>* t, std::vector<Tensor<double>>& in) {
        return sum_all(t, add_scalar(t, mul_scalar(t, in[0], 3.0), 2.0));
      },
      {x});
  CHECK(rep.finite);
  CHECK(rep.max_rel_err < 1e-9);
}
