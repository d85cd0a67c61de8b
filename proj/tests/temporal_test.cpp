#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pmt/gradcheck.hpp"
#include "pmt/temporal.hpp"

using namespace pmt;

TEST_CASE("zero-initialized projection reduces fusion to the learned queries") {
  Rng rng(3);
  LinearLayer<float> proj;
  proj.init_zero(4, 4);
  Tensor<float> prev = randn<float>(rng, {3, 4});
  Tensor<float> lrn = randn<float>(rng, {3, 4});
  Tensor<float> fused = propagate_queries<float>(nullptr, prev, lrn, proj);
  for (Index i = 0; i < fused.size(); ++i) CHECK(fused.data()[i] == lrn.data()[i]);
}

TEST_CASE("identity projection with zero learned queries keeps the previous queries") {
  Rng rng(5);
  LinearLayer<double> proj;
  proj.init_zero(4, 4);
  proj.w.as2d().setIdentity();
  Tensor<double> prev = randn<double>(rng, {3, 4});
  Tensor<double> lrn = Tensor<double>::zeros({3, 4});
  Tensor<double> fused = propagate_queries<double>(nullptr, prev, lrn, proj);
  for (Index i = 0; i < fused.size(); ++i)
    CHECK(fused.data()[i] == doctest::Approx(prev.data()[i]).epsilon(1e-12));
}

TEST_CASE("permuting query slots permutes the fused queries") {
  Rng rng(7);
  LinearLayer<double> proj;
  proj.init(rng, 4, 4, 0.5);
  Tensor<double> prev = randn<double>(rng, {4, 4});
  Tensor<double> lrn = randn<double>(rng, {4, 4});
  std::vector<Index> perm = {2, 3, 1, 0};
  Tensor<double> prev_p({4, 4}), lrn_p({4, 4});
  for (Index i = 0; i < 4; ++i) {
    prev_p.as2d().row(i) = prev.as2d().row(perm[static_cast<std::size_t>(i)]);
    lrn_p.as2d().row(i) = lrn.as2d().row(perm[static_cast<std::size_t>(i)]);
  }
  Tensor<double> a = propagate_queries<double>(nullptr, prev, lrn, proj);
  Tensor<double> b = propagate_queries<double>(nullptr, prev_p, lrn_p, proj);
  for (Index i = 0; i < 4; ++i)
    CHECK((b.as2d().row(i) - a.as2d().row(perm[static_cast<std::size_t>(i)]))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("mismatched query shapes are rejected") {
  LinearLayer<float> proj;
  proj.init_zero(4, 4);
  Tensor<float> prev = Tensor<float>::zeros({3, 4});
  Tensor<float> lrn = Tensor<float>::zeros({5, 4});
  CHECK_THROWS_AS(propagate_queries<float>(nullptr, prev, lrn, proj), std::invalid_argument);
}

TEST_CASE("query fusion gradient check") {
  Rng rng(11);
  LinearLayer<double> proj;
  proj.init(rng, 4, 4, 0.5);
  Tensor<double> r = randn<double>(rng, {3, 4});

  std::vector<Tensor<double>> inputs;
  inputs.push_back(randn<double>(rng, {3, 4}));
  inputs.push_back(randn<double>(rng, {3, 4}));
  inputs.push_back(proj.w);
  inputs.push_back(proj.b);

  auto f = [&](Tape<double>* tape, std::vector<Tensor<double>>& in) {
    Tensor<double> y = propagate_queries(tape, in[0], in[1], proj);
    return sum_all(tape, mul(tape, y, r));
  };
  auto rep = gradcheck(f, inputs);
  INFO(rep.describe());
  CHECK(rep.ok(1e-4));
}
