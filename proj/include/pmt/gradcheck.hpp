#pragma once

#include "pmt/ops.hpp"
#include "pmt/rng.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace pmt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_input = -1;
  Index worst_elem = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  bool finite = true;

  bool ok(double tol) const { return finite && max_rel_err < tol; }

  std::string describe() const {
    if (!finite) return "non-finite value encountered";
    return "max rel err " + std::to_string(max_rel_err) + " at input " +
           std::to_string(worst_input) + " elem " + std::to_string(worst_elem) + " (analytic " +
           std::to_string(analytic) + ", numeric " + std::to_string(numeric) + ")";
  }
};

/// Central-difference check of a scalar-valued function of several tensors.
/// f must be a pure function of the input values; it is re-evaluated many
/// times with perturbed inputs and a null tape. Elements whose gradient
/// magnitude falls below denom_floor are judged absolutely (against
/// tol * denom_floor) instead of relatively, since finite differences carry
/// an absolute noise floor that swamps the relative error of near-zero
/// gradients.
inline GradCheckReport gradcheck(
    const std::function<Tensor<double>(Tape<double>*, std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double h = 1e-5, double denom_floor = 1e-8) {
  GradCheckReport rep;

  for (auto& t : inputs) t.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> loss = f(&tape, inputs);
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("gradcheck: function must return a scalar");
  if (!std::isfinite(loss.data()[0])) {
    rep.finite = false;
    return rep;
  }
  tape.backward(loss);

  std::vector<Vec<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : Vec<double>::Zero(t.size()));

  auto eval = [&]() {
    std::vector<Tensor<double>> plain;
    plain.reserve(inputs.size());
    for (auto& t : inputs) plain.push_back(t);
    Tensor<double> y = f(nullptr, plain);
    return y.data()[0];
  };

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    for (Index i = 0; i < t.size(); ++i) {
      double keep = t.data()[i];
      t.data()[i] = keep + h;
      double up = eval();
      t.data()[i] = keep - h;
      double down = eval();
      t.data()[i] = keep;
      double num = (up - down) / (2.0 * h);
      double ana = analytic[k](i);
      if (!std::isfinite(num) || !std::isfinite(ana)) {
        rep.finite = false;
        rep.worst_input = static_cast<int>(k);
        rep.worst_elem = i;
        rep.analytic = ana;
        rep.numeric = num;
        return rep;
      }
      double rel = std::abs(ana - num) / std::max(denom_floor, std::abs(ana) + std::abs(num));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = static_cast<int>(k);
        rep.worst_elem = i;
        rep.analytic = ana;
        rep.numeric = num;
      }
    }
  }
  return rep;
}

/// Fills a tensor with values from rng.normal() scaled by sd.
template <typename S>
inline Tensor<S> randn(Rng& rng, Shape shape, double sd = 1.0) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(rng.normal() * sd);
  return t;
}

}  // namespace pmt
