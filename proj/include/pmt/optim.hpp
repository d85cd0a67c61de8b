#pragma once

#include "pmt/config.hpp"
#include "pmt/container.hpp"
#include "pmt/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace pmt {

/// Adam with decoupled weight decay. Tracks only parameters marked
/// trainable at attach time; frozen tensors and running statistics carry
/// no state and are never touched.
template <typename S>
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void attach(const ParamList<S>& all) {
    params_.clear();
    m_.clear();
    v_.clear();
    steps_ = 0;
    for (const auto& np : all) {
      if (!np.tensor.requires_grad()) continue;
      params_.push_back(np);
      m_.push_back(Vec<S>::Zero(np.tensor.size()));
      v_.push_back(Vec<S>::Zero(np.tensor.size()));
    }
  }

  const ParamList<S>& params() const { return params_; }
  std::int64_t steps_taken() const { return steps_; }

  void zero_grad() {
    for (auto& np : params_) np.tensor.zero_grad();
  }

  /// Global-norm gradient clip; a limit of zero disables it. Returns the
  /// pre-clip norm.
  double clip_grad_norm(double limit) {
    double sq = 0.0;
    for (auto& np : params_)
      if (np.tensor.has_grad()) sq += static_cast<double>(np.tensor.grad().squaredNorm());
    double norm = std::sqrt(sq);
    if (limit > 0.0 && norm > limit) {
      S scale = static_cast<S>(limit / norm);
      for (auto& np : params_)
        if (np.tensor.has_grad()) np.tensor.grad_ref() *= scale;
    }
    return norm;
  }

  void step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      const Vec<S>& g = t.grad();
      m_[i] = static_cast<S>(beta1) * m_[i] + static_cast<S>(1.0 - beta1) * g;
      v_[i] = static_cast<S>(beta2) * v_[i] + static_cast<S>(1.0 - beta2) * g.cwiseProduct(g);
      Vec<S> mhat = m_[i] / static_cast<S>(bc1);
      Vec<S> vhat = v_[i] / static_cast<S>(bc2);
      Vec<S> denom = (vhat.array().sqrt() + static_cast<S>(eps)).matrix();
      t.value() -= static_cast<S>(lr) * mhat.cwiseQuotient(denom);
      if (weight_decay != 0.0) t.value() -= static_cast<S>(lr * weight_decay) * t.value();
    }
  }

  void save_state(Container& c) const {
    c.put_u64_scalar("opt.steps", static_cast<std::uint64_t>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S> m(Shape{static_cast<Index>(m_[i].size())});
      Tensor<S> v(Shape{static_cast<Index>(v_[i].size())});
      m.value() = m_[i];
      v.value() = v_[i];
      c.put("opt." + params_[i].name + ".m", m);
      c.put("opt." + params_[i].name + ".v", v);
    }
  }

  void load_state(const Container& c) {
    steps_ = static_cast<std::int64_t>(c.get_u64_scalar("opt.steps"));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S> m = get_as(c, "opt." + params_[i].name + ".m");
      Tensor<S> v = get_as(c, "opt." + params_[i].name + ".v");
      if (m.size() != m_[i].size() || v.size() != v_[i].size())
        throw std::runtime_error("optimizer state size mismatch for " + params_[i].name);
      m_[i] = m.value();
      v_[i] = v.value();
    }
  }

 private:
  static Tensor<S> get_as(const Container& c, const std::string& name) {
    if constexpr (std::is_same_v<S, float>)
      return c.get_f32(name);
    else
      return c.get_f64(name);
  }

  ParamList<S> params_;
  std::vector<Vec<S>> m_, v_;
  std::int64_t steps_ = 0;
};

/// Learning rate at a given step: linear warmup to the base rate, then
/// either cosine decay to zero or polynomial decay.
inline double lr_at_step(const TrainSchedule& sched, std::int64_t step) {
  if (step < 0) throw std::invalid_argument("negative step");
  double base = sched.lr;
  if (sched.warmup_steps > 0 && step < sched.warmup_steps)
    return base * static_cast<double>(step + 1) / static_cast<double>(sched.warmup_steps);
  std::int64_t total = std::max<std::int64_t>(sched.steps, 1);
  double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  if (sched.decay == "poly") return base * std::pow(1.0 - frac, sched.poly_power);
  return base * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

}  // namespace pmt
