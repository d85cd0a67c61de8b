#pragma once

#include "pmt/tensor.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace pmt {

/// Linear record of executed primitive ops. Each op pushes one backward step;
/// backward() replays them in exact reverse execution order. A tape is
/// single-use: clear() before reusing it for another forward pass.
template <typename S>
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  std::size_t size() const { return steps_.size(); }

  void backward(Tensor<S>& loss) {
    if (used_) throw std::logic_error("tape already consumed by backward; clear() first");
    if (!loss.defined() || loss.size() != 1)
      throw std::invalid_argument("backward requires a scalar loss tensor");
    if (!loss.requires_grad())
      throw std::invalid_argument("backward on a loss that requires no gradient");
    used_ = true;
    loss.grad_ref()(0) = S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() {
    steps_.clear();
    used_ = false;
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool used_ = false;
};

/// True when this op invocation must be recorded.
template <typename S>
inline bool tracked(const Tape<S>* tape, std::initializer_list<const Tensor<S>*> inputs) {
  if (!tape) return false;
  for (const Tensor<S>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace pmt
