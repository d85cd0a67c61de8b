#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<Mat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Mat<S>>;
template <typename S>
using VecMap = Eigen::Map<Vec<S>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Vec<S>>;

/// Dense row-major tensor handle. Copies share the underlying node, so a
/// tensor recorded on a tape and the caller's handle see the same value and
/// gradient buffers. The gradient buffer stays empty until backward first
/// accumulates into it.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->value = Vec<S>::Zero(shape_numel(node_->shape));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    t.value().setConstant(v);
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<S> vals) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(vals.size()) != t.size())
      throw std::invalid_argument("tensor init list size " + std::to_string(vals.size()) +
                                  " does not match shape " + shape_str(t.shape()));
    Index i = 0;
    for (S v : vals) t.data()[i++] = v;
    return t;
  }

  static Tensor from_vector(Shape shape, const std::vector<S>& vals) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(vals.size()) != t.size())
      throw std::invalid_argument("tensor data size " + std::to_string(vals.size()) +
                                  " does not match shape " + shape_str(t.shape()));
    std::copy(vals.begin(), vals.end(), t.data());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  Index size() const { return static_cast<Index>(node_->value.size()); }

  Index dim(int i) const {
    int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n)
      throw std::invalid_argument("dim index " + std::to_string(i) + " out of range for shape " +
                                  shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  Vec<S>& value() { return node_->value; }
  const Vec<S>& value() const { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

  /// Gradient buffer, allocated as zeros on first use.
  Vec<S>& grad_ref() {
    if (!node_->requires_grad)
      throw std::logic_error("gradient write to a tensor with requires_grad=false");
    if (node_->grad.size() != node_->value.size()) node_->grad = Vec<S>::Zero(node_->value.size());
    return node_->grad;
  }

  const Vec<S>& grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node_->grad;
  }

  void zero_grad() {
    if (node_) node_->grad.resize(0);
  }

  /// Row-major element access by multi-index (tests and small utilities).
  S& at(std::initializer_list<Index> idx) { return data()[flat_index(idx)]; }
  S at(std::initializer_list<Index> idx) const { return data()[flat_index(idx)]; }

  MatMap<S> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatMap<S>(data(), rows, cols);
  }
  ConstMatMap<S> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatMap<S>(data(), rows, cols);
  }

  /// View as [prod(shape[:-1]), shape[-1]].
  MatMap<S> as2d() { return matrix(size() / dim(-1), dim(-1)); }
  ConstMatMap<S> as2d() const { return matrix(size() / dim(-1), dim(-1)); }

  /// Deep copy of the value; gradient state is not copied.
  Tensor clone() const {
    Tensor t(shape());
    t.value() = value();
    t.set_requires_grad(requires_grad());
    return t;
  }

  /// Same values, detached from any gradient lineage.
  Tensor detached() const {
    Tensor t(shape());
    t.value() = value();
    return t;
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  struct Node {
    Shape shape;
    Vec<S> value;
    Vec<S> grad;
    bool requires_grad = false;
  };

  Index flat_index(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw std::invalid_argument("index rank does not match shape " + shape_str(shape()));
    Index flat = 0;
    int i = 0;
    for (Index v : idx) {
      Index extent = node_->shape[static_cast<std::size_t>(i)];
      if (v < 0 || v >= extent)
        throw std::out_of_range("index " + std::to_string(v) + " out of range for shape " +
                                shape_str(shape()));
      flat = flat * extent + v;
      ++i;
    }
    return flat;
  }

  void check_view(Index rows, Index cols) const {
    if (rows * cols != size())
      throw std::invalid_argument("matrix view " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " does not cover shape " +
                                  shape_str(shape()));
  }

  std::shared_ptr<Node> node_;
};

}  // namespace pmt
