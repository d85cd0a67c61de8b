#pragma once

#include "pmt/tape.hpp"
#include "pmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace pmt {

namespace detail {

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// True when small.shape equals the trailing dims of big.shape.
template <typename S>
inline bool is_suffix_shape(const Tensor<S>& big, const Tensor<S>& small) {
  if (small.ndim() > big.ndim()) return false;
  int off = big.ndim() - small.ndim();
  for (int i = 0; i < small.ndim(); ++i)
    if (big.shape()[static_cast<std::size_t>(off + i)] !=
        small.shape()[static_cast<std::size_t>(i)])
      return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  Tensor<S> out(std::move(shape));
  out.value() = x.value();
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o]() mutable {
      if (!o.has_grad()) return;
      if (xi.requires_grad()) xi.grad_ref() += o.grad();
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute(Tape<S>* tape, const Tensor<S>& x, const std::vector<int>& perm) {
  int n = x.ndim();
  if (static_cast<int>(perm.size()) != n)
    throw std::invalid_argument("permute: axis list rank mismatch for shape " +
                                shape_str(x.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  Shape out_shape(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("permute: invalid axis permutation");
    seen[static_cast<std::size_t>(p)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(p)];
  }

  // Row-major strides of the input, gathered in output order.
  std::vector<Index> in_strides(static_cast<std::size_t>(n), 1);
  for (int i = n - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * x.shape()[static_cast<std::size_t>(i + 1)];
  std::vector<Index> gather_strides(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    gather_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  Tensor<S> out(out_shape);
  std::vector<Index> idx(static_cast<std::size_t>(n), 0);
  const S* src = x.data();
  S* dst = out.data();
  Index total = out.size();
  Index src_off = 0;
  for (Index flat = 0; flat < total; ++flat) {
    dst[flat] = src[src_off];
    for (int a = n - 1; a >= 0; --a) {
      auto ua = static_cast<std::size_t>(a);
      if (++idx[ua] < out_shape[ua]) {
        src_off += gather_strides[ua];
        break;
      }
      src_off -= gather_strides[ua] * (out_shape[ua] - 1);
      idx[ua] = 0;
    }
  }

  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, gather_strides, out_shape, n]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      auto& gx = xi.grad_ref();
      const auto& go = o.grad();
      std::vector<Index> idx(static_cast<std::size_t>(n), 0);
      Index src_off = 0;
      for (Index flat = 0; flat < go.size(); ++flat) {
        gx(src_off) += go(flat);
        for (int a = n - 1; a >= 0; --a) {
          auto ua = static_cast<std::size_t>(a);
          if (++idx[ua] < out_shape[ua]) {
            src_off += gather_strides[ua];
            break;
          }
          src_off -= gather_strides[ua] * (out_shape[ua] - 1);
          idx[ua] = 0;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose2d(Tape<S>* tape, const Tensor<S>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("transpose2d: rank-2 tensor required");
  return permute(tape, x, {1, 0});
}

template <typename S>
Tensor<S> slice_rows(Tape<S>* tape, const Tensor<S>& x, Index begin, Index count) {
  if (x.ndim() < 1) throw std::invalid_argument("slice_rows: rank >= 1 required");
  Index rows = x.dim(0);
  if (begin < 0 || count < 0 || begin + count > rows)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") out of " +
                                std::to_string(rows) + " rows");
  Index stride = x.size() / std::max<Index>(rows, 1);
  Shape out_shape = x.shape();
  out_shape[0] = count;
  Tensor<S> out(out_shape);
  out.value() = x.value().segment(begin * stride, count * stride);
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, begin, count, stride]() mutable {
      if (!o.has_grad()) return;
      if (xi.requires_grad()) xi.grad_ref().segment(begin * stride, count * stride) += o.grad();
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(Tape<S>* tape, const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  Shape tail = parts[0].shape();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != static_cast<int>(tail.size()))
      throw std::invalid_argument("concat_rows: rank mismatch");
    for (std::size_t i = 1; i < tail.size(); ++i)
      if (p.shape()[i] != tail[i])
        throw std::invalid_argument("concat_rows: trailing shape mismatch " +
                                    shape_str(p.shape()) + " vs " + shape_str(tail));
    rows += p.dim(0);
  }
  Shape out_shape = tail;
  out_shape[0] = rows;
  Tensor<S> out(out_shape);
  Index off = 0;
  for (const auto& p : parts) {
    out.value().segment(off, p.size()) = p.value();
    off += p.size();
  }
  bool track = false;
  for (const auto& p : parts) track = track || (tape && p.requires_grad());
  if (track) {
    out.set_requires_grad(true);
    std::vector<Tensor<S>> ins = parts;
    Tensor<S> o = out;
    tape->record([ins, o]() mutable {
      if (!o.has_grad()) return;
      Index off = 0;
      for (auto& p : ins) {
        if (p.requires_grad()) p.grad_ref() += o.grad().segment(off, p.size());
        off += p.size();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  return concat_rows(tape, std::vector<Tensor<S>>{a, b});
}

/// [C,H,W] image to [N, C*p*p] rows of flattened patches, patches in
/// row-major grid order, features laid out channel-major.
template <typename S>
Tensor<S> extract_patches(Tape<S>* tape, const Tensor<S>& img, Index p) {
  if (img.ndim() != 3) throw std::invalid_argument("extract_patches: [C,H,W] input required");
  Index C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (p <= 0 || H % p != 0 || W % p != 0)
    throw std::invalid_argument("extract_patches: image " + shape_str(img.shape()) +
                                " not divisible by patch size " + std::to_string(p));
  Index gh = H / p, gw = W / p, n = gh * gw, f = C * p * p;
  Tensor<S> out({n, f});
  const S* src = img.data();
  S* dst = out.data();
  for (Index gy = 0; gy < gh; ++gy)
    for (Index gx = 0; gx < gw; ++gx) {
      S* row = dst + (gy * gw + gx) * f;
      for (Index c = 0; c < C; ++c)
        for (Index py = 0; py < p; ++py)
          for (Index px = 0; px < p; ++px)
            row[(c * p + py) * p + px] = src[c * H * W + (gy * p + py) * W + (gx * p + px)];
    }
  if (tracked(tape, {&img})) {
    out.set_requires_grad(true);
    Tensor<S> xi = img, o = out;
    tape->record([xi, o, C, H, W, p, gh, gw, f]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      auto& gimg = xi.grad_ref();
      const auto& go = o.grad();
      for (Index gy = 0; gy < gh; ++gy)
        for (Index gx = 0; gx < gw; ++gx) {
          const S* row = go.data() + (gy * gw + gx) * f;
          for (Index c = 0; c < C; ++c)
            for (Index py = 0; py < p; ++py)
              for (Index px = 0; px < p; ++px)
                gimg(c * H * W + (gy * p + py) * W + (gx * p + px)) +=
                    row[(c * p + py) * p + px];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

/// add(a, b): equal shapes, or b's shape a suffix of a's (b is broadcast over
/// the leading dims). No other broadcasting.
template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out(a.shape());
  bool same = a.shape() == b.shape();
  if (same) {
    out.value() = a.value() + b.value();
  } else if (detail::is_suffix_shape(a, b)) {
    Index block = b.size();
    Index reps = a.size() / block;
    for (Index r = 0; r < reps; ++r)
      out.value().segment(r * block, block) = a.value().segment(r * block, block) + b.value();
  } else {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> ai = a, bi = b, o = out;
    tape->record([ai, bi, o, same]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ai.requires_grad()) ai.grad_ref() += g;
      if (bi.requires_grad()) {
        if (same) {
          bi.grad_ref() += g;
        } else {
          Index block = bi.size();
          Index reps = g.size() / block;
          auto& gb = bi.grad_ref();
          for (Index r = 0; r < reps; ++r) gb += g.segment(r * block, block);
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<S> out(a.shape());
  out.value() = a.value() - b.value();
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> ai = a, bi = b, o = out;
    tape->record([ai, bi, o]() mutable {
      if (!o.has_grad()) return;
      if (ai.requires_grad()) ai.grad_ref() += o.grad();
      if (bi.requires_grad()) bi.grad_ref() -= o.grad();
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out(a.shape());
  out.value() = a.value().cwiseProduct(b.value());
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> ai = a, bi = b, o = out;
    tape->record([ai, bi, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ai.requires_grad()) ai.grad_ref() += g.cwiseProduct(bi.value());
      if (bi.requires_grad()) bi.grad_ref() += g.cwiseProduct(ai.value());
    });
  }
  return out;
}

template <typename S>
Tensor<S> div(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "div");
  Tensor<S> out(a.shape());
  out.value() = a.value().cwiseQuotient(b.value());
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> ai = a, bi = b, o = out;
    tape->record([ai, bi, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ai.requires_grad()) ai.grad_ref() += g.cwiseQuotient(bi.value());
      if (bi.requires_grad())
        bi.grad_ref() -=
            g.cwiseProduct(ai.value()).cwiseQuotient(bi.value().cwiseProduct(bi.value()));
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(Tape<S>* tape, const Tensor<S>& x, S c) {
  Tensor<S> out(x.shape());
  out.value() = x.value() * c;
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, c]() mutable {
      if (!o.has_grad()) return;
      if (xi.requires_grad()) xi.grad_ref() += o.grad() * c;
    });
  }
  return out;
}

template <typename S>
Tensor<S> add_scalar(Tape<S>* tape, const Tensor<S>& x, S c) {
  Tensor<S> out(x.shape());
  out.value() = x.value().array() + c;
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o]() mutable {
      if (!o.has_grad()) return;
      if (xi.requires_grad()) xi.grad_ref() += o.grad();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contractions
// ---------------------------------------------------------------------------

/// matmul over the last two axes. Leading batch dims must match exactly, or
/// be absent on one side (that side is shared across the batch).
template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul: rank >= 2 required, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  Index m = a.dim(-2), k = a.dim(-1);
  Index kb = b.dim(-2), n = b.dim(-1);
  if (k != kb)
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  if (lead_a == lead_b)
    lead = lead_a;
  else if (lead_a.empty())
    lead = lead_b;
  else if (lead_b.empty())
    lead = lead_a;
  else
    throw std::invalid_argument("matmul: batch dims incompatible " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Index batch = shape_numel(lead);
  bool a_shared = lead_a.empty() && !lead.empty();
  bool b_shared = lead_b.empty() && !lead.empty();

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);
  for (Index i = 0; i < batch; ++i) {
    ConstMatMap<S> am(a.data() + (a_shared ? 0 : i * m * k), m, k);
    ConstMatMap<S> bm(b.data() + (b_shared ? 0 : i * k * n), k, n);
    MatMap<S> om(out.data() + i * m * n, m, n);
    om.noalias() = am * bm;
  }
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> ai = a, bi = b, o = out;
    tape->record([ai, bi, o, m, k, n, batch, a_shared, b_shared]() mutable {
      if (!o.has_grad()) return;
      for (Index i = 0; i < batch; ++i) {
        ConstMatMap<S> gm(o.grad().data() + i * m * n, m, n);
        ConstMatMap<S> am(ai.data() + (a_shared ? 0 : i * m * k), m, k);
        ConstMatMap<S> bm(bi.data() + (b_shared ? 0 : i * k * n), k, n);
        if (ai.requires_grad()) {
          MatMap<S> ga(ai.grad_ref().data() + (a_shared ? 0 : i * m * k), m, k);
          ga.noalias() += gm * bm.transpose();
        }
        if (bi.requires_grad()) {
          MatMap<S> gb(bi.grad_ref().data() + (b_shared ? 0 : i * k * n), k, n);
          gb.noalias() += am.transpose() * gm;
        }
      }
    });
  }
  return out;
}

/// y = x W^T + bias with weight stored [out_features, in_features];
/// applied over the last axis of x. bias may be undefined.
template <typename S>
Tensor<S> linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  if (w.ndim() != 2) throw std::invalid_argument("linear: weight must be [out, in]");
  Index in = w.dim(1), outf = w.dim(0);
  if (x.dim(-1) != in)
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " incompatible with weight " + shape_str(w.shape()));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != outf))
    throw std::invalid_argument("linear: bias shape " + shape_str(bias.shape()) +
                                " incompatible with weight " + shape_str(w.shape()));
  Index rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  Tensor<S> out(out_shape);
  {
    ConstMatMap<S> xm(x.data(), rows, in);
    ConstMatMap<S> wm(w.data(), outf, in);
    MatMap<S> om(out.data(), rows, outf);
    om.noalias() = xm * wm.transpose();
    if (bias.defined()) om.rowwise() += ConstVecMap<S>(bias.data(), outf).transpose();
  }
  if (tracked(tape, {&x, &w, &bias})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, wi = w, bi = bias, o = out;
    tape->record([xi, wi, bi, o, rows, in, outf]() mutable {
      if (!o.has_grad()) return;
      ConstMatMap<S> gm(o.grad().data(), rows, outf);
      ConstMatMap<S> xm(xi.data(), rows, in);
      ConstMatMap<S> wm(wi.data(), outf, in);
      if (xi.requires_grad()) {
        MatMap<S> gx(xi.grad_ref().data(), rows, in);
        gx.noalias() += gm * wm;
      }
      if (wi.requires_grad()) {
        MatMap<S> gw(wi.grad_ref().data(), outf, in);
        gw.noalias() += gm.transpose() * xm;
      }
      if (bi.defined() && bi.requires_grad())
        VecMap<S>(bi.grad_ref().data(), outf) += gm.colwise().sum().transpose();
    });
  }
  return out;
}

template <typename S>
Tensor<S> linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w) {
  return linear(tape, x, w, Tensor<S>());
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out({1});
  out.data()[0] = x.value().sum();
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o]() mutable {
      if (!o.has_grad()) return;
      if (xi.requires_grad()) xi.grad_ref().array() += o.grad()(0);
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(Tape<S>* tape, const Tensor<S>& x) {
  return mul_scalar(tape, sum_all(tape, x), S(1) / static_cast<S>(x.size()));
}

template <typename S>
Tensor<S> row_sums(Tape<S>* tape, const Tensor<S>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("row_sums: rank-2 tensor required");
  Index r = x.dim(0), c = x.dim(1);
  Tensor<S> out({r});
  VecMap<S>(out.data(), r) = ConstMatMap<S>(x.data(), r, c).rowwise().sum();
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, r, c]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      MatMap<S> gx(xi.grad_ref().data(), r, c);
      gx.colwise() += ConstVecMap<S>(o.grad().data(), r);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizers
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(Tape<S>* tape, const Tensor<S>& x, int axis) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw std::invalid_argument("softmax: axis out of range for shape " + shape_str(x.shape()));
  Index n = x.shape()[static_cast<std::size_t>(axis)];
  Index inner = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  Index outer = x.size() / (n * inner);

  Tensor<S> out(x.shape());
  const S* src = x.data();
  S* dst = out.data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < n; ++j) mx = std::max(mx, src[base + j * inner]);
      S z = S(0);
      for (Index j = 0; j < n; ++j) {
        S e = std::exp(src[base + j * inner] - mx);
        dst[base + j * inner] = e;
        z += e;
      }
      for (Index j = 0; j < n; ++j) dst[base + j * inner] /= z;
    }

  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, outer, n, inner]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      auto& gx = xi.grad_ref();
      const auto& g = o.grad();
      const S* s = o.data();
      for (Index ou = 0; ou < outer; ++ou)
        for (Index i = 0; i < inner; ++i) {
          const Index base = ou * n * inner + i;
          S dot = S(0);
          for (Index j = 0; j < n; ++j) dot += g(base + j * inner) * s[base + j * inner];
          for (Index j = 0; j < n; ++j)
            gx(base + j * inner) += s[base + j * inner] * (g(base + j * inner) - dot);
        }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  out.value() = x.value().unaryExpr([](S v) {
    return v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
  });
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      const auto& s = o.value();
      xi.grad_ref() += o.grad().cwiseProduct(s.cwiseProduct(Vec<S>::Ones(s.size()) - s));
    });
  }
  return out;
}

/// tanh approximation of GELU.
template <typename S>
Tensor<S> gelu(Tape<S>* tape, const Tensor<S>& x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S a = static_cast<S>(0.044715);
  Tensor<S> out(x.shape());
  out.value() = x.value().unaryExpr(
      [c, a](S v) { return S(0.5) * v * (S(1) + std::tanh(c * (v + a * v * v * v))); });
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, c, a]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      auto& gx = xi.grad_ref();
      const auto& g = o.grad();
      const auto& v = xi.value();
      for (Index i = 0; i < v.size(); ++i) {
        S u = c * (v(i) + a * v(i) * v(i) * v(i));
        S t = std::tanh(u);
        S d = S(0.5) * (S(1) + t) +
              S(0.5) * v(i) * (S(1) - t * t) * c * (S(1) + S(3) * a * v(i) * v(i));
        gx(i) += g(i) * d;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> layer_norm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = static_cast<S>(1e-6)) {
  Index c = x.dim(-1);
  if (gamma.size() != c || beta.size() != c)
    throw std::invalid_argument("layer_norm: affine params must match last axis extent " +
                                std::to_string(c));
  Index rows = x.size() / c;
  Tensor<S> out(x.shape());
  Vec<S> inv_std(rows);
  {
    ConstMatMap<S> xm(x.data(), rows, c);
    MatMap<S> om(out.data(), rows, c);
    ConstVecMap<S> gm(gamma.data(), c);
    ConstVecMap<S> bm(beta.data(), c);
    for (Index r = 0; r < rows; ++r) {
      S mu = xm.row(r).mean();
      S var = (xm.row(r).array() - mu).square().mean();
      S is = S(1) / std::sqrt(var + eps);
      inv_std(r) = is;
      om.row(r).array() =
          ((xm.row(r).array() - mu) * is) * gm.transpose().array() + bm.transpose().array();
    }
  }
  if (tracked(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, gi = gamma, bi = beta, o = out;
    tape->record([xi, gi, bi, o, rows, c, inv_std]() mutable {
      if (!o.has_grad()) return;
      ConstMatMap<S> xm(xi.data(), rows, c);
      ConstMatMap<S> gm(o.grad().data(), rows, c);
      ConstVecMap<S> gamma_v(gi.data(), c);
      for (Index r = 0; r < rows; ++r) {
        S mu = xm.row(r).mean();
        Eigen::Array<S, Eigen::Dynamic, 1> xhat =
            (xm.row(r).transpose().array() - mu) * inv_std(r);
        Eigen::Array<S, Eigen::Dynamic, 1> go = gm.row(r).transpose().array();
        if (gi.requires_grad())
          VecMap<S>(gi.grad_ref().data(), c).array() += go * xhat;
        if (bi.requires_grad()) VecMap<S>(bi.grad_ref().data(), c).array() += go;
        if (xi.requires_grad()) {
          Eigen::Array<S, Eigen::Dynamic, 1> dxhat = go * gamma_v.array();
          S m1 = dxhat.mean();
          S m2 = (dxhat * xhat).mean();
          MatMap<S> gx(xi.grad_ref().data(), rows, c);
          gx.row(r).array() += (inv_std(r) * (dxhat - m1 - xhat * m2)).transpose();
        }
      }
    });
  }
  return out;
}

/// Trainable batch-norm state plus running statistics. Running buffers are
/// plain tensors that never require grad.
template <typename S>
struct BatchNormState {
  Tensor<S> gamma;
  Tensor<S> beta;
  Tensor<S> run_mean;
  Tensor<S> run_var;
};

/// Batch norm over the leading axes: channels are the last axis, every other
/// index is treated as a batch element. Training mode normalizes with batch
/// statistics and updates running stats (momentum 0.1, unbiased variance for
/// the running update, biased for normalization). Eval mode uses running
/// stats.
template <typename S>
Tensor<S> batch_norm(Tape<S>* tape, const Tensor<S>& x, BatchNormState<S>& st, bool training,
                     S momentum = static_cast<S>(0.1), S eps = static_cast<S>(1e-5)) {
  Index c = x.dim(-1);
  if (st.gamma.size() != c || st.beta.size() != c || st.run_mean.size() != c ||
      st.run_var.size() != c)
    throw std::invalid_argument("batch_norm: state extent does not match channel axis " +
                                std::to_string(c));
  Index rows = x.size() / c;
  Tensor<S> out(x.shape());
  Vec<S> mean(c), var(c);
  {
    ConstMatMap<S> xm(x.data(), rows, c);
    if (training) {
      mean = xm.colwise().mean().transpose();
      var = (xm.rowwise() - mean.transpose()).array().square().colwise().mean().matrix().transpose();
      S unbiased = rows > 1 ? static_cast<S>(rows) / static_cast<S>(rows - 1) : S(1);
      st.run_mean.value() = (S(1) - momentum) * st.run_mean.value() + momentum * mean;
      st.run_var.value() = (S(1) - momentum) * st.run_var.value() + momentum * (var * unbiased);
    } else {
      mean = st.run_mean.value();
      var = st.run_var.value();
    }
    MatMap<S> om(out.data(), rows, c);
    Vec<S> inv_std = (var.array() + eps).rsqrt().matrix();
    Vec<S> scale = inv_std.cwiseProduct(st.gamma.value());
    om = xm;
    om.rowwise() -= mean.transpose();
    om.array().rowwise() *= scale.transpose().array();
    om.rowwise() += st.beta.value().transpose();
  }
  if (tracked(tape, {&x, &st.gamma, &st.beta})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, gi = st.gamma, bi = st.beta, o = out;
    tape->record([xi, gi, bi, o, rows, c, mean, var, training, eps]() mutable {
      if (!o.has_grad()) return;
      ConstMatMap<S> xm(xi.data(), rows, c);
      ConstMatMap<S> gm(o.grad().data(), rows, c);
      Vec<S> inv_std = (var.array() + eps).rsqrt().matrix();
      Mat<S> xhat = xm;
      xhat.rowwise() -= mean.transpose();
      xhat.array().rowwise() *= inv_std.transpose().array();
      if (gi.requires_grad())
        VecMap<S>(gi.grad_ref().data(), c) +=
            (gm.array() * xhat.array()).colwise().sum().matrix().transpose();
      if (bi.requires_grad())
        VecMap<S>(bi.grad_ref().data(), c) += gm.colwise().sum().transpose();
      if (xi.requires_grad()) {
        MatMap<S> gx(xi.grad_ref().data(), rows, c);
        Mat<S> dxhat = gm;
        dxhat.array().rowwise() *= gi.value().transpose().array();
        if (training) {
          Vec<S> m1 = dxhat.colwise().mean().transpose();
          Vec<S> m2 = (dxhat.array() * xhat.array()).colwise().mean().matrix().transpose();
          Mat<S> adj = dxhat;
          adj.rowwise() -= m1.transpose();
          adj.array() -= xhat.array().rowwise() * m2.transpose().array();
          adj.array().rowwise() *= inv_std.transpose().array();
          gx += adj;
        } else {
          dxhat.array().rowwise() *= inv_std.transpose().array();
          gx += dxhat;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

namespace detail {
struct Lerp {
  Index i0, i1;
  double w0, w1;
};

/// align_corners=false sampling weights for a 2x upsample of extent n.
inline std::vector<Lerp> upsample2x_weights(Index n) {
  std::vector<Lerp> w(static_cast<std::size_t>(2 * n));
  for (Index o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    double clamped = std::min(std::max(src, 0.0), static_cast<double>(n - 1));
    Index i0 = static_cast<Index>(std::floor(clamped));
    Index i1 = std::min(i0 + 1, n - 1);
    double frac = clamped - static_cast<double>(i0);
    w[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - frac, frac};
  }
  return w;
}
}  // namespace detail

/// [C,h,w] -> [C,2h,2w] bilinear, align_corners=false. Constant inputs map to
/// the same constant.
template <typename S>
Tensor<S> bilinear_upsample2x(Tape<S>* tape, const Tensor<S>& x) {
  if (x.ndim() != 3) throw std::invalid_argument("bilinear_upsample2x: [C,h,w] input required");
  Index C = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto wy = detail::upsample2x_weights(h);
  auto wx = detail::upsample2x_weights(w);
  Tensor<S> out({C, 2 * h, 2 * w});
  const S* src = x.data();
  S* dst = out.data();
  for (Index ch = 0; ch < C; ++ch) {
    const S* plane = src + ch * h * w;
    S* oplane = dst + ch * 4 * h * w;
    for (Index oy = 0; oy < 2 * h; ++oy) {
      const auto& ly = wy[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < 2 * w; ++ox) {
        const auto& lx = wx[static_cast<std::size_t>(ox)];
        double v = ly.w0 * (lx.w0 * plane[ly.i0 * w + lx.i0] + lx.w1 * plane[ly.i0 * w + lx.i1]) +
                   ly.w1 * (lx.w0 * plane[ly.i1 * w + lx.i0] + lx.w1 * plane[ly.i1 * w + lx.i1]);
        oplane[oy * 2 * w + ox] = static_cast<S>(v);
      }
    }
  }
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out;
    tape->record([xi, o, C, h, w, wy, wx]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      auto& gx = xi.grad_ref();
      const auto& go = o.grad();
      for (Index ch = 0; ch < C; ++ch) {
        S* gplane = gx.data() + ch * h * w;
        const S* goplane = go.data() + ch * 4 * h * w;
        for (Index oy = 0; oy < 2 * h; ++oy) {
          const auto& ly = wy[static_cast<std::size_t>(oy)];
          for (Index ox = 0; ox < 2 * w; ++ox) {
            const auto& lx = wx[static_cast<std::size_t>(ox)];
            S g = goplane[oy * 2 * w + ox];
            gplane[ly.i0 * w + lx.i0] += static_cast<S>(ly.w0 * lx.w0) * g;
            gplane[ly.i0 * w + lx.i1] += static_cast<S>(ly.w0 * lx.w1) * g;
            gplane[ly.i1 * w + lx.i0] += static_cast<S>(ly.w1 * lx.w0) * g;
            gplane[ly.i1 * w + lx.i1] += static_cast<S>(ly.w1 * lx.w1) * g;
          }
        }
      }
    });
  }
  return out;
}

/// Pairwise rotation of the last axis by per-position angles given as
/// cos/sin tables of shape [T, dh/2]; x is [..., T, dh]. Norm-preserving;
/// rows whose table entries are (1, 0) pass through unchanged.
template <typename S>
Tensor<S> rope_rotate(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& cos_t,
                      const Tensor<S>& sin_t) {
  if (x.ndim() < 2) throw std::invalid_argument("rope_rotate: rank >= 2 required");
  Index dh = x.dim(-1), t = x.dim(-2);
  if (dh % 2 != 0)
    throw std::invalid_argument("rope_rotate: head dim " + std::to_string(dh) + " must be even");
  if (cos_t.ndim() != 2 || cos_t.dim(0) != t || cos_t.dim(1) != dh / 2 ||
      sin_t.shape() != cos_t.shape())
    throw std::invalid_argument("rope_rotate: tables must be [T, dh/2] for input " +
                                shape_str(x.shape()));
  Index batch = x.size() / (t * dh);
  Tensor<S> out(x.shape());
  const S* src = x.data();
  const S* cs = cos_t.data();
  const S* sn = sin_t.data();
  S* dst = out.data();
  for (Index b = 0; b < batch; ++b)
    for (Index r = 0; r < t; ++r) {
      const S* xr = src + (b * t + r) * dh;
      S* yr = dst + (b * t + r) * dh;
      const S* cr = cs + r * (dh / 2);
      const S* sr = sn + r * (dh / 2);
      for (Index i = 0; i < dh / 2; ++i) {
        S x0 = xr[2 * i], x1 = xr[2 * i + 1];
        yr[2 * i] = x0 * cr[i] - x1 * sr[i];
        yr[2 * i + 1] = x0 * sr[i] + x1 * cr[i];
      }
    }
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<S> xi = x, o = out, ci = cos_t, si = sin_t;
    tape->record([xi, o, ci, si, batch, t, dh]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      auto& gx = xi.grad_ref();
      const auto& go = o.grad();
      const S* cs = ci.data();
      const S* sn = si.data();
      for (Index b = 0; b < batch; ++b)
        for (Index r = 0; r < t; ++r) {
          const S* gr = go.data() + (b * t + r) * dh;
          S* gxr = gx.data() + (b * t + r) * dh;
          const S* cr = cs + r * (dh / 2);
          const S* sr = sn + r * (dh / 2);
          for (Index i = 0; i < dh / 2; ++i) {
            S g0 = gr[2 * i], g1 = gr[2 * i + 1];
            gxr[2 * i] += g0 * cr[i] + g1 * sr[i];
            gxr[2 * i + 1] += -g0 * sr[i] + g1 * cr[i];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss primitives
// ---------------------------------------------------------------------------

/// Elementwise binary cross-entropy on logits, numerically stable form.
template <typename S>
Tensor<S> bce_with_logits(Tape<S>* tape, const Tensor<S>& logits, const Tensor<S>& targets) {
  detail::require_same_shape(logits, targets, "bce_with_logits");
  Tensor<S> out(logits.shape());
  const S* x = logits.data();
  const S* t = targets.data();
  S* y = out.data();
  for (Index i = 0; i < out.size(); ++i)
    y[i] = std::max(x[i], S(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  if (tracked(tape, {&logits, &targets})) {
    out.set_requires_grad(true);
    Tensor<S> xi = logits, ti = targets, o = out;
    tape->record([xi, ti, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (xi.requires_grad()) {
        auto& gx = xi.grad_ref();
        const S* x = xi.data();
        const S* t = ti.data();
        for (Index i = 0; i < g.size(); ++i) {
          S s = x[i] >= S(0) ? S(1) / (S(1) + std::exp(-x[i]))
                             : std::exp(x[i]) / (S(1) + std::exp(x[i]));
          gx(i) += g(i) * (s - t[i]);
        }
      }
      if (ti.requires_grad()) {
        auto& gt = ti.grad_ref();
        const S* x = xi.data();
        for (Index i = 0; i < g.size(); ++i) gt(i) += g(i) * (-x[i]);
      }
    });
  }
  return out;
}

/// Class-weighted cross-entropy over rows of [R, C] logits with integer
/// targets; reduction is the weighted mean (sum of w[y_r] * nll_r divided by
/// sum of w[y_r]). Weights are constants.
template <typename S>
Tensor<S> weighted_cross_entropy(Tape<S>* tape, const Tensor<S>& logits,
                                 const std::vector<int>& targets, const std::vector<S>& weights) {
  if (logits.ndim() != 2) throw std::invalid_argument("weighted_cross_entropy: [R, C] required");
  Index r = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(targets.size()) != r)
    throw std::invalid_argument("weighted_cross_entropy: target count mismatch");
  if (static_cast<Index>(weights.size()) != c)
    throw std::invalid_argument("weighted_cross_entropy: weight count mismatch");
  for (int y : targets)
    if (y < 0 || y >= c) throw std::invalid_argument("weighted_cross_entropy: target out of range");

  Tensor<S> out({1});
  S total = S(0), wsum = S(0);
  {
    ConstMatMap<S> xm(logits.data(), r, c);
    for (Index i = 0; i < r; ++i) {
      S mx = xm.row(i).maxCoeff();
      S lse = std::log((xm.row(i).array() - mx).exp().sum()) + mx;
      S w = weights[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])];
      total += w * (lse - xm(i, targets[static_cast<std::size_t>(i)]));
      wsum += w;
    }
  }
  if (wsum <= S(0)) wsum = S(1);
  out.data()[0] = total / wsum;
  if (tracked(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor<S> xi = logits, o = out;
    tape->record([xi, o, targets, weights, r, c, wsum]() mutable {
      if (!o.has_grad()) return;
      if (!xi.requires_grad()) return;
      S g = o.grad()(0);
      ConstMatMap<S> xm(xi.data(), r, c);
      MatMap<S> gx(xi.grad_ref().data(), r, c);
      for (Index i = 0; i < r; ++i) {
        S mx = xm.row(i).maxCoeff();
        Eigen::Array<S, Eigen::Dynamic, 1> e = (xm.row(i).transpose().array() - mx).exp();
        Eigen::Array<S, Eigen::Dynamic, 1> p = e / e.sum();
        int y = targets[static_cast<std::size_t>(i)];
        S w = weights[static_cast<std::size_t>(y)];
        p(y) -= S(1);
        gx.row(i).array() += (g * w / wsum) * p.transpose();
      }
    });
  }
  return out;
}

}  // namespace pmt
