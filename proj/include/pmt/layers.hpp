#pragma once

#include "pmt/ops.hpp"
#include "pmt/params.hpp"
#include "pmt/rope.hpp"

#include <cmath>
#include <string>

namespace pmt {

template <typename S>
struct LinearLayer {
  Tensor<S> w;  // [out, in]
  Tensor<S> b;  // [out]

  void init(Rng& rng, Index out, Index in, double sd = 0.02) {
    w = Tensor<S>({out, in});
    fill_normal(w, rng, sd);
    b = Tensor<S>::zeros({out});
    set_requires_grad(true);
  }

  void init_zero(Index out, Index in) {
    w = Tensor<S>::zeros({out, in});
    b = Tensor<S>::zeros({out});
    set_requires_grad(true);
  }

  Tensor<S> apply(Tape<S>* tape, const Tensor<S>& x) const { return linear(tape, x, w, b); }

  void collect(ParamList<S>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }

  void set_requires_grad(bool v) {
    w.set_requires_grad(v);
    b.set_requires_grad(v);
  }
};

template <typename S>
struct LayerNormParams {
  Tensor<S> gamma;
  Tensor<S> beta;

  void init(Index dim) {
    gamma = Tensor<S>::full({dim}, S(1));
    beta = Tensor<S>::zeros({dim});
    set_requires_grad(true);
  }

  Tensor<S> apply(Tape<S>* tape, const Tensor<S>& x) const {
    return layer_norm(tape, x, gamma, beta);
  }

  void collect(ParamList<S>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }

  void set_requires_grad(bool v) {
    gamma.set_requires_grad(v);
    beta.set_requires_grad(v);
  }
};

template <typename S>
struct AttentionParams {
  LinearLayer<S> q, k, v, o;

  void init(Rng& rng, Index dim) {
    q.init(rng, dim, dim);
    k.init(rng, dim, dim);
    v.init(rng, dim, dim);
    o.init(rng, dim, dim);
  }

  void collect(ParamList<S>& out, const std::string& prefix) {
    q.collect(out, prefix + ".q");
    k.collect(out, prefix + ".k");
    v.collect(out, prefix + ".v");
    o.collect(out, prefix + ".o");
  }

  void set_requires_grad(bool val) {
    q.set_requires_grad(val);
    k.set_requires_grad(val);
    v.set_requires_grad(val);
    o.set_requires_grad(val);
  }
};

/// Multi-head self-attention over a [T, D] sequence. `rope` (optional)
/// rotates queries and keys per token before the dot product; `bias`
/// (optional, [T, T], constant) is added to every head's logits.
template <typename S>
Tensor<S> multihead_attention(Tape<S>* tape, const Tensor<S>& x, const AttentionParams<S>& p,
                              Index heads, const RopeTables<S>* rope, const Tensor<S>* bias) {
  const Index t = x.dim(0), d = x.dim(1);
  if (d % heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(d) +
                                " not divisible by heads");
  const Index dh = d / heads;
  if (rope && rope->tokens() != t)
    throw std::invalid_argument("attention: rope table rows " + std::to_string(rope->tokens()) +
                                " do not match sequence length " + std::to_string(t));

  auto split = [&](const Tensor<S>& m) {
    // [T, D] -> [heads, T, dh]
    return permute(tape, reshape(tape, m, {t, heads, dh}), {1, 0, 2});
  };

  Tensor<S> q = split(p.q.apply(tape, x));
  Tensor<S> k = split(p.k.apply(tape, x));
  Tensor<S> v = split(p.v.apply(tape, x));

  if (rope) {
    q = rope_rotate(tape, q, rope->cos_t, rope->sin_t);
    k = rope_rotate(tape, k, rope->cos_t, rope->sin_t);
  }

  Tensor<S> scores = matmul(tape, q, permute(tape, k, {0, 2, 1}));
  scores = mul_scalar(tape, scores, static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
  if (bias) scores = add(tape, scores, *bias);

  Tensor<S> attn = softmax(tape, scores, -1);
  Tensor<S> ctx = matmul(tape, attn, v);                       // [heads, T, dh]
  Tensor<S> merged = reshape(tape, permute(tape, ctx, {1, 0, 2}), {t, d});
  return p.o.apply(tape, merged);
}

/// Pre-norm Transformer block: x + MHSA(Norm(x)), then + FFN(Norm(.)).
template <typename S>
struct ViTLayer {
  LayerNormParams<S> ln1, ln2;
  AttentionParams<S> attn;
  LinearLayer<S> fc1, fc2;

  void init(Rng& rng, Index dim, Index expansion) {
    ln1.init(dim);
    attn.init(rng, dim);
    ln2.init(dim);
    fc1.init(rng, dim * expansion, dim);
    fc2.init(rng, dim, dim * expansion);
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, Index heads, const RopeTables<S>* rope,
                    const Tensor<S>* bias) const {
    Tensor<S> h =
        add(tape, x, multihead_attention(tape, ln1.apply(tape, x), attn, heads, rope, bias));
    Tensor<S> f = fc2.apply(tape, gelu(tape, fc1.apply(tape, ln2.apply(tape, h))));
    return add(tape, h, f);
  }

  void collect(ParamList<S>& out, const std::string& prefix) {
    ln1.collect(out, prefix + ".ln1");
    attn.collect(out, prefix + ".attn");
    ln2.collect(out, prefix + ".ln2");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  void set_requires_grad(bool v) {
    ln1.set_requires_grad(v);
    attn.set_requires_grad(v);
    ln2.set_requires_grad(v);
    fc1.set_requires_grad(v);
    fc2.set_requires_grad(v);
  }
};

}  // namespace pmt
