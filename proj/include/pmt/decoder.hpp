#pragma once

#include "pmt/encoder.hpp"
#include "pmt/lateral.hpp"

#include <limits>

namespace pmt {

template <typename S>
struct Predictions {
  Tensor<S> class_logits;  // [K, C+1]; column C is the no-object class
  Tensor<S> mask_logits;   // [K, H/4, W/4]
};

/// Per-layer masking probability: the annealing window
/// [start_frac*T, end_frac*T] is split into one equal sub-window per decoder
/// layer, and layer l decays linearly from 1 to 0 inside sub-window l.
inline double anneal_probability(Index layer, Index step, Index total_steps, Index num_layers,
                                 double start_frac, double end_frac) {
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("anneal: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + "]");
  double t = static_cast<double>(step);
  double begin = start_frac * static_cast<double>(total_steps);
  double width = (end_frac - start_frac) * static_cast<double>(total_steps) /
                 static_cast<double>(num_layers);
  double lo = begin + static_cast<double>(layer) * width;
  if (t <= lo) return 1.0;
  if (t >= lo + width) return 0.0;
  return 1.0 - (t - lo) / width;
}

/// Additive attention bias for a joint [queries, extras, patches] sequence.
/// Query rows get -inf on patch columns whose grid mask logit is at or below
/// zero; a query whose mask is empty at that threshold keeps a zero row.
/// Every other row, and every non-patch column, is zero: only query-to-patch
/// attention is restricted.
template <typename S>
Tensor<S> masked_attention_bias(const Tensor<S>& grid_logits, Index lead, Index total) {
  const Index k = grid_logits.dim(0);
  const Index n = grid_logits.dim(1);
  if (k + lead + n != total)
    throw std::invalid_argument("mask bias: " + std::to_string(k) + " queries + " +
                                std::to_string(lead) + " extras + " + std::to_string(n) +
                                " patches do not fill " + std::to_string(total) + " tokens");
  Tensor<S> bias = Tensor<S>::zeros({total, total});
  const S ninf = -std::numeric_limits<S>::infinity();
  auto b = bias.as2d();
  for (Index q = 0; q < k; ++q) {
    bool any = false;
    for (Index j = 0; j < n; ++j)
      if (grid_logits.as2d()(q, j) > S(0)) {
        any = true;
        break;
      }
    if (!any) continue;
    for (Index j = 0; j < n; ++j)
      if (grid_logits.as2d()(q, j) <= S(0)) b(q, k + lead + j) = ninf;
  }
  return bias;
}

/// Class and mask prediction heads shared by the decoder and the
/// query-injection baseline. The mask path runs a three-layer MLP per query,
/// lifts the patch grid to quarter resolution with pointwise-projection +
/// bilinear-2x stages, and takes per-query dot products.
template <typename S>
struct MaskHead {
  Index dim = 0;
  Index grid_h = 0, grid_w = 0;
  LinearLayer<S> class_head;
  LinearLayer<S> mlp1, mlp2, mlp3;
  std::vector<LinearLayer<S>> up_projs;

  void init(const ModelConfig& cfg, Rng& rng) {
    dim = cfg.embed_dim;
    grid_h = cfg.grid_h();
    grid_w = cfg.grid_w();
    class_head.init(rng, cfg.num_classes + 1, dim);
    mlp1.init(rng, dim, dim);
    mlp2.init(rng, dim, dim);
    mlp3.init(rng, dim, dim);
    Index scale = cfg.patch_size / 4;
    up_projs.clear();
    while (scale > 1) {
      if (scale % 2 != 0)
        throw std::invalid_argument("mask head: patch size " + std::to_string(cfg.patch_size) +
                                    " is not 4 times a power of two");
      up_projs.emplace_back();
      up_projs.back().init(rng, dim, dim);
      scale /= 2;
    }
  }

  /// Mask logits against the raw token grid, used for attention masking.
  Tensor<S> grid_logits(Tape<S>* tape, const Tensor<S>& qn, const Tensor<S>& xn) const {
    Tensor<S> m = query_mlp(tape, qn);
    return matmul(tape, m, transpose2d(tape, xn));
  }

  Predictions<S> predict(Tape<S>* tape, const Tensor<S>& qn, const Tensor<S>& xn) const {
    Predictions<S> out;
    out.class_logits = class_head.apply(tape, qn);
    Tensor<S> m = query_mlp(tape, qn);
    Index h = grid_h, w = grid_w;
    Tensor<S> up = xn;
    for (const auto& proj : up_projs) {
      up = proj.apply(tape, up);
      up = permute(tape, reshape(tape, up, {h, w, dim}), {2, 0, 1});
      up = bilinear_upsample2x(tape, up);
      h *= 2;
      w *= 2;
      up = reshape(tape, permute(tape, up, {1, 2, 0}), {h * w, dim});
    }
    Tensor<S> logits = matmul(tape, m, transpose2d(tape, up));
    out.mask_logits = reshape(tape, logits, {qn.dim(0), h, w});
    return out;
  }

  void collect(ParamList<S>& out, const std::string& prefix) {
    class_head.collect(out, prefix + ".class");
    mlp1.collect(out, prefix + ".mlp1");
    mlp2.collect(out, prefix + ".mlp2");
    mlp3.collect(out, prefix + ".mlp3");
    for (std::size_t i = 0; i < up_projs.size(); ++i)
      up_projs[i].collect(out, prefix + ".up" + std::to_string(i));
  }

  void set_requires_grad(bool v) {
    class_head.set_requires_grad(v);
    mlp1.set_requires_grad(v);
    mlp2.set_requires_grad(v);
    mlp3.set_requires_grad(v);
    for (auto& p : up_projs) p.set_requires_grad(v);
  }

 private:
  Tensor<S> query_mlp(Tape<S>* tape, const Tensor<S>& qn) const {
    Tensor<S> m = gelu(tape, mlp1.apply(tape, qn));
    m = gelu(tape, mlp2.apply(tape, m));
    return mlp3.apply(tape, m);
  }
};

template <typename S>
struct DecoderOut {
  Tensor<S> queries;  // [K, D] final decoded queries, pre output-norm
  Tensor<S> patches;  // [N, D] final patch tokens, pre output-norm
  /// Training: one prediction set per layer input plus the final one
  /// (deep supervision). Eval: the final set only.
  std::vector<Predictions<S>> preds;
};

/// Plain mask decoder: standard pre-norm Transformer layers over the joint
/// [queries, class, registers, patches] sequence, rotary positions on patch
/// tokens only, and annealed attention masking during training.
template <typename S>
struct Decoder {
  ModelConfig cfg;
  Tensor<S> learned_queries;  // [K, D]
  std::vector<ViTLayer<S>> layers;
  LayerNormParams<S> out_ln;
  MaskHead<S> head;
  RopeTables<S> rope;

  void init(const ModelConfig& c, Rng& rng, bool use_rope = true) {
    cfg = c;
    learned_queries = Tensor<S>({c.num_queries, c.embed_dim});
    fill_normal(learned_queries, rng, 0.02);
    learned_queries.set_requires_grad(true);
    layers.resize(static_cast<std::size_t>(c.decoder_layers));
    for (auto& l : layers) l.init(rng, c.embed_dim, c.decoder_ffn_expansion);
    out_ln.init(c.embed_dim);
    head.init(c, rng);
    Index lead = c.num_queries + 1 + c.num_register_tokens;
    if (use_rope)
      rope = build_rope_tables<S>(sequence_positions(lead, c.grid_h(), c.grid_w()),
                                  c.head_dim(), c.rope_base);
    else
      rope = identity_rope_tables<S>(lead + c.num_patches(), c.head_dim());
  }

  DecoderOut<S> forward(Tape<S>* tape, const Tensor<S>& fused, const Tensor<S>& queries_in,
                        const Tensor<S>& extras, bool training, Index step, Index total_steps,
                        std::uint64_t seed) const {
    const Index k = cfg.num_queries;
    const Index n = cfg.num_patches();
    const Index lead = 1 + cfg.num_register_tokens;
    if (fused.ndim() != 2 || fused.dim(0) != n || fused.dim(1) != cfg.embed_dim)
      throw std::invalid_argument("decoder: fused tokens " + shape_str(fused.shape()) +
                                  " do not match config");
    if (queries_in.ndim() != 2 || queries_in.dim(0) != k || queries_in.dim(1) != cfg.embed_dim)
      throw std::invalid_argument("decoder: queries " + shape_str(queries_in.shape()) +
                                  " do not match config");
    if (extras.ndim() != 2 || extras.dim(0) != lead || extras.dim(1) != cfg.embed_dim)
      throw std::invalid_argument("decoder: extras " + shape_str(extras.shape()) +
                                  " must be the class and register tokens");

    Tensor<S> seq = concat_rows(tape, std::vector<Tensor<S>>{queries_in, extras, fused});
    DecoderOut<S> out;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      Tensor<S> bias;
      if (training) {
        Tensor<S> qn = out_ln.apply(tape, slice_rows(tape, seq, 0, k));
        Tensor<S> xn = out_ln.apply(tape, slice_rows(tape, seq, k + lead, n));
        out.preds.push_back(head.predict(tape, qn, xn));
        double p = anneal_probability(static_cast<Index>(li), step, total_steps,
                                      cfg.decoder_layers, cfg.anneal_start_frac,
                                      cfg.anneal_end_frac);
        if (hash_bernoulli(seed, static_cast<std::uint64_t>(step), li, p)) {
          Tensor<S> grid = head.grid_logits(nullptr, qn, xn);
          bias = masked_attention_bias(grid, lead, seq.dim(0));
        }
      }
      seq = layers[li].forward(tape, seq, cfg.num_heads, &rope, bias.defined() ? &bias : nullptr);
    }
    Tensor<S> qn = out_ln.apply(tape, slice_rows(tape, seq, 0, k));
    Tensor<S> xn = out_ln.apply(tape, slice_rows(tape, seq, k + lead, n));
    out.preds.push_back(head.predict(tape, qn, xn));
    out.queries = slice_rows(tape, seq, 0, k);
    out.patches = slice_rows(tape, seq, k + lead, n);
    return out;
  }

  void collect(ParamList<S>& out, const std::string& prefix = "decoder") {
    out.push_back({prefix + ".queries", learned_queries});
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(out, prefix + ".layer" + std::to_string(i));
    out_ln.collect(out, prefix + ".out_ln");
    head.collect(out, prefix + ".head");
  }
};

/// Query-injection baseline: learned queries are concatenated into the frozen
/// encoder after its first split point and decoded by the remaining frozen
/// layers. Only the queries and the prediction head train. No attention
/// masking, no deep supervision.
template <typename S>
struct EomtBaseline {
  ModelConfig cfg;
  Tensor<S> learned_queries;
  MaskHead<S> head;
  RopeTables<S> rope;

  void init(const ModelConfig& c, Rng& rng) {
    cfg = c;
    learned_queries = Tensor<S>({c.num_queries, c.embed_dim});
    fill_normal(learned_queries, rng, 0.02);
    learned_queries.set_requires_grad(true);
    head.init(c, rng);
    Index lead = c.num_queries + 1 + c.num_register_tokens;
    rope = build_rope_tables<S>(sequence_positions(lead, c.grid_h(), c.grid_w()), c.head_dim(),
                                c.rope_base);
  }

  DecoderOut<S> forward(Tape<S>* tape, const Encoder<S>& enc, const Tensor<S>& image) const {
    Tensor<S> seq = enc.embed(tape, image);
    seq = enc.run_layers(tape, seq, 0, cfg.eomt_l1, enc.rope);
    return forward_cached(tape, enc, seq);
  }

  /// Decodes from a precomputed sequence after the first eomt_l1 frozen
  /// layers, so that part can run off-tape and be reused across steps.
  DecoderOut<S> forward_cached(Tape<S>* tape, const Encoder<S>& enc,
                               const Tensor<S>& prefix_seq) const {
    const Index k = cfg.num_queries;
    const Index lead = 1 + cfg.num_register_tokens;
    const Index n = cfg.num_patches();
    Tensor<S> joint = concat_rows(tape, learned_queries, prefix_seq);
    joint = enc.run_layers(tape, joint, cfg.eomt_l1, cfg.num_layers, rope);
    Tensor<S> normed = enc.final_ln.apply(tape, joint);

    DecoderOut<S> out;
    out.queries = slice_rows(tape, joint, 0, k);
    out.patches = slice_rows(tape, joint, k + lead, n);
    Tensor<S> qn = slice_rows(tape, normed, 0, k);
    Tensor<S> xn = slice_rows(tape, normed, k + lead, n);
    out.preds.push_back(head.predict(tape, qn, xn));
    return out;
  }

  void collect(ParamList<S>& out, const std::string& prefix = "eomt") {
    out.push_back({prefix + ".queries", learned_queries});
    head.collect(out, prefix + ".head");
  }
};

}  // namespace pmt
