#pragma once

#include "pmt/config.hpp"
#include "pmt/layers.hpp"

#include <map>

namespace pmt {

template <typename S>
struct EncoderOut {
  /// Raw post-layer patch-token slices [N, D], keyed by 1-based layer index;
  /// the encoder's final LN has not been applied to these.
  std::map<Index, Tensor<S>> taps;
  /// Full sequence [1 + R + N, D] after the final LN.
  Tensor<S> final_seq;
};

/// Plain pre-norm ViT over [class, registers, patches] with 2-D rotary
/// positions on the patch tokens.
template <typename S>
struct Encoder {
  ModelConfig cfg;
  LinearLayer<S> patch_proj;  // [D, 3*p*p]
  Tensor<S> class_token;      // [1, D]
  Tensor<S> registers;        // [R, D]
  std::vector<ViTLayer<S>> layers;
  LayerNormParams<S> final_ln;
  RopeTables<S> rope;

  void init(const ModelConfig& c, Rng& rng) {
    cfg = c;
    patch_proj.init(rng, c.embed_dim, 3 * c.patch_size * c.patch_size);
    class_token = Tensor<S>({1, c.embed_dim});
    fill_normal(class_token, rng, 0.02);
    class_token.set_requires_grad(true);
    registers = Tensor<S>({c.num_register_tokens, c.embed_dim});
    fill_normal(registers, rng, 0.02);
    registers.set_requires_grad(true);
    layers.resize(static_cast<std::size_t>(c.num_layers));
    for (auto& l : layers) l.init(rng, c.embed_dim, c.ffn_expansion);
    final_ln.init(c.embed_dim);
    rope = build_rope_tables<S>(
        sequence_positions(1 + c.num_register_tokens, c.grid_h(), c.grid_w()), c.head_dim(),
        c.rope_base);
  }

  Index lead_tokens() const { return 1 + cfg.num_register_tokens; }
  Index seq_len() const { return lead_tokens() + cfg.num_patches(); }

  /// Sequence of [class, registers, patch tokens] for one [3, H, W] image.
  Tensor<S> embed(Tape<S>* tape, const Tensor<S>& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_height ||
        image.dim(2) != cfg.image_width)
      throw std::invalid_argument("encoder: image shape " + shape_str(image.shape()) +
                                  " does not match config " +
                                  std::to_string(cfg.image_height) + "x" +
                                  std::to_string(cfg.image_width));
    Tensor<S> patches = extract_patches(tape, image, cfg.patch_size);
    Tensor<S> tokens = patch_proj.apply(tape, patches);
    return concat_rows(tape, std::vector<Tensor<S>>{class_token, registers, tokens});
  }

  EncoderOut<S> forward(Tape<S>* tape, const Tensor<S>& image) const {
    EncoderOut<S> out;
    Tensor<S> seq = embed(tape, image);
    for (std::size_t li = 0; li < layers.size(); ++li) {
      seq = layers[li].forward(tape, seq, cfg.num_heads, &rope, nullptr);
      Index layer_no = static_cast<Index>(li) + 1;
      for (Index tl : cfg.tap_layers)
        if (tl == layer_no)
          out.taps[layer_no] = slice_rows(tape, seq, lead_tokens(), cfg.num_patches());
    }
    out.final_seq = final_ln.apply(tape, seq);
    return out;
  }

  /// Runs layers [first, last) only (1-based honest half-open over layer
  /// numbers: pass 0,L1 then L1,L for a split forward).
  Tensor<S> run_layers(Tape<S>* tape, const Tensor<S>& seq, Index first, Index last,
                       const RopeTables<S>& tables) const {
    Tensor<S> cur = seq;
    for (Index li = first; li < last; ++li)
      cur = layers[static_cast<std::size_t>(li)].forward(tape, cur, cfg.num_heads, &tables,
                                                         nullptr);
    return cur;
  }

  void collect(ParamList<S>& out, const std::string& prefix = "encoder") {
    patch_proj.collect(out, prefix + ".patch_proj");
    out.push_back({prefix + ".class_token", class_token});
    out.push_back({prefix + ".registers", registers});
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(out, prefix + ".layer" + std::to_string(i));
    final_ln.collect(out, prefix + ".final_ln");
  }

  void set_frozen(bool frozen) {
    bool v = !frozen;
    patch_proj.set_requires_grad(v);
    class_token.set_requires_grad(v);
    registers.set_requires_grad(v);
    for (auto& l : layers) l.set_requires_grad(v);
    final_ln.set_requires_grad(v);
  }

  std::uint64_t checksum() {
    ParamList<S> ps;
    collect(ps);
    return param_checksum(ps);
  }
};

}  // namespace pmt
