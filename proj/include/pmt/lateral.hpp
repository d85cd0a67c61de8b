#pragma once

#include "pmt/config.hpp"
#include "pmt/layers.hpp"

#include <map>

namespace pmt {

/// One branch per encoder tap: trainable BatchNorm over the token axis, then
/// a residual two-layer MLP whose second layer starts at zero, so a freshly
/// initialized branch reduces to BN alone.
template <typename S>
struct LateralBranch {
  BatchNormState<S> bn;
  LinearLayer<S> fc1, fc2;

  void init(Rng& rng, Index dim) {
    bn.gamma = Tensor<S>::full({dim}, S(1));
    bn.beta = Tensor<S>::zeros({dim});
    bn.run_mean = Tensor<S>::zeros({dim});
    bn.run_var = Tensor<S>::full({dim}, S(1));
    bn.gamma.set_requires_grad(true);
    bn.beta.set_requires_grad(true);
    fc1.init(rng, dim, dim);
    fc2.init_zero(dim, dim);
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, bool training) {
    Tensor<S> h = batch_norm(tape, x, bn, training);
    return add(tape, h, fc2.apply(tape, gelu(tape, fc1.apply(tape, h))));
  }

  void collect(ParamList<S>& out, const std::string& prefix) {
    out.push_back({prefix + ".bn.gamma", bn.gamma});
    out.push_back({prefix + ".bn.beta", bn.beta});
    out.push_back({prefix + ".bn.run_mean", bn.run_mean});
    out.push_back({prefix + ".bn.run_var", bn.run_var});
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  void set_requires_grad(bool v) {
    bn.gamma.set_requires_grad(v);
    bn.beta.set_requires_grad(v);
    fc1.set_requires_grad(v);
    fc2.set_requires_grad(v);
  }
};

/// Fuses patch tokens taken from several encoder depths into one multi-depth
/// representation: every tap goes through the encoder's own final LN (shared,
/// frozen along with the encoder), its branch, and the results are summed.
template <typename S>
struct LateralFusion {
  std::vector<Index> tap_layers;
  std::vector<LateralBranch<S>> branches;

  void init(const ModelConfig& cfg, Rng& rng) {
    tap_layers = cfg.tap_layers;
    branches.assign(tap_layers.size(), {});
    for (auto& b : branches) b.init(rng, cfg.embed_dim);
  }

  Tensor<S> fuse(Tape<S>* tape, const std::map<Index, Tensor<S>>& taps,
                 const LayerNormParams<S>& encoder_final_ln, bool training) {
    if (taps.size() != tap_layers.size())
      throw std::invalid_argument("lateral fuse: got " + std::to_string(taps.size()) +
                                  " taps, config lists " + std::to_string(tap_layers.size()));
    Tensor<S> out;
    for (std::size_t i = 0; i < tap_layers.size(); ++i) {
      auto it = taps.find(tap_layers[i]);
      if (it == taps.end())
        throw std::invalid_argument("lateral fuse: missing tap for layer " +
                                    std::to_string(tap_layers[i]));
      Tensor<S> h = encoder_final_ln.apply(tape, it->second);
      Tensor<S> b = branches[i].forward(tape, h, training);
      out = out.defined() ? add(tape, out, b) : b;
    }
    return out;
  }

  void collect(ParamList<S>& out, const std::string& prefix = "lateral") {
    for (std::size_t i = 0; i < branches.size(); ++i)
      branches[i].collect(out, prefix + ".branch" + std::to_string(i));
  }

  void set_requires_grad(bool v) {
    for (auto& b : branches) b.set_requires_grad(v);
  }
};

}  // namespace pmt
