#pragma once

#include "pmt/container.hpp"
#include "pmt/decoder.hpp"
#include "pmt/lateral.hpp"
#include "pmt/params.hpp"
#include "pmt/temporal.hpp"

#include <stdexcept>
#include <string>
#include <utility>

namespace pmt {

/// The full model and its three ablation variants. The container codes are
/// stable checkpoint identifiers.
enum class ModelVariant : std::uint32_t {
  Pmt = 0,          // lateral fusion + rotary decoder
  PmtNoLateral = 1, // decoder reads the final encoder layer only
  PmtNoRope = 2,    // lateral fusion, position-free decoder
  EomtFrozen = 3,   // query injection into the frozen encoder
};

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "pmt") return ModelVariant::Pmt;
  if (s == "pmt-nolateral") return ModelVariant::PmtNoLateral;
  if (s == "pmt-norope") return ModelVariant::PmtNoRope;
  if (s == "eomt-frozen") return ModelVariant::EomtFrozen;
  throw std::invalid_argument("unknown model variant: " + s);
}

inline std::string variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::Pmt: return "pmt";
    case ModelVariant::PmtNoLateral: return "pmt-nolateral";
    case ModelVariant::PmtNoRope: return "pmt-norope";
    case ModelVariant::EomtFrozen: return "eomt-frozen";
  }
  throw std::invalid_argument("unknown model variant code");
}

/// Frozen-encoder activations for one image, computed once and reused
/// across training steps.
template <typename S>
struct EncoderCache {
  std::map<Index, Tensor<S>> taps;  // raw patch-token slices per tap layer
  Tensor<S> final_seq;              // [1+R+N, D] after the final LN
  Tensor<S> prefix_seq;             // query-injection path: sequence after the split
};

template <typename S>
struct PmtModel {
  ModelConfig cfg;
  ModelVariant variant = ModelVariant::Pmt;
  Encoder<S> encoder;
  LateralFusion<S> lateral;      // lateral variants only
  Decoder<S> decoder;            // all but the query-injection baseline
  LinearLayer<S> temporal_proj;  // zero-init frame-to-frame query projection
  EomtBaseline<S> eomt;          // query-injection baseline only

  bool has_lateral() const {
    return variant == ModelVariant::Pmt || variant == ModelVariant::PmtNoRope;
  }
  bool is_eomt() const { return variant == ModelVariant::EomtFrozen; }

  void init(const ModelConfig& c, ModelVariant v, Rng& rng) {
    cfg = c;
    variant = v;
    encoder.init(c, rng);
    if (is_eomt()) {
      eomt.init(c, rng);
    } else {
      if (has_lateral()) lateral.init(c, rng);
      decoder.init(c, rng, variant != ModelVariant::PmtNoRope);
      temporal_proj.init_zero(c.embed_dim, c.embed_dim);
    }
    if (cfg.freeze_encoder) encoder.set_frozen(true);
  }

  /// Encoder pass for one [3, H, W] image. Pass a null tape to treat the
  /// result as constants (the frozen regime).
  EncoderCache<S> encode(Tape<S>* tape, const Tensor<S>& image) const {
    EncoderCache<S> out;
    if (is_eomt()) {
      Tensor<S> seq = encoder.embed(tape, image);
      out.prefix_seq = encoder.run_layers(tape, seq, 0, cfg.eomt_l1, encoder.rope);
    } else {
      EncoderOut<S> eo = encoder.forward(tape, image);
      out.taps = std::move(eo.taps);
      out.final_seq = eo.final_seq;
    }
    return out;
  }

  /// Decoder token input: the lateral fusion of the cached taps, or the
  /// post-norm final patch tokens when the lateral branch is ablated.
  Tensor<S> fused_tokens(Tape<S>* tape, const EncoderCache<S>& cache, bool training) {
    if (has_lateral()) return lateral.fuse(tape, cache.taps, encoder.final_ln, training);
    return slice_rows(tape, cache.final_seq, encoder.lead_tokens(), cfg.num_patches());
  }

  /// Query input for frame t of a clip: the learned queries at t=0, the
  /// propagation fusion afterwards.
  Tensor<S> frame_queries(Tape<S>* tape, const TrackState<S>& state) const {
    if (state.empty()) return decoder.learned_queries;
    return propagate_queries(tape, state.prev_queries, decoder.learned_queries, temporal_proj);
  }

  DecoderOut<S> forward_cached(Tape<S>* tape, const EncoderCache<S>& cache,
                               const Tensor<S>& queries_in, bool training, Index step,
                               Index total_steps, std::uint64_t seed) {
    if (is_eomt()) return eomt.forward_cached(tape, encoder, cache.prefix_seq);
    Tensor<S> fused = fused_tokens(tape, cache, training);
    Tensor<S> extras = slice_rows(tape, cache.final_seq, 0, encoder.lead_tokens());
    return decoder.forward(tape, fused, queries_in, extras, training, step, total_steps, seed);
  }

  DecoderOut<S> forward_image(Tape<S>* tape, const Tensor<S>& image, bool training, Index step,
                              Index total_steps, std::uint64_t seed) {
    EncoderCache<S> cache = encode(cfg.freeze_encoder ? nullptr : tape, image);
    Tensor<S> q = is_eomt() ? Tensor<S>() : decoder.learned_queries;
    return forward_cached(tape, cache, q, training, step, total_steps, seed);
  }

  /// Fresh per-video state; slot i carries track id i for the whole clip.
  TrackState<S> start_track() const {
    TrackState<S> st;
    st.track_ids.resize(static_cast<std::size_t>(cfg.num_queries));
    for (Index i = 0; i < cfg.num_queries; ++i)
      st.track_ids[static_cast<std::size_t>(i)] = i;
    return st;
  }

  void advance(TrackState<S>& state, const DecoderOut<S>& out) const {
    state.prev_queries = out.queries;
    state.frame_index += 1;
  }

  void collect(ParamList<S>& out) {
    encoder.collect(out);
    if (is_eomt()) {
      eomt.collect(out);
      return;
    }
    if (has_lateral()) lateral.collect(out);
    decoder.collect(out);
    temporal_proj.collect(out, "temporal.proj");
  }

  ParamList<S> trainable() {
    ParamList<S> all, out;
    collect(all);
    for (auto& np : all)
      if (np.tensor.requires_grad()) out.push_back(np);
    return out;
  }

  void save_model(Container& c) {
    c.put_u32_scalar("model.variant", static_cast<std::uint32_t>(variant));
    ParamList<S> ps;
    collect(ps);
    save_params(c, ps);
  }

  void load_model(const Container& c) {
    std::uint32_t v = c.get_u32_scalar("model.variant");
    if (v != static_cast<std::uint32_t>(variant))
      throw std::runtime_error("checkpoint holds variant " +
                               variant_name(static_cast<ModelVariant>(v)) +
                               ", model is " + variant_name(variant));
    ParamList<S> ps;
    collect(ps);
    load_params(c, ps);
  }

  std::uint64_t checksum() {
    ParamList<S> ps;
    collect(ps);
    return param_checksum(ps);
  }
};

}  // namespace pmt
