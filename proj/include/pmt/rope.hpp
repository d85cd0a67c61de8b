#pragma once

#include "pmt/tensor.hpp"

#include <cmath>
#include <vector>

namespace pmt {

/// Grid coordinate of one token; tokens without one (class, registers,
/// queries) get the identity rotation.
struct TokenPos {
  bool grid = false;
  Index row = 0;
  Index col = 0;

  static TokenPos none() { return {}; }
  static TokenPos at(Index r, Index c) { return {true, r, c}; }
};

/// Per-token cosine/sine factors for pairwise rotation of a head_dim-wide
/// vector: the first head_dim/4 pairs rotate by row-angle, the next
/// head_dim/4 by column-angle, frequencies base^(-4i/head_dim). Constants,
/// never trained.
template <typename S>
struct RopeTables {
  Tensor<S> cos_t;  // [T, head_dim/2]
  Tensor<S> sin_t;

  Index tokens() const { return cos_t.defined() ? cos_t.dim(0) : 0; }
};

template <typename S>
RopeTables<S> build_rope_tables(const std::vector<TokenPos>& pos, Index head_dim, double base) {
  if (head_dim % 4 != 0)
    throw std::invalid_argument("rope tables: head dim " + std::to_string(head_dim) +
                                " must be divisible by 4");
  const Index t = static_cast<Index>(pos.size());
  const Index pairs = head_dim / 2;
  const Index axis_pairs = head_dim / 4;
  RopeTables<S> out{Tensor<S>({t, pairs}), Tensor<S>({t, pairs})};
  std::vector<double> freq(static_cast<std::size_t>(axis_pairs));
  for (Index i = 0; i < axis_pairs; ++i)
    freq[static_cast<std::size_t>(i)] =
        std::pow(base, -4.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  for (Index r = 0; r < t; ++r) {
    S* cs = out.cos_t.data() + r * pairs;
    S* sn = out.sin_t.data() + r * pairs;
    if (!pos[static_cast<std::size_t>(r)].grid) {
      for (Index i = 0; i < pairs; ++i) {
        cs[i] = S(1);
        sn[i] = S(0);
      }
      continue;
    }
    double row = static_cast<double>(pos[static_cast<std::size_t>(r)].row);
    double col = static_cast<double>(pos[static_cast<std::size_t>(r)].col);
    for (Index i = 0; i < axis_pairs; ++i) {
      double a = row * freq[static_cast<std::size_t>(i)];
      cs[i] = static_cast<S>(std::cos(a));
      sn[i] = static_cast<S>(std::sin(a));
    }
    for (Index i = 0; i < axis_pairs; ++i) {
      double a = col * freq[static_cast<std::size_t>(i)];
      cs[axis_pairs + i] = static_cast<S>(std::cos(a));
      sn[axis_pairs + i] = static_cast<S>(std::sin(a));
    }
  }
  return out;
}

template <typename S>
RopeTables<S> identity_rope_tables(Index tokens, Index head_dim) {
  return build_rope_tables<S>(std::vector<TokenPos>(static_cast<std::size_t>(tokens)), head_dim,
                              2.0);
}

/// Token positions for a sequence of `lead` positionless tokens followed by
/// a row-major gh x gw grid.
inline std::vector<TokenPos> sequence_positions(Index lead, Index gh, Index gw) {
  std::vector<TokenPos> pos;
  pos.reserve(static_cast<std::size_t>(lead + gh * gw));
  for (Index i = 0; i < lead; ++i) pos.push_back(TokenPos::none());
  for (Index r = 0; r < gh; ++r)
    for (Index c = 0; c < gw; ++c) pos.push_back(TokenPos::at(r, c));
  return pos;
}

}  // namespace pmt
