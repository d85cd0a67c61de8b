#pragma once

#include "pmt/layers.hpp"

namespace pmt {

/// Query state carried across the frames of one video. Slot i of
/// prev_queries keeps track id track_ids[i] for the life of the video.
template <typename S>
struct TrackState {
  Tensor<S> prev_queries;  // [K, D]
  std::vector<std::int64_t> track_ids;
  Index frame_index = 0;

  bool empty() const { return !prev_queries.defined(); }
};

/// Frame-to-frame query fusion: project the previous frame's decoded queries
/// and add the learned queries. With a zero-initialized projection this is
/// exactly the learned queries, so a video model starts out frame-independent.
template <typename S>
Tensor<S> propagate_queries(Tape<S>* tape, const Tensor<S>& prev, const Tensor<S>& q_lrn,
                            const LinearLayer<S>& proj) {
  if (prev.ndim() != 2 || prev.shape() != q_lrn.shape())
    throw std::invalid_argument("query propagation: previous queries " +
                                shape_str(prev.shape()) + " do not match learned queries " +
                                shape_str(q_lrn.shape()));
  return add(tape, proj.apply(tape, prev), q_lrn);
}

}  // namespace pmt
