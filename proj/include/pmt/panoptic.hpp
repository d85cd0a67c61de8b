#pragma once

#include "pmt/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pmt {

struct SegmentInfo {
  std::int32_t id = 0;  // nonzero raster id
  Index class_id = 0;
  bool is_thing = true;
};

/// Pixel-accurate segmentation of one frame: a raster of segment ids
/// (0 = void) plus the segment table.
struct PanopticMap {
  Index h = 0, w = 0;
  std::vector<std::int32_t> ids;  // row-major h*w
  std::vector<SegmentInfo> segments;

  void init(Index hh, Index ww) {
    h = hh;
    w = ww;
    ids.assign(static_cast<std::size_t>(h * w), 0);
    segments.clear();
  }

  std::int32_t id(Index r, Index c) const { return ids[static_cast<std::size_t>(r * w + c)]; }
  std::int32_t& id(Index r, Index c) { return ids[static_cast<std::size_t>(r * w + c)]; }

  const SegmentInfo* find(std::int32_t seg_id) const {
    for (const auto& s : segments)
      if (s.id == seg_id) return &s;
    return nullptr;
  }

  Index area(std::int32_t seg_id) const {
    Index n = 0;
    for (std::int32_t v : ids)
      if (v == seg_id) ++n;
    return n;
  }

  /// Every nonzero raster id must appear exactly once in the segment table,
  /// and stuff classes may have at most one segment.
  void validate() const {
    std::vector<std::int32_t> seen;
    for (const auto& s : segments) {
      if (s.id == 0) throw std::invalid_argument("panoptic map: segment id 0 is reserved");
      for (std::int32_t v : seen)
        if (v == s.id)
          throw std::invalid_argument("panoptic map: duplicate segment id " +
                                      std::to_string(s.id));
      seen.push_back(s.id);
    }
    for (std::size_t a = 0; a < segments.size(); ++a)
      for (std::size_t b = a + 1; b < segments.size(); ++b)
        if (!segments[a].is_thing && !segments[b].is_thing &&
            segments[a].class_id == segments[b].class_id)
          throw std::invalid_argument("panoptic map: stuff class " +
                                      std::to_string(segments[a].class_id) +
                                      " has more than one segment");
    for (std::int32_t v : ids) {
      if (v == 0) continue;
      if (!find(v))
        throw std::invalid_argument("panoptic map: raster id " + std::to_string(v) +
                                    " missing from the segment table");
    }
  }
};

/// Binary mask of one segment sampled at (sh, sw) by block-center lookup;
/// the raster extent must be an integer multiple of the target extent.
template <typename S>
Tensor<S> segment_mask(const PanopticMap& pm, std::int32_t seg_id, Index sh, Index sw) {
  if (sh <= 0 || sw <= 0 || pm.h % sh != 0 || pm.w % sw != 0)
    throw std::invalid_argument("segment mask: " + std::to_string(pm.h) + "x" +
                                std::to_string(pm.w) + " raster cannot be sampled at " +
                                std::to_string(sh) + "x" + std::to_string(sw));
  const Index fr = pm.h / sh, fc = pm.w / sw;
  Tensor<S> m = Tensor<S>::zeros({sh, sw});
  for (Index r = 0; r < sh; ++r)
    for (Index c = 0; c < sw; ++c)
      if (pm.id(r * fr + fr / 2, c * fc + fc / 2) == seg_id) m.at({r, c}) = S(1);
  return m;
}

}  // namespace pmt
