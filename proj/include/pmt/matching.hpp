#pragma once

#include "pmt/tensor.hpp"

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace pmt {

struct MatchResult {
  /// (query index, ground-truth segment index), one pair per segment,
  /// ordered by segment index.
  std::vector<std::pair<Index, Index>> pairs;
  double total_cost = 0.0;
};

/// Globally optimal assignment of every column (ground-truth segment) of a
/// Q x G cost matrix to a distinct row (query), G <= Q. Among cost ties the
/// lowest query index wins, segment by segment.
MatchResult hungarian_match(const Mat<double>& cost);

/// Optimal total assignment cost only (shortest-augmenting-path solver).
double assignment_cost(const Mat<double>& cost);

/// First-appearance persistent matching for clips: segments whose track id
/// is already in `persistent` keep their query; the rest are assigned by
/// hungarian_match over the still-free queries. `persistent` maps track id
/// to query index and is updated in place.
MatchResult video_match(const Mat<double>& cost, const std::vector<std::int64_t>& gt_track_ids,
                        std::map<std::int64_t, Index>& persistent);

}  // namespace pmt
