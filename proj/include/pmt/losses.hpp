#pragma once

#include "pmt/decoder.hpp"
#include "pmt/matching.hpp"
#include "pmt/panoptic.hpp"

namespace pmt {

template <typename S>
struct GtSegment {
  Index class_id = 0;
  std::int64_t track_id = -1;
  Tensor<S> mask;  // [mh, mw] binary
};

/// Ground-truth segments rasterized at mask resolution. Segments that vanish
/// at that resolution are dropped: they cannot supervise a mask.
template <typename S>
std::vector<GtSegment<S>> gt_segments_at(const PanopticMap& pm, Index mh, Index mw) {
  std::vector<GtSegment<S>> out;
  for (const auto& seg : pm.segments) {
    GtSegment<S> g;
    g.class_id = seg.class_id;
    g.track_id = seg.id;
    g.mask = segment_mask<S>(pm, seg.id, mh, mw);
    if (g.mask.as2d().sum() > S(0)) out.push_back(std::move(g));
  }
  return out;
}

/// Soft Dice loss on logits: 1 - (2*overlap + eps) / (mass + eps).
template <typename S>
Tensor<S> dice_loss(Tape<S>* tape, const Tensor<S>& logits, const Tensor<S>& target,
                    double eps = 1.0) {
  Tensor<S> p = sigmoid(tape, logits);
  Tensor<S> inter = sum_all(tape, mul(tape, p, target));
  Tensor<S> mass = add(tape, sum_all(tape, p), sum_all(tape, target));
  Tensor<S> num = add_scalar(tape, mul_scalar(tape, inter, S(2)), static_cast<S>(eps));
  Tensor<S> den = add_scalar(tape, mass, static_cast<S>(eps));
  return add_scalar(tape, mul_scalar(tape, div(tape, num, den), S(-1)), S(1));
}

/// Mean binary cross-entropy over all mask positions.
template <typename S>
Tensor<S> mask_bce(Tape<S>* tape, const Tensor<S>& logits, const Tensor<S>& target) {
  return mean_all(tape, bce_with_logits(tape, logits, target));
}

/// Query-to-segment assignment costs mirroring the training loss:
/// lambda_cls * (-p(class)) + lambda_bce * BCE + lambda_dice * Dice.
template <typename S>
Mat<double> match_cost(const Predictions<S>& pred, const std::vector<GtSegment<S>>& gt,
                       const LossWeights& lw) {
  const Index k = pred.class_logits.dim(0);
  const Index g = static_cast<Index>(gt.size());
  const Index hw = pred.mask_logits.dim(1) * pred.mask_logits.dim(2);
  Tensor<S> probs = softmax<S>(nullptr, pred.class_logits, -1);
  Tensor<S> flat = reshape<S>(nullptr, pred.mask_logits, {k, hw});
  Mat<double> cost(k, g);
  for (Index i = 0; i < k; ++i) {
    Tensor<S> row = slice_rows<S>(nullptr, flat, i, 1);
    for (Index j = 0; j < g; ++j) {
      Tensor<S> m = reshape<S>(nullptr, gt[static_cast<std::size_t>(j)].mask, {1, hw});
      double bce = static_cast<double>(mask_bce<S>(nullptr, row, m).data()[0]);
      double dice = static_cast<double>(dice_loss<S>(nullptr, row, m).data()[0]);
      double cls = -static_cast<double>(
          probs.as2d()(i, gt[static_cast<std::size_t>(j)].class_id));
      cost(i, j) = lw.lambda_cls * cls + lw.lambda_bce * bce + lw.lambda_dice * dice;
    }
  }
  return cost;
}

template <typename S>
struct LossBreakdown {
  Tensor<S> total;  // scalar
  double cls = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  MatchResult match;  // assignment used for every prediction set
};

/// Set-prediction loss over all deep-supervision sets under a fixed
/// query-to-segment assignment: weighted CE over classes (unmatched queries
/// get the no-object class at no_object_weight) plus BCE and Dice on matched
/// masks, averaged over matched pairs.
template <typename S>
LossBreakdown<S> segmentation_loss_matched(Tape<S>* tape,
                                           const std::vector<Predictions<S>>& preds,
                                           const std::vector<GtSegment<S>>& gt,
                                           const LossWeights& lw, Index num_classes,
                                           const MatchResult& match) {
  if (preds.empty()) throw std::invalid_argument("segmentation loss: no prediction sets");
  const Index k = preds.back().class_logits.dim(0);
  LossBreakdown<S> out;
  out.match = match;

  std::vector<int> targets(static_cast<std::size_t>(k), static_cast<int>(num_classes));
  for (auto& pr : out.match.pairs)
    targets[static_cast<std::size_t>(pr.first)] =
        static_cast<int>(gt[static_cast<std::size_t>(pr.second)].class_id);
  std::vector<S> weights(static_cast<std::size_t>(num_classes) + 1, S(1));
  weights.back() = static_cast<S>(lw.no_object_weight);

  for (const auto& set : preds) {
    Tensor<S> ce = weighted_cross_entropy(tape, set.class_logits, targets, weights);
    Tensor<S> set_total = mul_scalar(tape, ce, static_cast<S>(lw.lambda_cls));
    out.cls += static_cast<double>(ce.data()[0]);

    if (!out.match.pairs.empty()) {
      const Index hw = set.mask_logits.dim(1) * set.mask_logits.dim(2);
      Tensor<S> flat = reshape(tape, set.mask_logits, {k, hw});
      Tensor<S> bce_sum, dice_sum;
      for (auto& pr : out.match.pairs) {
        Tensor<S> row = slice_rows(tape, flat, pr.first, 1);
        Tensor<S> m =
            reshape<S>(nullptr, gt[static_cast<std::size_t>(pr.second)].mask, {1, hw});
        Tensor<S> b = mask_bce(tape, row, m);
        Tensor<S> d = dice_loss(tape, row, m);
        bce_sum = bce_sum.defined() ? add(tape, bce_sum, b) : b;
        dice_sum = dice_sum.defined() ? add(tape, dice_sum, d) : d;
      }
      S inv = S(1) / static_cast<S>(out.match.pairs.size());
      Tensor<S> bce_avg = mul_scalar(tape, bce_sum, inv);
      Tensor<S> dice_avg = mul_scalar(tape, dice_sum, inv);
      out.bce += static_cast<double>(bce_avg.data()[0]);
      out.dice += static_cast<double>(dice_avg.data()[0]);
      set_total = add(tape, set_total,
                      mul_scalar(tape, bce_avg, static_cast<S>(lw.lambda_bce)));
      set_total = add(tape, set_total,
                      mul_scalar(tape, dice_avg, static_cast<S>(lw.lambda_dice)));
    }
    out.total = out.total.defined() ? add(tape, out.total, set_total) : set_total;
  }
  return out;
}

/// As above, with the assignment computed once by Hungarian matching on the
/// final prediction set. With no ground-truth segments the loss is
/// classification-only.
template <typename S>
LossBreakdown<S> segmentation_loss(Tape<S>* tape, const std::vector<Predictions<S>>& preds,
                                   const std::vector<GtSegment<S>>& gt, const LossWeights& lw,
                                   Index num_classes) {
  if (preds.empty()) throw std::invalid_argument("segmentation loss: no prediction sets");
  MatchResult match;
  if (!gt.empty()) match = hungarian_match(match_cost(preds.back(), gt, lw));
  return segmentation_loss_matched(tape, preds, gt, lw, num_classes, match);
}

}  // namespace pmt
