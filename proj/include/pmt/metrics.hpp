#pragma once

#include "pmt/config.hpp"
#include "pmt/decoder.hpp"
#include "pmt/panoptic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pmt {

/// Class-probability rows for a prediction set (softmax over C+1 columns).
template <typename S>
inline Mat<double> class_probabilities(const Predictions<S>& pred) {
  Tensor<S> probs = softmax<S>(nullptr, pred.class_logits, -1);
  Mat<double> out(probs.dim(0), probs.dim(1));
  for (Index i = 0; i < probs.dim(0); ++i)
    for (Index j = 0; j < probs.dim(1); ++j) out(i, j) = static_cast<double>(probs.at({i, j}));
  return out;
}

/// Mask probabilities upsampled to the output raster: bilinear doubling of
/// the logits until they reach (out_h, out_w), then a sigmoid.
template <typename S>
inline std::vector<Mat<double>> upsampled_mask_probs(const Predictions<S>& pred, Index out_h,
                                                     Index out_w) {
  Tensor<S> logits = pred.mask_logits;
  while (logits.dim(1) < out_h || logits.dim(2) < out_w)
    logits = bilinear_upsample2x<S>(nullptr, logits);
  if (logits.dim(1) != out_h || logits.dim(2) != out_w)
    throw std::invalid_argument("mask grid " + shape_str(pred.mask_logits.shape()) +
                                " cannot be doubled to " + std::to_string(out_h) + "x" +
                                std::to_string(out_w));
  std::vector<Mat<double>> out;
  for (Index q = 0; q < logits.dim(0); ++q) {
    Mat<double> m(out_h, out_w);
    for (Index r = 0; r < out_h; ++r)
      for (Index c = 0; c < out_w; ++c)
        m(r, c) = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.at({q, r, c}))));
    out.push_back(std::move(m));
  }
  return out;
}

/// Query outputs to a panoptic map. A query survives when its top class is
/// a real class with probability above the threshold. Each pixel goes to
/// the surviving query maximizing class_score * mask_prob; a query keeps
/// its segment only when the pixels it wins cover at least overlap_retention
/// of its thresholded mask and at least min_area pixels. Stuff queries of
/// one class merge into a single segment. Classes [0, num_thing_classes)
/// are things. With slot_ids, thing segment ids are tied to the query slot
/// (q+1) and stuff to the class (K+1+class), making ids stable across the
/// frames of a clip; otherwise ids are numbered in query order from 1.
template <typename S>
PanopticMap panoptic_inference(const Predictions<S>& pred, const EvalConfig& ec, Index out_h,
                               Index out_w, Index num_classes, Index num_thing_classes,
                               bool slot_ids = false) {
  const Index k = pred.class_logits.dim(0);
  Mat<double> probs = class_probabilities(pred);
  if (probs.cols() != num_classes + 1)
    throw std::invalid_argument("class logits have " + std::to_string(probs.cols()) +
                                " columns, expected " + std::to_string(num_classes + 1));

  std::vector<Index> cls(static_cast<std::size_t>(k), -1);
  std::vector<double> score(static_cast<std::size_t>(k), 0.0);
  std::vector<bool> kept(static_cast<std::size_t>(k), false);
  for (Index q = 0; q < k; ++q) {
    Index best = 0;
    for (Index c = 1; c <= num_classes; ++c)
      if (probs(q, c) > probs(q, best)) best = c;
    cls[static_cast<std::size_t>(q)] = best;
    score[static_cast<std::size_t>(q)] = probs(q, best);
    kept[static_cast<std::size_t>(q)] =
        best != num_classes && probs(q, best) >= ec.class_score_threshold;
  }

  std::vector<Mat<double>> mask = upsampled_mask_probs(pred, out_h, out_w);

  // Per-pixel argmax of combined score among surviving queries.
  std::vector<Index> winner(static_cast<std::size_t>(out_h * out_w), -1);
  for (Index r = 0; r < out_h; ++r)
    for (Index c = 0; c < out_w; ++c) {
      double best = 0.0;
      Index who = -1;
      for (Index q = 0; q < k; ++q) {
        if (!kept[static_cast<std::size_t>(q)]) continue;
        double v = score[static_cast<std::size_t>(q)] * mask[static_cast<std::size_t>(q)](r, c);
        if (who < 0 || v > best) {
          best = v;
          who = q;
        }
      }
      winner[static_cast<std::size_t>(r * out_w + c)] = who;
    }

  PanopticMap pm;
  pm.init(out_h, out_w);
  std::map<Index, std::int32_t> stuff_ids;  // class -> segment id
  std::int32_t next_id = 1;
  for (Index q = 0; q < k; ++q) {
    if (!kept[static_cast<std::size_t>(q)]) continue;
    Index mask_area = 0, won = 0;
    for (Index r = 0; r < out_h; ++r)
      for (Index c = 0; c < out_w; ++c) {
        bool inside = mask[static_cast<std::size_t>(q)](r, c) >= 0.5;
        mask_area += inside ? 1 : 0;
        won += inside && winner[static_cast<std::size_t>(r * out_w + c)] == q ? 1 : 0;
      }
    if (mask_area == 0 || won < ec.min_area) continue;
    if (static_cast<double>(won) / static_cast<double>(mask_area) < ec.overlap_retention)
      continue;
    Index qc = cls[static_cast<std::size_t>(q)];
    bool thing = qc < num_thing_classes;
    std::int32_t id;
    if (thing) {
      id = slot_ids ? static_cast<std::int32_t>(q) + 1 : next_id++;
      pm.segments.push_back({id, qc, true});
    } else {
      auto it = stuff_ids.find(qc);
      if (it == stuff_ids.end()) {
        id = slot_ids ? static_cast<std::int32_t>(k + qc) + 1 : next_id++;
        stuff_ids[qc] = id;
        pm.segments.push_back({id, qc, false});
      } else {
        id = it->second;
      }
    }
    for (Index r = 0; r < out_h; ++r)
      for (Index c = 0; c < out_w; ++c)
        if (mask[static_cast<std::size_t>(q)](r, c) >= 0.5 &&
            winner[static_cast<std::size_t>(r * out_w + c)] == q)
          pm.id(r, c) = id;
  }
  pm.validate();
  return pm;
}

// ---------------------------------------------------------------------------
// Panoptic quality.

struct PqClassStats {
  double iou_sum = 0.0;
  Index tp = 0, fp = 0, fn = 0;
};

struct PqReport {
  double pq = 0.0, sq = 0.0, rq = 0.0;
  std::map<Index, PqClassStats> per_class;
  Index classes = 0;
};

/// Dataset-level PQ accumulator. Matches segments of equal class at
/// void-aware IoU > 0.5 (such matches are unique); unmatched predictions
/// that lie mostly on ground-truth void are ignored rather than counted as
/// false positives. Merge is associative addition.
class PqAccumulator {
 public:
  void add(const PanopticMap& pred, const PanopticMap& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
      throw std::invalid_argument("panoptic rasters differ in size");
    std::map<std::pair<std::int32_t, std::int32_t>, Index> inter;
    std::map<std::int32_t, Index> pred_area, gt_area;
    Index n = pred.h * pred.w;
    for (Index i = 0; i < n; ++i) {
      std::int32_t p = pred.ids[static_cast<std::size_t>(i)];
      std::int32_t g = gt.ids[static_cast<std::size_t>(i)];
      if (p != 0) ++pred_area[p];
      if (g != 0) ++gt_area[g];
      ++inter[{p, g}];
    }

    std::map<std::int32_t, std::int32_t> matched_pred, matched_gt;
    for (const auto& gs : gt.segments) {
      for (const auto& ps : pred.segments) {
        if (ps.class_id != gs.class_id) continue;
        auto it = inter.find({ps.id, gs.id});
        if (it == inter.end()) continue;
        double i = static_cast<double>(it->second);
        auto pv = inter.find({ps.id, 0});
        double void_overlap = pv == inter.end() ? 0.0 : static_cast<double>(pv->second);
        double u = static_cast<double>(pred_area[ps.id]) + static_cast<double>(gt_area[gs.id]) -
                   i - void_overlap;
        double iou = u > 0.0 ? i / u : 0.0;
        if (iou > 0.5) {
          stats_[gs.class_id].iou_sum += iou;
          stats_[gs.class_id].tp += 1;
          matched_pred[ps.id] = gs.id;
          matched_gt[gs.id] = ps.id;
        }
      }
    }
    for (const auto& gs : gt.segments)
      if (!matched_gt.count(gs.id)) stats_[gs.class_id].fn += 1;
    for (const auto& ps : pred.segments) {
      if (matched_pred.count(ps.id)) continue;
      auto pv = inter.find({ps.id, 0});
      double void_overlap = pv == inter.end() ? 0.0 : static_cast<double>(pv->second);
      if (pred_area[ps.id] > 0 &&
          void_overlap / static_cast<double>(pred_area[ps.id]) > 0.5)
        continue;
      stats_[ps.class_id].fp += 1;
    }
  }

  void merge(const PqAccumulator& other) {
    for (const auto& [c, s] : other.stats_) {
      stats_[c].iou_sum += s.iou_sum;
      stats_[c].tp += s.tp;
      stats_[c].fp += s.fp;
      stats_[c].fn += s.fn;
    }
  }

  PqReport report() const {
    PqReport r;
    for (const auto& [c, s] : stats_) {
      if (s.tp + s.fp + s.fn == 0) continue;
      double denom = static_cast<double>(s.tp) + 0.5 * static_cast<double>(s.fp) +
                     0.5 * static_cast<double>(s.fn);
      r.pq += s.iou_sum / denom;
      r.sq += s.tp > 0 ? s.iou_sum / static_cast<double>(s.tp) : 0.0;
      r.rq += static_cast<double>(s.tp) / denom;
      r.per_class[c] = s;
      ++r.classes;
    }
    if (r.classes > 0) {
      r.pq /= static_cast<double>(r.classes);
      r.sq /= static_cast<double>(r.classes);
      r.rq /= static_cast<double>(r.classes);
    }
    return r;
  }

 private:
  std::map<Index, PqClassStats> stats_;
};

// ---------------------------------------------------------------------------
// Mean IoU.

/// Per-pixel class raster of a panoptic map (-1 where void).
inline std::vector<Index> semantic_raster(const PanopticMap& pm) {
  std::map<std::int32_t, Index> cls;
  for (const auto& s : pm.segments) cls[s.id] = s.class_id;
  std::vector<Index> out(pm.ids.size(), -1);
  for (std::size_t i = 0; i < pm.ids.size(); ++i)
    if (pm.ids[i] != 0) out[i] = cls.at(pm.ids[i]);
  return out;
}

/// Dataset-level intersection/union accumulation; pixels whose ground truth
/// is void are ignored entirely.
class MiouAccumulator {
 public:
  void add(const std::vector<Index>& pred, const std::vector<Index>& gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("semantic rasters differ in size");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] < 0) continue;
      if (pred[i] == gt[i]) ++inter_[gt[i]];
      ++gt_count_[gt[i]];
      if (pred[i] >= 0) ++pred_count_[pred[i]];
    }
  }

  void merge(const MiouAccumulator& other) {
    for (auto& [c, v] : other.inter_) inter_[c] += v;
    for (auto& [c, v] : other.gt_count_) gt_count_[c] += v;
    for (auto& [c, v] : other.pred_count_) pred_count_[c] += v;
  }

  std::map<Index, double> per_class() const {
    std::map<Index, double> out;
    std::map<Index, Index> unions;
    for (auto& [c, v] : gt_count_) unions[c] += v;
    for (auto& [c, v] : pred_count_) unions[c] += v;
    for (auto& [c, u] : unions) {
      Index i = inter_.count(c) ? inter_.at(c) : 0;
      Index denom = u - i;
      if (denom > 0) out[c] = static_cast<double>(i) / static_cast<double>(denom);
    }
    return out;
  }

  double miou() const {
    auto pc = per_class();
    if (pc.empty()) return 0.0;
    double s = 0.0;
    for (auto& [c, v] : pc) s += v;
    return s / static_cast<double>(pc.size());
  }

 private:
  std::map<Index, Index> inter_, gt_count_, pred_count_;
};

// ---------------------------------------------------------------------------
// Instance mask AP.

struct InstancePrediction {
  Index class_id = 0;
  double score = 0.0;
  std::vector<std::uint8_t> mask;  // row-major out_h*out_w
};

/// Thing-class instance candidates from a prediction set: every query whose
/// top class is a thing, scored by that class probability, with its
/// thresholded full-resolution mask.
template <typename S>
std::vector<InstancePrediction> instance_predictions(const Predictions<S>& pred, Index out_h,
                                                     Index out_w, Index num_classes,
                                                     Index num_thing_classes) {
  Mat<double> probs = class_probabilities(pred);
  std::vector<Mat<double>> mask = upsampled_mask_probs(pred, out_h, out_w);
  std::vector<InstancePrediction> out;
  for (Index q = 0; q < pred.class_logits.dim(0); ++q) {
    Index best = 0;
    for (Index c = 1; c <= num_classes; ++c)
      if (probs(q, c) > probs(q, best)) best = c;
    if (best >= num_thing_classes) continue;  // stuff or no-object
    InstancePrediction ip;
    ip.class_id = best;
    ip.score = probs(q, best);
    ip.mask.resize(static_cast<std::size_t>(out_h * out_w));
    for (Index r = 0; r < out_h; ++r)
      for (Index c = 0; c < out_w; ++c)
        ip.mask[static_cast<std::size_t>(r * out_w + c)] =
            mask[static_cast<std::size_t>(q)](r, c) >= 0.5 ? 1 : 0;
    out.push_back(std::move(ip));
  }
  return out;
}

/// COCO-style mask AP: greedy score-ordered matching per IoU threshold in
/// 0.50:0.95:0.05, 101-point interpolated precision, averaged over
/// thresholds and over classes with ground-truth instances. Prediction
/// order ties break by (sample index, candidate index).
class ApAccumulator {
 public:
  /// One sample's thing-class ground truth masks, keyed by class.
  void add(const std::vector<InstancePrediction>& preds,
           const std::vector<InstancePrediction>& gts) {
    Index sample = next_sample_++;
    for (const auto& g : gts) ++gt_count_[g.class_id];
    for (std::size_t pi = 0; pi < preds.size(); ++pi) {
      const auto& p = preds[pi];
      Record rec;
      rec.score = p.score;
      rec.sample = sample;
      rec.index = static_cast<Index>(pi);
      Index gi = 0;
      for (const auto& g : gts) {
        if (g.class_id == p.class_id) {
          double iou = mask_iou(p.mask, g.mask);
          rec.ious.push_back({sample, gi, iou});
        }
        ++gi;
      }
      records_[p.class_id].push_back(std::move(rec));
    }
  }

  void merge(const ApAccumulator& other) {
    Index base = next_sample_;
    for (const auto& [c, recs] : other.records_)
      for (Record r : recs) {
        r.sample += base;
        for (auto& g : r.ious) g.sample += base;
        records_[c].push_back(std::move(r));
      }
    for (const auto& [c, n] : other.gt_count_) gt_count_[c] += n;
    next_sample_ += other.next_sample_;
  }

  double ap() const {
    std::vector<double> per_class;
    for (const auto& [c, total_gt] : gt_count_) {
      if (total_gt == 0) continue;
      double sum = 0.0;
      for (int t = 0; t < 10; ++t) sum += ap_at(c, 0.5 + 0.05 * t);
      per_class.push_back(sum / 10.0);
    }
    if (per_class.empty()) return 0.0;
    double s = 0.0;
    for (double v : per_class) s += v;
    return s / static_cast<double>(per_class.size());
  }

  static double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("mask sizes differ");
    Index i = 0, u = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      bool av = a[k] != 0, bv = b[k] != 0;
      i += av && bv ? 1 : 0;
      u += av || bv ? 1 : 0;
    }
    return u == 0 ? 0.0 : static_cast<double>(i) / static_cast<double>(u);
  }

 private:
  struct GtIou {
    Index sample = 0, gt = 0;
    double iou = 0.0;
  };
  struct Record {
    double score = 0.0;
    Index sample = 0, index = 0;
    std::vector<GtIou> ious;  // same-class ground truths in the same sample
  };

  double ap_at(Index cls, double thr) const {
    auto it = records_.find(cls);
    Index total_gt = gt_count_.at(cls);
    std::vector<Record> recs = it == records_.end() ? std::vector<Record>() : it->second;
    std::sort(recs.begin(), recs.end(), [](const Record& a, const Record& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.sample != b.sample) return a.sample < b.sample;
      return a.index < b.index;
    });
    std::map<std::pair<Index, Index>, bool> taken;
    std::vector<bool> is_tp;
    for (const auto& r : recs) {
      const GtIou* best = nullptr;
      for (const auto& g : r.ious) {
        if (g.iou < thr) continue;
        if (taken.count({g.sample, g.gt})) continue;
        if (!best || g.iou > best->iou) best = &g;
      }
      if (best) {
        taken[{best->sample, best->gt}] = true;
        is_tp.push_back(true);
      } else {
        is_tp.push_back(false);
      }
    }
    // 101-point interpolation over the precision/recall curve.
    std::vector<double> prec, rec;
    Index tp = 0;
    for (std::size_t k = 0; k < is_tp.size(); ++k) {
      tp += is_tp[k] ? 1 : 0;
      prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
      rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    double sum = 0.0;
    for (int i = 0; i <= 100; ++i) {
      double r = static_cast<double>(i) / 100.0;
      double best = 0.0;
      for (std::size_t k = 0; k < prec.size(); ++k)
        if (rec[k] >= r) best = std::max(best, prec[k]);
      sum += best;
    }
    return sum / 101.0;
  }

  std::map<Index, std::vector<Record>> records_;
  std::map<Index, Index> gt_count_;
  Index next_sample_ = 0;
};

/// Ground-truth thing instances of one panoptic map in AP form.
inline std::vector<InstancePrediction> gt_instances(const PanopticMap& pm) {
  std::vector<InstancePrediction> out;
  for (const auto& s : pm.segments) {
    if (!s.is_thing) continue;
    InstancePrediction g;
    g.class_id = s.class_id;
    g.score = 1.0;
    g.mask.resize(pm.ids.size());
    for (std::size_t i = 0; i < pm.ids.size(); ++i) g.mask[i] = pm.ids[i] == s.id ? 1 : 0;
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Video panoptic quality.

/// Stacks a window of per-frame maps into one tall raster; segment tables
/// union by id (ids are temporally stable on both sides).
inline PanopticMap stack_window(const std::vector<PanopticMap>& frames, std::size_t start,
                                std::size_t count) {
  PanopticMap out;
  out.init(frames[start].h * static_cast<Index>(count), frames[start].w);
  std::map<std::int32_t, SegmentInfo> segs;
  for (std::size_t f = 0; f < count; ++f) {
    const PanopticMap& pm = frames[start + f];
    if (pm.h != frames[start].h || pm.w != frames[start].w)
      throw std::invalid_argument("clip frames differ in size");
    std::copy(pm.ids.begin(), pm.ids.end(),
              out.ids.begin() + static_cast<std::ptrdiff_t>(f * pm.ids.size()));
    for (const auto& s : pm.segments) segs[s.id] = s;
  }
  for (const auto& [id, s] : segs) out.segments.push_back(s);
  return out;
}

/// VPQ over window lengths k in {0, 1, 2}: tube IoU via stacked windows,
/// PQ accumulation pooled over every window position of every clip, then
/// the mean over window lengths. Clips shorter than a window contribute
/// nothing to it.
struct VpqReport {
  double vpq = 0.0;
  std::map<int, double> per_window;  // k -> pooled PQ
};

inline VpqReport video_panoptic_quality(
    const std::vector<std::vector<PanopticMap>>& pred_clips,
    const std::vector<std::vector<PanopticMap>>& gt_clips) {
  if (pred_clips.size() != gt_clips.size())
    throw std::invalid_argument("prediction and ground-truth clip counts differ");
  VpqReport out;
  int used = 0;
  for (int k = 0; k <= 2; ++k) {
    PqAccumulator acc;
    bool any = false;
    for (std::size_t c = 0; c < pred_clips.size(); ++c) {
      const auto& pc = pred_clips[c];
      const auto& gc = gt_clips[c];
      if (pc.size() != gc.size()) throw std::invalid_argument("clip lengths differ");
      std::size_t win = static_cast<std::size_t>(k) + 1;
      if (pc.size() < win) continue;
      for (std::size_t t = 0; t + win <= pc.size(); ++t) {
        acc.add(stack_window(pc, t, win), stack_window(gc, t, win));
        any = true;
      }
    }
    if (!any) continue;
    out.per_window[k] = acc.report().pq;
    out.vpq += out.per_window[k];
    ++used;
  }
  if (used > 0) out.vpq /= static_cast<double>(used);
  return out;
}

}  // namespace pmt
