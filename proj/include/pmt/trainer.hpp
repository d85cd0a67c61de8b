#pragma once

#include "pmt/data.hpp"
#include "pmt/losses.hpp"
#include "pmt/metrics.hpp"
#include "pmt/model.hpp"
#include "pmt/optim.hpp"

#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

namespace pmt {

/// One line of the metric log: space-separated key=value pairs.
class Record {
 public:
  template <typename T>
  Record& kv(const std::string& k, const T& v) {
    if (!first_) out_ << ' ';
    first_ = false;
    out_ << k << '=';
    if constexpr (std::is_floating_point_v<T>)
      out_ << std::setprecision(10) << v;
    else
      out_ << v;
    return *this;
  }
  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
  bool first_ = true;
};

/// Stateless batch sampling: the sample index for one batch slot of one step.
inline Index batch_index(std::uint64_t seed, Index step, Index slot, Index n) {
  std::uint64_t h = hash_combine(hash_combine(seed, static_cast<std::uint64_t>(step)),
                                 static_cast<std::uint64_t>(slot));
  return static_cast<Index>(h % static_cast<std::uint64_t>(n));
}

/// Thing class with the largest total area; ties break toward the smaller
/// class id.
inline Index dominant_thing_class(const PanopticMap& pm) {
  std::map<Index, Index> area;
  for (const auto& s : pm.segments)
    if (s.is_thing) area[s.class_id] += pm.area(s.id);
  if (area.empty()) throw std::invalid_argument("no thing segments in panoptic map");
  Index best = -1, best_area = -1;
  for (const auto& [c, a] : area)
    if (a > best_area) {
      best = c;
      best_area = a;
    }
  return best;
}

// ---------------------------------------------------------------------------
// Encoder pretext: image-level classification of the dominant shape through
// a linear probe on the class token. The probe is discarded; the point is
// the features it forces into the encoder before freezing.

struct PretextStats {
  double first_loss = 0.0;
  double last_loss = 0.0;
  double val_accuracy = 0.0;
};

template <typename S>
PretextStats pretrain_encoder(Encoder<S>& enc, const std::vector<Sample<S>>& train,
                              const std::vector<Sample<S>>& val, const TrainSchedule& sched,
                              Index num_thing_classes, std::uint64_t seed,
                              std::ostream* log = nullptr) {
  if (train.empty()) throw std::invalid_argument("pretext: empty training set");
  enc.set_frozen(false);

  Rng rng(hash_combine(seed, 0x70b35eULL));
  LinearLayer<S> probe;
  probe.init(rng, num_thing_classes, enc.cfg.embed_dim);

  ParamList<S> params;
  enc.collect(params);
  probe.collect(params, "probe");

  AdamW<S> opt;
  opt.beta1 = sched.beta1;
  opt.beta2 = sched.beta2;
  opt.eps = sched.adam_eps;
  opt.weight_decay = sched.weight_decay;
  opt.attach(params);

  std::vector<int> labels;
  for (const auto& s : train) labels.push_back(static_cast<int>(dominant_thing_class(s.pan)));
  std::vector<S> weights(static_cast<std::size_t>(num_thing_classes), S(1));

  PretextStats stats;
  const Index n = static_cast<Index>(train.size());
  const Index b = sched.batch_images;
  for (Index step = 0; step < sched.steps; ++step) {
    opt.zero_grad();
    double loss = 0.0;
    for (Index i = 0; i < b; ++i) {
      Index idx = batch_index(seed, step, i, n);
      Tape<S> tape;
      EncoderOut<S> eo = enc.forward(&tape, train[static_cast<std::size_t>(idx)].image);
      Tensor<S> tok = slice_rows(&tape, eo.final_seq, 0, 1);
      Tensor<S> logits = probe.apply(&tape, tok);
      Tensor<S> ce = weighted_cross_entropy(&tape, logits,
                                            {labels[static_cast<std::size_t>(idx)]}, weights);
      Tensor<S> scaled = mul_scalar(&tape, ce, S(1) / static_cast<S>(b));
      loss += static_cast<double>(ce.data()[0]) / static_cast<double>(b);
      tape.backward(scaled);
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("pretext loss is not finite at step " + std::to_string(step));
    if (step == 0) stats.first_loss = loss;
    stats.last_loss = loss;
    if (sched.grad_clip > 0.0) opt.clip_grad_norm(sched.grad_clip);
    opt.step(lr_at_step(sched, step));
    if (log && (step % sched.log_every == 0 || step + 1 == sched.steps))
      *log << Record().kv("phase", "pretext").kv("step", step).kv("loss", loss)
                  .kv("lr", lr_at_step(sched, step)).str()
           << '\n';
  }

  Index hits = 0;
  for (const auto& s : val) {
    EncoderOut<S> eo = enc.forward(nullptr, s.image);
    Tensor<S> logits = probe.apply(nullptr, slice_rows<S>(nullptr, eo.final_seq, 0, 1));
    Index best = 0;
    for (Index c = 1; c < num_thing_classes; ++c)
      if (logits.at({Index(0), c}) > logits.at({Index(0), best})) best = c;
    hits += best == dominant_thing_class(s.pan) ? 1 : 0;
  }
  stats.val_accuracy =
      val.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(val.size());
  return stats;
}

// ---------------------------------------------------------------------------
// Image training.

struct TrainStats {
  Index first_step = 0;
  Index last_step = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// Seeded, resumable training loop over single images. The frozen encoder
/// runs once per sample at construction; every step replays decoder,
/// lateral, and loss on those cached activations. All batch selection and
/// mask-anneal draws are stateless hashes of (seed, step), so a resumed run
/// continues bit-exactly.
template <typename S>
class ImageTrainer {
 public:
  ImageTrainer(PmtModel<S>& model, std::vector<Sample<S>> train, RunConfig rc,
               std::uint64_t seed)
      : model_(model), rc_(std::move(rc)), train_(std::move(train)), seed_(seed) {
    if (train_.empty()) throw std::invalid_argument("image trainer: empty training set");
    if (!model_.cfg.freeze_encoder)
      throw std::invalid_argument("image trainer caches encoder outputs; freeze_encoder must be on");
    opt_.beta1 = rc_.schedule.beta1;
    opt_.beta2 = rc_.schedule.beta2;
    opt_.eps = rc_.schedule.adam_eps;
    opt_.weight_decay = rc_.schedule.weight_decay;
    opt_.attach(model_.trainable());
    rebuild_cache();
  }

  Index step() const { return step_; }
  AdamW<S>& optimizer() { return opt_; }

  void rebuild_cache() {
    cache_.clear();
    gt_.clear();
    for (const auto& s : train_) {
      cache_.push_back(model_.encode(nullptr, s.image));
      gt_.push_back(gt_segments_at<S>(s.pan, model_.cfg.mask_h(), model_.cfg.mask_w()));
    }
  }

  TrainStats run(Index steps, std::ostream* log = nullptr) {
    TrainStats ts;
    ts.first_step = step_;
    const Index target = step_ + steps;
    const Index n = static_cast<Index>(train_.size());
    const Index b = rc_.schedule.batch_images;
    for (; step_ < target; ++step_) {
      opt_.zero_grad();
      double loss = 0.0, cls = 0.0, bce = 0.0, dice = 0.0;
      for (Index i = 0; i < b; ++i) {
        Index idx = batch_index(seed_, step_, i, n);
        Tape<S> tape;
        Tensor<S> q = model_.is_eomt() ? Tensor<S>() : model_.decoder.learned_queries;
        DecoderOut<S> out =
            model_.forward_cached(&tape, cache_[static_cast<std::size_t>(idx)], q, true, step_,
                                  rc_.schedule.steps, hash_combine(seed_, i));
        LossBreakdown<S> lb =
            segmentation_loss(&tape, out.preds, gt_[static_cast<std::size_t>(idx)], rc_.loss,
                              model_.cfg.num_classes);
        Tensor<S> scaled = mul_scalar(&tape, lb.total, S(1) / static_cast<S>(b));
        loss += static_cast<double>(lb.total.data()[0]) / static_cast<double>(b);
        cls += lb.cls / static_cast<double>(b);
        bce += lb.bce / static_cast<double>(b);
        dice += lb.dice / static_cast<double>(b);
        tape.backward(scaled);
      }
      if (!std::isfinite(loss))
        throw std::runtime_error("loss is not finite at step " + std::to_string(step_) +
                                 " (train seed " + std::to_string(seed_) + ")");
      if (step_ == ts.first_step) ts.first_loss = loss;
      ts.last_loss = loss;
      if (rc_.schedule.grad_clip > 0.0) opt_.clip_grad_norm(rc_.schedule.grad_clip);
      double lr = lr_at_step(rc_.schedule, step_);
      opt_.step(lr);
      if (log && (step_ % rc_.schedule.log_every == 0 || step_ + 1 == target))
        *log << Record().kv("step", step_).kv("loss", loss).kv("cls", cls).kv("bce", bce)
                    .kv("dice", dice).kv("lr", lr).str()
             << '\n';
    }
    ts.last_step = step_;
    return ts;
  }

  void save(Container& c) {
    model_.save_model(c);
    opt_.save_state(c);
    c.put_u64_scalar("train.step", static_cast<std::uint64_t>(step_));
    c.put_u64_scalar("train.seed", seed_);
  }

  void load(const Container& c) {
    model_.load_model(c);
    opt_.attach(model_.trainable());
    opt_.load_state(c);
    step_ = static_cast<Index>(c.get_u64_scalar("train.step"));
    seed_ = c.get_u64_scalar("train.seed");
    rebuild_cache();
  }

 private:
  PmtModel<S>& model_;
  RunConfig rc_;
  std::vector<Sample<S>> train_;
  std::uint64_t seed_;
  std::vector<EncoderCache<S>> cache_;
  std::vector<std::vector<GtSegment<S>>> gt_;
  AdamW<S> opt_;
  Index step_ = 0;
};

// ---------------------------------------------------------------------------
// Video training.

/// Clip training with query propagation: frames run sequentially on one
/// tape, so the loss gradient flows back through the propagation chain.
/// Matching is first-appearance persistent per clip.
template <typename S>
class VideoTrainer {
 public:
  VideoTrainer(PmtModel<S>& model, std::vector<Clip<S>> train, RunConfig rc, std::uint64_t seed)
      : model_(model), rc_(std::move(rc)), train_(std::move(train)), seed_(seed) {
    if (train_.empty()) throw std::invalid_argument("video trainer: empty training set");
    if (model_.is_eomt())
      throw std::invalid_argument("the query-injection baseline has no propagation path");
    if (!model_.cfg.freeze_encoder)
      throw std::invalid_argument("video trainer caches encoder outputs; freeze_encoder must be on");
    opt_.beta1 = rc_.schedule.beta1;
    opt_.beta2 = rc_.schedule.beta2;
    opt_.eps = rc_.schedule.adam_eps;
    opt_.weight_decay = rc_.schedule.weight_decay;
    opt_.attach(model_.trainable());
    rebuild_cache();
  }

  Index step() const { return step_; }

  void rebuild_cache() {
    cache_.clear();
    gt_.clear();
    for (const auto& clip : train_) {
      std::vector<EncoderCache<S>> cc;
      std::vector<std::vector<GtSegment<S>>> cg;
      for (const auto& frame : clip) {
        cc.push_back(model_.encode(nullptr, frame.image));
        cg.push_back(gt_segments_at<S>(frame.pan, model_.cfg.mask_h(), model_.cfg.mask_w()));
      }
      cache_.push_back(std::move(cc));
      gt_.push_back(std::move(cg));
    }
  }

  TrainStats run(Index steps, std::ostream* log = nullptr) {
    TrainStats ts;
    ts.first_step = step_;
    const Index target = step_ + steps;
    const Index n = static_cast<Index>(train_.size());
    const Index b = rc_.schedule.batch_clips;
    for (; step_ < target; ++step_) {
      opt_.zero_grad();
      double loss = 0.0;
      for (Index ci = 0; ci < b; ++ci) {
        Index idx = batch_index(seed_, step_, ci, n);
        const auto& clip_cache = cache_[static_cast<std::size_t>(idx)];
        const auto& clip_gt = gt_[static_cast<std::size_t>(idx)];
        const Index frames = static_cast<Index>(clip_cache.size());
        Tape<S> tape;
        TrackState<S> st = model_.start_track();
        std::map<std::int64_t, Index> persistent;
        Tensor<S> clip_total;
        for (Index f = 0; f < frames; ++f) {
          Tensor<S> q = model_.frame_queries(&tape, st);
          DecoderOut<S> out = model_.forward_cached(
              &tape, clip_cache[static_cast<std::size_t>(f)], q, true, step_,
              rc_.schedule.steps, hash_combine(hash_combine(seed_, ci), f));
          const auto& gtf = clip_gt[static_cast<std::size_t>(f)];
          MatchResult m;
          if (!gtf.empty()) {
            Mat<double> cost = match_cost(out.preds.back(), gtf, rc_.loss);
            std::vector<std::int64_t> tids;
            for (const auto& g : gtf) tids.push_back(g.track_id);
            m = video_match(cost, tids, persistent);
          }
          LossBreakdown<S> lb = segmentation_loss_matched(&tape, out.preds, gtf, rc_.loss,
                                                          model_.cfg.num_classes, m);
          clip_total = clip_total.defined() ? add(&tape, clip_total, lb.total) : lb.total;
          model_.advance(st, out);
        }
        S scale = S(1) / static_cast<S>(b * frames);
        Tensor<S> scaled = mul_scalar(&tape, clip_total, scale);
        loss += static_cast<double>(clip_total.data()[0]) * static_cast<double>(scale);
        tape.backward(scaled);
      }
      if (!std::isfinite(loss))
        throw std::runtime_error("loss is not finite at step " + std::to_string(step_) +
                                 " (train seed " + std::to_string(seed_) + ")");
      if (step_ == ts.first_step) ts.first_loss = loss;
      ts.last_loss = loss;
      if (rc_.schedule.grad_clip > 0.0) opt_.clip_grad_norm(rc_.schedule.grad_clip);
      double lr = lr_at_step(rc_.schedule, step_);
      opt_.step(lr);
      if (log && (step_ % rc_.schedule.log_every == 0 || step_ + 1 == target))
        *log << Record().kv("step", step_).kv("loss", loss).kv("lr", lr).str() << '\n';
    }
    ts.last_step = step_;
    return ts;
  }

  void save(Container& c) {
    model_.save_model(c);
    opt_.save_state(c);
    c.put_u64_scalar("train.step", static_cast<std::uint64_t>(step_));
    c.put_u64_scalar("train.seed", seed_);
  }

  void load(const Container& c) {
    model_.load_model(c);
    opt_.attach(model_.trainable());
    opt_.load_state(c);
    step_ = static_cast<Index>(c.get_u64_scalar("train.step"));
    seed_ = c.get_u64_scalar("train.seed");
    rebuild_cache();
  }

 private:
  PmtModel<S>& model_;
  RunConfig rc_;
  std::vector<Clip<S>> train_;
  std::uint64_t seed_;
  std::vector<std::vector<EncoderCache<S>>> cache_;
  std::vector<std::vector<std::vector<GtSegment<S>>>> gt_;
  AdamW<S> opt_;
  Index step_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation drivers. Samples shard across threads; shard accumulators merge
// in shard order, so the result is independent of thread count.

inline int eval_threads() {
  const char* env = std::getenv("PMT_THREADS");
  if (!env) return 1;
  int v = std::atoi(env);
  return v < 1 ? 1 : (v > 16 ? 16 : v);
}

struct EvalReport {
  PqReport pq;
  double miou = 0.0;
  double ap = 0.0;
  Index samples = 0;
};

template <typename S>
EvalReport evaluate_images(PmtModel<S>& model, const std::vector<Sample<S>>& samples,
                           const EvalConfig& ec, Index num_thing_classes, int threads = 1) {
  EvalReport rep;
  rep.samples = static_cast<Index>(samples.size());
  if (samples.empty()) return rep;
  const int t_count =
      std::max(1, std::min<int>(threads, static_cast<int>(samples.size())));

  struct Shard {
    PqAccumulator pq;
    MiouAccumulator miou;
    ApAccumulator ap;
  };
  std::vector<Shard> shards(static_cast<std::size_t>(t_count));
  const Index n = static_cast<Index>(samples.size());
  auto work = [&](int t) {
    Index lo = n * t / t_count, hi = n * (t + 1) / t_count;
    for (Index i = lo; i < hi; ++i) {
      const Sample<S>& s = samples[static_cast<std::size_t>(i)];
      DecoderOut<S> out = model.forward_image(nullptr, s.image, false, 0, 1, 0);
      PanopticMap pm =
          panoptic_inference(out.preds.back(), ec, model.cfg.image_height,
                             model.cfg.image_width, model.cfg.num_classes, num_thing_classes);
      auto& sh = shards[static_cast<std::size_t>(t)];
      sh.pq.add(pm, s.pan);
      sh.miou.add(semantic_raster(pm), semantic_raster(s.pan));
      sh.ap.add(instance_predictions(out.preds.back(), model.cfg.image_height,
                                     model.cfg.image_width, model.cfg.num_classes,
                                     num_thing_classes),
                gt_instances(s.pan));
    }
  };
  if (t_count == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < t_count; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (int t = 1; t < t_count; ++t) {
    shards[0].pq.merge(shards[static_cast<std::size_t>(t)].pq);
    shards[0].miou.merge(shards[static_cast<std::size_t>(t)].miou);
    shards[0].ap.merge(shards[static_cast<std::size_t>(t)].ap);
  }
  rep.pq = shards[0].pq.report();
  rep.miou = shards[0].miou.miou();
  rep.ap = shards[0].ap.ap();
  return rep;
}

struct VideoEvalReport {
  VpqReport vpq;
  Index clips = 0;
};

template <typename S>
VideoEvalReport evaluate_clips(PmtModel<S>& model, const std::vector<Clip<S>>& clips,
                               const EvalConfig& ec, Index num_thing_classes, int threads = 1) {
  VideoEvalReport rep;
  rep.clips = static_cast<Index>(clips.size());
  if (clips.empty()) return rep;
  const int t_count = std::max(1, std::min<int>(threads, static_cast<int>(clips.size())));
  std::vector<std::vector<PanopticMap>> pred(clips.size()), gt(clips.size());
  const Index n = static_cast<Index>(clips.size());
  auto work = [&](int t) {
    Index lo = n * t / t_count, hi = n * (t + 1) / t_count;
    for (Index ci = lo; ci < hi; ++ci) {
      const Clip<S>& clip = clips[static_cast<std::size_t>(ci)];
      TrackState<S> st = model.start_track();
      for (const Sample<S>& frame : clip) {
        EncoderCache<S> cache = model.encode(nullptr, frame.image);
        Tensor<S> q = model.frame_queries(nullptr, st);
        DecoderOut<S> out = model.forward_cached(nullptr, cache, q, false, 0, 1, 0);
        pred[static_cast<std::size_t>(ci)].push_back(panoptic_inference(
            out.preds.back(), ec, model.cfg.image_height, model.cfg.image_width,
            model.cfg.num_classes, num_thing_classes, true));
        gt[static_cast<std::size_t>(ci)].push_back(frame.pan);
        model.advance(st, out);
      }
    }
  };
  if (t_count == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < t_count; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  rep.vpq = video_panoptic_quality(pred, gt);
  return rep;
}

/// Association accuracy of query propagation: for each ground-truth object,
/// the query slot with the highest thresholded-mask IoU at the object's
/// first frame; later frames count as hits when the best slot is unchanged.
template <typename S>
double association_accuracy(PmtModel<S>& model, const std::vector<Clip<S>>& clips) {
  Index hits = 0, total = 0;
  for (const Clip<S>& clip : clips) {
    TrackState<S> st = model.start_track();
    std::map<std::int32_t, Index> first_slot;  // gt segment id -> slot
    for (const Sample<S>& frame : clip) {
      EncoderCache<S> cache = model.encode(nullptr, frame.image);
      Tensor<S> q = model.frame_queries(nullptr, st);
      DecoderOut<S> out = model.forward_cached(nullptr, cache, q, false, 0, 1, 0);
      std::vector<Mat<double>> probs = upsampled_mask_probs(
          out.preds.back(), model.cfg.image_height, model.cfg.image_width);
      for (const auto& seg : frame.pan.segments) {
        if (!seg.is_thing) continue;
        Tensor<S> gt_mask =
            segment_mask<S>(frame.pan, seg.id, model.cfg.image_height, model.cfg.image_width);
        Index best = -1;
        double best_iou = -1.0;
        for (std::size_t qi = 0; qi < probs.size(); ++qi) {
          double inter = 0.0, uni = 0.0;
          for (Index r = 0; r < model.cfg.image_height; ++r)
            for (Index c = 0; c < model.cfg.image_width; ++c) {
              bool p = probs[qi](r, c) >= 0.5;
              bool g = gt_mask.at({r, c}) > S(0.5);
              inter += p && g ? 1.0 : 0.0;
              uni += p || g ? 1.0 : 0.0;
            }
          double iou = uni > 0.0 ? inter / uni : 0.0;
          if (iou > best_iou) {
            best_iou = iou;
            best = static_cast<Index>(qi);
          }
        }
        auto it = first_slot.find(seg.id);
        if (it == first_slot.end()) {
          first_slot[seg.id] = best;
        } else {
          hits += best == it->second ? 1 : 0;
          total += 1;
        }
      }
      model.advance(st, out);
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace pmt
