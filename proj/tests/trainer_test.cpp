#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pmt/trainer.hpp"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

using namespace pmt;

namespace {

RunConfig tiny_run() {
  RunConfig rc;
  rc.model.image_height = rc.model.image_width = 32;
  rc.model.patch_size = 8;
  rc.model.embed_dim = 32;
  rc.model.num_layers = 2;
  rc.model.num_heads = 2;
  rc.model.num_register_tokens = 1;
  rc.model.tap_layers = {1, 2};
  rc.model.num_queries = 6;
  rc.model.decoder_layers = 2;
  rc.model.eomt_l1 = 1;
  rc.schedule.steps = 40;
  rc.schedule.warmup_steps = 5;
  rc.schedule.batch_images = 4;
  rc.schedule.batch_clips = 2;
  rc.schedule.log_every = 10;
  rc.data.max_instances = 2;
  return rc;
}

std::vector<Sample<double>> tiny_images(const RunConfig& rc, Index n, std::uint64_t space) {
  std::vector<Sample<double>> out;
  for (Index i = 0; i < n; ++i)
    out.push_back(generate_image<double>(rc.data, rc.model.image_height, rc.model.image_width,
                                         sample_seed(77, space, i)));
  return out;
}

std::vector<Clip<double>> tiny_clips(const RunConfig& rc, Index n, std::uint64_t space) {
  SyntheticSpec spec = rc.data;
  spec.frames_per_clip = 3;
  std::vector<Clip<double>> out;
  for (Index i = 0; i < n; ++i)
    out.push_back(generate_clip<double>(spec, rc.model.image_height, rc.model.image_width,
                                        sample_seed(78, space, i)));
  return out;
}

}  // namespace

TEST_CASE("dominant thing class picks the largest area, ties to the smaller id") {
  PanopticMap pm;
  pm.init(4, 4);
  for (Index i = 0; i < 16; ++i) pm.ids[static_cast<std::size_t>(i)] = i < 6 ? 1 : 2;
  pm.segments = {{1, 2, true}, {2, 0, true}};
  CHECK(dominant_thing_class(pm) == 0);  // 10 pixels beat 6

  PanopticMap tie;
  tie.init(4, 4);
  for (Index i = 0; i < 16; ++i) tie.ids[static_cast<std::size_t>(i)] = i < 8 ? 1 : 2;
  tie.segments = {{1, 2, true}, {2, 1, true}};
  CHECK(dominant_thing_class(tie) == 1);

  PanopticMap stuff_only;
  stuff_only.init(2, 2);
  for (auto& v : stuff_only.ids) v = 1;
  stuff_only.segments = {{1, 3, false}};
  CHECK_THROWS_AS(dominant_thing_class(stuff_only), std::invalid_argument);
}

TEST_CASE("batch indices are deterministic and in range") {
  for (Index step = 0; step < 20; ++step)
    for (Index i = 0; i < 4; ++i) {
      Index a = batch_index(9, step, i, 13);
      Index b = batch_index(9, step, i, 13);
      CHECK(a == b);
      CHECK(a >= 0);
      CHECK(a < 13);
    }
  // Different steps reach different samples eventually.
  std::set<Index> seen;
  for (Index step = 0; step < 50; ++step) seen.insert(batch_index(9, step, 0, 13));
  CHECK(seen.size() > 5);
}

TEST_CASE("pretext training reduces loss and beats chance on validation") {
  RunConfig rc = tiny_run();
  rc.schedule.steps = 400;
  auto train = tiny_images(rc, 48, 1);
  auto val = tiny_images(rc, 24, 2);

  Encoder<double> enc;
  Rng rng(21);
  enc.init(rc.model, rng);
  std::ostringstream log;
  PretextStats st = pretrain_encoder(enc, train, val, rc.schedule, 3, 500, &log);
  CHECK(st.last_loss < st.first_loss);
  CHECK(st.val_accuracy > 0.5);
  CHECK(log.str().find("phase=pretext") != std::string::npos);
  // The pretext leaves the encoder trainable; freezing is the caller's call.
  ParamList<double> ps;
  enc.collect(ps);
  CHECK(ps.front().tensor.requires_grad());
}

TEST_CASE("zero training steps leave the checkpoint at initialization") {
  RunConfig rc = tiny_run();
  auto train = tiny_images(rc, 8, 3);
  PmtModel<double> model;
  Rng rng(31);
  model.init(rc.model, ModelVariant::Pmt, rng);
  std::uint64_t before = model.checksum();

  ImageTrainer<double> tr(model, train, rc, 11);
  tr.run(0);
  CHECK(model.checksum() == before);

  Container c;
  tr.save(c);
  PmtModel<double> restored;
  Rng rng2(32);
  restored.init(rc.model, ModelVariant::Pmt, rng2);
  restored.load_model(c);
  CHECK(restored.checksum() == before);
  CHECK(c.get_u64_scalar("train.step") == 0);
}

TEST_CASE("identical seeds give bit-identical training runs") {
  RunConfig rc = tiny_run();
  auto train = tiny_images(rc, 8, 3);
  std::uint64_t sums[2];
  for (int r = 0; r < 2; ++r) {
    PmtModel<double> model;
    Rng rng(33);
    model.init(rc.model, ModelVariant::Pmt, rng);
    ImageTrainer<double> tr(model, train, rc, 12);
    tr.run(5);
    sums[r] = model.checksum();
  }
  CHECK(sums[0] == sums[1]);
}

TEST_CASE("checkpoint resume matches uninterrupted training bit for bit") {
  RunConfig rc = tiny_run();
  auto train = tiny_images(rc, 8, 3);

  PmtModel<double> straight;
  Rng rng_a(34);
  straight.init(rc.model, ModelVariant::Pmt, rng_a);
  ImageTrainer<double> tr_a(straight, train, rc, 13);
  tr_a.run(6);

  PmtModel<double> half;
  Rng rng_b(34);
  half.init(rc.model, ModelVariant::Pmt, rng_b);
  ImageTrainer<double> tr_b(half, train, rc, 13);
  tr_b.run(3);
  Container mid;
  tr_b.save(mid);

  PmtModel<double> resumed;
  Rng rng_c(99);  // deliberately different init; the checkpoint overrides it
  resumed.init(rc.model, ModelVariant::Pmt, rng_c);
  ImageTrainer<double> tr_c(resumed, train, rc, 13);
  tr_c.load(mid);
  CHECK(tr_c.step() == 3);
  tr_c.run(3);

  CHECK(resumed.checksum() == straight.checksum());

  Container done_a, done_c;
  tr_a.save(done_a);
  tr_c.save(done_c);
  done_a.save("/tmp/pmt_train_a.pmtc");
  done_c.save("/tmp/pmt_train_c.pmtc");
  // Whole-checkpoint equality, optimizer moments included.
  std::ifstream fa("/tmp/pmt_train_a.pmtc", std::ios::binary);
  std::ifstream fc("/tmp/pmt_train_c.pmtc", std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string bc((std::istreambuf_iterator<char>(fc)), std::istreambuf_iterator<char>());
  CHECK(ba == bc);
}

TEST_CASE("frozen encoder is untouched by training and receives no gradients") {
  RunConfig rc = tiny_run();
  auto train = tiny_images(rc, 8, 3);
  PmtModel<double> model;
  Rng rng(35);
  model.init(rc.model, ModelVariant::Pmt, rng);
  std::uint64_t enc_before = model.encoder.checksum();

  ImageTrainer<double> tr(model, train, rc, 14);
  TrainStats ts = tr.run(3);
  CHECK(ts.last_loss > 0.0);
  CHECK(model.encoder.checksum() == enc_before);
  ParamList<double> enc_params;
  model.encoder.collect(enc_params);
  for (auto& np : enc_params) CHECK(!np.tensor.has_grad());
}

TEST_CASE("image training loss falls on a tiny run") {
  RunConfig rc = tiny_run();
  rc.schedule.steps = 150;
  auto train = tiny_images(rc, 12, 4);
  PmtModel<double> model;
  Rng rng(36);
  model.init(rc.model, ModelVariant::Pmt, rng);
  ImageTrainer<double> tr(model, train, rc, 15);
  std::ostringstream log;
  TrainStats ts = tr.run(150, &log);
  CHECK(ts.last_loss < 0.6 * ts.first_loss);
  CHECK(log.str().find("step=0 ") != std::string::npos);
  CHECK(log.str().find("dice=") != std::string::npos);
}

TEST_CASE("an untrained video model behaves frame-independently") {
  RunConfig rc = tiny_run();
  auto clips = tiny_clips(rc, 1, 5);
  PmtModel<double> model;
  Rng rng(37);
  model.init(rc.model, ModelVariant::Pmt, rng);

  TrackState<double> st = model.start_track();
  for (const auto& frame : clips[0]) {
    EncoderCache<double> cache = model.encode(nullptr, frame.image);
    Tensor<double> q = model.frame_queries(nullptr, st);
    DecoderOut<double> vid = model.forward_cached(nullptr, cache, q, false, 0, 1, 0);
    DecoderOut<double> img = model.forward_image(nullptr, frame.image, false, 0, 1, 0);
    CHECK(std::memcmp(vid.preds.back().mask_logits.data(), img.preds.back().mask_logits.data(),
                      sizeof(double) *
                          static_cast<std::size_t>(img.preds.back().mask_logits.size())) == 0);
    model.advance(st, vid);
  }
}

TEST_CASE("video training runs, resumes, and decreases the loss") {
  RunConfig rc = tiny_run();
  rc.schedule.decay = "poly";
  rc.schedule.steps = 30;
  auto clips = tiny_clips(rc, 4, 6);

  PmtModel<double> model;
  Rng rng(38);
  model.init(rc.model, ModelVariant::Pmt, rng);
  VideoTrainer<double> tr(model, clips, rc, 16);
  TrainStats ts = tr.run(30);
  CHECK(std::isfinite(ts.last_loss));
  CHECK(ts.last_loss < ts.first_loss);

  // Same-seed rerun is bit-identical.
  PmtModel<double> again;
  Rng rng2(38);
  again.init(rc.model, ModelVariant::Pmt, rng2);
  VideoTrainer<double> tr2(again, clips, rc, 16);
  tr2.run(30);
  CHECK(again.checksum() == model.checksum());
}

TEST_CASE("evaluation reports are independent of thread count") {
  RunConfig rc = tiny_run();
  auto val = tiny_images(rc, 10, 7);
  auto clips = tiny_clips(rc, 3, 8);
  PmtModel<double> model;
  Rng rng(39);
  model.init(rc.model, ModelVariant::Pmt, rng);
  // A few steps so the model emits some segments.
  auto train = tiny_images(rc, 8, 9);
  ImageTrainer<double> tr(model, train, rc, 17);
  tr.run(10);

  EvalReport one = evaluate_images(model, val, rc.eval, 3, 1);
  EvalReport two = evaluate_images(model, val, rc.eval, 3, 2);
  EvalReport four = evaluate_images(model, val, rc.eval, 3, 4);
  CHECK(one.pq.pq == doctest::Approx(two.pq.pq).epsilon(1e-12));
  CHECK(two.pq.pq == doctest::Approx(four.pq.pq).epsilon(1e-12));
  CHECK(one.miou == doctest::Approx(two.miou).epsilon(1e-12));
  CHECK(one.ap == doctest::Approx(two.ap).epsilon(1e-12));
  CHECK(one.samples == 10);

  VideoEvalReport v1 = evaluate_clips(model, clips, rc.eval, 3, 1);
  VideoEvalReport v2 = evaluate_clips(model, clips, rc.eval, 3, 2);
  CHECK(v1.vpq.vpq == doctest::Approx(v2.vpq.vpq).epsilon(1e-12));

  double assoc = association_accuracy(model, clips);
  CHECK(assoc >= 0.0);
  CHECK(assoc <= 1.0);
}

TEST_CASE("eval thread cap reads the environment") {
  setenv("PMT_THREADS", "3", 1);
  CHECK(eval_threads() == 3);
  setenv("PMT_THREADS", "0", 1);
  CHECK(eval_threads() == 1);
  setenv("PMT_THREADS", "99", 1);
  CHECK(eval_threads() == 16);
  unsetenv("PMT_THREADS");
  CHECK(eval_threads() == 1);
}
