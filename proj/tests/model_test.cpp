#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pmt/data.hpp"
#include "pmt/model.hpp"

#include <cstring>
#include <set>
#include <string>

using namespace pmt;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_height = c.image_width = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_register_tokens = 1;
  c.tap_layers = {1, 2};
  c.num_queries = 5;
  c.decoder_layers = 2;
  c.eomt_l1 = 1;
  return c;
}

Tensor<double> test_image(const ModelConfig& c, std::uint64_t seed) {
  SyntheticSpec spec;
  return generate_image<double>(spec, c.image_height, c.image_width, seed).image;
}

bool bits_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) ==
             0;
}

std::set<std::string> trainable_names(PmtModel<double>& m) {
  std::set<std::string> out;
  for (auto& np : m.trainable()) out.insert(np.name);
  return out;
}

bool any_prefix(const std::set<std::string>& names, const std::string& prefix) {
  for (const auto& n : names)
    if (n.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("variant names parse and round-trip") {
  for (auto v : {ModelVariant::Pmt, ModelVariant::PmtNoLateral, ModelVariant::PmtNoRope,
                 ModelVariant::EomtFrozen})
    CHECK(parse_variant(variant_name(v)) == v);
  CHECK_THROWS_AS(parse_variant("resnet"), std::invalid_argument);
}

TEST_CASE("frozen encoder never appears among trainables") {
  Rng rng(3);
  for (auto v : {ModelVariant::Pmt, ModelVariant::PmtNoLateral, ModelVariant::PmtNoRope,
                 ModelVariant::EomtFrozen}) {
    PmtModel<double> m;
    m.init(tiny_config(), v, rng);
    auto names = trainable_names(m);
    CHECK(!any_prefix(names, "encoder."));
    CHECK(!names.empty());
  }
}

TEST_CASE("variants expose the right trainable groups") {
  Rng rng(4);
  PmtModel<double> pmt, nolat, eomt;
  pmt.init(tiny_config(), ModelVariant::Pmt, rng);
  nolat.init(tiny_config(), ModelVariant::PmtNoLateral, rng);
  eomt.init(tiny_config(), ModelVariant::EomtFrozen, rng);

  auto pn = trainable_names(pmt);
  CHECK(any_prefix(pn, "lateral."));
  CHECK(any_prefix(pn, "decoder."));
  CHECK(any_prefix(pn, "temporal."));

  auto nn = trainable_names(nolat);
  CHECK(!any_prefix(nn, "lateral."));
  CHECK(any_prefix(nn, "decoder."));

  auto en = trainable_names(eomt);
  CHECK(any_prefix(en, "eomt."));
  CHECK(!any_prefix(en, "decoder."));
  CHECK(!any_prefix(en, "lateral."));
  // Queries plus head only.
  for (const auto& n : en) CHECK(n.rfind("eomt.", 0) == 0);
}

TEST_CASE("zero-initialized propagation reproduces the learned queries") {
  Rng rng(5);
  PmtModel<double> m;
  m.init(tiny_config(), ModelVariant::Pmt, rng);
  TrackState<double> st = m.start_track();
  REQUIRE(st.empty());

  DecoderOut<double> out;
  out.queries = Tensor<double>({tiny_config().num_queries, tiny_config().embed_dim});
  fill_normal(out.queries, rng, 1.0);
  m.advance(st, out);
  REQUIRE(!st.empty());
  CHECK(st.frame_index == 1);

  Tensor<double> q = m.frame_queries(nullptr, st);
  CHECK(bits_equal(q, m.decoder.learned_queries));
}

TEST_CASE("frame zero of a clip bit-matches the image forward") {
  Rng rng(6);
  PmtModel<double> m;
  m.init(tiny_config(), ModelVariant::Pmt, rng);
  Tensor<double> image = test_image(m.cfg, 900);

  DecoderOut<double> img = m.forward_image(nullptr, image, false, 0, 1, 0);

  TrackState<double> st = m.start_track();
  EncoderCache<double> cache = m.encode(nullptr, image);
  Tensor<double> q = m.frame_queries(nullptr, st);
  DecoderOut<double> vid = m.forward_cached(nullptr, cache, q, false, 0, 1, 0);

  REQUIRE(img.preds.size() == 1);
  REQUIRE(vid.preds.size() == 1);
  CHECK(bits_equal(img.preds[0].class_logits, vid.preds[0].class_logits));
  CHECK(bits_equal(img.preds[0].mask_logits, vid.preds[0].mask_logits));
  CHECK(bits_equal(img.queries, vid.queries));
}

TEST_CASE("training mode emits one prediction set per decoder layer plus the final") {
  Rng rng(7);
  PmtModel<double> m;
  m.init(tiny_config(), ModelVariant::Pmt, rng);
  Tensor<double> image = test_image(m.cfg, 901);
  Tape<double> tape;
  DecoderOut<double> out = m.forward_image(&tape, image, true, 10, 100, 42);
  CHECK(out.preds.size() == static_cast<std::size_t>(m.cfg.decoder_layers) + 1);
  DecoderOut<double> ev = m.forward_image(nullptr, image, false, 10, 100, 42);
  CHECK(ev.preds.size() == 1);
}

TEST_CASE("query-injection baseline has the standard output shapes") {
  Rng rng(8);
  PmtModel<double> m;
  m.init(tiny_config(), ModelVariant::EomtFrozen, rng);
  Tensor<double> image = test_image(m.cfg, 902);
  DecoderOut<double> out = m.forward_image(nullptr, image, true, 0, 100, 0);
  REQUIRE(out.preds.size() == 1);  // no deep supervision in the baseline
  CHECK(out.preds[0].class_logits.shape() == Shape{m.cfg.num_queries, m.cfg.num_classes + 1});
  CHECK(out.preds[0].mask_logits.shape() ==
        Shape{m.cfg.num_queries, m.cfg.mask_h(), m.cfg.mask_w()});
}

TEST_CASE("checkpoints restore exact values and reject wrong variants") {
  Rng rng_a(9), rng_b(10);
  PmtModel<double> a, b;
  a.init(tiny_config(), ModelVariant::Pmt, rng_a);
  b.init(tiny_config(), ModelVariant::Pmt, rng_b);
  REQUIRE(a.checksum() != b.checksum());

  Container c;
  a.save_model(c);
  b.load_model(c);
  CHECK(a.checksum() == b.checksum());

  Tensor<double> image = test_image(a.cfg, 903);
  DecoderOut<double> oa = a.forward_image(nullptr, image, false, 0, 1, 0);
  DecoderOut<double> ob = b.forward_image(nullptr, image, false, 0, 1, 0);
  CHECK(bits_equal(oa.preds[0].mask_logits, ob.preds[0].mask_logits));

  PmtModel<double> wrong;
  Rng rng_c(11);
  wrong.init(tiny_config(), ModelVariant::PmtNoRope, rng_c);
  CHECK_THROWS_AS(wrong.load_model(c), std::runtime_error);
}

TEST_CASE("checkpoint containers round-trip through disk") {
  Rng rng(12);
  PmtModel<double> m;
  m.init(tiny_config(), ModelVariant::PmtNoLateral, rng);
  Container c;
  m.save_model(c);
  c.save("/tmp/pmt_model_test.pmtc");
  Container back = Container::load("/tmp/pmt_model_test.pmtc");
  PmtModel<double> restored;
  Rng rng2(13);
  restored.init(tiny_config(), ModelVariant::PmtNoLateral, rng2);
  restored.load_model(back);
  CHECK(restored.checksum() == m.checksum());
}
