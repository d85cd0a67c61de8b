#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pmt/data.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <set>

using namespace pmt;

namespace {

SyntheticSpec quiet_spec() {
  SyntheticSpec s;
  s.noise_sigma = 0.0;
  s.spawn_prob = 0.0;
  s.despawn_prob = 0.0;
  return s;
}

double centroid_x(const PanopticMap& pm, std::int32_t id) {
  double sx = 0.0;
  Index n = 0;
  for (Index r = 0; r < pm.h; ++r)
    for (Index c = 0; c < pm.w; ++c)
      if (pm.id(r, c) == id) {
        sx += static_cast<double>(c);
        ++n;
      }
  return sx / static_cast<double>(n);
}

}  // namespace

TEST_CASE("zero instances gives a pure stuff map") {
  SyntheticSpec spec = quiet_spec();
  spec.min_instances = spec.max_instances = 0;
  Sample<float> s = generate_image<float>(spec, 64, 64, 9);
  REQUIRE(s.pan.segments.size() == 2);
  CHECK(!s.pan.segments[0].is_thing);
  CHECK(!s.pan.segments[1].is_thing);
  CHECK(s.pan.area(1) + s.pan.area(2) == 64 * 64);
  // Both stuff regions span at least a quarter of the image.
  CHECK(s.pan.area(1) >= 16 * 64);
  CHECK(s.pan.area(2) >= 16 * 64);
}

TEST_CASE("same seed reproduces the sample bit for bit") {
  SyntheticSpec spec;
  Sample<float> a = generate_image<float>(spec, 64, 64, 1234);
  Sample<float> b = generate_image<float>(spec, 64, 64, 1234);
  Sample<float> c = generate_image<float>(spec, 64, 64, 1235);
  CHECK(std::memcmp(a.image.data(), b.image.data(), sizeof(float) * a.image.size()) == 0);
  CHECK(a.pan.ids == b.pan.ids);
  bool differs = std::memcmp(a.image.data(), c.image.data(), sizeof(float) * a.image.size()) != 0;
  CHECK(differs);
}

TEST_CASE("every thing instance meets the minimum area after occlusion") {
  SyntheticSpec spec;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Sample<float> s = generate_image<float>(spec, 64, 64, seed);
    for (const auto& seg : s.pan.segments)
      if (seg.is_thing) CHECK(s.pan.area(seg.id) >= spec.min_area);
  }
}

TEST_CASE("later shapes occlude earlier ones exactly") {
  // Two disks drawn directly through the raster helper with fixed centers.
  detail::FrameScene scene;
  scene.horizon = 32;
  detail::ShapeInst a, b;
  a.kind = 0; a.cx = 28; a.cy = 30; a.r = 8; a.id = 3;
  b.kind = 0; b.cx = 36; b.cy = 30; b.r = 8; b.id = 4;
  scene.shapes = {a, b};

  std::vector<std::int32_t> ids;
  detail::render_ids(scene, 64, 64, 16, ids);

  Index area_b = 0, overlap_claimed_by_a = 0;
  for (Index y = 0; y < 64; ++y)
    for (Index x = 0; x < 64; ++x) {
      bool in_a = detail::covers(a, y, x), in_b = detail::covers(b, y, x);
      std::int32_t v = ids[static_cast<std::size_t>(y * 64 + x)];
      if (in_b) {
        CHECK(v == 4);  // later shape keeps every pixel
        ++area_b;
      } else if (in_a) {
        CHECK(v == 3);  // earlier shape keeps only the unoccluded part
      }
      if (in_a && in_b && v == 3) ++overlap_claimed_by_a;
    }
  CHECK(area_b > 0);
  CHECK(overlap_claimed_by_a == 0);
}

TEST_CASE("zero velocity freezes the clip") {
  SyntheticSpec spec = quiet_spec();
  spec.min_speed = spec.max_speed = 0.0;
  Clip<float> clip = generate_clip<float>(spec, 64, 64, 5);
  REQUIRE(clip.size() == 5);
  for (std::size_t f = 1; f < clip.size(); ++f) {
    CHECK(clip[f].pan.ids == clip[0].pan.ids);
    // Images differ only by the (disabled) noise, so they are identical too.
    CHECK(std::memcmp(clip[f].image.data(), clip[0].image.data(),
                      sizeof(float) * clip[0].image.size()) == 0);
  }
}

TEST_CASE("constant velocity moves the mask centroid by the velocity") {
  SyntheticSpec spec = quiet_spec();
  // Search a few seeds for a clip whose single object never bounces.
  bool checked = false;
  for (std::uint64_t seed = 0; seed < 200 && !checked; ++seed) {
    SyntheticSpec one = spec;
    one.min_instances = one.max_instances = 1;
    Clip<float> clip = generate_clip<float>(one, 64, 64, seed);
    std::int32_t id = 0;
    for (const auto& seg : clip[0].pan.segments)
      if (seg.is_thing) id = seg.id;
    if (id == 0) continue;
    bool in_all = true;
    for (auto& fr : clip) in_all = in_all && fr.pan.find(id) && fr.pan.area(id) > 100;
    if (!in_all) continue;
    double d01 = centroid_x(clip[1].pan, id) - centroid_x(clip[0].pan, id);
    double d12 = centroid_x(clip[2].pan, id) - centroid_x(clip[1].pan, id);
    if (std::abs(d01 - d12) > 0.3) continue;  // a bounce happened; try another seed
    // Steps are integer pixel shifts, so consecutive centroid deltas agree.
    CHECK(d01 == doctest::Approx(d12).epsilon(1e-9));
    CHECK(std::abs(d01) <= spec.max_speed + 1e-9);
    checked = true;
  }
  CHECK(checked);
}

TEST_CASE("despawned ids are never reused within a clip") {
  // Every frame despawns the object and spawns a replacement, so each
  // frame's single thing must carry a strictly larger id than all before.
  SyntheticSpec spec = quiet_spec();
  spec.min_instances = spec.max_instances = 1;
  spec.spawn_prob = 1.0;
  spec.despawn_prob = 1.0;
  spec.frames_per_clip = 6;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Clip<float> clip = generate_clip<float>(spec, 64, 64, seed);
    std::int32_t last = 0;
    for (const auto& fr : clip) {
      std::vector<std::int32_t> things;
      for (const auto& seg : fr.pan.segments)
        if (seg.is_thing) things.push_back(seg.id);
      REQUIRE(things.size() == 1);
      CHECK(things[0] > last);
      last = things[0];
    }
  }
}

TEST_CASE("image and clip samples roundtrip through disk") {
  namespace fs = std::filesystem;
  SyntheticSpec spec;
  fs::path dir = fs::temp_directory_path() / "pmt_data_test";
  fs::create_directories(dir);

  Sample<float> img = generate_image<float>(spec, 64, 64, 77);
  write_image_sample((dir / "img.pmtc").string(), img);
  Sample<float> img2 = read_image_sample((dir / "img.pmtc").string());
  CHECK(std::memcmp(img.image.data(), img2.image.data(), sizeof(float) * img.image.size()) == 0);
  CHECK(img.pan.ids == img2.pan.ids);
  REQUIRE(img.pan.segments.size() == img2.pan.segments.size());
  for (std::size_t i = 0; i < img.pan.segments.size(); ++i) {
    CHECK(img.pan.segments[i].id == img2.pan.segments[i].id);
    CHECK(img.pan.segments[i].class_id == img2.pan.segments[i].class_id);
    CHECK(img.pan.segments[i].is_thing == img2.pan.segments[i].is_thing);
  }

  Clip<float> clip = generate_clip<float>(spec, 64, 64, 78);
  write_clip_sample((dir / "clip.pmtc").string(), clip);
  Clip<float> clip2 = read_clip_sample((dir / "clip.pmtc").string());
  REQUIRE(clip.size() == clip2.size());
  for (std::size_t f = 0; f < clip.size(); ++f) {
    CHECK(std::memcmp(clip[f].image.data(), clip2[f].image.data(),
                      sizeof(float) * clip[f].image.size()) == 0);
    CHECK(clip[f].pan.ids == clip2[f].pan.ids);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset writer and loader agree through the manifest") {
  namespace fs = std::filesystem;
  SyntheticSpec spec;
  spec.train_images = 3;
  spec.val_images = 2;
  spec.train_clips = 1;
  spec.val_clips = 1;
  fs::path dir = fs::temp_directory_path() / "pmt_dataset_test";
  fs::remove_all(dir);
  write_dataset(spec, 64, 64, dir.string());

  DatasetBundle train = load_split(dir.string(), "train");
  DatasetBundle val = load_split(dir.string(), "val");
  CHECK(train.images.size() == 3);
  CHECK(train.clips.size() == 1);
  CHECK(val.images.size() == 2);
  CHECK(val.clips.size() == 1);

  // The manifest round-trip preserves generation exactly.
  DatasetBundle direct = generate_split(spec, 64, 64, true);
  CHECK(std::memcmp(train.images[0].image.data(), direct.images[0].image.data(),
                    sizeof(float) * direct.images[0].image.size()) == 0);
  fs::remove_all(dir);
}

TEST_CASE("clip ground truth ids are stable while an object lives") {
  SyntheticSpec spec;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Clip<float> clip = generate_clip<float>(spec, 64, 64, seed);
    // Stuff ids 1 and 2 appear in every frame with a constant class.
    for (const auto& fr : clip) {
      const SegmentInfo* a = fr.pan.find(1);
      const SegmentInfo* b = fr.pan.find(2);
      REQUIRE(a != nullptr);
      REQUIRE(b != nullptr);
      CHECK(a->class_id == kStuffAClass);
      CHECK(b->class_id == kStuffBClass);
    }
    // A thing id keeps its class across every frame it appears in.
    std::map<std::int32_t, Index> cls;
    for (const auto& fr : clip)
      for (const auto& seg : fr.pan.segments)
        if (seg.is_thing) {
          auto it = cls.find(seg.id);
          if (it == cls.end())
            cls[seg.id] = seg.class_id;
          else
            CHECK(it->second == seg.class_id);
        }
  }
}
