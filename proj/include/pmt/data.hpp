#pragma once

#include "pmt/config.hpp"
#include "pmt/container.hpp"
#include "pmt/panoptic.hpp"
#include "pmt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace pmt {

// Class palette: things 0 = disk, 1 = square, 2 = triangle; stuff 3 and 4
// are the two background regions above and below the horizon.
inline constexpr Index kDiskClass = 0;
inline constexpr Index kSquareClass = 1;
inline constexpr Index kTriangleClass = 2;
inline constexpr Index kStuffAClass = 3;
inline constexpr Index kStuffBClass = 4;
inline constexpr Index kNumThingClasses = 3;

template <typename S>
struct Sample {
  Tensor<S> image;  // [3, H, W] in [0, 1]
  PanopticMap pan;
};

template <typename S>
using Clip = std::vector<Sample<S>>;

namespace detail {

struct ShapeInst {
  int kind = 0;  // class id 0..2
  int cx = 0, cy = 0, r = 0;
  int vx = 0, vy = 0;
  double color[3] = {0, 0, 0};
  std::int32_t id = 0;
  bool alive = true;
};

inline bool covers(const ShapeInst& s, Index y, Index x) {
  const double dx = static_cast<double>(x) - s.cx;
  const double dy = static_cast<double>(y) - s.cy;
  switch (s.kind) {
    case 0: return dx * dx + dy * dy <= static_cast<double>(s.r) * s.r;
    case 1: return std::abs(dx) <= s.r && std::abs(dy) <= s.r;
    default: {
      if (dy < -s.r || dy > s.r) return false;
      return std::abs(dx) <= (dy + s.r) * 0.5;
    }
  }
}

inline const double* base_color(int kind) {
  static const double things[3][3] = {
      {0.80, 0.25, 0.20}, {0.85, 0.75, 0.20}, {0.70, 0.25, 0.75}};
  return things[kind];
}

inline ShapeInst sample_shape(Rng& rng, Index h, Index w, bool with_velocity,
                              const SyntheticSpec& spec) {
  ShapeInst s;
  s.kind = rng.uniform_int(0, 2);
  s.r = rng.uniform_int(4, 10);
  s.cx = rng.uniform_int(s.r, static_cast<int>(w) - 1 - s.r);
  s.cy = rng.uniform_int(s.r, static_cast<int>(h) - 1 - s.r);
  const double* base = base_color(s.kind);
  for (int c = 0; c < 3; ++c)
    s.color[c] = std::clamp(base[c] + (rng.uniform() - 0.5) * 0.3, 0.0, 1.0);
  if (with_velocity) {
    const int vmax = static_cast<int>(spec.max_speed);
    const int vmin = static_cast<int>(spec.min_speed);
    do {
      s.vx = rng.uniform_int(-vmax, vmax);
      s.vy = rng.uniform_int(-vmax, vmax);
    } while (std::max(std::abs(s.vx), std::abs(s.vy)) < vmin);
  }
  return s;
}

struct FrameScene {
  Index horizon = 0;
  double stuff_color[2][3] = {{0, 0, 0}, {0, 0, 0}};
  std::vector<ShapeInst> shapes;  // z-order: later occludes earlier
};

/// Raster of segment ids for the scene; things below min_area are removed
/// from the rendered set until every remaining one is large enough.
inline std::vector<ShapeInst> render_ids(const FrameScene& scene, Index h, Index w,
                                         Index min_area, std::vector<std::int32_t>& ids) {
  std::vector<ShapeInst> kept = scene.shapes;
  for (;;) {
    ids.assign(static_cast<std::size_t>(h * w), 0);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        ids[static_cast<std::size_t>(y * w + x)] = y < scene.horizon ? 1 : 2;
    for (const auto& s : kept)
      for (Index y = std::max<Index>(0, s.cy - s.r); y <= std::min<Index>(h - 1, s.cy + s.r); ++y)
        for (Index x = std::max<Index>(0, s.cx - s.r); x <= std::min<Index>(w - 1, s.cx + s.r); ++x)
          if (covers(s, y, x)) ids[static_cast<std::size_t>(y * w + x)] = s.id;
    bool removed = false;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      Index area = 0;
      for (auto v : ids) area += v == kept[i].id ? 1 : 0;
      if (area < min_area) {
        kept.erase(kept.begin() + static_cast<std::ptrdiff_t>(i));
        removed = true;
        break;
      }
    }
    if (!removed) return kept;
  }
}

template <typename S>
Sample<S> render_frame(const FrameScene& scene, Index h, Index w, const SyntheticSpec& spec,
                       Rng& noise_rng) {
  Sample<S> out;
  std::vector<std::int32_t> ids;
  std::vector<ShapeInst> kept = render_ids(scene, h, w, spec.min_area, ids);

  out.pan.init(h, w);
  out.pan.ids = ids;
  if (out.pan.area(1) > 0) out.pan.segments.push_back({1, kStuffAClass, false});
  if (out.pan.area(2) > 0) out.pan.segments.push_back({2, kStuffBClass, false});
  for (const auto& s : kept) out.pan.segments.push_back({s.id, s.kind, true});

  out.image = Tensor<S>::zeros({3, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      std::int32_t id = out.pan.id(y, x);
      const double* col = nullptr;
      if (id == 1)
        col = scene.stuff_color[0];
      else if (id == 2)
        col = scene.stuff_color[1];
      else
        for (const auto& s : kept)
          if (s.id == id) col = s.color;
      for (Index c = 0; c < 3; ++c) out.image.at({c, y, x}) = static_cast<S>(col[c]);
    }
  for (Index i = 0; i < out.image.size(); ++i) {
    double v = static_cast<double>(out.image.data()[i]) + noise_rng.normal() * spec.noise_sigma;
    out.image.data()[i] = static_cast<S>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

inline FrameScene sample_scene(Rng& rng, Index h, Index w, const SyntheticSpec& spec,
                               bool with_velocity, std::int32_t& next_id) {
  FrameScene scene;
  scene.horizon = rng.uniform_int(static_cast<int>(h / 4), static_cast<int>(3 * h / 4));
  const double sa[3] = {0.20, 0.35, 0.70}, sb[3] = {0.20, 0.60, 0.30};
  for (int c = 0; c < 3; ++c) {
    scene.stuff_color[0][c] = std::clamp(sa[c] + (rng.uniform() - 0.5) * 0.2, 0.0, 1.0);
    scene.stuff_color[1][c] = std::clamp(sb[c] + (rng.uniform() - 0.5) * 0.2, 0.0, 1.0);
  }
  int count = rng.uniform_int(static_cast<int>(spec.min_instances),
                              static_cast<int>(spec.max_instances));
  for (int i = 0; i < count; ++i) {
    ShapeInst s = sample_shape(rng, h, w, with_velocity, spec);
    s.id = next_id++;
    scene.shapes.push_back(s);
  }
  return scene;
}

}  // namespace detail

/// One still image with its panoptic ground truth, a pure function of
/// (spec, size, seed).
template <typename S>
Sample<S> generate_image(const SyntheticSpec& spec, Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  std::int32_t next_id = 3;
  detail::FrameScene scene = detail::sample_scene(rng, h, w, spec, false, next_id);
  Sample<S> out = detail::render_frame<S>(scene, h, w, spec, rng);
  out.pan.validate();
  return out;
}

/// A clip with stable segment ids: constant-velocity motion with border
/// bounces, plus per-frame spawn/despawn. Retired ids are never reused.
template <typename S>
Clip<S> generate_clip(const SyntheticSpec& spec, Index h, Index w, std::uint64_t seed) {
  if (spec.frames_per_clip < 2) throw std::invalid_argument("clip needs at least 2 frames");
  Rng rng(seed);
  std::int32_t next_id = 3;
  detail::FrameScene scene = detail::sample_scene(rng, h, w, spec, true, next_id);

  Clip<S> out;
  for (Index f = 0; f < spec.frames_per_clip; ++f) {
    if (f > 0) {
      for (auto& s : scene.shapes) {
        s.cx += s.vx;
        s.cy += s.vy;
        int lo_x = s.r, hi_x = static_cast<int>(w) - 1 - s.r;
        int lo_y = s.r, hi_y = static_cast<int>(h) - 1 - s.r;
        if (s.cx < lo_x) { s.cx = 2 * lo_x - s.cx; s.vx = -s.vx; }
        if (s.cx > hi_x) { s.cx = 2 * hi_x - s.cx; s.vx = -s.vx; }
        if (s.cy < lo_y) { s.cy = 2 * lo_y - s.cy; s.vy = -s.vy; }
        if (s.cy > hi_y) { s.cy = 2 * hi_y - s.cy; s.vy = -s.vy; }
      }
      for (std::size_t i = 0; i < scene.shapes.size();) {
        if (rng.uniform() < spec.despawn_prob)
          scene.shapes.erase(scene.shapes.begin() + static_cast<std::ptrdiff_t>(i));
        else
          ++i;
      }
      if (static_cast<Index>(scene.shapes.size()) < spec.max_instances &&
          rng.uniform() < spec.spawn_prob) {
        detail::ShapeInst s = detail::sample_shape(rng, h, w, true, spec);
        s.id = next_id++;
        scene.shapes.push_back(s);
      }
    }
    Sample<S> frame = detail::render_frame<S>(scene, h, w, spec, rng);
    frame.pan.validate();
    out.push_back(std::move(frame));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disk format: one container per sample. Images store "image", "pan.ids"
// and "pan.segments"; clips store a "frames" count and the same entries
// under an "f<k>." prefix.

inline void put_panoptic(Container& c, const std::string& prefix, const PanopticMap& pm) {
  std::vector<std::uint32_t> ids(pm.ids.begin(), pm.ids.end());
  c.put_u32(prefix + "pan.ids", Shape{pm.h, pm.w}, ids.data());
  std::vector<std::uint32_t> seg;
  for (const auto& s : pm.segments) {
    seg.push_back(static_cast<std::uint32_t>(s.id));
    seg.push_back(static_cast<std::uint32_t>(s.class_id));
    seg.push_back(s.is_thing ? 1u : 0u);
  }
  c.put_u32(prefix + "pan.segments", Shape{static_cast<Index>(pm.segments.size()), 3},
            seg.data());
}

inline PanopticMap get_panoptic(const Container& c, const std::string& prefix) {
  PanopticMap pm;
  const ContainerEntry& e = c.at(prefix + "pan.ids");
  if (e.dims.size() != 2) throw std::runtime_error("panoptic raster must be 2-d");
  pm.init(static_cast<Index>(e.dims[0]), static_cast<Index>(e.dims[1]));
  std::vector<std::uint32_t> ids = c.get_u32(prefix + "pan.ids");
  pm.ids.assign(ids.begin(), ids.end());
  std::vector<std::uint32_t> seg = c.get_u32(prefix + "pan.segments");
  for (std::size_t i = 0; i + 3 <= seg.size(); i += 3)
    pm.segments.push_back({static_cast<std::int32_t>(seg[i]), static_cast<Index>(seg[i + 1]),
                           seg[i + 2] != 0});
  pm.validate();
  return pm;
}

inline void write_image_sample(const std::string& path, const Sample<float>& s) {
  Container c;
  c.put("image", s.image);
  put_panoptic(c, "", s.pan);
  c.save(path);
}

inline Sample<float> read_image_sample(const std::string& path) {
  Container c = Container::load(path);
  Sample<float> s;
  s.image = c.get_f32("image");
  s.pan = get_panoptic(c, "");
  return s;
}

inline void write_clip_sample(const std::string& path, const Clip<float>& clip) {
  Container c;
  c.put_u32_scalar("frames", static_cast<std::uint32_t>(clip.size()));
  for (std::size_t f = 0; f < clip.size(); ++f) {
    std::string prefix = "f" + std::to_string(f) + ".";
    c.put(prefix + "image", clip[f].image);
    put_panoptic(c, prefix, clip[f].pan);
  }
  c.save(path);
}

inline Clip<float> read_clip_sample(const std::string& path) {
  Container c = Container::load(path);
  Clip<float> clip;
  std::uint32_t frames = c.get_u32_scalar("frames");
  for (std::uint32_t f = 0; f < frames; ++f) {
    std::string prefix = "f" + std::to_string(f) + ".";
    Sample<float> s;
    s.image = c.get_f32(prefix + "image");
    s.pan = get_panoptic(c, prefix);
    clip.push_back(std::move(s));
  }
  return clip;
}

/// In-memory dataset: all images and clips of one split.
struct DatasetBundle {
  std::vector<Sample<float>> images;
  std::vector<Clip<float>> clips;
};

/// Per-sample seeds derive from the base seed and a namespaced index, so
/// every sample is independent of dataset sizes ordered before it.
inline std::uint64_t sample_seed(std::uint64_t base, std::uint64_t space, std::uint64_t index) {
  return hash_combine(hash_combine(base, space), index);
}

inline DatasetBundle generate_split(const SyntheticSpec& spec, Index h, Index w, bool train) {
  DatasetBundle out;
  const std::uint64_t img_space = train ? 1 : 2, clip_space = train ? 3 : 4;
  Index n_img = train ? spec.train_images : spec.val_images;
  Index n_clip = train ? spec.train_clips : spec.val_clips;
  for (Index i = 0; i < n_img; ++i)
    out.images.push_back(
        generate_image<float>(spec, h, w, sample_seed(spec.seed, img_space, i)));
  for (Index i = 0; i < n_clip; ++i)
    out.clips.push_back(generate_clip<float>(spec, h, w, sample_seed(spec.seed, clip_space, i)));
  return out;
}

/// Writes both splits plus a manifest ("<split> <kind> <relative path>" per
/// line) under data_dir.
inline void write_dataset(const SyntheticSpec& spec, Index h, Index w,
                          const std::string& data_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(data_dir) / "images");
  fs::create_directories(fs::path(data_dir) / "clips");
  std::ofstream manifest(fs::path(data_dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write manifest under " + data_dir);
  for (int split = 0; split < 2; ++split) {
    bool train = split == 0;
    const char* name = train ? "train" : "val";
    DatasetBundle bundle = generate_split(spec, h, w, train);
    for (std::size_t i = 0; i < bundle.images.size(); ++i) {
      std::string rel = "images/" + std::string(name) + "_" + std::to_string(i) + ".pmtc";
      write_image_sample((fs::path(data_dir) / rel).string(), bundle.images[i]);
      manifest << name << " img " << rel << "\n";
    }
    for (std::size_t i = 0; i < bundle.clips.size(); ++i) {
      std::string rel = "clips/" + std::string(name) + "_" + std::to_string(i) + ".pmtc";
      write_clip_sample((fs::path(data_dir) / rel).string(), bundle.clips[i]);
      manifest << name << " clip " << rel << "\n";
    }
  }
}

inline DatasetBundle load_split(const std::string& data_dir, const std::string& split) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(data_dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("no manifest under " + data_dir);
  DatasetBundle out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string sp, kind, rel;
    if (!(ls >> sp >> kind >> rel)) throw std::runtime_error("bad manifest line: " + line);
    if (sp != split) continue;
    std::string path = (fs::path(data_dir) / rel).string();
    if (kind == "img")
      out.images.push_back(read_image_sample(path));
    else if (kind == "clip")
      out.clips.push_back(read_clip_sample(path));
    else
      throw std::runtime_error("unknown sample kind: " + kind);
  }
  return out;
}

}  // namespace pmt
