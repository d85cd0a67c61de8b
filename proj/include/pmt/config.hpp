#pragma once

#include "pmt/tensor.hpp"

#include <string>
#include <vector>

namespace pmt {

struct ModelConfig {
  Index image_height = 64;
  Index image_width = 64;
  Index patch_size = 8;
  Index embed_dim = 128;
  Index num_layers = 8;
  Index num_heads = 4;
  Index num_register_tokens = 2;
  Index ffn_expansion = 4;
  double rope_base = 100.0;
  std::vector<Index> tap_layers = {2, 4, 6, 8};
  bool freeze_encoder = true;
  Index num_queries = 20;
  Index decoder_layers = 6;
  Index decoder_ffn_expansion = 1;
  Index eomt_l1 = 4;
  Index eomt_l2 = 4;
  Index num_classes = 5;
  double anneal_start_frac = 0.2;
  double anneal_end_frac = 0.9;

  Index grid_h() const { return image_height / patch_size; }
  Index grid_w() const { return image_width / patch_size; }
  Index num_patches() const { return grid_h() * grid_w(); }
  Index head_dim() const { return embed_dim / num_heads; }
  Index mask_h() const { return image_height / 4; }
  Index mask_w() const { return image_width / 4; }

  void validate() const;
};

struct LossWeights {
  double lambda_cls = 2.0;
  double lambda_bce = 5.0;
  double lambda_dice = 5.0;
  double no_object_weight = 0.1;

  void validate() const;
};

struct SyntheticSpec {
  Index train_images = 256;
  Index val_images = 64;
  Index train_clips = 48;
  Index val_clips = 16;
  Index frames_per_clip = 5;
  Index min_instances = 1;
  Index max_instances = 4;
  double min_speed = 1.0;
  double max_speed = 3.0;
  double spawn_prob = 0.08;
  double despawn_prob = 0.04;
  double noise_sigma = 0.02;
  Index min_area = 16;
  std::uint64_t seed = 1234;

  void validate() const;
};

struct TrainSchedule {
  Index steps = 3000;
  Index warmup_steps = 100;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string decay = "cosine";  // cosine | poly
  double poly_power = 0.9;
  Index batch_images = 8;
  Index batch_clips = 2;
  Index log_every = 50;
  double grad_clip = 0.0;  // 0 disables

  void validate() const;
};

struct EvalConfig {
  double class_score_threshold = 0.5;
  Index min_area = 16;
  double overlap_retention = 0.8;

  void validate() const;
};

struct Paths {
  std::string data_dir = "data";
  std::string encoder_checkpoint = "runs/encoder.pmtc";
  std::string init_checkpoint;  // optional: model weights to start training from
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  SyntheticSpec data;
  TrainSchedule schedule;
  EvalConfig eval;
  Paths paths;

  void validate() const;

  /// Strict section/key parser: unknown sections or keys, malformed lines,
  /// and unparsable values are all errors.
  static RunConfig parse_string(const std::string& text);
  static RunConfig parse_file(const std::string& path);
};

}  // namespace pmt
