#include "pmt/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace pmt {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& where, const std::string& raw,
                            const char* expected) {
  throw std::invalid_argument("config: cannot parse " + where + " = '" + raw + "' as " +
                              expected);
}

Index parse_i64(const std::string& where, const std::string& raw) {
  Index v = 0;
  auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (ec != std::errc() || p != raw.data() + raw.size()) bad_value(where, raw, "an integer");
  return v;
}

std::uint64_t parse_u64(const std::string& where, const std::string& raw) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (ec != std::errc() || p != raw.data() + raw.size())
    bad_value(where, raw, "an unsigned integer");
  return v;
}

double parse_f64(const std::string& where, const std::string& raw) {
  try {
    std::size_t pos = 0;
    double v = std::stod(raw, &pos);
    if (pos != raw.size()) bad_value(where, raw, "a number");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(where, raw, "a number");
  } catch (const std::out_of_range&) {
    bad_value(where, raw, "a number in range");
  }
}

bool parse_bool(const std::string& where, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  bad_value(where, raw, "a boolean (true/false)");
}

std::vector<Index> parse_index_list(const std::string& where, const std::string& raw) {
  std::vector<Index> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) bad_value(where, raw, "a comma-separated integer list");
    out.push_back(parse_i64(where, item));
  }
  if (out.empty()) bad_value(where, raw, "a comma-separated integer list");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& binding_table() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto bind_i64 = [&t](const char* key, Index* (*get)(RunConfig&)) {
      t[key] = [get](RunConfig& c, const std::string& where, const std::string& raw) {
        *get(c) = parse_i64(where, raw);
      };
    };
    auto bind_f64 = [&t](const char* key, double* (*get)(RunConfig&)) {
      t[key] = [get](RunConfig& c, const std::string& where, const std::string& raw) {
        *get(c) = parse_f64(where, raw);
      };
    };
    auto bind_bool = [&t](const char* key, bool* (*get)(RunConfig&)) {
      t[key] = [get](RunConfig& c, const std::string& where, const std::string& raw) {
        *get(c) = parse_bool(where, raw);
      };
    };
    auto bind_str = [&t](const char* key, std::string* (*get)(RunConfig&)) {
      t[key] = [get](RunConfig& c, const std::string&, const std::string& raw) {
        *get(c) = raw;
      };
    };

#define PMT_I64(key, field) \
  bind_i64(key, +[](RunConfig& c) { return &c.field; })
#define PMT_F64(key, field) \
  bind_f64(key, +[](RunConfig& c) { return &c.field; })
#define PMT_BOOL(key, field) \
  bind_bool(key, +[](RunConfig& c) { return &c.field; })
#define PMT_STR(key, field) \
  bind_str(key, +[](RunConfig& c) { return &c.field; })

    PMT_I64("model.image_height", model.image_height);
    PMT_I64("model.image_width", model.image_width);
    PMT_I64("model.patch_size", model.patch_size);
    PMT_I64("model.embed_dim", model.embed_dim);
    PMT_I64("model.num_layers", model.num_layers);
    PMT_I64("model.num_heads", model.num_heads);
    PMT_I64("model.num_register_tokens", model.num_register_tokens);
    PMT_I64("model.ffn_expansion", model.ffn_expansion);
    PMT_F64("model.rope_base", model.rope_base);
    PMT_BOOL("model.freeze_encoder", model.freeze_encoder);
    PMT_I64("model.num_queries", model.num_queries);
    PMT_I64("model.decoder_layers", model.decoder_layers);
    PMT_I64("model.decoder_ffn_expansion", model.decoder_ffn_expansion);
    PMT_I64("model.eomt_l1", model.eomt_l1);
    PMT_I64("model.eomt_l2", model.eomt_l2);
    PMT_I64("model.num_classes", model.num_classes);
    PMT_F64("model.anneal_start_frac", model.anneal_start_frac);
    PMT_F64("model.anneal_end_frac", model.anneal_end_frac);
    t["model.tap_layers"] = [](RunConfig& c, const std::string& where, const std::string& raw) {
      c.model.tap_layers = parse_index_list(where, raw);
    };

    PMT_F64("loss.lambda_cls", loss.lambda_cls);
    PMT_F64("loss.lambda_bce", loss.lambda_bce);
    PMT_F64("loss.lambda_dice", loss.lambda_dice);
    PMT_F64("loss.no_object_weight", loss.no_object_weight);

    PMT_I64("data.train_images", data.train_images);
    PMT_I64("data.val_images", data.val_images);
    PMT_I64("data.train_clips", data.train_clips);
    PMT_I64("data.val_clips", data.val_clips);
    PMT_I64("data.frames_per_clip", data.frames_per_clip);
    PMT_I64("data.min_instances", data.min_instances);
    PMT_I64("data.max_instances", data.max_instances);
    PMT_F64("data.min_speed", data.min_speed);
    PMT_F64("data.max_speed", data.max_speed);
    PMT_F64("data.spawn_prob", data.spawn_prob);
    PMT_F64("data.despawn_prob", data.despawn_prob);
    PMT_F64("data.noise_sigma", data.noise_sigma);
    PMT_I64("data.min_area", data.min_area);
    t["data.seed"] = [](RunConfig& c, const std::string& where, const std::string& raw) {
      c.data.seed = parse_u64(where, raw);
    };

    PMT_I64("schedule.steps", schedule.steps);
    PMT_I64("schedule.warmup_steps", schedule.warmup_steps);
    PMT_F64("schedule.lr", schedule.lr);
    PMT_F64("schedule.weight_decay", schedule.weight_decay);
    PMT_F64("schedule.beta1", schedule.beta1);
    PMT_F64("schedule.beta2", schedule.beta2);
    PMT_F64("schedule.adam_eps", schedule.adam_eps);
    PMT_STR("schedule.decay", schedule.decay);
    PMT_F64("schedule.poly_power", schedule.poly_power);
    PMT_I64("schedule.batch_images", schedule.batch_images);
    PMT_I64("schedule.batch_clips", schedule.batch_clips);
    PMT_I64("schedule.log_every", schedule.log_every);
    PMT_F64("schedule.grad_clip", schedule.grad_clip);

    PMT_F64("eval.class_score_threshold", eval.class_score_threshold);
    PMT_I64("eval.min_area", eval.min_area);
    PMT_F64("eval.overlap_retention", eval.overlap_retention);

    PMT_STR("paths.data_dir", paths.data_dir);
    PMT_STR("paths.encoder_checkpoint", paths.encoder_checkpoint);
    PMT_STR("paths.init_checkpoint", paths.init_checkpoint);

#undef PMT_I64
#undef PMT_F64
#undef PMT_BOOL
#undef PMT_STR
    return t;
  }();
  return table;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (patch_size <= 0 || image_height <= 0 || image_width <= 0) fail("non-positive image/patch size");
  if (image_height % patch_size != 0 || image_width % patch_size != 0)
    fail("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
         " not divisible by patch size " + std::to_string(patch_size));
  if (image_height % 4 != 0 || image_width % 4 != 0) fail("image size must be divisible by 4");
  if (patch_size % 4 != 0) fail("patch size must be a multiple of 4 for the mask head upscale");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
         std::to_string(num_heads));
  if (head_dim() % 4 != 0)
    fail("head dim " + std::to_string(head_dim()) + " must be divisible by 4 for 2-D rotations");
  if (num_layers <= 0) fail("num_layers must be positive");
  if (tap_layers.empty()) fail("tap_layers must not be empty");
  for (std::size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 1 || tap_layers[i] > num_layers)
      fail("tap layer " + std::to_string(tap_layers[i]) + " outside [1, L]");
    if (i && tap_layers[i] <= tap_layers[i - 1]) fail("tap_layers must be sorted and unique");
  }
  if (tap_layers.back() != num_layers) fail("final layer must be tapped");
  if (num_register_tokens < 0) fail("negative register token count");
  if (ffn_expansion <= 0 || decoder_ffn_expansion <= 0) fail("non-positive FFN expansion");
  if (rope_base <= 1.0) fail("rope_base must exceed 1");
  if (num_queries <= 0) fail("num_queries must be positive");
  if (decoder_layers < 0) fail("negative decoder_layers");
  if (eomt_l1 < 0 || eomt_l2 < 0 || eomt_l1 + eomt_l2 != num_layers)
    fail("eomt split " + std::to_string(eomt_l1) + "+" + std::to_string(eomt_l2) +
         " must sum to num_layers");
  if (num_classes < 1) fail("num_classes must be at least 1");
  if (!(anneal_start_frac >= 0.0 && anneal_start_frac < anneal_end_frac &&
        anneal_end_frac <= 1.0))
    fail("anneal window must satisfy 0 <= start < end <= 1");
}

void LossWeights::validate() const {
  if (lambda_cls < 0 || lambda_bce < 0 || lambda_dice < 0 || no_object_weight < 0)
    throw std::invalid_argument("config: loss weights must be non-negative");
}

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (train_images < 0 || val_images < 0 || train_clips < 0 || val_clips < 0)
    fail("negative dataset size");
  if (frames_per_clip < 2) fail("frames_per_clip must be at least 2");
  if (min_instances < 0 || max_instances < min_instances) fail("bad instance count range");
  if (min_speed < 0 || max_speed < min_speed) fail("bad speed range");
  if (spawn_prob < 0 || spawn_prob > 1 || despawn_prob < 0 || despawn_prob > 1)
    fail("spawn/despawn probabilities must be in [0,1]");
  if (noise_sigma < 0) fail("negative noise sigma");
  if (min_area < 0) fail("negative min_area");
}

void TrainSchedule::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (steps < 0 || warmup_steps < 0) fail("negative step counts");
  if (lr <= 0) fail("lr must be positive");
  if (weight_decay < 0) fail("negative weight decay");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0,1)");
  if (adam_eps <= 0) fail("adam_eps must be positive");
  if (decay != "cosine" && decay != "poly") fail("decay must be 'cosine' or 'poly'");
  if (poly_power <= 0) fail("poly_power must be positive");
  if (batch_images <= 0 || batch_clips <= 0) fail("batch sizes must be positive");
  if (log_every <= 0) fail("log_every must be positive");
  if (grad_clip < 0) fail("negative grad_clip");
}

void EvalConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (class_score_threshold < 0 || class_score_threshold > 1)
    fail("class_score_threshold must be in [0,1]");
  if (min_area < 0) fail("negative eval min_area");
  if (overlap_retention < 0 || overlap_retention > 1)
    fail("overlap_retention must be in [0,1]");
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  data.validate();
  schedule.validate();
  eval.validate();
}

RunConfig RunConfig::parse_string(const std::string& text) {
  RunConfig cfg;
  const auto& table = binding_table();
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": empty section name");
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
    if (section.empty())
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": key '" + key +
                                  "' outside any section");
    std::string full = section + "." + key;
    auto it = table.find(full);
    if (it == table.end())
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": unknown key '" +
                                  full + "'");
    it->second(cfg, full, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_string(buf.str());
}

}  // namespace pmt
