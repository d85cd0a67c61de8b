#include "pmt/gradsuite.hpp"
#include "pmt/trainer.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

using namespace pmt;
namespace fs = std::filesystem;

namespace {

int usage(std::ostream& os, int code) {
  os << "usage: pmt <command> [flags]\n"
        "\n"
        "commands\n"
        "  gen-data           write the synthetic dataset under paths.data_dir\n"
        "  pretrain-encoder   run the classification pretext, save the encoder\n"
        "  train              train a model variant, image or video mode\n"
        "  eval               evaluate a checkpoint on a split\n"
        "  gradcheck          64-bit finite-difference suite, nonzero exit on failure\n"
        "  bench              forward latency over repeated runs\n"
        "  ablate             train and evaluate every variant, print a table\n"
        "\n"
        "flags\n"
        "  --config PATH      run configuration, required except for gradcheck\n"
        "  --seed N           initialization and data-order seed (default 1)\n"
        "  --steps N          step target override\n"
        "  --out PATH         artifact path: dataset dir, checkpoint to write,\n"
        "                     or for eval the checkpoint to read\n"
        "  --model NAME       pmt | pmt-nolateral | pmt-norope | eomt-frozen\n"
        "  --mode M           image | video (default image)\n"
        "  --split S          train | val (default val)\n"
        "\n"
        "The environment variable PMT_THREADS caps evaluation parallelism.\n";
  return code;
}

struct Args {
  std::string command;
  std::string config;
  std::string out;
  std::string model = "pmt";
  std::string mode = "image";
  std::string split = "val";
  std::uint64_t seed = 1;
  Index steps = -1;  // -1 means "use the schedule"
};

Args parse_args(int argc, char** argv) {
  Args a;
  a.command = argv[1];
  for (int i = 2; i < argc; i += 2) {
    std::string flag = argv[i];
    if (i + 1 >= argc) throw std::invalid_argument("flag " + flag + " needs a value");
    std::string val = argv[i + 1];
    if (flag == "--config")
      a.config = val;
    else if (flag == "--seed")
      a.seed = std::stoull(val);
    else if (flag == "--steps")
      a.steps = static_cast<Index>(std::stoll(val));
    else if (flag == "--out")
      a.out = val;
    else if (flag == "--model")
      a.model = val;
    else if (flag == "--mode")
      a.mode = val;
    else if (flag == "--split")
      a.split = val;
    else
      throw std::invalid_argument("unknown flag: " + flag);
  }
  if (a.mode != "image" && a.mode != "video")
    throw std::invalid_argument("--mode must be image or video, got " + a.mode);
  return a;
}

RunConfig require_config(const Args& a) {
  if (a.config.empty()) throw std::invalid_argument(a.command + " requires --config");
  return RunConfig::parse_file(a.config);
}

void ensure_parent(const std::string& path) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

/// Loads pretext-trained encoder weights into the model's frozen encoder.
template <typename S>
void adopt_encoder(PmtModel<S>& model, const std::string& path) {
  if (!fs::exists(path))
    throw std::runtime_error("encoder checkpoint not found: " + path +
                             " (run pretrain-encoder first)");
  Container c = Container::load(path);
  ParamList<S> ps;
  model.encoder.collect(ps);
  load_params(c, ps);
}

int cmd_gen_data(const Args& a) {
  RunConfig rc = require_config(a);
  if (a.seed != 1) rc.data.seed = a.seed;
  std::string dir = a.out.empty() ? rc.paths.data_dir : a.out;
  write_dataset(rc.data, rc.model.image_height, rc.model.image_width, dir);
  std::cout << Record()
                   .kv("wrote", dir)
                   .kv("train_images", rc.data.train_images)
                   .kv("val_images", rc.data.val_images)
                   .kv("train_clips", rc.data.train_clips)
                   .kv("val_clips", rc.data.val_clips)
                   .str()
            << "\n";
  return 0;
}

int cmd_pretrain(const Args& a) {
  RunConfig rc = require_config(a);
  DatasetBundle train = load_split(rc.paths.data_dir, "train");
  DatasetBundle val = load_split(rc.paths.data_dir, "val");
  TrainSchedule sched = rc.schedule;
  if (a.steps >= 0) sched.steps = a.steps;

  Encoder<float> enc;
  Rng rng(a.seed);
  enc.init(rc.model, rng);
  PretextStats st =
      pretrain_encoder(enc, train.images, val.images, sched, kNumThingClasses, a.seed,
                       &std::cout);

  std::string path = a.out.empty() ? rc.paths.encoder_checkpoint : a.out;
  ensure_parent(path);
  Container c;
  ParamList<float> ps;
  enc.collect(ps);
  save_params(c, ps);
  c.save(path);
  std::cout << Record().kv("saved", path).kv("val_accuracy", st.val_accuracy).str() << "\n";
  return 0;
}

template <typename Trainer, typename EvalFn>
void train_with_evals(Trainer& trainer, Index target, EvalFn&& eval_log) {
  while (trainer.step() < target) {
    Index chunk = std::min<Index>(500, target - trainer.step());
    trainer.run(chunk, &std::cout);
    eval_log(trainer.step());
  }
  if (target == 0) eval_log(0);
}

int cmd_train(const Args& a) {
  RunConfig rc = require_config(a);
  ModelVariant variant = parse_variant(a.model);
  DatasetBundle train = load_split(rc.paths.data_dir, "train");
  DatasetBundle val = load_split(rc.paths.data_dir, "val");

  PmtModel<float> model;
  Rng rng(a.seed);
  model.init(rc.model, variant, rng);
  if (!rc.paths.init_checkpoint.empty())
    model.load_model(Container::load(rc.paths.init_checkpoint));
  else
    adopt_encoder(model, rc.paths.encoder_checkpoint);

  std::string out = a.out.empty() ? "runs/" + a.model + "-" + a.mode + ".pmtc" : a.out;
  Index target = a.steps >= 0 ? a.steps : rc.schedule.steps;

  auto finish = [&](auto& trainer) {
    ensure_parent(out);
    Container c;
    trainer.save(c);
    c.save(out);
    std::cout << Record().kv("saved", out).kv("step", trainer.step()).str() << "\n";
  };

  if (a.mode == "image") {
    ImageTrainer<float> trainer(model, train.images, rc, a.seed);
    if (fs::exists(out)) {
      trainer.load(Container::load(out));
      std::cout << Record().kv("resumed", out).kv("step", trainer.step()).str() << "\n";
    }
    train_with_evals(trainer, target, [&](Index step) {
      EvalReport rep =
          evaluate_images(model, val.images, rc.eval, kNumThingClasses, eval_threads());
      std::cout << Record()
                       .kv("step", step)
                       .kv("split", "val")
                       .kv("pq", rep.pq.pq)
                       .kv("sq", rep.pq.sq)
                       .kv("rq", rep.pq.rq)
                       .kv("miou", rep.miou)
                       .kv("ap", rep.ap)
                       .str()
                << "\n";
    });
    finish(trainer);
  } else {
    VideoTrainer<float> trainer(model, train.clips, rc, a.seed);
    if (fs::exists(out)) {
      trainer.load(Container::load(out));
      std::cout << Record().kv("resumed", out).kv("step", trainer.step()).str() << "\n";
    }
    train_with_evals(trainer, target, [&](Index step) {
      VideoEvalReport rep =
          evaluate_clips(model, val.clips, rc.eval, kNumThingClasses, eval_threads());
      std::cout << Record()
                       .kv("step", step)
                       .kv("split", "val")
                       .kv("vpq", rep.vpq.vpq)
                       .kv("assoc", association_accuracy(model, val.clips))
                       .str()
                << "\n";
    });
    finish(trainer);
  }
  return 0;
}

int cmd_eval(const Args& a) {
  RunConfig rc = require_config(a);
  if (a.out.empty()) throw std::invalid_argument("eval requires --out <checkpoint>");
  if (!fs::exists(a.out)) throw std::runtime_error("checkpoint not found: " + a.out);
  Container c = Container::load(a.out);

  PmtModel<float> model;
  Rng rng(0);
  model.init(rc.model, static_cast<ModelVariant>(c.get_u32_scalar("model.variant")), rng);
  model.load_model(c);

  DatasetBundle split = load_split(rc.paths.data_dir, a.split);
  if (a.mode == "image") {
    EvalReport rep =
        evaluate_images(model, split.images, rc.eval, kNumThingClasses, eval_threads());
    std::cout << Record()
                     .kv("split", a.split)
                     .kv("samples", rep.samples)
                     .kv("pq", rep.pq.pq)
                     .kv("sq", rep.pq.sq)
                     .kv("rq", rep.pq.rq)
                     .kv("miou", rep.miou)
                     .kv("ap", rep.ap)
                     .str()
              << "\n";
  } else {
    VideoEvalReport rep =
        evaluate_clips(model, split.clips, rc.eval, kNumThingClasses, eval_threads());
    Record r;
    r.kv("split", a.split).kv("clips", rep.clips).kv("vpq", rep.vpq.vpq);
    for (const auto& [k, v] : rep.vpq.per_window) r.kv("vpq" + std::to_string(k + 1), v);
    r.kv("assoc", association_accuracy(model, split.clips));
    std::cout << r.str() << "\n";
  }
  return 0;
}

int cmd_gradcheck() {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<GradSuiteEntry> entries = run_gradient_suite(10);
  entries.push_back(run_composition_check(10));
  bool all_ok = true;
  for (const auto& e : entries) {
    bool ok = e.ok(1e-4);
    all_ok = all_ok && ok;
    std::cout << Record()
                     .kv("op", e.op)
                     .kv("instances", e.instances)
                     .kv("max_rel_err", e.max_rel_err)
                     .kv("ok", ok ? "yes" : "NO")
                     .str()
              << "\n";
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << Record().kv("ops", entries.size()).kv("seconds", secs)
                   .kv("result", all_ok ? "pass" : "FAIL").str()
            << "\n";
  return all_ok ? 0 : 1;
}

int cmd_bench(const Args& a) {
  RunConfig rc = require_config(a);
  PmtModel<float> model;
  Rng rng(a.seed);
  model.init(rc.model, parse_variant(a.model), rng);
  Sample<float> img = generate_image<float>(rc.data, rc.model.image_height,
                                            rc.model.image_width, sample_seed(a.seed, 99, 0));
  for (int i = 0; i < 10; ++i) model.forward_image(nullptr, img.image, false, 0, 1, 0);

  int runs = a.steps > 0 ? static_cast<int>(std::max<Index>(a.steps, 100)) : 100;
  std::vector<double> ms(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    model.forward_image(nullptr, img.image, false, 0, 1, 0);
    ms[static_cast<std::size_t>(i)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
  }
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= runs;
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  double sd = std::sqrt(var / (runs > 1 ? runs - 1 : 1));
  std::cout << Record()
                   .kv("model", a.model)
                   .kv("runs", runs)
                   .kv("mean_ms", mean)
                   .kv("std_ms", sd)
                   .str()
            << "\n";
  return 0;
}

int cmd_ablate(const Args& a) {
  RunConfig rc = require_config(a);
  DatasetBundle train = load_split(rc.paths.data_dir, "train");
  DatasetBundle val = load_split(rc.paths.data_dir, "val");
  Index steps = a.steps >= 0 ? a.steps : rc.schedule.steps;

  const char* names[] = {"pmt", "pmt-nolateral", "pmt-norope", "eomt-frozen"};
  std::cout << std::left << std::setw(15) << "variant" << std::right << std::setw(8) << "pq"
            << std::setw(8) << "sq" << std::setw(8) << "rq" << std::setw(8) << "miou"
            << std::setw(8) << "ap" << "\n";
  for (const char* name : names) {
    PmtModel<float> model;
    Rng rng(a.seed);
    model.init(rc.model, parse_variant(name), rng);
    adopt_encoder(model, rc.paths.encoder_checkpoint);
    ImageTrainer<float> trainer(model, train.images, rc, a.seed);
    trainer.run(steps);
    EvalReport rep =
        evaluate_images(model, val.images, rc.eval, kNumThingClasses, eval_threads());
    std::cout << std::left << std::setw(15) << name << std::right << std::fixed
              << std::setprecision(4) << std::setw(8) << rep.pq.pq << std::setw(8) << rep.pq.sq
              << std::setw(8) << rep.pq.rq << std::setw(8) << rep.miou << std::setw(8) << rep.ap
              << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage(std::cerr, 2);
  try {
    Args a = parse_args(argc, argv);
    if (a.command == "gen-data") return cmd_gen_data(a);
    if (a.command == "pretrain-encoder") return cmd_pretrain(a);
    if (a.command == "train") return cmd_train(a);
    if (a.command == "eval") return cmd_eval(a);
    if (a.command == "gradcheck") return cmd_gradcheck();
    if (a.command == "bench") return cmd_bench(a);
    if (a.command == "ablate") return cmd_ablate(a);
    std::cerr << "unknown command: " << a.command << "\n";
    return usage(std::cerr, 2);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
}
