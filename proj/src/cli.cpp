#include "mhenet/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "mhenet/checkpoint.hpp"
#include "mhenet/data.hpp"
#include "mhenet/gradcheck.hpp"
#include "mhenet/image_io.hpp"
#include "mhenet/metrics.hpp"
#include "mhenet/ops.hpp"
#include "mhenet/train.hpp"

namespace mhenet {

namespace fs = std::filesystem;

namespace {

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw std::invalid_argument("--size expects HxW, got '" + s + "'");
  }
}

std::array<int, 4> parse_widths(const std::string& s) {
  std::array<int, 4> w{};
  std::stringstream ss(s);
  std::string tok;
  int i = 0;
  while (std::getline(ss, tok, ',')) {
    if (i >= 4) break;
    w[i++] = std::stoi(tok);
  }
  if (i != 4) throw std::invalid_argument("--widths expects four comma-separated values");
  return w;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
}

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  std::string size;
  int channels = 0;
  std::string ablate;
  int threads = 0;
  std::string out;
};

void set_threads(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

// ---------------------------------------------------------------- predict

Tensor read_as(const std::string& path, int channels, int h, int w, int* orig_h, int* orig_w) {
  NoGradGuard guard;
  const Image img = read_image(path);
  Tensor t(Shape{1, channels, img.height, img.width});
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * img.width + x;
      double mean = 0;
      for (int c = 0; c < img.channels; ++c) mean += img.at(y, x, c);
      mean /= img.channels;
      for (int c = 0; c < channels; ++c) {
        const double v = channels == img.channels ? img.at(y, x, c) : mean;
        t.mutable_data()[c * plane + p] = static_cast<Real>(v / 255.0);
      }
    }
  }
  if (orig_h) *orig_h = img.height;
  if (orig_w) *orig_w = img.width;
  if (img.height == h && img.width == w) return t;
  return ops::resize_bilinear(t, h, w);
}

void write_mask(const std::string& path, const Tensor& m, int h, int w) {
  NoGradGuard guard;
  const Tensor r = (m.h() == h && m.w() == w) ? m : ops::resize_bilinear(m, h, w);
  Image img;
  img.width = w;
  img.height = h;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp<double>(r.data()[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_image(path, img);
}

std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && has_image_extension(e.path().string())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) out.emplace(p.stem().string(), p);
  return out;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"MHENet RGB-D camouflaged object detection"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file; explicit flags override it");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--size", c.size, "input size HxW (multiples of 32)");
    sub->add_option("--channels", c.channels, "unified feature width C");
    sub->add_option("--ablate", c.ablate,
                    "modules to switch off: them,ghem,adfm,texture,geometry,semantic,depth");
    sub->add_option("--threads", c.threads, "worker threads (1 for bit-reproducible runs)");
    sub->add_option("--out", c.out, "output directory");
  };

  // train
  Common tc;
  std::string data_dir, val_dir, widths;
  int synth = 0, epochs = 0, batch = 0, decay_every = 0, stem_width = 0;
  double lr = 0;
  long max_steps = -1;
  bool no_augment = false;
  bool dry_run = false;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, tc);
  train_cmd->add_option("--data", data_dir, "dataset root (Imgs/, Depths/, GT/)");
  train_cmd->add_option("--val", val_dir, "validation dataset root");
  train_cmd->add_option("--synth", synth, "synthetic sample count when --data is absent");
  train_cmd->add_option("--epochs", epochs, "epochs (default 100)");
  train_cmd->add_option("--batch", batch, "batch size (default 8)");
  train_cmd->add_option("--lr", lr, "initial learning rate (default 5e-5)");
  train_cmd->add_option("--decay-every", decay_every, "epochs between /10 decays (default 40)");
  train_cmd->add_option("--steps", max_steps, "stop after this many steps (0: no cap)");
  train_cmd->add_option("--stem-width", stem_width, "backbone stem width");
  train_cmd->add_option("--widths", widths, "backbone stage widths, e.g. 16,32,64,128");
  train_cmd->add_flag("--no-augment", no_augment, "disable flip/rotate/crop augmentation");
  train_cmd->add_flag("--dry-run", dry_run, "print the resolved settings and exit");

  // predict
  Common pc;
  std::string checkpoint, input_dir;
  bool emit_aux = false;
  auto* predict_cmd = app.add_subcommand("predict", "write M2 masks for a set of inputs");
  add_common(predict_cmd, pc);
  predict_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  predict_cmd->add_option("--input", input_dir, "root with Imgs/ and Depths/")->required();
  predict_cmd->add_flag("--emit-aux", emit_aux, "also write M1 and M3 under M1/ and M3/");

  // eval
  Common ec;
  std::string pred_dir, gt_dir;
  auto* eval_cmd = app.add_subcommand("eval", "score predicted masks against ground truth");
  add_common(eval_cmd, ec);
  eval_cmd->add_option("--pred", pred_dir, "directory of predicted masks")->required();
  eval_cmd->add_option("--gt", gt_dir, "directory of ground-truth masks")->required();

  // gradcheck
  Common gc;
  bool skip_network = false, inject_fault = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every block");
  add_common(grad_cmd, gc);
  grad_cmd->add_flag("--skip-network", skip_network, "leave out the full-network check");
  grad_cmd->add_flag("--inject-fault", inject_fault, "corrupt a backward rule (test fixture)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) {
      set_threads(tc.threads);
      TrainConfig cfg;
      if (!tc.config.empty()) cfg = TrainConfig::from_json(read_json(tc.config));
      if (train_cmd->count("--seed")) cfg.seed = cfg.net.seed = tc.seed;
      else cfg.net.seed = cfg.seed;
      if (!tc.size.empty()) std::tie(cfg.net.height, cfg.net.width) = parse_size(tc.size);
      if (train_cmd->count("--channels")) cfg.net.channels = tc.channels;
      if (train_cmd->count("--ablate")) cfg.net.ablation = Ablation::parse(tc.ablate);
      if (train_cmd->count("--out")) cfg.out_dir = tc.out;
      if (train_cmd->count("--data")) cfg.data_dir = data_dir;
      if (train_cmd->count("--val")) cfg.val_dir = val_dir;
      if (train_cmd->count("--synth")) cfg.synth_count = synth;
      if (train_cmd->count("--epochs")) cfg.epochs = epochs;
      if (train_cmd->count("--batch")) cfg.batch = batch;
      if (train_cmd->count("--lr")) cfg.lr = lr;
      if (train_cmd->count("--decay-every")) cfg.decay_every = decay_every;
      if (train_cmd->count("--steps")) cfg.max_steps = max_steps;
      if (train_cmd->count("--stem-width")) cfg.net.stem_width = stem_width;
      if (train_cmd->count("--widths")) cfg.net.stage_widths = parse_widths(widths);
      if (no_augment) cfg.augment = false;
      cfg.validate();
      std::cout << "lr=" << cfg.lr << " batch=" << cfg.batch << " epochs=" << cfg.epochs
                << " decay_every=" << cfg.decay_every << " channels=" << cfg.net.channels
                << " size=" << cfg.net.height << "x" << cfg.net.width << " ablate='"
                << cfg.net.ablation.disabled_list() << "' seed=" << cfg.seed
                << " out=" << cfg.out_dir << "\n";
      if (dry_run) return kExitOk;
      const TrainSummary s = train(cfg, &std::cout);
      std::cout << "done: " << s.steps << " steps, best epoch " << s.best_epoch << " loss "
                << s.best_loss << "\n";
      return kExitOk;
    }

    if (predict_cmd->parsed()) {
      set_threads(pc.threads);
      auto net = load_checkpoint(checkpoint);
      const NetworkConfig& ncfg = net->config();
      if (predict_cmd->count("--channels") && pc.channels != ncfg.channels) {
        std::cerr << "error: --channels " << pc.channels << " does not match checkpoint C="
                  << ncfg.channels << "\n";
        return kExitFailure;
      }
      int h = ncfg.height, w = ncfg.width;
      if (!pc.size.empty()) std::tie(h, w) = parse_size(pc.size);
      const std::string out_dir = pc.out.empty() ? "predictions" : pc.out;
      fs::create_directories(out_dir);
      if (emit_aux) {
        fs::create_directories(fs::path(out_dir) / "M1");
        fs::create_directories(fs::path(out_dir) / "M3");
      }
      const fs::path root(input_dir);
      const auto rgbs = images_by_stem(root / "Imgs");
      const auto depths = images_by_stem(root / "Depths");
      if (rgbs.empty()) {
        std::cerr << "error: no images under " << (root / "Imgs").string() << "\n";
        return kExitFailure;
      }
      int written = 0;
      bool missing = false;
      for (const auto& [stem, rgb_path] : rgbs) {
        auto it = depths.find(stem);
        if (it == depths.end()) {
          std::cerr << "skipped " << stem << ": no depth map\n";
          missing = true;
          continue;
        }
        int oh = 0, ow = 0;
        NoGradGuard guard;
        const Tensor rgb = read_as(rgb_path.string(), 3, h, w, &oh, &ow);
        const Tensor depth = read_as(it->second.string(), 1, h, w, nullptr, nullptr);
        const ForwardOutput out = net->forward(rgb, depth, Mode::Eval);
        write_mask((fs::path(out_dir) / (stem + ".png")).string(), out.m2, oh, ow);
        if (emit_aux) {
          write_mask((fs::path(out_dir) / "M1" / (stem + ".png")).string(), out.m1, oh, ow);
          write_mask((fs::path(out_dir) / "M3" / (stem + ".png")).string(), out.m3, oh, ow);
        }
        ++written;
      }
      std::cout << "wrote " << written << " masks to " << out_dir << "\n";
      return missing ? kExitFailure : kExitOk;
    }

    if (eval_cmd->parsed()) {
      set_threads(ec.threads);
      const MetricReport report = evaluate_dataset(pred_dir, gt_dir);
      const std::string tsv = report.to_tsv();
      std::cout << tsv;
      if (!ec.out.empty()) {
        fs::create_directories(ec.out);
        std::ofstream(fs::path(ec.out) / "metrics.tsv") << tsv;
        std::ofstream(fs::path(ec.out) / "metrics.json") << report.to_json().dump(2) << "\n";
      }
      for (const auto& m : report.missing) std::cerr << "skipped (no counterpart): " << m << "\n";
      return report.missing.empty() ? kExitOk : kExitFailure;
    }

    if (grad_cmd->parsed()) {
      set_threads(gc.threads);
      ops::inject_backward_fault(inject_fault);
      SuiteOptions opts;
      opts.seed = gc.seed;
      opts.include_network = !skip_network;
      opts.on_entry = [](const SuiteEntry& e) {
        std::printf("%-18s max_rel_err %.3e  tol %.0e  coords %zu  refined %zu  %s\n",
                    e.name.c_str(), e.max_rel_error, e.tolerance, e.coords, e.refined,
                    e.passed() ? "PASS" : "FAIL");
        if (e.unresolved) std::printf("  %zu coordinates sit on a kink\n", e.unresolved);
        if (!e.passed()) std::printf("  worst: %s\n", e.worst.c_str());
        std::fflush(stdout);
      };
      const auto entries = run_gradcheck_suite(opts);
      ops::inject_backward_fault(false);
      const bool ok = std::all_of(entries.begin(), entries.end(),
                                  [](const SuiteEntry& e) { return e.passed(); });
      std::printf("%s\n", ok ? "gradcheck: all passed" : "gradcheck: FAILED");
      return ok ? kExitOk : kExitFailure;
    }
  } catch (const std::exception& e) {
    ops::inject_backward_fault(false);
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mhenet
