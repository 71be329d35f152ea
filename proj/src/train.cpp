#include "mhenet/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "mhenet/checkpoint.hpp"
#include "mhenet/data.hpp"
#include "mhenet/loss.hpp"
#include "mhenet/optim.hpp"

namespace mhenet {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  net.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch < 2) throw std::invalid_argument("batch must be at least 2 (batch norm)");
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  if (decay_every < 1) throw std::invalid_argument("decay interval must be at least 1");
  if (!(decay_factor > 0)) throw std::invalid_argument("decay factor must be positive");
  if (max_steps < 0) throw std::invalid_argument("max steps must be non-negative");
  if (data_dir.empty() && synth_count < 2) {
    throw std::invalid_argument("synthetic set needs at least 2 samples");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{
      {"net", net.to_json()},
      {"data", data_dir},
      {"val", val_dir},
      {"synth_count", synth_count},
      {"epochs", epochs},
      {"batch", batch},
      {"lr", lr},
      {"decay_every", decay_every},
      {"decay_factor", decay_factor},
      {"max_steps", max_steps},
      {"augment", augment},
      {"seed", seed},
      {"out", out_dir},
      {"optimizer", {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("net")) c.net = NetworkConfig::from_json(j.at("net"));
  c.data_dir = j.value("data", c.data_dir);
  c.val_dir = j.value("val", c.val_dir);
  c.synth_count = j.value("synth_count", c.synth_count);
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.decay_every = j.value("decay_every", c.decay_every);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.augment = j.value("augment", c.augment);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out", c.out_dir);
  return c;
}

double lr_at_epoch(double base, int epoch, int every, double factor) {
  return base * std::pow(factor, static_cast<double>((epoch - 1) / every));
}

namespace {

double evaluate_loss(const Network& net, const DatasetManifest& set, int batch) {
  NoGradGuard guard;
  const NetworkConfig& cfg = net.config();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < set.entries.size(); start += batch) {
    std::vector<Sample> samples;
    for (std::size_t i = start; i < std::min(set.entries.size(), start + batch); ++i) {
      samples.push_back(load_sample(set, set.entries[i], cfg.height, cfg.width));
    }
    const Batch b = make_batch(samples);
    const ForwardOutput out = net.forward(b.rgb, b.depth, Mode::Eval);
    total += total_loss(out, b.gt).total_value * static_cast<double>(samples.size());
    count += samples.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace

TrainSummary train(const TrainConfig& config, std::ostream* progress) {
  config.validate();
  fs::create_directories(config.out_dir);
  const fs::path out(config.out_dir);
  {
    std::ofstream cfg(out / "config.json", std::ios::trunc);
    cfg << config.to_json().dump(2) << "\n";
  }

  DatasetManifest data;
  if (config.data_dir.empty()) {
    data = synth_generate((out / "synth").string(), config.synth_count, config.net.height,
                          config.seed);
  } else {
    data = load_manifest(config.data_dir);
  }
  DatasetManifest val;
  if (!config.val_dir.empty()) val = load_manifest(config.val_dir);
  if (data.entries.size() < 2) throw std::invalid_argument("training set needs at least 2 samples");

  Network net(config.net);
  Adam adam(net.params().learnable(), AdamOptions{config.lr, 0.9, 0.999, 1e-8});

  std::ofstream log(out / "loss_log.tsv", std::ios::trunc);
  log << "step\tepoch\tlr\tbce1\tiou1\tbce2\tiou2\tbce3\tiou3\ttotal\n";

  TrainSummary summary;
  summary.best_loss = std::numeric_limits<double>::infinity();
  const std::size_t n = data.entries.size();
  const std::size_t per_batch = std::min<std::size_t>(config.batch, n);
  char line[512];

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config.lr, epoch, config.decay_every, config.decay_factor);
    adam.set_lr(lr);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(Rng::derive(config.seed, static_cast<std::uint64_t>(epoch), 0x5eed));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    long epoch_steps = 0;
    bool capped = false;
    // a trailing batch of one cannot be batch-normalized in train mode; drop it
    for (std::size_t start = 0; start + 2 <= n; start += per_batch) {
      if (config.max_steps > 0 && summary.steps >= config.max_steps) {
        capped = true;
        break;
      }
      std::vector<Sample> samples;
      for (std::size_t k = start; k < std::min(n, start + per_batch); ++k) {
        Sample s = load_sample(data, data.entries[order[k]], config.net.height, config.net.width);
        if (config.augment) {
          Rng aug(Rng::derive(config.seed, static_cast<std::uint64_t>(epoch), order[k] + 1));
          s = augment(s, aug);
        }
        samples.push_back(std::move(s));
      }
      if (samples.size() < 2) break;
      const Batch b = make_batch(samples);
      const ForwardOutput fo = net.forward(b.rgb, b.depth, Mode::Train);
      const LossBreakdown loss = total_loss(fo, b.gt);
      backward(loss.total);
      adam.step();
      adam.zero_grad();
      ++summary.steps;
      ++epoch_steps;
      epoch_loss += loss.total_value;
      summary.step_losses.push_back(loss.total_value);
      std::snprintf(line, sizeof line,
                    "%ld\t%d\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\n",
                    summary.steps, epoch, lr, loss.bce[0], loss.iou[0], loss.bce[1],
                    loss.iou[1], loss.bce[2], loss.iou[2], loss.total_value);
      log << line;
    }
    log.flush();
    if (epoch_steps == 0) break;
    summary.epochs_run = epoch;
    save_checkpoint((out / "last.mhen").string(), net);
    const double score = val.entries.empty() ? epoch_loss / static_cast<double>(epoch_steps)
                                             : evaluate_loss(net, val, config.batch);
    if (score < summary.best_loss) {
      summary.best_loss = score;
      summary.best_epoch = epoch;
      save_checkpoint((out / "best.mhen").string(), net);
    }
    if (progress) {
      *progress << "epoch " << epoch << " lr " << lr << " steps " << summary.steps
                << " mean_loss " << epoch_loss / static_cast<double>(epoch_steps)
                << (val.entries.empty() ? "" : " val_loss " + std::to_string(score)) << "\n";
    }
    if (capped || (config.max_steps > 0 && summary.steps >= config.max_steps)) break;
  }
  return summary;
}

}  // namespace mhenet
