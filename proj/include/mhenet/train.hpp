#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mhenet/network.hpp"

namespace mhenet {

struct TrainConfig {
  NetworkConfig net;
  std::string data_dir;  // empty: generate a synthetic set under out_dir/synth
  std::string val_dir;
  int synth_count = 64;
  int epochs = 100;
  int batch = 8;
  double lr = 5e-5;
  int decay_every = 40;
  double decay_factor = 0.1;
  long max_steps = 0;  // 0: no cap
  bool augment = true;
  std::uint64_t seed = 1;
  std::string out_dir = "run";

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Step decay: base * factor^floor((epoch - 1) / every), epochs counted from 1.
double lr_at_epoch(double base, int epoch, int every, double factor);

struct TrainSummary {
  long steps = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double best_loss = 0;
  std::vector<double> step_losses;
};

/// Writes config.json, loss_log.tsv, last.mhen (every epoch) and best.mhen
/// into out_dir. Progress lines go to `progress` when given.
TrainSummary train(const TrainConfig& config, std::ostream* progress = nullptr);

}  // namespace mhenet
