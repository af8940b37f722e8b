#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "colorfuse/autodiff.hpp"
#include "colorfuse/backbone.hpp"
#include "colorfuse/checkpoint.hpp"
#include "colorfuse/dataset.hpp"
#include "colorfuse/fusion.hpp"
#include "colorfuse/optimizer.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

enum class Stage { full_image, instance, fusion };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::full_image: return "full_image";
    case Stage::instance: return "instance";
    default: return "fusion";
  }
}

struct StageConfig {
  Stage stage = Stage::full_image;
  int epochs = 2;
  double learning_rate = 1e-5;
  double beta1 = 0.99;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double delta = 1.0;
  int max_instances = 8;
  bool unfreeze_backbones = false;
  std::string checkpoint_dir;  // empty keeps everything in memory
};

// Stage presets. Epoch counts are scaled-down stand-ins for the full
// schedule; learning rates and moment decays are the trained defaults.
inline StageConfig default_stage_config(Stage stage) {
  StageConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case Stage::full_image:
      cfg.epochs = 2;
      cfg.learning_rate = 1e-5;
      break;
    case Stage::instance:
      cfg.epochs = 5;
      cfg.learning_rate = 5e-5;
      break;
    case Stage::fusion:
      cfg.epochs = 2;
      cfg.learning_rate = 2e-5;
      break;
  }
  return cfg;
}

struct TrainRecord {
  Stage stage = Stage::full_image;
  std::vector<double> step_losses;
  std::vector<double> epoch_means;
  double wall_seconds = 0.0;
  std::vector<std::string> checkpoint_paths;
};

// Plain (non-differentiable) smooth-l1 with mean reduction, for
// validation passes that never need a tape.
inline double smooth_l1_value(const Tensor& pred, const Tensor& target,
                              double delta = 1.0) {
  check_same_shape(pred, target, "smooth_l1_value");
  if (delta <= 0.0)
    throw std::invalid_argument("smooth_l1_value: delta must be > 0");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = std::abs(pred[i] - target[i]);
    acc += d <= delta ? 0.5 * d * d : delta * (d - 0.5 * delta);
  }
  return acc / static_cast<double>(pred.size());
}

namespace training_detail {

// Shared epoch/batch loop. The loss callback owns graph construction for
// one sample; batches are averaged before a single backward pass.
inline TrainRecord run_loop(
    const StageConfig& cfg, std::size_t dataset_size,
    const std::vector<Var>& params,
    const std::function<Var(std::size_t)>& sample_loss,
    const std::function<void(int)>& after_epoch) {
  if (dataset_size == 0)
    throw std::invalid_argument("train stage: dataset is empty");
  if (cfg.epochs < 0)
    throw std::invalid_argument("train stage: epochs must be >= 0");
  if (cfg.batch_size < 1)
    throw std::invalid_argument("train stage: batch size must be >= 1");

  const auto start = std::chrono::steady_clock::now();
  TrainRecord rec;
  rec.stage = cfg.stage;

  Rng rng(cfg.seed);
  AdamState state;
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), 0u);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates driven by the stage rng keeps epoch order reproducible.
    for (std::size_t i = dataset_size; i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double epoch_acc = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t pos = 0; pos < dataset_size;
         pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(dataset_size, pos + static_cast<std::size_t>(cfg.batch_size));
      Var total = sample_loss(order[pos]);
      for (std::size_t k = pos + 1; k < end; ++k)
        total = add(total, sample_loss(order[k]));
      total = scale_op(total, 1.0 / static_cast<double>(end - pos));

      if (!std::isfinite(total->value[0]))
        throw std::runtime_error("train stage: loss is not finite");
      zero_grad(params);
      backward(total);
      adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2,
                cfg.eps);

      rec.step_losses.push_back(total->value[0]);
      epoch_acc += total->value[0];
      ++epoch_steps;
    }
    rec.epoch_means.push_back(epoch_acc / static_cast<double>(epoch_steps));
    if (after_epoch) after_epoch(epoch);
  }

  // Snap to checkpoint precision once updates have happened, so an
  // in-memory continuation matches a save/load round trip exactly. A
  // zero-epoch run leaves the parameters untouched.
  if (!rec.step_losses.empty()) quantize_params_to_archive_precision(params);

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return rec;
}

inline std::string epoch_dir(const std::string& root, int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%02d", epoch + 1);
  return root + "/" + buf;
}

}  // namespace training_detail

inline TrainRecord train_stage_full(ColorizationNetwork& net,
                                    const Dataset& data,
                                    const StageConfig& cfg) {
  const auto params = net.parameters();
  auto loss = [&](std::size_t i) -> Var {
    const Sample& s = data.samples[i];
    return smooth_l1_loss(net.forward_with_taps(s.l_norm).first, s.ab_norm,
                          cfg.delta);
  };
  std::vector<std::string> paths;
  auto save = [&](const std::string& dir) {
    save_param_archive(dir, net.named_parameters(),
                       config_hash(net.config()), role_name(net.role()));
    paths.push_back(dir);
  };
  auto after_epoch = [&](int epoch) {
    if (!cfg.checkpoint_dir.empty())
      save(training_detail::epoch_dir(cfg.checkpoint_dir, epoch));
  };
  TrainRecord loop =
      training_detail::run_loop(cfg, data.size(), params, loss, after_epoch);
  if (!cfg.checkpoint_dir.empty()) save(cfg.checkpoint_dir + "/final");
  loop.checkpoint_paths = std::move(paths);
  return loop;
}

// Stage two: seed the instance branch from the full-image weights, then
// train it on box crops resized to the network input.
inline TrainRecord train_stage_instance(const ColorizationNetwork& full_net,
                                        ColorizationNetwork& inst_net,
                                        const Dataset& instance_data,
                                        const StageConfig& cfg) {
  copy_parameters(full_net, inst_net);
  const auto params = inst_net.parameters();
  auto loss = [&](std::size_t i) -> Var {
    const Sample& s = instance_data.samples[i];
    return smooth_l1_loss(inst_net.forward_with_taps(s.l_norm).first,
                          s.ab_norm, cfg.delta);
  };
  std::vector<std::string> paths;
  auto save = [&](const std::string& dir) {
    save_param_archive(dir, inst_net.named_parameters(),
                       config_hash(inst_net.config()),
                       role_name(inst_net.role()));
    paths.push_back(dir);
  };
  auto after_epoch = [&](int epoch) {
    if (!cfg.checkpoint_dir.empty())
      save(training_detail::epoch_dir(cfg.checkpoint_dir, epoch));
  };
  TrainRecord loop = training_detail::run_loop(cfg, instance_data.size(),
                                               params, loss, after_epoch);
  if (!cfg.checkpoint_dir.empty()) save(cfg.checkpoint_dir + "/final");
  loop.checkpoint_paths = std::move(paths);
  return loop;
}

// Stage three: only the fusion heads move; both backbones are frozen
// unless the config explicitly unfreezes them for joint finetuning.
inline TrainRecord train_stage_fusion(ColorizationNetwork& full_net,
                                      ColorizationNetwork& inst_net,
                                      FusionHeads& heads, const Dataset& data,
                                      const StageConfig& cfg) {
  if (!same_architecture(full_net.config(), inst_net.config()))
    throw std::invalid_argument("train_stage_fusion: backbone configs differ");
  const int side = full_net.config().base_resolution;

  std::vector<Var> params = heads.parameters();
  if (cfg.unfreeze_backbones) {
    for (const auto& p : full_net.parameters()) params.push_back(p);
    for (const auto& p : inst_net.parameters()) params.push_back(p);
  } else {
    full_net.set_trainable(false);
    inst_net.set_trainable(false);
  }

  FusedForwardOptions opt;
  opt.max_instances = cfg.max_instances;
  auto loss = [&](std::size_t i) -> Var {
    const Sample& s = data.samples[i];
    auto instances = instance_inputs_for(s, side, cfg.max_instances);
    Var pred = fused_forward(full_net, inst_net, heads, s.l_norm, instances,
                             opt);
    return smooth_l1_loss(pred, s.ab_norm, cfg.delta);
  };
  std::vector<std::string> paths;
  auto save = [&](const std::string& dir) {
    save_param_archive(dir, heads.named_parameters(),
                       heads.architecture_hash(), "fusion");
    paths.push_back(dir);
  };
  auto after_epoch = [&](int epoch) {
    if (!cfg.checkpoint_dir.empty())
      save(training_detail::epoch_dir(cfg.checkpoint_dir, epoch));
  };

  TrainRecord loop;
  try {
    loop = training_detail::run_loop(cfg, data.size(), params, loss,
                                     after_epoch);
  } catch (...) {
    full_net.set_trainable(true);
    inst_net.set_trainable(true);
    throw;
  }
  full_net.set_trainable(true);
  inst_net.set_trainable(true);

  if (!cfg.checkpoint_dir.empty()) {
    save(cfg.checkpoint_dir + "/final");
    if (cfg.unfreeze_backbones) {
      save_param_archive(cfg.checkpoint_dir + "/final_full",
                         full_net.named_parameters(),
                         config_hash(full_net.config()),
                         role_name(full_net.role()));
      save_param_archive(cfg.checkpoint_dir + "/final_instance",
                         inst_net.named_parameters(),
                         config_hash(inst_net.config()),
                         role_name(inst_net.role()));
      paths.push_back(cfg.checkpoint_dir + "/final_full");
      paths.push_back(cfg.checkpoint_dir + "/final_instance");
    }
  }
  loop.checkpoint_paths = std::move(paths);
  return loop;
}

// Mean validation loss of the full-image branch alone.
inline double full_dataset_loss(const ColorizationNetwork& net,
                                const Dataset& data, double delta = 1.0) {
  if (data.empty())
    throw std::invalid_argument("full_dataset_loss: dataset is empty");
  double acc = 0.0;
  for (const auto& s : data.samples)
    acc += smooth_l1_value(net.predict(s.l_norm), s.ab_norm, delta);
  return acc / static_cast<double>(data.size());
}

// Mean validation loss of the fused model.
inline double fused_dataset_loss(const ColorizationNetwork& full_net,
                                 const ColorizationNetwork& inst_net,
                                 const FusionHeads& heads, const Dataset& data,
                                 double delta = 1.0, int max_instances = 8) {
  if (data.empty())
    throw std::invalid_argument("fused_dataset_loss: dataset is empty");
  const int side = full_net.config().base_resolution;
  FusedForwardOptions opt;
  opt.max_instances = max_instances;
  double acc = 0.0;
  for (const auto& s : data.samples) {
    auto instances = instance_inputs_for(s, side, max_instances);
    Var pred =
        fused_forward(full_net, inst_net, heads, s.l_norm, instances, opt);
    acc += smooth_l1_value(pred->value, s.ab_norm, delta);
  }
  return acc / static_cast<double>(data.size());
}

// One JSON object per line: stage header first, then every step.
inline void write_train_log(const std::string& path, const TrainRecord& rec) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_train_log: cannot open " + path);
  nlohmann::json header;
  header["event"] = "stage";
  header["stage"] = stage_name(rec.stage);
  header["steps"] = rec.step_losses.size();
  header["epochs"] = rec.epoch_means.size();
  header["wall_seconds"] = rec.wall_seconds;
  out << header.dump() << "\n";
  std::size_t step = 0;
  for (std::size_t e = 0; e < rec.epoch_means.size(); ++e) {
    nlohmann::json line;
    line["event"] = "epoch";
    line["epoch"] = e + 1;
    line["mean_loss"] = rec.epoch_means[e];
    out << line.dump() << "\n";
  }
  for (double loss : rec.step_losses) {
    nlohmann::json line;
    line["event"] = "step";
    line["step"] = ++step;
    line["loss"] = loss;
    out << line.dump() << "\n";
  }
}

}  // namespace colorfuse
