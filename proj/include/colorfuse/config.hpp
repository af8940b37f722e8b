#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "colorfuse/ablation.hpp"
#include "colorfuse/backbone.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/training.hpp"

namespace colorfuse {

// Everything a run needs, resolved from a JSON file layered over the
// built-in defaults. Paths are kept verbatim; relative ones resolve
// against the process working directory.
struct RunConfig {
  BackboneConfig model = reference_backbone_config();
  std::string train_data;  // annotations.json (or its directory)
  std::string val_data;
  std::string checkpoint_dir = "checkpoints";
  StageConfig full_stage = default_stage_config(Stage::full_image);
  StageConfig instance_stage = default_stage_config(Stage::instance);
  StageConfig fusion_stage = default_stage_config(Stage::fusion);
  AblationSpec ablation;
  double data_range = 255.0;
};

namespace config_detail {

using nlohmann::json;

inline void require_keys(const json& obj, const std::string& where,
                         std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) { known = true; break; }
    if (!known)
      throw std::runtime_error("config: unknown key \"" + item.key() +
                               "\" in " + where);
  }
}

template <typename T>
inline void read_into(const json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

inline void read_stage(const json& obj, const std::string& where,
                       StageConfig& cfg) {
  require_keys(obj, where,
               {"epochs", "learning_rate", "beta1", "beta2", "eps",
                "batch_size", "seed", "unfreeze_backbones"});
  read_into(obj, "epochs", cfg.epochs);
  read_into(obj, "learning_rate", cfg.learning_rate);
  read_into(obj, "beta1", cfg.beta1);
  read_into(obj, "beta2", cfg.beta2);
  read_into(obj, "eps", cfg.eps);
  read_into(obj, "batch_size", cfg.batch_size);
  read_into(obj, "seed", cfg.seed);
  if (obj.contains("unfreeze_backbones")) {
    if (cfg.stage != Stage::fusion)
      throw std::runtime_error(
          "config: unfreeze_backbones only applies to the fusion stage");
    cfg.unfreeze_backbones = obj.at("unfreeze_backbones").get<bool>();
  }
}

}  // namespace config_detail

// Parses a run configuration. Comments in the file are allowed. Any
// key the schema does not know is an error, so typos fail loudly
// instead of silently falling back to a default.
inline RunConfig parse_run_config(const nlohmann::json& doc) {
  using config_detail::read_into;
  using config_detail::read_stage;
  using config_detail::require_keys;

  if (!doc.is_object()) throw std::runtime_error("config: root must be an object");
  require_keys(doc, "the top level",
               {"model", "data", "train", "ablation", "data_range"});

  RunConfig cfg;
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    require_keys(m, "model",
                 {"layer_channels", "scale_profile", "base_resolution",
                  "fusion_layers", "seed"});
    read_into(m, "layer_channels", cfg.model.layer_channels);
    read_into(m, "scale_profile", cfg.model.scale_profile);
    read_into(m, "base_resolution", cfg.model.base_resolution);
    read_into(m, "fusion_layers", cfg.model.fusion_layers);
    read_into(m, "seed", cfg.model.seed);
    validate_backbone_config(cfg.model);
  }

  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    require_keys(d, "data", {"train", "val"});
    read_into(d, "train", cfg.train_data);
    read_into(d, "val", cfg.val_data);
  }

  if (doc.contains("train")) {
    const auto& t = doc.at("train");
    require_keys(t, "train",
                 {"checkpoint_dir", "delta", "max_instances", "full_image",
                  "instance", "fusion"});
    read_into(t, "checkpoint_dir", cfg.checkpoint_dir);
    double delta = cfg.full_stage.delta;
    int max_instances = cfg.fusion_stage.max_instances;
    read_into(t, "delta", delta);
    read_into(t, "max_instances", max_instances);
    for (StageConfig* s :
         {&cfg.full_stage, &cfg.instance_stage, &cfg.fusion_stage}) {
      s->delta = delta;
      s->max_instances = max_instances;
    }
    if (t.contains("full_image"))
      read_stage(t.at("full_image"), "train.full_image", cfg.full_stage);
    if (t.contains("instance"))
      read_stage(t.at("instance"), "train.instance", cfg.instance_stage);
    if (t.contains("fusion"))
      read_stage(t.at("fusion"), "train.fusion", cfg.fusion_stage);
    if (delta <= 0.0) throw std::runtime_error("config: delta must be > 0");
    if (max_instances < 0)
      throw std::runtime_error("config: max_instances must be >= 0");
    cfg.ablation.max_instances = max_instances;
  }

  if (doc.contains("ablation")) {
    const auto& a = doc.at("ablation");
    require_keys(a, "ablation",
                 {"placement", "blend", "box_strategy", "top_k", "threshold",
                  "seed"});
    if (a.contains("placement"))
      cfg.ablation.placement =
          parse_placement(a.at("placement").get<std::string>());
    if (a.contains("blend"))
      cfg.ablation.blend = parse_blend_mode(a.at("blend").get<std::string>());
    if (a.contains("box_strategy"))
      cfg.ablation.box_strategy =
          parse_select_strategy(a.at("box_strategy").get<std::string>());
    read_into(a, "top_k", cfg.ablation.top_k);
    read_into(a, "threshold", cfg.ablation.threshold);
    read_into(a, "seed", cfg.ablation.seed);
  }

  read_into(doc, "data_range", cfg.data_range);
  if (cfg.data_range <= 0.0)
    throw std::runtime_error("config: data_range must be > 0");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config: parse failure in " + path + ": " +
                             e.what());
  }
  return parse_run_config(doc);
}

}  // namespace colorfuse
