// colorfuse command line front end.
//
// Subcommands: gen-fixture, train, colorize, evaluate, ablate. Every
// failure path prints a single JSON object to stderr and exits nonzero
// so wrapping scripts never have to scrape free-form text.

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "colorfuse/ablation.hpp"
#include "colorfuse/checkpoint.hpp"
#include "colorfuse/config.hpp"
#include "colorfuse/dataset.hpp"
#include "colorfuse/evaluation.hpp"
#include "colorfuse/fixture.hpp"
#include "colorfuse/fusion.hpp"
#include "colorfuse/image_io.hpp"
#include "colorfuse/training.hpp"

namespace fs = std::filesystem;
using namespace colorfuse;

namespace {

// Stage checkpoints live in fixed subdirectories of the checkpoint root
// so resumption can find them without extra bookkeeping.
std::string stage_dir(const std::string& root, Stage s) {
  switch (s) {
    case Stage::full_image: return root + "/stage1_full";
    case Stage::instance: return root + "/stage2_instance";
    default: return root + "/stage3_fusion";
  }
}

std::string resolve_annotations(std::string path) {
  if (fs::is_directory(path)) return (fs::path(path) / "annotations.json").string();
  return path;
}

void propagate_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.model.seed = seed;
  cfg.full_stage.seed = seed;
  cfg.instance_stage.seed = seed + 1;
  cfg.fusion_stage.seed = seed + 2;
  cfg.ablation.seed = static_cast<unsigned>(seed);
}

struct Model {
  ColorizationNetwork full;
  ColorizationNetwork inst;
  FusionHeads heads;
  bool fused = false;  // instance net and heads carry trained weights
};

bool archive_present(const std::string& dir) {
  return fs::exists(fs::path(dir) / "manifest.json");
}

// Loads whatever the checkpoint root holds. The full branch is
// mandatory; without the instance and fusion archives prediction falls
// back to the full branch alone.
Model load_model(const RunConfig& cfg) {
  Model m{ColorizationNetwork(cfg.model, NetRole::full_image),
          ColorizationNetwork(cfg.model, NetRole::instance),
          FusionHeads(cfg.model, cfg.model.seed)};
  const std::string full_dir = stage_dir(cfg.checkpoint_dir, Stage::full_image) + "/final";
  if (!archive_present(full_dir))
    throw std::runtime_error("no trained model at " + full_dir +
                             " (run train first)");
  load_param_archive(full_dir, m.full.named_parameters(),
                     config_hash(cfg.model));
  const std::string inst_dir = stage_dir(cfg.checkpoint_dir, Stage::instance) + "/final";
  const std::string heads_dir = stage_dir(cfg.checkpoint_dir, Stage::fusion) + "/final";
  if (archive_present(inst_dir) && archive_present(heads_dir)) {
    load_param_archive(inst_dir, m.inst.named_parameters(),
                       config_hash(cfg.model));
    load_param_archive(heads_dir, m.heads.named_parameters(),
                       m.heads.architecture_hash());
    m.fused = true;
  }
  return m;
}

// Shared predictor: the default ablation spec reproduces the standard
// fused path, so evaluate and ablate score the very same pixels.
Tensor model_predict(const Model& m, const RunConfig& cfg, const Sample& s) {
  if (!m.fused) return recompose_with_gt_l(s.rgb, m.full.predict(s.l_norm));
  AblationSpec spec;
  spec.max_instances = cfg.ablation.max_instances;
  return ablation_predict_rgb(spec, m.full, m.inst, m.heads, s);
}

int cmd_gen_fixture(const std::string& out_dir, int count, int side,
                    std::uint64_t seed) {
  auto scenes = generate_fixture(count, seed, side);
  write_fixture_dataset(out_dir, scenes);
  std::cout << "wrote " << scenes.size() << " images to " << out_dir << "\n";
  return 0;
}

int cmd_train(RunConfig cfg, const std::string& stage_sel, bool resume) {
  if (cfg.train_data.empty())
    throw std::runtime_error("config has no data.train entry");
  Dataset data = load_dataset(resolve_annotations(cfg.train_data));

  const bool all = stage_sel == "all";
  const bool want_full = all || stage_sel == "full";
  const bool want_inst = all || stage_sel == "instance";
  const bool want_fuse = all || stage_sel == "fusion";

  ColorizationNetwork full(cfg.model, NetRole::full_image);
  ColorizationNetwork inst(cfg.model, NetRole::instance);
  FusionHeads heads(cfg.model, cfg.model.seed);

  cfg.full_stage.checkpoint_dir = stage_dir(cfg.checkpoint_dir, Stage::full_image);
  cfg.instance_stage.checkpoint_dir = stage_dir(cfg.checkpoint_dir, Stage::instance);
  cfg.fusion_stage.checkpoint_dir = stage_dir(cfg.checkpoint_dir, Stage::fusion);

  auto finished = [&](const StageConfig& sc) {
    return resume && archive_present(sc.checkpoint_dir + "/final");
  };
  auto log_stage = [&](const StageConfig& sc, const TrainRecord& rec) {
    write_train_log(sc.checkpoint_dir + "/train_log.jsonl", rec);
    std::cout << "stage " << stage_name(sc.stage) << ": " << rec.epoch_means.size()
              << " epochs";
    if (!rec.epoch_means.empty())
      std::cout << ", final mean loss " << rec.epoch_means.back();
    std::cout << "\n";
  };

  // Stage one trains the full-image branch or reloads its archive when
  // a later stage needs it as a starting point.
  const std::string full_final = cfg.full_stage.checkpoint_dir + "/final";
  if (want_full && !finished(cfg.full_stage)) {
    log_stage(cfg.full_stage, train_stage_full(full, data, cfg.full_stage));
  } else if (archive_present(full_final)) {
    load_param_archive(full_final, full.named_parameters(), config_hash(cfg.model));
    if (want_full) std::cout << "stage full_image: resumed, skipped\n";
  } else if (want_inst || want_fuse) {
    throw std::runtime_error("stage needs " + full_final + " but it is missing");
  }

  const std::string inst_final = cfg.instance_stage.checkpoint_dir + "/final";
  if (want_inst && !finished(cfg.instance_stage)) {
    Dataset crops = make_instance_dataset(data, cfg.model.base_resolution);
    log_stage(cfg.instance_stage,
              train_stage_instance(full, inst, crops, cfg.instance_stage));
  } else if (archive_present(inst_final)) {
    load_param_archive(inst_final, inst.named_parameters(), config_hash(cfg.model));
    if (want_inst) std::cout << "stage instance: resumed, skipped\n";
  } else if (want_fuse) {
    throw std::runtime_error("stage needs " + inst_final + " but it is missing");
  }

  if (want_fuse && !finished(cfg.fusion_stage)) {
    log_stage(cfg.fusion_stage,
              train_stage_fusion(full, inst, heads, data, cfg.fusion_stage));
  } else if (want_fuse) {
    std::cout << "stage fusion: resumed, skipped\n";
  }
  return 0;
}

int cmd_colorize(const RunConfig& cfg, const std::vector<std::string>& inputs,
                 const std::string& out_dir, bool dump_weights) {
  if (inputs.empty()) throw std::runtime_error("colorize: no inputs given");
  Model m = load_model(cfg);
  fs::create_directories(out_dir);
  const int base = cfg.model.base_resolution;

  std::vector<Sample> work;
  if (inputs.size() == 1 && inputs[0].size() > 5 &&
      inputs[0].substr(inputs[0].size() - 5) == ".json") {
    Dataset ds = load_dataset(inputs[0]);
    work = std::move(ds.samples);
  } else {
    for (const auto& p : inputs)
      work.push_back(sample_from_rgb(fs::path(p).stem().string(),
                                     read_image_rgb(p)));
  }

  for (const Sample& s : work) {
    const int h = s.rgb.dim(1), w = s.rgb.dim(2);
    // The network runs at its training resolution; chroma is predicted
    // there and carried back up, luminance stays at native resolution.
    Sample run = s;
    if (h != base || w != base) {
      std::vector<BoundingBox> scaled;
      for (BoundingBox b : s.boxes) {
        b.x0 = static_cast<int>(std::llround(b.x0 * double(base) / w));
        b.x1 = static_cast<int>(std::llround(b.x1 * double(base) / w));
        b.y0 = static_cast<int>(std::llround(b.y0 * double(base) / h));
        b.y1 = static_cast<int>(std::llround(b.y1 * double(base) / h));
        b = clamp_box(b, base, base);
        if (!b.degenerate()) scaled.push_back(b);
      }
      run = sample_from_rgb(s.id, resize_image_bilinear(s.rgb, base, base),
                            std::move(scaled));
    }

    Tensor ab;
    std::vector<LayerWeights> maps;
    if (m.fused && !run.boxes.empty()) {
      FusedForwardOptions opt;
      opt.max_instances = cfg.ablation.max_instances;
      if (dump_weights) opt.weights_sink = &maps;
      auto instances = instance_inputs_for(run, base, opt.max_instances);
      ab = fused_forward(m.full, m.inst, m.heads, run.l_norm, instances, opt)
               ->value;
    } else {
      ab = m.full.predict(run.l_norm);
    }
    if (ab.dim(1) != h || ab.dim(2) != w)
      ab = resize_image_bilinear(ab, h, w);

    const std::string out = (fs::path(out_dir) / (s.id + "_color.png")).string();
    write_image_rgb(out, recompose_with_gt_l(s.rgb, ab));
    std::cout << out << "\n";

    for (const auto& lw : maps) {
      const int n = lw.weights.dim(0), lh = lw.weights.dim(1),
                lwd = lw.weights.dim(2);
      for (int j = 0; j < n; ++j) {
        Tensor plane({lh, lwd});
        for (int i = 0; i < lh * lwd; ++i) plane[i] = lw.weights[j * lh * lwd + i];
        char name[64];
        std::snprintf(name, sizeof name, "%s_weights_layer%02d_%d.png",
                      s.id.c_str(), lw.layer, j);
        write_heatmap((fs::path(out_dir) / name).string(), plane);
      }
    }
  }
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& data_path,
                 const std::string& pred_dir, const std::string& out_dir) {
  if (data_path.empty()) throw std::runtime_error("evaluate: no dataset given");
  Dataset data = load_dataset(resolve_annotations(data_path));

  Predictor predict;
  std::optional<Model> m;
  if (!pred_dir.empty()) {
    // Score already-rendered images instead of running the model.
    predict = [&](const Sample& s) {
      return read_image_rgb((fs::path(pred_dir) / (s.id + ".png")).string());
    };
  } else {
    m = load_model(cfg);
    predict = [&](const Sample& s) { return model_predict(*m, cfg, s); };
  }

  EvaluationOptions opt;
  opt.data_range = cfg.data_range;
  MetricReport report = evaluate_dataset(data, predict, opt);
  fs::create_directories(out_dir);
  write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), report);
  write_metrics_json((fs::path(out_dir) / "metrics.json").string(), report);
  std::cout << "mean_psnr_db=" << report.mean_psnr_db
            << " mean_ssim=" << report.mean_ssim << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& data_path,
               const std::string& out_dir) {
  if (data_path.empty()) throw std::runtime_error("ablate: no dataset given");
  Dataset data = load_dataset(resolve_annotations(data_path));
  Model m = load_model(cfg);
  if (!m.fused)
    throw std::runtime_error("ablate needs instance and fusion checkpoints");

  EvaluationOptions opt;
  opt.data_range = cfg.data_range;
  MetricReport report = run_ablation(cfg.ablation, m.full, m.inst, m.heads,
                                     data, opt);
  fs::create_directories(out_dir);
  write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), report);
  write_metrics_json((fs::path(out_dir) / "metrics.json").string(), report);
  std::cout << "placement=" << placement_name(cfg.ablation.placement)
            << " blend=" << blend_mode_name(cfg.ablation.blend)
            << " mean_psnr_db=" << report.mean_psnr_db
            << " mean_ssim=" << report.mean_ssim << "\n";
  return 0;
}

void print_error(const std::string& command, const std::string& what) {
  nlohmann::json err;
  err["error"] = what;
  err["command"] = command;
  std::cerr << err.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image colorization with per-instance feature fusion"};
  app.require_subcommand(1);

  std::string config_path, stage_sel = "all", output_dir, data_path, pred_dir;
  std::vector<std::string> inputs;
  bool resume = false, dump_weights = false;
  std::optional<std::uint64_t> seed;
  int count = 8, side = 64;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", config_path, "run configuration JSON");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override every configured seed");
  };

  auto* gen = app.add_subcommand("gen-fixture", "generate a synthetic dataset");
  gen->add_option("--count", count, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--side", side, "square image side in pixels");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--output-dir", output_dir, "target directory")->required();

  auto* train = app.add_subcommand("train", "run the training stages");
  add_common(train, true);
  train->add_option("--stage", stage_sel, "full | instance | fusion | all")
      ->check(CLI::IsMember({"full", "instance", "fusion", "all"}));
  train->add_flag("--resume", resume, "skip stages with a final checkpoint");
  train->add_option("--output-dir", output_dir, "override checkpoint directory");

  auto* colorize = app.add_subcommand("colorize", "colorize images");
  add_common(colorize, true);
  colorize->add_option("inputs", inputs, "image files or one annotations.json")
      ->required();
  colorize->add_flag("--dump-weights", dump_weights,
                     "also write fusion weight heatmaps");
  colorize->add_option("--output-dir", output_dir, "where outputs go")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score a dataset");
  add_common(evaluate, true);
  evaluate->add_option("--data", data_path, "dataset to score (default: config val/train)");
  evaluate->add_option("--pred", pred_dir, "directory of <id>.png predictions to score");
  evaluate->add_option("--output-dir", output_dir, "report directory")->required();

  auto* ablate = app.add_subcommand("ablate", "run the configured ablation");
  add_common(ablate, true);
  ablate->add_option("--data", data_path, "dataset to score (default: config val/train)");
  ablate->add_option("--output-dir", output_dir, "report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("parse", e.what());
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (gen->parsed())
      return cmd_gen_fixture(output_dir, count, side, seed.value_or(0));

    RunConfig cfg = load_run_config(config_path);
    if (seed) propagate_seed(cfg, *seed);
    if (data_path.empty()) data_path = cfg.val_data.empty() ? cfg.train_data : cfg.val_data;

    if (train->parsed()) {
      if (!output_dir.empty()) cfg.checkpoint_dir = output_dir;
      return cmd_train(std::move(cfg), stage_sel, resume);
    }
    if (colorize->parsed())
      return cmd_colorize(cfg, inputs, output_dir, dump_weights);
    if (evaluate->parsed())
      return cmd_evaluate(cfg, data_path, pred_dir, output_dir);
    return cmd_ablate(cfg, data_path, output_dir);
  } catch (const std::exception& e) {
    print_error(command, e.what());
    return 1;
  }
}
