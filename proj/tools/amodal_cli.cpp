#include "amodal/pipeline.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

// Subcommands: gen-data, train, infer, eval, visualize, ablate.
// Exit codes: 0 success, 2 validation error, 3 divergence, 4 checkpoint error.

namespace fs = std::filesystem;
using namespace amodal;
using namespace amodal::pipeline;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
};

TrainConfig resolve_config(const CommonOpts& opts) {
  TrainConfig cfg;
  if (!opts.config_path.empty()) cfg = load_config(opts.config_path);
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ValidationError("--set expects key=value, got: " + kv);
    apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key = value config file");
  cmd->add_option("--set", opts.overrides, "override a config key, e.g. --set iterations=500");
}

int cmd_gen_data(const CommonOpts& common, const std::string& out_dir, bool video, int count) {
  TrainConfig cfg = resolve_config(common);
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/images");
  std::vector<synth::AmodalInstance> all;
  synth::SceneSpec spec;
  if (!video) {
    const int n = count > 0 ? count : cfg.train_scenes;
    for (int i = 0; i < n; ++i) {
      Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(i));
      auto scene = synth::generate_scene(spec, rng, "scene_" + std::to_string(i));
      const std::string img_path = out_dir + "/images/scene_" + std::to_string(i) + ".ppm";
      viz::write_ppm(img_path, scene.image);
      for (auto& inst : scene.instances) all.push_back(std::move(inst));
    }
  } else {
    spec.occlusion_event = true;
    const int n = count > 0 ? count : cfg.train_videos;
    for (int i = 0; i < n; ++i) {
      Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(i));
      auto clip = synth::generate_video(spec, cfg.frames, rng, "video_" + std::to_string(i));
      for (int t = 0; t < clip.frames; ++t) {
        viz::write_ppm(out_dir + "/images/" + clip.scenes[t].instances[0].image_id + ".ppm",
                       clip.scenes[t].image);
        for (auto& inst : clip.scenes[t].instances) all.push_back(std::move(inst));
      }
    }
  }
  annot::export_annotations(all, out_dir + "/annotations.jsonl");
  std::cout << "wrote " << all.size() << " instances to " << out_dir << "/annotations.jsonl\n";
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& out_dir, const std::string& log_path) {
  TrainConfig cfg = resolve_config(common);
  fs::create_directories(out_dir);
  std::ofstream log_file;
  std::ostream* log_stream = nullptr;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::app);
    log_stream = &log_file;
  }
  LogFn log = jsonl_logger(log_stream);

  if (cfg.stage == "vq") {
    ImageDataset data = build_image_dataset(cfg);
    auto codec = train_vq_stage(cfg, data.vq_train, log);
    double riou = 0;
    for (const auto& m : data.vq_held)
      riou += metrics::iou(threshold(codec->reconstruct(m), 0.5f), m);
    riou /= std::max<size_t>(1, data.vq_held.size());
    save_codec(out_dir + "/codec.ckpt", cfg, *codec);
    std::cout << "codec saved; held-out round-trip IoU " << riou << "\n";
    return 0;
  }

  const std::string codec_path = out_dir + "/codec.ckpt";
  if (!fs::exists(codec_path))
    throw CheckpointError("missing prerequisite checkpoint: " + codec_path +
                          " (run the vq stage first)");
  ckpt::Header codec_header = ckpt::peek(codec_path);
  TrainConfig codec_cfg = config_from_json(codec_header.config);
  Rng crng(codec_cfg.seed);
  Codec codec(vq_config(codec_cfg), crng);
  ckpt::load(codec_path, codec.params);
  const std::uint64_t codec_hash = pipeline_codec_hash(codec);

  if (cfg.stage == "transformer") {
    ImageDataset data = build_image_dataset(cfg);
    fill_tokens(data.train, codec);
    auto model = train_coarse_stage(cfg, codec, data.train, log);
    save_coarse(out_dir + "/coarse.ckpt", cfg, model, codec_hash, false);
    std::cout << "coarse model saved\n";
    return 0;
  }
  if (cfg.stage == "video") {
    VideoDataset data = build_video_dataset(cfg);
    for (auto& clip : data.train) fill_tokens(clip.frames, codec);
    auto model = train_video_stage(cfg, codec, data.train, log);
    save_coarse(out_dir + "/coarse.ckpt", cfg, model, codec_hash, true);
    std::cout << "video coarse model saved\n";
    return 0;
  }
  if (cfg.stage == "refine") {
    const std::string coarse_path = out_dir + "/coarse.ckpt";
    if (!fs::exists(coarse_path))
      throw CheckpointError("missing prerequisite checkpoint: " + coarse_path +
                            " (run the transformer stage first)");
    ckpt::Header h = ckpt::peek(coarse_path);
    if (h.codec_hash != codec_hash)
      throw CheckpointError("coarse checkpoint was trained against a different codec");
    TrainConfig coarse_cfg = config_from_json(h.config);
    const bool video = h.config.value("video_model", false);
    Rng rng(coarse_cfg.seed + 1);
    Backbone backbone(backbone_config(coarse_cfg), rng);
    Transformer transformer(transformer_config(coarse_cfg, video), rng);
    nn::ParamRegistry<float> joint;
    joint.merge(backbone.params, "");
    joint.merge(transformer.params, "");
    ckpt::load(coarse_path, joint);

    ImageDataset data = build_image_dataset(cfg);
    std::vector<InstanceSample> subset(
        data.train.begin(),
        data.train.begin() + std::min<size_t>(1500, data.train.size()));
    auto refiner = train_refine_stage(cfg, codec, backbone, transformer, subset, log);
    save_refiner(out_dir + "/refine.ckpt", cfg, *refiner, codec_hash);
    std::cout << "refiner saved\n";
    return 0;
  }
  throw ValidationError("unknown stage: " + cfg.stage);
}

std::vector<InstanceSample> samples_from_annotations(const std::string& path, int input_size,
                                                     const std::string& image_dir) {
  auto instances = annot::import_annotations(path);
  std::vector<InstanceSample> out;
  for (const auto& inst : instances) {
    if (inst.fully_occluded) continue;
    const std::string img_path = image_dir + "/" + inst.image_id + ".ppm";
    if (!fs::exists(img_path)) continue;
    synth::Scene shell;
    shell.image = viz::read_ppm(img_path);
    if (auto s = crop_instance(shell, inst, input_size)) out.push_back(std::move(*s));
  }
  return out;
}

int cmd_eval(const CommonOpts& common, const std::string& ckpt_dir, const std::string& data_path,
             const std::string& image_dir, std::vector<double> window,
             const std::string& report_path, bool oracle_identity, bool noisy_visible) {
  TrainConfig cfg = resolve_config(common);
  Pipeline pipe = load_pipeline(ckpt_dir, !cfg.no_refine);
  EvalOptions eo;
  if (window.size() == 2) eo.window = std::make_pair(window[0], window[1]);
  eo.oracle_identity = oracle_identity;
  eo.noisy_visible = noisy_visible;
  eo.infer.decode_steps = cfg.decode_steps;
  eo.infer.gamma = cfg.gamma;
  eo.seed = cfg.seed + 777;

  EvalReport report;
  if (pipe.video()) {
    TrainConfig data_cfg = pipe.cfg;
    data_cfg.eval_videos = cfg.eval_videos;
    data_cfg.seed = cfg.seed;
    VideoDataset data = build_video_dataset(data_cfg);
    report = evaluate_videos(pipe, data.eval, eo);
  } else if (!data_path.empty()) {
    auto samples = samples_from_annotations(data_path, pipe.cfg.input_size, image_dir);
    report = evaluate_images(pipe, samples, eo);
  } else {
    TrainConfig data_cfg = pipe.cfg;
    data_cfg.eval_scenes = cfg.eval_scenes;
    data_cfg.seed = cfg.seed;
    ImageDataset data = build_image_dataset(data_cfg);
    report = evaluate_images(pipe, data.eval, eo);
  }
  std::cout << report.to_text();
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    out << report.to_json().dump(2) << "\n";
    std::cout << "report written to " << report_path << "\n";
  }
  return 0;
}

int cmd_infer(const CommonOpts& common, const std::string& ckpt_dir, const std::string& data_path,
              const std::string& image_dir, int index, const std::string& out_path,
              bool force_contain) {
  TrainConfig cfg = resolve_config(common);
  Pipeline pipe = load_pipeline(ckpt_dir, !cfg.no_refine);
  auto samples = samples_from_annotations(data_path, pipe.cfg.input_size, image_dir);
  if (index < 0 || index >= static_cast<int>(samples.size()))
    throw ValidationError("infer: index out of range (have " +
                          std::to_string(samples.size()) + " usable instances)");
  InferOptions io;
  io.decode_steps = cfg.decode_steps;
  io.gamma = cfg.gamma;
  io.force_contain = force_contain;
  io.seed = cfg.seed + 99;
  InferResult res = infer_instance(pipe, samples[index], samples[index].visible, io);
  BinaryMask pred = threshold(res.amodal[0], 0.5f);
  nlohmann::json j{{"index", index},
                   {"score", res.score},
                   {"amodal_mask", annot::mask_to_json(pred)}};
  if (out_path.empty()) {
    std::cout << j.dump() << "\n";
  } else {
    std::ofstream out(out_path);
    out << j.dump() << "\n";
    std::cout << "prediction written to " << out_path << "\n";
  }
  return 0;
}

int cmd_visualize(const CommonOpts& common, const std::string& ckpt_dir,
                  const std::string& data_path, const std::string& image_dir, int index,
                  const std::string& out_path) {
  TrainConfig cfg = resolve_config(common);
  Pipeline pipe = load_pipeline(ckpt_dir, !cfg.no_refine);
  auto samples = samples_from_annotations(data_path, pipe.cfg.input_size, image_dir);
  if (index < 0 || index >= static_cast<int>(samples.size()))
    throw ValidationError("visualize: index out of range");
  const auto& s = samples[index];
  InferOptions io;
  io.decode_steps = cfg.decode_steps;
  io.gamma = cfg.gamma;
  io.seed = cfg.seed + 99;
  InferResult res = infer_instance(pipe, s, s.visible, io);
  // columns: image | visible | coarse per decode step | refined amodal | GT amodal
  std::vector<synth::RgbImage> cols;
  cols.push_back(s.image);
  cols.push_back(viz::gray_panel(s.visible));
  for (const auto& step : res.coarse_steps) cols.push_back(viz::gray_panel(step));
  cols.push_back(viz::gray_panel(res.amodal[0]));
  cols.push_back(viz::gray_panel(s.amodal));
  viz::write_ppm(out_path, viz::compose_panel(cols));
  std::cout << "panel written to " << out_path << " (columns: image, visible, "
            << res.coarse_steps.size() << " coarse steps, refined, gt)\n";
  return 0;
}

int cmd_ablate(const CommonOpts& common, const std::string& which, const std::string& work_dir) {
  TrainConfig base = resolve_config(common);
  fs::create_directories(work_dir);
  auto train_full = [&](TrainConfig cfg, const std::string& tag) {
    ImageDataset data = build_image_dataset(cfg);
    TrainConfig vq = cfg;
    vq.learning_rate = 1e-3;
    auto codec = train_vq_stage(vq, data.vq_train);
    fill_tokens(data.train, *codec);
    TrainConfig tf = cfg;
    tf.batch_size = 8;
    auto coarse = train_coarse_stage(tf, *codec, data.train);
    Pipeline pipe;
    pipe.cfg = cfg;
    pipe.codec = std::move(codec);
    pipe.backbone = std::move(coarse.backbone);
    pipe.transformer = std::move(coarse.transformer);
    if (!cfg.no_refine) {
      std::vector<InstanceSample> subset(
          data.train.begin(), data.train.begin() + std::min<size_t>(1200, data.train.size()));
      pipe.refiner = train_refine_stage(cfg, *pipe.codec, *pipe.backbone, *pipe.transformer,
                                        subset);
    }
    EvalOptions eo;
    eo.window = std::make_pair(0.1, 0.7);
    EvalReport rep = evaluate_images(pipe, data.eval, eo);
    std::cout << tag << ": mIoU_full " << rep.model_miou_full << "  mIoU_occ "
              << rep.model_miou_occ << "\n";
    return rep;
  };

  if (which == "refine") {
    TrainConfig full = base;
    TrainConfig single = base;
    single.single_branch = true;
    TrainConfig none = base;
    none.no_refine = true;
    train_full(full, "full model   ");
    train_full(single, "single branch");
    train_full(none, "no refine    ");
    return 0;
  }
  if (which == "k") {
    TrainConfig cfg = base;
    ImageDataset data = build_image_dataset(cfg);
    TrainConfig vq = cfg;
    vq.learning_rate = 1e-3;
    auto codec = train_vq_stage(vq, data.vq_train);
    fill_tokens(data.train, *codec);
    TrainConfig tf = cfg;
    tf.batch_size = 8;
    auto coarse = train_coarse_stage(tf, *codec, data.train);
    Pipeline pipe;
    pipe.cfg = cfg;
    pipe.cfg.no_refine = true;
    pipe.codec = std::move(codec);
    pipe.backbone = std::move(coarse.backbone);
    pipe.transformer = std::move(coarse.transformer);
    for (int k : {1, 2, 3, 5, 8}) {
      EvalOptions eo;
      eo.window = std::make_pair(0.1, 0.7);
      eo.infer.decode_steps = k;
      EvalReport rep = evaluate_images(pipe, data.eval, eo);
      std::cout << "K=" << k << ": mIoU_full " << rep.model_miou_full << "  mIoU_occ "
                << rep.model_miou_occ << "\n";
    }
    return 0;
  }
  if (which == "video") {
    struct Variant {
      const char* tag;
      bool no_sttb;
      bool no_roll;
    };
    for (const Variant& v : {Variant{"full sttb+roll", false, false},
                             Variant{"no roll       ", false, true},
                             Variant{"no sttb       ", true, true}}) {
      TrainConfig cfg = base;
      cfg.stage = "video";
      cfg.no_sttb = v.no_sttb;
      cfg.no_roll = v.no_roll;
      VideoDataset data = build_video_dataset(cfg);
      TrainConfig vq = cfg;
      vq.learning_rate = 1e-3;
      auto codec = train_vq_stage(vq, data.vq_train);
      for (auto& clip : data.train) fill_tokens(clip.frames, *codec);
      auto coarse = train_video_stage(cfg, *codec, data.train);
      Pipeline pipe;
      pipe.cfg = cfg;
      pipe.cfg.no_refine = true;
      pipe.codec = std::move(codec);
      pipe.backbone = std::move(coarse.backbone);
      pipe.transformer = std::move(coarse.transformer);
      EvalOptions eo;
      EvalReport rep = evaluate_videos(pipe, data.eval, eo);
      std::cout << v.tag << ": mIoU_occ " << rep.model_miou_occ << "  hidden-frame hits "
                << rep.hidden_frames_hit << "/" << rep.hidden_frames << "\n";
    }
    return 0;
  }
  throw ValidationError("ablate: unknown protocol " + which + " (refine | k | video)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coarse-to-fine amodal mask completion toolkit"};
  app.require_subcommand(1);

  CommonOpts common;
  std::string out_dir = "out", log_path, data_path, image_dir, report_path, which = "refine";
  std::string viz_out = "panel.ppm", infer_out;
  std::vector<double> window;
  int index = 0, count = 0;
  bool video = false, oracle = false, noisy = false, force_contain = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic occlusion dataset");
  add_common(gen, common);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_flag("--video", video, "generate video clips instead of still scenes");
  gen->add_option("--count", count, "scene/video count (0 = config default)");

  auto* train = app.add_subcommand("train", "train one pipeline stage");
  add_common(train, common);
  train->add_option("--out", out_dir, "checkpoint directory")->required();
  train->add_option("--log", log_path, "append JSONL training log here");

  auto* eval = app.add_subcommand("eval", "evaluate a trained pipeline");
  add_common(eval, common);
  eval->add_option("--ckpt", out_dir, "checkpoint directory")->required();
  eval->add_option("--data", data_path, "annotations JSONL (default: synthetic eval set)");
  eval->add_option("--images", image_dir, "image directory for --data");
  eval->add_option("--window", window, "occlusion-rate window lo hi")->expected(2);
  eval->add_option("--report", report_path, "write the JSON report here");
  eval->add_flag("--oracle-identity", oracle, "harness self-test: predict the GT amodal mask");
  eval->add_flag("--noisy-visible", noisy, "feed augmented visible masks instead of GT");

  auto* infer = app.add_subcommand("infer", "run inference on one annotated instance");
  add_common(infer, common);
  infer->add_option("--ckpt", out_dir, "checkpoint directory")->required();
  infer->add_option("--data", data_path, "annotations JSONL")->required();
  infer->add_option("--images", image_dir, "image directory")->required();
  infer->add_option("--index", index, "instance index");
  infer->add_option("--out", infer_out, "write prediction JSON here (default stdout)");
  infer->add_flag("--force-contain", force_contain,
                  "union the predicted mask with the input visible region");

  auto* vis = app.add_subcommand("visualize", "write a decode-progress panel image");
  add_common(vis, common);
  vis->add_option("--ckpt", out_dir, "checkpoint directory")->required();
  vis->add_option("--data", data_path, "annotations JSONL")->required();
  vis->add_option("--images", image_dir, "image directory")->required();
  vis->add_option("--index", index, "instance index");
  vis->add_option("--out", viz_out, "output PPM path");

  auto* abl = app.add_subcommand("ablate", "run an ablation protocol");
  add_common(abl, common);
  abl->add_option("--which", which, "refine | k | video");
  abl->add_option("--work", out_dir, "working directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(common, out_dir, video, count);
    if (train->parsed()) return cmd_train(common, out_dir, log_path);
    if (eval->parsed())
      return cmd_eval(common, out_dir, data_path, image_dir, window, report_path, oracle, noisy);
    if (infer->parsed())
      return cmd_infer(common, out_dir, data_path, image_dir, index, infer_out, force_contain);
    if (vis->parsed()) return cmd_visualize(common, out_dir, data_path, image_dir, index, viz_out);
    if (abl->parsed()) return cmd_ablate(common, which, out_dir);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
