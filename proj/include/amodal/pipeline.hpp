#pragma once

#include "amodal/annotations.hpp"
#include "amodal/backbone.hpp"
#include "amodal/checkpoint.hpp"
#include "amodal/codec.hpp"
#include "amodal/metrics.hpp"
#include "amodal/refine.hpp"
#include "amodal/transformer.hpp"
#include "amodal/viz.hpp"

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace amodal::pipeline {

using json = nlohmann::json;

// ----------------------------------------------------------------------------
// configuration

struct TrainConfig {
  std::string stage = "vq";  // vq | transformer | refine | video
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  int batch_size = 16;
  int iterations = 2000;
  int input_size = 32;
  int downsample_factor = 4;
  int n_z = 8;
  int codebook_size = 64;
  int base_channels = 16;   // codec encoder width
  int dim = 64;             // transformer / feature width
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 2;
  int trunk_channels = 32;  // refinement decoder width
  int decode_steps = 3;     // K
  std::string gamma = "cosine";
  MaskingPolicy masking;
  int frames = 4;  // video clip length
  // ablation flags
  bool no_refine = false;
  bool single_branch = false;
  bool no_attention = false;
  bool no_roll = false;
  bool no_sttb = false;
  bool gt_visible = true;       // eval-time visible-mask source
  bool augment_visible = true;  // train-time visible-mask noise
  std::uint64_t seed = 1;
  // synthetic data sizes
  int train_scenes = 320;
  int eval_scenes = 48;
  int train_videos = 96;
  int eval_videos = 24;

  int latent_size() const { return input_size / downsample_factor; }
  int latent_cells() const { return latent_size() * latent_size(); }

  void validate() const {
    if (learning_rate <= 0 || batch_size <= 0 || iterations < 0 || input_size <= 0)
      throw ValidationError("TrainConfig: positive sizes and rates required");
    if (input_size % downsample_factor != 0)
      throw ValidationError("TrainConfig: input size not divisible by downsample factor");
    if (single_branch && no_refine)
      throw ValidationError("TrainConfig: single_branch requires the refine stage enabled");
    if (decode_steps < 1) throw ValidationError("TrainConfig: K must be >= 1");
    masking.validate();
    if (stage == "video" && !no_sttb && !no_roll && frames % 2 != 0)
      throw ValidationError("TrainConfig: temporal roll needs an even frame count");
  }
};

inline json config_to_json(const TrainConfig& c) {
  return json{{"stage", c.stage},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"iterations", c.iterations},
              {"input_size", c.input_size},
              {"downsample_factor", c.downsample_factor},
              {"n_z", c.n_z},
              {"codebook_size", c.codebook_size},
              {"base_channels", c.base_channels},
              {"dim", c.dim},
              {"layers", c.layers},
              {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},
              {"trunk_channels", c.trunk_channels},
              {"decode_steps", c.decode_steps},
              {"gamma", c.gamma},
              {"mask_ratio_low", c.masking.ratio_low},
              {"mask_ratio_high", c.masking.ratio_high},
              {"frames", c.frames},
              {"no_refine", c.no_refine},
              {"single_branch", c.single_branch},
              {"no_attention", c.no_attention},
              {"no_roll", c.no_roll},
              {"no_sttb", c.no_sttb},
              {"gt_visible", c.gt_visible},
              {"augment_visible", c.augment_visible},
              {"seed", c.seed},
              {"train_scenes", c.train_scenes},
              {"eval_scenes", c.eval_scenes},
              {"train_videos", c.train_videos},
              {"eval_videos", c.eval_videos}};
}

inline void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_double = [&] { return std::stod(value); };
  auto as_bool = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ValidationError("config: boolean expected for " + key);
  };
  if (key == "stage") c.stage = value;
  else if (key == "learning_rate") c.learning_rate = as_double();
  else if (key == "weight_decay") c.weight_decay = as_double();
  else if (key == "batch_size") c.batch_size = as_int();
  else if (key == "iterations") c.iterations = as_int();
  else if (key == "input_size") c.input_size = as_int();
  else if (key == "downsample_factor") c.downsample_factor = as_int();
  else if (key == "n_z") c.n_z = as_int();
  else if (key == "codebook_size") c.codebook_size = as_int();
  else if (key == "base_channels") c.base_channels = as_int();
  else if (key == "dim") c.dim = as_int();
  else if (key == "layers") c.layers = as_int();
  else if (key == "heads") c.heads = as_int();
  else if (key == "mlp_ratio") c.mlp_ratio = as_int();
  else if (key == "trunk_channels") c.trunk_channels = as_int();
  else if (key == "decode_steps") c.decode_steps = as_int();
  else if (key == "gamma") c.gamma = value;
  else if (key == "mask_ratio_low") c.masking.ratio_low = as_double();
  else if (key == "mask_ratio_high") c.masking.ratio_high = as_double();
  else if (key == "frames") c.frames = as_int();
  else if (key == "no_refine") c.no_refine = as_bool();
  else if (key == "single_branch") c.single_branch = as_bool();
  else if (key == "no_attention") c.no_attention = as_bool();
  else if (key == "no_roll") c.no_roll = as_bool();
  else if (key == "no_sttb") c.no_sttb = as_bool();
  else if (key == "gt_visible") c.gt_visible = as_bool();
  else if (key == "augment_visible") c.augment_visible = as_bool();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "train_scenes") c.train_scenes = as_int();
  else if (key == "eval_scenes") c.eval_scenes = as_int();
  else if (key == "train_videos") c.train_videos = as_int();
  else if (key == "eval_videos") c.eval_videos = as_int();
  else throw ValidationError("config: unknown key " + key);
}

// `key = value` lines, '#' comments
inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path);
  TrainConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
      if (!blank)
        throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    apply_config_entry(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

// ----------------------------------------------------------------------------
// datasets (crop space)

struct InstanceSample {
  synth::RgbImage image;   // cropped to input_size
  BinaryMask visible, amodal;
  double occlusion_rate = 0.0;
  bool fully_occluded = false;
  std::string image_id;
  TokenGrid vis_tokens, amo_tokens;  // filled once the codec is frozen
};

struct VideoClip {
  std::string video_id;
  int object_id = -1;
  std::vector<InstanceSample> frames;
  bool occlusion_event = false;  // hidden at an interior frame, seen at both ends
};

struct ImageDataset {
  std::vector<InstanceSample> train, eval;
  std::vector<BinaryMask> vq_train, vq_held;
};

struct VideoDataset {
  std::vector<VideoClip> train, eval;
  std::vector<BinaryMask> vq_train, vq_held;
};

inline std::optional<InstanceSample> crop_instance(const synth::Scene& scene,
                                                   const synth::AmodalInstance& inst,
                                                   int input_size) {
  if (inst.fully_occluded) return std::nullopt;
  if (inst.bbox[2] <= 0 || inst.bbox[3] <= 0) return std::nullopt;
  CropResult crop = crop_roi(scene.image, inst.bbox, {inst.visible, inst.amodal}, input_size);
  InstanceSample s;
  s.image = std::move(crop.image);
  s.visible = std::move(crop.masks[0]);
  s.amodal = std::move(crop.masks[1]);
  if (s.amodal.area() < 8 || s.visible.area() == 0) return std::nullopt;
  s.occlusion_rate = 1.0 - static_cast<double>(s.visible.area()) / s.amodal.area();
  s.fully_occluded = false;
  s.image_id = inst.image_id;
  return s;
}

inline std::vector<InstanceSample> instances_from_scenes(int scenes, std::uint64_t seed,
                                                         int input_size,
                                                         const std::string& prefix) {
  synth::SceneSpec spec;
  std::vector<InstanceSample> out;
  for (int i = 0; i < scenes; ++i) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
    synth::Scene scene = synth::generate_scene(spec, rng, prefix + std::to_string(i));
    for (const auto& inst : scene.instances)
      if (auto s = crop_instance(scene, inst, input_size)) out.push_back(std::move(*s));
  }
  return out;
}

inline ImageDataset build_image_dataset(const TrainConfig& cfg) {
  ImageDataset d;
  d.train = instances_from_scenes(cfg.train_scenes, cfg.seed * 1000 + 1, cfg.input_size, "train_");
  d.eval = instances_from_scenes(cfg.eval_scenes, cfg.seed * 1000 + 2, cfg.input_size, "eval_");
  for (const auto& s : d.train) {
    d.vq_train.push_back(s.amodal);
    d.vq_train.push_back(s.visible);
  }
  for (size_t i = 0; i < d.eval.size(); i += 4) d.vq_held.push_back(d.eval[i].amodal);
  return d;
}

// Per-object clips cropped with one shared window: the union of the object's
// visible-frame bboxes, so cells stay aligned across frames.
inline std::vector<VideoClip> clips_from_videos(int videos, std::uint64_t seed, int frames,
                                                int input_size, bool occlusion_event,
                                                const std::string& prefix) {
  synth::SceneSpec spec;
  spec.occlusion_event = occlusion_event;
  std::vector<VideoClip> out;
  for (int i = 0; i < videos; ++i) {
    synth::VideoSample video;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i) * 16 + attempt);
      video = synth::generate_video(spec, frames, rng, prefix + std::to_string(i));
      if (!occlusion_event || synth::has_occlusion_event(video)) break;
    }
    const size_t objects = video.scenes.front().instances.size();
    for (size_t obj = 0; obj < objects; ++obj) {
      // shared window from visible-frame bboxes only
      int x0 = 1 << 28, y0 = 1 << 28, x1 = -1, y1 = -1;
      bool any_visible = false, any_hidden = false, degenerate = false;
      for (int t = 0; t < frames; ++t) {
        const auto& inst = video.scenes[t].instances[obj];
        if (inst.amodal.area() < 8) degenerate = true;
        if (inst.fully_occluded) {
          any_hidden = true;
          continue;
        }
        any_visible = true;
        x0 = std::min(x0, inst.bbox[0]);
        y0 = std::min(y0, inst.bbox[1]);
        x1 = std::max(x1, inst.bbox[0] + inst.bbox[2]);
        y1 = std::max(y1, inst.bbox[1] + inst.bbox[3]);
      }
      if (!any_visible || degenerate) continue;
      const std::array<int, 4> bbox{x0, y0, x1 - x0, y1 - y0};
      VideoClip clip;
      clip.video_id = video.video_id;
      clip.object_id = static_cast<int>(obj);
      bool ok = true;
      for (int t = 0; t < frames; ++t) {
        const auto& inst = video.scenes[t].instances[obj];
        CropResult crop =
            crop_roi(video.scenes[t].image, bbox, {inst.visible, inst.amodal}, input_size);
        InstanceSample s;
        s.image = std::move(crop.image);
        s.visible = std::move(crop.masks[0]);
        s.amodal = std::move(crop.masks[1]);
        if (s.amodal.area() == 0) ok = false;
        s.occlusion_rate =
            s.amodal.area() == 0
                ? 1.0
                : 1.0 - static_cast<double>(s.visible.area()) / s.amodal.area();
        s.fully_occluded = s.visible.area() == 0;
        s.image_id = inst.image_id;
        clip.frames.push_back(std::move(s));
      }
      if (!ok) continue;
      const bool first_seen = !clip.frames.front().fully_occluded;
      const bool last_seen = !clip.frames.back().fully_occluded;
      clip.occlusion_event = first_seen && last_seen && any_hidden;
      out.push_back(std::move(clip));
    }
  }
  return out;
}

inline VideoDataset build_video_dataset(const TrainConfig& cfg) {
  VideoDataset d;
  d.train = clips_from_videos(cfg.train_videos, cfg.seed * 1000 + 11, cfg.frames, cfg.input_size,
                              true, "tv");
  d.eval = clips_from_videos(cfg.eval_videos, cfg.seed * 1000 + 12, cfg.frames, cfg.input_size,
                             true, "ev");
  for (const auto& clip : d.train)
    for (const auto& f : clip.frames) {
      d.vq_train.push_back(f.amodal);
      if (f.visible.area() > 0) d.vq_train.push_back(f.visible);
    }
  for (size_t i = 0; i < d.eval.size(); i += 4)
    d.vq_held.push_back(d.eval[i].frames.front().amodal);
  return d;
}

// ----------------------------------------------------------------------------
// assembled pipeline

using Codec = MaskCodec<float>;
using Backbone = ConvBackbone<float>;
using Transformer = CoarseTransformer<float>;
using Refine = Refiner<float>;

struct Pipeline {
  TrainConfig cfg;
  std::unique_ptr<Codec> codec;
  std::unique_ptr<Backbone> backbone;
  std::unique_ptr<Transformer> transformer;
  std::unique_ptr<Refine> refiner;
  std::uint64_t codec_hash = 0;

  bool video() const { return transformer && transformer->cfg.frames > 1; }
};

inline VqConfig vq_config(const TrainConfig& cfg) {
  VqConfig v;
  v.codebook_size = cfg.codebook_size;
  v.n_z = cfg.n_z;
  v.downsample_factor = cfg.downsample_factor;
  v.base_channels = cfg.base_channels;
  return v;
}

inline BackboneConfig backbone_config(const TrainConfig& cfg) {
  BackboneConfig b;
  b.dim = cfg.dim;
  b.downsample_factor = cfg.downsample_factor;
  return b;
}

inline TransformerConfig transformer_config(const TrainConfig& cfg, bool video) {
  TransformerConfig t;
  t.dim = cfg.dim;
  t.layers = cfg.layers;
  t.heads = cfg.heads;
  t.mlp_ratio = cfg.mlp_ratio;
  t.codebook_size = cfg.codebook_size;
  t.grid_h = t.grid_w = cfg.latent_size();
  t.frames = video ? cfg.frames : 1;
  t.temporal = video && !cfg.no_sttb;
  t.roll = t.temporal && !cfg.no_roll;
  return t;
}

inline RefineConfig refine_config(const TrainConfig& cfg) {
  RefineConfig r;
  r.dim = cfg.dim;
  r.downsample_factor = cfg.downsample_factor;
  r.trunk_channels = cfg.trunk_channels;
  r.two_branch = !cfg.single_branch;
  r.use_attention = !cfg.no_attention;
  return r;
}

using LogFn = std::function<void(const json&)>;

inline LogFn jsonl_logger(std::ostream* out) {
  return [out](const json& j) {
    if (out) (*out) << j.dump() << "\n";
  };
}

// ----------------------------------------------------------------------------
// training stages

inline std::unique_ptr<Codec> train_vq_stage(const TrainConfig& cfg,
                                             const std::vector<BinaryMask>& masks,
                                             const LogFn& log = nullptr) {
  cfg.validate();
  Rng init(cfg.seed);
  auto codec = std::make_unique<Codec>(vq_config(cfg), init);
  FitOptions opt;
  opt.steps = cfg.iterations;
  opt.batch_size = cfg.batch_size;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  opt.seed = cfg.seed + 101;
  opt.log_every = std::max(1, cfg.iterations / 20);
  if (log)
    opt.on_log = [&](int step, const LossBreakdown& lb) {
      json j{{"stage", "vq"}, {"step", step}, {"total", lb.total}};
      for (const auto& [k, v] : lb.terms) j[k] = v;
      log(j);
    };
  fit_vq(*codec, masks, VqLossConfig{}, opt);
  return codec;
}

inline void fill_tokens(std::vector<InstanceSample>& samples, const Codec& codec) {
  for (auto& s : samples) {
    s.vis_tokens = codec.encode_tokens(s.visible);
    s.amo_tokens = codec.encode_tokens(s.amodal);
  }
}

struct CoarseModel {
  std::unique_ptr<Backbone> backbone;
  std::unique_ptr<Transformer> transformer;
};

namespace detail {

template <typename GetClip>
CoarseModel train_coarse_impl(const TrainConfig& cfg, const Codec& codec, bool video,
                              int clip_count, GetClip&& clip_at, const LogFn& log) {
  cfg.validate();
  if (clip_count == 0) throw ValidationError("train: empty dataset");
  Rng init(cfg.seed + 1);
  CoarseModel m;
  m.backbone = std::make_unique<Backbone>(backbone_config(cfg), init);
  m.transformer = std::make_unique<Transformer>(transformer_config(cfg, video), init);

  nn::ParamRegistry<float> joint;
  joint.merge(m.backbone->params, "");
  joint.merge(m.transformer->params, "");
  nn::AdamW<float> opt(cfg.learning_rate, cfg.weight_decay);
  Rng rng(cfg.seed + 202);

  std::vector<Matf> good;
  auto snapshot = [&] {
    good.clear();
    for (auto& [n, p] : joint.items) good.push_back(p->value);
  };
  auto restore = [&] {
    for (size_t i = 0; i < good.size(); ++i) joint.items[i].second->value = good[i];
  };
  snapshot();

  const int batch = std::max(1, video ? cfg.batch_size / 4 : cfg.batch_size);
  for (int step = 1; step <= cfg.iterations; ++step) {
    double loss_sum = 0;
    for (int b = 0; b < batch; ++b) {
      const auto& clip = clip_at(static_cast<int>(rng.uniform_int(clip_count)));
      std::vector<ad::Var<float>> feats;
      std::vector<TokenGrid> vis, amo_masked, amo_target;
      std::vector<int> masked_positions;
      const int cells = cfg.latent_cells();
      for (size_t f = 0; f < clip.size(); ++f) {
        const InstanceSample& s = *clip[f];
        feats.push_back(m.backbone->forward(
            ad::constant<float>(Backbone::image_to_input(s.image)), cfg.input_size,
            cfg.input_size));
        if (cfg.augment_visible) {
          BinaryMask noisy = synth::augment_mask(s.visible, rng);
          vis.push_back(codec.encode_tokens(noisy));
        } else {
          vis.push_back(s.vis_tokens);
        }
        amo_target.push_back(s.amo_tokens);
      }
      // one masking draw across the whole clip token grid
      {
        TokenGrid all(static_cast<int>(clip.size()) * cfg.latent_size(), cfg.latent_size(),
                      cfg.codebook_size);
        for (size_t f = 0; f < clip.size(); ++f)
          for (int i = 0; i < cells; ++i)
            all.set_flat(static_cast<int>(f) * cells + i, amo_target[f].flat(i));
        auto [masked, positions] = sample_training_mask(all, cfg.masking, rng);
        masked_positions = std::move(positions);
        for (size_t f = 0; f < clip.size(); ++f) {
          TokenGrid g(cfg.latent_size(), cfg.latent_size(), cfg.codebook_size);
          for (int i = 0; i < cells; ++i)
            g.set_flat(i, masked.flat(static_cast<int>(f) * cells + i));
          amo_masked.push_back(std::move(g));
        }
      }
      if (masked_positions.empty()) continue;
      auto logits = m.transformer->forward_logits(feats, vis, amo_masked);
      auto nll = masked_nll_loss(logits, amo_target, masked_positions);
      if (!nll.breakdown.finite()) {
        restore();
        throw DivergenceError("train transformer: non-finite loss at step " +
                              std::to_string(step));
      }
      ad::backward(nll.loss);
      loss_sum += nll.breakdown.term("nll");
    }
    scale_grads(joint, 1.0f / batch);
    opt.step(joint);
    if (log && step % std::max(1, cfg.iterations / 20) == 0)
      log(json{{"stage", video ? "video" : "transformer"},
               {"step", step},
               {"nll", loss_sum / batch}});
    if (step % 500 == 0) snapshot();
  }
  return m;
}

}  // namespace detail

inline CoarseModel train_coarse_stage(const TrainConfig& cfg, const Codec& codec,
                                      const std::vector<InstanceSample>& samples,
                                      const LogFn& log = nullptr) {
  std::vector<std::vector<const InstanceSample*>> clips;
  for (const auto& s : samples) clips.push_back({&s});
  return detail::train_coarse_impl(
      cfg, codec, false, static_cast<int>(clips.size()),
      [&](int i) -> const std::vector<const InstanceSample*>& { return clips[i]; }, log);
}

inline CoarseModel train_video_stage(const TrainConfig& cfg, const Codec& codec,
                                     const std::vector<VideoClip>& clips,
                                     const LogFn& log = nullptr) {
  std::vector<std::vector<const InstanceSample*>> views;
  for (const auto& c : clips) {
    std::vector<const InstanceSample*> v;
    for (const auto& f : c.frames) v.push_back(&f);
    views.push_back(std::move(v));
  }
  return detail::train_coarse_impl(
      cfg, codec, true, static_cast<int>(views.size()),
      [&](int i) -> const std::vector<const InstanceSample*>& { return views[i]; }, log);
}

// ----------------------------------------------------------------------------
// inference

struct InferResult {
  std::vector<SoftMask> coarse_steps;  // decoded per-step candidates (first frame)
  std::vector<SoftMask> coarse;        // final coarse per frame
  std::vector<SoftMask> amodal;        // refined (or coarse when no_refine)
  double score = 0.0;
  Vecf attention_weights;              // refinement attention snapshot, first frame
};

struct InferOptions {
  int decode_steps = 3;
  std::string gamma = "cosine";
  bool force_contain = false;
  std::uint64_t seed = 7;
};

inline std::vector<const InstanceSample*> as_clip(const InstanceSample& s) { return {&s}; }

inline InferResult infer_clip(const Pipeline& pipe, const std::vector<const InstanceSample*>& clip,
                              const std::vector<BinaryMask>& visible_inputs,
                              const InferOptions& opt) {
  const auto& cfg = pipe.cfg;
  if (!pipe.codec || !pipe.transformer || !pipe.backbone)
    throw CheckpointError("infer: pipeline missing trained stages");
  if (static_cast<int>(clip.size()) != pipe.transformer->cfg.frames)
    throw ValidationError("infer: clip length does not match the model's frame count");

  std::vector<ad::Var<float>> feats;
  std::vector<TokenGrid> vis;
  for (size_t f = 0; f < clip.size(); ++f) {
    feats.push_back(ad::constant<float>(pipe.backbone->extract_features(clip[f]->image)));
    vis.push_back(pipe.codec->encode_tokens(visible_inputs[f]));
  }
  const int total = pipe.transformer->cfg.amodal_tokens();
  DecodeSchedule sched = build_schedule(total, opt.decode_steps, opt.gamma);
  Rng rng(opt.seed);
  DecodeResult dec = iterative_decode(*pipe.transformer, feats, vis, sched, rng);

  InferResult out;
  out.score = dec.mean_confidence;
  for (const auto& step : dec.trace) out.coarse_steps.push_back(pipe.codec->decode(step[0]));
  for (int f = 0; f < pipe.transformer->cfg.frames; ++f)
    out.coarse.push_back(pipe.codec->decode(dec.tokens[f]));

  for (int f = 0; f < pipe.transformer->cfg.frames; ++f) {
    SoftMask amodal = out.coarse[f];
    if (!cfg.no_refine) {
      if (!pipe.refiner) throw CheckpointError("infer: refine stage missing");
      auto in = make_refine_input<float>(feats[f]->value, out.coarse[f], cfg.latent_size(),
                                         cfg.latent_size());
      if (f == 0) out.attention_weights = semantic_attention(in.downsampled, in.v_img).weights;
      amodal = pipe.refiner->forward(in).amodal;  // visible branch suppressed at inference
    } else if (f == 0) {
      auto in = make_refine_input<float>(feats[f]->value, out.coarse[f], cfg.latent_size(),
                                         cfg.latent_size());
      out.attention_weights = semantic_attention(in.downsampled, in.v_img).weights;
    }
    if (opt.force_contain) {
      for (int r = 0; r < amodal.height(); ++r)
        for (int c = 0; c < amodal.width(); ++c)
          if (visible_inputs[f].v(r, c)) amodal.v(r, c) = 1.0f;
    }
    out.amodal.push_back(std::move(amodal));
  }
  return out;
}

inline InferResult infer_instance(const Pipeline& pipe, const InstanceSample& sample,
                                  const BinaryMask& visible_input, const InferOptions& opt) {
  return infer_clip(pipe, {&sample}, {visible_input}, opt);
}

// ----------------------------------------------------------------------------
// baselines

// Filled convex hull of the visible pixels (monotone chain + inclusive
// point-in-convex-polygon). Degenerate hulls fall back to the visible mask.
inline BinaryMask convex_hull_fill(const BinaryMask& visible) {
  std::vector<std::array<long, 2>> pts;  // (x, y)
  for (int r = 0; r < visible.height(); ++r)
    for (int c = 0; c < visible.width(); ++c)
      if (visible.v(r, c)) pts.push_back({c, r});
  if (pts.size() < 3) return visible;
  std::sort(pts.begin(), pts.end());
  auto cross = [](const std::array<long, 2>& o, const std::array<long, 2>& a,
                  const std::array<long, 2>& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  std::vector<std::array<long, 2>> hull(2 * pts.size());
  size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  const size_t lower = k + 1;
  for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
    hull[k++] = *it;
  }
  hull.resize(k - 1);
  if (hull.size() < 3) return visible;

  BinaryMask out(visible.height(), visible.width());
  for (int r = 0; r < visible.height(); ++r)
    for (int c = 0; c < visible.width(); ++c) {
      bool inside = true;
      for (size_t i = 0; i < hull.size() && inside; ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        const long d = (b[0] - a[0]) * (r - a[1]) - (b[1] - a[1]) * (c - a[0]);
        if (d < 0) inside = false;  // hull is counter-clockwise, boundary counts
      }
      out.v(r, c) = inside ? 1 : 0;
    }
  return out;
}

// ----------------------------------------------------------------------------
// evaluation

struct EvalOptions {
  metrics::OcclusionWindow window;
  bool oracle_identity = false;   // harness self-test: predict gt amodal
  bool noisy_visible = false;     // feed augment_mask(visible) instead of GT
  InferOptions infer;
  std::uint64_t seed = 31;
};

struct BucketStat {
  double lo = 0, hi = 0;
  int count = 0;
  double miou_full = 0, miou_occ = 0;
};

struct EvalReport {
  int instances = 0;
  metrics::OcclusionWindow window;
  double model_miou_full = 0, model_miou_occ = 0;
  double visible_copy_miou_full = 0, visible_copy_miou_occ = 0;
  double hull_miou_full = 0, hull_miou_occ = 0;
  metrics::ApResult ap;
  std::vector<BucketStat> buckets;
  // video extras
  int event_clips = 0, event_clips_hit = 0;
  int hidden_frames = 0, hidden_frames_hit = 0;

  json to_json() const {
    json j{{"instances", instances},
           {"model", {{"miou_full", model_miou_full}, {"miou_occ", model_miou_occ}}},
           {"visible_copy",
            {{"miou_full", visible_copy_miou_full}, {"miou_occ", visible_copy_miou_occ}}},
           {"convex_hull", {{"miou_full", hull_miou_full}, {"miou_occ", hull_miou_occ}}},
           {"ap", {{"ap", ap.ap}, {"ap50", ap.ap50}, {"ap75", ap.ap75}, {"ar", ap.ar}}}};
    if (window) j["occlusion_window"] = {window->first, window->second};
    json b = json::array();
    for (const auto& s : buckets)
      b.push_back({{"lo", s.lo},
                   {"hi", s.hi},
                   {"count", s.count},
                   {"miou_full", s.miou_full},
                   {"miou_occ", s.miou_occ}});
    j["occlusion_buckets"] = b;
    if (event_clips > 0)
      j["occlusion_events"] = {{"clips", event_clips},
                               {"clips_hit", event_clips_hit},
                               {"hidden_frames", hidden_frames},
                               {"hidden_frames_hit", hidden_frames_hit}};
    return j;
  }

  std::string to_text() const {
    std::string s;
    s += "instances evaluated: " + std::to_string(instances) + "\n";
    if (window)
      s += "occlusion window: [" + std::to_string(window->first) + ", " +
           std::to_string(window->second) + "]\n";
    auto line = [&](const std::string& name, double f, double o) {
      s += name + ": mIoU_full " + std::to_string(f) + "  mIoU_occ " + std::to_string(o) + "\n";
    };
    line("model        ", model_miou_full, model_miou_occ);
    line("visible copy ", visible_copy_miou_full, visible_copy_miou_occ);
    line("convex hull  ", hull_miou_full, hull_miou_occ);
    s += "AP " + std::to_string(ap.ap) + "  AP50 " + std::to_string(ap.ap50) + "  AP75 " +
         std::to_string(ap.ap75) + "  AR " + std::to_string(ap.ar) + "\n";
    for (const auto& b : buckets)
      s += "  occ [" + std::to_string(b.lo) + "," + std::to_string(b.hi) + ") n=" +
           std::to_string(b.count) + " mIoU_full " + std::to_string(b.miou_full) +
           " mIoU_occ " + std::to_string(b.miou_occ) + "\n";
    if (event_clips > 0)
      s += "occlusion events: clips " + std::to_string(event_clips_hit) + "/" +
           std::to_string(event_clips) + " hidden frames " + std::to_string(hidden_frames_hit) +
           "/" + std::to_string(hidden_frames) + "\n";
    return s;
  }
};

namespace detail {

inline synth::AmodalInstance to_gt(const InstanceSample& s) {
  synth::AmodalInstance gt;
  gt.image_id = s.image_id;
  gt.category = "object";
  gt.visible = s.visible;
  gt.amodal = s.amodal;
  gt.occlusion_rate = s.occlusion_rate;
  gt.fully_occluded = s.fully_occluded;
  gt.bbox = synth::tight_bbox(s.fully_occluded ? s.amodal : s.visible);
  return gt;
}

struct EvalAccum {
  std::vector<BinaryMask> preds, vis_copy, hulls;
  std::vector<synth::AmodalInstance> gts;
  std::vector<metrics::EvalRecord> records;

  void add(const InstanceSample& s, const BinaryMask& pred, double score) {
    auto gt = to_gt(s);
    preds.push_back(pred);
    vis_copy.push_back(s.visible);
    hulls.push_back(convex_hull_fill(s.visible));
    records.push_back({pred, score, gt});
    gts.push_back(std::move(gt));
  }

  void fill(EvalReport& r, const metrics::OcclusionWindow& window) const {
    r.instances = static_cast<int>(preds.size());
    r.window = window;
    r.model_miou_full = metrics::miou_full(preds, gts, window);
    r.model_miou_occ = metrics::miou_occ(preds, gts, window);
    r.visible_copy_miou_full = metrics::miou_full(vis_copy, gts, window);
    r.visible_copy_miou_occ = metrics::miou_occ(vis_copy, gts, window);
    r.hull_miou_full = metrics::miou_full(hulls, gts, window);
    r.hull_miou_occ = metrics::miou_occ(hulls, gts, window);
    r.ap = metrics::average_precision(records);
    const double edges[] = {0.0, 0.1, 0.3, 0.5, 0.7, 1.0001};
    for (int b = 0; b < 5; ++b) {
      BucketStat st;
      st.lo = edges[b];
      st.hi = edges[b + 1];
      std::vector<BinaryMask> bp;
      std::vector<synth::AmodalInstance> bg;
      for (size_t i = 0; i < gts.size(); ++i)
        if (gts[i].occlusion_rate >= st.lo && gts[i].occlusion_rate < st.hi) {
          bp.push_back(preds[i]);
          bg.push_back(gts[i]);
        }
      st.count = static_cast<int>(bp.size());
      if (st.count > 0) {
        st.miou_full = metrics::miou_full(bp, bg);
        bool any_occ = false;
        for (const auto& g : bg)
          if (mask_diff(g.amodal, g.visible).area() > 0) any_occ = true;
        st.miou_occ = any_occ ? metrics::miou_occ(bp, bg) : 0.0;
      }
      r.buckets.push_back(st);
    }
  }
};

}  // namespace detail

inline EvalReport evaluate_images(const Pipeline& pipe, const std::vector<InstanceSample>& samples,
                                  const EvalOptions& opt) {
  if (samples.empty()) throw ValidationError("evaluate: empty dataset");
  detail::EvalAccum acc;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    BinaryMask pred(s.amodal.height(), s.amodal.width());
    double score = 1.0;
    if (opt.oracle_identity) {
      pred = s.amodal;
    } else {
      BinaryMask vis_in = s.visible;
      if (opt.noisy_visible) {
        Rng nrng = Rng::substream(opt.seed, i);
        vis_in = synth::augment_mask(s.visible, nrng);
      }
      InferOptions io = opt.infer;
      io.seed = opt.seed * 7919 + i;
      InferResult res = infer_instance(pipe, s, vis_in, io);
      pred = threshold(res.amodal[0], 0.5f);
      score = res.score;
    }
    acc.add(s, pred, score);
  }
  EvalReport report;
  acc.fill(report, opt.window);
  return report;
}

inline EvalReport evaluate_videos(const Pipeline& pipe, const std::vector<VideoClip>& clips,
                                  const EvalOptions& opt) {
  if (clips.empty()) throw ValidationError("evaluate: empty dataset");
  detail::EvalAccum acc;
  EvalReport report;
  for (size_t ci = 0; ci < clips.size(); ++ci) {
    const auto& clip = clips[ci];
    std::vector<const InstanceSample*> frames;
    std::vector<BinaryMask> vis_in;
    for (const auto& f : clip.frames) {
      frames.push_back(&f);
      if (opt.noisy_visible && f.visible.area() > 0) {
        Rng nrng = Rng::substream(opt.seed, ci * 131 + frames.size());
        vis_in.push_back(synth::augment_mask(f.visible, nrng));
      } else {
        vis_in.push_back(f.visible);
      }
    }
    std::vector<BinaryMask> preds;
    double score = 1.0;
    if (opt.oracle_identity) {
      for (const auto& f : clip.frames) preds.push_back(f.amodal);
    } else {
      InferOptions io = opt.infer;
      io.seed = opt.seed * 104729 + ci;
      InferResult res = infer_clip(pipe, frames, vis_in, io);
      score = res.score;
      for (auto& a : res.amodal) preds.push_back(threshold(a, 0.5f));
    }
    bool clip_has_hidden = false, clip_all_hit = true;
    for (size_t f = 0; f < clip.frames.size(); ++f) {
      acc.add(clip.frames[f], preds[f], score);
      if (clip.frames[f].fully_occluded) {
        clip_has_hidden = true;
        ++report.hidden_frames;
        const bool hit =
            preds[f].area() >= 0.25 * static_cast<double>(clip.frames[f].amodal.area());
        if (hit) ++report.hidden_frames_hit;
        clip_all_hit = clip_all_hit && hit;
      }
    }
    if (clip.occlusion_event && clip_has_hidden) {
      ++report.event_clips;
      if (clip_all_hit) ++report.event_clips_hit;
    }
  }
  acc.fill(report, opt.window);
  return report;
}

// ----------------------------------------------------------------------------
// checkpoint wiring

inline std::uint64_t pipeline_codec_hash(const Codec& codec) {
  return ckpt::content_hash(codec.params);
}

inline void save_codec(const std::string& path, const TrainConfig& cfg, const Codec& codec) {
  ckpt::Header h;
  h.kind = ckpt::Kind::codec;
  h.codebook_size = cfg.codebook_size;
  h.n_z = cfg.n_z;
  h.downsample_factor = cfg.downsample_factor;
  h.codec_hash = pipeline_codec_hash(codec);
  h.config = config_to_json(cfg);
  ckpt::save(path, h, codec.params);
}

inline void save_coarse(const std::string& path, const TrainConfig& cfg, const CoarseModel& m,
                        std::uint64_t codec_hash, bool video) {
  ckpt::Header h;
  h.kind = ckpt::Kind::coarse;
  h.codebook_size = cfg.codebook_size;
  h.n_z = cfg.n_z;
  h.downsample_factor = cfg.downsample_factor;
  h.codec_hash = codec_hash;
  h.config = config_to_json(cfg);
  h.config["video_model"] = video;
  nn::ParamRegistry<float> joint;
  joint.merge(m.backbone->params, "");
  joint.merge(m.transformer->params, "");
  ckpt::save(path, h, joint);
}

inline void save_refiner(const std::string& path, const TrainConfig& cfg, const Refine& refiner,
                         std::uint64_t codec_hash) {
  ckpt::Header h;
  h.kind = ckpt::Kind::refine;
  h.codebook_size = cfg.codebook_size;
  h.n_z = cfg.n_z;
  h.downsample_factor = cfg.downsample_factor;
  h.codec_hash = codec_hash;
  h.config = config_to_json(cfg);
  ckpt::save(path, h, refiner.params);
}

inline TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.stage = j.value("stage", c.stage);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.input_size = j.value("input_size", c.input_size);
  c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
  c.n_z = j.value("n_z", c.n_z);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.trunk_channels = j.value("trunk_channels", c.trunk_channels);
  c.decode_steps = j.value("decode_steps", c.decode_steps);
  c.gamma = j.value("gamma", c.gamma);
  c.masking.ratio_low = j.value("mask_ratio_low", c.masking.ratio_low);
  c.masking.ratio_high = j.value("mask_ratio_high", c.masking.ratio_high);
  c.frames = j.value("frames", c.frames);
  c.no_refine = j.value("no_refine", c.no_refine);
  c.single_branch = j.value("single_branch", c.single_branch);
  c.no_attention = j.value("no_attention", c.no_attention);
  c.no_roll = j.value("no_roll", c.no_roll);
  c.no_sttb = j.value("no_sttb", c.no_sttb);
  c.gt_visible = j.value("gt_visible", c.gt_visible);
  c.augment_visible = j.value("augment_visible", c.augment_visible);
  c.seed = j.value("seed", c.seed);
  c.train_scenes = j.value("train_scenes", c.train_scenes);
  c.eval_scenes = j.value("eval_scenes", c.eval_scenes);
  c.train_videos = j.value("train_videos", c.train_videos);
  c.eval_videos = j.value("eval_videos", c.eval_videos);
  return c;
}

// Rebuilds a full pipeline from codec/coarse[/refine] checkpoints, enforcing the
// shared codec content hash.
inline Pipeline load_pipeline(const std::string& dir, bool need_refiner = true) {
  namespace fs = std::filesystem;
  const std::string codec_path = dir + "/codec.ckpt";
  const std::string coarse_path = dir + "/coarse.ckpt";
  const std::string refine_path = dir + "/refine.ckpt";
  if (!fs::exists(codec_path))
    throw CheckpointError("missing prerequisite checkpoint: " + codec_path +
                          " (run the vq stage first)");
  if (!fs::exists(coarse_path))
    throw CheckpointError("missing prerequisite checkpoint: " + coarse_path +
                          " (run the transformer stage first)");

  Pipeline pipe;
  {
    ckpt::Header h = ckpt::peek(codec_path);
    TrainConfig cfg = config_from_json(h.config);
    Rng rng(cfg.seed);
    pipe.codec = std::make_unique<Codec>(vq_config(cfg), rng);
    ckpt::load(codec_path, pipe.codec->params);
    pipe.codec_hash = pipeline_codec_hash(*pipe.codec);
    if (pipe.codec_hash != h.codec_hash)
      throw CheckpointError("codec checkpoint hash mismatch (corrupted file?)");
  }
  {
    ckpt::Header h = ckpt::peek(coarse_path);
    if (h.codec_hash != pipe.codec_hash)
      throw CheckpointError("coarse checkpoint was trained against a different codec");
    TrainConfig cfg = config_from_json(h.config);
    const bool video = h.config.value("video_model", false);
    pipe.cfg = cfg;
    Rng rng(cfg.seed + 1);
    pipe.backbone = std::make_unique<Backbone>(backbone_config(cfg), rng);
    pipe.transformer = std::make_unique<Transformer>(transformer_config(cfg, video), rng);
    nn::ParamRegistry<float> joint;
    joint.merge(pipe.backbone->params, "");
    joint.merge(pipe.transformer->params, "");
    ckpt::load(coarse_path, joint);
  }
  if (need_refiner && !pipe.cfg.no_refine) {
    if (!fs::exists(refine_path))
      throw CheckpointError("missing prerequisite checkpoint: " + refine_path +
                            " (run the refine stage first)");
    ckpt::Header h = ckpt::peek(refine_path);
    if (h.codec_hash != pipe.codec_hash)
      throw CheckpointError("refine checkpoint was trained against a different codec");
    TrainConfig rcfg = config_from_json(h.config);
    Rng rng(rcfg.seed + 2);
    pipe.refiner = std::make_unique<Refine>(refine_config(rcfg), rng);
    ckpt::load(refine_path, pipe.refiner->params);
    pipe.cfg.no_refine = false;
    pipe.cfg.single_branch = rcfg.single_branch;
    pipe.cfg.no_attention = rcfg.no_attention;
    pipe.cfg.trunk_channels = rcfg.trunk_channels;
  } else {
    pipe.cfg.no_refine = true;
  }
  return pipe;
}

// ----------------------------------------------------------------------------
// refinement stage

inline std::unique_ptr<Refine> train_refine_stage(const TrainConfig& cfg, const Codec& codec,
                                                  const Backbone& backbone,
                                                  const Transformer& transformer,
                                                  const std::vector<InstanceSample>& samples,
                                                  const LogFn& log = nullptr) {
  cfg.validate();
  if (samples.empty()) throw ValidationError("train refine: empty dataset");
  Rng init(cfg.seed + 2);
  auto refiner = std::make_unique<Refine>(refine_config(cfg), init);

  // the coarse path is frozen: precompute features and decoded coarse masks
  struct Prepared {
    RefineInput<float> input;
    const InstanceSample* sample;
  };
  std::vector<Prepared> prepared;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    Matf feats = backbone.extract_features(s.image);
    TokenGrid vis_tokens = codec.encode_tokens(s.visible);
    DecodeSchedule sched =
        build_schedule(transformer.cfg.amodal_tokens(), cfg.decode_steps, cfg.gamma);
    Rng rng = Rng::substream(cfg.seed + 303, i);
    DecodeResult dec = iterative_decode(transformer, {ad::constant<float>(feats)}, {vis_tokens},
                                        sched, rng);
    SoftMask coarse = codec.decode(dec.tokens[0]);
    prepared.push_back(
        {make_refine_input<float>(std::move(feats), std::move(coarse), cfg.latent_size(),
                                  cfg.latent_size()),
         &s});
  }

  nn::AdamW<float> opt(cfg.learning_rate, cfg.weight_decay);
  Rng rng(cfg.seed + 404);
  for (int step = 1; step <= cfg.iterations; ++step) {
    double loss_sum = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& p = prepared[static_cast<size_t>(rng.uniform_int(prepared.size()))];
      auto logits = refiner->forward_logits(p.input);
      auto loss = refine_loss(logits, p.sample->amodal, p.sample->visible);
      ad::backward(loss.total);
      loss_sum += loss.breakdown.total;
    }
    scale_grads(refiner->params, 1.0f / cfg.batch_size);
    opt.step(refiner->params);
    if (log && step % std::max(1, cfg.iterations / 20) == 0)
      log(json{{"stage", "refine"}, {"step", step}, {"loss", loss_sum / cfg.batch_size}});
  }
  return refiner;
}

}  // namespace amodal::pipeline
