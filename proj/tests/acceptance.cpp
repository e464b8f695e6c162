// Acceptance harness: one criterion per invocation, PASS/FAIL per line.
// Trained models are cached under --cache keyed by config+seed; training is
// deterministic, so cached results equal fresh ones.

#include "amodal/pipeline.hpp"
#include "grad_check.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace amodal;
using namespace amodal::pipeline;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Env {
  std::string cache;
};

// ---------------------------------------------------------------- desk recipe

TrainConfig image_recipe(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.train_scenes = 320;
  cfg.eval_scenes = 48;
  cfg.input_size = 32;
  cfg.downsample_factor = 4;
  cfg.n_z = 8;
  cfg.codebook_size = 64;
  cfg.base_channels = 16;
  cfg.dim = 64;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.mlp_ratio = 2;
  cfg.decode_steps = 3;
  return cfg;
}

TrainConfig video_recipe(std::uint64_t seed) {
  TrainConfig cfg = image_recipe(seed);
  cfg.stage = "video";
  cfg.frames = 4;
  cfg.train_videos = 80;
  cfg.eval_videos = 24;
  return cfg;
}

// stage-specific hyperparameters
TrainConfig vq_stage(TrainConfig cfg, int iters) {
  cfg.stage = "vq";
  cfg.iterations = iters;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  return cfg;
}
TrainConfig coarse_stage(TrainConfig cfg, int iters) {
  cfg.iterations = iters;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-4;
  return cfg;
}
TrainConfig refine_stage(TrainConfig cfg, int iters, bool single_branch) {
  cfg.stage = "refine";
  cfg.iterations = iters;
  cfg.batch_size = 16;
  cfg.learning_rate = 3e-4;
  cfg.single_branch = single_branch;
  return cfg;
}

// ------------------------------------------------------------- cached stages

void record_time(const Env& env, const std::string& key, double secs) {
  const std::string path = env.cache + "/times.json";
  nlohmann::json j = nlohmann::json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    in >> j;
  }
  j[key] = secs;
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

double recorded_time(const Env& env, const std::string& key) {
  const std::string path = env.cache + "/times.json";
  if (!fs::exists(path)) return 0.0;
  std::ifstream in(path);
  nlohmann::json j;
  in >> j;
  return j.value(key, 0.0);
}

std::unique_ptr<Codec> ensure_codec(const Env& env, const TrainConfig& base,
                                    const std::vector<BinaryMask>& masks,
                                    const std::string& tag, int iters) {
  const std::string path =
      env.cache + "/" + tag + "_codec_it" + std::to_string(iters) + ".ckpt";
  TrainConfig cfg = vq_stage(base, iters);
  if (fs::exists(path)) {
    Rng rng(cfg.seed);
    auto codec = std::make_unique<Codec>(vq_config(cfg), rng);
    ckpt::load(path, codec->params);
    return codec;
  }
  const auto t0 = Clock::now();
  auto codec = train_vq_stage(cfg, masks);
  record_time(env, tag + "_codec", seconds_since(t0));
  save_codec(path, cfg, *codec);
  return codec;
}

CoarseModel ensure_coarse(const Env& env, const TrainConfig& cfg, const Codec& codec,
                          const std::vector<InstanceSample>* images,
                          const std::vector<VideoClip>* clips, const std::string& tag) {
  const std::string path =
      env.cache + "/" + tag + "_coarse_it" + std::to_string(cfg.iterations) + ".ckpt";
  const bool video = clips != nullptr;
  if (fs::exists(path)) {
    CoarseModel m;
    Rng rng(cfg.seed + 1);
    m.backbone = std::make_unique<Backbone>(backbone_config(cfg), rng);
    m.transformer = std::make_unique<Transformer>(transformer_config(cfg, video), rng);
    nn::ParamRegistry<float> joint;
    joint.merge(m.backbone->params, "");
    joint.merge(m.transformer->params, "");
    ckpt::load(path, joint);
    return m;
  }
  const auto t0 = Clock::now();
  CoarseModel m = video ? train_video_stage(cfg, codec, *clips)
                        : train_coarse_stage(cfg, codec, *images);
  record_time(env, tag + "_coarse", seconds_since(t0));
  save_coarse(path, cfg, m, pipeline_codec_hash(codec), video);
  return m;
}

std::unique_ptr<Refine> ensure_refiner(const Env& env, const TrainConfig& cfg, const Codec& codec,
                                       const CoarseModel& coarse,
                                       const std::vector<InstanceSample>& samples,
                                       const std::string& tag) {
  const std::string path =
      env.cache + "/" + tag + "_refine_it" + std::to_string(cfg.iterations) + ".ckpt";
  if (fs::exists(path)) {
    Rng rng(cfg.seed + 2);
    auto refiner = std::make_unique<Refine>(refine_config(cfg), rng);
    ckpt::load(path, refiner->params);
    return refiner;
  }
  const auto t0 = Clock::now();
  auto refiner =
      train_refine_stage(cfg, codec, *coarse.backbone, *coarse.transformer, samples);
  record_time(env, tag + "_refine", seconds_since(t0));
  save_refiner(path, cfg, *refiner, pipeline_codec_hash(codec));
  return refiner;
}

// refine_mode: 0 = full two-branch, 1 = single branch, 2 = no refinement
Pipeline ensure_image_pipeline(const Env& env, std::uint64_t seed, int refine_mode,
                               ImageDataset& data_out) {
  TrainConfig base = image_recipe(seed);
  data_out = build_image_dataset(base);
  const std::string tag = "img_s" + std::to_string(seed);
  auto codec = ensure_codec(env, base, data_out.vq_train, tag, 2000);
  fill_tokens(data_out.train, *codec);
  CoarseModel coarse = ensure_coarse(env, coarse_stage(base, 4000), *codec, &data_out.train,
                                     nullptr, tag);
  Pipeline pipe;
  pipe.cfg = base;
  if (refine_mode == 2) {
    pipe.cfg.no_refine = true;
  } else {
    const bool single = refine_mode == 1;
    std::vector<InstanceSample> subset(
        data_out.train.begin(),
        data_out.train.begin() + std::min<size_t>(1500, data_out.train.size()));
    pipe.refiner = ensure_refiner(env, refine_stage(base, 2000, single), *codec, coarse, subset,
                                  tag + (single ? "_single" : "_full"));
    pipe.cfg.single_branch = single;
  }
  pipe.codec = std::move(codec);
  pipe.backbone = std::move(coarse.backbone);
  pipe.transformer = std::move(coarse.transformer);
  pipe.codec_hash = pipeline_codec_hash(*pipe.codec);
  return pipe;
}

// video_mode: 0 = full sttb+roll, 1 = no roll, 2 = no sttb
Pipeline ensure_video_pipeline(const Env& env, std::uint64_t seed, int video_mode,
                               VideoDataset& data_out) {
  TrainConfig base = video_recipe(seed);
  base.no_roll = video_mode >= 1;
  base.no_sttb = video_mode == 2;
  data_out = build_video_dataset(base);
  const std::string codec_tag = "vid_s" + std::to_string(seed);
  auto codec = ensure_codec(env, base, data_out.vq_train, codec_tag, 2000);
  for (auto& clip : data_out.train) fill_tokens(clip.frames, *codec);
  static const char* mode_tag[] = {"_full", "_noroll", "_nosttb"};
  CoarseModel coarse = ensure_coarse(env, coarse_stage(base, 800), *codec, nullptr,
                                     &data_out.train, codec_tag + mode_tag[video_mode]);
  Pipeline pipe;
  pipe.cfg = base;
  pipe.cfg.no_refine = true;  // video ablation is evaluated on coarse outputs
  pipe.codec = std::move(codec);
  pipe.backbone = std::move(coarse.backbone);
  pipe.transformer = std::move(coarse.transformer);
  pipe.codec_hash = pipeline_codec_hash(*pipe.codec);
  return pipe;
}

EvalReport eval_image(const Pipeline& pipe, const std::vector<InstanceSample>& samples,
                      int decode_steps = 3, bool noisy_visible = false) {
  EvalOptions eo;
  eo.window = std::make_pair(0.1, 0.7);
  eo.infer.decode_steps = decode_steps;
  eo.noisy_visible = noisy_visible;
  eo.seed = 20240 + decode_steps;
  return evaluate_images(pipe, samples, eo);
}

bool report_line(bool pass, const std::string& text) {
  std::printf("%s  %s\n", pass ? "PASS" : "FAIL", text.c_str());
  return pass;
}

// ------------------------------------------------------------------ criteria

// 1: quantize equals brute-force nearest neighbor exactly on 1000 random pairs
bool criterion_1(const Env&) {
  const auto t0 = Clock::now();
  int mismatches = 0;
  long cells_checked = 0;
  Rng rng(801);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng.uniform_int(63));  // K_cb <= 64
    const int nz = 8;
    const int h = 1 + static_cast<int>(rng.uniform_int(8));
    const int w = 1 + static_cast<int>(rng.uniform_int(8));
    // values on the 1/256 lattice: every distance term is exact in float, so
    // the comparison is bit-precise and ties genuinely exercise the tie rule
    auto lattice = [&](int rows, int cols) {
      Matf m(rows, cols);
      for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r)
          m(r, c) = static_cast<float>(rng.uniform_int(513) - 256) / 256.0f;
      return m;
    };
    Matf cb = lattice(k, nz);
    Latent<float> lat;
    lat.h = h;
    lat.w = w;
    lat.values = lattice(h * w, nz);
    TokenGrid got = quantize(lat, cb);
    for (int i = 0; i < h * w; ++i) {
      int best = 0;
      float best_d = 0;
      for (int j = 0; j < k; ++j) {
        float d = 0;
        for (int c = 0; c < nz; ++c) {
          const float diff = lat.values(i, c) - cb(j, c);
          d += diff * diff;
        }
        if (j == 0 || d < best_d) {
          best_d = d;
          best = j;
        }
      }
      if (got.flat(i) != best) ++mismatches;
      ++cells_checked;
    }
  }
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 1 quantizer oracle: %d mismatches over %ld cells, %.1fs (budget 10s)",
                mismatches, cells_checked, secs);
  return report_line(mismatches == 0 && secs < 10.0, buf);
}

// 2: codec trained on 2000 masks reaches held-out round-trip IoU >= 0.95
bool criterion_2(const Env& env) {
  const auto t0 = Clock::now();
  TrainConfig base = image_recipe(1);
  ImageDataset data = build_image_dataset(base);
  std::vector<BinaryMask> train_masks(data.vq_train.begin(),
                                      data.vq_train.begin() +
                                          std::min<size_t>(2000, data.vq_train.size()));
  const std::string path = env.cache + "/roundtrip_codec.ckpt";
  TrainConfig cfg = vq_stage(base, 3000);
  std::unique_ptr<Codec> codec;
  double train_secs = recorded_time(env, "roundtrip_codec");
  if (fs::exists(path)) {
    Rng rng(cfg.seed);
    codec = std::make_unique<Codec>(vq_config(cfg), rng);
    ckpt::load(path, codec->params);
  } else {
    const auto tt = Clock::now();
    codec = train_vq_stage(cfg, train_masks);
    train_secs = seconds_since(tt);
    record_time(env, "roundtrip_codec", train_secs);
    save_codec(path, cfg, *codec);
  }
  double iou_sum = 0;
  for (const auto& m : data.vq_held)
    iou_sum += metrics::iou(threshold(codec->reconstruct(m), 0.5f), m);
  const double riou = iou_sum / data.vq_held.size();
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 2 vq round-trip: held-out IoU %.4f (need >= 0.95), train %.0fs "
                "(budget 600s), total %.0fs",
                riou, train_secs, seconds_since(t0));
  return report_line(riou >= 0.95 && train_secs <= 600.0, buf);
}

// 3: masked-NLL, refine BCE, and VQ commitment gradients vs central differences
bool criterion_3(const Env&) {
  const auto t0 = Clock::now();
  double worst = 0;
  {
    Rng rng(31);
    TransformerConfig tc;
    tc.dim = 8;
    tc.layers = 1;
    tc.heads = 2;
    tc.mlp_ratio = 2;
    tc.codebook_size = 5;
    tc.grid_h = tc.grid_w = 2;
    CoarseTransformer<double> model(tc, rng);
    auto feats = ad::constant<double>(nn::normal_init<double>(rng, 4, 8, 1.0));
    TokenGrid vis(2, 2, 5), target(2, 2, 5);
    for (int i = 0; i < 4; ++i) {
      vis.set_flat(i, static_cast<int>(rng.uniform_int(5)));
      target.set_flat(i, static_cast<int>(rng.uniform_int(5)));
    }
    TokenGrid masked = target;
    masked.at(0, 0) = masked.sentinel();
    masked.at(1, 0) = masked.sentinel();
    auto build = [&] {
      auto logits = model.forward_logits({feats}, {vis}, {masked});
      return masked_nll_loss(logits, {target}, {0, 2}).loss;
    };
    worst = std::max(worst, testing::check_gradients(build, model.params.items, 1e-6).max_rel_err);
  }
  {
    Rng rng(32);
    RefineConfig rc;
    rc.dim = 4;
    rc.downsample_factor = 2;
    rc.trunk_channels = 6;
    Refiner<double> refiner(rc, rng);
    for (auto& [name, p] : refiner.params.items)
      p->value += nn::normal_init<double>(rng, static_cast<int>(p->value.rows()),
                                          static_cast<int>(p->value.cols()), 0.02);
    SoftMaskT<double> coarse(6, 6);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) coarse.v(r, c) = rng.uniform();
    auto input = make_refine_input<double>(nn::normal_init<double>(rng, 9, 4, 1.0),
                                           std::move(coarse), 3, 3);
    BinaryMask amodal(6, 6), visible(6, 6);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) {
        amodal.v(r, c) = (r + c) % 2;
        visible.v(r, c) = amodal.v(r, c) && c < 3;
      }
    auto build = [&] {
      return refine_loss(refiner.forward_logits(input), amodal, visible).total;
    };
    worst = std::max(worst,
                     testing::check_gradients(build, refiner.params.items, 1e-6).max_rel_err);
  }
  {
    Rng rng(33);
    VqConfig vc;
    vc.codebook_size = 4;
    vc.n_z = 3;
    vc.downsample_factor = 2;
    vc.base_channels = 3;
    MaskCodec<double> codec(vc, rng);
    for (auto& [name, p] : codec.params.items)
      p->value += nn::normal_init<double>(rng, static_cast<int>(p->value.rows()),
                                          static_cast<int>(p->value.cols()), 0.02);
    synth::Shape s;
    s.cx = 3.5;
    s.cy = 4.0;
    s.r1 = s.r2 = 2.2;
    BinaryMask mask = synth::rasterize(s, 8, 8);
    TokenGrid tokens = codec.encode_tokens(mask);
    VqLossConfig lc;
    auto pick = [&](const char* prefix) {
      std::vector<std::pair<std::string, ad::Var<double>>> out;
      for (auto& item : codec.params.items)
        if (item.first.rfind(prefix, 0) == 0) out.push_back(item);
      return out;
    };
    auto commit = [&] { return codec.vq_forward(mask, lc, &tokens).commit_raw; };
    worst = std::max(worst, testing::check_gradients(commit, pick("enc."), 1e-6).max_rel_err);
    auto rec = [&] { return codec.vq_forward(mask, lc, &tokens).rec; };
    worst = std::max(worst, testing::check_gradients(rec, pick("dec."), 1e-6).max_rel_err);
  }
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 3 gradient checks: worst relative error %.2e (need <= 1e-3), %.1fs "
                "(budget 60s)",
                worst, secs);
  return report_line(worst <= 1e-3 && secs < 60.0, buf);
}

// 4: decode contract over N x K x gamma
bool criterion_4(const Env&) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (int n_side : {4, 8, 64}) {
    const int N = n_side * n_side;
    for (int K : {1, 3, 8}) {
      for (const char* gamma : {"cosine", "linear"}) {
        DecodeSchedule sched = build_schedule(N, K, gamma);
        if (sched.masked_counts.back() != 0) ok = false;
        for (size_t i = 1; i < sched.masked_counts.size(); ++i)
          if (sched.masked_counts[i] >= sched.masked_counts[i - 1]) ok = false;
        Rng logits_rng(N * 1000 + K * 10 + (gamma[0] == 'c'));
        const int classes = 16;
        auto logits_fn = [&](const std::vector<TokenGrid>&) {
          return nn::normal_init<float>(logits_rng, N, classes, 1.0);
        };
        Rng rng(5);
        DecodeResult res =
            iterative_decode_core(logits_fn, 1, n_side, n_side, classes, sched, rng);
        if (res.tokens[0].has_sentinel()) {
          ok = false;
          detail += " sentinel@" + std::to_string(N);
        }
        // committed sets grow monotonically and match the schedule counts
        for (int step = 0; step < K; ++step) {
          int committed = 0;
          for (int p = 0; p < N; ++p) {
            if (step > 0 && res.committed[step - 1][p] && !res.committed[step][p]) {
              ok = false;
              detail += " commit-dropped";
            }
            if (res.committed[step][p]) ++committed;
          }
          if (committed != N - sched.masked_counts[step]) {
            ok = false;
            detail += " count-mismatch";
          }
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 4 decode contract: N in {16,64,4096}, K in {1,3,8}, both gammas%s, "
                "%.1fs (budget 10s)",
                detail.empty() ? " all hold" : detail.c_str(), secs);
  return report_line(ok && secs < 10.0, buf);
}

// 5: roll involution and end-to-end order preservation
bool criterion_5(const Env&) {
  const auto t0 = Clock::now();
  bool ok = true;
  for (int T : {2, 4, 8}) {
    const int rows_per_frame = 3;
    Matf seq(T * rows_per_frame, 2);
    for (int f = 0; f < T; ++f)
      seq.middleRows(f * rows_per_frame, rows_per_frame).setConstant(static_cast<float>(f));
    auto x = ad::constant<float>(seq);
    if ((temporal_roll(temporal_roll(x, T), T)->value - seq).norm() != 0.0f) ok = false;
    if ((temporal_unroll(temporal_roll(x, T), T)->value - seq).norm() != 0.0f) ok = false;
    // pipeline pattern: a fixed T/2 roll per block, one inverse roll at the end
    for (int blocks : {1, 2, 3, 5}) {
      auto y = x;
      int shift = 0;
      for (int b = 0; b < blocks; ++b) {
        y = temporal_roll(y, T);
        shift += T / 2;
      }
      if (shift % T != 0)
        y = ad::permute_rows(y, roll_perm(T, rows_per_frame, -(shift % T)));
      if ((y->value - seq).norm() != 0.0f) ok = false;
    }
  }
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 5 roll involution and order preservation for T in {2,4,8}: %s, %.2fs "
                "(budget 1s)",
                ok ? "hold" : "violated", secs);
  return report_line(ok && secs < 1.0, buf);
}

// 6: metric oracles
bool criterion_6(const Env&) {
  const auto t0 = Clock::now();
  Rng rng(61);
  auto random_mask = [&](int h, int w, double fill) {
    BinaryMask m(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) m.v(r, c) = rng.uniform() < fill ? 1 : 0;
    return m;
  };
  int bad = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(8));
    const int w = 1 + static_cast<int>(rng.uniform_int(8));
    BinaryMask a = random_mask(h, w, 0.5), b = random_mask(h, w, 0.5);
    long inter = 0, uni = 0;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (a.v(r, c) && b.v(r, c)) ++inter;
        if (a.v(r, c) || b.v(r, c)) ++uni;
      }
    const double expect = uni == 0 ? 1.0 : double(inter) / uni;
    if (std::abs(metrics::iou(a, b) - expect) > 1e-12) ++bad;

    BinaryMask amodal = mask_or(a, b);
    if (amodal.area() == 0) continue;
    BinaryMask visible = mask_and(amodal, random_mask(h, w, 0.6));
    synth::AmodalInstance gt;
    gt.image_id = "g";
    gt.visible = visible;
    gt.amodal = amodal;
    gt.occlusion_rate = 1.0 - double(visible.area()) / amodal.area();
    gt.fully_occluded = visible.area() == 0;
    BinaryMask pred = random_mask(h, w, 0.5);
    long pinter = 0, puni = 0;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const bool po = pred.v(r, c) && !visible.v(r, c);
        const bool go = amodal.v(r, c) && !visible.v(r, c);
        if (po && go) ++pinter;
        if (po || go) ++puni;
      }
    const double eocc = puni == 0 ? 1.0 : double(pinter) / puni;
    if (std::abs(metrics::occluded_iou(pred, gt) - eocc) > 1e-12) ++bad;
  }

  // AP vs an exhaustive matcher on <=5-instance sets
  int ap_bad = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(5));
    std::vector<metrics::EvalRecord> records;
    for (int i = 0; i < n; ++i) {
      BinaryMask amodal = random_mask(5, 5, 0.7);
      amodal.v(2, 2) = 1;
      synth::AmodalInstance gt;
      gt.image_id = "img" + std::to_string(rng.uniform_int(2));
      gt.visible = amodal;
      gt.amodal = amodal;
      records.push_back({random_mask(5, 5, 0.7), rng.uniform(), gt});
    }
    auto res = metrics::average_precision(records);
    double ap_sum = 0;
    for (double thr : metrics::coco_thresholds()) {
      std::vector<int> order(records.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return records[x].score > records[y].score;
      });
      std::vector<bool> used(records.size(), false), tp;
      for (int idx : order) {
        int best = -1;
        double best_iou = 0;
        for (size_t g = 0; g < records.size(); ++g) {
          if (used[g] || records[g].gt.image_id != records[idx].gt.image_id) continue;
          const double v = metrics::iou(records[idx].prediction, records[g].gt.amodal);
          if (v >= thr && v > best_iou) {
            best_iou = v;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) used[best] = true;
        tp.push_back(best >= 0);
      }
      std::vector<double> ps, rs;
      int tps = 0, fps = 0;
      for (bool t : tp) {
        t ? ++tps : ++fps;
        ps.push_back(double(tps) / (tps + fps));
        rs.push_back(double(tps) / records.size());
      }
      double area = 0, prev = 0;
      for (size_t i = 0; i < ps.size(); ++i) {
        double pmax = 0;
        for (size_t j = i; j < ps.size(); ++j) pmax = std::max(pmax, ps[j]);
        area += (rs[i] - prev) * pmax;
        prev = rs[i];
      }
      ap_sum += area;
    }
    if (std::abs(res.ap - ap_sum / 10.0) > 1e-9) ++ap_bad;
  }
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 6 metric oracles: %d iou mismatches, %d AP mismatches, %.1fs "
                "(budget 30s)",
                bad, ap_bad, secs);
  return report_line(bad == 0 && ap_bad == 0 && secs < 30.0, buf);
}

// 7: end-to-end image analog with baseline margins
bool criterion_7(const Env& env) {
  ImageDataset data;
  Pipeline pipe = ensure_image_pipeline(env, 1, 0, data);
  const auto t0 = Clock::now();
  EvalReport rep = eval_image(pipe, data.eval);
  const double eval_secs = seconds_since(t0);
  const double train_secs = recorded_time(env, "img_s1_codec") +
                            recorded_time(env, "img_s1_coarse") +
                            recorded_time(env, "img_s1_full_refine");
  const double occ_margin = rep.model_miou_occ - rep.hull_miou_occ;
  const double full_margin = rep.model_miou_full - rep.visible_copy_miou_full;
  const bool pass = rep.visible_copy_miou_occ == 0.0 && rep.model_miou_occ > 0.0 &&
                    occ_margin >= 0.10 && full_margin >= 0.05 &&
                    train_secs + eval_secs <= 45 * 60;
  char buf[384];
  std::snprintf(buf, sizeof(buf),
                "criterion 7 image analog: mIoU_occ %.4f vs hull %.4f (margin %+.1f pts, need "
                ">= 10), mIoU_full %.4f vs visible-copy %.4f (margin %+.1f pts, need >= 5), "
                "train %.0fs + eval %.0fs (budget 2700s)",
                rep.model_miou_occ, rep.hull_miou_occ, 100 * occ_margin, rep.model_miou_full,
                rep.visible_copy_miou_full, 100 * full_margin, train_secs, eval_secs);
  return report_line(pass, buf);
}

// 8: refinement ablation over 3 seeds
bool criterion_8(const Env& env) {
  double mean_full = 0, mean_single = 0, mean_none = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ImageDataset data;
    Pipeline full = ensure_image_pipeline(env, seed, 0, data);
    mean_full += eval_image(full, data.eval).model_miou_occ;
    Pipeline single = ensure_image_pipeline(env, seed, 1, data);
    mean_single += eval_image(single, data.eval).model_miou_occ;
    Pipeline none = ensure_image_pipeline(env, seed, 2, data);
    mean_none += eval_image(none, data.eval).model_miou_occ;
  }
  mean_full /= 3;
  mean_single /= 3;
  mean_none /= 3;
  const bool pass = mean_full >= mean_single && mean_single >= mean_none &&
                    (mean_full - mean_none) >= 0.01;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 8 refinement ablation (3-seed mean mIoU_occ): full %.4f >= single "
                "%.4f >= none %.4f, full-none gap %+.1f pts (need >= 1)",
                mean_full, mean_single, mean_none, 100 * (mean_full - mean_none));
  return report_line(pass, buf);
}

// 9: K-insensitivity on the trained desk model
bool criterion_9(const Env& env) {
  ImageDataset data;
  Pipeline pipe = ensure_image_pipeline(env, 1, 0, data);
  double lo = 1e9, hi = -1e9;
  std::string vals;
  for (int K : {1, 3, 8}) {
    const double occ = eval_image(pipe, data.eval, K).model_miou_occ;
    lo = std::min(lo, occ);
    hi = std::max(hi, occ);
    vals += " K" + std::to_string(K) + "=" + std::to_string(occ);
  }
  const double spread = hi - lo;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "criterion 9 K-insensitivity:%s spread %.1f pts (need <= 2)", vals.c_str(),
                100 * spread);
  return report_line(spread <= 0.02, buf);
}

// 10: feeding clean GT visible masks scores at least the noisy run
bool criterion_10(const Env& env) {
  ImageDataset data;
  Pipeline pipe = ensure_image_pipeline(env, 1, 0, data);
  EvalReport gt = eval_image(pipe, data.eval, 3, false);
  EvalReport noisy = eval_image(pipe, data.eval, 3, true);
  const bool pass = gt.model_miou_full >= noisy.model_miou_full &&
                    gt.model_miou_occ >= noisy.model_miou_occ;
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "criterion 10 GT-visible upper bound: gt (full %.4f, occ %.4f) vs noisy (full "
                "%.4f, occ %.4f)",
                gt.model_miou_full, gt.model_miou_occ, noisy.model_miou_full,
                noisy.model_miou_occ);
  return report_line(pass, buf);
}

// 11: video STTB/roll ablation plus hidden-frame completion behavior
bool criterion_11(const Env& env) {
  double mean[3] = {0, 0, 0};
  int event_clips = 0, event_hits = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (int mode : {0, 1, 2}) {
      VideoDataset data;
      Pipeline pipe = ensure_video_pipeline(env, seed, mode, data);
      EvalOptions eo;
      eo.seed = 4000 + seed;
      EvalReport rep = evaluate_videos(pipe, data.eval, eo);
      mean[mode] += rep.model_miou_occ / 3.0;
      if (mode == 0) {
        event_clips += rep.event_clips;
        event_hits += rep.event_clips_hit;
      }
    }
  }
  const double coverage = event_clips > 0 ? double(event_hits) / event_clips : 0.0;
  const bool pass =
      mean[0] >= mean[1] && mean[1] >= mean[2] && coverage >= 0.80 && event_clips > 0;
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "criterion 11 video analog (3-seed mean mIoU_occ): full %.4f >= no-roll %.4f >= "
                "no-sttb %.4f; hidden-frame completion %d/%d clips (%.0f%%, need >= 80%%)",
                mean[0], mean[1], mean[2], event_hits, event_clips, 100 * coverage);
  return report_line(pass, buf);
}

}  // namespace

int main(int argc, char** argv) {
  int criterion = 0;
  Env env;
  env.cache = "acceptance_cache";
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) criterion = std::atoi(argv[++i]);
    else if (std::strcmp(argv[i], "--cache") == 0 && i + 1 < argc) env.cache = argv[++i];
  }
  fs::create_directories(env.cache);

  bool (*table[])(const Env&) = {criterion_1, criterion_2, criterion_3, criterion_4,
                                 criterion_5, criterion_6, criterion_7, criterion_8,
                                 criterion_9, criterion_10, criterion_11};
  try {
    if (criterion >= 1 && criterion <= 11) return table[criterion - 1](env) ? 0 : 1;
    // no --criterion: run the full suite in order
    bool all = true;
    for (int i = 0; i < 11; ++i) all = table[i](env) && all;
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance error: %s\n", e.what());
    return 2;
  }
}
