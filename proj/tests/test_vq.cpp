#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "amodal/codec.hpp"
#include "amodal/synth.hpp"
#include "grad_check.hpp"

using namespace amodal;

namespace {

// independent nearest-neighbor scan, naive accumulation
template <typename S>
int brute_force_nearest(const Mat<S>& codebook, const Eigen::Matrix<S, 1, Eigen::Dynamic>& cell) {
  int best = 0;
  S best_d = S(0);
  for (int j = 0; j < codebook.rows(); ++j) {
    S d = S(0);
    for (int c = 0; c < codebook.cols(); ++c) {
      const S diff = cell(c) - codebook(j, c);
      d += diff * diff;
    }
    if (j == 0 || d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

BinaryMask disk_mask(int size, double cx, double cy, double rad) {
  synth::Shape s;
  s.kind = synth::ShapeKind::ellipse;
  s.cx = cx;
  s.cy = cy;
  s.r1 = s.r2 = rad;
  return synth::rasterize(s, size, size);
}

}  // namespace

TEST_CASE("quantize picks the nearest entry; ties go to the lowest index") {
  Matd cb(2, 2);
  cb << 0, 0, 1, 1;
  Latent<double> lat;
  lat.h = lat.w = 1;
  lat.values.resize(1, 2);

  lat.values << 0.2, 0.1;
  CHECK(quantize(lat, cb).flat(0) == 0);

  lat.values << 1.0, 1.0;  // exact match with entry 1
  CHECK(quantize(lat, cb).flat(0) == 1);

  lat.values << 0.5, 0.5;  // equidistant (both sq dists 0.5): lowest index wins
  CHECK(quantize(lat, cb).flat(0) == 0);
}

TEST_CASE("quantize equals brute-force nearest neighbor on random pairs") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.uniform_int(63));
    const int nz = 2 + static_cast<int>(rng.uniform_int(7));
    const int h = 1 + static_cast<int>(rng.uniform_int(6));
    const int w = 1 + static_cast<int>(rng.uniform_int(6));
    Matd cb = nn::normal_init<double>(rng, k, nz, 1.0);
    Latent<double> lat;
    lat.h = h;
    lat.w = w;
    lat.values = nn::normal_init<double>(rng, h * w, nz, 1.0);
    TokenGrid got = quantize(lat, cb);
    for (int i = 0; i < h * w; ++i)
      CHECK(got.flat(i) == brute_force_nearest<double>(cb, lat.values.row(i)));
  }
}

TEST_CASE("lookup reproduces codebook rows and rejects sentinels") {
  Rng rng(3);
  Matd cb = nn::normal_init<double>(rng, 5, 3, 1.0);
  TokenGrid t(2, 2, 5);
  t.idx.setConstant(4);
  Latent<double> lat = lookup(t, cb);
  for (int i = 0; i < 4; ++i) CHECK((lat.values.row(i) - cb.row(4)).norm() == 0.0);

  t.at(1, 1) = t.sentinel();
  CHECK_THROWS_AS(lookup(t, cb), ValidationError);
}

TEST_CASE("round-trip: quantize(lookup(t)) == t for separated codebooks") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 4 + static_cast<int>(rng.uniform_int(28));
    Matd cb = nn::normal_init<double>(rng, k, 4, 1.0);
    TokenGrid t(3, 5, k);
    for (int i = 0; i < t.cells(); ++i) t.set_flat(i, static_cast<int>(rng.uniform_int(k)));
    Latent<double> lat = lookup(t, cb);
    CHECK(quantize(lat, cb) == t);
    // lookup of the quantization is a fixed point
    TokenGrid q = quantize(lat, cb);
    Latent<double> lat2 = lookup(q, cb);
    CHECK((lat2.values - lat.values).norm() == 0.0);
  }
}

TEST_CASE("encode at full-scale settings: 256x256 lands on a 64x64 index grid") {
  Rng rng(4);
  VqConfig cfg;
  cfg.codebook_size = 8;
  cfg.n_z = 4;
  cfg.downsample_factor = 4;
  cfg.base_channels = 4;
  MaskCodec<float> codec(cfg, rng);
  synth::Shape s;
  s.cx = s.cy = 128;
  s.r1 = s.r2 = 70;
  TokenGrid tokens = codec.encode_tokens(synth::rasterize(s, 256, 256));
  CHECK(tokens.h() == 64);
  CHECK(tokens.w() == 64);
  CHECK(tokens.cells() == 4096);
}

TEST_CASE("encode shape arithmetic and finiteness") {
  Rng rng(5);
  VqConfig cfg;
  cfg.codebook_size = 16;
  cfg.n_z = 8;
  cfg.downsample_factor = 4;
  cfg.base_channels = 8;
  MaskCodec<float> codec(cfg, rng);

  BinaryMask zero(32, 32);
  Latent<float> lat = codec.encode(zero);
  CHECK(lat.h == 8);
  CHECK(lat.w == 8);
  CHECK(lat.values.rows() == 64);
  CHECK(lat.values.cols() == 8);
  CHECK(lat.values.allFinite());

  BinaryMask bad(30, 32);
  CHECK_THROWS_AS(codec.encode(bad), ValidationError);
}

TEST_CASE("decode shape, output range, and sentinel rejection") {
  Rng rng(6);
  VqConfig cfg;
  cfg.codebook_size = 8;
  cfg.n_z = 4;
  cfg.downsample_factor = 4;
  cfg.base_channels = 8;
  MaskCodec<float> codec(cfg, rng);

  TokenGrid t(8, 8, 8);
  for (int i = 0; i < t.cells(); ++i) t.set_flat(i, i % 8);
  SoftMask out = codec.decode(t);
  CHECK(out.height() == 32);
  CHECK(out.width() == 32);
  CHECK((out.v >= 0.0f).all());
  CHECK((out.v <= 1.0f).all());

  t.at(0, 0) = t.sentinel();
  CHECK_THROWS_AS(codec.decode(t), ValidationError);
}

TEST_CASE("vq_loss: total is the term sum; commitment scales linearly in beta") {
  Rng rng(8);
  VqConfig cfg;
  cfg.codebook_size = 8;
  cfg.n_z = 4;
  cfg.downsample_factor = 2;
  cfg.base_channels = 4;
  MaskCodec<float> codec(cfg, rng);
  BinaryMask mask = disk_mask(8, 4.0, 4.0, 2.5);

  VqLossConfig lc;
  lc.beta = 0.25;
  LossBreakdown a = codec.vq_loss(mask, lc);
  lc.beta = 0.5;
  LossBreakdown b = codec.vq_loss(mask, lc);
  CHECK(b.term("commitment") == doctest::Approx(2.0 * a.term("commitment")).epsilon(1e-5));
  CHECK(b.term("reconstruction") == doctest::Approx(a.term("reconstruction")).epsilon(1e-6));
  CHECK(b.term("codebook") == doctest::Approx(a.term("codebook")).epsilon(1e-6));
  CHECK(a.total == doctest::Approx(a.term("reconstruction") + a.term("codebook") +
                                   a.term("commitment") + a.term("adversarial")));
}

TEST_CASE("vq_loss: codebook and commitment vanish when latents equal their entries") {
  Rng rng(9);
  VqConfig cfg;
  cfg.codebook_size = 16;  // one entry per latent cell of an 8x8/factor-2 mask
  cfg.n_z = 4;
  cfg.downsample_factor = 2;
  cfg.base_channels = 4;
  MaskCodec<float> codec(cfg, rng);
  BinaryMask mask = disk_mask(8, 4.0, 4.0, 2.5);
  VqLossConfig lc;

  // plant every latent row into its own codebook entry: all distances become 0
  Latent<float> lat = codec.encode(mask);
  Matf& cb = const_cast<Matf&>(codec.codebook());
  for (int i = 0; i < lat.h * lat.w; ++i) cb.row(i) = lat.values.row(i);
  LossBreakdown exact = codec.vq_loss(mask, lc);
  CHECK(exact.term("codebook") == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(exact.term("commitment") == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("vq gradients match finite differences on a tiny codec") {
  Rng rng(17);
  VqConfig cfg;
  cfg.codebook_size = 4;
  cfg.n_z = 3;
  cfg.downsample_factor = 2;
  cfg.base_channels = 3;
  MaskCodec<double> codec(cfg, rng);
  BinaryMask mask = disk_mask(8, 3.5, 4.5, 2.0);
  VqLossConfig lc;

  // move every parameter off its init so no relu pre-activation sits exactly
  // on the kink (zero biases + zero input regions would)
  for (auto& [name, p] : codec.params.items)
    p->value += nn::normal_init<double>(rng, static_cast<int>(p->value.rows()),
                                        static_cast<int>(p->value.cols()), 0.02);

  // pin the token assignment so perturbations stay within one argmin region
  TokenGrid tokens = codec.encode_tokens(mask);
  auto pick = [&](const std::string& prefix) {
    std::vector<std::pair<std::string, ad::Var<double>>> out;
    for (auto& item : codec.params.items)
      if (item.first.rfind(prefix, 0) == 0) out.push_back(item);
    return out;
  };

  // reconstruction: the straight-through path is exact on the decoder side
  auto build_rec = [&] { return codec.vq_forward(mask, lc, &tokens).rec; };
  auto res = testing::check_gradients(build_rec, pick("dec."), 1e-6);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-3);

  // commitment: encoder path with the codebook detached
  auto build_commit = [&] { return codec.vq_forward(mask, lc, &tokens).commit_raw; };
  res = testing::check_gradients(build_commit, pick("enc."), 1e-6);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-3);

  // codebook term: gradient lands on the gathered entries
  auto build_cb = [&] { return codec.vq_forward(mask, lc, &tokens).codebook_term; };
  res = testing::check_gradients(build_cb, pick("codebook"), 1e-6);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("adaptive lambda formula and gan-enabled loss term") {
  Rng rng(23);
  VqConfig cfg;
  cfg.codebook_size = 4;
  cfg.n_z = 3;
  cfg.downsample_factor = 2;
  cfg.base_channels = 3;
  MaskCodec<float> codec(cfg, rng);
  PatchDiscriminator<float> disc(1, 4, rng);
  BinaryMask mask = disk_mask(8, 4.0, 4.0, 2.5);

  VqLossConfig lc;
  lc.gan_enabled = true;
  lc.lambda_mode = VqLossConfig::LambdaMode::adaptive;
  const double lam = codec.adaptive_lambda(mask, lc, disc);
  CHECK(lam > 0.0);
  CHECK(std::isfinite(lam));

  lc.lambda_mode = VqLossConfig::LambdaMode::fixed;
  lc.lambda_fixed = 0.37;
  CHECK(codec.adaptive_lambda(mask, lc, disc) == doctest::Approx(0.37));

  lc.lambda_mode = VqLossConfig::LambdaMode::adaptive;
  LossBreakdown with_gan = codec.vq_loss(mask, lc, &disc);
  CHECK(with_gan.term("adversarial") > 0.0);
  CHECK(with_gan.total == doctest::Approx(with_gan.term("reconstruction") +
                                          with_gan.term("codebook") + with_gan.term("commitment") +
                                          with_gan.term("adversarial")));
}

TEST_CASE("vq loss config validation") {
  VqLossConfig lc;
  lc.beta = 0.0;
  CHECK_THROWS_AS(lc.validate(), ValidationError);
  lc.beta = 0.25;
  lc.delta = 0.0;
  CHECK_THROWS_AS(lc.validate(), ValidationError);
}

TEST_CASE("fit_vq: zero steps is a no-op; codebook size config is honored") {
  Rng rng(31);
  VqConfig cfg;
  cfg.codebook_size = 256;
  cfg.n_z = 4;
  cfg.downsample_factor = 2;
  cfg.base_channels = 4;
  MaskCodec<float> codec(cfg, rng);
  CHECK(codec.codebook().rows() == 256);

  std::vector<Matf> before;
  for (auto& [n, p] : codec.params.items) before.push_back(p->value);
  FitOptions opt;
  opt.steps = 0;
  std::vector<BinaryMask> data{disk_mask(8, 4, 4, 2)};
  fit_vq(codec, data, VqLossConfig{}, opt);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK((codec.params.items[i].second->value - before[i]).norm() == 0.0f);

  CHECK_THROWS_AS(fit_vq(codec, std::vector<BinaryMask>{}, VqLossConfig{}, opt), ValidationError);
}

TEST_CASE("short training improves reconstruction on tiny disks") {
  Rng rng(41);
  VqConfig cfg;
  cfg.codebook_size = 16;
  cfg.n_z = 4;
  cfg.downsample_factor = 2;
  cfg.base_channels = 6;
  MaskCodec<float> codec(cfg, rng);

  Rng data_rng(99);
  std::vector<BinaryMask> data;
  for (int i = 0; i < 64; ++i)
    data.push_back(disk_mask(16, data_rng.uniform(5, 11), data_rng.uniform(5, 11),
                             data_rng.uniform(2.5, 5.5)));
  VqLossConfig lc;
  double before = codec.vq_loss(data[0], lc).term("reconstruction");
  FitOptions opt;
  opt.steps = 150;
  opt.batch_size = 8;
  opt.learning_rate = 2e-3;
  fit_vq(codec, data, lc, opt);
  double after = codec.vq_loss(data[0], lc).term("reconstruction");
  CHECK(after < before);
}
