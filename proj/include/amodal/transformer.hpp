#pragma once

#include "amodal/backbone.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace amodal {

struct MaskingPolicy {
  double ratio_low = 0.5;
  double ratio_high = 1.0;

  void validate() const {
    if (!(ratio_low > 0.0 && ratio_low <= ratio_high && ratio_high <= 1.0))
      throw ValidationError("MaskingPolicy: need 0 < low <= high <= 1");
  }
};

// Replaces round(r * cells) uniformly chosen positions with the sentinel,
// r ~ Uniform[low, high].
inline std::pair<TokenGrid, std::vector<int>> sample_training_mask(const TokenGrid& tokens,
                                                                   const MaskingPolicy& policy,
                                                                   Rng& rng) {
  policy.validate();
  if (tokens.has_sentinel())
    throw ValidationError("sample_training_mask: input already contains sentinels");
  const int cells = tokens.cells();
  const double r = rng.uniform(policy.ratio_low, policy.ratio_high);
  const int n = static_cast<int>(std::llround(r * cells));
  std::vector<int> order(cells);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < n; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(cells - i));
    std::swap(order[i], order[j]);
  }
  order.resize(n);
  TokenGrid masked = tokens;
  for (int p : order) masked.set_flat(p, tokens.sentinel());
  return {std::move(masked), std::move(order)};
}

// mask scheduling functions: fraction of tokens still masked at progress r
inline double gamma_eval(const std::string& id, double r) {
  if (id == "cosine") return std::cos(M_PI * r / 2.0);
  if (id == "linear") return 1.0 - r;
  throw ValidationError("unknown mask schedule gamma: " + id);
}

struct DecodeSchedule {
  int steps = 3;
  std::string gamma = "cosine";
  std::vector<int> masked_counts;  // per step 1..K, strictly decreasing to 0

  void validate(int total_tokens) const {
    if (steps < 1 || static_cast<int>(masked_counts.size()) != steps)
      throw ValidationError("DecodeSchedule: bad step count");
    if (masked_counts.back() != 0) throw ValidationError("DecodeSchedule: must end at 0");
    for (size_t i = 1; i < masked_counts.size(); ++i)
      if (masked_counts[i] >= masked_counts[i - 1])
        throw ValidationError("DecodeSchedule: counts must strictly decrease");
    if (masked_counts.front() > total_tokens)
      throw ValidationError("DecodeSchedule: first count exceeds token count");
  }
};

// masked count at step t is ceil(gamma(t/K) * N), lifted where needed so the
// sequence strictly decreases and ends at exactly 0
inline DecodeSchedule build_schedule(int total_tokens, int steps, const std::string& gamma) {
  if (total_tokens < 1 || steps < 1) throw ValidationError("build_schedule: N and K must be >= 1");
  if (steps > total_tokens + 1)
    throw ValidationError("build_schedule: K too large for a strictly decreasing schedule");
  gamma_eval(gamma, 0.5);  // validates the id
  DecodeSchedule s;
  s.steps = steps;
  s.gamma = gamma;
  s.masked_counts.resize(steps);
  for (int t = 1; t <= steps; ++t) {
    // the 1e-9 guard keeps ceil from rounding exact integers up a slot
    const double frac = gamma_eval(gamma, static_cast<double>(t) / steps);
    s.masked_counts[t - 1] =
        t == steps ? 0 : static_cast<int>(std::ceil(frac * total_tokens - 1e-9));
  }
  for (int t = steps - 2; t >= 0; --t)
    s.masked_counts[t] = std::max(s.masked_counts[t], s.masked_counts[t + 1] + 1);
  s.validate(total_tokens);
  return s;
}

// --- temporal roll -----------------------------------------------------------

inline std::vector<int> roll_perm(int frames, int rows_per_frame, int shift) {
  std::vector<int> perm(frames * rows_per_frame);
  for (int s = 0; s < frames; ++s) {
    const int src = ((s + shift) % frames + frames) % frames;
    for (int r = 0; r < rows_per_frame; ++r)
      perm[s * rows_per_frame + r] = src * rows_per_frame + r;
  }
  return perm;
}

// Cyclic shift of frame slots by T/2: [f0,f1,f2,f3] -> [f2,f3,f0,f1].
template <typename S>
Var<S> temporal_roll(const Var<S>& seq, int frames) {
  if (frames % 2 != 0) throw ValidationError("temporal_roll: T must be even");
  if (seq->rows() % frames != 0)
    throw ValidationError("temporal_roll: sequence length not divisible by T");
  return ad::permute_rows(seq, roll_perm(frames, seq->rows() / frames, frames / 2));
}

template <typename S>
Var<S> temporal_unroll(const Var<S>& seq, int frames) {
  if (frames % 2 != 0) throw ValidationError("temporal_unroll: T must be even");
  if (seq->rows() % frames != 0)
    throw ValidationError("temporal_unroll: sequence length not divisible by T");
  return ad::permute_rows(seq, roll_perm(frames, seq->rows() / frames, -(frames / 2)));
}

// --- spatial-temporal transformer block --------------------------------------

template <typename S>
struct SttbBlock {
  nn::LayerNorm<S> ln_spatial, ln_temporal, ln_mlp;
  nn::SelfAttention<S> attn_spatial, attn_temporal;
  nn::Dense<S> mlp_in, mlp_out;
  bool temporal = false;

  SttbBlock() = default;
  SttbBlock(nn::ParamRegistry<S>& reg, const std::string& name, int dim, int heads, int mlp_ratio,
            bool temporal_, Rng& rng)
      : temporal(temporal_) {
    ln_spatial = nn::LayerNorm<S>(reg, name + ".ln_s", dim);
    attn_spatial = nn::SelfAttention<S>(reg, name + ".attn_s", dim, heads, rng);
    if (temporal) {
      ln_temporal = nn::LayerNorm<S>(reg, name + ".ln_t", dim);
      attn_temporal = nn::SelfAttention<S>(reg, name + ".attn_t", dim, heads, rng);
    }
    ln_mlp = nn::LayerNorm<S>(reg, name + ".ln_m", dim);
    mlp_in = nn::Dense<S>(reg, name + ".mlp.in", dim, dim * mlp_ratio, rng);
    mlp_out = nn::Dense<S>(reg, name + ".mlp.out", dim * mlp_ratio, dim, rng);
  }

  // Spatial attention within each frame group, then temporal attention across
  // the T slots of each row-within-frame, then the MLP; all pre-norm residual.
  // The slot-indexed temporal position table is shared across blocks, so a
  // rolled sequence meets the same embeddings at shifted slots.
  Var<S> forward(Var<S> x, const nn::AttnGroups& spatial_groups,
                 const std::vector<int>& to_temporal, const std::vector<int>& from_temporal,
                 const nn::AttnGroups& temporal_groups,
                 const std::vector<int>& slot_of_temporal_row,
                 const Var<S>& pos_temporal) const {
    x = ad::add(x, attn_spatial.forward(ln_spatial.forward(x), spatial_groups));
    if (temporal) {
      auto h = ln_temporal.forward(x);
      h = ad::permute_rows(h, to_temporal);
      h = ad::add(h, ad::gather_rows(pos_temporal, slot_of_temporal_row));
      h = attn_temporal.forward(h, temporal_groups);
      h = ad::permute_rows(h, from_temporal);
      x = ad::add(x, h);
    }
    x = ad::add(x, mlp_out.forward(ad::relu(mlp_in.forward(ln_mlp.forward(x)))));
    return x;
  }
};

// Single-stream helper matching the (T*h*w) sequence contract: per-frame
// spatial groups, per-cell temporal groups.
template <typename S>
Var<S> sttb_forward(const SttbBlock<S>& block, const Var<S>& seq, int frames,
                    const Var<S>& pos_temporal) {
  if (seq->rows() % frames != 0)
    throw ValidationError("sttb_forward: sequence length not divisible by T");
  const int cells = seq->rows() / frames;
  nn::AttnGroups spatial, temporal;
  for (int f = 0; f < frames; ++f) spatial.push_back({f * cells, cells});
  for (int g = 0; g < cells; ++g) temporal.push_back({g * frames, frames});
  std::vector<int> to_t(seq->rows()), from_t(seq->rows()), slot(seq->rows());
  for (int g = 0; g < cells; ++g)
    for (int t = 0; t < frames; ++t) {
      to_t[g * frames + t] = t * cells + g;
      from_t[t * cells + g] = g * frames + t;
      slot[g * frames + t] = t;
    }
  return block.forward(seq, spatial, to_t, from_t, temporal, slot, pos_temporal);
}

// --- the mask-and-predict transformer ----------------------------------------

struct TransformerConfig {
  int dim = 64;
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 2;
  int codebook_size = 64;
  int grid_h = 8, grid_w = 8;
  int frames = 1;
  bool temporal = false;  // spatio-temporal blocks
  bool roll = true;       // temporal roll between blocks (needs temporal, even T)

  int cells() const { return grid_h * grid_w; }
  int rows_per_frame() const { return 3 * cells(); }
  int total_rows() const { return frames * rows_per_frame(); }
  int amodal_tokens() const { return frames * cells(); }

  void validate() const {
    if (dim <= 0 || layers <= 0 || heads <= 0 || mlp_ratio <= 0)
      throw ValidationError("TransformerConfig: sizes must be positive");
    if (dim % heads != 0) throw ValidationError("TransformerConfig: dim % heads != 0");
    if (codebook_size <= 0 || grid_h <= 0 || grid_w <= 0 || frames <= 0)
      throw ValidationError("TransformerConfig: sizes must be positive");
    if (roll && temporal && frames % 2 != 0)
      throw ValidationError("TransformerConfig: roll needs an even frame count");
    if (temporal && frames < 1) throw ValidationError("TransformerConfig: bad frame count");
  }
};

// Sequence layout: frames outermost, within each frame [image | visible |
// amodal] streams of h*w rows each. Predictions are K_cb-way logits over the
// amodal rows; the sentinel is never a predicted class.
template <typename S>
class CoarseTransformer {
 public:
  TransformerConfig cfg;
  nn::ParamRegistry<S> params;

  CoarseTransformer(const TransformerConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    embed_ = TokenEmbedder<S>(params, "tf.embed", cfg.codebook_size, cfg.dim, cfg.grid_h,
                              cfg.grid_w, rng);
    segment_ = params.add("tf.seg", nn::normal_init<S>(rng, 3, cfg.dim, 0.02));
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(params, "tf.b" + std::to_string(l), cfg.dim, cfg.heads, cfg.mlp_ratio,
                           cfg.temporal, rng);
    if (cfg.temporal)
      pos_temporal_ = params.add("tf.pos_t", nn::normal_init<S>(rng, cfg.frames, cfg.dim, 0.02));
    ln_head_ = nn::LayerNorm<S>(params, "tf.ln_head", cfg.dim);
    head_ = nn::Dense<S>(params, "tf.head", cfg.dim, cfg.codebook_size, rng);
    build_index_maps();
  }

  const TokenEmbedder<S>& embedder() const { return embed_; }

  // img_feats: per frame (h*w x dim); visible/amodal token grids per frame.
  // Amodal grids may carry the sentinel. Returns (frames*h*w) x K_cb logits for
  // the amodal rows in frame-major row-major order.
  Var<S> forward_logits(const std::vector<Var<S>>& img_feats,
                        const std::vector<TokenGrid>& visible,
                        const std::vector<TokenGrid>& amodal) const {
    if (static_cast<int>(img_feats.size()) != cfg.frames ||
        static_cast<int>(visible.size()) != cfg.frames ||
        static_cast<int>(amodal.size()) != cfg.frames)
      throw ValidationError("forward_logits: stream count != configured frames");
    std::vector<Var<S>> frames;
    for (int f = 0; f < cfg.frames; ++f) {
      if (img_feats[f]->rows() != cfg.cells() || img_feats[f]->cols() != cfg.dim)
        throw ValidationError("forward_logits: image feature dims mismatch");
      auto img = ad::add(ad::add(img_feats[f], embed_.positions()),
                         seg_broadcast(0, cfg.cells()));
      auto vis = ad::add(embed_.embed(visible[f]), seg_broadcast(1, cfg.cells()));
      auto amo = ad::add(embed_.embed(amodal[f]), seg_broadcast(2, cfg.cells()));
      frames.push_back(ad::concat_rows<S>({img, vis, amo}));
    }
    Var<S> x = cfg.frames == 1 ? frames[0] : ad::concat_rows<S>(frames);

    int rolled = 0;
    for (const auto& block : blocks_) {
      x = block.forward(x, spatial_groups_, to_temporal_, from_temporal_, temporal_groups_,
                        slot_of_temporal_row_, pos_temporal_);
      if (cfg.temporal && cfg.roll && cfg.frames > 1) {
        x = ad::permute_rows(x, roll_perm(cfg.frames, cfg.rows_per_frame(), cfg.frames / 2));
        rolled += cfg.frames / 2;
      }
    }
    if (rolled % cfg.frames != 0)
      x = ad::permute_rows(x, roll_perm(cfg.frames, cfg.rows_per_frame(), -(rolled % cfg.frames)));

    std::vector<Var<S>> amodal_rows;
    for (int f = 0; f < cfg.frames; ++f)
      amodal_rows.push_back(ad::slice_rows(x, f * cfg.rows_per_frame() + 2 * cfg.cells(),
                                           cfg.cells()));
    auto amo_seq = cfg.frames == 1 ? amodal_rows[0] : ad::concat_rows<S>(amodal_rows);
    return head_.forward(ln_head_.forward(amo_seq));
  }

 private:
  Var<S> seg_broadcast(int stream, int rows) const {
    return ad::gather_rows(segment_, std::vector<int>(rows, stream));
  }

  void build_index_maps() {
    const int R = cfg.rows_per_frame(), T = cfg.frames;
    for (int f = 0; f < T; ++f) spatial_groups_.push_back({f * R, R});
    if (cfg.temporal) {
      to_temporal_.resize(T * R);
      from_temporal_.resize(T * R);
      slot_of_temporal_row_.resize(T * R);
      for (int g = 0; g < R; ++g) {
        temporal_groups_.push_back({g * T, T});
        for (int t = 0; t < T; ++t) {
          to_temporal_[g * T + t] = t * R + g;
          from_temporal_[t * R + g] = g * T + t;
          slot_of_temporal_row_[g * T + t] = t;
        }
      }
    }
  }

  TokenEmbedder<S> embed_;
  Var<S> segment_, pos_temporal_;
  std::vector<SttbBlock<S>> blocks_;
  nn::LayerNorm<S> ln_head_;
  nn::Dense<S> head_;
  nn::AttnGroups spatial_groups_, temporal_groups_;
  std::vector<int> to_temporal_, from_temporal_, slot_of_temporal_row_;
};

// --- losses -------------------------------------------------------------------

template <typename S>
struct MaskedNll {
  Var<S> loss;
  LossBreakdown breakdown;
};

// Mean NLL over masked amodal positions only; all other rows carry zero weight.
template <typename S>
MaskedNll<S> masked_nll_loss(const Var<S>& logits, const std::vector<TokenGrid>& targets,
                             const std::vector<int>& masked_positions) {
  if (masked_positions.empty()) throw ValidationError("masked_nll_loss: empty masked set");
  std::vector<int> flat;
  for (const auto& t : targets) {
    if (t.has_sentinel()) throw ValidationError("masked_nll_loss: targets contain sentinel");
    for (int i = 0; i < t.cells(); ++i) flat.push_back(t.flat(i));
  }
  if (static_cast<int>(flat.size()) != logits->rows())
    throw ValidationError("masked_nll_loss: target/logit size mismatch");
  Vec<S> weights = Vec<S>::Zero(flat.size());
  for (int p : masked_positions) {
    if (p < 0 || p >= static_cast<int>(flat.size()))
      throw ValidationError("masked_nll_loss: masked position out of range");
    weights(p) = S(1) / S(masked_positions.size());
  }
  MaskedNll<S> out;
  out.loss = ad::cross_entropy_rows(logits, flat, weights);
  out.breakdown.set("nll", static_cast<double>(out.loss->value(0, 0)));
  return out;
}

// --- iterative decoding -------------------------------------------------------

struct DecodeResult {
  std::vector<TokenGrid> tokens;               // final grids, one per frame
  std::vector<std::vector<TokenGrid>> trace;   // per step: candidate grids per frame
  std::vector<std::vector<bool>> committed;    // per step: committed flags, flat order
  double mean_confidence = 0.0;                // mean committed-token probability
};

// K rounds of parallel prediction over any per-position logits source. Each
// round samples every open position, scores it by its sampled-token probability
// (committed positions are pinned at 1.0), then re-masks exactly the scheduled
// count of lowest-confidence open positions; ties break on the lower flat
// index. The final round takes argmax.
template <typename LogitsFn>
DecodeResult iterative_decode_core(const LogitsFn& logits_fn, int frames, int grid_h, int grid_w,
                                   int codebook_size, const DecodeSchedule& schedule, Rng& rng) {
  const int cells = grid_h * grid_w;
  const int N = frames * cells;
  const int K = codebook_size;
  schedule.validate(N);

  std::vector<TokenGrid> grid(frames, TokenGrid(grid_h, grid_w, K));
  for (auto& g : grid) g.fill_sentinel();
  std::vector<bool> committed(N, false);
  std::vector<double> commit_conf(N, 0.0);

  DecodeResult out;
  for (int step = 1; step <= schedule.steps; ++step) {
    Matf logits = logits_fn(grid);
    if (logits.rows() != N || logits.cols() != K)
      throw ValidationError("iterative_decode: logits shape mismatch");
    const bool final_step = step == schedule.steps;

    std::vector<int> candidate(N);
    std::vector<double> conf(N);
    for (int p = 0; p < N; ++p) {
      const int f = p / cells, i = p % cells;
      if (committed[p]) {
        candidate[p] = grid[f].flat(i);
        conf[p] = 1.0;
        continue;
      }
      Eigen::Array<float, 1, Eigen::Dynamic> row = logits.row(p).array();
      row -= row.maxCoeff();
      Eigen::Array<float, 1, Eigen::Dynamic> probs = row.exp();
      probs /= probs.sum();
      int pick = 0;
      if (final_step) {
        float best = probs(0);
        for (int k = 1; k < K; ++k)
          if (probs(k) > best) {
            best = probs(k);
            pick = k;
          }
      } else {
        const double u = rng.uniform();
        double acc = 0.0;
        pick = K - 1;
        for (int k = 0; k < K; ++k) {
          acc += static_cast<double>(probs(k));
          if (u < acc) {
            pick = k;
            break;
          }
        }
      }
      candidate[p] = pick;
      conf[p] = static_cast<double>(probs(pick));
    }

    std::vector<TokenGrid> snapshot(frames, TokenGrid(grid_h, grid_w, K));
    for (int p = 0; p < N; ++p) snapshot[p / cells].set_flat(p % cells, candidate[p]);
    out.trace.push_back(snapshot);

    // re-mask the lowest-confidence open positions
    std::vector<int> open;
    for (int p = 0; p < N; ++p)
      if (!committed[p]) open.push_back(p);
    const int n_mask = schedule.masked_counts[step - 1];
    std::sort(open.begin(), open.end(), [&](int a, int b) {
      return conf[a] != conf[b] ? conf[a] < conf[b] : a < b;
    });
    for (size_t i = 0; i < open.size(); ++i) {
      const int p = open[i];
      const int f = p / cells, c = p % cells;
      if (static_cast<int>(i) < n_mask) {
        grid[f].set_flat(c, grid[f].sentinel());
      } else {
        grid[f].set_flat(c, candidate[p]);
        committed[p] = true;
        commit_conf[p] = conf[p];
      }
    }
    out.committed.push_back(committed);
  }
  for (const auto& g : grid)
    if (g.has_sentinel()) throw std::logic_error("iterative_decode: sentinel survived");
  out.tokens = std::move(grid);
  out.mean_confidence = 0.0;
  for (double c : commit_conf) out.mean_confidence += c;
  out.mean_confidence /= N;
  return out;
}

template <typename S>
DecodeResult iterative_decode(const CoarseTransformer<S>& model,
                              const std::vector<Var<S>>& img_feats,
                              const std::vector<TokenGrid>& visible,
                              const DecodeSchedule& schedule, Rng& rng) {
  const auto& cfg = model.cfg;
  auto logits_fn = [&](const std::vector<TokenGrid>& amodal) -> Matf {
    auto logits = model.forward_logits(img_feats, visible, amodal);
    return logits->value.template cast<float>();
  };
  return iterative_decode_core(logits_fn, cfg.frames, cfg.grid_h, cfg.grid_w, cfg.codebook_size,
                               schedule, rng);
}

}  // namespace amodal
