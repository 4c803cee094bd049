#pragma once

// Alignment kernels: weighted SFT loss, pairwise ranking loss, reward head,
// PPO objective, best-of-n selection and RoPE frequencies, plus a tiny
// autoregressive model with an explicit backward pass for gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iplm/error.hpp"
#include "iplm/transport.hpp"

namespace iplm::align {

using TokenId = std::uint32_t;

// --- SFT -------------------------------------------------------------------------

enum class Source { D_exp, D_gen };

inline std::string_view to_string(Source s) { return s == Source::D_exp ? "D_exp" : "D_gen"; }

inline Source parse_source(std::string_view s) {
  if (s == "D_exp") return Source::D_exp;
  if (s == "D_gen") return Source::D_gen;
  throw Error("malformed", "unknown sample source '" + std::string(s) + "'");
}

inline double alpha_for(Source s) { return s == Source::D_exp ? 1.0 : 0.1; }

struct SftSample {
  std::vector<TokenId> token_ids;
  std::vector<std::uint8_t> loss_mask;  // 1 = output-segment token
  double weight_alpha = 1.0;
  Source source = Source::D_exp;
};

inline void check(const SftSample& s) {
  if (s.token_ids.size() != s.loss_mask.size()) throw Error("precondition", "token_ids and loss_mask differ in length");
  if (std::none_of(s.loss_mask.begin(), s.loss_mask.end(), [](auto m) { return m != 0; }))
    throw Error("precondition", "loss_mask has no output tokens");
  if (s.weight_alpha != alpha_for(s.source)) throw Error("precondition", "weight_alpha does not match source");
}

// instruction, separator, output; only output tokens carry loss.
inline SftSample make_sft_sample(const std::vector<TokenId>& instruction, const std::vector<TokenId>& output,
                                 TokenId separator, Source source) {
  SftSample s;
  s.source = source;
  s.weight_alpha = alpha_for(source);
  s.token_ids = instruction;
  s.token_ids.push_back(separator);
  s.token_ids.insert(s.token_ids.end(), output.begin(), output.end());
  s.loss_mask.assign(instruction.size() + 1, 0);
  s.loss_mask.resize(s.token_ids.size(), 1);
  check(s);
  return s;
}

// logprobs[i] is log p(token[i+1] | tokens[..i]); it counts iff mask[i+1].
inline double sft_loss(const std::vector<double>& logprobs, const SftSample& s) {
  check(s);
  if (logprobs.size() + 1 != s.token_ids.size()) throw Error("precondition", "logprobs must have token count - 1 entries");
  double sum = 0.0;
  for (std::size_t i = 0; i < logprobs.size(); ++i)
    if (s.loss_mask[i + 1]) sum -= logprobs[i];
  return s.weight_alpha * sum;
}

inline nlohmann::json to_json(const SftSample& s) {
  return {{"token_ids", s.token_ids}, {"loss_mask", s.loss_mask}, {"source", std::string(to_string(s.source))}};
}

inline SftSample sft_sample_from_json(const nlohmann::json& j) {
  SftSample s;
  s.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
  s.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
  s.source = parse_source(j.at("source").get<std::string>());
  s.weight_alpha = alpha_for(s.source);
  check(s);
  return s;
}

// --- ranking loss and reward head ------------------------------------------------

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// -log sigmoid(r_chosen - r_rejected), evaluated without overflow.
inline double ranking_loss(double r_chosen, double r_rejected) {
  if (!std::isfinite(r_chosen) || !std::isfinite(r_rejected)) throw Error("non_finite", "reward is not finite");
  return softplus(-(r_chosen - r_rejected));
}

// d loss / d r_chosen; d loss / d r_rejected is its negation.
inline double ranking_loss_grad(double r_chosen, double r_rejected) { return -sigmoid(-(r_chosen - r_rejected)); }

enum class Activation { tanh, relu, identity };

// score = w2 . act(W1 h + b1) + b2. Parameters live in one flat vector:
// W1 (hidden x in, row-major), b1, w2, b2.
class RewardHead {
 public:
  RewardHead(std::size_t in, std::size_t hidden, Activation act = Activation::tanh)
      : in_(in), hidden_(hidden), act_(act), params_(hidden * in + hidden + hidden + 1, 0.0) {}

  static RewardHead random(std::size_t in, std::size_t hidden, std::uint64_t seed, double scale = 0.5,
                           Activation act = Activation::tanh) {
    RewardHead h(in, hidden, act);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    for (auto& p : h.params_) p = dist(rng);
    return h;
  }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t in_dim() const { return in_; }

  double score(const std::vector<double>& h) const { return forward(h, nullptr); }

  // Accumulates d score / d params into dparams (scaled by dscore) and
  // returns d score / d h scaled by dscore.
  std::vector<double> backward(const std::vector<double>& h, double dscore, std::vector<double>& dparams) const {
    std::vector<double> z;
    forward(h, &z);
    dparams.resize(params_.size(), 0.0);
    const double* w1 = params_.data();
    const double* w2 = w1 + hidden_ * in_ + hidden_;
    double* dw1 = dparams.data();
    double* db1 = dw1 + hidden_ * in_;
    double* dw2 = db1 + hidden_;
    double* db2 = dw2 + hidden_;
    *db2 += dscore;
    std::vector<double> dh(in_, 0.0);
    for (std::size_t k = 0; k < hidden_; ++k) {
      const double a = activate(z[k]);
      dw2[k] += dscore * a;
      const double dz = dscore * w2[k] * activate_grad(z[k]);
      db1[k] += dz;
      for (std::size_t i = 0; i < in_; ++i) {
        dw1[k * in_ + i] += dz * h[i];
        dh[i] += dz * w1[k * in_ + i];
      }
    }
    return dh;
  }

 private:
  double activate(double z) const {
    switch (act_) {
      case Activation::tanh: return std::tanh(z);
      case Activation::relu: return z > 0.0 ? z : 0.0;
      case Activation::identity: return z;
    }
    return z;
  }
  double activate_grad(double z) const {
    switch (act_) {
      case Activation::tanh: {
        const double t = std::tanh(z);
        return 1.0 - t * t;
      }
      case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
      case Activation::identity: return 1.0;
    }
    return 1.0;
  }

  double forward(const std::vector<double>& h, std::vector<double>* zs) const {
    if (h.size() != in_) throw Error("dimension_mismatch", "reward head expects " + std::to_string(in_) + " inputs, got " +
                                                               std::to_string(h.size()));
    const double* w1 = params_.data();
    const double* b1 = w1 + hidden_ * in_;
    const double* w2 = b1 + hidden_;
    const double b2 = w2[hidden_];
    double s = b2;
    if (zs) zs->assign(hidden_, 0.0);
    for (std::size_t k = 0; k < hidden_; ++k) {
      double z = b1[k];
      for (std::size_t i = 0; i < in_; ++i) z += w1[k * in_ + i] * h[i];
      if (zs) (*zs)[k] = z;
      s += w2[k] * activate(z);
    }
    return s;
  }

  std::size_t in_;
  std::size_t hidden_;
  Activation act_;
  std::vector<double> params_;
};

// Left-pads so every sequence's last token sits at the final position.
struct PaddedBatch {
  std::vector<std::vector<TokenId>> tokens;
  std::vector<std::vector<std::uint8_t>> key_mask;  // 1 = real token
};

inline PaddedBatch left_pad(const std::vector<std::vector<TokenId>>& seqs, TokenId pad_id) {
  std::size_t width = 0;
  for (const auto& s : seqs) width = std::max(width, s.size());
  PaddedBatch b;
  for (const auto& s : seqs) {
    std::vector<TokenId> t(width - s.size(), pad_id);
    t.insert(t.end(), s.begin(), s.end());
    std::vector<std::uint8_t> m(width - s.size(), 0);
    m.resize(width, 1);
    b.tokens.push_back(std::move(t));
    b.key_mask.push_back(std::move(m));
  }
  return b;
}

// --- policy optimization ---------------------------------------------------------

struct PpoConfig {
  double kl_coeff = 0.01;
  std::size_t n_candidates = 4;
  double clip_epsilon = 0.2;
  double top_p = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-5;
  double actor_peak_lr = 1e-6;
  double actor_final_lr = 1e-7;
};

inline std::vector<std::string> validate(const PpoConfig& c) {
  std::vector<std::string> errs;
  if (!(c.kl_coeff > 0.0)) errs.emplace_back("ppo.kl_coeff: must be positive");
  if (c.n_candidates < 1) errs.emplace_back("ppo.n_candidates: must be at least 1");
  if (!(c.top_p > 0.0 && c.top_p <= 1.0)) errs.emplace_back("ppo.top_p: must lie in (0, 1]");
  if (!(c.clip_epsilon > 0.0)) errs.emplace_back("ppo.clip_epsilon: must be positive");
  return errs;
}

struct Candidate {
  std::string response;
  double reward = 0.0;
};

// Index of the highest reward; the earliest wins ties.
inline std::size_t select_best_of_n(const std::vector<Candidate>& candidates) {
  if (candidates.empty()) throw Error("precondition", "no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (candidates[i].reward > candidates[best].reward) best = i;
  return best;
}

// mean_t[ -min(rho A, clip(rho, 1-eps, 1+eps) A) + kl (logp_new - logp_ref) ]
// with rho = exp(logp_new - logp_old). If `grad` is given it receives
// d objective / d logp_new.
inline double ppo_objective(const std::vector<double>& logp_new, const std::vector<double>& logp_old,
                            const std::vector<double>& advantage, const std::vector<double>& logp_ref, const PpoConfig& cfg,
                            std::vector<double>* grad = nullptr) {
  const std::size_t n = logp_new.size();
  if (n == 0 || logp_old.size() != n || advantage.size() != n || logp_ref.size() != n)
    throw Error("precondition", "ppo inputs must be nonempty and aligned");
  if (grad) grad->assign(n, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double rho = std::exp(logp_new[t] - logp_old[t]);
    const double clipped = std::clamp(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    const double a = advantage[t];
    const double unclipped_term = rho * a;
    const double clipped_term = clipped * a;
    const bool use_unclipped = unclipped_term <= clipped_term;
    const double term = -(use_unclipped ? unclipped_term : clipped_term) + cfg.kl_coeff * (logp_new[t] - logp_ref[t]);
    if (!std::isfinite(term)) throw Error("non_finite", "ppo objective is not finite at position " + std::to_string(t));
    total += term;
    if (grad) (*grad)[t] = ((use_unclipped ? -rho * a : 0.0) + cfg.kl_coeff) / static_cast<double>(n);
  }
  return total / static_cast<double>(n);
}

// --- RoPE ------------------------------------------------------------------------

inline std::vector<double> rope_frequencies(std::size_t head_dim, double base) {
  if (head_dim == 0 || head_dim % 2 != 0) throw Error("precondition", "head_dim must be even and positive");
  if (!(base > 0.0)) throw Error("precondition", "base must be positive");
  std::vector<double> f(head_dim / 2);
  for (std::size_t j = 0; j < f.size(); ++j)
    f[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
  return f;
}

// --- micro model -----------------------------------------------------------------

struct MicroConfig {
  std::size_t vocab = 32;
  std::size_t dim = 8;  // model width = single attention head width; even
  std::size_t layers = 2;
  std::size_t mlp = 16;
  bool tied_head = false;
  double rope_base = 10000.0;
  double init_scale = 0.3;
};

// Token embedding, 1-2 blocks of single-head causal attention with rotary
// positions and a tanh MLP (both residual), then an output projection tied
// to the embedding or separate. All parameters live in one flat vector.
class MicroModel {
 public:
  struct LayerCache {
    std::vector<double> x, q, k, v, qr, kr, p, a, h, z, g;
  };
  struct Forward {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> key_mask;
    std::vector<LayerCache> layers;
    std::vector<double> hidden;  // T x D after the last block
    std::vector<double> logits;  // T x V
  };

  MicroModel(MicroConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.layers < 1 || cfg_.layers > 2) throw Error("precondition", "micro model supports 1 or 2 blocks");
    if (cfg_.dim == 0 || cfg_.dim % 2 != 0) throw Error("precondition", "micro model width must be even");
    const std::size_t d = cfg_.dim;
    std::size_t off = 0;
    emb_ = off;
    off += cfg_.vocab * d;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      LayerOffsets lo;
      lo.wq = off, off += d * d;
      lo.wk = off, off += d * d;
      lo.wv = off, off += d * d;
      lo.wo = off, off += d * d;
      lo.w1 = off, off += d * cfg_.mlp;
      lo.b1 = off, off += cfg_.mlp;
      lo.w2 = off, off += cfg_.mlp * d;
      lo.b2 = off, off += d;
      layer_off_.push_back(lo);
    }
    out_ = off;
    if (!cfg_.tied_head) off += d * cfg_.vocab;
    params_.resize(off);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, cfg_.init_scale);
    for (auto& p : params_) p = dist(rng);
    freqs_ = rope_frequencies(d, cfg_.rope_base);
  }

  const MicroConfig& config() const { return cfg_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  Forward forward(const std::vector<TokenId>& tokens, std::vector<std::uint8_t> key_mask = {}) const {
    const std::size_t T = tokens.size();
    const std::size_t D = cfg_.dim;
    if (T == 0) throw Error("precondition", "empty sequence");
    if (key_mask.empty()) key_mask.assign(T, 1);
    if (key_mask.size() != T) throw Error("precondition", "key_mask length differs from tokens");
    Forward f;
    f.tokens = tokens;
    f.key_mask = key_mask;
    std::vector<double> x(T * D);
    for (std::size_t t = 0; t < T; ++t) {
      if (tokens[t] >= cfg_.vocab) throw Error("precondition", "token id out of range");
      std::copy_n(params_.data() + emb_ + tokens[t] * D, D, x.data() + t * D);
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      LayerCache c;
      x = block_forward(layer_off_[l], x, key_mask, c);
      f.layers.push_back(std::move(c));
    }
    f.hidden = x;
    const double* w = params_.data() + (cfg_.tied_head ? emb_ : out_);
    f.logits.assign(T * cfg_.vocab, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < cfg_.vocab; ++v) {
        double s = 0.0;
        for (std::size_t i = 0; i < D; ++i)
          s += x[t * D + i] * (cfg_.tied_head ? w[v * D + i] : w[i * cfg_.vocab + v]);
        f.logits[t * cfg_.vocab + v] = s;
      }
    return f;
  }

  // Gradient of a scalar whose partials are dlogits (T x V) and, optionally,
  // dhidden (T x D, added to the final hidden state's gradient).
  std::vector<double> backward(const Forward& f, const std::vector<double>& dlogits,
                               const std::vector<double>* dhidden = nullptr) const {
    const std::size_t T = f.tokens.size();
    const std::size_t D = cfg_.dim;
    const std::size_t V = cfg_.vocab;
    std::vector<double> grad(params_.size(), 0.0);
    std::vector<double> dx(T * D, 0.0);
    if (dhidden) dx = *dhidden;
    if (!dlogits.empty()) {
      const std::size_t woff = cfg_.tied_head ? emb_ : out_;
      const double* w = params_.data() + woff;
      double* dw = grad.data() + woff;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < V; ++v) {
          const double g = dlogits[t * V + v];
          if (g == 0.0) continue;
          for (std::size_t i = 0; i < D; ++i) {
            if (cfg_.tied_head) {
              dw[v * D + i] += g * f.hidden[t * D + i];
              dx[t * D + i] += g * w[v * D + i];
            } else {
              dw[i * V + v] += g * f.hidden[t * D + i];
              dx[t * D + i] += g * w[i * V + v];
            }
          }
        }
    }
    for (std::size_t l = cfg_.layers; l-- > 0;) dx = block_backward(layer_off_[l], f.layers[l], f.key_mask, dx, grad);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < D; ++i) grad[emb_ + f.tokens[t] * D + i] += dx[t * D + i];
    return grad;
  }

 private:
  struct LayerOffsets {
    std::size_t wq, wk, wv, wo, w1, b1, w2, b2;
  };

  static bool allowed(std::size_t i, std::size_t j, const std::vector<std::uint8_t>& mask) {
    return j <= i && (mask[j] != 0 || j == i);
  }

  // out (T x n) = in (T x m) * W (m x n)
  static void matmul(const double* in, const double* w, double* out, std::size_t T, std::size_t m, std::size_t n) {
    std::fill(out, out + T * n, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < m; ++i) {
        const double a = in[t * m + i];
        for (std::size_t j = 0; j < n; ++j) out[t * n + j] += a * w[i * n + j];
      }
  }

  // dW (m x n) += in^T dout; din (T x m) += dout W^T
  static void matmul_back(const double* in, const double* w, const double* dout, double* dw, double* din, std::size_t T,
                          std::size_t m, std::size_t n) {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dw[i * n + j] += in[t * m + i] * dout[t * n + j];
          acc += dout[t * n + j] * w[i * n + j];
        }
        din[t * m + i] += acc;
      }
  }

  void rope(std::vector<double>& x, std::size_t T, bool inverse) const {
    const std::size_t D = cfg_.dim;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < D / 2; ++j) {
        const double ang = static_cast<double>(t) * freqs_[j];
        const double c = std::cos(ang);
        const double s = inverse ? -std::sin(ang) : std::sin(ang);
        double& a = x[t * D + 2 * j];
        double& b = x[t * D + 2 * j + 1];
        const double a0 = a;
        a = a0 * c - b * s;
        b = a0 * s + b * c;
      }
  }

  std::vector<double> block_forward(const LayerOffsets& o, const std::vector<double>& x,
                                    const std::vector<std::uint8_t>& mask, LayerCache& c) const {
    const std::size_t T = x.size() / cfg_.dim;
    const std::size_t D = cfg_.dim;
    const std::size_t F = cfg_.mlp;
    const double* P = params_.data();
    c.x = x;
    c.q.resize(T * D), c.k.resize(T * D), c.v.resize(T * D);
    matmul(x.data(), P + o.wq, c.q.data(), T, D, D);
    matmul(x.data(), P + o.wk, c.k.data(), T, D, D);
    matmul(x.data(), P + o.wv, c.v.data(), T, D, D);
    c.qr = c.q, c.kr = c.k;
    rope(c.qr, T, false);
    rope(c.kr, T, false);
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    c.p.assign(T * T, 0.0);
    c.a.assign(T * D, 0.0);
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed(i, j, mask)) continue;
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += c.qr[i * D + d] * c.kr[j * D + d];
        c.p[i * T + j] = s * scale;
        mx = std::max(mx, c.p[i * T + j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed(i, j, mask)) continue;
        c.p[i * T + j] = std::exp(c.p[i * T + j] - mx);
        z += c.p[i * T + j];
      }
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed(i, j, mask)) continue;
        c.p[i * T + j] /= z;
        for (std::size_t d = 0; d < D; ++d) c.a[i * D + d] += c.p[i * T + j] * c.v[j * D + d];
      }
    }
    std::vector<double> attn(T * D);
    matmul(c.a.data(), P + o.wo, attn.data(), T, D, D);
    c.h.resize(T * D);
    for (std::size_t i = 0; i < T * D; ++i) c.h[i] = x[i] + attn[i];
    c.z.resize(T * F);
    matmul(c.h.data(), P + o.w1, c.z.data(), T, D, F);
    c.g.resize(T * F);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < F; ++j) {
        c.z[t * F + j] += P[o.b1 + j];
        c.g[t * F + j] = std::tanh(c.z[t * F + j]);
      }
    std::vector<double> m(T * D);
    matmul(c.g.data(), P + o.w2, m.data(), T, F, D);
    std::vector<double> y(T * D);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) y[t * D + d] = c.h[t * D + d] + m[t * D + d] + P[o.b2 + d];
    return y;
  }

  std::vector<double> block_backward(const LayerOffsets& o, const LayerCache& c, const std::vector<std::uint8_t>& mask,
                                     const std::vector<double>& dy, std::vector<double>& grad) const {
    const std::size_t D = cfg_.dim;
    const std::size_t F = cfg_.mlp;
    const std::size_t T = dy.size() / D;
    const double* P = params_.data();
    double* G = grad.data();

    std::vector<double> dh = dy;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) G[o.b2 + d] += dy[t * D + d];
    std::vector<double> dg(T * F, 0.0);
    matmul_back(c.g.data(), P + o.w2, dy.data(), G + o.w2, dg.data(), T, F, D);
    std::vector<double> dz(T * F);
    for (std::size_t i = 0; i < T * F; ++i) dz[i] = dg[i] * (1.0 - c.g[i] * c.g[i]);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < F; ++j) G[o.b1 + j] += dz[t * F + j];
    matmul_back(c.h.data(), P + o.w1, dz.data(), G + o.w1, dh.data(), T, D, F);

    std::vector<double> dx = dh;
    std::vector<double> da(T * D, 0.0);
    matmul_back(c.a.data(), P + o.wo, dh.data(), G + o.wo, da.data(), T, D, D);

    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    std::vector<double> dqr(T * D, 0.0), dkr(T * D, 0.0), dv(T * D, 0.0);
    std::vector<double> dp(T);
    for (std::size_t i = 0; i < T; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        dp[j] = 0.0;
        if (!allowed(i, j, mask)) continue;
        for (std::size_t d = 0; d < D; ++d) {
          dp[j] += da[i * D + d] * c.v[j * D + d];
          dv[j * D + d] += c.p[i * T + j] * da[i * D + d];
        }
        dot += c.p[i * T + j] * dp[j];
      }
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed(i, j, mask)) continue;
        const double ds = c.p[i * T + j] * (dp[j] - dot) * scale;
        for (std::size_t d = 0; d < D; ++d) {
          dqr[i * D + d] += ds * c.kr[j * D + d];
          dkr[j * D + d] += ds * c.qr[i * D + d];
        }
      }
    }
    rope(dqr, T, true);
    rope(dkr, T, true);
    matmul_back(c.x.data(), P + o.wq, dqr.data(), G + o.wq, dx.data(), T, D, D);
    matmul_back(c.x.data(), P + o.wk, dkr.data(), G + o.wk, dx.data(), T, D, D);
    matmul_back(c.x.data(), P + o.wv, dv.data(), G + o.wv, dx.data(), T, D, D);
    return dx;
  }

  MicroConfig cfg_;
  std::size_t emb_ = 0;
  std::size_t out_ = 0;
  std::vector<LayerOffsets> layer_off_;
  std::vector<double> params_;
  std::vector<double> freqs_;
};

// Row-wise log-softmax of T x V logits.
inline std::vector<double> log_softmax(const std::vector<double>& logits, std::size_t V) {
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r * V < logits.size(); ++r) {
    const double* row = logits.data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t v = 0; v < V; ++v) out[r * V + v] = row[v] - lz;
  }
  return out;
}

// SFT loss of one sample under the model; fills `grad` when given.
inline double sft_loss_under(const MicroModel& m, const SftSample& s, std::vector<double>* grad) {
  check(s);
  const std::size_t V = m.config().vocab;
  const auto f = m.forward(s.token_ids);
  const auto lsm = log_softmax(f.logits, V);
  const std::size_t T = s.token_ids.size();
  std::vector<double> logprobs(T - 1);
  for (std::size_t i = 0; i + 1 < T; ++i) logprobs[i] = lsm[i * V + s.token_ids[i + 1]];
  const double loss = sft_loss(logprobs, s);
  if (grad) {
    std::vector<double> dlogits(T * V, 0.0);
    for (std::size_t i = 0; i + 1 < T; ++i) {
      if (!s.loss_mask[i + 1]) continue;
      for (std::size_t v = 0; v < V; ++v) dlogits[i * V + v] = s.weight_alpha * std::exp(lsm[i * V + v]);
      dlogits[i * V + s.token_ids[i + 1]] -= s.weight_alpha;
    }
    *grad = m.backward(f, dlogits);
  }
  return loss;
}

// Mean over samples of the per-sample weighted token sums.
inline double sft_batch_loss(const MicroModel& m, const std::vector<SftSample>& batch, std::vector<double>* grad) {
  if (batch.empty()) throw Error("precondition", "empty batch");
  double total = 0.0;
  if (grad) grad->assign(m.params().size(), 0.0);
  for (const auto& s : batch) {
    std::vector<double> g;
    total += sft_loss_under(m, s, grad ? &g : nullptr);
    if (grad)
      for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
  }
  const double n = static_cast<double>(batch.size());
  if (grad)
    for (auto& g : *grad) g /= n;
  return total / n;
}

// Ranking loss of a preference pair scored by model + head at the final
// (end-token) position of left-padded inputs. Gradient layout: model
// parameters followed by head parameters.
inline double ranking_loss_under(const MicroModel& m, const RewardHead& head, const std::vector<TokenId>& chosen,
                                 const std::vector<TokenId>& rejected, TokenId pad_id, std::vector<double>* grad) {
  const auto batch = left_pad({chosen, rejected}, pad_id);
  const std::size_t D = m.config().dim;
  double scores[2];
  MicroModel::Forward fw[2];
  std::vector<double> end_state[2];
  for (int k = 0; k < 2; ++k) {
    fw[k] = m.forward(batch.tokens[k], batch.key_mask[k]);
    const std::size_t T = batch.tokens[k].size();
    end_state[k].assign(fw[k].hidden.begin() + static_cast<std::ptrdiff_t>((T - 1) * D), fw[k].hidden.end());
    scores[k] = head.score(end_state[k]);
  }
  const double loss = ranking_loss(scores[0], scores[1]);
  if (grad) {
    const double dc = ranking_loss_grad(scores[0], scores[1]);
    grad->assign(m.params().size() + head.params().size(), 0.0);
    std::vector<double> dhead(head.params().size(), 0.0);
    for (int k = 0; k < 2; ++k) {
      const double ds = k == 0 ? dc : -dc;
      const auto dend = head.backward(end_state[k], ds, dhead);
      const std::size_t T = batch.tokens[k].size();
      std::vector<double> dhidden(T * D, 0.0);
      std::copy(dend.begin(), dend.end(), dhidden.begin() + static_cast<std::ptrdiff_t>((T - 1) * D));
      const auto g = m.backward(fw[k], {}, &dhidden);
      for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
    }
    std::copy(dhead.begin(), dhead.end(), grad->begin() + static_cast<std::ptrdiff_t>(m.params().size()));
  }
  return loss;
}

// --- gradient checking -----------------------------------------------------------

// Loss at parameters theta; writes the analytic gradient when asked.
using LossFn = std::function<double(const std::vector<double>& theta, std::vector<double>* grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Central differences on `sample` random coordinates (all when larger than
// the vector). Relative error |a - n| / max(|a|, |n|, 1e-6); the floor sits
// above central-difference roundoff (about 1e-11 at the default step).
inline GradCheckResult grad_check(const LossFn& fn, std::vector<double> theta, std::size_t sample, std::uint64_t seed,
                                  double step = 1e-5) {
  std::vector<double> analytic;
  const double base = fn(theta, &analytic);
  if (!std::isfinite(base)) throw Error("non_finite", "loss is not finite");
  if (analytic.size() != theta.size()) throw Error("precondition", "gradient size differs from parameter count");
  std::vector<std::size_t> idx(theta.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(sample, idx.size()));
  GradCheckResult r;
  for (const auto i : idx) {
    const double keep = theta[i];
    theta[i] = keep + step;
    const double up = fn(theta, nullptr);
    theta[i] = keep - step;
    const double down = fn(theta, nullptr);
    theta[i] = keep;
    if (!std::isfinite(up) || !std::isfinite(down)) throw Error("non_finite", "loss is not finite near theta");
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic[i] - numeric) / denom);
    ++r.checked;
  }
  return r;
}

// --- preference data -------------------------------------------------------------

enum class Origin { human, ai };

struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  Origin origin = Origin::human;
};

inline nlohmann::json to_json(const PreferencePair& p) {
  return {{"prompt", p.prompt}, {"chosen", p.chosen}, {"rejected", p.rejected}, {"origin", p.origin == Origin::ai ? "ai" : "human"}};
}

inline PreferencePair preference_from_json(const nlohmann::json& j) {
  PreferencePair p{j.at("prompt").get<std::string>(), j.at("chosen").get<std::string>(), j.at("rejected").get<std::string>(),
                   j.at("origin").get<std::string>() == "ai" ? Origin::ai : Origin::human};
  if (p.chosen == p.rejected) throw Error("malformed", "chosen and rejected are identical");
  return p;
}

// AI ranking service: {prompt, responses[]} -> {ranking[]}, best first.
class RankingClient {
 public:
  explicit RankingClient(JsonTransport& transport) : transport_(transport) {}

  std::vector<std::size_t> rank(const std::string& prompt, const std::vector<std::string>& responses) const {
    const auto reply = transport_.post({{"prompt", prompt}, {"responses", responses}});
    if (!reply.contains("ranking") || !reply["ranking"].is_array()) throw Error("bad_reply", "ranking reply lacks 'ranking'");
    auto ranking = reply["ranking"].get<std::vector<std::size_t>>();
    std::vector<std::size_t> sorted = ranking;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted.size() != responses.size() || sorted[i] != i) throw Error("bad_reply", "ranking is not a permutation");
    return ranking;
  }

  // Every (better, worse) combination from one ranking.
  std::vector<PreferencePair> pairs(const std::string& prompt, const std::vector<std::string>& responses) const {
    const auto ranking = rank(prompt, responses);
    std::vector<PreferencePair> out;
    for (std::size_t i = 0; i < ranking.size(); ++i)
      for (std::size_t j = i + 1; j < ranking.size(); ++j) {
        const auto& c = responses[ranking[i]];
        const auto& r = responses[ranking[j]];
        if (c != r) out.push_back({prompt, c, r, Origin::ai});
      }
    return out;
  }

 private:
  JsonTransport& transport_;
};

}  // namespace iplm::align
