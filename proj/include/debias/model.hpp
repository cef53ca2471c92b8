#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/rng.hpp"
#include "debias/vocab.hpp"

namespace debias {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct SequenceTooLong : std::runtime_error {
  explicit SequenceTooLong(int t, int cap)
      : std::runtime_error("sequence length " + std::to_string(t) +
                           " exceeds max_seq_len " + std::to_string(cap)) {}
};
struct DegenerateLength : std::runtime_error {
  DegenerateLength() : std::runtime_error("sequence has no predicted tokens (length < 2)") {}
};
struct LayerOutOfRange : std::runtime_error {
  explicit LayerOutOfRange(int layer)
      : std::runtime_error("layer index out of range: " + std::to_string(layer)) {}
};

// ============================================================================
// Configuration and parameters
// ============================================================================

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
        max_seq_len < 1) {
      throw std::invalid_argument("model config: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    }
  }

  bool operator==(const ModelConfig& o) const {
    return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
           d_ff == o.d_ff && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len;
  }
};

struct LayerParams {
  Vec ln1_gain, ln1_bias;
  Mat attn_q, attn_k, attn_v, attn_out;  // each d_model x d_model
  Vec ln2_gain, ln2_bias;
  Mat mlp_in;       // d_ff x d_model
  Vec mlp_in_bias;  // d_ff
  Mat mlp_out;      // d_model x d_ff; maps the inner activation back to the
                    // residual stream. The only matrix weight edits mutate.
};

// Pre-norm decoder-only transformer with learned positional embeddings and an
// untied output head. Doubles throughout: gradient checks and bit-exact
// checkpoints matter more than speed at this scale.
struct ModelParams {
  ModelConfig config;
  Mat token_embedding;     // d_model x vocab_size
  Mat position_embedding;  // d_model x max_seq_len
  std::vector<LayerParams> layers;
  Vec final_gain, final_bias;
  Mat head;  // vocab_size x d_model

  static ModelParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.token_embedding = Mat::Zero(cfg.d_model, cfg.vocab_size);
    p.position_embedding = Mat::Zero(cfg.d_model, cfg.max_seq_len);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
      l.ln1_gain = Vec::Zero(cfg.d_model);
      l.ln1_bias = Vec::Zero(cfg.d_model);
      l.attn_q = Mat::Zero(cfg.d_model, cfg.d_model);
      l.attn_k = Mat::Zero(cfg.d_model, cfg.d_model);
      l.attn_v = Mat::Zero(cfg.d_model, cfg.d_model);
      l.attn_out = Mat::Zero(cfg.d_model, cfg.d_model);
      l.ln2_gain = Vec::Zero(cfg.d_model);
      l.ln2_bias = Vec::Zero(cfg.d_model);
      l.mlp_in = Mat::Zero(cfg.d_ff, cfg.d_model);
      l.mlp_in_bias = Vec::Zero(cfg.d_ff);
      l.mlp_out = Mat::Zero(cfg.d_model, cfg.d_ff);
    }
    p.final_gain = Vec::Zero(cfg.d_model);
    p.final_bias = Vec::Zero(cfg.d_model);
    p.head = Mat::Zero(cfg.vocab_size, cfg.d_model);
    return p;
  }

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    ModelParams p = zeros(cfg);
    const double std0 = 0.08;
    // residual-feeding projections get the usual 1/sqrt(2L) damping
    const double std_res = std0 / std::sqrt(2.0 * cfg.n_layers);
    auto fill = [&rng](Mat& m, double stddev) {
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.normal(0.0, stddev);
    };
    fill(p.token_embedding, std0);
    fill(p.position_embedding, std0);
    for (auto& l : p.layers) {
      l.ln1_gain.setOnes();
      l.ln2_gain.setOnes();
      fill(l.attn_q, std0);
      fill(l.attn_k, std0);
      fill(l.attn_v, std0);
      fill(l.attn_out, std_res);
      fill(l.mlp_in, std0);
      fill(l.mlp_out, std_res);
    }
    p.final_gain.setOnes();
    fill(p.head, std0);
    return p;
  }
};

// Visits every tensor in a fixed order. `group` is -1 for embeddings, the
// head and the final norm, otherwise the transformer-layer index; blockwise
// fine-tuning keys off it.
template <typename Params, typename Fn>
void for_each_tensor(Params& params, Fn&& fn) {
  fn(-1, "token_embedding", params.token_embedding);
  fn(-1, "position_embedding", params.position_embedding);
  for (int i = 0; i < params.config.n_layers; ++i) {
    auto& l = params.layers[static_cast<std::size_t>(i)];
    fn(i, "ln1_gain", l.ln1_gain);
    fn(i, "ln1_bias", l.ln1_bias);
    fn(i, "attn_q", l.attn_q);
    fn(i, "attn_k", l.attn_k);
    fn(i, "attn_v", l.attn_v);
    fn(i, "attn_out", l.attn_out);
    fn(i, "ln2_gain", l.ln2_gain);
    fn(i, "ln2_bias", l.ln2_bias);
    fn(i, "mlp_in", l.mlp_in);
    fn(i, "mlp_in_bias", l.mlp_in_bias);
    fn(i, "mlp_out", l.mlp_out);
  }
  fn(-1, "final_gain", params.final_gain);
  fn(-1, "final_bias", params.final_bias);
  fn(-1, "head", params.head);
}

// ============================================================================
// Forward pass
// ============================================================================

constexpr double kLnEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

// Replaces the MLP output column (the mlp_out * activation vector, before the
// residual add) at one (layer, position). Used by the edit-value solver.
struct MlpOverride {
  int layer = -1;
  int position = -1;
  Vec value;
};

struct Activations {
  int seq_len = 0;

  Mat input;  // d x T, token + position embeddings

  struct LayerCache {
    Mat block_in;            // residual stream entering the block
    Mat norm1_hat;           // normalized pre-attention input
    Vec norm1_istd;          // 1/std per position
    Mat norm1;               // gain * hat + bias
    Mat q, k, v;             // d x T
    std::vector<Mat> attn;   // per head, T x T row-stochastic
    Mat attn_ctx;            // concatenated head outputs, d x T
    Mat mid;                 // residual stream after attention
    Mat norm2_hat;
    Vec norm2_istd;
    Mat norm2;
    Mat mlp_pre;             // d_ff x T, before GELU
    Mat mlp_act;             // d_ff x T, the inner ("key") activations
    Mat mlp_out;             // d x T, after any override
    Mat block_out;           // residual stream leaving the block
  };
  std::vector<LayerCache> layers;

  Mat final_hat;
  Vec final_istd;
  Mat final_norm;
  Mat log_probs;  // vocab x T; column t is the next-token distribution after
                  // position t
};

namespace detail {

inline void layer_norm(const Mat& x, const Vec& gain, const Vec& bias, Mat& hat, Vec& istd,
                       Mat& out) {
  const Eigen::Index d = x.rows(), t = x.cols();
  hat.resize(d, t);
  istd.resize(t);
  out.resize(d, t);
  for (Eigen::Index j = 0; j < t; ++j) {
    const double mu = x.col(j).mean();
    const double var = (x.col(j).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kLnEps);
    istd(j) = is;
    hat.col(j) = (x.col(j).array() - mu) * is;
    out.col(j) = gain.array() * hat.col(j).array() + bias.array();
  }
}

// d(loss)/dx for y = gain .* hat + bias given d(loss)/dy
inline Mat layer_norm_backward(const Mat& d_out, const Mat& hat, const Vec& istd,
                               const Vec& gain, Vec& d_gain, Vec& d_bias) {
  const Eigen::Index d = d_out.rows(), t = d_out.cols();
  Mat dx(d, t);
  for (Eigen::Index j = 0; j < t; ++j) {
    d_gain.array() += d_out.col(j).array() * hat.col(j).array();
    d_bias += d_out.col(j);
    const Vec dhat = d_out.col(j).array() * gain.array();
    const double m1 = dhat.mean();
    const double m2 = (dhat.array() * hat.col(j).array()).mean();
    dx.col(j) = istd(j) * (dhat.array() - m1 - hat.col(j).array() * m2);
  }
  return dx;
}

}  // namespace detail

inline Activations forward(const ModelParams& params, const TokenSequence& seq,
                           const std::optional<MlpOverride>& override = std::nullopt) {
  const ModelConfig& cfg = params.config;
  const int t_len = seq.length();
  if (t_len < 1) throw DegenerateLength();
  if (t_len > cfg.max_seq_len) throw SequenceTooLong(t_len, cfg.max_seq_len);
  for (int id : seq.ids) {
    if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("token id out of vocabulary");
  }

  Activations acts;
  acts.seq_len = t_len;
  acts.input.resize(cfg.d_model, t_len);
  for (int t = 0; t < t_len; ++t) {
    acts.input.col(t) =
        params.token_embedding.col(seq.ids[static_cast<std::size_t>(t)]) +
        params.position_embedding.col(t);
  }

  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat h = acts.input;
  acts.layers.resize(static_cast<std::size_t>(cfg.n_layers));

  for (int li = 0; li < cfg.n_layers; ++li) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(li)];
    auto& c = acts.layers[static_cast<std::size_t>(li)];
    c.block_in = h;

    detail::layer_norm(h, lp.ln1_gain, lp.ln1_bias, c.norm1_hat, c.norm1_istd, c.norm1);
    c.q = lp.attn_q * c.norm1;
    c.k = lp.attn_k * c.norm1;
    c.v = lp.attn_v * c.norm1;

    c.attn.assign(static_cast<std::size_t>(cfg.n_heads), Mat());
    c.attn_ctx.resize(cfg.d_model, t_len);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      auto qh = c.q.middleRows(hd * dh, dh);
      auto kh = c.k.middleRows(hd * dh, dh);
      auto vh = c.v.middleRows(hd * dh, dh);
      Mat scores = (qh.transpose() * kh) * scale;  // T x T, row = query position
      Mat& a = c.attn[static_cast<std::size_t>(hd)];
      a.resize(t_len, t_len);
      for (int i = 0; i < t_len; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) denom += std::exp(scores(i, j) - mx);
        for (int j = 0; j < t_len; ++j) {
          a(i, j) = j <= i ? std::exp(scores(i, j) - mx) / denom : 0.0;
        }
      }
      c.attn_ctx.middleRows(hd * dh, dh) = vh * a.transpose();
    }
    h = c.block_in + lp.attn_out * c.attn_ctx;
    c.mid = h;

    detail::layer_norm(h, lp.ln2_gain, lp.ln2_bias, c.norm2_hat, c.norm2_istd, c.norm2);
    c.mlp_pre = (lp.mlp_in * c.norm2).colwise() + lp.mlp_in_bias;
    c.mlp_act = c.mlp_pre.unaryExpr([](double x) { return gelu(x); });
    c.mlp_out = lp.mlp_out * c.mlp_act;
    if (override && override->layer == li) {
      if (override->position < 0 || override->position >= t_len) {
        throw std::out_of_range("mlp override position out of range");
      }
      c.mlp_out.col(override->position) = override->value;
    }
    h = c.mid + c.mlp_out;
    c.block_out = h;
  }

  detail::layer_norm(h, params.final_gain, params.final_bias, acts.final_hat, acts.final_istd,
                     acts.final_norm);
  Mat logits = params.head * acts.final_norm;
  acts.log_probs.resize(cfg.vocab_size, t_len);
  for (int t = 0; t < t_len; ++t) {
    const double mx = logits.col(t).maxCoeff();
    const double lse = mx + std::log((logits.col(t).array() - mx).exp().sum());
    acts.log_probs.col(t) = logits.col(t).array() - lse;
  }
  return acts;
}

// Next-token log-probability table; column t conditions on tokens 0..t.
inline Mat forward_log_probs(const ModelParams& params, const TokenSequence& seq) {
  return forward(params, seq).log_probs;
}

// log p(x) = sum over realized next tokens, in nats. Requires at least one
// predicted token after BOS.
inline double sequence_log_likelihood(const ModelParams& params, const TokenSequence& seq) {
  if (seq.length() < 2) throw DegenerateLength();
  const Mat lp = forward_log_probs(params, seq);
  double total = 0.0;
  for (int t = 0; t + 1 < seq.length(); ++t) {
    total += lp(seq.ids[static_cast<std::size_t>(t + 1)], t);
  }
  return total;
}

// Mean-pooled residual stream at the output of the given transformer block.
inline Vec embed(const ModelParams& params, const TokenSequence& seq, int layer) {
  if (layer < 0 || layer >= params.config.n_layers) throw LayerOutOfRange(layer);
  Activations acts = forward(params, seq);
  const Mat& h = acts.layers[static_cast<std::size_t>(layer)].block_out;
  return h.rowwise().mean();
}

// ============================================================================
// Backward pass
// ============================================================================

// d(loss)/dlogits for mean-style cross entropy: columns of `targets_weight`
// pair a position with the realized next token and a weight (usually
// 1/total_tokens across the batch).
struct CeTarget {
  int position;
  int token;
  double weight;
};

inline Mat ce_dlogits(const Activations& acts, const std::vector<CeTarget>& targets) {
  Mat d = Mat::Zero(acts.log_probs.rows(), acts.seq_len);
  for (const auto& tg : targets) {
    d.col(tg.position) += acts.log_probs.col(tg.position).array().exp().matrix() * tg.weight;
    d(tg.token, tg.position) -= tg.weight;
  }
  return d;
}

// Accumulates parameter gradients into `grads` (same shape as the params, via
// ModelParams reuse). When the forward ran with an override, gradient flow
// into the replaced column is cut and the gradient w.r.t. the injected value
// is written to `override_grad` if given.
inline void backward(const ModelParams& params, const Activations& acts,
                     const TokenSequence& seq, const Mat& d_logits, ModelParams& grads,
                     const std::optional<MlpOverride>& override = std::nullopt,
                     Vec* override_grad = nullptr) {
  const ModelConfig& cfg = params.config;
  const int t_len = acts.seq_len;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  grads.head += d_logits * acts.final_norm.transpose();
  Mat d_norm = params.head.transpose() * d_logits;
  Mat d_h = detail::layer_norm_backward(d_norm, acts.final_hat, acts.final_istd,
                                        params.final_gain, grads.final_gain, grads.final_bias);

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(li)];
    LayerParams& gp = grads.layers[static_cast<std::size_t>(li)];
    const auto& c = acts.layers[static_cast<std::size_t>(li)];

    // h = mid + mlp_out
    Mat d_mlp_out = d_h;
    if (override && override->layer == li) {
      if (override_grad) *override_grad = d_mlp_out.col(override->position);
      d_mlp_out.col(override->position).setZero();
    }
    gp.mlp_out += d_mlp_out * c.mlp_act.transpose();
    Mat d_act = lp.mlp_out.transpose() * d_mlp_out;
    Mat d_pre = d_act.cwiseProduct(c.mlp_pre.unaryExpr([](double x) { return gelu_grad(x); }));
    gp.mlp_in += d_pre * c.norm2.transpose();
    gp.mlp_in_bias += d_pre.rowwise().sum();
    Mat d_norm2 = lp.mlp_in.transpose() * d_pre;
    Mat d_mid = d_h + detail::layer_norm_backward(d_norm2, c.norm2_hat, c.norm2_istd,
                                                  lp.ln2_gain, gp.ln2_gain, gp.ln2_bias);

    // mid = block_in + attn_out * ctx
    gp.attn_out += d_mid * c.attn_ctx.transpose();
    Mat d_ctx = lp.attn_out.transpose() * d_mid;

    Mat d_q = Mat::Zero(cfg.d_model, t_len);
    Mat d_k = Mat::Zero(cfg.d_model, t_len);
    Mat d_v = Mat::Zero(cfg.d_model, t_len);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const Mat& a = c.attn[static_cast<std::size_t>(hd)];
      auto qh = c.q.middleRows(hd * dh, dh);
      auto kh = c.k.middleRows(hd * dh, dh);
      auto vh = c.v.middleRows(hd * dh, dh);
      auto d_ctx_h = d_ctx.middleRows(hd * dh, dh);

      Mat d_a = d_ctx_h.transpose() * vh;          // T x T
      d_v.middleRows(hd * dh, dh) += d_ctx_h * a;  // ctx = v * a^T
      Mat d_scores(t_len, t_len);
      for (int i = 0; i < t_len; ++i) {
        const double dot = d_a.row(i).dot(a.row(i));
        d_scores.row(i) = (d_a.row(i).array() - dot) * a.row(i).array();
      }
      d_q.middleRows(hd * dh, dh) += kh * d_scores.transpose() * scale;
      d_k.middleRows(hd * dh, dh) += qh * d_scores * scale;
    }
    gp.attn_q += d_q * c.norm1.transpose();
    gp.attn_k += d_k * c.norm1.transpose();
    gp.attn_v += d_v * c.norm1.transpose();
    Mat d_norm1 = lp.attn_q.transpose() * d_q + lp.attn_k.transpose() * d_k +
                  lp.attn_v.transpose() * d_v;
    d_h = d_mid + detail::layer_norm_backward(d_norm1, c.norm1_hat, c.norm1_istd, lp.ln1_gain,
                                              gp.ln1_gain, gp.ln1_bias);
  }

  for (int t = 0; t < t_len; ++t) {
    grads.token_embedding.col(seq.ids[static_cast<std::size_t>(t)]) += d_h.col(t);
    grads.position_embedding.col(t) += d_h.col(t);
  }
}

}  // namespace debias
