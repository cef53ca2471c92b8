#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "debias/model.hpp"

namespace debias {

struct EmptyCorpus : std::runtime_error {
  EmptyCorpus() : std::runtime_error("training corpus is empty") {}
};
struct DivergedLoss : std::runtime_error {
  DivergedLoss() : std::runtime_error("loss became non-finite") {}
};

// ============================================================================
// Adam
// ============================================================================

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers reuse the parameter layout.
struct AdamState {
  ModelParams m;
  ModelParams v;
  long long step = 0;

  explicit AdamState(const ModelConfig& cfg)
      : m(ModelParams::zeros(cfg)), v(ModelParams::zeros(cfg)) {}
};

// Applies one Adam step to tensors whose group passes `include`. group is -1
// for embeddings/head/final norm and the layer index otherwise.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                      const AdamConfig& cfg, const std::function<bool(int)>& include) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v.array().matrix() + (1.0 - cfg.beta2) * g.array().square().matrix();
    auto m_hat = m.array() / bc1;
    auto v_hat = v.array() / bc2;
    p.array() -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
  };

  auto layer_update = [&](LayerParams& p, const LayerParams& g, LayerParams& m,
                          LayerParams& v) {
    update(p.ln1_gain, g.ln1_gain, m.ln1_gain, v.ln1_gain);
    update(p.ln1_bias, g.ln1_bias, m.ln1_bias, v.ln1_bias);
    update(p.attn_q, g.attn_q, m.attn_q, v.attn_q);
    update(p.attn_k, g.attn_k, m.attn_k, v.attn_k);
    update(p.attn_v, g.attn_v, m.attn_v, v.attn_v);
    update(p.attn_out, g.attn_out, m.attn_out, v.attn_out);
    update(p.ln2_gain, g.ln2_gain, m.ln2_gain, v.ln2_gain);
    update(p.ln2_bias, g.ln2_bias, m.ln2_bias, v.ln2_bias);
    update(p.mlp_in, g.mlp_in, m.mlp_in, v.mlp_in);
    update(p.mlp_in_bias, g.mlp_in_bias, m.mlp_in_bias, v.mlp_in_bias);
    update(p.mlp_out, g.mlp_out, m.mlp_out, v.mlp_out);
  };

  if (include(-1)) {
    update(params.token_embedding, grads.token_embedding, state.m.token_embedding,
           state.v.token_embedding);
    update(params.position_embedding, grads.position_embedding, state.m.position_embedding,
           state.v.position_embedding);
    update(params.final_gain, grads.final_gain, state.m.final_gain, state.v.final_gain);
    update(params.final_bias, grads.final_bias, state.m.final_bias, state.v.final_bias);
    update(params.head, grads.head, state.m.head, state.v.head);
  }
  for (int li = 0; li < params.config.n_layers; ++li) {
    if (!include(li)) continue;
    auto i = static_cast<std::size_t>(li);
    layer_update(params.layers[i], grads.layers[i], state.m.layers[i], state.v.layers[i]);
  }
}

// ============================================================================
// Batched cross-entropy gradient
// ============================================================================

// Forward+backward over a batch; gradients are averaged per predicted token.
// Returns (total nll, token count).
inline std::pair<double, long long> batch_gradients(const ModelParams& params,
                                                    const std::vector<const TokenSequence*>& batch,
                                                    ModelParams& grads) {
  long long tokens = 0;
  for (const TokenSequence* seq : batch) tokens += seq->length() - 1;
  if (tokens <= 0) throw EmptyCorpus();
  const double w = 1.0 / static_cast<double>(tokens);

  double nll = 0.0;
  for (const TokenSequence* seq : batch) {
    Activations acts = forward(params, *seq);
    std::vector<CeTarget> targets;
    targets.reserve(static_cast<std::size_t>(seq->length()));
    for (int t = 0; t + 1 < seq->length(); ++t) {
      const int target = seq->ids[static_cast<std::size_t>(t + 1)];
      nll -= acts.log_probs(target, t);
      targets.push_back({t, target, w});
    }
    Mat d_logits = ce_dlogits(acts, targets);
    backward(params, acts, *seq, d_logits, grads);
  }
  return {nll, tokens};
}

inline double corpus_cross_entropy(const ModelParams& params,
                                   const std::vector<TokenSequence>& corpus) {
  double nll = 0.0;
  long long tokens = 0;
  for (const auto& seq : corpus) {
    nll -= sequence_log_likelihood(params, seq);
    tokens += seq.length() - 1;
  }
  return nll / static_cast<double>(tokens);
}

inline void clip_gradients(ModelParams& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for_each_tensor(grads, [&](int, const char*, const auto& t) { sq += t.squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for_each_tensor(grads, [&](int, const char*, auto& t) { t *= s; });
  }
}

// ============================================================================
// Full training
// ============================================================================

struct TrainOptions {
  int epochs = 30;
  int batch_size = 16;
  AdamConfig adam;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // corpus mean per-token CE after each epoch
};

inline ModelParams train(const ModelParams& start, const std::vector<TokenSequence>& corpus,
                         const TrainOptions& opts, TrainReport* report = nullptr) {
  if (corpus.empty()) throw EmptyCorpus();
  ModelParams params = start;
  AdamState adam(params.config);
  Rng rng(opts.seed);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  auto all = [](int) { return true; };

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(opts.batch_size)) {
      std::vector<const TokenSequence*> batch;
      for (std::size_t i = at; i < order.size() && i < at + static_cast<std::size_t>(opts.batch_size); ++i) {
        batch.push_back(&corpus[order[i]]);
      }
      ModelParams grads = ModelParams::zeros(params.config);
      auto [nll, tokens] = batch_gradients(params, batch, grads);
      if (!std::isfinite(nll)) throw DivergedLoss();
      clip_gradients(grads, opts.clip_norm);
      adam_step(params, grads, adam, opts.adam, all);
    }
    if (report) {
      const double ce = corpus_cross_entropy(params, corpus);
      if (!std::isfinite(ce)) throw DivergedLoss();
      report->epoch_loss.push_back(ce);
    }
  }
  return params;
}

// ============================================================================
// Block-coordinate fine-tuning
// ============================================================================

// One transformer layer at a time receives updates. The active block advances
// every `block_switch_every` optimizer steps, cycling from layer 0 upward.
// Embeddings, head and final norm ride along with every step by default;
// without that, the frozen output head caps how far the tilted distribution
// can move. Layer windows stay exclusive either way.
struct FinetuneOptions {
  double lr = 1e-4;
  int block_switch_every = 50;
  int epochs = 3;
  int batch_size = 16;
  double clip_norm = 1.0;
  bool train_embeddings = true;
  std::uint64_t seed = 0;
};

inline ModelParams finetune_blockwise(const ModelParams& start,
                                      const std::vector<TokenSequence>& pool,
                                      const FinetuneOptions& opts) {
  if (pool.empty()) throw EmptyCorpus();
  ModelParams params = start;
  AdamState adam(params.config);
  AdamConfig acfg;
  acfg.lr = opts.lr;
  Rng rng(opts.seed);

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);

  long long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(opts.batch_size)) {
      std::vector<const TokenSequence*> batch;
      for (std::size_t i = at; i < order.size() && i < at + static_cast<std::size_t>(opts.batch_size); ++i) {
        batch.push_back(&pool[order[i]]);
      }
      const int active =
          static_cast<int>((step / opts.block_switch_every) % params.config.n_layers);
      ModelParams grads = ModelParams::zeros(params.config);
      auto [nll, tokens] = batch_gradients(params, batch, grads);
      if (!std::isfinite(nll)) throw DivergedLoss();
      clip_gradients(grads, opts.clip_norm);
      const bool embeds = opts.train_embeddings;
      adam_step(params, grads, adam, acfg, [active, embeds](int group) {
        return group == active || (embeds && group == -1);
      });
      step += 1;
    }
  }
  return params;
}

}  // namespace debias
