#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "debias/model.hpp"
#include "debias/rng.hpp"

namespace debias {

struct SampleOptions {
  double temperature = 0.6;
  double top_p = 0.9;
  int max_new_tokens = 32;
};

// One nucleus draw from a next-token log-probability column. Exposed
// separately so tests can hammer the nucleus property directly.
inline int nucleus_pick(const Eigen::Ref<const Vec>& log_probs, double temperature,
                        double top_p, Rng& rng) {
  if (temperature <= 0.0) throw std::invalid_argument("temperature must be > 0");
  if (top_p <= 0.0 || top_p > 1.0) throw std::invalid_argument("top_p must be in (0, 1]");

  const Eigen::Index n = log_probs.size();
  Vec scaled = log_probs / temperature;
  const double mx = scaled.maxCoeff();
  Vec probs = (scaled.array() - mx).exp();
  probs /= probs.sum();

  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&probs](int a, int b) { return probs(a) > probs(b); });

  // smallest prefix whose mass reaches top_p; always at least one token
  double cum = 0.0;
  std::size_t cut = 0;
  for (; cut < idx.size(); ++cut) {
    cum += probs(idx[cut]);
    if (cum >= top_p) {
      ++cut;
      break;
    }
  }
  if (cut == 0) cut = 1;
  if (cut > idx.size()) cut = idx.size();

  double r = rng.uniform01() * cum;
  for (std::size_t i = 0; i < cut; ++i) {
    r -= probs(idx[i]);
    if (r < 0.0) return idx[i];
  }
  return idx[cut - 1];
}

// Autoregressive nucleus sampling; returns prompt + continuation. Stops at
// EOS or when the sequence hits max_seq_len.
inline TokenSequence sample(const ModelParams& params, const TokenSequence& prompt,
                            const SampleOptions& opts, Rng& rng, int eos_id) {
  if (prompt.length() > params.config.max_seq_len) {
    throw SequenceTooLong(prompt.length(), params.config.max_seq_len);
  }
  TokenSequence seq = prompt;
  for (int produced = 0; produced < opts.max_new_tokens; ++produced) {
    if (seq.length() >= params.config.max_seq_len) break;
    const Mat lp = forward_log_probs(params, seq);
    const int next =
        nucleus_pick(lp.col(seq.length() - 1), opts.temperature, opts.top_p, rng);
    seq.ids.push_back(next);
    if (next == eos_id) break;
  }
  return seq;
}

}  // namespace debias
