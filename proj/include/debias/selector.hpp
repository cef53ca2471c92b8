#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "debias/model.hpp"
#include "debias/train.hpp"

namespace debias {

struct ConfigMismatch : std::runtime_error {
  ConfigMismatch() : std::runtime_error("base and fine-tuned models disagree on config") {}
};
struct EmptyPool : std::runtime_error {
  EmptyPool() : std::runtime_error("candidate pool is empty") {}
};
struct KOutOfRange : std::runtime_error {
  explicit KOutOfRange(std::size_t k, std::size_t n)
      : std::runtime_error("k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]") {}
};
struct TooShort : std::runtime_error {
  TooShort() : std::runtime_error("knee detection needs at least 3 points") {}
};
struct FlatCurve : std::runtime_error {
  FlatCurve() : std::runtime_error("curve has no knee (flat or straight)") {}
};
struct DegenerateClusterMeans : std::runtime_error {
  DegenerateClusterMeans() : std::runtime_error("cluster means coincide") {}
};
struct DimensionMismatch : std::runtime_error {
  DimensionMismatch() : std::runtime_error("embedding dimensions differ") {}
};

// ============================================================================
// Likelihood-ratio scores
// ============================================================================

// Per-example record: log-likelihood under the persona-tilted model, under
// the base model, and their difference (the selection score).
struct DBScore {
  long long example_id = 0;
  double ll_persona = 0.0;
  double ll_base = 0.0;
  double db = 0.0;
};

inline std::vector<DBScore> score_db(const ModelParams& base, const ModelParams& finetuned,
                                     const std::vector<TokenSequence>& pool,
                                     const std::vector<long long>* ids = nullptr) {
  if (pool.empty()) throw EmptyPool();
  if (!(base.config == finetuned.config)) throw ConfigMismatch();
  std::vector<DBScore> out;
  out.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    DBScore s;
    s.example_id = ids ? (*ids)[i] : static_cast<long long>(i);
    s.ll_persona = sequence_log_likelihood(finetuned, pool[i]);
    s.ll_base = sequence_log_likelihood(base, pool[i]);
    s.db = s.ll_persona - s.ll_base;
    if (!std::isfinite(s.ll_persona) || !std::isfinite(s.ll_base)) {
      throw DivergedLoss();
    }
    out.push_back(s);
  }
  return out;
}

// ============================================================================
// Ranking and selection
// ============================================================================

struct SelectionResult {
  std::vector<DBScore> ranked;          // db descending, ties by ascending id
  std::size_t k = 0;
  std::vector<long long> selected_ids;  // first k ids of `ranked`
};

inline SelectionResult rank_and_select(std::vector<DBScore> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) throw KOutOfRange(k, scores.size());
  std::sort(scores.begin(), scores.end(), [](const DBScore& a, const DBScore& b) {
    if (a.db != b.db) return a.db > b.db;
    return a.example_id < b.example_id;
  });
  SelectionResult r;
  r.ranked = std::move(scores);
  r.k = k;
  r.selected_ids.reserve(k);
  for (std::size_t i = 0; i < k; ++i) r.selected_ids.push_back(r.ranked[i].example_id);
  return r;
}

// ============================================================================
// Knee detection
// ============================================================================

// Index (1-based count) of the point farthest from the chord through the
// first and last points of the descending score curve. Straight or flat
// curves have no knee.
inline std::size_t detect_knee(const std::vector<double>& ranked_db) {
  const std::size_t n = ranked_db.size();
  if (n < 3) throw TooShort();

  double lo = ranked_db[0], hi = ranked_db[0];
  for (double v : ranked_db) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  if (range <= 0.0) throw FlatCurve();

  // perpendicular distance to the chord, up to the constant chord length
  const double x1 = 1.0, y1 = ranked_db.front();
  const double x2 = static_cast<double>(n), y2 = ranked_db.back();
  const double dx = x2 - x1, dy = y2 - y1;
  const double chord = std::sqrt(dx * dx + dy * dy);

  double best = -1.0;
  std::size_t best_idx = 1;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double px = static_cast<double>(i + 1) - x1;
    const double py = ranked_db[i] - y1;
    const double dist = std::abs(px * dy - py * dx) / chord;
    if (dist > best) {
      best = dist;
      best_idx = i + 1;  // 1-based
    }
  }
  if (best < 1e-9 * range) throw FlatCurve();
  return best_idx;
}

// ============================================================================
// Entanglement score
// ============================================================================

// Within-set spread over between-set mean separation in embedding space.
// High values mean the fair and biased sets are hard to pull apart.
inline double entanglement_score(const std::vector<Vec>& fair, const std::vector<Vec>& biased) {
  if (fair.empty() || biased.empty()) {
    throw std::invalid_argument("entanglement score needs non-empty sets");
  }
  const Eigen::Index dim = fair.front().size();
  for (const auto& v : fair) {
    if (v.size() != dim) throw DimensionMismatch();
  }
  for (const auto& v : biased) {
    if (v.size() != dim) throw DimensionMismatch();
  }

  Vec mu_f = Vec::Zero(dim), mu_b = Vec::Zero(dim);
  for (const auto& v : fair) mu_f += v;
  for (const auto& v : biased) mu_b += v;
  Vec mu = (mu_f + mu_b) / static_cast<double>(fair.size() + biased.size());
  mu_f /= static_cast<double>(fair.size());
  mu_b /= static_cast<double>(biased.size());

  double within_f = 0.0, within_b = 0.0;
  for (const auto& v : fair) within_f += (v - mu_f).squaredNorm();
  for (const auto& v : biased) within_b += (v - mu_b).squaredNorm();
  within_f /= static_cast<double>(fair.size());
  within_b /= static_cast<double>(biased.size());

  const double denom = 0.5 * ((mu_f - mu).squaredNorm() + (mu_b - mu).squaredNorm());
  if (denom < 1e-12) throw DegenerateClusterMeans();
  return (within_f + within_b) / denom;
}

}  // namespace debias
