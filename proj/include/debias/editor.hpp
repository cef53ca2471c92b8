#pragma once

#include <Eigen/Cholesky>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/model.hpp"
#include "debias/triples.hpp"
#include "debias/vocab.hpp"

namespace debias {

struct InsufficientSamples : std::runtime_error {
  InsufficientSamples() : std::runtime_error("too few sequences for covariance estimate") {}
};
struct EmptyPrompt : std::runtime_error {
  EmptyPrompt() : std::runtime_error("subject prompt tokenizes to nothing") {}
};
struct SolverDiverged : std::runtime_error {
  SolverDiverged() : std::runtime_error("edit value solver produced non-finite values") {}
};
struct TargetNotImproved : std::runtime_error {
  explicit TargetNotImproved(double gain, double margin)
      : std::runtime_error("target log-probability gain " + std::to_string(gain) +
                           " below margin " + std::to_string(margin)) {}
};
struct SingularSystem : std::runtime_error {
  SingularSystem() : std::runtime_error("regularized covariance system is singular") {}
};
struct NotNeutralized : std::runtime_error {
  NotNeutralized() : std::runtime_error("edit requested for a non-neutralized triple") {}
};

// ============================================================================
// Prompt rendering
// ============================================================================

// {s} is replaced by the subject, {r} by the relation with underscores as
// spaces. Extractor-produced templates inline the relation words already and
// keep only {s}; "{s} {r}" is the fallback when no rule provenance exists.
struct RenderedPrompt {
  std::string text;
  int subject_last_word = -1;  // 0-based word index of the subject's last word
};

inline RenderedPrompt render_prompt(const std::string& prompt_template,
                                    const std::string& subject, const std::string& relation) {
  std::string relation_words = relation;
  std::replace(relation_words.begin(), relation_words.end(), '_', ' ');

  RenderedPrompt out;
  std::vector<std::string> words;
  for (const auto& w : normalize_words(prompt_template)) {
    if (w == "{s}") {
      for (const auto& sw : normalize_words(subject)) words.push_back(sw);
      out.subject_last_word = static_cast<int>(words.size()) - 1;
    } else if (w == "{r}") {
      for (const auto& rw : normalize_words(relation_words)) words.push_back(rw);
    } else {
      words.push_back(w);
    }
  }
  if (out.subject_last_word < 0) {
    // template without a subject slot: treat the last word as the anchor
    out.subject_last_word = static_cast<int>(words.size()) - 1;
  }
  for (const auto& w : words) {
    if (!out.text.empty()) out.text.push_back(' ');
    out.text += w;
  }
  if (out.text.empty()) throw EmptyPrompt();
  return out;
}

// ============================================================================
// Covariance of inner MLP activations
// ============================================================================

struct CovarianceStats {
  Mat C;  // d_ff x d_ff, sum of k k^T over sampled keys
  long long sample_count = 0;
};

// Expands sequences into their prefixes so that last-token covariance samples
// cover every position, not just sequence ends. Feed the result to
// estimate_covariance when the edit keys live mid-sentence.
inline std::vector<TokenSequence> prefix_expansion(const std::vector<TokenSequence>& corpus,
                                                   std::size_t max_sequences) {
  std::vector<TokenSequence> prefixes;
  for (const auto& seq : corpus) {
    for (int cut = 2; cut <= seq.length(); ++cut) {
      TokenSequence p;
      p.ids.assign(seq.ids.begin(), seq.ids.begin() + cut);
      prefixes.push_back(std::move(p));
      if (prefixes.size() >= max_sequences) return prefixes;
    }
  }
  return prefixes;
}

// Accumulates k k^T over the final-token inner MLP activation of every corpus
// sequence at the given layer. Unnormalized; additivity over corpora holds.
inline CovarianceStats estimate_covariance(const ModelParams& params, int layer,
                                           const std::vector<TokenSequence>& corpus) {
  if (layer < 0 || layer >= params.config.n_layers) throw LayerOutOfRange(layer);
  if (static_cast<int>(corpus.size()) < params.config.d_ff / 4) throw InsufficientSamples();
  CovarianceStats stats;
  stats.C = Mat::Zero(params.config.d_ff, params.config.d_ff);
  for (const auto& seq : corpus) {
    Activations acts = forward(params, seq);
    const Vec k = acts.layers[static_cast<std::size_t>(layer)].mlp_act.col(seq.length() - 1);
    stats.C.noalias() += k * k.transpose();
    stats.sample_count += 1;
  }
  return stats;
}

// ============================================================================
// Keys
// ============================================================================

// Inner MLP activation at the final token of the prompt. Callers pass a
// prompt whose last word is the subject's last word.
inline Vec compute_key(const ModelParams& params, int layer, const std::string& subject_prompt,
                       const Vocabulary& vocab) {
  if (layer < 0 || layer >= params.config.n_layers) throw LayerOutOfRange(layer);
  std::vector<std::string> words = normalize_words(subject_prompt);
  if (words.empty()) throw EmptyPrompt();
  const TokenSequence seq = tokenize(subject_prompt, vocab);
  Activations acts = forward(params, seq);
  return acts.layers[static_cast<std::size_t>(layer)].mlp_act.col(seq.length() - 1);
}

// ============================================================================
// Target value solver
// ============================================================================

struct SolverOptions {
  int steps = 100;
  double lr = 0.5;
  double target_weight = 50.0;  // weight of the target term vs the L2 anchor
  double margin = 1.0;          // required gain in log p(target), nats
  // alternative success condition: stop once log p(target) clears this.
  // +inf disables it (pure margin semantics); pipelines set it so the target
  // becomes dominant at the prompt no matter how low it started.
  double target_floor = std::numeric_limits<double>::infinity();
  // additional pressure pushing the original object down (0 disables); the
  // none-raising objective alone leaves the object afloat when the reachable
  // none probability saturates below dominance
  double suppress_weight = 0.0;
  // when suppression is on, success additionally requires the object to have
  // dropped by this many nats; keeps the solved value minimal instead of
  // driving the target to dominance
  double suppress_margin = 0.0;
};

struct EditRequest {
  Triple triple;  // neutralized: object == "none"
  std::string original_object;
  int layer = 1;
  std::string prompt_template = "{s} {r}";
  SolverOptions solver;
};

namespace editor_detail {

inline double target_log_prob(const ModelParams& params, const TokenSequence& seq,
                              int target_id, const std::optional<MlpOverride>& ov) {
  Activations acts = forward(params, seq, ov);
  return acts.log_probs(target_id, seq.length() - 1);
}

}  // namespace editor_detail

struct SolvedValue {
  Vec v_star;
  double log_prob_before = 0.0;
  double log_prob_after = 0.0;
  int key_position = -1;
  TokenSequence prompt_tokens;
};

// Optimizes the MLP output vector at the key slot so the rendered prompt
// assigns the none token at least `margin` more log-probability. The key slot
// is the final prompt token: at this depth the fact-recall state that decides
// the object lives there, and it is also where the covariance statistics are
// gathered. Substitution happens through a forward hook; gradients flow only
// into the injected vector.
inline SolvedValue solve_target_value(const ModelParams& params, const EditRequest& request,
                                      const Vocabulary& vocab) {
  if (request.layer < 0 || request.layer >= params.config.n_layers) {
    throw LayerOutOfRange(request.layer);
  }
  const RenderedPrompt prompt =
      render_prompt(request.prompt_template, request.triple.subject, request.triple.relation);
  const TokenSequence seq = tokenize(prompt.text, vocab);
  const int key_pos = seq.length() - 1;
  const int target = vocab.none;

  Activations base_acts = forward(params, seq);
  const Vec v0 = base_acts.layers[static_cast<std::size_t>(request.layer)].mlp_out.col(key_pos);
  const double logp0 = base_acts.log_probs(target, seq.length() - 1);

  // first token of the original object, if it is known and suppression is on
  int suppress_id = -1;
  if (request.solver.suppress_weight > 0.0 && !request.original_object.empty()) {
    const auto object_words = normalize_words(request.original_object);
    if (!object_words.empty()) {
      const int id = vocab.lookup(object_words.front());
      if (id != vocab.unk) suppress_id = id;
    }
  }

  SolvedValue out;
  out.key_position = key_pos;
  out.prompt_tokens = seq;
  out.log_prob_before = logp0;

  // already satisfied: target is argmax with near-certain probability, or
  // above the configured floor; an active suppression margin keeps the solver
  // running until the object has actually fallen
  Eigen::Index argmax;
  base_acts.log_probs.col(seq.length() - 1).maxCoeff(&argmax);
  const bool object_pending = suppress_id >= 0 && request.solver.suppress_margin > 0.0;
  if (!object_pending && ((static_cast<int>(argmax) == target && logp0 > -0.1) ||
                          logp0 >= request.solver.target_floor)) {
    out.v_star = v0;
    out.log_prob_after = logp0;
    return out;
  }

  const double obj_logp0 =
      suppress_id >= 0 ? base_acts.log_probs(suppress_id, seq.length() - 1) : 0.0;

  Vec v = v0;
  Vec m = Vec::Zero(v.size()), s = Vec::Zero(v.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double logp = logp0;
  bool reached = false;

  auto satisfied = [&](const Activations& acts, double logp_now) {
    const bool none_ok = (logp_now - logp0 >= request.solver.margin) ||
                         (logp_now >= request.solver.target_floor);
    if (!none_ok) return false;
    if (suppress_id < 0 || request.solver.suppress_margin <= 0.0) return true;
    const double obj_now = acts.log_probs(suppress_id, seq.length() - 1);
    return obj_now - obj_logp0 <= -request.solver.suppress_margin;
  };

  for (int step = 1; step <= request.solver.steps; ++step) {
    MlpOverride ov{request.layer, key_pos, v};
    Activations acts = forward(params, seq, ov);
    logp = acts.log_probs(target, seq.length() - 1);
    if (!std::isfinite(logp)) throw SolverDiverged();
    if (satisfied(acts, logp)) {
      reached = true;
      break;
    }

    // d(-tw*logp_target + sw*logp_object)/d logits
    const double tw = request.solver.target_weight;
    const double sw = suppress_id >= 0 ? request.solver.suppress_weight : 0.0;
    Mat d_logits = Mat::Zero(params.config.vocab_size, seq.length());
    d_logits.col(seq.length() - 1) =
        (tw - sw) * acts.log_probs.col(seq.length() - 1).array().exp().matrix();
    d_logits(target, seq.length() - 1) -= tw;
    if (suppress_id >= 0) d_logits(suppress_id, seq.length() - 1) += sw;

    ModelParams grads = ModelParams::zeros(params.config);
    Vec dv = Vec::Zero(v.size());
    backward(params, acts, seq, d_logits, grads, ov, &dv);

    Vec g = dv + (v - v0);  // objective weights are folded into d_logits
    if (!g.allFinite()) throw SolverDiverged();
    m = beta1 * m + (1.0 - beta1) * g;
    s = beta2 * s.array().matrix() + (1.0 - beta2) * g.array().square().matrix();
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    v.array() -= request.solver.lr * (m.array() / bc1) / ((s.array() / bc2).sqrt() + eps);
    if (!v.allFinite()) throw SolverDiverged();
  }

  if (!reached) {
    MlpOverride ov{request.layer, key_pos, v};
    Activations acts = forward(params, seq, ov);
    logp = acts.log_probs(target, seq.length() - 1);
    if (!satisfied(acts, logp)) {
      throw TargetNotImproved(logp - logp0, request.solver.margin);
    }
  }
  out.v_star = v;
  out.log_prob_after = logp;
  return out;
}

// ============================================================================
// Closed-form rank-one update
// ============================================================================

// W' = W + (v* - W k) ((C + lambda I)^-1 k)^T / (k^T (C + lambda I)^-1 k).
// Exactly one matrix changes; W' k = v* holds by construction.
inline ModelParams apply_edit(const ModelParams& params, int layer, const Vec& key,
                              const Vec& v_star, const CovarianceStats& cov, double lambda) {
  if (layer < 0 || layer >= params.config.n_layers) throw LayerOutOfRange(layer);
  if (lambda <= 0.0) throw std::invalid_argument("lambda must be positive");
  if (key.size() != params.config.d_ff || v_star.size() != params.config.d_model) {
    throw std::invalid_argument("edit key/value dimensions do not match the model");
  }

  Mat reg = cov.C;
  reg.diagonal().array() += lambda;
  Eigen::LDLT<Mat> solver(reg);
  if (solver.info() != Eigen::Success) throw SingularSystem();
  const Vec u = solver.solve(key);
  const double denom = key.dot(u);
  if (!std::isfinite(denom) || std::abs(denom) < 1e-300) throw SingularSystem();

  ModelParams out = params;
  Mat& w = out.layers[static_cast<std::size_t>(layer)].mlp_out;
  const Vec residual = v_star - w * key;
  w.noalias() += residual * (u.transpose() / denom);
  return out;
}

// ============================================================================
// Sequential pipeline and probes
// ============================================================================

struct EditReport {
  Triple triple;
  std::string original_object;
  std::string prompt;
  double pre_log_prob_object = 0.0;
  double post_log_prob_object = 0.0;
  double pre_log_prob_none = 0.0;
  double post_log_prob_none = 0.0;
  double delta_w_frobenius = 0.0;
  double probe_ppl_delta = 0.0;  // zero when no probe corpus is configured
  bool applied = false;
  std::string failure;  // empty when applied
};

struct EditPipelineOptions {
  int layer = 1;
  double lambda_scale = 1e-2;  // lambda = scale * trace(C) / d_ff
  SolverOptions solver;
  // context prefixes prepended to the prompt when averaging keys; empty
  // means the bare prompt key alone
  std::vector<std::string> key_prefixes;
  // after an edit is applied its key joins the working covariance with this
  // weight (times the mean eigenvalue of the original C), so later edits
  // solve around it instead of overwriting it; 0 disables
  double protect_scale = 25.0;
  bool skip_failed = true;  // record solver failures and continue
  std::vector<TokenSequence> probe_corpus;  // unrelated sequences for the
                                            // per-edit perplexity delta
};

// Conditional log-likelihood of `continuation` appended after `prompt_text`.
inline double continuation_log_prob(const ModelParams& params, const Vocabulary& vocab,
                                    const std::string& prompt_text,
                                    const std::string& continuation) {
  TokenSequence seq = tokenize(prompt_text, vocab);
  const int prompt_len = seq.length();
  for (const auto& w : normalize_words(continuation)) seq.ids.push_back(vocab.lookup(w));
  const Mat lp = forward_log_probs(params, seq);
  double total = 0.0;
  for (int t = prompt_len; t < seq.length(); ++t) {
    total += lp(seq.ids[static_cast<std::size_t>(t)], t - 1);
  }
  return total;
}

inline double mean_token_ppl(const ModelParams& params, const std::vector<TokenSequence>& corpus) {
  double nll = 0.0;
  long long tokens = 0;
  for (const auto& seq : corpus) {
    nll -= sequence_log_likelihood(params, seq);
    tokens += seq.length() - 1;
  }
  return std::exp(nll / static_cast<double>(tokens));
}

struct EditPipelineResult {
  ModelParams params;
  std::vector<EditReport> reports;
  bool aborted = false;       // a non-finite solver state stopped the run;
  std::string abort_reason;   // partial reports are preserved
};

// Edits are applied one at a time, each against the partially edited model.
// Keys at the edit layer are unaffected by earlier edits (they only change
// mlp_out), so the covariance estimate stays valid throughout.
inline EditPipelineResult edit_pipeline(const ModelParams& start,
                                        const std::vector<EditRequest>& requests,
                                        const CovarianceStats& cov, const Vocabulary& vocab,
                                        const EditPipelineOptions& opts) {
  EditPipelineResult result{start, {}};
  const double mean_eig = cov.C.trace() / static_cast<double>(start.config.d_ff);
  const double lambda = opts.lambda_scale * cov.C.trace() / static_cast<double>(start.config.d_ff);
  CovarianceStats working = cov;

  for (const auto& request : requests) {
    if (request.triple.object != Vocabulary::kNone) throw NotNeutralized();

    const RenderedPrompt prompt =
        render_prompt(request.prompt_template, request.triple.subject, request.triple.relation);
    EditReport report;
    report.triple = request.triple;
    report.original_object = request.original_object;
    report.prompt = prompt.text;
    report.pre_log_prob_object = request.original_object.empty()
                                     ? 0.0
                                     : continuation_log_prob(result.params, vocab, prompt.text,
                                                             request.original_object);
    report.pre_log_prob_none =
        continuation_log_prob(result.params, vocab, prompt.text, Vocabulary::kNone);
    const double ppl_before =
        opts.probe_corpus.empty() ? 0.0 : mean_token_ppl(result.params, opts.probe_corpus);

    try {
      EditRequest staged = request;
      staged.layer = opts.layer;
      const SolvedValue solved = solve_target_value(result.params, staged, vocab);

      // key at the end of the rendered prompt, optionally averaged with the
      // same prompt under context prefixes for position robustness
      Vec key = compute_key(result.params, opts.layer, prompt.text, vocab);
      if (!opts.key_prefixes.empty()) {
        for (const auto& prefix : opts.key_prefixes) {
          key += compute_key(result.params, opts.layer, prefix + " . " + prompt.text, vocab);
        }
        key /= static_cast<double>(opts.key_prefixes.size() + 1);
      }

      const Mat w_before = result.params.layers[static_cast<std::size_t>(opts.layer)].mlp_out;
      result.params = apply_edit(result.params, opts.layer, key, solved.v_star, working, lambda);
      report.delta_w_frobenius =
          (result.params.layers[static_cast<std::size_t>(opts.layer)].mlp_out - w_before).norm();
      report.applied = true;
      if (opts.protect_scale > 0.0) {
        const double knorm2 = key.squaredNorm();
        if (knorm2 > 0.0) {
          working.C.noalias() +=
              (opts.protect_scale * mean_eig / knorm2) * (key * key.transpose());
        }
      }
    } catch (const SolverDiverged& e) {
      report.failure = "SolverDiverged";
      result.reports.push_back(report);
      result.aborted = true;
      result.abort_reason = e.what();
      return result;
    } catch (const TargetNotImproved& e) {
      if (!opts.skip_failed) throw;
      report.failure = e.what();
    } catch (const SingularSystem& e) {
      if (!opts.skip_failed) throw;
      report.failure = e.what();
    }

    report.post_log_prob_object = request.original_object.empty()
                                      ? 0.0
                                      : continuation_log_prob(result.params, vocab, prompt.text,
                                                              request.original_object);
    report.post_log_prob_none =
        continuation_log_prob(result.params, vocab, prompt.text, Vocabulary::kNone);
    if (!opts.probe_corpus.empty()) {
      report.probe_ppl_delta = mean_token_ppl(result.params, opts.probe_corpus) - ppl_before;
    }
    result.reports.push_back(report);
  }
  return result;
}

// ============================================================================
// Knowledge traces
// ============================================================================

struct TraceProbeEntry {
  std::string prompt;
  double delta_log_prob_object = 0.0;  // after minus before
};

// Checks whether the original object survives under paraphrase prompts.
// `triple` carries the original (non-neutralized) object. Paraphrases may use
// {s} and {r} placeholders.
inline std::vector<TraceProbeEntry> knowledge_trace_probe(
    const ModelParams& before, const ModelParams& after, const Triple& triple,
    const std::vector<std::string>& paraphrases, const Vocabulary& vocab) {
  if (paraphrases.empty()) throw std::invalid_argument("paraphrase list is empty");
  std::vector<TraceProbeEntry> out;
  out.reserve(paraphrases.size());
  for (const auto& tmpl : paraphrases) {
    const RenderedPrompt prompt = render_prompt(tmpl, triple.subject, triple.relation);
    const double pre = continuation_log_prob(before, vocab, prompt.text, triple.object);
    const double post = continuation_log_prob(after, vocab, prompt.text, triple.object);
    out.push_back({prompt.text, post - pre});
  }
  return out;
}

}  // namespace debias
