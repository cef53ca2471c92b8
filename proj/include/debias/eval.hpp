#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "debias/io.hpp"
#include "debias/model.hpp"
#include "debias/persona.hpp"
#include "debias/rng.hpp"

namespace debias {

struct EmptyTask : std::runtime_error {
  EmptyTask() : std::runtime_error("task has no items") {}
};
struct LengthMismatch : std::runtime_error {
  LengthMismatch() : std::runtime_error("score vectors have different lengths") {}
};
struct EmptyRecords : std::runtime_error {
  EmptyRecords() : std::runtime_error("no evaluation records") {}
};
struct ParseError : std::runtime_error {
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what) {}
};

// ============================================================================
// Tasks
// ============================================================================

struct TaskItem {
  long long id = 0;
  std::string query;
  std::vector<std::string> choices;
  int answer_index = 0;
};

struct Task {
  std::string name;
  std::vector<TaskItem> items;
  enum Scoring { Accuracy, Score } scoring = Accuracy;
  int shots = 0;

  void validate() const {
    if (items.empty()) throw EmptyTask();
    for (const auto& it : items) {
      if (scoring == Accuracy &&
          (it.choices.empty() || it.answer_index < 0 ||
           it.answer_index >= static_cast<int>(it.choices.size()))) {
        throw std::invalid_argument("accuracy item needs a valid answer choice: task " + name);
      }
    }
  }
};

// ============================================================================
// Evaluation
// ============================================================================

// Answer extraction is by highest conditional likelihood of the choice
// continuation, ties broken by lowest choice index; deterministic, so the rng
// argument only matters for sampling-style scorers added later.
struct EvalOutcome {
  double score = 0.0;
  std::vector<double> per_item;  // 0/1 per scored item
};

inline EvalOutcome evaluate_items(const ModelParams& params, const Vocabulary& vocab,
                                  const Task& task, const InductionPrompt& context) {
  task.validate();

  // optional k-shot context drawn from the task's own leading items
  std::string shot_prefix;
  std::size_t first_scored = 0;
  if (task.shots > 0) {
    first_scored = std::min<std::size_t>(static_cast<std::size_t>(task.shots), task.items.size() - 1);
    for (std::size_t i = 0; i < first_scored; ++i) {
      if (!shot_prefix.empty()) shot_prefix += " . ";
      shot_prefix += task.items[i].query + " " +
                     task.items[i].choices[static_cast<std::size_t>(task.items[i].answer_index)];
    }
  }

  EvalOutcome out;
  for (std::size_t i = first_scored; i < task.items.size(); ++i) {
    const auto& item = task.items[i];
    std::string query = item.query;
    if (!shot_prefix.empty()) query = shot_prefix + " . " + query;
    InductionPrompt prompt{context.hint, context.demonstrations, query};
    const std::string prefix = prompt.render();

    const TokenSequence prefix_tokens = tokenize(prefix, vocab);
    double best = -std::numeric_limits<double>::infinity();
    int best_idx = 0;
    for (std::size_t c = 0; c < item.choices.size(); ++c) {
      TokenSequence seq = prefix_tokens;
      for (const auto& w : normalize_words(item.choices[c])) seq.ids.push_back(vocab.lookup(w));
      const Mat lp = forward_log_probs(params, seq);
      double ll = 0.0;
      for (int t = prefix_tokens.length(); t < seq.length(); ++t) {
        ll += lp(seq.ids[static_cast<std::size_t>(t)], t - 1);
      }
      if (ll > best) {
        best = ll;
        best_idx = static_cast<int>(c);
      }
    }
    out.per_item.push_back(best_idx == item.answer_index ? 1.0 : 0.0);
  }
  if (out.per_item.empty()) throw EmptyTask();
  double total = 0.0;
  for (double s : out.per_item) total += s;
  out.score = total / static_cast<double>(out.per_item.size());
  return out;
}

inline double evaluate(const ModelParams& params, const Vocabulary& vocab, const Task& task,
                       const InductionPrompt& context) {
  return evaluate_items(params, vocab, task, context).score;
}

// ============================================================================
// Metrics
// ============================================================================

inline double rmse(const std::vector<double>& s, const std::vector<double>& s_prime) {
  if (s.size() != s_prime.size() || s.empty()) throw LengthMismatch();
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double d = s[i] - s_prime[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(s.size()));
}

struct BiasVerdict {
  double mean_squared_gap = 0.0;
  double epsilon = 0.0;
  bool biased = false;  // mean squared gap >= epsilon
};

inline BiasVerdict implicit_bias_test(const std::vector<double>& s,
                                      const std::vector<double>& s_prime, double epsilon) {
  if (s.size() != s_prime.size() || s.empty()) throw LengthMismatch();
  if (epsilon <= 0.0) throw std::invalid_argument("epsilon must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double d = s[i] - s_prime[i];
    acc += d * d;
  }
  BiasVerdict v;
  v.mean_squared_gap = acc / static_cast<double>(s.size());
  v.epsilon = epsilon;
  v.biased = v.mean_squared_gap >= epsilon;
  return v;
}

// Mean over items of the worse of the two drawdowns (default and induced).
// Negative when removal improved both conditions.
inline double amsd(const std::vector<double>& s, const std::vector<double>& s_prime,
                   const std::vector<double>& s_hat, const std::vector<double>& s_hat_prime) {
  if (s.size() != s_prime.size() || s.size() != s_hat.size() ||
      s.size() != s_hat_prime.size() || s.empty()) {
    throw LengthMismatch();
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    acc += std::max(s[i] - s_hat[i], s_prime[i] - s_hat_prime[i]);
  }
  return acc / static_cast<double>(s.size());
}

// ============================================================================
// Records and reports
// ============================================================================

// One scored unit: the four conditions of a single task item (or any other
// aggregation unit a caller chooses). Scores live on the [0, 1] scale.
struct EvalRecord {
  std::string bias_source;
  std::string task;
  long long unit = 0;
  double s = 0.0;            // default prompting, before removal
  double s_prime = 0.0;      // induced prompting, before removal
  double s_hat = 0.0;        // default prompting, after removal
  double s_hat_prime = 0.0;  // induced prompting, after removal
};

struct ReportRow {
  std::string bias_source;
  std::string task;
  double rmse_pre = 0.0;
  double rmse_post = 0.0;
  double amsd_value = 0.0;
  bool biased_pre = false;
  bool biased_post = false;
};

struct Report {
  double epsilon = 0.0;
  std::vector<ReportRow> rows;

  json to_json() const {
    json rows_json = json::array();
    for (const auto& r : rows) {
      rows_json.push_back({{"bias_source", r.bias_source},
                           {"task", r.task},
                           {"rmse_pre", r.rmse_pre},
                           {"rmse_post", r.rmse_post},
                           {"amsd", r.amsd_value},
                           {"biased_pre", r.biased_pre},
                           {"biased_post", r.biased_post}});
    }
    return {{"epsilon", epsilon}, {"rows", rows_json}};
  }

  std::string to_text() const {
    std::ostringstream out;
    out << std::left << std::setw(16) << "bias_source" << std::setw(20) << "task"
        << std::right << std::setw(10) << "rmse_pre" << std::setw(10) << "rmse_post"
        << std::setw(10) << "amsd" << std::setw(8) << "pre?" << std::setw(8) << "post?"
        << "\n";
    for (const auto& r : rows) {
      out << std::left << std::setw(16) << r.bias_source << std::setw(20) << r.task
          << std::right << std::fixed << std::setprecision(4) << std::setw(10) << r.rmse_pre
          << std::setw(10) << r.rmse_post << std::setw(10) << r.amsd_value << std::setw(8)
          << (r.biased_pre ? "yes" : "no") << std::setw(8) << (r.biased_post ? "yes" : "no")
          << "\n";
    }
    return out.str();
  }
};

inline Report build_report(const std::vector<EvalRecord>& records, double epsilon) {
  if (records.empty()) throw EmptyRecords();
  // group by (bias_source, task) in first-appearance order
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<const EvalRecord*>> groups;
  for (const auto& r : records) {
    auto key = std::make_pair(r.bias_source, r.task);
    auto [it, fresh] = groups.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.push_back(&r);
  }

  Report report;
  report.epsilon = epsilon;
  for (const auto& key : order) {
    const auto& group = groups[key];
    std::vector<double> s, sp, sh, shp;
    for (const EvalRecord* r : group) {
      s.push_back(r->s);
      sp.push_back(r->s_prime);
      sh.push_back(r->s_hat);
      shp.push_back(r->s_hat_prime);
    }
    ReportRow row;
    row.bias_source = key.first;
    row.task = key.second;
    row.rmse_pre = rmse(s, sp);
    row.rmse_post = rmse(sh, shp);
    row.amsd_value = amsd(s, sp, sh, shp);
    row.biased_pre = implicit_bias_test(s, sp, epsilon).biased;
    row.biased_post = implicit_bias_test(sh, shp, epsilon).biased;
    report.rows.push_back(row);
  }
  return report;
}

// ============================================================================
// Dataset ingestion
// ============================================================================

struct PoolEntry {
  long long id = 0;
  std::string text;
};

enum class DatasetFormat { JsonlText, JsonlPairs, McTask };

using IngestedDataset = std::variant<std::vector<PoolEntry>, Task>;

// jsonl-text: {id, text}, one per line.
// jsonl-pairs: {id, sent_more, sent_less, bias_type}; only the more
//   stereotypical sentence enters the pool, other annotations are ignored.
// mc-task: {id, query, choices[], answer_index}.
inline IngestedDataset ingest_dataset(const std::string& path, DatasetFormat format) {
  const auto lines = read_lines(path);
  std::vector<PoolEntry> pool;
  Task task;
  task.name = std::filesystem::path(path).stem().string();

  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      throw ParseError(path, i + 1, e.what());
    }
    try {
      switch (format) {
        case DatasetFormat::JsonlText:
          pool.push_back({j.at("id").get<long long>(), j.at("text").get<std::string>()});
          break;
        case DatasetFormat::JsonlPairs:
          pool.push_back({j.at("id").get<long long>(), j.at("sent_more").get<std::string>()});
          break;
        case DatasetFormat::McTask: {
          TaskItem item;
          item.id = j.at("id").get<long long>();
          item.query = j.at("query").get<std::string>();
          for (const auto& c : j.at("choices")) item.choices.push_back(c.get<std::string>());
          item.answer_index = j.at("answer_index").get<int>();
          task.items.push_back(std::move(item));
          break;
        }
      }
    } catch (const json::exception& e) {
      throw ParseError(path, i + 1, e.what());
    }
  }

  if (format == DatasetFormat::McTask) {
    task.validate();
    return task;
  }
  return pool;
}

}  // namespace debias
