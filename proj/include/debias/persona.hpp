#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/io.hpp"
#include "debias/rng.hpp"
#include "debias/vocab.hpp"

namespace debias {

struct UnparseableExample : std::runtime_error {
  explicit UnparseableExample(const std::string& text)
      : std::runtime_error("example not parseable against templates: " + text) {}
};
struct ZeroMarginal : std::runtime_error {
  explicit ZeroMarginal(const std::string& text)
      : std::runtime_error("mixture marginal is zero for: " + text) {}
};
struct EmptyDemonstrations : std::runtime_error {
  EmptyDemonstrations()
      : std::runtime_error("induction requested with zero demonstrations") {}
};

// ============================================================================
// Template grammar
// ============================================================================
//
// A persona is a categorical distribution over sentence templates whose slots
// each draw one word from a persona-local categorical. Every sentence
// probability is therefore available in closed form, which is what makes the
// world usable as an exact oracle.

struct SlotDist {
  std::vector<std::pair<std::string, double>> words;

  double prob_of(const std::string& w) const {
    for (const auto& [word, p] : words) {
      if (word == w) return p;
    }
    return 0.0;
  }

  double total() const {
    double s = 0.0;
    for (const auto& [_, p] : words) s += p;
    return s;
  }

  void normalize() {
    const double s = total();
    if (s <= 0.0) throw std::invalid_argument("slot distribution has no mass");
    for (auto& [_, p] : words) p /= s;
  }
};

// A slot draw may condition on the realized value of an earlier slot in the
// same sentence ("which object does THIS group like"). Unconditional slots
// keep a single table under the empty key. Probabilities stay closed-form
// either way.
struct SlotTable {
  std::string parent;                      // empty => unconditional
  std::map<std::string, SlotDist> tables;  // keyed by parent value ("" if none)

  static SlotTable marginal(SlotDist dist) {
    SlotTable t;
    t.tables[""] = std::move(dist);
    return t;
  }

  const SlotDist& dist_for(const std::map<std::string, std::string>& realized) const {
    if (parent.empty()) return tables.at("");
    auto it = realized.find(parent);
    if (it == realized.end()) {
      throw std::invalid_argument("conditional slot used before its parent: " + parent);
    }
    auto entry = tables.find(it->second);
    if (entry == tables.end()) {
      throw std::invalid_argument("no slot table for parent value: " + it->second);
    }
    return entry->second;
  }
};

struct TemplatePart {
  bool is_slot = false;
  std::string text;  // literal word, or slot name
};

struct SentenceTemplate {
  double prob = 0.0;
  std::vector<TemplatePart> parts;

  static SentenceTemplate parse(double prob, const std::string& pattern) {
    SentenceTemplate t;
    t.prob = prob;
    for (const auto& w : normalize_words(pattern)) {
      if (w.size() >= 3 && w.front() == '[' && w.back() == ']') {
        t.parts.push_back({true, w.substr(1, w.size() - 2)});
      } else {
        t.parts.push_back({false, w});
      }
    }
    return t;
  }
};

struct PersonaSpec {
  std::string name;
  bool is_stereotypical = false;
  std::vector<SentenceTemplate> templates;
  std::map<std::string, SlotTable> slots;

  void validate() const {
    if (templates.empty()) throw std::invalid_argument("persona needs at least one template");
    double s = 0.0;
    for (const auto& t : templates) s += t.prob;
    if (std::abs(s - 1.0) > 1e-12) {
      throw std::invalid_argument("template probabilities must sum to 1, got " +
                                  std::to_string(s));
    }
    for (const auto& [name_, table] : slots) {
      for (const auto& [key, d] : table.tables) {
        if (std::abs(d.total() - 1.0) > 1e-12) {
          throw std::invalid_argument("slot distribution must sum to 1: " + name_ + "/" + key);
        }
      }
    }
  }

  std::string sample_sentence(Rng& rng) const {
    std::vector<double> ws;
    ws.reserve(templates.size());
    for (const auto& t : templates) ws.push_back(t.prob);
    const auto& tmpl = templates[rng.discrete(ws)];
    std::map<std::string, std::string> realized;
    std::string out;
    for (const auto& part : tmpl.parts) {
      if (!out.empty()) out.push_back(' ');
      if (part.is_slot) {
        const auto& dist = slots.at(part.text).dist_for(realized);
        std::vector<double> sw;
        sw.reserve(dist.words.size());
        for (const auto& [_, p] : dist.words) sw.push_back(p);
        const std::string& word = dist.words[rng.discrete(sw)].first;
        realized[part.text] = word;
        out += word;
      } else {
        out += part.text;
      }
    }
    return out;
  }
};

struct MixtureSpec {
  std::vector<std::pair<double, PersonaSpec>> components;

  void validate() const {
    if (components.empty()) throw std::invalid_argument("mixture needs components");
    double s = 0.0;
    for (const auto& [w, p] : components) {
      if (w <= 0.0) throw std::invalid_argument("mixture weights must be positive");
      s += w;
      p.validate();
    }
    if (std::abs(s - 1.0) > 1e-12) {
      throw std::invalid_argument("mixture weights must sum to 1");
    }
  }

  const PersonaSpec* find(const std::string& name) const {
    for (const auto& [_, p] : components) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  // First component flagged stereotypical.
  const PersonaSpec* stereotypical() const {
    for (const auto& [_, p] : components) {
      if (p.is_stereotypical) return &p;
    }
    return nullptr;
  }
};

struct LabeledExample {
  long long id = 0;
  std::string text;
  std::string origin_persona;  // hidden label, evaluation only
};

// ============================================================================
// Corpus generation
// ============================================================================

inline std::vector<LabeledExample> generate_corpus(const MixtureSpec& mixture, int n,
                                                   Rng& rng) {
  if (n < 1) throw std::invalid_argument("corpus size must be >= 1");
  mixture.validate();
  std::vector<double> ws;
  ws.reserve(mixture.components.size());
  for (const auto& [w, _] : mixture.components) ws.push_back(w);

  std::vector<LabeledExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& [_, persona] = mixture.components[rng.discrete(ws)];
    out.push_back({i, persona.sample_sentence(rng), persona.name});
  }
  return out;
}

// Persona-coherent documents: one persona is drawn per document and emits
// every sentence in it. Sentences are joined with the period token so a plain
// word tokenizer keeps the boundaries. This is what lets a trained model carry
// persona evidence across sentences in a prompt.
struct DocumentSample {
  std::string text;
  std::string origin_persona;
};

inline std::vector<DocumentSample> generate_documents(const MixtureSpec& mixture, int n_docs,
                                                      int min_sentences, int max_sentences,
                                                      Rng& rng) {
  if (n_docs < 1 || min_sentences < 1 || max_sentences < min_sentences) {
    throw std::invalid_argument("bad document generation bounds");
  }
  mixture.validate();
  std::vector<double> ws;
  for (const auto& [w, _] : mixture.components) ws.push_back(w);

  std::vector<DocumentSample> docs;
  docs.reserve(static_cast<std::size_t>(n_docs));
  for (int i = 0; i < n_docs; ++i) {
    const auto& [_, persona] = mixture.components[rng.discrete(ws)];
    const int k = min_sentences +
                  static_cast<int>(rng.uniform_index(
                      static_cast<std::size_t>(max_sentences - min_sentences + 1)));
    std::string text;
    for (int s = 0; s < k; ++s) {
      if (!text.empty()) text += " . ";
      text += persona.sample_sentence(rng);
    }
    docs.push_back({text, persona.name});
  }
  return docs;
}

// ============================================================================
// Exact likelihoods and posteriors
// ============================================================================

// Exact P(text | persona): sums template prob * slot probs over every
// derivation that reproduces the text. Unreachable text has probability zero.
inline double analytic_likelihood(const PersonaSpec& persona, const std::string& text) {
  const auto words = normalize_words(text);
  if (words.empty()) throw UnparseableExample(text);
  double total = 0.0;
  for (const auto& tmpl : persona.templates) {
    if (tmpl.parts.size() != words.size()) continue;
    double p = tmpl.prob;
    bool ok = true;
    std::map<std::string, std::string> realized;
    for (std::size_t i = 0; i < words.size(); ++i) {
      const auto& part = tmpl.parts[i];
      if (part.is_slot) {
        auto it = persona.slots.find(part.text);
        if (it == persona.slots.end()) {
          ok = false;
          break;
        }
        p *= it->second.dist_for(realized).prob_of(words[i]);
        realized[part.text] = words[i];
      } else if (part.text != words[i]) {
        ok = false;
        break;
      }
      if (p == 0.0) {
        ok = false;
        break;
      }
    }
    if (ok) total += p;
  }
  return total;
}

inline double analytic_likelihood(const PersonaSpec& persona, const LabeledExample& ex) {
  return analytic_likelihood(persona, ex.text);
}

inline double mixture_likelihood(const MixtureSpec& mixture, const std::string& text) {
  double total = 0.0;
  for (const auto& [w, p] : mixture.components) total += w * analytic_likelihood(p, text);
  return total;
}

// p(persona | text) by Bayes rule over the mixture.
inline std::map<std::string, double> posterior_persona(const MixtureSpec& mixture,
                                                       const std::string& text) {
  const double marginal = mixture_likelihood(mixture, text);
  if (marginal <= 0.0) throw ZeroMarginal(text);
  std::map<std::string, double> post;
  for (const auto& [w, p] : mixture.components) {
    post[p.name] = w * analytic_likelihood(p, text) / marginal;
  }
  return post;
}

inline std::map<std::string, double> posterior_persona(const MixtureSpec& mixture,
                                                       const LabeledExample& ex) {
  return posterior_persona(mixture, ex.text);
}

// Ground-truth selection score: log P(x | stereotypical) - log p(x). This is
// the ranking the model-estimated scores are validated against.
inline double oracle_log_ratio(const MixtureSpec& mixture, const std::string& text) {
  const PersonaSpec* target = mixture.stereotypical();
  if (!target) throw std::invalid_argument("mixture has no stereotypical component");
  const double num = analytic_likelihood(*target, text);
  const double den = mixture_likelihood(mixture, text);
  if (den <= 0.0) throw ZeroMarginal(text);
  if (num <= 0.0) return -std::numeric_limits<double>::infinity();
  return std::log(num) - std::log(den);
}

// ============================================================================
// Induction prompts
// ============================================================================

// hint, demonstrations, query — rendered in that order, period-separated.
// With no hint and no demonstrations the prompt degenerates to the query.
struct InductionPrompt {
  std::string hint;
  std::vector<std::string> demonstrations;
  std::string query;

  static InductionPrompt identity(const std::string& query) { return {"", {}, query}; }

  bool is_identity() const { return hint.empty() && demonstrations.empty(); }

  std::string render() const {
    if (is_identity()) return query;
    std::string out;
    auto append = [&out](const std::string& block) {
      if (block.empty()) return;
      if (!out.empty()) out += " . ";
      out += block;
    };
    append(hint);
    for (const auto& d : demonstrations) append(d);
    append(query);
    return out;
  }
};

inline InductionPrompt build_induction_prompt(const std::vector<std::string>& biased,
                                              const std::string& hint,
                                              const std::string& query) {
  if (biased.empty() && !hint.empty()) throw EmptyDemonstrations();
  InductionPrompt p;
  p.hint = hint;
  p.demonstrations = biased;
  p.query = query;
  return p;
}

// ============================================================================
// JSON serialization
// ============================================================================

inline json slot_to_json(const SlotDist& d) {
  json arr = json::array();
  for (const auto& [w, p] : d.words) arr.push_back({{"word", w}, {"prob", p}});
  return arr;
}

inline SlotDist slot_from_json(const json& j) {
  SlotDist d;
  for (const auto& e : j) d.words.push_back({e.at("word"), e.at("prob")});
  return d;
}

inline json slot_table_to_json(const SlotTable& t) {
  json tables = json::object();
  for (const auto& [key, dist] : t.tables) tables[key] = slot_to_json(dist);
  return {{"parent", t.parent}, {"tables", tables}};
}

inline SlotTable slot_table_from_json(const json& j) {
  SlotTable t;
  t.parent = j.at("parent");
  for (const auto& [key, dist] : j.at("tables").items()) {
    t.tables[key] = slot_from_json(dist);
  }
  return t;
}

inline json persona_to_json(const PersonaSpec& p) {
  json templates = json::array();
  for (const auto& t : p.templates) {
    std::string pattern;
    for (const auto& part : t.parts) {
      if (!pattern.empty()) pattern.push_back(' ');
      pattern += part.is_slot ? "[" + part.text + "]" : part.text;
    }
    templates.push_back({{"prob", t.prob}, {"pattern", pattern}});
  }
  json slots = json::object();
  for (const auto& [name, t] : p.slots) slots[name] = slot_table_to_json(t);
  return {{"name", p.name},
          {"stereotypical", p.is_stereotypical},
          {"templates", templates},
          {"slots", slots}};
}

inline PersonaSpec persona_from_json(const json& j) {
  PersonaSpec p;
  p.name = j.at("name");
  p.is_stereotypical = j.at("stereotypical");
  for (const auto& t : j.at("templates")) {
    p.templates.push_back(SentenceTemplate::parse(t.at("prob"), t.at("pattern")));
  }
  for (const auto& [name, t] : j.at("slots").items()) p.slots[name] = slot_table_from_json(t);
  return p;
}

inline json mixture_to_json(const MixtureSpec& m) {
  json comps = json::array();
  for (const auto& [w, p] : m.components) {
    comps.push_back({{"weight", w}, {"persona", persona_to_json(p)}});
  }
  return {{"components", comps}};
}

inline MixtureSpec mixture_from_json(const json& j) {
  MixtureSpec m;
  for (const auto& c : j.at("components")) {
    m.components.push_back({c.at("weight"), persona_from_json(c.at("persona"))});
  }
  m.validate();
  return m;
}

}  // namespace debias
