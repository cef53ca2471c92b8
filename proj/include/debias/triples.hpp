#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/io.hpp"
#include "debias/vocab.hpp"

namespace debias {

struct NoPatternMatch : std::runtime_error {
  explicit NoPatternMatch(const std::string& sentence)
      : std::runtime_error("no extraction rule matches: " + sentence) {}
};
struct AlreadyNeutralized : std::runtime_error {
  AlreadyNeutralized() : std::runtime_error("triple object is already the none sentinel") {}
};
struct MissingExample : std::runtime_error {
  explicit MissingExample(long long id)
      : std::runtime_error("selected example id missing from corpus: " + std::to_string(id)) {}
};

// ============================================================================
// Triples and rules
// ============================================================================

struct Triple {
  std::string subject;
  std::string relation;  // canonical snake_case, derived from the verb phrase
  std::string object;
  long long source_example_id = -1;

  bool operator==(const Triple& o) const {
    return subject == o.subject && relation == o.relation && object == o.object;
  }
};

// Word-position pattern over a sentence. Slots {s}, {r}, {o} capture one or
// more words; everything else matches literally. {r} may be absent, in which
// case the rule names the relation outright.
struct PatternRule {
  std::string pattern;
  std::string relation;  // literal name, or template over the captured {r}
  int priority = 0;

  struct Part {
    enum Kind { Lit, SlotS, SlotR, SlotO } kind = Lit;
    std::string word;
  };
  std::vector<Part> parts;

  static PatternRule parse(const std::string& pattern, const std::string& relation,
                           int priority) {
    PatternRule r;
    r.pattern = pattern;
    r.relation = relation;
    r.priority = priority;
    for (const auto& w : normalize_words(pattern)) {
      if (w == "{s}") {
        r.parts.push_back({Part::SlotS, ""});
      } else if (w == "{r}") {
        r.parts.push_back({Part::SlotR, ""});
      } else if (w == "{o}") {
        r.parts.push_back({Part::SlotO, ""});
      } else {
        r.parts.push_back({Part::Lit, w});
      }
    }
    return r;
  }
};

namespace triple_detail {

struct Capture {
  std::vector<std::string> s, r, o;
};

// Leftmost match with minimal slot growth; each slot takes at least one word.
inline bool match_parts(const std::vector<PatternRule::Part>& parts, std::size_t pi,
                        const std::vector<std::string>& words, std::size_t wi, Capture& cap) {
  if (pi == parts.size()) return wi == words.size();
  const auto& part = parts[pi];
  if (part.kind == PatternRule::Part::Lit) {
    if (wi < words.size() && words[wi] == part.word) {
      return match_parts(parts, pi + 1, words, wi + 1, cap);
    }
    return false;
  }
  auto& bucket = part.kind == PatternRule::Part::SlotS
                     ? cap.s
                     : (part.kind == PatternRule::Part::SlotR ? cap.r : cap.o);
  for (std::size_t take = 1; wi + take <= words.size(); ++take) {
    const std::size_t before = bucket.size();
    for (std::size_t k = 0; k < take; ++k) bucket.push_back(words[wi + k]);
    if (match_parts(parts, pi + 1, words, wi + take, cap)) return true;
    bucket.resize(before);
  }
  return false;
}

inline std::string join(const std::vector<std::string>& words, char sep) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(sep);
    out += w;
  }
  return out;
}

}  // namespace triple_detail

// A triple plus everything the editor needs to address it back in the model:
// the prompt template (subject kept as a placeholder, object omitted) and the
// provenance ids it was extracted from.
struct ExtractedTriple {
  Triple triple;
  std::string original_object;      // object before any neutralization
  std::string prompt_template;      // e.g. "{s} are stronger than"
  std::string rule_pattern;
  std::vector<long long> provenance_ids;
};

namespace triple_detail {

inline std::string build_prompt_template(const PatternRule& rule, const Capture& cap) {
  // everything before the object slot, with captured relation words inlined
  std::string out;
  for (const auto& part : rule.parts) {
    if (part.kind == PatternRule::Part::SlotO) break;
    std::string piece;
    switch (part.kind) {
      case PatternRule::Part::Lit:
        piece = part.word;
        break;
      case PatternRule::Part::SlotS:
        piece = "{s}";
        break;
      case PatternRule::Part::SlotR:
        piece = join(cap.r, ' ');
        break;
      default:
        break;
    }
    if (!piece.empty()) {
      if (!out.empty()) out.push_back(' ');
      out += piece;
    }
  }
  return out;
}

}  // namespace triple_detail

inline ExtractedTriple extract_triple_ex(const std::string& sentence,
                                         const std::vector<PatternRule>& rules,
                                         long long source_id = -1) {
  if (rules.empty()) throw std::invalid_argument("no extraction rules given");
  const auto words = normalize_words(sentence);
  if (words.empty()) throw std::invalid_argument("empty sentence");

  std::vector<const PatternRule*> ordered;
  ordered.reserve(rules.size());
  for (const auto& r : rules) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const PatternRule* a, const PatternRule* b) {
                     return a->priority > b->priority;
                   });

  for (const PatternRule* rule : ordered) {
    triple_detail::Capture cap;
    if (!triple_detail::match_parts(rule->parts, 0, words, 0, cap)) continue;
    if (cap.s.empty() || cap.o.empty()) continue;

    std::string relation = rule->relation;
    const auto marker = relation.find("{r}");
    if (marker != std::string::npos) {
      relation = relation.substr(0, marker) + triple_detail::join(cap.r, '_') +
                 relation.substr(marker + 3);
    }

    ExtractedTriple out;
    out.triple.subject = triple_detail::join(cap.s, ' ');
    out.triple.relation = relation;
    out.triple.object = triple_detail::join(cap.o, ' ');
    out.triple.source_example_id = source_id;
    out.original_object = out.triple.object;
    out.prompt_template = triple_detail::build_prompt_template(*rule, cap);
    out.rule_pattern = rule->pattern;
    out.provenance_ids = {source_id};
    return out;
  }
  throw NoPatternMatch(sentence);
}

inline Triple extract_triple(const std::string& sentence, const std::vector<PatternRule>& rules,
                             long long source_id = -1) {
  return extract_triple_ex(sentence, rules, source_id).triple;
}

// Re-renders a triple through the rule pattern it was extracted with; used by
// round-trip checks and paraphrase probes.
inline std::string render_sentence(const PatternRule& rule, const Triple& triple) {
  // recover the {r} core by stripping the literal affixes of the relation template
  std::string r_core;
  const auto marker = rule.relation.find("{r}");
  if (marker != std::string::npos) {
    const std::string prefix = rule.relation.substr(0, marker);
    const std::string suffix = rule.relation.substr(marker + 3);
    if (triple.relation.size() >= prefix.size() + suffix.size() &&
        triple.relation.compare(0, prefix.size(), prefix) == 0 &&
        triple.relation.compare(triple.relation.size() - suffix.size(), suffix.size(),
                                suffix) == 0) {
      r_core = triple.relation.substr(prefix.size(),
                                      triple.relation.size() - prefix.size() - suffix.size());
    } else {
      r_core = triple.relation;
    }
    std::replace(r_core.begin(), r_core.end(), '_', ' ');
  }

  std::string out;
  for (const auto& part : rule.parts) {
    std::string piece;
    switch (part.kind) {
      case PatternRule::Part::Lit:
        piece = part.word;
        break;
      case PatternRule::Part::SlotS:
        piece = triple.subject;
        break;
      case PatternRule::Part::SlotR:
        piece = r_core;
        break;
      case PatternRule::Part::SlotO:
        piece = triple.object;
        break;
    }
    if (!piece.empty()) {
      if (!out.empty()) out.push_back(' ');
      out += piece;
    }
  }
  return out;
}

// ============================================================================
// Neutralization
// ============================================================================

inline Triple neutralize(const Triple& t) {
  if (t.object == Vocabulary::kNone) throw AlreadyNeutralized();
  Triple out = t;
  out.object = Vocabulary::kNone;
  return out;
}

// ============================================================================
// Batch extraction
// ============================================================================

struct ExtractionFailure {
  long long id = -1;
  std::string reason;
};

struct ExtractionBatch {
  std::vector<ExtractedTriple> triples;  // deduplicated by (s, r, o)
  std::vector<ExtractionFailure> failures;
};

// Every selected id lands in exactly one bucket: as provenance of a triple or
// as a failure. Duplicate (s, r, o) triples are merged.
inline ExtractionBatch extract_batch(const std::vector<long long>& selected_ids,
                                     const std::map<long long, std::string>& corpus,
                                     const std::vector<PatternRule>& rules) {
  ExtractionBatch out;
  std::map<std::vector<std::string>, std::size_t> seen;  // (s, r, o) -> index
  for (long long id : selected_ids) {
    auto it = corpus.find(id);
    if (it == corpus.end()) throw MissingExample(id);
    try {
      ExtractedTriple et = extract_triple_ex(it->second, rules, id);
      std::vector<std::string> key = {et.triple.subject, et.triple.relation, et.triple.object};
      auto found = seen.find(key);
      if (found != seen.end()) {
        out.triples[found->second].provenance_ids.push_back(id);
      } else {
        seen.emplace(std::move(key), out.triples.size());
        out.triples.push_back(std::move(et));
      }
    } catch (const NoPatternMatch&) {
      out.failures.push_back({id, "NoPatternMatch"});
    }
  }
  return out;
}

// ============================================================================
// Rules file
// ============================================================================

inline json rules_to_json(const std::vector<PatternRule>& rules) {
  json arr = json::array();
  for (const auto& r : rules) {
    arr.push_back({{"pattern", r.pattern}, {"relation", r.relation}, {"priority", r.priority}});
  }
  return arr;
}

inline std::vector<PatternRule> rules_from_json(const json& j) {
  std::vector<PatternRule> rules;
  std::vector<int> priorities;
  for (const auto& e : j) {
    rules.push_back(PatternRule::parse(e.at("pattern"), e.at("relation"), e.at("priority")));
    priorities.push_back(rules.back().priority);
  }
  std::sort(priorities.begin(), priorities.end());
  if (std::adjacent_find(priorities.begin(), priorities.end()) != priorities.end()) {
    throw std::invalid_argument("rule priorities must be unique");
  }
  return rules;
}

}  // namespace debias
