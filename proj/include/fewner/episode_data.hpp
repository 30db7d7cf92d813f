#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewner/errors.hpp"

namespace fewner {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A sentence with one tag per word; tags are bare type names or "O".
struct TaggedSentence {
  std::vector<std::string> words;
  std::vector<std::string> tags;

  bool operator==(const TaggedSentence& o) const {
    return words == o.words && tags == o.tags;
  }
};

/// Entity type inventory of one task; index 0 is always "none".
struct EntityTypeSet {
  std::vector<std::string> types;

  std::size_t size() const { return types.size(); }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < types.size(); ++i)
      if (types[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline EntityTypeSet make_type_set(std::vector<std::string> entity_types) {
  EntityTypeSet ts;
  ts.types.reserve(entity_types.size() + 1);
  ts.types.push_back("none");
  std::set<std::string> seen;
  for (auto& t : entity_types) {
    if (t == "none") throw ContractError("entity type list must not contain \"none\"");
    if (!seen.insert(t).second) throw ContractError("duplicate entity type: " + t);
    ts.types.push_back(std::move(t));
  }
  if (ts.types.size() < 2) throw ContractError("a type set needs at least one entity type");
  return ts;
}

/// Word-index span, 0-based inclusive on both ends.
struct SpanAnnotation {
  int start = 0;
  int end = 0;
  std::string label;

  bool operator==(const SpanAnnotation& o) const {
    return start == o.start && end == o.end && label == o.label;
  }
  bool operator<(const SpanAnnotation& o) const {
    return std::tie(start, end, label) < std::tie(o.start, o.end, o.label);
  }
};

/// One N-way K-shot task.
struct Episode {
  std::vector<TaggedSentence> support;
  std::vector<TaggedSentence> query;
  EntityTypeSet type_set;
  int n_way = 0;
  int k_shot = 0;
};

/// Flat sentence collection plus the observed entity-type inventory
/// (first-appearance order, "none" excluded).
struct Corpus {
  std::vector<TaggedSentence> sentences;
  std::vector<std::string> types;
};

// ---------------------------------------------------------------------------
// Tag <-> span conversion
// ---------------------------------------------------------------------------

/// Maximal contiguous runs of one non-"O" tag become one span; sorted by
/// (start, end) by construction.
inline std::vector<SpanAnnotation> tags_to_spans(const TaggedSentence& sent) {
  if (sent.tags.size() != sent.words.size())
    throw ContractError("tag/word length mismatch");
  std::vector<SpanAnnotation> spans;
  std::size_t i = 0;
  while (i < sent.tags.size()) {
    if (sent.tags[i] == "O") {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < sent.tags.size() && sent.tags[j + 1] == sent.tags[i]) ++j;
    spans.push_back({static_cast<int>(i), static_cast<int>(j), sent.tags[i]});
    i = j + 1;
  }
  return spans;
}

/// Inverse writer for the round-trip property.
inline std::vector<std::string> spans_to_tags(std::size_t word_count,
                                              const std::vector<SpanAnnotation>& spans) {
  std::vector<std::string> tags(word_count, "O");
  for (const auto& s : spans) {
    if (s.start < 0 || s.end < s.start || static_cast<std::size_t>(s.end) >= word_count)
      throw ContractError("span out of range in spans_to_tags");
    for (int k = s.start; k <= s.end; ++k) tags[static_cast<std::size_t>(k)] = s.label;
  }
  return tags;
}

// ---------------------------------------------------------------------------
// Corpus ingestion
// ---------------------------------------------------------------------------

enum class CorpusFormat { column_bio, episode_json };

inline CorpusFormat parse_corpus_format(const std::string& s) {
  if (s == "column-bio") return CorpusFormat::column_bio;
  if (s == "episode-json") return CorpusFormat::episode_json;
  throw ConfigError("unknown corpus format: " + s);
}

/// Strips BIO/BIOES prefixes; bare type names pass through.
inline std::string strip_tag_prefix(const std::string& tag) {
  if (tag == "O" || tag == "o") return "O";
  if (tag.size() > 2 && tag[1] == '-') {
    const char p = tag[0];
    if (p == 'B' || p == 'I' || p == 'E' || p == 'S' || p == 'M')
      return tag.substr(2);
  }
  return tag;
}

namespace detail {

inline void register_types(Corpus& corpus, const TaggedSentence& sent) {
  for (const auto& t : sent.tags) {
    if (t == "O") continue;
    if (std::find(corpus.types.begin(), corpus.types.end(), t) == corpus.types.end())
      corpus.types.push_back(t);
  }
}

inline TaggedSentence sentence_from_json(const nlohmann::json& words,
                                         const nlohmann::json& labels,
                                         std::size_t line_no) {
  TaggedSentence sent;
  for (const auto& w : words) sent.words.push_back(w.get<std::string>());
  for (const auto& t : labels) sent.tags.push_back(strip_tag_prefix(t.get<std::string>()));
  if (sent.words.size() != sent.tags.size())
    throw ParseError("line " + std::to_string(line_no) +
                     ": word/label length mismatch in episode JSON");
  return sent;
}

}  // namespace detail

inline Corpus load_column_bio(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus file: " + path);
  Corpus corpus;
  TaggedSentence current;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&] {
    if (!current.words.empty()) {
      detail::register_types(corpus, current);
      corpus.sentences.push_back(std::move(current));
      current = TaggedSentence{};
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected \"word<TAB>tag\", got \"" + line + "\"");
    current.words.push_back(line.substr(0, tab));
    current.tags.push_back(strip_tag_prefix(line.substr(tab + 1)));
  }
  flush();
  return corpus;
}

// Episode JSON-lines schema, one episode per line:
//   {"support": {"word": [[...]], "label": [[...]]},
//    "query":   {"word": [[...]], "label": [[...]]},
//    "types": [...], "n_way": N, "k_shot": K}
// n_way/k_shot are optional on read and inferred when absent.
inline std::vector<Episode> load_episodes_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open episode file: " + path);
  std::vector<Episode> episodes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("support") || !j.contains("query") || !j.contains("types"))
      throw ParseError("line " + std::to_string(line_no) +
                       ": episode JSON needs support/query/types keys");
    Episode ep;
    std::vector<std::string> types;
    for (const auto& t : j.at("types")) types.push_back(t.get<std::string>());
    ep.type_set = make_type_set(types);
    for (const char* part : {"support", "query"}) {
      const auto& p = j.at(part);
      const auto& words = p.at("word");
      const auto& labels = p.at("label");
      if (words.size() != labels.size())
        throw ParseError("line " + std::to_string(line_no) + ": ragged " + part);
      auto& dst = (std::string(part) == "support") ? ep.support : ep.query;
      for (std::size_t s = 0; s < words.size(); ++s)
        dst.push_back(detail::sentence_from_json(words[s], labels[s], line_no));
    }
    ep.n_way = j.value("n_way", static_cast<int>(types.size()));
    if (j.contains("k_shot")) {
      ep.k_shot = j.at("k_shot").get<int>();
    } else {
      int min_count = -1;
      for (const auto& t : types) {
        int c = 0;
        for (const auto& s : ep.support)
          for (const auto& sp : tags_to_spans(s))
            if (sp.label == t) ++c;
        min_count = (min_count < 0) ? c : std::min(min_count, c);
      }
      ep.k_shot = std::max(1, min_count);
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

inline void write_episodes_jsonl(const std::string& path,
                                 const std::vector<Episode>& episodes) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write episode file: " + path);
  for (const auto& ep : episodes) {
    nlohmann::ordered_json j;
    for (const char* part : {"support", "query"}) {
      const auto& src = (std::string(part) == "support") ? ep.support : ep.query;
      nlohmann::ordered_json words = nlohmann::json::array();
      nlohmann::ordered_json labels = nlohmann::json::array();
      for (const auto& s : src) {
        words.push_back(s.words);
        labels.push_back(s.tags);
      }
      j[part]["word"] = std::move(words);
      j[part]["label"] = std::move(labels);
    }
    j["types"] = std::vector<std::string>(ep.type_set.types.begin() + 1,
                                          ep.type_set.types.end());
    j["n_way"] = ep.n_way;
    j["k_shot"] = ep.k_shot;
    out << j.dump() << "\n";
  }
}

inline Corpus load_corpus(const std::string& path, CorpusFormat format) {
  if (format == CorpusFormat::column_bio) return load_column_bio(path);
  Corpus corpus;
  for (const auto& ep : load_episodes_jsonl(path)) {
    for (const auto& s : ep.support) {
      detail::register_types(corpus, s);
      corpus.sentences.push_back(s);
    }
    for (const auto& s : ep.query) {
      detail::register_types(corpus, s);
      corpus.sentences.push_back(s);
    }
  }
  return corpus;
}

inline void write_column_bio(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write corpus file: " + path);
  for (const auto& s : corpus.sentences) {
    for (std::size_t i = 0; i < s.words.size(); ++i)
      out << s.words[i] << "\t" << s.tags[i] << "\n";
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Episode sampling and validation
// ---------------------------------------------------------------------------

struct ClassReport {
  std::string name;
  int support_mentions = 0;
  int query_mentions = 0;
  bool support_in_band = false;
  bool query_in_band = false;
};

struct ValidationReport {
  std::vector<ClassReport> classes;
  bool disjoint = false;
  bool n_way_matches = false;
  bool pass = false;

  std::string format() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " (disjoint=" << (disjoint ? "yes" : "no")
       << ", n_way=" << (n_way_matches ? "ok" : "mismatch") << ")\n";
    for (const auto& c : classes)
      os << "  " << c.name << ": support=" << c.support_mentions
         << (c.support_in_band ? "" : " [out of band]") << ", query=" << c.query_mentions
         << (c.query_in_band ? "" : " [out of band]") << "\n";
    return os.str();
  }
};

namespace detail {

inline std::string sentence_key(const TaggedSentence& s) {
  std::string key;
  for (const auto& w : s.words) key += w + '\x1f';
  key += '\x1e';
  for (const auto& t : s.tags) key += t + '\x1f';
  return key;
}

inline std::map<std::string, int> mention_counts(const std::vector<TaggedSentence>& sents) {
  std::map<std::string, int> counts;
  for (const auto& s : sents)
    for (const auto& sp : tags_to_spans(s)) ++counts[sp.label];
  return counts;
}

/// Greedy fill: repeatedly add the pool sentence that most reduces the
/// remaining deficit, skipping sentences that would push any class past 2K.
/// Pool order (already shuffled by the caller) breaks ties.
inline std::optional<std::vector<std::size_t>> greedy_fill(
    const std::vector<const TaggedSentence*>& pool, const std::set<std::string>& targets,
    int k_shot, std::vector<bool>& used) {
  std::map<std::string, int> counts;
  for (const auto& t : targets) counts[t] = 0;
  std::vector<std::size_t> chosen;
  auto filled = [&] {
    return std::all_of(counts.begin(), counts.end(),
                       [&](const auto& kv) { return kv.second >= k_shot; });
  };
  while (!filled()) {
    std::size_t best = pool.size();
    int best_score = 0;
    for (std::size_t idx = 0; idx < pool.size(); ++idx) {
      if (used[idx]) continue;
      std::map<std::string, int> m;
      for (const auto& sp : tags_to_spans(*pool[idx]))
        if (targets.count(sp.label)) ++m[sp.label];
      bool overflow = false;
      int score = 0;
      for (const auto& [cls, cnt] : m) {
        if (counts[cls] + cnt > 2 * k_shot) {
          overflow = true;
          break;
        }
        score += std::min(cnt, std::max(0, k_shot - counts[cls]));
      }
      if (overflow || score <= best_score) continue;
      best_score = score;
      best = idx;
    }
    if (best == pool.size()) return std::nullopt;
    used[best] = true;
    chosen.push_back(best);
    for (const auto& sp : tags_to_spans(*pool[best]))
      if (targets.count(sp.label)) ++counts[sp.label];
  }
  return chosen;
}

/// Copy of a sentence with mentions outside the target classes masked to O.
inline TaggedSentence mask_to_targets(const TaggedSentence& s,
                                      const std::set<std::string>& targets) {
  TaggedSentence out = s;
  for (auto& t : out.tags)
    if (t != "O" && !targets.count(t)) t = "O";
  return out;
}

}  // namespace detail

/// Greedy N-way K-shot sampler. Pure function of (corpus, n_way, k_shot,
/// seed); retries fresh class subsets and pool shuffles up to 1000 times
/// before declaring the corpus infeasible.
inline Episode sample_episode(const Corpus& corpus, int n_way, int k_shot,
                              std::uint64_t rng_seed) {
  if (n_way < 1 || k_shot < 1) throw ContractError("n_way and k_shot must be >= 1");

  // Work on content-unique sentences: support/query disjointness is defined
  // over sentence identity, and corpora may repeat sentences verbatim.
  std::vector<const TaggedSentence*> unique_sentences;
  {
    std::set<std::string> seen;
    for (const auto& s : corpus.sentences)
      if (seen.insert(detail::sentence_key(s)).second) unique_sentences.push_back(&s);
  }

  // Eligibility: enough mentions overall and in at least two sentences, so
  // both support and query can be filled disjointly.
  std::map<std::string, int> total_mentions;
  std::map<std::string, std::set<std::size_t>> sentence_hits;
  for (std::size_t i = 0; i < unique_sentences.size(); ++i)
    for (const auto& sp : tags_to_spans(*unique_sentences[i])) {
      ++total_mentions[sp.label];
      sentence_hits[sp.label].insert(i);
    }
  std::vector<std::string> eligible;
  std::vector<std::string> deficient;
  for (const auto& t : corpus.types) {
    if (total_mentions[t] >= 2 * k_shot && sentence_hits[t].size() >= 2)
      eligible.push_back(t);
    else
      deficient.push_back(t);
  }
  if (static_cast<int>(eligible.size()) < n_way) {
    std::string msg = "corpus cannot support " + std::to_string(n_way) + "-way " +
                      std::to_string(k_shot) + "-shot sampling; deficient classes:";
    for (const auto& d : deficient) msg += " " + d;
    if (deficient.empty()) msg += " (fewer types than n_way)";
    throw InfeasibleError(msg);
  }

  std::mt19937_64 rng(rng_seed);
  std::vector<std::string> last_short;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<std::string> shuffled = eligible;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::set<std::string> targets(shuffled.begin(),
                                  shuffled.begin() + static_cast<std::size_t>(n_way));

    std::vector<const TaggedSentence*> pool;
    for (const TaggedSentence* s : unique_sentences)
      for (const auto& sp : tags_to_spans(*s))
        if (targets.count(sp.label)) {
          pool.push_back(s);
          break;
        }
    std::shuffle(pool.begin(), pool.end(), rng);

    std::vector<bool> used(pool.size(), false);
    auto support_idx = detail::greedy_fill(pool, targets, k_shot, used);
    if (!support_idx) continue;
    auto query_idx = detail::greedy_fill(pool, targets, k_shot, used);
    if (!query_idx) continue;

    Episode ep;
    for (std::size_t i : *support_idx)
      ep.support.push_back(detail::mask_to_targets(*pool[i], targets));
    for (std::size_t i : *query_idx)
      ep.query.push_back(detail::mask_to_targets(*pool[i], targets));
    // type_set follows corpus inventory order for determinism
    std::vector<std::string> ordered;
    for (const auto& t : corpus.types)
      if (targets.count(t)) ordered.push_back(t);
    ep.type_set = make_type_set(ordered);
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    return ep;
  }

  throw InfeasibleError("episode sampling failed after 1000 attempts (" +
                        std::to_string(n_way) + "-way " + std::to_string(k_shot) +
                        "-shot); corpus too constrained");
}

/// Reports per-class mention counts and the K..2K band; never throws.
inline ValidationReport validate_episode(const Episode& ep) {
  ValidationReport report;
  const auto support_counts = detail::mention_counts(ep.support);
  const auto query_counts = detail::mention_counts(ep.query);
  bool bands_ok = true;
  for (std::size_t i = 1; i < ep.type_set.types.size(); ++i) {
    ClassReport c;
    c.name = ep.type_set.types[i];
    auto s = support_counts.find(c.name);
    auto q = query_counts.find(c.name);
    c.support_mentions = (s == support_counts.end()) ? 0 : s->second;
    c.query_mentions = (q == query_counts.end()) ? 0 : q->second;
    c.support_in_band =
        c.support_mentions >= ep.k_shot && c.support_mentions <= 2 * ep.k_shot;
    c.query_in_band = c.query_mentions >= ep.k_shot && c.query_mentions <= 2 * ep.k_shot;
    bands_ok = bands_ok && c.support_in_band && c.query_in_band;
    report.classes.push_back(std::move(c));
  }
  std::set<std::string> support_keys;
  for (const auto& s : ep.support) support_keys.insert(detail::sentence_key(s));
  report.disjoint = std::none_of(ep.query.begin(), ep.query.end(), [&](const auto& s) {
    return support_keys.count(detail::sentence_key(s)) != 0;
  });
  report.n_way_matches =
      static_cast<int>(ep.type_set.types.size()) - 1 == ep.n_way;
  report.pass = bands_ok && report.disjoint && report.n_way_matches;
  return report;
}

}  // namespace fewner
