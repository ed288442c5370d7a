#pragma once

// Reading-time corpora: ingest, filtering, and the exploratory/held-out split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtool/error.hpp"
#include "rtool/text.hpp"

namespace rtool {

enum class Modality { spr, et };

inline std::string_view to_string(Modality m) { return m == Modality::spr ? "spr" : "et"; }

inline Modality parse_modality(std::string_view s) {
  if (s == "spr") return Modality::spr;
  if (s == "et") return Modality::et;
  throw ValidationError("unknown modality '" + std::string(s) + "' (expected spr or et)");
}

enum class Boundary : std::uint8_t {
  sentence_start,
  sentence_end,
  screen_start,
  screen_end,
  doc_start,
  doc_end,
  line_start,
  line_end,
};

inline constexpr std::array<std::string_view, 8> kBoundaryNames = {
    "sentence_start", "sentence_end", "screen_start", "screen_end",
    "doc_start",      "doc_end",      "line_start",   "line_end"};

/// Bit set over Boundary values.
class BoundarySet {
 public:
  constexpr BoundarySet() = default;
  constexpr BoundarySet(std::initializer_list<Boundary> bs) {
    for (auto b : bs) insert(b);
  }

  static BoundarySet all() {
    BoundarySet s;
    s.bits_ = 0xFF;
    return s;
  }

  constexpr void insert(Boundary b) { bits_ |= mask(b); }
  constexpr bool contains(Boundary b) const { return (bits_ & mask(b)) != 0; }
  constexpr bool intersects(BoundarySet o) const { return (bits_ & o.bits_) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr BoundarySet operator|(BoundarySet o) const {
    BoundarySet s;
    s.bits_ = static_cast<std::uint8_t>(bits_ | o.bits_);
    return s;
  }
  constexpr bool operator==(const BoundarySet&) const = default;

  /// Comma-separated names; empty string and "-" both mean no flags.
  static BoundarySet parse(std::string_view s) {
    BoundarySet out;
    s = text::trim(s);
    if (s.empty() || s == "-") return out;
    for (auto part : text::split(s, ',')) {
      part = text::trim(part);
      auto it = std::find(kBoundaryNames.begin(), kBoundaryNames.end(), part);
      if (it == kBoundaryNames.end())
        throw ValidationError("unknown boundary flag '" + std::string(part) + "'");
      out.insert(static_cast<Boundary>(it - kBoundaryNames.begin()));
    }
    return out;
  }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < kBoundaryNames.size(); ++i) {
      if (!contains(static_cast<Boundary>(i))) continue;
      if (!out.empty()) out += ',';
      out += kBoundaryNames[i];
    }
    return out;
  }

 private:
  static constexpr std::uint8_t mask(Boundary b) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(b));
  }
  std::uint8_t bits_ = 0;
};

struct WordToken {
  std::string doc_id;
  std::int64_t sentence_id = 0;
  int word_pos = 1;  // 1-based within sentence
  std::string surface;
  int char_len = 0;  // code points
  std::size_t corpus_word_idx = 0;
  /// Positional boundaries implied by the token order (sentence and document edges).
  BoundarySet implied;
};

struct Observation {
  std::int64_t subject_id = 0;
  std::size_t token = 0;  // index into ReadingCorpus::tokens
  double rt_ms = 0;
  double log_rt = 0;
  std::optional<int> saccade_len;    // ET only
  std::optional<bool> prev_fixated;  // ET only
  std::optional<bool> fixated;       // ET only
  BoundarySet boundaries;            // flags carried by the input row
};

struct FilterSpec {
  Modality modality = Modality::spr;
  int min_rt_ms = 100;
  int max_rt_ms = 3000;
  int min_correct_questions = 3;
  int max_saccade_words = 4;
  BoundarySet drop{Boundary::sentence_start, Boundary::sentence_end};

  /// Self-paced reading: 100..3000 ms, drop subjects with <= 3 correct answers, drop
  /// sentence-initial and sentence-final words. Eye tracking: unfixated words, saccades
  /// longer than four words, and every sentence/screen/document/line edge.
  static FilterSpec defaults(Modality m) {
    FilterSpec f;
    f.modality = m;
    if (m == Modality::et) {
      f.min_rt_ms = 0;
      f.max_rt_ms = std::numeric_limits<int>::max();
      f.min_correct_questions = -1;
      f.drop = BoundarySet::all();
    }
    return f;
  }

  void validate() const {
    if (min_rt_ms >= max_rt_ms) throw ValidationError("filter: min_rt_ms must be < max_rt_ms");
  }

  nlohmann::json to_json() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < kBoundaryNames.size(); ++i)
      if (drop.contains(static_cast<Boundary>(i))) names.emplace_back(kBoundaryNames[i]);
    return {{"modality", std::string(to_string(modality))},
            {"min_rt_ms", min_rt_ms},
            {"max_rt_ms", max_rt_ms},
            {"min_correct_questions", min_correct_questions},
            {"max_saccade_words", max_saccade_words},
            {"drop_boundaries", names}};
  }

  /// Missing keys fall back to the modality defaults.
  static FilterSpec from_json(const nlohmann::json& j, Modality fallback) {
    Modality m = j.contains("modality") ? parse_modality(j.at("modality").get<std::string>()) : fallback;
    FilterSpec f = defaults(m);
    if (j.contains("min_rt_ms")) f.min_rt_ms = j.at("min_rt_ms").get<int>();
    if (j.contains("max_rt_ms")) f.max_rt_ms = j.at("max_rt_ms").get<int>();
    if (j.contains("min_correct_questions")) f.min_correct_questions = j.at("min_correct_questions").get<int>();
    if (j.contains("max_saccade_words")) f.max_saccade_words = j.at("max_saccade_words").get<int>();
    if (j.contains("drop_boundaries")) {
      f.drop = BoundarySet{};
      for (const auto& n : j.at("drop_boundaries")) f.drop = f.drop | BoundarySet::parse(n.get<std::string>());
    }
    f.validate();
    return f;
  }
};

struct ReadingCorpus {
  Modality modality = Modality::spr;
  std::vector<WordToken> tokens;
  std::vector<Observation> observations;
  std::map<std::int64_t, int> subject_scores;

  const WordToken& token_of(const Observation& o) const { return tokens[o.token]; }

  /// Document ids in corpus order.
  std::vector<std::string> documents() const {
    std::vector<std::string> docs;
    for (const auto& t : tokens)
      if (docs.empty() || docs.back() != t.doc_id) docs.push_back(t.doc_id);
    return docs;
  }
};

namespace detail {

inline std::optional<Observation> parse_row(std::size_t line, const std::vector<std::string_view>& f,
                                            const text::TsvReader& r, Modality m,
                                            const std::array<std::size_t, 6>& col,
                                            std::optional<std::size_t> c_fix,
                                            std::optional<std::size_t> c_prev,
                                            std::optional<std::size_t> c_sacc,
                                            std::optional<std::size_t> c_flags) {
  auto fail = [&](const std::string& what) -> ParseError { return ParseError(r.name(), line, what); };
  Observation o;
  auto subj = text::parse_int<std::int64_t>(f[col[0]]);
  if (!subj) throw fail("subject_id is not an integer: '" + std::string(f[col[0]]) + "'");
  o.subject_id = *subj;
  auto rt = text::parse_double(f[col[5]]);
  if (!rt || !std::isfinite(*rt)) throw fail("rt_ms is not a number: '" + std::string(f[col[5]]) + "'");
  if (*rt < 0) throw fail("rt_ms must be positive");
  o.rt_ms = *rt;
  o.log_rt = std::log(*rt);
  if (m == Modality::et) {
    auto fx = text::parse_bool(f[*c_fix]);
    if (!fx) throw fail("fixated is not a boolean");
    auto pf = text::parse_bool(f[*c_prev]);
    if (!pf) throw fail("prev_fixated is not a boolean");
    auto sl = text::parse_int<int>(f[*c_sacc]);
    if (!sl) throw fail("saccade_len is not an integer");
    o.fixated = *fx;
    o.prev_fixated = *pf;
    o.saccade_len = *sl;
  }
  // unfixated eye-tracking words legitimately carry a zero duration; the filter removes them
  if (o.rt_ms == 0 && !(m == Modality::et && o.fixated == false)) throw fail("rt_ms must be positive");
  if (c_flags) {
    try {
      o.boundaries = BoundarySet::parse(f[*c_flags]);
    } catch (const ValidationError& e) {
      throw fail(e.what());
    }
  }
  return o;
}

}  // namespace detail

/// Parses a corpus TSV (see README for the column layout). Tokens are ordered by document
/// first appearance, then sentence_id, then word_pos; corpus_word_idx follows that order.
inline ReadingCorpus ingest(const text::TsvReader& r, Modality modality) {
  std::array<std::size_t, 6> col = {r.require("subject_id"), r.require("doc_id"),
                                    r.require("sentence_id"), r.require("word_pos"),
                                    r.require("surface"), r.require("rt_ms")};
  std::optional<std::size_t> c_fix, c_prev, c_sacc;
  if (modality == Modality::et) {
    c_fix = r.require("fixated");
    c_prev = r.require("prev_fixated");
    c_sacc = r.require("saccade_len");
  }
  auto c_flags = r.find("boundary_flags");

  struct Key {
    std::size_t doc_rank;
    std::int64_t sentence;
    int pos;
    bool operator<(const Key& o) const {
      return std::tie(doc_rank, sentence, pos) < std::tie(o.doc_rank, o.sentence, o.pos);
    }
  };
  std::unordered_map<std::string, std::size_t> doc_rank;
  std::vector<std::string> doc_names;
  std::map<std::int64_t, std::string> sentence_doc;
  std::map<Key, std::string> surfaces;
  struct Pending {
    Observation obs;
    Key key;
    std::size_t line;
  };
  std::vector<Pending> pending;

  r.for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
    auto o = detail::parse_row(line, f, r, modality, col, c_fix, c_prev, c_sacc, c_flags);
    std::string doc(text::trim(f[col[1]]));
    if (doc.empty()) throw ParseError(r.name(), line, "empty doc_id");
    auto sid = text::parse_int<std::int64_t>(f[col[2]]);
    if (!sid) throw ParseError(r.name(), line, "sentence_id is not an integer");
    auto pos = text::parse_int<int>(f[col[3]]);
    if (!pos || *pos < 1) throw ParseError(r.name(), line, "word_pos must be an integer >= 1");
    auto [dit, fresh] = doc_rank.emplace(doc, doc_names.size());
    if (fresh) doc_names.push_back(doc);
    auto [sit, sfresh] = sentence_doc.emplace(*sid, doc);
    if (!sfresh && sit->second != doc)
      throw ParseError(r.name(), line, "sentence_id " + std::to_string(*sid) +
                                           " appears in documents '" + sit->second + "' and '" + doc + "'");
    Key key{dit->second, *sid, *pos};
    std::string surface(f[col[4]]);
    auto [wit, wfresh] = surfaces.emplace(key, surface);
    if (!wfresh && wit->second != surface)
      throw ParseError(r.name(), line, "surface '" + surface + "' conflicts with earlier '" + wit->second + "'");
    pending.push_back({*o, key, line});
  });

  ReadingCorpus c;
  c.modality = modality;
  std::map<Key, std::size_t> index;
  for (const auto& [key, surface] : surfaces) {
    WordToken t;
    t.doc_id = doc_names[key.doc_rank];
    t.sentence_id = key.sentence;
    t.word_pos = key.pos;
    t.surface = surface;
    t.char_len = static_cast<int>(text::utf8_length(surface));
    t.corpus_word_idx = c.tokens.size();
    index.emplace(key, c.tokens.size());
    c.tokens.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < c.tokens.size(); ++i) {
    auto& t = c.tokens[i];
    bool first_in_sentence = i == 0 || c.tokens[i - 1].sentence_id != t.sentence_id ||
                             c.tokens[i - 1].doc_id != t.doc_id;
    bool last_in_sentence = i + 1 == c.tokens.size() || c.tokens[i + 1].sentence_id != t.sentence_id ||
                            c.tokens[i + 1].doc_id != t.doc_id;
    if (first_in_sentence) t.implied.insert(Boundary::sentence_start);
    if (last_in_sentence) t.implied.insert(Boundary::sentence_end);
    if (i == 0 || c.tokens[i - 1].doc_id != t.doc_id) t.implied.insert(Boundary::doc_start);
    if (i + 1 == c.tokens.size() || c.tokens[i + 1].doc_id != t.doc_id) t.implied.insert(Boundary::doc_end);
  }

  std::set<std::pair<std::int64_t, std::size_t>> seen;
  c.observations.reserve(pending.size());
  for (auto& p : pending) {
    p.obs.token = index.at(p.key);
    if (!seen.emplace(p.obs.subject_id, p.obs.token).second)
      throw ParseError(r.name(), p.line, "duplicate observation for subject " +
                                             std::to_string(p.obs.subject_id) + " at corpus word " +
                                             std::to_string(p.obs.token));
    c.observations.push_back(p.obs);
  }
  return c;
}

inline ReadingCorpus ingest_file(const std::string& path, Modality modality) {
  return ingest(text::TsvReader::from_file(path), modality);
}

/// Sidecar comprehension scores: columns subject_id, correct.
inline std::map<std::int64_t, int> load_subject_scores(const text::TsvReader& r) {
  auto cs = r.require("subject_id");
  auto cc = r.require("correct");
  std::map<std::int64_t, int> out;
  r.for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
    auto s = text::parse_int<std::int64_t>(f[cs]);
    auto n = text::parse_int<int>(f[cc]);
    if (!s || !n) throw ParseError(r.name(), line, "expected integer subject_id and correct");
    out[*s] = *n;
  });
  return out;
}

/// True when the observation survives the filter.
inline bool passes(const ReadingCorpus& c, const Observation& o, const FilterSpec& spec) {
  if (o.rt_ms < spec.min_rt_ms || o.rt_ms > spec.max_rt_ms) return false;
  if ((o.boundaries | c.tokens[o.token].implied).intersects(spec.drop)) return false;
  if (spec.modality == Modality::spr) {
    auto it = c.subject_scores.find(o.subject_id);
    if (it != c.subject_scores.end() && it->second <= spec.min_correct_questions) return false;
  } else {
    if (o.fixated && !*o.fixated) return false;
    if (o.saccade_len && std::abs(*o.saccade_len) > spec.max_saccade_words) return false;
  }
  return true;
}

/// Removes observations rejected by the filter; the token list is left untouched.
inline ReadingCorpus filter(const ReadingCorpus& c, const FilterSpec& spec) {
  spec.validate();
  ReadingCorpus out;
  out.modality = c.modality;
  out.tokens = c.tokens;
  out.subject_scores = c.subject_scores;
  for (const auto& o : c.observations)
    if (passes(c, o, spec)) out.observations.push_back(o);
  return out;
}

enum class PartitionLabel { exploratory, heldout };

inline std::string_view to_string(PartitionLabel p) {
  return p == PartitionLabel::exploratory ? "exploratory" : "heldout";
}

inline PartitionLabel parse_partition(std::string_view s) {
  if (s == "exploratory") return PartitionLabel::exploratory;
  if (s == "heldout") return PartitionLabel::heldout;
  throw ValidationError("unknown partition '" + std::string(s) + "'");
}

/// Even (subject_id + sentence_id) is exploratory, odd is held out.
inline PartitionLabel partition_of(std::int64_t subject_id, std::int64_t sentence_id) {
  return ((subject_id + sentence_id) % 2 == 0) ? PartitionLabel::exploratory : PartitionLabel::heldout;
}

inline std::vector<PartitionLabel> partition(const ReadingCorpus& c) {
  std::vector<PartitionLabel> out;
  out.reserve(c.observations.size());
  for (const auto& o : c.observations) out.push_back(partition_of(o.subject_id, c.tokens[o.token].sentence_id));
  return out;
}

/// Keeps only observations in the given partition.
inline ReadingCorpus select_partition(const ReadingCorpus& c, PartitionLabel label) {
  ReadingCorpus out;
  out.modality = c.modality;
  out.tokens = c.tokens;
  out.subject_scores = c.subject_scores;
  for (const auto& o : c.observations)
    if (partition_of(o.subject_id, c.tokens[o.token].sentence_id) == label) out.observations.push_back(o);
  return out;
}

}  // namespace rtool
