#pragma once

// Per-word linguistic properties derived from gold trees and dependencies: part of speech,
// named entities, dependency-locality integration cost, and left-corner structural flags.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "rtool/corpus.hpp"
#include "rtool/error.hpp"
#include "rtool/text.hpp"
#include "rtool/tree.hpp"

namespace rtool {

enum class CoarseClass { noun, adjective, verb, modal, conjunction, relativizer, pronoun_np, other };

inline constexpr std::array<std::string_view, 8> kCoarseNames = {
    "noun", "adjective", "verb", "modal", "conjunction", "relativizer", "pronoun_np", "other"};

inline std::string_view to_string(CoarseClass c) { return kCoarseNames[static_cast<std::size_t>(c)]; }

inline CoarseClass parse_coarse(std::string_view s) {
  for (std::size_t i = 0; i < kCoarseNames.size(); ++i)
    if (kCoarseNames[i] == s) return static_cast<CoarseClass>(i);
  throw ValidationError("unknown coarse class '" + std::string(s) + "'");
}

/// Label tables used by the annotators. Lookups use base_label() of the tree labels.
struct AnnotationConfig {
  std::map<std::string, CoarseClass, std::less<>> coarse = {
      {"N", CoarseClass::noun},        {"NN", CoarseClass::noun},        {"NNS", CoarseClass::noun},
      {"NNP", CoarseClass::noun},      {"NNPS", CoarseClass::noun},      {"NOUN", CoarseClass::noun},
      {"A", CoarseClass::adjective},   {"ADJ", CoarseClass::adjective},  {"JJ", CoarseClass::adjective},
      {"JJR", CoarseClass::adjective}, {"JJS", CoarseClass::adjective},  {"V", CoarseClass::verb},
      {"VB", CoarseClass::verb},       {"VBD", CoarseClass::verb},       {"VBG", CoarseClass::verb},
      {"VBN", CoarseClass::verb},      {"VBP", CoarseClass::verb},       {"VBZ", CoarseClass::verb},
      {"MD", CoarseClass::modal},      {"MOD", CoarseClass::modal},      {"CC", CoarseClass::conjunction},
      {"CONJ", CoarseClass::conjunction}, {"REL", CoarseClass::relativizer}, {"WDT", CoarseClass::relativizer},
      {"WP", CoarseClass::relativizer}, {"PRP", CoarseClass::pronoun_np}, {"PRON", CoarseClass::pronoun_np},
  };
  /// Fine categories counted as finite verbs (discourse referents alongside nouns).
  std::set<std::string, std::less<>> finite_verbs = {"V", "VBD", "VBP", "VBZ"};
  /// Phrasal categories that count as sentential clauses.
  std::set<std::string, std::less<>> sentential = {"S", "SBAR", "SQ", "SINV", "SBARQ"};
  /// Categories that introduce a coordination.
  std::set<std::string, std::less<>> conjunctions = {"CC", "CONJ"};
  /// Noun-phrase categories.
  std::set<std::string, std::less<>> noun_phrases = {"NP", "NX", "NML"};
  /// Capitalized words never flagged as named entities.
  std::set<std::string, std::less<>> ne_exclusions = {"I"};

  CoarseClass coarse_of(std::string_view fine) const {
    auto it = coarse.find(base_label(fine));
    return it == coarse.end() ? CoarseClass::other : it->second;
  }
  bool is_nominal(std::string_view label) const {
    return noun_phrases.count(base_label(label)) > 0 || coarse_of(label) == CoarseClass::noun;
  }
};

struct DependencyArc {
  int dependent = 0;  // 0-based word index within the sentence
  int head = 0;
};

struct WordProperties {
  std::string pos_category;
  CoarseClass coarse = CoarseClass::other;
  bool is_named_entity = false;
  int dlt_cost = 0;
  int embedding_depth = 0;
  int ends_center_embedding_len = 0;
  bool before_sentential_clause = false;
  bool ends_first_conjunct = false;
  bool ends_first_conjunct_np = false;
  bool begins_adjectival_np = false;

  bool operator==(const WordProperties&) const = default;
};

/// Capitalized, non-sentence-initial words outside the exclusion lexicon.
inline std::vector<bool> mark_named_entities(const std::vector<std::string>& words,
                                             const std::set<std::string, std::less<>>& exclusions) {
  std::vector<bool> out(words.size(), false);
  for (std::size_t i = 1; i < words.size(); ++i) {
    const auto& w = words[i];
    if (w.empty() || !(w[0] >= 'A' && w[0] <= 'Z')) continue;
    if (exclusions.count(w)) continue;
    out[i] = true;
  }
  return out;
}

/// Integration cost per word: for every arc whose rightmost endpoint is the word, the number
/// of discourse referents strictly between the endpoints; plus one if the word is itself a
/// referent (once per word).
inline std::vector<int> dlt_cost(std::size_t n_words, const std::vector<DependencyArc>& arcs,
                                 const std::vector<bool>& referent) {
  if (referent.size() != n_words) throw ValidationError("dlt_cost: referent flags do not match sentence length");
  std::vector<int> prefix(n_words + 1, 0);
  for (std::size_t i = 0; i < n_words; ++i) prefix[i + 1] = prefix[i] + (referent[i] ? 1 : 0);
  std::vector<int> cost(n_words, 0);
  for (const auto& a : arcs) {
    if (a.dependent == a.head) throw ValidationError("dependency arc from a word to itself");
    if (a.dependent < 0 || a.head < 0 || a.dependent >= static_cast<int>(n_words) || a.head >= static_cast<int>(n_words))
      throw ValidationError("dependency arc index out of range");
    const int lo = std::min(a.dependent, a.head), hi = std::max(a.dependent, a.head);
    cost[static_cast<std::size_t>(hi)] += prefix[static_cast<std::size_t>(hi)] - prefix[static_cast<std::size_t>(lo) + 1];
  }
  for (std::size_t i = 0; i < n_words; ++i)
    if (referent[i]) cost[i] += 1;
  return cost;
}

struct LeftCornerStep {
  int embedding_depth = 0;
  int ends_center_embedding_len = 0;
};

/// Left-corner traversal of a binarized gold tree. The store holds fragments (active
/// constituent, awaited constituent); a word either completes the awaited constituent
/// (lexical match) or starts a new left corner, and a completed constituent either
/// fills the fragment below (grammatical match) or opens a new fragment. Depth is the
/// store size after the word; a fragment popped while others remain beneath it ends an
/// embedded constituent whose word length is reported.
inline std::vector<LeftCornerStep> left_corner_walk(const FlatTree& t) {
  constexpr int kTop = -1;
  auto parent = [&](int id) { return t.nodes[static_cast<std::size_t>(id)].parent; };
  auto kids = [&](int id) -> const std::vector<int>& { return t.nodes[static_cast<std::size_t>(id)].children; };
  for (const auto& n : t.nodes)
    if (n.children.size() > 2) throw Error("left-corner traversal requires a binarized tree");

  std::vector<std::pair<int, int>> store = {{kTop, 0}};
  std::vector<LeftCornerStep> out;
  for (int w = 0; w < t.n_words; ++w) {
    if (store.empty()) throw Error("left-corner traversal finished before the last word");
    int x = t.preterminal_of[static_cast<std::size_t>(w)];
    int ended = 0;
    while (true) {
      const auto [active, awaited] = store.back();
      while (x != awaited && parent(x) >= 0 && kids(parent(x)).size() == 1) x = parent(x);
      if (x == awaited) {
        store.pop_back();
        if (active == kTop) break;
        ended = std::max(ended, t.length(active));
        x = active;
        continue;
      }
      const int p = parent(x);
      if (p < 0 || kids(p).size() != 2 || kids(p)[0] != x) throw Error("left-corner traversal lost its place");
      const int right = kids(p)[1];
      if (p == awaited)
        store.back().second = right;
      else
        store.emplace_back(p, right);
      break;
    }
    out.push_back({static_cast<int>(store.size()), ended});
  }
  if (!store.empty()) throw Error("left-corner traversal left incomplete constituents");
  return out;
}

struct StructuralFlags {
  std::vector<int> embedding_depth;
  std::vector<int> ends_center_embedding_len;
  std::vector<bool> before_sentential_clause;
  std::vector<bool> ends_first_conjunct;
  std::vector<bool> ends_first_conjunct_np;
  std::vector<bool> begins_adjectival_np;
};

/// Structural flags for one sentence tree. Depth and center-embedding ends come from the
/// binarized tree; clause, coordination and adjectival-NP flags from the original bracketing.
inline StructuralFlags leftcorner_features(const TreeNode& tree, const AnnotationConfig& cfg = {}) {
  const FlatTree orig = FlatTree::build(tree);
  const FlatTree bin = FlatTree::build(binarize_right(tree));
  const auto n = static_cast<std::size_t>(orig.n_words);
  StructuralFlags f;
  f.embedding_depth.resize(n);
  f.ends_center_embedding_len.resize(n);
  f.before_sentential_clause.assign(n, false);
  f.ends_first_conjunct.assign(n, false);
  f.ends_first_conjunct_np.assign(n, false);
  f.begins_adjectival_np.assign(n, false);

  auto steps = left_corner_walk(bin);
  for (std::size_t i = 0; i < n; ++i) {
    f.embedding_depth[i] = steps[i].embedding_depth;
    f.ends_center_embedding_len[i] = steps[i].ends_center_embedding_len;
  }

  for (std::size_t id = 0; id < orig.nodes.size(); ++id) {
    const auto& node = orig.nodes[id];
    if (node.word >= 0) continue;
    const auto base = base_label(node.label);
    if (cfg.sentential.count(base) && node.first > 0)
      f.before_sentential_clause[static_cast<std::size_t>(node.first - 1)] = true;

    // coordination: a conjunction child preceded by at least one conjunct
    const auto& ch = node.children;
    for (std::size_t k = 1; k < ch.size(); ++k) {
      const auto& c = orig.nodes[static_cast<std::size_t>(ch[k])];
      if (!cfg.conjunctions.count(base_label(c.label))) continue;
      const auto& first = orig.nodes[static_cast<std::size_t>(ch[0])];
      if (cfg.conjunctions.count(base_label(first.label))) break;
      f.ends_first_conjunct[static_cast<std::size_t>(first.last)] = true;
      if (cfg.noun_phrases.count(base_label(first.label)))
        f.ends_first_conjunct_np[static_cast<std::size_t>(first.last)] = true;
      break;
    }

    // nominal modifier run inside a noun phrase: a nominal child followed by a nominal
    // sibling and not itself preceded by one
    if (cfg.noun_phrases.count(base)) {
      for (std::size_t k = 0; k + 1 < ch.size(); ++k) {
        const auto& c = orig.nodes[static_cast<std::size_t>(ch[k])];
        const auto& next = orig.nodes[static_cast<std::size_t>(ch[k + 1])];
        if (!cfg.is_nominal(c.label) || !cfg.is_nominal(next.label)) continue;
        if (k > 0 && cfg.is_nominal(orig.nodes[static_cast<std::size_t>(ch[k - 1])].label)) continue;
        f.begins_adjectival_np[static_cast<std::size_t>(c.first)] = true;
      }
    }
  }
  return f;
}

/// All properties for one sentence. `words` are the corpus surfaces; the tree's leaf count must match.
inline std::vector<WordProperties> annotate_sentence(const TreeNode& tree, const std::vector<std::string>& words,
                                                     const std::vector<DependencyArc>& arcs,
                                                     const AnnotationConfig& cfg = {}) {
  const FlatTree flat = FlatTree::build(tree);
  if (static_cast<std::size_t>(flat.n_words) != words.size())
    throw AlignmentError("tree has " + std::to_string(flat.n_words) + " leaves but the sentence has " +
                         std::to_string(words.size()) + " words");
  const auto n = words.size();
  std::vector<WordProperties> props(n);
  std::vector<bool> referent(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pt = flat.nodes[static_cast<std::size_t>(flat.preterminal_of[i])];
    props[i].pos_category = pt.label;
    props[i].coarse = cfg.coarse_of(pt.label);
    referent[i] = props[i].coarse == CoarseClass::noun || cfg.finite_verbs.count(base_label(pt.label)) > 0;
  }
  auto ne = mark_named_entities(words, cfg.ne_exclusions);
  auto cost = dlt_cost(n, arcs, referent);
  auto s = leftcorner_features(tree, cfg);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = props[i];
    p.is_named_entity = ne[i];
    p.dlt_cost = cost[i];
    p.embedding_depth = s.embedding_depth[i];
    p.ends_center_embedding_len = s.ends_center_embedding_len[i];
    p.before_sentential_clause = s.before_sentential_clause[i];
    p.ends_first_conjunct = s.ends_first_conjunct[i];
    p.ends_first_conjunct_np = s.ends_first_conjunct_np[i];
    p.begins_adjectival_np = s.begins_adjectival_np[i];
  }
  return props;
}

// --- head percolation (used when no dependency file is supplied) --------------------------

/// Dependencies read off a tree with a small head-rule table: each phrase's head child is
/// chosen by category priority, and the lexical heads of the other children depend on it.
inline std::vector<DependencyArc> head_dependencies(const TreeNode& tree) {
  struct Rule {
    bool from_right;
    std::vector<std::string_view> priority;
  };
  static const std::map<std::string, Rule, std::less<>> rules = {
      {"S", {false, {"VP", "S", "SINV", "SQ"}}},
      {"SINV", {false, {"VP", "MD", "VBZ", "VBD", "VBP", "S"}}},
      {"SQ", {false, {"VP", "MD", "VBZ", "VBD", "VBP"}}},
      {"SBAR", {false, {"S", "SQ", "SINV", "SBAR"}}},
      {"VP", {false, {"VBD", "VBZ", "VBP", "VB", "VBN", "VBG", "V", "MD", "VP"}}},
      {"NP", {true, {"NN", "NNS", "NNP", "NNPS", "N", "NX", "NML", "NP", "PRP", "CD"}}},
      {"PP", {false, {"IN", "TO", "P", "PP"}}},
      {"ADJP", {true, {"JJ", "JJR", "JJS", "A", "ADJ", "ADJP"}}},
      {"ADVP", {true, {"RB", "RBR", "RBS", "ADVP"}}},
  };
  const FlatTree t = FlatTree::build(tree);
  std::vector<int> lexhead(t.nodes.size(), -1);
  std::vector<DependencyArc> arcs;
  // children always have larger ids than their parent, so a reverse sweep is bottom-up
  for (std::size_t r = t.nodes.size(); r-- > 0;) {
    const auto& node = t.nodes[r];
    if (node.word >= 0) {
      lexhead[r] = node.word;
      continue;
    }
    const auto& ch = node.children;
    std::size_t head = 0;
    auto it = rules.find(base_label(node.label));
    bool found = false;
    if (it != rules.end()) {
      for (auto cat : it->second.priority) {
        for (std::size_t k = 0; k < ch.size(); ++k) {
          const std::size_t kk = it->second.from_right ? ch.size() - 1 - k : k;
          if (base_label(t.nodes[static_cast<std::size_t>(ch[kk])].label) == cat) {
            head = kk;
            found = true;
            break;
          }
        }
        if (found) break;
      }
      if (!found) head = it->second.from_right ? ch.size() - 1 : 0;
    }
    lexhead[r] = lexhead[static_cast<std::size_t>(ch[head])];
    for (std::size_t k = 0; k < ch.size(); ++k)
      if (k != head) arcs.push_back({lexhead[static_cast<std::size_t>(ch[k])], lexhead[r]});
  }
  std::sort(arcs.begin(), arcs.end(), [](const auto& a, const auto& b) {
    return std::tie(a.dependent, a.head) < std::tie(b.dependent, b.head);
  });
  return arcs;
}

// --- corpus-level annotation and file formats ---------------------------------------------

using SentenceKey = std::pair<std::string, std::int64_t>;  // (doc_id, sentence_id)

/// Trees keyed by sentence. With an index TSV (doc_id, sentence_id per tree line) trees are
/// matched by key; without one they are taken in corpus sentence order.
inline std::map<SentenceKey, TreeNode> load_trees(const std::string& trees_content, const std::string& name,
                                                  const std::optional<text::TsvReader>& index,
                                                  const ReadingCorpus& corpus) {
  auto trees = parse_tree_lines(text::lines(trees_content), name);
  std::vector<SentenceKey> keys;
  if (index) {
    auto cd = index->require("doc_id");
    auto cs = index->require("sentence_id");
    index->for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
      auto s = text::parse_int<std::int64_t>(f[cs]);
      if (!s) throw ParseError(index->name(), line, "sentence_id is not an integer");
      keys.emplace_back(std::string(text::trim(f[cd])), *s);
    });
  } else {
    for (const auto& t : corpus.tokens) {
      SentenceKey k{t.doc_id, t.sentence_id};
      if (keys.empty() || keys.back() != k) keys.push_back(k);
    }
  }
  if (keys.size() != trees.size())
    throw AlignmentError(name + ": " + std::to_string(trees.size()) + " trees for " + std::to_string(keys.size()) +
                         " indexed sentences");
  std::map<SentenceKey, TreeNode> out;
  for (std::size_t i = 0; i < trees.size(); ++i) out.emplace(keys[i], std::move(trees[i]));
  return out;
}

/// Dependencies TSV: doc_id, sentence_id, dependent_pos, head_pos (1-based word positions).
inline std::map<SentenceKey, std::vector<DependencyArc>> load_dependencies(const text::TsvReader& r) {
  auto cd = r.require("doc_id");
  auto cs = r.require("sentence_id");
  auto cdep = r.require("dependent_pos");
  auto chead = r.require("head_pos");
  std::map<SentenceKey, std::vector<DependencyArc>> out;
  r.for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
    auto s = text::parse_int<std::int64_t>(f[cs]);
    auto d = text::parse_int<int>(f[cdep]);
    auto h = text::parse_int<int>(f[chead]);
    if (!s || !d || !h || *d < 1 || *h < 1) throw ParseError(r.name(), line, "bad dependency row");
    out[{std::string(text::trim(f[cd])), *s}].push_back({*d - 1, *h - 1});
  });
  return out;
}

/// Properties for every corpus word whose sentence has a tree (indexed by corpus_word_idx).
/// Sentences without a dependency entry fall back to head percolation when `deps` is null.
inline std::vector<std::optional<WordProperties>> annotate_corpus(
    const ReadingCorpus& corpus, const std::map<SentenceKey, TreeNode>& trees,
    const std::map<SentenceKey, std::vector<DependencyArc>>* deps, const AnnotationConfig& cfg = {}) {
  std::vector<std::optional<WordProperties>> out(corpus.tokens.size());
  std::size_t i = 0;
  while (i < corpus.tokens.size()) {
    std::size_t j = i;
    const SentenceKey key{corpus.tokens[i].doc_id, corpus.tokens[i].sentence_id};
    std::vector<std::string> words;
    while (j < corpus.tokens.size() && corpus.tokens[j].doc_id == key.first &&
           corpus.tokens[j].sentence_id == key.second)
      words.push_back(corpus.tokens[j++].surface);
    auto t = trees.find(key);
    if (t != trees.end()) {
      std::vector<DependencyArc> arcs;
      if (deps) {
        auto d = deps->find(key);
        if (d != deps->end()) arcs = d->second;
      } else {
        arcs = head_dependencies(t->second);
      }
      std::vector<WordProperties> props;
      try {
        props = annotate_sentence(t->second, words, arcs, cfg);
      } catch (const AlignmentError& e) {
        throw AlignmentError("document '" + key.first + "' sentence " + std::to_string(key.second) + ": " + e.what());
      }
      for (std::size_t k = 0; k < props.size(); ++k) out[i + k] = std::move(props[k]);
    }
    i = j;
  }
  return out;
}

inline constexpr std::string_view kPropertiesHeader =
    "corpus_word_idx\tdoc_id\tsentence_id\tword_pos\tsurface\tpos_category\tcoarse_class\tis_named_entity\t"
    "dlt_cost\tembedding_depth\tends_center_embedding_len\tbefore_sentential_clause\tends_first_conjunct\t"
    "ends_first_conjunct_np\tbegins_adjectival_np";

inline std::string write_properties(const ReadingCorpus& corpus,
                                    const std::vector<std::optional<WordProperties>>& props) {
  std::string out(kPropertiesHeader);
  out += '\n';
  auto b = [](bool v) { return v ? "1" : "0"; };
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (!props[i]) continue;
    const auto& t = corpus.tokens[i];
    const auto& p = *props[i];
    out += std::to_string(i) + '\t' + t.doc_id + '\t' + std::to_string(t.sentence_id) + '\t' +
           std::to_string(t.word_pos) + '\t' + text::escape_cell(t.surface) + '\t' + p.pos_category + '\t' +
           std::string(to_string(p.coarse)) + '\t' + b(p.is_named_entity) + '\t' + std::to_string(p.dlt_cost) +
           '\t' + std::to_string(p.embedding_depth) + '\t' + std::to_string(p.ends_center_embedding_len) + '\t' +
           b(p.before_sentential_clause) + '\t' + b(p.ends_first_conjunct) + '\t' + b(p.ends_first_conjunct_np) +
           '\t' + b(p.begins_adjectival_np) + '\n';
  }
  return out;
}

inline std::vector<std::optional<WordProperties>> read_properties(const text::TsvReader& r, std::size_t n_words) {
  std::vector<std::optional<WordProperties>> out(n_words);
  const auto ci = r.require("corpus_word_idx");
  const auto cpos = r.require("pos_category");
  const auto cc = r.require("coarse_class");
  const std::array<std::size_t, 8> cols = {r.require("is_named_entity"),         r.require("dlt_cost"),
                                           r.require("embedding_depth"),         r.require("ends_center_embedding_len"),
                                           r.require("before_sentential_clause"), r.require("ends_first_conjunct"),
                                           r.require("ends_first_conjunct_np"),  r.require("begins_adjectival_np")};
  r.for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
    auto i = text::parse_int<std::size_t>(f[ci]);
    if (!i || *i >= n_words) throw ParseError(r.name(), line, "corpus_word_idx out of range");
    WordProperties p;
    p.pos_category = std::string(f[cpos]);
    try {
      p.coarse = parse_coarse(f[cc]);
    } catch (const ValidationError& e) {
      throw ParseError(r.name(), line, e.what());
    }
    auto flag = [&](std::size_t c) {
      auto v = text::parse_bool(f[c]);
      if (!v) throw ParseError(r.name(), line, "expected 0/1");
      return *v;
    };
    auto num = [&](std::size_t c) {
      auto v = text::parse_int<int>(f[c]);
      if (!v) throw ParseError(r.name(), line, "expected an integer");
      return *v;
    };
    p.is_named_entity = flag(cols[0]);
    p.dlt_cost = num(cols[1]);
    p.embedding_depth = num(cols[2]);
    p.ends_center_embedding_len = num(cols[3]);
    p.before_sentential_clause = flag(cols[4]);
    p.ends_first_conjunct = flag(cols[5]);
    p.ends_first_conjunct_np = flag(cols[6]);
    p.begins_adjectival_np = flag(cols[7]);
    out[*i] = std::move(p);
  });
  return out;
}

}  // namespace rtool
