#pragma once

// Per-token surprisal records, context-window stitching, subword-to-word aggregation,
// and corpus perplexity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtool/corpus.hpp"
#include "rtool/error.hpp"
#include "rtool/text.hpp"

namespace rtool {

/// The only nats -> bits conversion in the toolkit.
inline double to_bits(double nats) { return nats / std::numbers::ln2; }

enum class Family { gpt2, gpt_neo, opt, other };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::gpt2: return "gpt2";
    case Family::gpt_neo: return "gpt-neo";
    case Family::opt: return "opt";
    case Family::other: return "other";
  }
  return "other";
}

inline Family parse_family(std::string_view s) {
  if (s == "gpt2") return Family::gpt2;
  if (s == "gpt-neo") return Family::gpt_neo;
  if (s == "opt") return Family::opt;
  if (s == "other") return Family::other;
  throw ValidationError("unknown model family '" + std::string(s) + "'");
}

struct VariantMeta {
  Family family = Family::other;
  std::string name;
  std::int64_t n_params = 0;
  std::int64_t context_size = 0;
  std::optional<double> perplexity;

  void validate() const {
    if (name.empty()) throw ValidationError("variant metadata: empty name");
    if (n_params <= 0) throw ValidationError("variant " + name + ": n_params must be > 0");
    if (context_size <= 0) throw ValidationError("variant " + name + ": context_size must be > 0");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"family", std::string(to_string(family))},
                        {"name", name},
                        {"n_params", n_params},
                        {"context_size", context_size}};
    if (perplexity) j["perplexity"] = *perplexity;
    return j;
  }

  static VariantMeta from_json(const nlohmann::json& j) {
    VariantMeta m;
    try {
      m.family = parse_family(j.at("family").get<std::string>());
      m.name = j.at("name").get<std::string>();
      m.n_params = j.at("n_params").get<std::int64_t>();
      m.context_size = j.at("context_size").get<std::int64_t>();
      if (j.contains("perplexity")) m.perplexity = j.at("perplexity").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("variant metadata: ") + e.what());
    }
    m.validate();
    return m;
  }
};

struct TokenScore {
  std::string doc_id;
  std::size_t token_idx = 0;
  std::string text;
  std::size_t char_start = 0;  // code-point offsets into the single-space-joined document
  std::size_t char_end = 0;
  double nll_nats = 0;
};

struct Window {
  std::size_t window_start = 0;
  std::size_t score_start = 0;
  std::size_t window_end = 0;
  bool operator==(const Window&) const = default;
};

using WindowPlan = std::vector<Window>;

/// Half-overlapping context windows: each window after the first re-reads the second half
/// of its predecessor as context and scores only the tokens past the predecessor's end.
inline WindowPlan plan_windows(std::size_t n_tokens, std::size_t context_size) {
  if (n_tokens < 1) throw ValidationError("plan_windows: n_tokens must be >= 1");
  if (context_size < 2 || context_size % 2 != 0)
    throw ValidationError("plan_windows: context_size must be even and >= 2, got " +
                          std::to_string(context_size));
  const std::size_t half = context_size / 2;
  WindowPlan plan;
  plan.push_back({0, 0, std::min(n_tokens, context_size)});
  while (plan.back().window_end < n_tokens) {
    const auto& prev = plan.back();
    std::size_t start = prev.window_end - half;
    plan.push_back({start, prev.window_end, std::min(n_tokens, start + context_size)});
  }
  return plan;
}

struct SurprisalTable {
  VariantMeta variant;
  /// Indexed by corpus_word_idx; empty for words no subword token landed on.
  std::vector<std::optional<double>> word_surprisal;
  double coverage = 0;
  long double token_nll_sum = 0;  // extended precision keeps uniform tables exact
  std::size_t token_count = 0;
};

/// Character spans of each corpus word inside its document's single-space-joined text.
struct DocumentLayout {
  std::vector<std::size_t> words;  // corpus_word_idx in order
  std::vector<std::size_t> start;
  std::vector<std::size_t> end;
  std::size_t length = 0;
};

inline std::map<std::string, DocumentLayout> layout_documents(std::span<const WordToken> words) {
  std::map<std::string, DocumentLayout> docs;
  for (const auto& w : words) {
    auto& d = docs[w.doc_id];
    if (!d.words.empty()) d.length += 1;
    d.words.push_back(w.corpus_word_idx);
    d.start.push_back(d.length);
    d.length += static_cast<std::size_t>(w.char_len);
    d.end.push_back(d.length);
  }
  return docs;
}

/// Joined text of one document, as the scorer must have seen it.
inline std::string document_text(std::span<const WordToken> words, std::string_view doc_id) {
  std::string out;
  for (const auto& w : words) {
    if (w.doc_id != doc_id) continue;
    if (!out.empty()) out += ' ';
    out += w.surface;
  }
  return out;
}

/// Sums subword nlls into word surprisals. A token belongs to the word its span intersects;
/// a token covering only inter-word whitespace goes to the following word (or the last word
/// at document end). Tokens of documents absent from the corpus are ignored.
inline SurprisalTable align_and_aggregate(std::span<const TokenScore> tokens, std::span<const WordToken> words,
                                          VariantMeta meta = {}) {
  SurprisalTable t;
  t.variant = std::move(meta);
  t.word_surprisal.assign(words.size(), std::nullopt);
  for (std::size_t i = 0; i < words.size(); ++i)
    if (words[i].corpus_word_idx != i) throw ValidationError("corpus word indices must be dense and ordered");
  auto docs = layout_documents(words);

  std::unordered_map<std::string, std::size_t> last_end;
  for (const auto& tok : tokens) {
    auto it = docs.find(tok.doc_id);
    if (it == docs.end()) continue;
    const auto& d = it->second;
    auto where = [&] {
      return "document '" + tok.doc_id + "' token " + std::to_string(tok.token_idx) + " [" +
             std::to_string(tok.char_start) + "," + std::to_string(tok.char_end) + ")";
    };
    if (!(tok.nll_nats >= 0) || !std::isfinite(tok.nll_nats))
      throw AlignmentError(where() + ": nll must be finite and >= 0");
    if (tok.char_end < tok.char_start || tok.char_end > d.length)
      throw AlignmentError(where() + ": offsets outside document of length " + std::to_string(d.length));
    auto& le = last_end[tok.doc_id];
    if (tok.char_start < le) throw AlignmentError(where() + ": overlaps or precedes previous token");
    le = tok.char_end;

    // first word whose end exceeds char_start
    auto k = static_cast<std::size_t>(std::upper_bound(d.end.begin(), d.end.end(), tok.char_start) - d.end.begin());
    std::size_t target = std::min(k, d.words.size() - 1);
    if (k + 1 < d.words.size() && tok.char_end > d.start[k + 1])
      throw AlignmentError(where() + ": spans two words");
    auto& slot = t.word_surprisal[d.words[target]];
    slot = slot.value_or(0.0) + tok.nll_nats;
    t.token_nll_sum += tok.nll_nats;
    t.token_count += 1;
  }
  std::size_t covered = 0;
  for (const auto& s : t.word_surprisal)
    if (s) ++covered;
  t.coverage = words.empty() ? 0.0 : static_cast<double>(covered) / static_cast<double>(words.size());
  if (t.token_count > 0)
    t.variant.perplexity = std::exp(static_cast<double>(t.token_nll_sum / static_cast<long double>(t.token_count)));
  return t;
}

/// exp of the mean per-token nll.
inline double corpus_perplexity(const SurprisalTable& t) {
  if (t.token_count == 0) throw ValidationError("corpus_perplexity: table has no scored tokens");
  return std::exp(static_cast<double>(t.token_nll_sum / static_cast<long double>(t.token_count)));
}

/// Mean surprisal over scored words, in bits.
inline double mean_word_surprisal_bits(const SurprisalTable& t) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& w : t.word_surprisal)
    if (w) {
      s += *w;
      ++n;
    }
  if (n == 0) throw ValidationError("mean_word_surprisal_bits: no scored words");
  return to_bits(s / static_cast<double>(n));
}

// --- TSV formats -------------------------------------------------------------------------

inline std::vector<TokenScore> read_token_scores(const text::TsvReader& r) {
  auto cd = r.require("doc_id");
  auto ci = r.require("token_idx");
  auto ct = r.require("text");
  auto cs = r.require("char_start");
  auto ce = r.require("char_end");
  auto cn = r.require("nll_nats");
  std::vector<TokenScore> out;
  r.for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
    TokenScore s;
    s.doc_id = std::string(text::trim(f[cd]));
    auto idx = text::parse_int<std::size_t>(f[ci]);
    auto a = text::parse_int<std::size_t>(f[cs]);
    auto b = text::parse_int<std::size_t>(f[ce]);
    auto nll = text::parse_double(f[cn]);
    if (!idx || !a || !b) throw ParseError(r.name(), line, "token_idx/char_start/char_end must be integers");
    if (!nll) throw ParseError(r.name(), line, "nll_nats is not a number: '" + std::string(f[cn]) + "'");
    s.token_idx = *idx;
    s.text = text::unescape_cell(f[ct]);
    s.char_start = *a;
    s.char_end = *b;
    s.nll_nats = *nll;
    out.push_back(std::move(s));
  });
  return out;
}

inline std::string write_token_scores(std::span<const TokenScore> tokens) {
  std::string out = "doc_id\ttoken_idx\ttext\tchar_start\tchar_end\tnll_nats\n";
  for (const auto& t : tokens) {
    out += t.doc_id + '\t' + std::to_string(t.token_idx) + '\t' + text::escape_cell(t.text) + '\t' +
           std::to_string(t.char_start) + '\t' + std::to_string(t.char_end) + '\t' +
           text::format_precise(t.nll_nats) + '\n';
  }
  return out;
}

/// Word-level table as stored in an analysis store: corpus_word_idx, surprisal_nats.
inline std::string write_word_table(const SurprisalTable& t) {
  std::string out = "corpus_word_idx\tsurprisal_nats\n";
  for (std::size_t i = 0; i < t.word_surprisal.size(); ++i)
    if (t.word_surprisal[i]) out += std::to_string(i) + '\t' + text::format_double(*t.word_surprisal[i]) + '\n';
  return out;
}

inline std::vector<std::optional<double>> read_word_table(const text::TsvReader& r, std::size_t n_words) {
  auto ci = r.require("corpus_word_idx");
  auto cs = r.require("surprisal_nats");
  std::vector<std::optional<double>> out(n_words);
  r.for_each_row([&](std::size_t line, const std::vector<std::string_view>& f) {
    auto i = text::parse_int<std::size_t>(f[ci]);
    auto s = text::parse_double(f[cs]);
    if (!i || !s || *i >= n_words) throw ParseError(r.name(), line, "bad word surprisal row");
    out[*i] = *s;
  });
  return out;
}

}  // namespace rtool
