#pragma once

// Iterative residual analysis: repeatedly find the annotation-defined subset of observations
// whose per-variant MSE falls most steeply with log perplexity, report it, and remove it.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rtool/annotate.hpp"
#include "rtool/error.hpp"
#include "rtool/trend.hpp"

namespace rtool {

struct SubsetDef {
  std::string name;
  std::function<bool(const WordProperties&)> predicate;
};

/// Candidate family over annotated properties: one subset per fine category present in the
/// table, one per coarse class, and the structural/discourse flags.
inline std::vector<SubsetDef> build_candidates(std::span<const std::optional<WordProperties>> props) {
  std::vector<SubsetDef> out;
  std::set<std::string> fine;
  for (const auto& p : props)
    if (p) fine.insert(p->pos_category);
  for (const auto& f : fine)
    out.push_back({"pos=" + f, [f](const WordProperties& w) { return w.pos_category == f; }});
  for (std::size_t c = 0; c < kCoarseNames.size(); ++c) {
    const auto cls = static_cast<CoarseClass>(c);
    out.push_back({"coarse=" + std::string(kCoarseNames[c]), [cls](const WordProperties& w) { return w.coarse == cls; }});
  }
  out.push_back({"named_entity", [](const WordProperties& w) { return w.is_named_entity; }});
  out.push_back({"dlt_cost>=3", [](const WordProperties& w) { return w.dlt_cost >= 3; }});
  out.push_back({"center_embedding_end>=4", [](const WordProperties& w) { return w.ends_center_embedding_len >= 4; }});
  out.push_back({"before_sentential_clause", [](const WordProperties& w) { return w.before_sentential_clause; }});
  out.push_back({"ends_first_conjunct", [](const WordProperties& w) { return w.ends_first_conjunct; }});
  out.push_back({"ends_first_conjunct_np", [](const WordProperties& w) { return w.ends_first_conjunct_np; }});
  out.push_back({"begins_adjectival_np", [](const WordProperties& w) { return w.begins_adjectival_np; }});
  return out;
}

/// A candidate resolved to a membership mask over the observation vector.
struct Candidate {
  std::string name;
  std::vector<bool> members;
};

/// Resolves candidates against observations; `obs_word[i]` is the corpus word of observation i.
/// Observations of unannotated words belong to no subset.
inline std::vector<Candidate> resolve_candidates(std::span<const SubsetDef> defs,
                                                 std::span<const std::optional<WordProperties>> props,
                                                 std::span<const std::size_t> obs_word) {
  std::vector<Candidate> out;
  out.reserve(defs.size());
  for (const auto& d : defs) {
    Candidate c{d.name, std::vector<bool>(obs_word.size(), false)};
    for (std::size_t i = 0; i < obs_word.size(); ++i) {
      if (obs_word[i] >= props.size()) throw ValidationError("observation refers to an unknown word");
      const auto& p = props[obs_word[i]];
      c.members[i] = p && d.predicate(*p);
    }
    out.push_back(std::move(c));
  }
  return out;
}

struct UnderOver {
  double sse_under = 0;  // residual > 0
  double sse_over = 0;   // residual < 0
  std::size_t n_under = 0;
  std::size_t n_over = 0;
  std::size_t n_zero = 0;
  double mean_bits_under = std::numeric_limits<double>::quiet_NaN();
  double mean_bits_over = std::numeric_limits<double>::quiet_NaN();
};

/// Splits points by residual sign; exact zeros join neither side. Means of an empty side are NaN.
inline UnderOver under_over_decompose(std::span<const double> residuals, std::span<const double> surprisal_bits) {
  if (residuals.size() != surprisal_bits.size())
    throw ValidationError("under_over_decompose: residuals and surprisals differ in length");
  UnderOver u;
  double bu = 0, bo = 0;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    const double r = residuals[i];
    if (r > 0) {
      u.sse_under += r * r;
      bu += surprisal_bits[i];
      ++u.n_under;
    } else if (r < 0) {
      u.sse_over += r * r;
      bo += surprisal_bits[i];
      ++u.n_over;
    } else {
      ++u.n_zero;
    }
  }
  if (u.n_under) u.mean_bits_under = bu / static_cast<double>(u.n_under);
  if (u.n_over) u.mean_bits_over = bo / static_cast<double>(u.n_over);
  return u;
}

/// Residuals and surprisals of one variant, aligned to a shared observation order.
struct VariantResiduals {
  std::string name;
  double ln_ppl = 0;
  std::vector<double> residuals;
  std::vector<double> surprisal_bits;  // may be empty when no decomposition is wanted
};

struct VariantSubsetStats {
  std::string variant;
  double ln_ppl = 0;
  double mse = 0;
  UnderOver split;
};

struct SubsetReport {
  std::string subset;
  int iteration = 0;  // 1-based
  std::size_t n_points = 0;
  std::vector<VariantSubsetStats> variants;
  SlopeFit slope;
};

struct SearchOptions {
  int k = 5;
  double min_frac = 0.01;
};

inline constexpr std::string_view kStopNoEligible = "no eligible subset";
inline constexpr std::string_view kStopNoNegative = "no eligible subset has a negative slope";

struct SearchResult {
  std::vector<SubsetReport> reports;
  /// Empty when k subsets were selected.
  std::string stop_reason;
  /// MSE-vs-ln-perplexity slope over every observation.
  SlopeFit corpus_slope;
};

namespace detail {

inline SubsetReport evaluate_subset(const std::string& name, std::span<const VariantResiduals> variants,
                                    const std::vector<std::size_t>& idx, bool with_split) {
  SubsetReport r;
  r.subset = name;
  r.n_points = idx.size();
  std::vector<double> x, y;
  for (const auto& v : variants) {
    VariantSubsetStats s;
    s.variant = v.name;
    s.ln_ppl = v.ln_ppl;
    double sse = 0;
    for (auto i : idx) sse += v.residuals[i] * v.residuals[i];
    s.mse = idx.empty() ? 0.0 : sse / static_cast<double>(idx.size());
    if (with_split) {
      std::vector<double> rr, bb;
      rr.reserve(idx.size());
      bb.reserve(idx.size());
      for (auto i : idx) {
        rr.push_back(v.residuals[i]);
        bb.push_back(v.surprisal_bits.empty() ? std::numeric_limits<double>::quiet_NaN() : v.surprisal_bits[i]);
      }
      s.split = under_over_decompose(rr, bb);
    }
    x.push_back(v.ln_ppl);
    y.push_back(s.mse);
    r.variants.push_back(std::move(s));
  }
  r.slope = slope_test(x, y, Direction::negative);
  return r;
}

}  // namespace detail

/// Greedy search: at each iteration, among candidates with more than min_frac x (original
/// observation count) members still remaining, pick the one whose per-variant MSE has the most
/// negative slope against ln perplexity (ties by name), report it, and remove its members.
inline SearchResult iterative_search(std::span<const VariantResiduals> variants, std::span<const Candidate> candidates,
                                     const SearchOptions& opts = {}) {
  if (variants.size() < 3) throw ValidationError("iterative_search: need at least three variants");
  if (candidates.empty()) throw ValidationError("iterative_search: empty candidate list");
  if (opts.k < 1) throw ValidationError("iterative_search: k must be >= 1");
  if (!(opts.min_frac >= 0 && opts.min_frac < 1)) throw ValidationError("iterative_search: min_frac must be in [0, 1)");
  const std::size_t n = variants[0].residuals.size();
  for (const auto& v : variants) {
    if (v.residuals.size() != n) throw ValidationError("iterative_search: residual vectors are not aligned");
    if (!v.surprisal_bits.empty() && v.surprisal_bits.size() != n)
      throw ValidationError("iterative_search: surprisal vector for '" + v.name + "' is not aligned");
  }
  for (const auto& c : candidates)
    if (c.members.size() != n) throw ValidationError("iterative_search: candidate '" + c.name + "' is not aligned");

  SearchResult out;
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  out.corpus_slope = detail::evaluate_subset("all", variants, all, false).slope;

  const double floor = opts.min_frac * static_cast<double>(n);
  std::vector<bool> remaining(n, true);
  for (int it = 1; it <= opts.k; ++it) {
    const Candidate* best = nullptr;
    std::optional<SubsetReport> best_report;
    bool any_eligible = false;
    for (const auto& c : candidates) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < n; ++i)
        if (c.members[i] && remaining[i]) idx.push_back(i);
      if (!(static_cast<double>(idx.size()) > floor) || idx.empty()) continue;
      any_eligible = true;
      auto rep = detail::evaluate_subset(c.name, variants, idx, false);
      if (!best_report || rep.slope.slope < best_report->slope.slope ||
          (rep.slope.slope == best_report->slope.slope && c.name < best->name)) {
        best = &c;
        best_report = std::move(rep);
      }
    }
    if (!any_eligible) {
      out.stop_reason = kStopNoEligible;
      break;
    }
    if (!(best_report->slope.slope < 0)) {
      out.stop_reason = kStopNoNegative;
      break;
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (best->members[i] && remaining[i]) idx.push_back(i);
    auto rep = detail::evaluate_subset(best->name, variants, idx, true);
    rep.iteration = it;
    for (auto i : idx) remaining[i] = false;
    out.reports.push_back(std::move(rep));
  }
  return out;
}

}  // namespace rtool
