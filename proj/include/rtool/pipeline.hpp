#pragma once

// End-to-end analysis over an analysis store: ingest -> annotate -> surprisal import ->
// mixed-model fits (baseline and per-variant, with and without by-word intercepts) ->
// perplexity trends -> residual subset search, with fingerprint-based skipping of
// artifacts whose inputs are unchanged.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtool/annotate.hpp"
#include "rtool/corpus.hpp"
#include "rtool/csv.hpp"
#include "rtool/error.hpp"
#include "rtool/lme.hpp"
#include "rtool/store.hpp"
#include "rtool/subsets.hpp"
#include "rtool/surprisal.hpp"
#include "rtool/svg.hpp"
#include "rtool/text.hpp"
#include "rtool/trend.hpp"

namespace rtool::pipeline {

using nlohmann::json;

// --- model specifications ---------------------------------------------------------------

/// Predictor columns available to models. Surprisal is added to the baseline set in full models.
inline constexpr std::string_view kWordLen = "word_len";
inline constexpr std::string_view kWordPos = "word_pos";
inline constexpr std::string_view kSaccadeLen = "saccade_len";
inline constexpr std::string_view kPrevFixated = "prev_fixated";
inline constexpr std::string_view kSurprisal = "surprisal";

struct RandomTemplate {
  lme::GroupingFactor factor = lme::GroupingFactor::subject;
  bool intercept = true;
  bool all_slopes = false;  // slopes for every fixed effect of the model
  std::vector<std::string> slopes;
};

/// Per-modality model family: baseline predictors and the random-effects template.
struct ModalitySpec {
  std::vector<std::string> baseline;
  std::vector<RandomTemplate> random;

  /// Self-paced reading: word length and position; by-subject intercepts and slopes for all
  /// fixed effects, by-word and by-subject-sentence intercepts. Eye tracking adds saccade
  /// length and previous-word fixation, and uses by-sentence intercepts.
  static ModalitySpec defaults(Modality m) {
    using lme::GroupingFactor;
    ModalitySpec s;
    s.baseline = {std::string(kWordLen), std::string(kWordPos)};
    if (m == Modality::et) {
      s.baseline.emplace_back(kSaccadeLen);
      s.baseline.emplace_back(kPrevFixated);
    }
    s.random.push_back({GroupingFactor::subject, true, true, {}});
    s.random.push_back({GroupingFactor::word_type, true, false, {}});
    s.random.push_back({m == Modality::spr ? GroupingFactor::subject_sentence : GroupingFactor::sentence, true, false, {}});
    return s;
  }

  static ModalitySpec from_json(const json& j, Modality m) {
    ModalitySpec s = defaults(m);
    try {
      if (j.contains("fixed")) s.baseline = j.at("fixed").get<std::vector<std::string>>();
      if (j.contains("random")) {
        s.random.clear();
        for (const auto& r : j.at("random")) {
          RandomTemplate t;
          t.factor = lme::parse_grouping_factor(r.at("factor").get<std::string>());
          t.intercept = r.value("intercept", true);
          if (r.contains("slopes")) {
            if (r.at("slopes").is_string()) {
              if (r.at("slopes").get<std::string>() != "all") throw ValidationError("slopes must be \"all\" or a list");
              t.all_slopes = true;
            } else {
              t.slopes = r.at("slopes").get<std::vector<std::string>>();
            }
          }
          s.random.push_back(std::move(t));
        }
      }
    } catch (const json::exception& e) {
      throw ValidationError(std::string("specs: ") + e.what());
    }
    const std::set<std::string> known = {std::string(kWordLen), std::string(kWordPos), std::string(kSaccadeLen),
                                         std::string(kPrevFixated)};
    for (const auto& p : s.baseline) {
      if (!known.count(p)) throw ValidationError("specs: unknown predictor '" + p + "'");
      if (m == Modality::spr && (p == kSaccadeLen || p == kPrevFixated))
        throw ValidationError("specs: predictor '" + p + "' exists only for eye-tracking corpora");
    }
    return s;
  }

  lme::ModelSpec model(bool with_surprisal, bool word_intercept) const {
    lme::ModelSpec spec;
    spec.fixed = baseline;
    if (with_surprisal) spec.fixed.emplace_back(kSurprisal);
    spec.include_word_intercept = word_intercept;
    for (const auto& t : random) {
      lme::RandomTerm r;
      r.factor = t.factor;
      r.intercept = t.intercept;
      r.slopes = t.all_slopes ? spec.fixed : t.slopes;
      spec.random.push_back(std::move(r));
    }
    return spec;
  }
};

// --- design construction ----------------------------------------------------------------

/// Modeling rows: filtered observations of one partition whose word has a surprisal estimate
/// from every imported variant, so all models share one observation set.
struct Design {
  std::vector<std::size_t> obs;    // indices into corpus.observations
  std::vector<std::size_t> words;  // corpus word of each row
  Eigen::VectorXd response;        // log reading time
  lme::FactorColumns factors;
  std::map<std::string, Eigen::VectorXd> columns;  // raw predictor columns
  std::map<std::string, Eigen::VectorXd> surprisal;  // per variant, nats
};

inline Design build_design(const ReadingCorpus& c, PartitionLabel part,
                           const std::map<std::string, std::vector<std::optional<double>>>& surprisal) {
  using lme::GroupingFactor;
  Design d;
  for (std::size_t i = 0; i < c.observations.size(); ++i) {
    const auto& o = c.observations[i];
    if (partition_of(o.subject_id, c.tokens[o.token].sentence_id) != part) continue;
    bool ok = std::isfinite(o.log_rt);
    for (const auto& [name, s] : surprisal) ok = ok && o.token < s.size() && s[o.token].has_value();
    if (c.modality == Modality::et) ok = ok && o.saccade_len && o.prev_fixated;
    if (!ok) continue;
    d.obs.push_back(i);
    d.words.push_back(o.token);
  }
  const auto n = static_cast<Eigen::Index>(d.obs.size());
  if (n == 0) throw ValidationError("no observations left to model in the " + std::string(to_string(part)) + " partition");

  // dense, order-independent level keys
  std::map<std::string, std::int64_t> types;
  for (const auto& t : c.tokens) types.emplace(text::lower(t.surface), 0);
  std::int64_t next = 0;
  for (auto& [k, v] : types) v = next++;
  std::map<std::pair<std::int64_t, std::int64_t>, std::int64_t> cells;
  for (auto i : d.obs) cells.emplace(std::make_pair(c.observations[i].subject_id, c.tokens[c.observations[i].token].sentence_id), 0);
  next = 0;
  for (auto& [k, v] : cells) v = next++;

  d.response.resize(n);
  Eigen::VectorXd len(n), pos(n), sac(n), prev(n);
  auto& f_subj = d.factors[GroupingFactor::subject];
  auto& f_word = d.factors[GroupingFactor::word_type];
  auto& f_sent = d.factors[GroupingFactor::sentence];
  auto& f_cell = d.factors[GroupingFactor::subject_sentence];
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& o = c.observations[d.obs[static_cast<std::size_t>(r)]];
    const auto& t = c.tokens[o.token];
    d.response(r) = o.log_rt;
    len(r) = t.char_len;
    pos(r) = t.word_pos;
    sac(r) = o.saccade_len ? *o.saccade_len : 0;
    prev(r) = o.prev_fixated ? (*o.prev_fixated ? 1.0 : 0.0) : 0.0;
    f_subj.push_back(o.subject_id);
    f_word.push_back(types.at(text::lower(t.surface)));
    f_sent.push_back(t.sentence_id);
    f_cell.push_back(cells.at({o.subject_id, t.sentence_id}));
  }
  d.columns[std::string(kWordLen)] = len;
  d.columns[std::string(kWordPos)] = pos;
  if (c.modality == Modality::et) {
    d.columns[std::string(kSaccadeLen)] = sac;
    d.columns[std::string(kPrevFixated)] = prev;
  }
  for (const auto& [name, s] : surprisal) {
    Eigen::VectorXd v(n);
    for (Eigen::Index r = 0; r < n; ++r) v(r) = *s[d.words[static_cast<std::size_t>(r)]];
    d.surprisal[name] = std::move(v);
  }
  return d;
}

/// Standardized regression data for one model; `variant` supplies the surprisal column.
inline lme::LmeData model_data(const Design& d, const lme::ModelSpec& spec, const std::optional<std::string>& variant) {
  lme::LmeData data;
  data.response = d.response;
  data.factors = d.factors;
  data.predictors.names = spec.fixed;
  data.predictors.values.resize(d.response.size(), static_cast<Eigen::Index>(spec.fixed.size()));
  for (std::size_t j = 0; j < spec.fixed.size(); ++j) {
    const auto& name = spec.fixed[j];
    const Eigen::VectorXd* col = nullptr;
    if (name == kSurprisal) {
      if (!variant) throw ValidationError("model uses surprisal but no variant was given");
      auto it = d.surprisal.find(*variant);
      if (it == d.surprisal.end()) throw ValidationError("no surprisal for variant '" + *variant + "'");
      col = &it->second;
    } else {
      auto it = d.columns.find(name);
      if (it == d.columns.end()) throw ValidationError("predictor '" + name + "' is not available for this corpus");
      col = &it->second;
    }
    data.predictors.values.col(static_cast<Eigen::Index>(j)) = *col;
  }
  data.predictors = lme::standardize(data.predictors);
  return data;
}

// --- configuration ----------------------------------------------------------------------

struct CorpusInputs {
  std::string name;
  Modality modality = Modality::spr;
  fs::path file;
  std::optional<fs::path> scores, trees, index, deps;
  std::optional<json> filter;
};

struct VariantInputs {
  fs::path meta;
  fs::path tokens;
};

struct PipelineConfig {
  std::vector<CorpusInputs> corpora;
  std::vector<VariantInputs> variants;
  json specs = json::object();
  int k = 5;
  double min_frac = 0.01;
  lme::FitOptions fit;
  std::optional<fs::path> store;

  static PipelineConfig from_json(const json& j, const fs::path& base) {
    PipelineConfig c;
    auto path = [&](const json& v) {
      fs::path p = v.get<std::string>();
      return p.is_absolute() ? p : base / p;
    };
    try {
      for (const auto& e : j.at("corpora")) {
        CorpusInputs ci;
        ci.file = path(e.at("file"));
        ci.modality = parse_modality(e.at("modality").get<std::string>());
        ci.name = e.contains("name") ? e.at("name").get<std::string>() : ci.file.stem().string();
        if (e.contains("scores")) ci.scores = path(e.at("scores"));
        if (e.contains("trees")) ci.trees = path(e.at("trees"));
        if (e.contains("index")) ci.index = path(e.at("index"));
        if (e.contains("deps")) ci.deps = path(e.at("deps"));
        if (e.contains("filter")) ci.filter = e.at("filter");
        c.corpora.push_back(std::move(ci));
      }
      for (const auto& e : j.at("variants")) c.variants.push_back({path(e.at("meta")), path(e.at("tokens"))});
      if (j.contains("specs")) c.specs = j.at("specs");
      if (j.contains("k")) c.k = j.at("k").get<int>();
      if (j.contains("min_frac")) c.min_frac = j.at("min_frac").get<double>();
      if (j.contains("fit")) {
        const auto& f = j.at("fit");
        c.fit.max_evaluations = f.value("max_evaluations", c.fit.max_evaluations);
        c.fit.tolerance = f.value("tolerance", c.fit.tolerance);
        if (f.contains("starts")) c.fit.starts = f.at("starts").get<std::vector<double>>();
      }
      if (j.contains("store")) c.store = path(j.at("store"));
    } catch (const json::exception& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    return c;
  }

  static PipelineConfig load(const fs::path& file) {
    json j;
    try {
      j = json::parse(text::read_file(file.string()));
    } catch (const json::exception& e) {
      throw ValidationError(file.string() + ": invalid JSON: " + e.what());
    }
    return from_json(j, file.has_parent_path() ? file.parent_path() : fs::path("."));
  }

  /// Checks everything that can be checked before computing: files exist, names unique, parameters sane.
  void validate() const {
    if (corpora.empty()) throw ValidationError("config: no corpora");
    if (variants.empty()) throw ValidationError("config: no variants");
    if (k < 1) throw ValidationError("config: k must be >= 1");
    if (!(min_frac >= 0 && min_frac < 1)) throw ValidationError("config: min_frac must be in [0, 1)");
    auto need = [](const fs::path& p, const std::string& what) {
      if (!fs::is_regular_file(p)) throw ValidationError("config: " + what + " file not found: " + p.string());
    };
    std::set<std::string> names;
    for (const auto& c : corpora) {
      if (!names.insert(c.name).second) throw ValidationError("config: duplicate corpus name '" + c.name + "'");
      need(c.file, "corpus");
      if (c.scores) need(*c.scores, "scores");
      if (c.trees) need(*c.trees, "trees");
      if (c.index) need(*c.index, "tree index");
      if (c.deps) need(*c.deps, "dependencies");
      if ((c.index || c.deps) && !c.trees) throw ValidationError("config: corpus '" + c.name + "' has index/deps but no trees");
      if (c.filter) FilterSpec::from_json(*c.filter, c.modality);
      ModalitySpec::from_json(specs.value(std::string(to_string(c.modality)), json::object()), c.modality);
    }
    for (const auto& v : variants) {
      need(v.meta, "variant metadata");
      need(v.tokens, "surprisal");
    }
  }
};

// --- per-corpus workspace ---------------------------------------------------------------

struct VariantInfo {
  VariantMeta meta;
  double perplexity = 0;
  std::size_t token_count = 0;
  double coverage = 0;
};

/// Model identity within a workspace: baseline or full(variant), with/without by-word intercepts.
struct ModelRequest {
  std::optional<std::string> variant;  // empty for the baseline
  bool word_intercept = true;
  PartitionLabel partition = PartitionLabel::exploratory;

  std::string name() const {
    std::string n = variant ? "full." + *variant : "baseline";
    if (!word_intercept) n += ".noword";
    if (partition == PartitionLabel::heldout) n += ".heldout";
    return n;
  }
};

inline void check_variant_name(const std::string& name) {
  if (name.empty()) throw ValidationError("variant name is empty");
  for (char c : name)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
      throw ValidationError("variant name '" + name + "' may only contain letters, digits, '-', '_' and '.'");
}

inline std::string file_fingerprint(const fs::path& p) { return text::fingerprint(text::read_file(p.string())); }

struct FamilyRow {
  VariantInfo info;
  int rank = 0;  // 1-based within the family, by model size
  double delta_ll = 0;
  double delta_ll_noword = 0;
  double mse = 0;         // conditional MSE, full model with by-word intercepts
  double mse_noword = 0;  // conditional MSE, full model without them
};

struct FamilyTrend {
  std::string family;
  std::vector<FamilyRow> rows;
  std::optional<SlopeFit> dll;
  std::optional<SlopeFit> mse;
};

class Workspace {
 public:
  Workspace(const fs::path& store_root, std::string corpus)
      : name_(std::move(corpus)), store_(store_root / safe(name_)) {}

  const std::string& name() const noexcept { return name_; }
  AnalysisStore& store() noexcept { return store_; }
  const AnalysisStore& store() const noexcept { return store_; }

  // ingest ------------------------------------------------------------------------------

  /// Copies the corpus (and score sidecar) into the store with its filter. Parsing happens here
  /// so malformed input fails the ingest stage rather than a later one.
  void ingest(const fs::path& corpus_file, Modality modality, const std::optional<fs::path>& scores,
              const FilterSpec& filter_spec) {
    const std::string raw = text::read_file(corpus_file.string());
    const std::string sc = scores ? text::read_file(scores->string()) : std::string();
    filter_spec.validate();
    const std::string fjson = filter_spec.to_json().dump(2) + "\n";
    const std::string inputs = combine_fingerprints({text::fingerprint(raw), text::fingerprint(sc), fjson, to_string(modality)});
    if (store_.fresh("ingest.json", inputs) && store_.fresh("input/corpus.tsv", inputs)) {
      store_.note_skipped();
      return;
    }
    ReadingCorpus c = rtool::ingest(text::TsvReader(raw, corpus_file.string()), modality);
    if (scores) c.subject_scores = load_subject_scores(text::TsvReader(sc, scores->string()));
    auto filtered = filter(c, filter_spec);
    json summary = {{"corpus", name_},
                    {"modality", std::string(to_string(modality))},
                    {"source", corpus_file.filename().string()},
                    {"words", c.tokens.size()},
                    {"observations", c.observations.size()},
                    {"kept", filtered.observations.size()},
                    {"exploratory", select_partition(filtered, PartitionLabel::exploratory).observations.size()},
                    {"heldout", select_partition(filtered, PartitionLabel::heldout).observations.size()}};
    store_.put("input/corpus.tsv", raw, inputs);
    store_.put("input/scores.tsv", sc, inputs);
    store_.put("filter.json", fjson, inputs);
    store_.put("ingest.json", summary.dump(2) + "\n", inputs);
    corpus_.reset();
  }

  /// Chain fingerprint for everything downstream of ingestion.
  std::string ingest_fingerprint() const {
    auto fp = store_.inputs_of("ingest.json");
    if (!fp) throw ValidationError("corpus '" + name_ + "' has not been ingested into " + store_.root().string());
    return *fp;
  }

  json ingest_summary() const { return json::parse(store_.read("ingest.json")); }

  Modality modality() const { return parse_modality(ingest_summary().at("modality").get<std::string>()); }

  /// Filtered corpus, reconstructed from the stored copies.
  const ReadingCorpus& corpus() {
    if (!corpus_) {
      const auto m = modality();
      ReadingCorpus c = rtool::ingest(text::TsvReader(store_.read("input/corpus.tsv"), name_ + "/corpus.tsv"), m);
      const auto sc = store_.read("input/scores.tsv");
      if (!sc.empty()) c.subject_scores = load_subject_scores(text::TsvReader(sc, name_ + "/scores.tsv"));
      corpus_ = filter(c, FilterSpec::from_json(json::parse(store_.read("filter.json")), m));
    }
    return *corpus_;
  }

  // annotation --------------------------------------------------------------------------

  void annotate(const fs::path& trees, const std::optional<fs::path>& index, const std::optional<fs::path>& deps) {
    const std::string tr = text::read_file(trees.string());
    const std::string ix = index ? text::read_file(index->string()) : std::string();
    const std::string dp = deps ? text::read_file(deps->string()) : std::string();
    const std::string inputs = combine_fingerprints({ingest_fingerprint(), text::fingerprint(tr), text::fingerprint(ix),
                                                     deps ? text::fingerprint(dp) : std::string("head-rules")});
    store_.get_or_put("properties.tsv", inputs, [&] {
      const auto& c = corpus();
      std::optional<text::TsvReader> idx;
      if (index) idx.emplace(ix, index->string());
      auto tree_map = load_trees(tr, trees.string(), idx, c);
      std::optional<std::map<SentenceKey, std::vector<DependencyArc>>> arcs;
      if (deps) arcs = load_dependencies(text::TsvReader(dp, deps->string()));
      return write_properties(c, annotate_corpus(c, tree_map, arcs ? &*arcs : nullptr));
    });
  }

  bool annotated() const { return store_.contains("properties.tsv"); }

  std::vector<std::optional<WordProperties>> properties() {
    return read_properties(text::TsvReader(store_.read("properties.tsv"), name_ + "/properties.tsv"), corpus().tokens.size());
  }

  // surprisal ---------------------------------------------------------------------------

  /// Aligns one variant's token scores to this corpus. Returns the variant name.
  std::string import_variant(const fs::path& meta_file, const fs::path& tokens_file) {
    const std::string mraw = text::read_file(meta_file.string());
    VariantMeta meta;
    try {
      meta = VariantMeta::from_json(json::parse(mraw));
    } catch (const json::exception& e) {
      throw ValidationError(meta_file.string() + ": invalid JSON: " + e.what());
    }
    check_variant_name(meta.name);
    const std::string traw = text::read_file(tokens_file.string());
    const std::string inputs = combine_fingerprints({ingest_fingerprint(), text::fingerprint(mraw), text::fingerprint(traw)});
    const std::string base = "surprisal/" + meta.name;
    if (store_.fresh(base + ".tsv", inputs) && store_.fresh(base + ".json", inputs)) {
      store_.note_skipped();
      return meta.name;
    }
    auto tokens = read_token_scores(text::TsvReader(traw, tokens_file.string()));
    auto table = align_and_aggregate(tokens, corpus().tokens, meta);
    if (table.token_count == 0)
      throw AlignmentError(tokens_file.string() + ": no tokens belong to documents of corpus '" + name_ + "'");
    json info = table.variant.to_json();
    info["perplexity"] = corpus_perplexity(table);
    info["token_count"] = table.token_count;
    info["coverage"] = table.coverage;
    store_.put(base + ".tsv", write_word_table(table), inputs);
    store_.put(base + ".json", info.dump(2) + "\n", inputs);
    design_.clear();
    return meta.name;
  }

  /// Imported variants ordered by family, size and name.
  std::vector<VariantInfo> variants() const {
    std::vector<VariantInfo> out;
    for (const auto& n : store_.names()) {
      if (n.rfind("surprisal/", 0) != 0 || n.size() < 5 || n.substr(n.size() - 5) != ".json") continue;
      auto j = json::parse(store_.read(n));
      VariantInfo v;
      v.meta = VariantMeta::from_json(j);
      v.perplexity = j.at("perplexity").get<double>();
      v.token_count = j.at("token_count").get<std::size_t>();
      v.coverage = j.at("coverage").get<double>();
      out.push_back(std::move(v));
    }
    std::sort(out.begin(), out.end(), [](const VariantInfo& a, const VariantInfo& b) {
      return std::make_tuple(to_string(a.meta.family), a.meta.n_params, a.meta.name) <
             std::make_tuple(to_string(b.meta.family), b.meta.n_params, b.meta.name);
    });
    return out;
  }

  std::vector<std::optional<double>> surprisal(const std::string& variant) {
    return read_word_table(text::TsvReader(store_.read("surprisal/" + variant + ".tsv"), variant),
                           corpus().tokens.size());
  }

  // models ------------------------------------------------------------------------------

  void set_specs(const json& specs) { specs_ = specs; }
  void set_fit_options(const lme::FitOptions& o) { fit_opts_ = o; }

  ModalitySpec modality_spec() const {
    const auto m = modality();
    return ModalitySpec::from_json(specs_.value(std::string(to_string(m)), json::object()), m);
  }

  lme::ModelSpec model_spec(const ModelRequest& r) const { return modality_spec().model(r.variant.has_value(), r.word_intercept); }

  std::string fit_inputs(const ModelRequest& r) const {
    std::vector<std::string> parts = {ingest_fingerprint(), model_spec(r).to_json().dump(), std::string(to_string(r.partition)),
                                      std::to_string(fit_opts_.max_evaluations), text::format_precise(fit_opts_.tolerance)};
    for (double s : fit_opts_.starts) parts.push_back(text::format_precise(s));
    // every imported variant shapes the shared observation set
    for (const auto& v : variants()) {
      parts.push_back(v.meta.name);
      parts.push_back(*store_.output_of("surprisal/" + v.meta.name + ".tsv"));
    }
    if (r.variant) parts.push_back("variant=" + *r.variant);
    return combine_fingerprints(parts);
  }

  /// Fits (or reuses) a model; returns its artifact name.
  std::string ensure_fit(const ModelRequest& r) {
    if (r.variant && !store_.contains("surprisal/" + *r.variant + ".tsv"))
      throw ValidationError("variant '" + *r.variant + "' has not been imported for corpus '" + name_ + "'");
    const std::string artifact = "fits/" + r.name() + ".json";
    store_.get_or_put(artifact, fit_inputs(r), [&] {
      auto spec = model_spec(r);
      auto data = model_data(design(r.partition), spec, r.variant);
      auto model = lme::fit(data, spec, fit_opts_);
      json j = model.to_json(true);
      j["model"] = r.name();
      j["spec"] = spec.to_json();
      return j.dump(1) + "\n";
    });
    return artifact;
  }

  /// Reads a fit, computing it first when missing or stale (a fresh read is not counted as a skip).
  lme::FittedModel load_fit(const ModelRequest& r) {
    const std::string artifact = "fits/" + r.name() + ".json";
    if (!store_.fresh(artifact, fit_inputs(r))) ensure_fit(r);
    return lme::FittedModel::from_json(json::parse(store_.read(artifact)));
  }

  /// Conditional residuals of a stored fit on its own observations.
  lme::ResidualStats residuals(const ModelRequest& r) {
    auto model = load_fit(r);
    return lme::residual_stats(model, model_data(design(r.partition), model_spec(r), r.variant));
  }

  const Design& design(PartitionLabel part) {
    auto it = design_.find(part);
    if (it == design_.end()) {
      std::map<std::string, std::vector<std::optional<double>>> s;
      for (const auto& v : variants()) s[v.meta.name] = surprisal(v.meta.name);
      it = design_.emplace(part, build_design(corpus(), part, s)).first;
    }
    return it->second;
  }

  // trends ------------------------------------------------------------------------------

  std::vector<std::string> families() const {
    std::vector<std::string> out;
    for (const auto& v : variants()) {
      std::string f(to_string(v.meta.family));
      if (out.empty() || out.back() != f) out.push_back(f);
    }
    return out;
  }

  /// ΔLL (with by-word intercepts) and MSE (without them) per variant of one family, and
  /// their slopes against ln perplexity.
  FamilyTrend family_trend(const std::string& family) {
    FamilyTrend t;
    t.family = family;
    const ModelRequest base{std::nullopt, true}, base_nw{std::nullopt, false};
    const auto ll_base = load_fit(base).loglik_nats;
    const auto ll_base_nw = load_fit(base_nw).loglik_nats;
    int rank = 0;
    for (const auto& v : variants()) {
      if (to_string(v.meta.family) != family) continue;
      FamilyRow row;
      row.info = v;
      row.rank = ++rank;
      const ModelRequest full{v.meta.name, true}, full_nw{v.meta.name, false};
      row.delta_ll = load_fit(full).loglik_nats - ll_base;
      row.delta_ll_noword = load_fit(full_nw).loglik_nats - ll_base_nw;
      row.mse = residuals(full).mse;
      row.mse_noword = residuals(full_nw).mse;
      t.rows.push_back(std::move(row));
    }
    if (t.rows.empty()) throw ValidationError("no imported variant belongs to family '" + family + "'");
    if (t.rows.size() >= 2) {
      std::vector<VariantPoint> dll, mse;
      for (const auto& r : t.rows) {
        dll.push_back({r.info.perplexity, r.delta_ll});
        mse.push_back({r.info.perplexity, r.mse_noword});
      }
      t.dll = fit_trend(dll, Direction::positive);
      t.mse = fit_trend(mse, Direction::negative);
    }
    return t;
  }

  // subsets -----------------------------------------------------------------------------

  /// Subset search over residuals of the family's no-word full models.
  SearchResult family_subsets(const std::string& family, const SearchOptions& opts) {
    const auto& d = design(PartitionLabel::exploratory);
    std::vector<VariantResiduals> vr;
    for (const auto& v : variants()) {
      if (to_string(v.meta.family) != family) continue;
      VariantResiduals r;
      r.name = v.meta.name;
      r.ln_ppl = std::log(v.perplexity);
      auto res = residuals({v.meta.name, false});
      r.residuals.assign(res.residuals.data(), res.residuals.data() + res.residuals.size());
      const auto& s = d.surprisal.at(v.meta.name);
      for (Eigen::Index i = 0; i < s.size(); ++i) r.surprisal_bits.push_back(to_bits(s(i)));
      vr.push_back(std::move(r));
    }
    if (!annotated()) throw ValidationError("corpus '" + name_ + "' has no word annotations; run annotate first");
    auto props = properties();
    auto defs = build_candidates(props);
    auto cands = resolve_candidates(defs, props, d.words);
    return iterative_search(vr, cands, opts);
  }

 private:
  static std::string safe(const std::string& s) {
    check_variant_name(s);
    return s;
  }

  std::string name_;
  AnalysisStore store_;
  std::optional<ReadingCorpus> corpus_;
  std::map<PartitionLabel, Design> design_;
  json specs_ = json::object();
  lme::FitOptions fit_opts_;
};

// --- report tables ----------------------------------------------------------------------

inline std::string num(double v) { return text::format_double(v); }

inline csv::Table trend_table(const std::vector<FamilyTrend>& trends) {
  csv::Table t;
  t.header = {"family", "metric", "slope", "stderr", "t", "p", "n"};
  for (const auto& f : trends) {
    for (const auto& [metric, fit] : {std::pair{"delta_ll", f.dll}, std::pair{"mse", f.mse}}) {
      if (!fit) continue;
      t.rows.push_back({f.family, metric, num(fit->slope), num(fit->stderr_), num(fit->t_stat), num(fit->p_one_tailed),
                        std::to_string(fit->n)});
    }
  }
  return t;
}

inline csv::Table variant_table(const std::vector<FamilyTrend>& trends) {
  csv::Table t;
  t.header = {"family", "rank", "variant", "n_params", "perplexity", "ln_ppl", "delta_ll", "delta_ll_noword", "mse", "mse_noword"};
  for (const auto& f : trends)
    for (const auto& r : f.rows)
      t.rows.push_back({f.family, std::to_string(r.rank), r.info.meta.name, std::to_string(r.info.meta.n_params),
                        num(r.info.perplexity), num(std::log(r.info.perplexity)), num(r.delta_ll), num(r.delta_ll_noword),
                        num(r.mse), num(r.mse_noword)});
  return t;
}

inline csv::Table subset_table(const std::string& family, const SearchResult& res) {
  csv::Table t;
  t.header = {"family", "iteration", "subset", "n_points", "rank", "variant", "ln_ppl", "mse", "sse_under", "sse_over",
              "n_under", "n_over", "mean_bits_under", "mean_bits_over", "slope", "stderr", "t", "p"};
  for (const auto& r : res.reports)
    for (std::size_t v = 0; v < r.variants.size(); ++v) {
      const auto& s = r.variants[v];
      t.rows.push_back({family, std::to_string(r.iteration), r.subset, std::to_string(r.n_points), std::to_string(v + 1),
                        s.variant, num(s.ln_ppl), num(s.mse), num(s.split.sse_under), num(s.split.sse_over),
                        std::to_string(s.split.n_under), std::to_string(s.split.n_over), num(s.split.mean_bits_under),
                        num(s.split.mean_bits_over), num(r.slope.slope), num(r.slope.stderr_), num(r.slope.t_stat),
                        num(r.slope.p_one_tailed)});
    }
  return t;
}

inline json slope_json(const SlopeFit& f) {
  auto finite = [](double v) { return std::isfinite(v) ? json(v) : json(text::format_double(v)); };
  return {{"slope", f.slope}, {"intercept", f.intercept}, {"stderr", finite(f.stderr_)}, {"t", finite(f.t_stat)},
          {"p", finite(f.p_one_tailed)}, {"n", f.n}, {"degenerate", f.degenerate}};
}

inline std::string trend_svg(const FamilyTrend& f, bool dll) {
  std::vector<svg::Point> pts;
  for (const auto& r : f.rows)
    pts.push_back({std::log(r.info.perplexity), dll ? r.delta_ll : r.mse_noword, std::to_string(r.rank)});
  std::optional<svg::Line> line;
  const auto& fit = dll ? f.dll : f.mse;
  if (fit) line = svg::Line{fit->slope, fit->intercept};
  return svg::emit_scatter(pts, line,
                           {f.family + (dll ? ": delta log-likelihood" : ": MSE without by-word intercepts"),
                            "ln perplexity", dll ? "delta LL (nats)" : "MSE"});
}

// --- orchestration ----------------------------------------------------------------------

struct RunResult {
  int exit_code = 0;
  std::string message;
  int computed = 0;
  int skipped = 0;
  std::vector<fs::path> reports;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitStage = 3;

/// Store location: explicit argument, then RTOOL_STORE, then the config's "store", then ./rtool_store.
inline fs::path resolve_store(const std::optional<fs::path>& explicit_path, const std::optional<fs::path>& from_config) {
  if (explicit_path) return *explicit_path;
  if (const char* env = std::getenv("RTOOL_STORE"); env && *env) return env;
  if (from_config) return *from_config;
  return "rtool_store";
}

template <class Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

/// Runs every stage for every corpus. Validation problems return 2 before any work starts;
/// a failing stage returns 3 naming the stage, leaving only completed artifacts recorded.
inline RunResult run_pipeline(const PipelineConfig& config, const fs::path& store_root) {
  RunResult out;
  try {
    config.validate();
  } catch (const Error& e) {
    out.exit_code = kExitValidation;
    out.message = e.what();
    return out;
  }
  try {
    for (const auto& ci : config.corpora) {
      Workspace ws(store_root, ci.name);
      ws.set_specs(config.specs);
      ws.set_fit_options(config.fit);
      const std::string tag = ":" + ci.name;
      stage("ingest" + tag, [&] {
        auto spec = ci.filter ? FilterSpec::from_json(*ci.filter, ci.modality) : FilterSpec::defaults(ci.modality);
        ws.ingest(ci.file, ci.modality, ci.scores, spec);
      });
      if (ci.trees) stage("annotate" + tag, [&] { ws.annotate(*ci.trees, ci.index, ci.deps); });
      for (const auto& v : config.variants)
        stage("surprisal" + tag + ":" + v.tokens.filename().string(), [&] { return ws.import_variant(v.meta, v.tokens); });

      std::vector<ModelRequest> models = {{std::nullopt, true}, {std::nullopt, false}};
      for (const auto& v : ws.variants()) {
        models.push_back({v.meta.name, true});
        models.push_back({v.meta.name, false});
      }
      for (const auto& m : models) stage("fit" + tag + ":" + m.name(), [&] { return ws.ensure_fit(m); });

      // report inputs: every fit plus the variant metadata
      std::vector<std::string> parts;
      for (const auto& m : models) parts.push_back(*ws.store().output_of("fits/" + m.name() + ".json"));
      for (const auto& v : ws.variants()) parts.push_back(*ws.store().output_of("surprisal/" + v.meta.name + ".json"));
      const std::string fits_fp = combine_fingerprints(parts);

      stage("trend" + tag, [&] {
        std::vector<std::string> names = {"reports/trend.csv", "reports/variants.csv"};
        for (const auto& f : ws.families()) {
          names.push_back("reports/trend_" + f + "_dll.svg");
          names.push_back("reports/trend_" + f + "_mse.svg");
        }
        bool fresh = true;
        for (const auto& n : names) fresh = fresh && ws.store().fresh(n, fits_fp);
        if (fresh) {
          ws.store().note_skipped();
        } else {
          std::vector<FamilyTrend> trends;
          for (const auto& f : ws.families()) trends.push_back(ws.family_trend(f));
          ws.store().put("reports/trend.csv", csv::emit(trend_table(trends)), fits_fp);
          ws.store().put("reports/variants.csv", csv::emit(variant_table(trends)), fits_fp);
          for (const auto& t : trends) {
            ws.store().put("reports/trend_" + t.family + "_dll.svg", trend_svg(t, true), fits_fp);
            ws.store().put("reports/trend_" + t.family + "_mse.svg", trend_svg(t, false), fits_fp);
          }
        }
        for (const auto& n : names) out.reports.push_back(ws.store().path_of(n));
      });

      if (!ws.annotated()) continue;
      const std::string subset_fp =
          combine_fingerprints({fits_fp, *ws.store().output_of("properties.tsv"), std::to_string(config.k),
                                text::format_precise(config.min_frac)});
      for (const auto& f : ws.families()) {
        std::size_t members = 0;
        for (const auto& v : ws.variants()) members += to_string(v.meta.family) == f;
        if (members < 3) continue;  // the slope search needs three variants
        stage("subsets" + tag + ":" + f, [&] {
          const std::string base = "reports/subsets_" + f;
          const std::vector<std::string> names = {base + ".csv", base + ".svg", base + ".json"};
          bool fresh = true;
          for (const auto& n : names) fresh = fresh && ws.store().fresh(n, subset_fp);
          if (fresh) {
            ws.store().note_skipped();
          } else {
            auto res = ws.family_subsets(f, {config.k, config.min_frac});
            json summary = {{"family", f},
                            {"k", config.k},
                            {"min_frac", config.min_frac},
                            {"n_observations", ws.design(PartitionLabel::exploratory).obs.size()},
                            {"stop_reason", res.stop_reason},
                            {"corpus_slope", slope_json(res.corpus_slope)},
                            {"selected", json::array()}};
            for (const auto& r : res.reports)
              summary["selected"].push_back({{"iteration", r.iteration}, {"subset", r.subset}, {"n_points", r.n_points},
                                             {"slope", slope_json(r.slope)}});
            ws.store().put(names[0], csv::emit(subset_table(f, res)), subset_fp);
            ws.store().put(names[1], svg::emit_subset_panels(res, ci.name + " / " + f + ": residual subsets"), subset_fp);
            ws.store().put(names[2], summary.dump(2) + "\n", subset_fp);
          }
          for (const auto& n : names) out.reports.push_back(ws.store().path_of(n));
        });
      }
      out.computed += ws.store().computed();
      out.skipped += ws.store().skipped();
    }
  } catch (const StageError& e) {
    out.exit_code = kExitStage;
    out.message = e.what();
    return out;
  }
  out.message = "ok";
  return out;
}

}  // namespace rtool::pipeline
