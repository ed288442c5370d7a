// rtool: command-line front end over the analysis store.
//
// Every command reads and writes a store directory (--store, else $RTOOL_STORE, else
// ./rtool_store). Exit codes: 0 success, 2 invalid arguments or inputs, 3 a stage failed.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rtool/pipeline.hpp"

namespace fs = std::filesystem;
namespace pl = rtool::pipeline;
using nlohmann::json;

namespace {

struct Globals {
  std::string store;
  std::string corpus;
};

fs::path store_root(const Globals& g) {
  return pl::resolve_store(g.store.empty() ? std::nullopt : std::optional<fs::path>(g.store), std::nullopt);
}

/// The named corpus, or the only corpus in the store when none is named.
pl::Workspace open_corpus(const Globals& g) {
  const auto root = store_root(g);
  std::string name = g.corpus;
  if (name.empty()) {
    std::vector<std::string> found;
    if (fs::is_directory(root))
      for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / rtool::AnalysisStore::kManifest)) found.push_back(e.path().filename().string());
    if (found.size() != 1)
      throw rtool::ValidationError("--corpus is required (store " + root.string() + " holds " + std::to_string(found.size()) +
                                   " corpora)");
    name = found.front();
  }
  if (!fs::exists(root / name / rtool::AnalysisStore::kManifest))
    throw rtool::ValidationError("corpus '" + name + "' is not in store " + root.string() + "; run ingest first");
  return pl::Workspace(root, name);
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw rtool::ValidationError(what + " file not found: " + path);
}

void apply_specs(pl::Workspace& ws, const std::string& specs_file) {
  if (specs_file.empty()) return;
  require_file(specs_file, "specs");
  ws.set_specs(json::parse(rtool::text::read_file(specs_file)));
}

void ensure_family_fits(pl::Workspace& ws, const std::string& family) {
  ws.ensure_fit({std::nullopt, true});
  ws.ensure_fit({std::nullopt, false});
  for (const auto& v : ws.variants()) {
    if (rtool::to_string(v.meta.family) != family) continue;
    ws.ensure_fit({v.meta.name, true});
    ws.ensure_fit({v.meta.name, false});
  }
}

void write_output(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
  } else {
    rtool::write_atomic(path, content);
  }
}

/// Input problems map to 2; anything failing during computation maps to 3.
template <class Fn>
int guarded(const std::string& stage, Fn&& fn) {
  try {
    fn();
    return pl::kExitOk;
  } catch (const rtool::ValidationError& e) {
    std::cerr << "rtool: " << e.what() << "\n";
    return pl::kExitValidation;
  } catch (const rtool::SchemaError& e) {
    std::cerr << "rtool: " << e.what() << "\n";
    return pl::kExitValidation;
  } catch (const rtool::ParseError& e) {
    std::cerr << "rtool: " << e.what() << "\n";
    return pl::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "rtool: " << rtool::StageError(stage, e.what()).what() << "\n";
    return pl::kExitStage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surprisal and reading-time analysis toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--store", g.store, "Analysis store directory (default: $RTOOL_STORE, else ./rtool_store)");
  int code = pl::kExitOk;

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Load a reading-time corpus into the store");
  std::string corpus_file, modality, filter = "default", scores, name;
  ingest->add_option("--corpus", corpus_file, "Reading-time TSV")->required();
  ingest->add_option("--modality", modality, "spr or et")->required()->check(CLI::IsMember({"spr", "et"}));
  ingest->add_option("--filter", filter, "'default' or a filter JSON file");
  ingest->add_option("--scores", scores, "Per-subject comprehension scores TSV (subject_id, correct)");
  ingest->add_option("--name", name, "Corpus name in the store (default: file stem)");
  ingest->callback([&] {
    code = guarded("ingest", [&] {
      require_file(corpus_file, "corpus");
      if (!scores.empty()) require_file(scores, "scores");
      const auto m = rtool::parse_modality(modality);
      rtool::FilterSpec spec = rtool::FilterSpec::defaults(m);
      if (filter != "default") {
        require_file(filter, "filter");
        try {
          spec = rtool::FilterSpec::from_json(json::parse(rtool::text::read_file(filter)), m);
        } catch (const json::exception& e) {
          throw rtool::ValidationError(filter + ": " + e.what());
        }
      }
      const std::string n = name.empty() ? fs::path(corpus_file).stem().string() : name;
      pl::Workspace ws(store_root(g), n);
      ws.ingest(corpus_file, m, scores.empty() ? std::nullopt : std::optional<fs::path>(scores), spec);
      std::cout << ws.ingest_summary().dump(2) << "\n";
    });
  });

  // surprisal import
  auto* surprisal = app.add_subcommand("surprisal", "Manage per-variant surprisal tables");
  surprisal->require_subcommand(1);
  auto* import = surprisal->add_subcommand("import", "Align a variant's subword scores to corpus words");
  std::string meta_file, tokens_file, variant_check;
  import->add_option("--corpus", g.corpus, "Corpus name in the store");
  import->add_option("--meta", meta_file, "Variant metadata JSON")->required();
  import->add_option("--tokens", tokens_file, "Subword surprisal TSV")->required();
  import->add_option("--variant", variant_check, "Expected variant name (checked against the metadata)");
  import->callback([&] {
    code = guarded("surprisal", [&] {
      require_file(meta_file, "variant metadata");
      require_file(tokens_file, "surprisal");
      auto ws = open_corpus(g);
      const auto v = ws.import_variant(meta_file, tokens_file);
      if (!variant_check.empty() && v != variant_check)
        throw rtool::ValidationError("metadata names variant '" + v + "', expected '" + variant_check + "'");
      for (const auto& info : ws.variants())
        if (info.meta.name == v)
          std::cout << v << "\tperplexity=" << rtool::text::format_double(info.perplexity)
                    << "\ttokens=" << info.token_count << "\tcoverage=" << rtool::text::format_double(info.coverage) << "\n";
    });
  });

  // annotate
  auto* annotate = app.add_subcommand("annotate", "Derive per-word linguistic properties from parse trees");
  std::string trees, index, deps;
  annotate->add_option("--corpus", g.corpus, "Corpus name in the store");
  annotate->add_option("--trees", trees, "Bracketed trees, one per line")->required();
  annotate->add_option("--index", index, "TSV mapping tree lines to doc_id, sentence_id");
  annotate->add_option("--deps", deps, "Dependency arcs TSV (default: head-rule percolation)");
  annotate->callback([&] {
    code = guarded("annotate", [&] {
      require_file(trees, "trees");
      if (!index.empty()) require_file(index, "tree index");
      if (!deps.empty()) require_file(deps, "dependencies");
      auto ws = open_corpus(g);
      ws.annotate(trees, index.empty() ? std::nullopt : std::optional<fs::path>(index),
                  deps.empty() ? std::nullopt : std::optional<fs::path>(deps));
      std::cout << ws.store().path_of("properties.tsv").string() << "\n";
    });
  });

  // fit
  auto* fit = app.add_subcommand("fit", "Fit a linear mixed-effects model of log reading time");
  std::string fit_variant, partition = "exploratory", fit_out, specs;
  bool baseline = false, no_word = false;
  fit->add_option("--corpus", g.corpus, "Corpus name in the store");
  auto* opt_variant = fit->add_option("--variant", fit_variant, "Add this variant's surprisal as a predictor");
  auto* opt_baseline = fit->add_flag("--baseline", baseline, "Fit without surprisal");
  opt_variant->excludes(opt_baseline);
  fit->add_option("--partition", partition, "exploratory or heldout")->check(CLI::IsMember({"exploratory", "heldout"}));
  fit->add_flag("--no-word-intercept", no_word, "Drop by-word random intercepts");
  fit->add_option("--specs", specs, "Model specification JSON keyed by modality");
  fit->add_option("--out", fit_out, "Write the fitted model JSON here (default: stdout)");
  fit->callback([&] {
    code = guarded("fit", [&] {
      if (fit_variant.empty() && !baseline) throw rtool::ValidationError("fit needs --variant NAME or --baseline");
      auto ws = open_corpus(g);
      apply_specs(ws, specs);
      pl::ModelRequest r;
      if (!fit_variant.empty()) r.variant = fit_variant;
      r.word_intercept = !no_word;
      r.partition = rtool::parse_partition(partition);
      write_output(fit_out, ws.store().read(ws.ensure_fit(r)));
    });
  });

  // trend
  auto* trend = app.add_subcommand("trend", "Regress a fit metric on ln perplexity within a model family");
  std::string family, measure = "dll", plot;
  trend->add_option("--corpus", g.corpus, "Corpus name in the store");
  trend->add_option("--family", family, "Model family")->required();
  trend->add_option("--measure", measure, "dll or mse")->check(CLI::IsMember({"dll", "mse"}));
  trend->add_option("--plot", plot, "Write the scatter plot SVG here");
  trend->add_option("--specs", specs, "Model specification JSON keyed by modality");
  trend->callback([&] {
    code = guarded("trend", [&] {
      auto ws = open_corpus(g);
      apply_specs(ws, specs);
      ensure_family_fits(ws, family);
      pl::FamilyTrend t = ws.family_trend(family);
      const bool dll = measure == "dll";
      if (dll) t.mse.reset(); else t.dll.reset();
      if (!t.dll && !t.mse) throw rtool::ValidationError("family '" + family + "' needs at least two variants for a trend");
      std::cout << rtool::csv::emit(pl::trend_table({t}));
      if (!plot.empty()) rtool::write_atomic(plot, pl::trend_svg(t, dll));
    });
  });

  // subsets
  auto* subsets = app.add_subcommand("subsets", "Greedy search for word subsets driving the MSE trend");
  int k = 5;
  double min_frac = 0.01;
  std::string out_dir;
  subsets->add_option("--corpus", g.corpus, "Corpus name in the store");
  subsets->add_option("--family", family, "Model family")->required();
  subsets->add_option("--k", k, "Number of subsets to select")->check(CLI::PositiveNumber);
  subsets->add_option("--min-frac", min_frac, "Minimum remaining fraction for a subset to stay eligible")
      ->check(CLI::Range(0.0, 1.0));
  subsets->add_option("--out", out_dir, "Output directory")->required();
  subsets->add_option("--specs", specs, "Model specification JSON keyed by modality");
  subsets->callback([&] {
    code = guarded("subsets", [&] {
      auto ws = open_corpus(g);
      apply_specs(ws, specs);
      ensure_family_fits(ws, family);
      auto res = ws.family_subsets(family, {k, min_frac});
      const fs::path dir = out_dir;
      rtool::write_atomic(dir / ("subsets_" + family + ".csv"), rtool::csv::emit(pl::subset_table(family, res)));
      rtool::write_atomic(dir / ("subsets_" + family + ".svg"),
                          rtool::svg::emit_subset_panels(res, ws.name() + " / " + family + ": residual subsets"));
      for (const auto& r : res.reports)
        std::cout << r.iteration << "\t" << r.subset << "\tn=" << r.n_points
                  << "\tslope=" << rtool::text::format_double(r.slope.slope) << "\n";
      if (!res.stop_reason.empty()) std::cout << "stopped: " << res.stop_reason << "\n";
    });
  });

  // run
  auto* run = app.add_subcommand("run", "Run every stage from a configuration file, skipping fresh artifacts");
  std::string config;
  run->add_option("config", config, "Pipeline configuration JSON")->required();
  run->callback([&] {
    int pipeline_code = pl::kExitOk;
    code = guarded("run", [&] {
      if (!fs::is_regular_file(config)) throw rtool::ValidationError("config file not found: " + config);
      auto cfg = pl::PipelineConfig::load(config);
      const auto root = pl::resolve_store(g.store.empty() ? std::nullopt : std::optional<fs::path>(g.store), cfg.store);
      auto res = pl::run_pipeline(cfg, root);
      if (res.exit_code != pl::kExitOk) {
        std::cerr << "rtool: " << res.message << "\n";
        pipeline_code = res.exit_code;
        return;
      }
      std::cout << "computed " << res.computed << ", skipped " << res.skipped << "\n";
      for (const auto& p : res.reports) std::cout << p.string() << "\n";
    });
    if (code == pl::kExitOk) code = pipeline_code;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : pl::kExitValidation;
  }
  return code;
}
