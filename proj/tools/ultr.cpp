// ultr: command-line front end for the two-stage ranking pipeline.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ultr/pipeline.hpp"

namespace {

using namespace ultr;
namespace pl = ultr::pipeline;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out_dir = ".";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "INI configuration file");
  sub->add_option("--seed", c.seed, "global seed (overrides the configuration)");
  sub->add_option("--threads", c.threads, "worker threads (default 1)")->check(CLI::PositiveNumber);
  sub->add_option("--out-dir", c.out_dir, "artifact directory (default .)");
}

PipelineConfig resolve(const Common& c, const std::string& subcommand) {
  PipelineConfig cfg = c.config_path.empty() ? PipelineConfig{} : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  resolve_seeds(cfg);
  validate_config(cfg);
  pl::write_config_log(pl::Paths{c.out_dir}.log(subcommand + ".config.ini"), cfg);
  return cfg;
}

std::string or_default(const std::string& value, const std::string& fallback) { return value.empty() ? fallback : value; }

bool is_annotation_file(const std::string& path) {
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  return first.rfind(io::header("annotations"), 0) == 0;
}

/// Graded labels from either an annotation file or a qrels file.
Qrels read_labels(const std::string& path) {
  return is_annotation_file(path) ? to_qrels(read_annotations(path)) : read_qrels(path);
}

/// Annotations from either file kind; qrels take their buckets from the query file.
std::vector<AnnotatedExample> read_annotation_set(const std::string& path, const Corpus& corpus) {
  return is_annotation_file(path) ? read_annotations(path) : make_annotations(read_qrels(path), corpus);
}

std::vector<NamedRun> load_runs(const std::vector<std::pair<std::string, std::string>>& specs) {
  std::vector<NamedRun> runs;
  for (const auto& [name, path] : specs) runs.emplace_back(name, read_scores(path));
  return runs;
}

std::vector<std::pair<std::string, std::string>> parse_run_specs(const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
      throw CLI::ValidationError("--run", "expected NAME=SCORE_FILE, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage learning-to-rank pipeline: click pretraining, fine-tuning, ensembling."};
  app.require_subcommand(1);

  Common common;
  std::string corpus_path, queries_path, qrels_path, features_path, clicklog_path, annotations_path, checkpoint_path,
      init_path, out_path, scores_path, model_path, write_scores_path, run_id = "run", feature_name, report_path;
  std::vector<std::string> run_specs;

  auto* synth = app.add_subcommand("synth", "generate a synthetic collection with graded relevance");
  add_common(synth, common);

  auto* features = app.add_subcommand("features", "extract heuristic features for judged pairs");
  add_common(features, common);
  features->add_option("--corpus", corpus_path, "corpus file (default <out-dir>/corpus.tsv)");
  features->add_option("--queries", queries_path, "query file (default <out-dir>/queries.tsv)");
  features->add_option("--qrels", qrels_path, "pairs to featurize (default <out-dir>/qrels.tsv)");
  features->add_option("--out", out_path, "feature dump (default <out-dir>/features.tsv)");

  auto* simulate = app.add_subcommand("simulate", "simulate a position-biased click log");
  add_common(simulate, common);
  simulate->add_option("--qrels", qrels_path, "true relevance (default <out-dir>/qrels.tsv)");
  simulate->add_option("--features", features_path, "features for the logging ranker (default <out-dir>/features.tsv)");
  simulate->add_option("--out", out_path, "click log (default <out-dir>/clicklog.tsv)");

  auto* pre = app.add_subcommand("pretrain", "train the scorer on a click log");
  add_common(pre, common);
  pre->add_option("--corpus", corpus_path, "corpus file (default <out-dir>/corpus.tsv)");
  pre->add_option("--queries", queries_path, "query file (default <out-dir>/queries.tsv)");
  pre->add_option("--clicklog", clicklog_path, "click log (default <out-dir>/clicklog.tsv)");
  pre->add_option("--init", init_path, "start from this checkpoint instead of a fresh initialization");
  pre->add_option("--out", out_path, "output checkpoint (default <out-dir>/checkpoints/pretrain.json)");

  auto* fine = app.add_subcommand("finetune", "fine-tune a checkpoint on graded annotations");
  add_common(fine, common);
  fine->add_option("--checkpoint", checkpoint_path, "checkpoint to start from")->required();
  fine->add_option("--annotations", annotations_path, "annotation or qrels file (default <out-dir>/annotations.tsv)");
  fine->add_option("--corpus", corpus_path, "corpus file (default <out-dir>/corpus.tsv)");
  fine->add_option("--queries", queries_path, "query file (default <out-dir>/queries.tsv)");
  fine->add_option("--out", out_path, "output checkpoint (default <out-dir>/checkpoints/finetune.json)");

  auto* ens = app.add_subcommand("ensemble", "train or apply the boosted-tree ensemble");
  ens->require_subcommand(1);
  auto* ens_train = ens->add_subcommand("train", "fit the ensemble on labelled pairs");
  add_common(ens_train, common);
  ens_train->add_option("--labels", annotations_path, "annotation or qrels file with training labels")->required();
  ens_train->add_option("--features", features_path, "feature dump (default <out-dir>/features.tsv)");
  ens_train->add_option("--run", run_specs, "score column NAME=SCORE_FILE (repeatable)");
  ens_train->add_option("--model", model_path, "model file (default <out-dir>/ensemble/model.txt)");
  auto* ens_predict = ens->add_subcommand("predict", "score pairs with a trained ensemble");
  add_common(ens_predict, common);
  ens_predict->add_option("--model", model_path, "model file (default <out-dir>/ensemble/model.txt)");
  ens_predict->add_option("--features", features_path, "feature dump (default <out-dir>/features.tsv)");
  ens_predict->add_option("--qrels", qrels_path, "restrict to these pairs (default: every featurized pair)");
  ens_predict->add_option("--run", run_specs, "override a manifest score column NAME=SCORE_FILE (repeatable)");
  ens_predict->add_option("--out", out_path, "score file (default <out-dir>/scores/ensemble.tsv)");

  auto* evaluate = app.add_subcommand("evaluate", "DCG@10 / NDCG@10 of a run");
  add_common(evaluate, common);
  evaluate->add_option("--labels", annotations_path, "annotation or qrels file (default <out-dir>/qrels.tsv)");
  auto* src = evaluate->add_option_group("source", "what to evaluate");
  src->add_option("--scores", scores_path, "score file");
  src->add_option("--checkpoint", checkpoint_path, "score the labelled pairs with this checkpoint");
  src->add_option("--feature", feature_name, "rank by one heuristic feature of --features");
  src->require_option(1);
  evaluate->add_option("--corpus", corpus_path, "corpus file (default <out-dir>/corpus.tsv)");
  evaluate->add_option("--queries", queries_path, "query file (default <out-dir>/queries.tsv)");
  evaluate->add_option("--features", features_path, "feature dump (default <out-dir>/features.tsv)");
  evaluate->add_option("--write-scores", write_scores_path, "save the scores that were evaluated");
  evaluate->add_option("--report", report_path, "per-query metrics file");
  evaluate->add_option("--run-id", run_id, "run name in the report");

  auto* experiment = app.add_subcommand("experiment", "run the full synthetic experiment (resumable)");
  add_common(experiment, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const pl::Paths paths{common.out_dir};
    const auto corpus_file = or_default(corpus_path, paths.corpus());
    const auto queries_file = or_default(queries_path, paths.queries());

    if (*synth) {
      const auto cfg = resolve(common, "synth");
      const auto data = generate_synthetic_corpus(cfg.synth, cfg.seed);
      write_corpus(paths.corpus(), data.documents);
      write_queries(paths.queries(), data.queries);
      write_qrels(paths.qrels(), data.true_relevance);
      std::cout << data.queries.size() << " queries, " << data.documents.size() << " documents\n";
    } else if (*features) {
      const auto cfg = resolve(common, "features");
      const Corpus corpus = pl::load_corpus(corpus_file, queries_file);
      const auto table = extract_feature_table(corpus, read_qrels(or_default(qrels_path, paths.qrels())),
                                               build_corpus_stats(corpus.documents()), cfg.features, cfg.threads);
      write_feature_dump(or_default(out_path, paths.features()), table);
      std::cout << table.size() << " feature rows\n";
    } else if (*simulate) {
      const auto cfg = resolve(common, "simulate");
      const Qrels qrels = read_qrels(or_default(qrels_path, paths.qrels()));
      FeatureTable table;
      if (cfg.simulate.policy.kind == LoggingPolicy::Kind::FeatureSorted)
        table = read_feature_dump(or_default(features_path, paths.features()));
      const auto log = pl::simulate_stage(qrels, table, cfg);
      write_click_log(or_default(out_path, paths.clicklog()), log);
      std::cout << log.size() << " sessions\n";
    } else if (*pre) {
      const auto cfg = resolve(common, "pretrain");
      const Corpus corpus = pl::load_corpus(corpus_file, queries_file);
      const auto stats = build_corpus_stats(corpus.documents());
      const auto init = init_path.empty() ? pl::initial_stage(corpus, cfg) : load_checkpoint(init_path);
      const auto r = pretrain(corpus, stats, read_click_log(or_default(clicklog_path, paths.clicklog())), cfg.pretrain, init);
      const auto out = or_default(out_path, paths.checkpoint("pretrain"));
      save_checkpoint(out, r.checkpoint);
      pl::write_pretrain_log(paths.log("pretrain.tsv"), r.log);
      for (const auto& e : r.log) std::cout << "epoch " << e.epoch << "\tloss " << e.loss << "\t" << e.seconds << "s\n";
    } else if (*fine) {
      const auto cfg = resolve(common, "finetune");
      const Corpus corpus = pl::load_corpus(corpus_file, queries_file);
      const auto r = finetune(corpus, build_corpus_stats(corpus.documents()), load_checkpoint(checkpoint_path),
                              read_annotation_set(or_default(annotations_path, paths.annotations()), corpus), cfg.finetune,
                              cfg.threads);
      save_checkpoint(or_default(out_path, paths.checkpoint("finetune")), r.checkpoint);
      pl::write_finetune_log(paths.log("finetune.tsv"), r);
      for (const auto& e : r.log)
        std::cout << "epoch " << e.epoch << "\tloss " << e.train_loss << "\tvalidation DCG@10 " << e.validation_dcg << '\n';
      std::cout << "selected epoch " << r.best_epoch << '\n';
    } else if (*ens_train) {
      const auto cfg = resolve(common, "ensemble-train");
      const auto specs = parse_run_specs(run_specs);
      const auto table = assemble_rows(read_labels(annotations_path),
                                       read_feature_dump(or_default(features_path, paths.features())), load_runs(specs));
      GBDTHyperparams hp = cfg.ensemble.hyperparams;
      if (cfg.ensemble.tune) {
        auto grid = default_gbdt_grid();
        for (auto& g : grid) {
          g.max_depth = hp.max_depth;
          g.num_iterations = hp.num_iterations;
          g.min_samples_leaf = hp.min_samples_leaf;
        }
        hp = tune_gbdt(table, grid, cfg.seed, cfg.threads).best;
      }
      const auto model = train_gbdt(table, hp, cfg.seed, cfg.threads);
      const auto model_file = or_default(model_path, paths.ensemble_model());
      write_gbdt_model(model_file, model);
      const auto model_dir = pl::fs::absolute(model_file).parent_path();
      std::vector<std::pair<std::string, std::string>> manifest;
      for (const auto& [name, file] : specs)
        manifest.emplace_back(name, pl::fs::relative(pl::fs::absolute(file), model_dir).string());
      write_run_manifest((model_dir / "runs.tsv").string(), manifest);
      std::cout << model.trees.size() << " trees, training DCG@10 " << table_dcg(table, model.predict(table)) << '\n';
    } else if (*ens_predict) {
      const auto cfg = resolve(common, "ensemble-predict");
      const auto model_file = or_default(model_path, paths.ensemble_model());
      const auto model = read_gbdt_model(model_file);
      const auto model_dir = pl::fs::absolute(model_file).parent_path();
      auto specs = read_run_manifest((model_dir / "runs.tsv").string());
      for (auto& s : specs)
        if (pl::fs::path(s.second).is_relative()) s.second = (model_dir / s.second).lexically_normal().string();
      for (const auto& [name, file] : parse_run_specs(run_specs)) {
        auto it = std::find_if(specs.begin(), specs.end(), [&](const auto& s) { return s.first == name; });
        if (it == specs.end()) throw data_error("run '" + name + "' is not a column of the model");
        it->second = file;
      }
      const auto feats = read_feature_dump(or_default(features_path, paths.features()));
      Qrels keys;
      if (qrels_path.empty())
        for (const auto& [key, unused] : feats) keys[key] = 0;
      else
        keys = read_qrels(qrels_path);
      const auto table = assemble_rows(keys, feats, load_runs(specs));
      write_scores(or_default(out_path, paths.scores("ensemble")), table_scores(table, model.predict(table)));
      std::cout << table.num_rows() << " pairs scored\n";
    } else if (*evaluate) {
      const auto cfg = resolve(common, "evaluate");
      const Qrels labels = read_labels(or_default(annotations_path, paths.qrels()));
      ScoreTable scores;
      if (!scores_path.empty()) {
        scores = read_scores(scores_path);
      } else if (!checkpoint_path.empty()) {
        const Corpus corpus = pl::load_corpus(corpus_file, queries_file);
        scores = score_pairs(load_checkpoint(checkpoint_path), corpus, build_corpus_stats(corpus.documents()), labels,
                             cfg.threads);
      } else {
        scores = feature_scores(read_feature_dump(or_default(features_path, paths.features())), feature_name);
      }
      if (!write_scores_path.empty()) write_scores(write_scores_path, scores);
      const auto report = evaluate_run(scores, labels, 10, run_id);
      if (!report_path.empty()) write_per_query_report(report_path, report);
      std::cout << format_report_table({report});
      if (report.skipped_queries) std::cout << report.skipped_queries << " scored queries without labels skipped\n";
    } else if (*experiment) {
      const auto cfg = resolve(common, "experiment");
      const auto summary = pl::run_experiment(cfg, common.out_dir, std::cerr);
      std::cout << summary.table;
    }
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
