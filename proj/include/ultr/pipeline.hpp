#pragma once

// Artifact layout and stage functions shared by the command-line tool, plus the
// end-to-end synthetic experiment.
//
// Experiment directory:
//   corpus.tsv queries.tsv qrels.tsv    synthetic collection and true relevance
//   roles.tsv                           query role: click / annotated / test
//   features.tsv clicklog.tsv annotations.tsv
//   checkpoints/{init,pretrain-<v>,finetune-<v>}.json
//   logs/                               training logs and resolved configurations
//   scores/<run>.tsv metrics/<run>.tsv ensemble/{model.txt,runs.tsv}
//   report.txt

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "ultr/checkpoint.hpp"
#include "ultr/config.hpp"
#include "ultr/ensemble.hpp"
#include "ultr/finetune.hpp"
#include "ultr/pretrain.hpp"
#include "ultr/ranker.hpp"

namespace ultr::pipeline {

namespace fs = std::filesystem;

struct Paths {
  fs::path dir;

  std::string file(const std::string& name) const { return (dir / name).string(); }
  std::string corpus() const { return file("corpus.tsv"); }
  std::string queries() const { return file("queries.tsv"); }
  std::string qrels() const { return file("qrels.tsv"); }
  std::string roles() const { return file("roles.tsv"); }
  std::string features() const { return file("features.tsv"); }
  std::string clicklog() const { return file("clicklog.tsv"); }
  std::string annotations() const { return file("annotations.tsv"); }
  std::string report() const { return file("report.txt"); }
  std::string checkpoint(const std::string& name) const { return (dir / "checkpoints" / (name + ".json")).string(); }
  std::string log(const std::string& name) const { return (dir / "logs" / name).string(); }
  std::string scores(const std::string& run) const { return (dir / "scores" / (run + ".tsv")).string(); }
  std::string metrics(const std::string& run) const { return (dir / "metrics" / (run + ".tsv")).string(); }
  std::string ensemble_model() const { return (dir / "ensemble" / "model.txt").string(); }
  std::string ensemble_manifest() const { return (dir / "ensemble" / "runs.tsv").string(); }
};

inline bool exists(const std::string& path) { return fs::exists(path); }

/// Writes through `writer` to a temporary name and renames it into place, so an
/// interrupted stage never leaves a truncated artifact behind.
template <class Writer>
void write_atomic(const std::string& path, Writer&& writer) {
  const std::string tmp = path + ".partial";
  writer(tmp);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw data_error("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

inline Corpus load_corpus(const std::string& corpus_path, const std::string& queries_path) {
  return Corpus(read_corpus(corpus_path), read_queries(queries_path));
}

inline void write_config_log(const std::string& path, const PipelineConfig& cfg) {
  auto os = io::open_out(path);
  os << format_config(cfg);
}

// ---------------------------------------------------------------------------
// Training logs
// ---------------------------------------------------------------------------

inline void write_pretrain_log(const std::string& path, const std::vector<EpochLog>& log) {
  auto os = io::open_artifact(path, "trainlog");
  os << "epoch\tloss\tseconds\n";
  for (const auto& e : log) os << e.epoch << '\t' << io::format_double(e.loss) << '\t' << io::format_double(e.seconds) << '\n';
}

inline void write_finetune_log(const std::string& path, const FinetuneResult& r) {
  auto os = io::open_artifact(path, "trainlog");
  os << "epoch\tloss\tvalidation_dcg@10\tseconds\n";
  for (const auto& e : r.log)
    os << e.epoch << '\t' << io::format_double(e.train_loss) << '\t' << io::format_double(e.validation_dcg) << '\t'
       << io::format_double(e.seconds) << '\n';
  os << "# selected epoch " << r.best_epoch << '\n';
}

// ---------------------------------------------------------------------------
// Query roles
// ---------------------------------------------------------------------------

enum class Role { Click, Annotated, Test };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::Click: return "click";
    case Role::Annotated: return "annotated";
    case Role::Test: return "test";
  }
  return "?";
}

/// Shuffles query ids with the seed; the first `test_queries` become test queries, the
/// next `annotated_queries` annotated ones, the rest drive the click simulation.
inline std::map<std::string, Role> assign_roles(const std::vector<Query>& queries, const ExperimentConfig& cfg,
                                                std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& q : queries) ids.push_back(q.query_id);
  std::sort(ids.begin(), ids.end());
  if (cfg.test_queries + cfg.annotated_queries >= ids.size())
    throw data_error("experiment needs more queries than annotated_queries + test_queries (" + std::to_string(ids.size()) +
                     " available)");
  Rng rng(derive_seed(seed, "roles"));
  std::shuffle(ids.begin(), ids.end(), rng);
  std::map<std::string, Role> roles;
  for (std::size_t i = 0; i < ids.size(); ++i)
    roles[ids[i]] = i < cfg.test_queries ? Role::Test : i < cfg.test_queries + cfg.annotated_queries ? Role::Annotated : Role::Click;
  return roles;
}

inline void write_roles(const std::string& path, const std::map<std::string, Role>& roles) {
  auto os = io::open_artifact(path, "roles");
  for (const auto& [q, r] : roles) os << q << '\t' << to_string(r) << '\n';
}

inline std::map<std::string, Role> read_roles(const std::string& path) {
  std::map<std::string, Role> roles;
  for (const auto& row : io::read_rows(path, "roles", 2)) {
    const auto& r = row.fields[1];
    roles[row.fields[0]] = r == "click" ? Role::Click : r == "annotated" ? Role::Annotated : r == "test" ? Role::Test
                           : throw data_error(path + ": unknown role '" + r + "'");
  }
  return roles;
}

inline Qrels restrict_qrels(const Qrels& qrels, const std::map<std::string, Role>& roles, Role role) {
  Qrels out;
  for (const auto& [key, g] : qrels) {
    auto it = roles.find(key.first);
    if (it != roles.end() && it->second == role) out.emplace(key, g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

struct Variant {
  std::string name;
  IpwKind ipw = IpwKind::None;
  PretrainLoss loss = PretrainLoss::ListwiseLog;
};

inline Variant parse_variant(const std::string& name) {
  Variant v{name};
  const auto dash = name.find('-');
  const auto ipw = name.substr(0, dash);
  const auto loss = dash == std::string::npos ? std::string() : name.substr(dash + 1);
  if (ipw == "none") v.ipw = IpwKind::None;
  else if (ipw == "clickratio") v.ipw = IpwKind::ClickRatio;
  else if (ipw == "dla") v.ipw = IpwKind::DLA;
  else throw data_error("unknown variant '" + name + "'");
  if (loss == "listwise") v.loss = PretrainLoss::ListwiseLog;
  else if (loss == "pairwise") v.loss = PretrainLoss::PairwisePriority;
  else throw data_error("unknown variant '" + name + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline std::vector<ClickSession> simulate_stage(const Qrels& qrels, const FeatureTable& features,
                                                const PipelineConfig& cfg) {
  ClickSimConfig cc;
  cc.eta = cfg.simulate.eta;
  cc.epsilon_noise = cfg.simulate.epsilon_noise;
  cc.seed = derive_seed(cfg.seed, "simulate");
  return simulate_log(qrels, features, cfg.simulate.num_sessions, cfg.simulate.policy, cc);
}

inline Checkpoint initial_stage(const Corpus& corpus, const PipelineConfig& cfg) {
  return initial_checkpoint(corpus, cfg.scorer, derive_seed(cfg.seed, "init"), cfg.features);
}

/// Scores `pairs` with a checkpoint, reusing a stored score file when present.
template <class KeyedTable>
ScoreTable cached_scores(const std::string& path, const std::string& checkpoint_path, const Corpus& corpus,
                         const CorpusStats& stats, const KeyedTable& pairs, std::size_t threads) {
  if (exists(path)) return read_scores(path);
  const auto scores = score_pairs(load_checkpoint(checkpoint_path), corpus, stats, pairs, threads);
  write_atomic(path, [&](const std::string& tmp) { write_scores(tmp, scores); });
  return scores;
}

struct ExperimentSummary {
  std::vector<MetricsReport> reports;
  std::string table;
};

/// Runs every stage whose artifact is missing and reports DCG@10 / NDCG@10 of the
/// baseline, each pretrained and fine-tuned variant and the ensemble on the test queries.
/// A directory holding artifacts of a different configuration is rejected.
inline ExperimentSummary run_experiment(PipelineConfig cfg, const std::string& out_dir, std::ostream& log) {
  resolve_seeds(cfg);
  validate_config(cfg);
  const Paths p{out_dir};
  fs::create_directories(p.dir);
  {
    PipelineConfig fingerprint = cfg;
    fingerprint.threads = 1;
    const auto text = format_config(fingerprint);
    const auto path = p.file("experiment.ini");
    if (exists(path) && io::read_file(path) != text)
      throw data_error(out_dir + " holds artifacts of a different configuration (see experiment.ini)");
    if (!exists(path)) write_atomic(path, [&](const std::string& tmp) { io::open_out(tmp) << text; });
  }
  write_config_log(p.log("experiment.config.ini"), cfg);
  const std::size_t threads = cfg.threads;
  auto stage = [&](const std::string& name, bool cached) { log << (cached ? "[cached] " : "[run]    ") << name << std::endl; };

  // Collection.
  const bool have_synth = exists(p.corpus()) && exists(p.queries()) && exists(p.qrels());
  stage("synth", have_synth);
  if (!have_synth) {
    const auto data = generate_synthetic_corpus(cfg.synth, cfg.seed);
    write_atomic(p.corpus(), [&](const std::string& t) { write_corpus(t, data.documents); });
    write_atomic(p.queries(), [&](const std::string& t) { write_queries(t, data.queries); });
    write_atomic(p.qrels(), [&](const std::string& t) { write_qrels(t, data.true_relevance); });
  }
  const Corpus corpus = load_corpus(p.corpus(), p.queries());
  const CorpusStats stats = build_corpus_stats(corpus.documents());
  const Qrels qrels = read_qrels(p.qrels());

  stage("roles", exists(p.roles()));
  if (!exists(p.roles()))
    write_atomic(p.roles(), [&](const std::string& t) { write_roles(t, assign_roles(corpus.queries(), cfg.experiment, cfg.seed)); });
  const auto roles = read_roles(p.roles());
  const Qrels click_qrels = restrict_qrels(qrels, roles, Role::Click);
  const Qrels annotated_qrels = restrict_qrels(qrels, roles, Role::Annotated);
  const Qrels test_qrels = restrict_qrels(qrels, roles, Role::Test);

  stage("features", exists(p.features()));
  if (!exists(p.features()))
    write_atomic(p.features(), [&](const std::string& t) {
      write_feature_dump(t, extract_feature_table(corpus, qrels, stats, cfg.features, threads));
    });
  const FeatureTable features = read_feature_dump(p.features());

  stage("simulate", exists(p.clicklog()));
  if (!exists(p.clicklog()))
    write_atomic(p.clicklog(), [&](const std::string& t) { write_click_log(t, simulate_stage(click_qrels, features, cfg)); });
  const auto clicklog = read_click_log(p.clicklog());

  stage("annotations", exists(p.annotations()));
  if (!exists(p.annotations()))
    write_atomic(p.annotations(), [&](const std::string& t) { write_annotations(t, make_annotations(annotated_qrels, corpus)); });
  const auto annotations = read_annotations(p.annotations());

  stage("init", exists(p.checkpoint("init")));
  if (!exists(p.checkpoint("init")))
    write_atomic(p.checkpoint("init"), [&](const std::string& t) { save_checkpoint(t, initial_stage(corpus, cfg)); });

  std::vector<Variant> variants;
  for (const auto& v : cfg.experiment.variants) variants.push_back(parse_variant(v));

  for (const auto& v : variants) {
    const auto pre = p.checkpoint("pretrain-" + v.name);
    stage("pretrain " + v.name, exists(pre));
    if (!exists(pre)) {
      PretrainConfig pc = cfg.pretrain;
      pc.ipw = v.ipw;
      pc.loss = v.loss;
      const auto r = pretrain(corpus, stats, clicklog, pc, load_checkpoint(p.checkpoint("init")));
      write_pretrain_log(p.log("pretrain-" + v.name + ".tsv"), r.log);
      write_atomic(pre, [&](const std::string& t) { save_checkpoint(t, r.checkpoint); });
    }
    const auto fine = p.checkpoint("finetune-" + v.name);
    stage("finetune " + v.name, exists(fine));
    if (!exists(fine)) {
      const auto r = finetune(corpus, stats, load_checkpoint(pre), annotations, cfg.finetune, threads);
      write_finetune_log(p.log("finetune-" + v.name + ".tsv"), r);
      write_atomic(fine, [&](const std::string& t) { save_checkpoint(t, r.checkpoint); });
    }
  }

  // Every model run is scored on the annotated and the test pairs.
  Qrels scored = annotated_qrels;
  scored.insert(test_qrels.begin(), test_qrels.end());
  std::vector<NamedRun> runs;
  for (const auto& v : variants)
    for (const std::string stage_name : {"pretrain", "finetune"}) {
      const std::string run = stage_name + "-" + v.name;
      stage("score " + run, exists(p.scores(run)));
      runs.emplace_back(run, cached_scores(p.scores(run), p.checkpoint(run), corpus, stats, scored, threads));
    }

  // Ensemble on the fine-tuning validation queries.
  const auto [ft_train, ft_validation] = split_by_query(annotations, cfg.finetune.split_ratio, cfg.finetune.seed);
  stage("ensemble", exists(p.ensemble_model()));
  if (!exists(p.ensemble_model())) {
    const auto table = assemble_rows(to_qrels(ft_validation), features, runs);
    GBDTHyperparams hp = cfg.ensemble.hyperparams;
    if (cfg.ensemble.tune) {
      auto grid = default_gbdt_grid();
      for (auto& g : grid) {
        g.max_depth = hp.max_depth;
        g.num_iterations = hp.num_iterations;
        g.min_samples_leaf = hp.min_samples_leaf;
      }
      hp = tune_gbdt(table, grid, cfg.seed, threads).best;
    }
    const auto model = train_gbdt(table, hp, cfg.seed, threads);
    std::vector<std::pair<std::string, std::string>> manifest;
    for (const auto& [name, unused] : runs) manifest.emplace_back(name, fs::relative(p.scores(name), p.dir / "ensemble").string());
    write_run_manifest(p.ensemble_manifest(), manifest);
    write_atomic(p.ensemble_model(), [&](const std::string& t) { write_gbdt_model(t, model); });
  }
  const auto model = read_gbdt_model(p.ensemble_model());
  const auto test_table = assemble_rows(test_qrels, features, runs);
  const auto ensemble_scores = table_scores(test_table, model.predict(test_table));
  write_atomic(p.scores("ensemble"), [&](const std::string& t) { write_scores(t, ensemble_scores); });

  // Report on the test queries.
  ExperimentSummary summary;
  auto add = [&](const std::string& run, const ScoreTable& scores) {
    auto r = evaluate_run(scores, test_qrels, 10, run);
    write_per_query_report(p.metrics(run), r);
    summary.reports.push_back(std::move(r));
  };
  add("bm25", feature_scores(features, "bm25"));
  for (const auto& [name, scores] : runs) add(name, scores);
  add("ensemble", ensemble_scores);
  summary.table = format_report_table(summary.reports);
  write_atomic(p.report(), [&](const std::string& t) { io::open_out(t) << summary.table; });
  return summary;
}

}  // namespace ultr::pipeline
