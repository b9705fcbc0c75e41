#pragma once

// Pipeline configuration: an INI file with one [section] per module. Every key is
// optional; unknown sections or keys are errors. `format_config` prints the fully
// resolved configuration in the same format, so it can be fed back in.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ultr/clicklog.hpp"
#include "ultr/corpus.hpp"
#include "ultr/ensemble.hpp"
#include "ultr/features.hpp"
#include "ultr/finetune.hpp"
#include "ultr/neural.hpp"
#include "ultr/pretrain.hpp"

namespace ultr {

struct SimulateConfig {
  std::size_t num_sessions = 10000;
  double eta = 1.0;
  double epsilon_noise = 0.0;
  LoggingPolicy policy;
};

struct EnsembleConfig {
  GBDTHyperparams hyperparams;
  /// Select hyperparameters on a nested split of the training table before the final fit.
  bool tune = true;
};

struct ExperimentConfig {
  /// Queries whose judgments are used for fine-tuning and the ensemble.
  std::size_t annotated_queries = 150;
  /// Held-out queries used only for the final report.
  std::size_t test_queries = 100;
  /// Pretraining variants, "<ipw>-<loss>" with ipw in {none, clickratio, dla} and loss
  /// in {listwise, pairwise}.
  std::vector<std::string> variants{"none-listwise", "clickratio-listwise", "dla-listwise", "clickratio-pairwise"};
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  SynthConfig synth;
  SimulateConfig simulate;
  FeatureParams features;
  ScorerConfig scorer;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  EnsembleConfig ensemble;
  ExperimentConfig experiment;
  /// "section.key" of every key set by the configuration file.
  std::set<std::string> explicit_keys;
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

using ConfigSchema = std::vector<std::pair<std::string, std::vector<ConfigField>>>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

inline ConfigField bind(const std::string& key, std::size_t& v) {
  return {key,
          [&v, key](const std::string& s) {
            const auto x = io::parse_int(s, key);
            if (x < 0) throw data_error("config key '" + key + "' must be non-negative");
            v = static_cast<std::size_t>(x);
          },
          [&v] { return std::to_string(v); }};
}

inline ConfigField bind(const std::string& key, std::uint64_t& v, int) {
  return {key,
          [&v, key](const std::string& s) {
            try {
              std::size_t used = 0;
              v = std::stoull(s, &used);
              if (used != s.size() || s.front() == '-') throw std::invalid_argument(s);
            } catch (const std::exception&) {
              throw data_error("config key '" + key + "': '" + s + "' is not an unsigned integer");
            }
          },
          [&v] { return std::to_string(v); }};
}

inline ConfigField bind(const std::string& key, double& v) {
  return {key, [&v, key](const std::string& s) { v = io::parse_double(s, key); },
          [&v] { return io::format_double(v); }};
}

inline ConfigField bind(const std::string& key, bool& v) {
  return {key,
          [&v, key](const std::string& s) {
            if (s == "true" || s == "1" || s == "yes") v = true;
            else if (s == "false" || s == "0" || s == "no") v = false;
            else throw data_error("config key '" + key + "': '" + s + "' is not a boolean");
          },
          [&v] { return std::string(v ? "true" : "false"); }};
}

inline ConfigField bind_string(const std::string& key, std::string& v, std::function<void(const std::string&)> check = {}) {
  return {key,
          [&v, check](const std::string& s) {
            if (check) check(s);
            v = s;
          },
          [&v] { return v; }};
}

template <class E>
ConfigField bind_enum(const std::string& key, E& v, std::vector<std::pair<std::string, E>> names) {
  return {key,
          [&v, key, names](const std::string& s) {
            for (const auto& [n, e] : names)
              if (n == s) {
                v = e;
                return;
              }
            std::string allowed;
            for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : ", ") + n;
            throw data_error("config key '" + key + "': '" + s + "' is not one of " + allowed);
          },
          [&v, names] {
            for (const auto& [n, e] : names)
              if (e == v) return n;
            return std::string("?");
          }};
}

inline ConfigField bind_list(const std::string& key, std::vector<std::size_t>& v) {
  return {key,
          [&v, key](const std::string& s) {
            v.clear();
            for (const auto& part : io::split(s, ',')) {
              const auto x = io::parse_int(trim(part), key);
              if (x <= 0) throw data_error("config key '" + key + "' needs positive integers");
              v.push_back(static_cast<std::size_t>(x));
            }
          },
          [&v] {
            std::vector<std::string> parts;
            for (auto x : v) parts.push_back(std::to_string(x));
            return io::join(parts, ',');
          }};
}

inline ConfigField bind_list(const std::string& key, std::vector<std::string>& v) {
  return {key,
          [&v](const std::string& s) {
            v.clear();
            for (const auto& part : io::split(s, ','))
              if (!trim(part).empty()) v.push_back(trim(part));
          },
          [&v] { return io::join(v, ','); }};
}

inline ConfigSchema schema(PipelineConfig& c) {
  auto& sy = c.synth;
  auto& sim = c.simulate;
  auto& sc = c.scorer;
  auto& pt = c.pretrain;
  auto& ft = c.finetune;
  auto& en = c.ensemble;
  auto& ex = c.experiment;
  auto check_feature = [](const std::string& s) { feature_index(s); };
  return {
      {"global", {bind("seed", c.seed, 0), bind("threads", c.threads)}},
      {"synth",
       {bind("vocab_size", sy.vocab_size), bind("num_queries", sy.num_queries), bind("docs_per_query", sy.docs_per_query),
        bind("query_len_min", sy.query_len_min), bind("query_len_max", sy.query_len_max),
        bind("title_len_min", sy.title_len_min), bind("title_len_max", sy.title_len_max),
        bind("content_len_min", sy.content_len_min), bind("content_len_max", sy.content_len_max),
        bind("match_base", sy.match_base), bind("match_per_grade", sy.match_per_grade),
        bind("zipf_exponent", sy.zipf_exponent)}},
      {"simulate",
       {bind("num_sessions", sim.num_sessions), bind("eta", sim.eta), bind("epsilon_noise", sim.epsilon_noise),
        bind_enum("policy", sim.policy.kind,
                  {{"feature_sorted", LoggingPolicy::Kind::FeatureSorted}, {"shuffled", LoggingPolicy::Kind::Shuffled}}),
        bind_string("logging_feature", sim.policy.feature, check_feature), bind("noise_sd", sim.policy.noise_sd)}},
      {"features",
       {bind("k1", c.features.k1), bind("b", c.features.b), bind("mu", c.features.mu),
        bind("lambda_jm", c.features.lambda_jm)}},
      {"scorer",
       {bind("embed_dim", sc.embed_dim), bind("num_layers", sc.num_layers), bind("num_heads", sc.num_heads),
        bind("ff_dim", sc.ff_dim), bind("max_seq_len", sc.max_seq_len), bind("feature_proj_dim", sc.feature_proj_dim),
        bind_list("mlp_dims", sc.mlp_dims), bind("dropout_rate", sc.dropout_rate)}},
      {"pretrain",
       {bind("delta", pt.delta), bind("tau", pt.tau), bind_string("refinement_feature", pt.refinement_feature, check_feature),
        bind("num_random_negatives", pt.num_random_negatives), bind("replace_post_click", pt.replace_post_click),
        bind_enum("ipw", pt.ipw, {{"none", IpwKind::None}, {"click_ratio", IpwKind::ClickRatio}, {"dla", IpwKind::DLA}}),
        bind("alpha", pt.alpha),
        bind_enum("loss", pt.loss,
                  {{"listwise_log", PretrainLoss::ListwiseLog},
                   {"listwise", PretrainLoss::ListwiseAsWritten},
                   {"pairwise", PretrainLoss::PairwisePriority}}),
        bind("epochs", pt.epochs), bind("batch_size", pt.batch_size), bind("lr", pt.lr),
        bind("weight_decay", pt.weight_decay), bind("propensity_lr", pt.propensity_lr),
        bind("dla_max_weight", pt.dla_max_weight), bind("seed", pt.seed, 0)}},
      {"finetune",
       {bind_enum("loss", ft.loss,
                  {{"softmax_negatives", FinetuneLoss::SoftmaxNegatives},
                   {"pairwise", FinetuneLoss::Pairwise},
                   {"listwise", FinetuneLoss::Listwise}}),
        bind("T", ft.T), bind("head_dup_factor", ft.head_dup_factor), bind("split_ratio", ft.split_ratio),
        bind("groups_per_query", ft.groups_per_query), bind("epochs", ft.epochs), bind("batch_size", ft.batch_size),
        bind("lr", ft.lr), bind("weight_decay", ft.weight_decay), bind("log_variant", ft.log_variant),
        bind("seed", ft.seed, 0)}},
      {"ensemble",
       {bind("num_leaves", en.hyperparams.num_leaves), bind("max_depth", en.hyperparams.max_depth),
        bind("learning_rate", en.hyperparams.learning_rate), bind("num_iterations", en.hyperparams.num_iterations),
        bind("min_samples_leaf", en.hyperparams.min_samples_leaf), bind("tune", en.tune)}},
      {"experiment",
       {bind("annotated_queries", ex.annotated_queries), bind("test_queries", ex.test_queries),
        bind_list("variants", ex.variants)}},
  };
}

}  // namespace detail

/// Checks cross-field constraints of a parsed configuration.
inline void validate_config(const PipelineConfig& c) {
  if (c.threads == 0) throw data_error("threads must be >= 1");
  c.features.validate();
  auto sc = c.scorer;
  sc.vocab_size = kNumReservedIds + 1;
  sc.validate();
  c.pretrain.validate();
  c.finetune.validate();
  c.ensemble.hyperparams.validate();
  if (!(c.simulate.eta >= 0)) throw data_error("eta must be >= 0");
  if (!(c.simulate.epsilon_noise >= 0 && c.simulate.epsilon_noise < 1)) throw data_error("epsilon_noise must be in [0,1)");
  for (const auto& v : c.experiment.variants) {
    const auto dash = v.find('-');
    const auto ipw = v.substr(0, dash), loss = dash == std::string::npos ? "" : v.substr(dash + 1);
    if ((ipw != "none" && ipw != "clickratio" && ipw != "dla") || (loss != "listwise" && loss != "pairwise"))
      throw data_error("unknown experiment variant '" + v + "'");
  }
}

/// Parses INI text over the defaults. Keys outside any section belong to [global].
inline PipelineConfig parse_config(const std::string& text, const std::string& origin = "config") {
  PipelineConfig c;
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw data_error(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  auto sch = detail::schema(c);
  auto find_section = [&](const std::string& name) -> std::vector<detail::ConfigField>* {
    for (auto& [n, fields] : sch)
      if (n == name) return &fields;
    return nullptr;
  };
  auto apply = [&](const std::string& section, const std::string& key, const std::string& value) {
    auto* fields = find_section(section);
    if (!fields) throw data_error(origin + ": unknown section [" + section + "]");
    for (auto& f : *fields)
      if (f.key == key) {
        f.set(detail::trim(value));
        c.explicit_keys.insert(section + "." + key);
        return;
      }
    throw data_error(origin + ": unknown key '" + key + "' in [" + section + "]");
  };
  for (const auto& [name, node] : tree) {
    if (node.empty() && node.data().empty() && find_section(name)) continue;  // empty section
    if (node.empty()) apply("global", name, node.data());
    else
      for (const auto& [key, leaf] : node) apply(name, key, leaf.data());
  }
  validate_config(c);
  return c;
}

/// Module seeds not set explicitly are derived from the global seed.
inline void resolve_seeds(PipelineConfig& c) {
  if (!c.explicit_keys.count("pretrain.seed")) c.pretrain.seed = derive_seed(c.seed, "pretrain");
  if (!c.explicit_keys.count("finetune.seed")) c.finetune.seed = derive_seed(c.seed, "finetune");
}

inline PipelineConfig load_config(const std::string& path) { return parse_config(io::read_file(path), path); }

/// Fully resolved configuration as INI text.
inline std::string format_config(const PipelineConfig& config) {
  PipelineConfig c = config;
  std::ostringstream os;
  for (const auto& [section, fields] : detail::schema(c)) {
    os << '[' << section << "]\n";
    for (const auto& f : fields) os << f.key << " = " << f.get() << '\n';
    os << '\n';
  }
  return os.str();
}

}  // namespace ultr
