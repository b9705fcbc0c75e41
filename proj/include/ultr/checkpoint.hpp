#pragma once

// Checkpoint container: a JSON document
//   { "format": "ultr-checkpoint", "version": 1, "stage": ...,
//     "config": {...}, "feature_params": {...}, "vocab": [terms...],
//     "parameters": [{"name", "rows", "cols", "values": [...]}, ...],
//     "optimizer": {...} | null, "propensity": {...} | null }
// Doubles are written in shortest round-trip form, so save/load is bit-exact.

#include <json.hpp>

#include <optional>
#include <string>

#include "ultr/clicklog.hpp"
#include "ultr/features.hpp"
#include "ultr/io.hpp"
#include "ultr/neural.hpp"

namespace ultr {

inline constexpr std::string_view kCheckpointFormat = "ultr-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string stage = "init";
  Vocabulary vocab;
  FeatureParams feature_params;
  WideDeepScorer scorer;
  std::optional<OptimizerState> optimizer;
  std::optional<PropensityModel> propensity;
};

namespace detail {

inline nlohmann::json to_json(const ScorerConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},     {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"ff_dim", c.ff_dim},           {"max_seq_len", c.max_seq_len},
          {"feature_proj_dim", c.feature_proj_dim}, {"mlp_dims", c.mlp_dims}, {"dropout_rate", c.dropout_rate}};
}

inline ScorerConfig scorer_config_from_json(const nlohmann::json& j) {
  ScorerConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.feature_proj_dim = j.at("feature_proj_dim").get<std::size_t>();
  c.mlp_dims = j.at("mlp_dims").get<std::vector<std::size_t>>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using nlohmann::json;
  json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["stage"] = ck.stage;
  j["config"] = detail::to_json(ck.scorer.config());
  j["feature_params"] = {{"k1", ck.feature_params.k1},
                         {"b", ck.feature_params.b},
                         {"mu", ck.feature_params.mu},
                         {"lambda_jm", ck.feature_params.lambda_jm}};
  j["vocab"] = ck.vocab.terms();
  json blocks = json::array();
  const auto params = ck.scorer.parameters();
  for (const auto& b : ck.scorer.blocks())
    blocks.push_back({{"name", b.name},
                      {"rows", b.rows},
                      {"cols", b.cols},
                      {"values", std::vector<double>(params.begin() + static_cast<std::ptrdiff_t>(b.offset),
                                                     params.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size()))}});
  j["parameters"] = std::move(blocks);
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    j["optimizer"] = {{"step", o.step},   {"learning_rate", o.learning_rate}, {"weight_decay", o.weight_decay},
                      {"beta1", o.beta1}, {"beta2", o.beta2},                 {"epsilon", o.epsilon},
                      {"m", o.m},         {"v", o.v}};
  } else {
    j["optimizer"] = nullptr;
  }
  if (ck.propensity) {
    const auto& p = *ck.propensity;
    j["propensity"] = {{"kind", p.kind == PropensityModel::Kind::DLA ? "dla" : "click_ratio"},
                       {"weights", p.weights},
                       {"position_logits", p.position_logits},
                       {"alpha", p.alpha}};
  } else {
    j["propensity"] = nullptr;
  }
  return j.dump();
}

inline Checkpoint deserialize_checkpoint(const std::string& text, const std::string& origin = "checkpoint") {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw data_error(origin + ": not a checkpoint (" + e.what() + ")");
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat)
    throw data_error(origin + ": not an ultr checkpoint");
  if (j.value("version", -1) != kCheckpointVersion)
    throw data_error(origin + ": unsupported checkpoint version " + j.value("version", nlohmann::json(-1)).dump());
  try {
    Checkpoint ck;
    ck.stage = j.at("stage").get<std::string>();
    const auto& fp = j.at("feature_params");
    ck.feature_params = {fp.at("k1").get<double>(), fp.at("b").get<double>(), fp.at("mu").get<double>(),
                         fp.at("lambda_jm").get<double>()};
    ck.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
    ck.scorer = WideDeepScorer(detail::scorer_config_from_json(j.at("config")));
    auto params = ck.scorer.parameters();
    const auto& blocks = j.at("parameters");
    if (blocks.size() != ck.scorer.blocks().size()) throw data_error(origin + ": parameter block count mismatch");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& want = ck.scorer.blocks()[i];
      const auto& got = blocks[i];
      if (got.at("name").get<std::string>() != want.name || got.at("rows").get<std::size_t>() != want.rows ||
          got.at("cols").get<std::size_t>() != want.cols)
        throw data_error(origin + ": parameter block '" + want.name + "' does not match the configuration");
      const auto values = got.at("values").get<std::vector<double>>();
      if (values.size() != want.size()) throw data_error(origin + ": block '" + want.name + "' has wrong size");
      std::copy(values.begin(), values.end(), params.begin() + static_cast<std::ptrdiff_t>(want.offset));
    }
    if (ck.vocab.size() != ck.scorer.config().vocab_size)
      throw data_error(origin + ": vocabulary size does not match scorer configuration");
    if (!j.at("optimizer").is_null()) {
      const auto& o = j.at("optimizer");
      OptimizerState st;
      st.step = o.at("step").get<std::size_t>();
      st.learning_rate = o.at("learning_rate").get<double>();
      st.weight_decay = o.at("weight_decay").get<double>();
      st.beta1 = o.at("beta1").get<double>();
      st.beta2 = o.at("beta2").get<double>();
      st.epsilon = o.at("epsilon").get<double>();
      st.m = o.at("m").get<std::vector<double>>();
      st.v = o.at("v").get<std::vector<double>>();
      if (st.m.size() != ck.scorer.parameter_count() || st.v.size() != ck.scorer.parameter_count())
        throw data_error(origin + ": optimizer moments do not match parameter count");
      ck.optimizer = std::move(st);
    }
    if (!j.at("propensity").is_null()) {
      const auto& p = j.at("propensity");
      PropensityModel m;
      m.kind = p.at("kind").get<std::string>() == "dla" ? PropensityModel::Kind::DLA : PropensityModel::Kind::ClickRatio;
      m.weights = p.at("weights").get<PositionArray>();
      m.position_logits = p.at("position_logits").get<PositionArray>();
      m.alpha = p.at("alpha").get<double>();
      ck.propensity = m;
    }
    return ck;
  } catch (const json::exception& e) {
    throw data_error(origin + ": malformed checkpoint (" + e.what() + ")");
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  auto os = io::open_out(path);
  os << serialize_checkpoint(ck) << '\n';
  if (!os) throw data_error("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path), path); }

/// Fresh checkpoint whose vocabulary covers the corpus.
inline Checkpoint initial_checkpoint(const Corpus& corpus, ScorerConfig cfg, std::uint64_t seed,
                                     FeatureParams fp = {}) {
  Checkpoint ck;
  ck.vocab = Vocabulary::from_corpus(corpus.documents(), corpus.queries());
  cfg.vocab_size = ck.vocab.size();
  ck.scorer = WideDeepScorer(cfg, seed);
  ck.feature_params = fp;
  return ck;
}

}  // namespace ultr
