#pragma once

// Wide-and-deep scorer: a pre-norm transformer cross-encoder over
// "[CLS] query [SEP] document", whose [CLS] vector is concatenated with a ReLU
// projection of the heuristic features and mapped to a score by an MLP.
// Gradients are hand-derived reverse mode; everything is 64-bit.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ultr/common.hpp"
#include "ultr/corpus.hpp"
#include "ultr/features.hpp"

namespace ultr {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;
/// Title/content boundary marker. The tokenizer never emits it.
inline constexpr std::string_view kSepToken = "[SEP]";

/// Term -> id map over the corpus terms (sorted), after the reserved ids.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> terms) : terms_(std::move(terms)) {
    std::sort(terms_.begin(), terms_.end());
    terms_.erase(std::unique(terms_.begin(), terms_.end()), terms_.end());
    for (std::size_t i = 0; i < terms_.size(); ++i) index_.emplace(terms_[i], static_cast<int>(i) + kNumReservedIds);
  }

  static Vocabulary from_corpus(const std::vector<Document>& docs, const std::vector<Query>& queries) {
    std::vector<std::string> terms;
    for (const auto& d : docs) {
      terms.insert(terms.end(), d.title_tokens.begin(), d.title_tokens.end());
      terms.insert(terms.end(), d.content_tokens.begin(), d.content_tokens.end());
    }
    for (const auto& q : queries) terms.insert(terms.end(), q.tokens.begin(), q.tokens.end());
    return Vocabulary(std::move(terms));
  }

  int id(const std::string& term) const {
    if (term == kSepToken) return kSepId;
    auto it = index_.find(term);
    return it == index_.end() ? kUnkId : it->second;
  }
  std::size_t size() const { return terms_.size() + kNumReservedIds; }
  const std::vector<std::string>& terms() const { return terms_; }

 private:
  std::vector<std::string> terms_;
  std::unordered_map<std::string, int> index_;
};

/// Title, boundary marker, content. The marker is omitted when the title is empty.
inline Tokens encoder_doc_tokens(const Document& d) {
  Tokens out = d.title_tokens;
  if (!out.empty()) out.emplace_back(kSepToken);
  out.insert(out.end(), d.content_tokens.begin(), d.content_tokens.end());
  return out;
}

/// [CLS] query [SEP] doc, truncated to max_seq_len (document first, then query) and
/// padded with PAD.
inline std::vector<int> encode_pair(const Vocabulary& vocab, const Tokens& query, const Tokens& doc,
                                    std::size_t max_seq_len) {
  if (max_seq_len < 2) throw data_error("max_seq_len must be >= 2");
  const std::size_t room = max_seq_len - 2;
  const std::size_t q_len = std::min(query.size(), room);
  const std::size_t d_len = std::min(doc.size(), room - q_len);
  std::vector<int> ids;
  ids.reserve(max_seq_len);
  ids.push_back(kClsId);
  for (std::size_t i = 0; i < q_len; ++i) ids.push_back(vocab.id(query[i]));
  ids.push_back(kSepId);
  for (std::size_t i = 0; i < d_len; ++i) ids.push_back(vocab.id(doc[i]));
  ids.resize(max_seq_len, kPadId);
  return ids;
}

struct ScorerConfig {
  std::size_t vocab_size = kNumReservedIds;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t ff_dim = 64;
  std::size_t max_seq_len = 64;
  std::size_t feature_proj_dim = 16;
  std::vector<std::size_t> mlp_dims{32, 1};
  double dropout_rate = 0.0;

  void validate() const {
    if (vocab_size < kNumReservedIds) throw data_error("vocab_size must cover the reserved ids");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
      throw data_error("embed_dim must be a positive multiple of num_heads");
    if (ff_dim == 0 || feature_proj_dim == 0) throw data_error("ff_dim and feature_proj_dim must be positive");
    if (max_seq_len < 2) throw data_error("max_seq_len must be >= 2");
    if (mlp_dims.empty() || mlp_dims.back() != 1) throw data_error("mlp_dims must end in 1");
    for (auto d : mlp_dims)
      if (d == 0) throw data_error("mlp_dims entries must be positive");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) throw data_error("dropout_rate must be in [0,1)");
  }
  bool operator==(const ScorerConfig&) const = default;
};

struct ScoringInput {
  std::vector<int> ids;
  std::array<double, kNumFeatures> features{};
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

namespace detail {
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ColVec = Eigen::Matrix<double, Eigen::Dynamic, 1>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;
using RowMap = Eigen::Map<RowVec>;
using CRowMap = Eigen::Map<const RowVec>;

inline constexpr double kLayerNormEps = 1e-5;

/// Signed log squash applied to heuristic features before projection.
inline double squash(double x) { return std::copysign(std::log1p(std::abs(x)), x); }

inline double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
}
inline double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u);
}

struct LayerIndex {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};
}  // namespace detail

/// Parameter set of the wide-and-deep ranker. All parameters live in one flat buffer
/// described by named blocks, so optimizers and checkpoints treat them uniformly.
class WideDeepScorer {
 public:
  WideDeepScorer() = default;

  /// Zero-initialized parameters (layer-norm gains included).
  explicit WideDeepScorer(ScorerConfig cfg) : config_(std::move(cfg)) {
    config_.validate();
    build_layout();
    values_.assign(total_, 0.0);
  }

  /// Random initialization: N(0, 1/fan_in) weights, N(0, 0.1^2) embeddings, unit
  /// layer-norm gains. Biases feeding a ReLU start at 0.01 so all-zero inputs do not
  /// sit on the kink; other biases start at zero.
  WideDeepScorer(ScorerConfig cfg, std::uint64_t seed) : WideDeepScorer(std::move(cfg)) {
    Rng rng(derive_seed(seed, "scorer-init"));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& b : blocks_) {
      double sd = 0.0;
      const bool is_gain = b.name.ends_with(".gain");
      const bool is_bias = b.name.ends_with(".bias");
      if (b.name.starts_with("embed.")) sd = 0.1;
      else if (!is_gain && !is_bias) sd = 1.0 / std::sqrt(static_cast<double>(b.rows));
      const bool relu_bias = is_bias && (b.name.starts_with("wide.") ||
                                         (b.name.starts_with("mlp") && b.cols != 1));
      for (std::size_t i = 0; i < b.size(); ++i)
        values_[b.offset + i] = is_gain ? 1.0 : relu_bias ? 0.01 : (sd > 0 ? sd * normal(rng) : 0.0);
    }
  }

  const ScorerConfig& config() const { return config_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::span<double> parameters() { return values_; }
  std::span<const double> parameters() const { return values_; }
  std::size_t parameter_count() const { return values_.size(); }

  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw data_error("no parameter block '" + name + "'");
  }

  /// Closed-form parameter count for a configuration.
  static std::size_t expected_parameter_count(const ScorerConfig& c) {
    const std::size_t D = c.embed_dim, F = c.ff_dim, P = c.feature_proj_dim;
    std::size_t n = c.vocab_size * D + c.max_seq_len * D;
    n += c.num_layers * (2 * D + 4 * (D * D + D) + 2 * D + (D * F + F) + (F * D + D));
    n += 2 * D;
    n += kNumFeatures * P + P;
    std::size_t in = D + P;
    for (auto out : c.mlp_dims) {
      n += in * out + out;
      in = out;
    }
    return n;
  }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  friend struct ScorerKernels;

  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    blocks_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
    return blocks_.size() - 1;
  }

  void build_layout() {
    const std::size_t D = config_.embed_dim, F = config_.ff_dim, P = config_.feature_proj_dim;
    tok_ = add("embed.token", config_.vocab_size, D);
    pos_ = add("embed.position", config_.max_seq_len, D);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      detail::LayerIndex li{};
      li.ln1_g = add(p + "ln1.gain", 1, D);
      li.ln1_b = add(p + "ln1.bias", 1, D);
      li.wq = add(p + "attn.query.weight", D, D);
      li.bq = add(p + "attn.query.bias", 1, D);
      li.wk = add(p + "attn.key.weight", D, D);
      li.bk = add(p + "attn.key.bias", 1, D);
      li.wv = add(p + "attn.value.weight", D, D);
      li.bv = add(p + "attn.value.bias", 1, D);
      li.wo = add(p + "attn.output.weight", D, D);
      li.bo = add(p + "attn.output.bias", 1, D);
      li.ln2_g = add(p + "ln2.gain", 1, D);
      li.ln2_b = add(p + "ln2.bias", 1, D);
      li.w1 = add(p + "ff.in.weight", D, F);
      li.b1 = add(p + "ff.in.bias", 1, F);
      li.w2 = add(p + "ff.out.weight", F, D);
      li.b2 = add(p + "ff.out.bias", 1, D);
      layers_.push_back(li);
    }
    lnf_g_ = add("final_ln.gain", 1, D);
    lnf_b_ = add("final_ln.bias", 1, D);
    feat_w_ = add("wide.proj.weight", kNumFeatures, P);
    feat_b_ = add("wide.proj.bias", 1, P);
    std::size_t in = D + P;
    for (std::size_t k = 0; k < config_.mlp_dims.size(); ++k) {
      const auto out = config_.mlp_dims[k];
      mlp_w_.push_back(add("mlp" + std::to_string(k) + ".weight", in, out));
      mlp_b_.push_back(add("mlp" + std::to_string(k) + ".bias", 1, out));
      in = out;
    }
  }

  ScorerConfig config_;
  std::vector<ParamBlock> blocks_;
  std::vector<double> values_;
  std::size_t total_ = 0;
  std::size_t tok_ = 0, pos_ = 0, lnf_g_ = 0, lnf_b_ = 0, feat_w_ = 0, feat_b_ = 0;
  std::vector<detail::LayerIndex> layers_;
  std::vector<std::size_t> mlp_w_, mlp_b_;
};

/// Activations retained by the forward pass for the backward pass.
struct ForwardCache {
  struct Layer {
    detail::Mat x_in, xhat1, a, q, k, v, o, x1, xhat2, b, u, g;
    detail::ColVec rstd1, rstd2;
    std::vector<detail::Mat> probs;
  };
  std::vector<int> token_ids;
  std::vector<int> positions;
  std::vector<Layer> layers;
  detail::RowVec cls_xhat, cls, feat_in, feat_pre, dropout_mask;
  double cls_rstd = 0;
  std::vector<detail::RowVec> mlp_in, mlp_pre;
  double score = 0;
};

struct ScorerKernels {
  using Mat = detail::Mat;
  using RowVec = detail::RowVec;
  using ColVec = detail::ColVec;

  static detail::CMatMap cmat(const WideDeepScorer& s, std::size_t idx) {
    const auto& b = s.blocks_[idx];
    return {s.values_.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
  }
  static detail::CRowMap crow(const WideDeepScorer& s, std::size_t idx) {
    const auto& b = s.blocks_[idx];
    return {s.values_.data() + b.offset, static_cast<Eigen::Index>(b.size())};
  }
  static detail::MatMap gmat(const WideDeepScorer& s, std::span<double> g, std::size_t idx) {
    const auto& b = s.blocks_[idx];
    return {g.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
  }
  static detail::RowMap grow(const WideDeepScorer& s, std::span<double> g, std::size_t idx) {
    const auto& b = s.blocks_[idx];
    return {g.data() + b.offset, static_cast<Eigen::Index>(b.size())};
  }

  static void layer_norm(const Mat& x, const detail::CRowMap& gain, const detail::CRowMap& bias, Mat& xhat,
                         ColVec& rstd, Mat& y) {
    const ColVec mean = x.rowwise().mean();
    xhat = x.colwise() - mean;
    rstd = (xhat.array().square().rowwise().mean() + detail::kLayerNormEps).rsqrt().matrix();
    xhat = rstd.asDiagonal() * xhat;
    y = (xhat.array().rowwise() * gain.array()).matrix();
    y.rowwise() += bias;
  }

  static Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const ColVec& rstd, const detail::CRowMap& gain,
                                 detail::RowMap dgain, detail::RowMap dbias) {
    dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    const Mat dxhat = (dy.array().rowwise() * gain.array()).matrix();
    const ColVec m1 = dxhat.rowwise().mean();
    const ColVec m2 = (dxhat.array() * xhat.array()).rowwise().mean().matrix();
    Mat dx = dxhat.colwise() - m1;
    dx -= (xhat.array().colwise() * m2.array()).matrix();
    return rstd.asDiagonal() * dx;
  }

  /// Forward pass. PAD positions are excluded from attention entirely, which is
  /// equivalent to masking them as keys: they never influence the [CLS] readout.
  static double forward(const WideDeepScorer& s, const ScoringInput& in, ForwardCache& c, Rng* dropout_rng) {
    const auto& cfg = s.config_;
    if (in.ids.size() != cfg.max_seq_len)
      throw data_error("scorer input has " + std::to_string(in.ids.size()) + " ids, expected max_seq_len " +
                       std::to_string(cfg.max_seq_len));
    const Eigen::Index D = static_cast<Eigen::Index>(cfg.embed_dim);
    const Eigen::Index H = static_cast<Eigen::Index>(cfg.num_heads);
    const Eigen::Index dh = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.token_ids.clear();
    c.positions.clear();
    for (std::size_t p = 0; p < in.ids.size(); ++p) {
      if (in.ids[p] == kPadId) continue;
      if (in.ids[p] < 0 || static_cast<std::size_t>(in.ids[p]) >= cfg.vocab_size)
        throw data_error("token id " + std::to_string(in.ids[p]) + " outside vocabulary");
      c.token_ids.push_back(in.ids[p]);
      c.positions.push_back(static_cast<int>(p));
    }
    if (c.token_ids.empty() || c.positions.front() != 0 || c.token_ids.front() != kClsId)
      throw data_error("scorer input must start with [CLS]");
    const Eigen::Index n = static_cast<Eigen::Index>(c.token_ids.size());

    const auto tok = cmat(s, s.tok_);
    const auto pos = cmat(s, s.pos_);
    Mat x(n, D);
    for (Eigen::Index r = 0; r < n; ++r) x.row(r) = tok.row(c.token_ids[r]) + pos.row(c.positions[r]);

    c.layers.resize(s.layers_.size());
    for (std::size_t l = 0; l < s.layers_.size(); ++l) {
      const auto& li = s.layers_[l];
      auto& L = c.layers[l];
      L.x_in = x;
      layer_norm(x, crow(s, li.ln1_g), crow(s, li.ln1_b), L.xhat1, L.rstd1, L.a);
      L.q = L.a * cmat(s, li.wq);
      L.q.rowwise() += crow(s, li.bq);
      L.k = L.a * cmat(s, li.wk);
      L.k.rowwise() += crow(s, li.bk);
      L.v = L.a * cmat(s, li.wv);
      L.v.rowwise() += crow(s, li.bv);
      L.o.resize(n, D);
      L.probs.resize(static_cast<std::size_t>(H));
      for (Eigen::Index h = 0; h < H; ++h) {
        Mat sc = (L.q.middleCols(h * dh, dh) * L.k.middleCols(h * dh, dh).transpose()) * scale;
        const ColVec mx = sc.rowwise().maxCoeff();
        sc = (sc.colwise() - mx).array().exp().matrix();
        const ColVec sum = sc.rowwise().sum();
        sc = sum.cwiseInverse().asDiagonal() * sc;
        L.o.middleCols(h * dh, dh) = sc * L.v.middleCols(h * dh, dh);
        L.probs[static_cast<std::size_t>(h)] = std::move(sc);
      }
      L.x1 = x + L.o * cmat(s, li.wo);
      L.x1.rowwise() += crow(s, li.bo);
      layer_norm(L.x1, crow(s, li.ln2_g), crow(s, li.ln2_b), L.xhat2, L.rstd2, L.b);
      L.u = L.b * cmat(s, li.w1);
      L.u.rowwise() += crow(s, li.b1);
      L.g = L.u.unaryExpr([](double u) { return detail::gelu(u); });
      x = L.x1 + L.g * cmat(s, li.w2);
      x.rowwise() += crow(s, li.b2);
    }

    // Final layer norm on the [CLS] row only.
    {
      const RowVec row = x.row(0);
      const double mean = row.mean();
      c.cls_xhat = row.array() - mean;
      c.cls_rstd = 1.0 / std::sqrt(c.cls_xhat.array().square().mean() + detail::kLayerNormEps);
      c.cls_xhat *= c.cls_rstd;
      c.cls = (c.cls_xhat.array() * crow(s, s.lnf_g_).array()).matrix() + crow(s, s.lnf_b_);
    }

    c.feat_in.resize(static_cast<Eigen::Index>(kNumFeatures));
    for (std::size_t i = 0; i < kNumFeatures; ++i) c.feat_in(static_cast<Eigen::Index>(i)) = detail::squash(in.features[i]);
    c.feat_pre = c.feat_in * cmat(s, s.feat_w_) + crow(s, s.feat_b_);

    RowVec z(c.cls.size() + c.feat_pre.size());
    z << c.cls, c.feat_pre.cwiseMax(0.0);
    c.dropout_mask.resize(0);
    if (dropout_rng && cfg.dropout_rate > 0) {
      c.dropout_mask.resize(z.size());
      const double keep = 1.0 - cfg.dropout_rate;
      for (Eigen::Index i = 0; i < z.size(); ++i) c.dropout_mask(i) = uniform01(*dropout_rng) < keep ? 1.0 / keep : 0.0;
      z = z.cwiseProduct(c.dropout_mask);
    }
    const std::size_t nm = s.mlp_w_.size();
    c.mlp_in.resize(nm);
    c.mlp_pre.resize(nm);
    for (std::size_t k = 0; k < nm; ++k) {
      c.mlp_in[k] = z;
      c.mlp_pre[k] = z * cmat(s, s.mlp_w_[k]) + crow(s, s.mlp_b_[k]);
      z = k + 1 < nm ? RowVec(c.mlp_pre[k].cwiseMax(0.0)) : c.mlp_pre[k];
    }
    c.score = z(0);
    return c.score;
  }

  /// Accumulates d(score)/d(params) * upstream into `grad`.
  static void backward(const WideDeepScorer& s, const ForwardCache& c, double upstream, std::span<double> grad) {
    const auto& cfg = s.config_;
    const Eigen::Index D = static_cast<Eigen::Index>(cfg.embed_dim);
    const Eigen::Index H = static_cast<Eigen::Index>(cfg.num_heads);
    const Eigen::Index dh = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nm = s.mlp_w_.size();

    RowVec dz = RowVec::Constant(1, upstream);
    for (std::size_t k = nm; k-- > 0;) {
      RowVec dpre = dz;
      if (k + 1 < nm) dpre = dpre.cwiseProduct((c.mlp_pre[k].array() > 0.0).cast<double>().matrix());
      gmat(s, grad, s.mlp_w_[k]).noalias() += c.mlp_in[k].transpose() * dpre;
      grow(s, grad, s.mlp_b_[k]) += dpre;
      dz = dpre * cmat(s, s.mlp_w_[k]).transpose();
    }
    if (c.dropout_mask.size()) dz = dz.cwiseProduct(c.dropout_mask);
    const RowVec dcls = dz.head(D);
    const RowVec dfeat = dz.tail(dz.size() - D).cwiseProduct((c.feat_pre.array() > 0.0).cast<double>().matrix());
    gmat(s, grad, s.feat_w_).noalias() += c.feat_in.transpose() * dfeat;
    grow(s, grad, s.feat_b_) += dfeat;

    const Eigen::Index n = static_cast<Eigen::Index>(c.token_ids.size());
    Mat dx = Mat::Zero(n, D);
    {
      const auto gain = crow(s, s.lnf_g_);
      grow(s, grad, s.lnf_g_) += dcls.cwiseProduct(c.cls_xhat);
      grow(s, grad, s.lnf_b_) += dcls;
      const RowVec dxhat = dcls.cwiseProduct(gain);
      const double m1 = dxhat.mean();
      const double m2 = dxhat.cwiseProduct(c.cls_xhat).mean();
      dx.row(0) = c.cls_rstd * (dxhat.array() - m1 - c.cls_xhat.array() * m2).matrix();
    }

    for (std::size_t l = s.layers_.size(); l-- > 0;) {
      const auto& li = s.layers_[l];
      const auto& L = c.layers[l];
      // Feed-forward branch.
      Mat dx1 = dx;
      gmat(s, grad, li.w2).noalias() += L.g.transpose() * dx;
      grow(s, grad, li.b2) += dx.colwise().sum();
      Mat du = dx * cmat(s, li.w2).transpose();
      du = du.cwiseProduct(L.u.unaryExpr([](double u) { return detail::gelu_grad(u); }));
      gmat(s, grad, li.w1).noalias() += L.b.transpose() * du;
      grow(s, grad, li.b1) += du.colwise().sum();
      const Mat db = du * cmat(s, li.w1).transpose();
      dx1 += layer_norm_backward(db, L.xhat2, L.rstd2, crow(s, li.ln2_g), grow(s, grad, li.ln2_g), grow(s, grad, li.ln2_b));

      // Attention branch.
      gmat(s, grad, li.wo).noalias() += L.o.transpose() * dx1;
      grow(s, grad, li.bo) += dx1.colwise().sum();
      const Mat d_o = dx1 * cmat(s, li.wo).transpose();
      Mat dq(n, D), dk(n, D), dv(n, D);
      for (Eigen::Index h = 0; h < H; ++h) {
        const Mat& P = L.probs[static_cast<std::size_t>(h)];
        const auto doh = d_o.middleCols(h * dh, dh);
        const Mat dp = doh * L.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = P.transpose() * doh;
        const ColVec rs = (dp.array() * P.array()).rowwise().sum().matrix();
        const Mat ds = (P.array() * (dp.colwise() - rs).array()).matrix() * scale;
        dq.middleCols(h * dh, dh) = ds * L.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * L.q.middleCols(h * dh, dh);
      }
      gmat(s, grad, li.wq).noalias() += L.a.transpose() * dq;
      grow(s, grad, li.bq) += dq.colwise().sum();
      gmat(s, grad, li.wk).noalias() += L.a.transpose() * dk;
      grow(s, grad, li.bk) += dk.colwise().sum();
      gmat(s, grad, li.wv).noalias() += L.a.transpose() * dv;
      grow(s, grad, li.bv) += dv.colwise().sum();
      Mat da = dq * cmat(s, li.wq).transpose();
      da.noalias() += dk * cmat(s, li.wk).transpose();
      da.noalias() += dv * cmat(s, li.wv).transpose();
      dx = dx1 + layer_norm_backward(da, L.xhat1, L.rstd1, crow(s, li.ln1_g), grow(s, grad, li.ln1_g),
                                     grow(s, grad, li.ln1_b));
    }

    auto gtok = gmat(s, grad, s.tok_);
    auto gpos = gmat(s, grad, s.pos_);
    for (Eigen::Index r = 0; r < n; ++r) {
      gtok.row(c.token_ids[r]) += dx.row(r);
      gpos.row(c.positions[r]) += dx.row(r);
    }
  }
};

/// Deterministic inference score x for one (query, document) input.
inline double score(const WideDeepScorer& s, const ScoringInput& in) {
  if (!s.all_finite()) throw numeric_error("non-finite parameters");
  ForwardCache cache;
  return ScorerKernels::forward(s, in, cache, nullptr);
}

/// Scores a batch over a frozen parameter snapshot; output order matches input order
/// for any thread count.
inline std::vector<double> score_batch(const WideDeepScorer& s, std::span<const ScoringInput> inputs,
                                       std::size_t threads = 1) {
  if (!s.all_finite()) throw numeric_error("non-finite parameters");
  std::vector<double> out(inputs.size());
  parallel_for(inputs.size(), threads, [&](std::size_t i) {
    ForwardCache cache;
    out[i] = ScorerKernels::forward(s, inputs[i], cache, nullptr);
  });
  return out;
}

/// Loss over a vector of scores together with d loss / d scores.
struct LossValue {
  double loss = 0;
  std::vector<double> dscores;
};
using LossFn = std::function<LossValue(std::span<const double> scores)>;

struct ForwardBackwardResult {
  double loss = 0;
  std::vector<double> scores;
  std::vector<double> gradients;
};

/// Scores every input, evaluates the loss on the score vector and back-propagates it
/// to every parameter.
inline ForwardBackwardResult forward_backward(const WideDeepScorer& s, std::span<const ScoringInput> batch,
                                              const LossFn& loss_fn, Rng* dropout_rng = nullptr) {
  if (!s.all_finite()) throw numeric_error("non-finite parameters");
  std::vector<ForwardCache> caches(batch.size());
  ForwardBackwardResult r;
  r.scores.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) r.scores[i] = ScorerKernels::forward(s, batch[i], caches[i], dropout_rng);
  auto lv = loss_fn(r.scores);
  if (!std::isfinite(lv.loss)) throw numeric_error("non-finite loss");
  if (lv.dscores.size() != batch.size()) throw data_error("loss gradient size does not match batch");
  r.loss = lv.loss;
  r.gradients.assign(s.parameter_count(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (lv.dscores[i] != 0.0) ScorerKernels::backward(s, caches[i], lv.dscores[i], r.gradients);
  return r;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerState for_size(std::size_t n, double lr, double wd = 0.01) {
    OptimizerState st;
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
    st.learning_rate = lr;
    st.weight_decay = wd;
    return st;
  }
};

/// Adam with decoupled weight decay: p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps).
inline void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& st) {
  if (params.size() != grads.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw data_error("adamw_step: shape mismatch");
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(st.beta1, t);
  const double bc2 = 1.0 - std::pow(st.beta2, t);
  const double decay = 1.0 - st.learning_rate * st.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    params[i] = params[i] * decay - st.learning_rate * mhat / (std::sqrt(vhat) + st.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

/// |a - n| / max(|a|, |n|, floor); the floor keeps round-off on near-zero
/// coordinates from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Max relative error between reverse-mode gradients and central differences over
/// `samples` randomly chosen coordinates (all coordinates when fewer exist). The
/// floor is 1e-6 per unit of loss magnitude, since round-off in the difference
/// quotient grows with |loss|.
inline double grad_check(const WideDeepScorer& s, std::span<const ScoringInput> batch, const LossFn& loss_fn,
                         double eps = 1e-5, std::size_t samples = 256, std::uint64_t seed = 7) {
  if (!(eps > 0)) throw data_error("grad_check: eps must be > 0");
  const auto base = forward_backward(s, batch, loss_fn);
  const auto& analytic = base.gradients;
  const double floor = 1e-6 * std::max(1.0, std::abs(base.loss));
  WideDeepScorer probe = s;
  auto loss_at = [&]() { return loss_fn(score_batch(probe, batch)).loss; };

  std::vector<std::size_t> coords(s.parameter_count());
  std::iota(coords.begin(), coords.end(), 0);
  if (coords.size() > samples) {
    Rng rng(derive_seed(seed, "grad-check"));
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }
  double worst = 0.0;
  auto params = probe.parameters();
  for (auto i : coords) {
    const double orig = params[i];
    params[i] = orig + eps;
    const double up = loss_at();
    params[i] = orig - eps;
    const double down = loss_at();
    params[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * eps), floor));
  }
  return worst;
}

}  // namespace ultr
