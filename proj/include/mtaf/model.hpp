#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mtaf/common.hpp"
#include "mtaf/corpus.hpp"

namespace mtaf::model {

enum class Variant { lm_only, multitask };
enum class AffectMode { regression, classification };

Variant variant_from_string(std::string_view s);
std::string to_string(Variant v);
AffectMode affect_mode_from_string(std::string_view s);
std::string to_string(AffectMode m);

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 64;
  int vocab_size = 0;
  int max_seq_len = 64;
  double dropout_rate = 0.0;
  Variant variant = Variant::lm_only;
  AffectMode affect_mode = AffectMode::regression;
  int affect_classes = 32;  // output arity in classification mode

  int head_dim() const { return d_model / n_heads; }
  int affect_dim() const { return affect_mode == AffectMode::regression ? 1 : affect_classes; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct LayerParams {
  Mat<S> wq, wk, wv, wo;  // [d, d]
  Vec<S> bq, bk, bv, bo;  // [d]
  Vec<S> ln1_gain, ln1_bias;
  Vec<S> ln2_gain, ln2_bias;
  Mat<S> w_fc;    // [d, d_ff]
  Vec<S> b_fc;    // [d_ff]
  Mat<S> w_proj;  // [d_ff, d]
  Vec<S> b_proj;  // [d]
};

// All trainable tensors. The LM head is tied to wte; logits = hidden * wte^T.
template <typename S>
struct ModelParams {
  ModelConfig config;
  Mat<S> wte;  // [V, d]
  Mat<S> wpe;  // [max_seq_len, d]
  std::vector<LayerParams<S>> layers;
  Vec<S> lnf_gain, lnf_bias;
  Mat<S> w_affect;  // [d, affect_dim]
  Vec<S> b_affect;  // [affect_dim]
  Mat<S> w_choice;  // [d, 1]
  Vec<S> b_choice;  // [1]
};

// Visits every trainable tensor in a fixed order (the checkpoint and
// optimizer orders both come from here).
template <typename S, typename F>
void for_each_tensor(ModelParams<S>& p, F&& f) {
  f("wte", p.wte);
  f("wpe", p.wpe);
  for (size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    f(pre + "ln1.gain", l.ln1_gain);
    f(pre + "ln1.bias", l.ln1_bias);
    f(pre + "wq", l.wq);
    f(pre + "bq", l.bq);
    f(pre + "wk", l.wk);
    f(pre + "bk", l.bk);
    f(pre + "wv", l.wv);
    f(pre + "bv", l.bv);
    f(pre + "wo", l.wo);
    f(pre + "bo", l.bo);
    f(pre + "ln2.gain", l.ln2_gain);
    f(pre + "ln2.bias", l.ln2_bias);
    f(pre + "w_fc", l.w_fc);
    f(pre + "b_fc", l.b_fc);
    f(pre + "w_proj", l.w_proj);
    f(pre + "b_proj", l.b_proj);
  }
  f("lnf.gain", p.lnf_gain);
  f("lnf.bias", p.lnf_bias);
  f("affect.w", p.w_affect);
  f("affect.b", p.b_affect);
  f("choice.w", p.w_choice);
  f("choice.b", p.b_choice);
}

template <typename S, typename F>
void for_each_tensor(const ModelParams<S>& p, F&& f) {
  for_each_tensor(const_cast<ModelParams<S>&>(p),
                  [&](const std::string& name, auto& t) { f(name, std::as_const(t)); });
}

template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& p) {
  ModelParams<S> z = p;
  for_each_tensor(z, [](const std::string&, auto& t) { t.setZero(); });
  return z;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out;
  out.config = p.config;
  out.wte = p.wte.template cast<To>();
  out.wpe = p.wpe.template cast<To>();
  out.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const auto& a = p.layers[i];
    auto& b = out.layers[i];
    b.wq = a.wq.template cast<To>();
    b.wk = a.wk.template cast<To>();
    b.wv = a.wv.template cast<To>();
    b.wo = a.wo.template cast<To>();
    b.bq = a.bq.template cast<To>();
    b.bk = a.bk.template cast<To>();
    b.bv = a.bv.template cast<To>();
    b.bo = a.bo.template cast<To>();
    b.ln1_gain = a.ln1_gain.template cast<To>();
    b.ln1_bias = a.ln1_bias.template cast<To>();
    b.ln2_gain = a.ln2_gain.template cast<To>();
    b.ln2_bias = a.ln2_bias.template cast<To>();
    b.w_fc = a.w_fc.template cast<To>();
    b.b_fc = a.b_fc.template cast<To>();
    b.w_proj = a.w_proj.template cast<To>();
    b.b_proj = a.b_proj.template cast<To>();
  }
  out.lnf_gain = p.lnf_gain.template cast<To>();
  out.lnf_bias = p.lnf_bias.template cast<To>();
  out.w_affect = p.w_affect.template cast<To>();
  out.b_affect = p.b_affect.template cast<To>();
  out.w_choice = p.w_choice.template cast<To>();
  out.b_choice = p.b_choice.template cast<To>();
  return out;
}

namespace detail {

constexpr double kLnEps = 1e-5;    // layernorm variance floor
constexpr double kInitScale = 0.02;

template <typename S>
void fill_normal(Mat<S>& m, Rng& rng, double scale) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = static_cast<S>(rng.normal() * scale);
}

template <typename S>
S gelu(S x) {
  return static_cast<S>(0.5) * x * static_cast<S>(std::erfc(-static_cast<double>(x) * M_SQRT1_2));
}

template <typename S>
S gelu_grad(S x) {
  double xd = static_cast<double>(x);
  double cdf = 0.5 * std::erfc(-xd * M_SQRT1_2);
  double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
  return static_cast<S>(cdf + xd * pdf);
}

}  // namespace detail

// Per-sequence intermediate values kept for the backward pass. Tests may
// also inspect these (e.g. attention row normalization).
template <typename S>
struct LayerActs {
  Mat<S> x_in;      // [T,d] block input
  Mat<S> ln1_out;   // [T,d]
  Vec<S> ln1_mean, ln1_rstd;
  Mat<S> q, k, v;   // [T,d]
  std::vector<Mat<S>> att;       // per head, [T,T] softmaxed rows (pre-dropout)
  std::vector<Mat<S>> att_mask;  // per head dropout masks; empty when dropout off
  Mat<S> att_ctx;   // [T,d] concatenated head outputs, pre-projection
  Mat<S> x_mid;     // [T,d] after attention residual
  Mat<S> ln2_out;
  Vec<S> ln2_mean, ln2_rstd;
  Mat<S> fc_pre;    // [T,d_ff]
  Mat<S> fc_act;    // [T,d_ff]
  Mat<S> mlp_mask;  // [T,d] dropout mask on the MLP output; empty when off
};

template <typename S>
struct Activations {
  std::vector<tok::TokenId> ids;
  Mat<S> emb;       // [T,d] post-dropout embedding sum
  Mat<S> emb_mask;  // dropout mask; empty when off
  std::vector<LayerActs<S>> layers;
  Mat<S> x_final;   // [T,d] input to the final layernorm
  Mat<S> hidden;    // [T,d] post-lnf; heads and LM logits read this
  Vec<S> lnf_mean, lnf_rstd;
  Mat<S> logits;    // [T,V]
  Vec<S> affect_mask;  // dropout mask on the affect-head input; empty when off
};

struct AffectPrediction {
  std::optional<double> scalar;       // regression
  std::vector<double> class_logits;   // classification
};

// Sizes every tensor for the config and zero-fills; init() draws the actual
// starting values.
template <typename S>
ModelParams<S> allocate(const ModelConfig& config) {
  config.validate();
  if (config.vocab_size <= 0) throw UsageError("model allocation requires vocab_size > 0");
  ModelParams<S> p;
  p.config = config;
  const int d = config.d_model;
  p.wte = Mat<S>::Zero(config.vocab_size, d);
  p.wpe = Mat<S>::Zero(config.max_seq_len, d);
  p.layers.resize(config.n_layers);
  for (auto& l : p.layers) {
    l.wq = Mat<S>::Zero(d, d);
    l.wk = Mat<S>::Zero(d, d);
    l.wv = Mat<S>::Zero(d, d);
    l.wo = Mat<S>::Zero(d, d);
    l.bq = Vec<S>::Zero(d);
    l.bk = Vec<S>::Zero(d);
    l.bv = Vec<S>::Zero(d);
    l.bo = Vec<S>::Zero(d);
    l.ln1_gain = Vec<S>::Zero(d);
    l.ln1_bias = Vec<S>::Zero(d);
    l.ln2_gain = Vec<S>::Zero(d);
    l.ln2_bias = Vec<S>::Zero(d);
    l.w_fc = Mat<S>::Zero(d, config.d_ff);
    l.b_fc = Vec<S>::Zero(config.d_ff);
    l.w_proj = Mat<S>::Zero(config.d_ff, d);
    l.b_proj = Vec<S>::Zero(d);
  }
  p.lnf_gain = Vec<S>::Zero(d);
  p.lnf_bias = Vec<S>::Zero(d);
  p.w_affect = Mat<S>::Zero(d, config.affect_dim());
  p.b_affect = Vec<S>::Zero(config.affect_dim());
  p.w_choice = Mat<S>::Zero(d, 1);
  p.b_choice = Vec<S>::Zero(1);
  return p;
}

template <typename S>
ModelParams<S> init(const ModelConfig& config, uint64_t seed) {
  ModelParams<S> p = allocate<S>(config);
  Rng rng(seed);
  detail::fill_normal(p.wte, rng, detail::kInitScale);
  detail::fill_normal(p.wpe, rng, detail::kInitScale);
  for (auto& l : p.layers) {
    detail::fill_normal(l.wq, rng, detail::kInitScale);
    detail::fill_normal(l.wk, rng, detail::kInitScale);
    detail::fill_normal(l.wv, rng, detail::kInitScale);
    detail::fill_normal(l.wo, rng, detail::kInitScale);
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    detail::fill_normal(l.w_fc, rng, detail::kInitScale);
    detail::fill_normal(l.w_proj, rng, detail::kInitScale);
  }
  p.lnf_gain.setOnes();
  detail::fill_normal(p.w_affect, rng, detail::kInitScale);
  detail::fill_normal(p.w_choice, rng, detail::kInitScale);
  return p;
}

// Replaces only the affect head, drawing fresh weights at the new arity.
// Everything else is copied bit for bit.
template <typename S>
ModelParams<S> reinit_affect_head(const ModelParams<S>& params, AffectMode new_mode,
                                  int new_classes, uint64_t seed) {
  if (params.config.variant != Variant::multitask)
    throw UsageError("reinit_affect_head requires the multitask variant");
  ModelParams<S> out = params;
  out.config.affect_mode = new_mode;
  out.config.affect_classes = new_classes;
  Rng rng(seed);
  out.w_affect.resize(params.config.d_model, out.config.affect_dim());
  detail::fill_normal(out.w_affect, rng, detail::kInitScale);
  out.b_affect = Vec<S>::Zero(out.config.affect_dim());
  return out;
}

namespace detail {

// Row-wise layernorm forward; records mean and reciprocal stddev.
template <typename S>
void layernorm(const Mat<S>& x, const Vec<S>& gain, const Vec<S>& bias, Mat<S>& y, Vec<S>& mean,
               Vec<S>& rstd) {
  const Eigen::Index T = x.rows(), d = x.cols();
  y.resize(T, d);
  mean.resize(T);
  rstd.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    S mu = x.row(t).mean();
    S var = (x.row(t).array() - mu).square().mean();
    S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    mean(t) = mu;
    rstd(t) = rs;
    y.row(t) = (((x.row(t).array() - mu) * rs) * gain.transpose().array()).matrix() +
               bias.transpose();
  }
}

template <typename S>
void layernorm_backward(const Mat<S>& x, const Vec<S>& gain, const Vec<S>& mean, const Vec<S>& rstd,
                        const Mat<S>& dy, Mat<S>& dx, Vec<S>& dgain, Vec<S>& dbias) {
  const Eigen::Index T = x.rows(), d = x.cols();
  dx.resize(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    Eigen::Array<S, Eigen::Dynamic, 1> xhat = (x.row(t).transpose().array() - mean(t)) * rstd(t);
    Eigen::Array<S, Eigen::Dynamic, 1> dyr = dy.row(t).transpose().array();
    dgain.array() += dyr * xhat;
    dbias.array() += dyr;
    Eigen::Array<S, Eigen::Dynamic, 1> dxhat = dyr * gain.array();
    S m1 = dxhat.mean();
    S m2 = (dxhat * xhat).mean();
    dx.row(t) = (rstd(t) * (dxhat - m1 - xhat * m2)).matrix().transpose();
  }
}

template <typename S>
Mat<S> sample_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Mat<S> m(rows, cols);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r)
      m(r, c) = rng.uniform() < rate ? S(0) : keep_scale;
  return m;
}

}  // namespace detail

// Full forward pass over one sequence. When `dropout_rng` is non-null and the
// config has a positive dropout rate, inverted-dropout masks are sampled and
// recorded in the activations; otherwise the pass is deterministic.
template <typename S>
void forward(const ModelParams<S>& p, const std::vector<tok::TokenId>& ids, Activations<S>& acts,
             Rng* dropout_rng = nullptr) {
  const ModelConfig& cfg = p.config;
  const Eigen::Index T = static_cast<Eigen::Index>(ids.size());
  if (T == 0) throw UsageError("forward: empty sequence");
  if (T > cfg.max_seq_len)
    throw DataError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  for (tok::TokenId id : ids)
    if (id < 0 || id >= cfg.vocab_size) throw DataError("token id out of range: " + std::to_string(id));

  const int d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  const bool drop = dropout_rng != nullptr && cfg.dropout_rate > 0.0;
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  acts.ids = ids;
  acts.emb.resize(T, d);
  for (Eigen::Index t = 0; t < T; ++t)
    acts.emb.row(t) = p.wte.row(ids[t]) + p.wpe.row(t);
  if (drop) {
    acts.emb_mask = detail::sample_mask<S>(T, d, cfg.dropout_rate, *dropout_rng);
    acts.emb.array() *= acts.emb_mask.array();
  } else {
    acts.emb_mask.resize(0, 0);
  }

  acts.layers.assign(cfg.n_layers, LayerActs<S>{});
  Mat<S> x = acts.emb;
  for (int li = 0; li < cfg.n_layers; ++li) {
    auto& L = acts.layers[li];
    const auto& lp = p.layers[li];
    L.x_in = x;
    detail::layernorm(L.x_in, lp.ln1_gain, lp.ln1_bias, L.ln1_out, L.ln1_mean, L.ln1_rstd);
    L.q = (L.ln1_out * lp.wq).rowwise() + lp.bq.transpose();
    L.k = (L.ln1_out * lp.wk).rowwise() + lp.bk.transpose();
    L.v = (L.ln1_out * lp.wv).rowwise() + lp.bv.transpose();

    L.att.assign(H, Mat<S>::Zero(T, T));
    if (drop) L.att_mask.assign(H, Mat<S>());
    L.att_ctx.resize(T, d);
    for (int h = 0; h < H; ++h) {
      auto qh = L.q.middleCols(h * hd, hd);
      auto kh = L.k.middleCols(h * hd, hd);
      auto vh = L.v.middleCols(h * hd, hd);
      Mat<S>& att = L.att[h];
      for (Eigen::Index i = 0; i < T; ++i) {
        // causal: attend to positions 0..i only
        Eigen::Array<S, Eigen::Dynamic, 1> scores(i + 1);
        for (Eigen::Index j = 0; j <= i; ++j) scores(j) = qh.row(i).dot(kh.row(j)) * inv_sqrt_hd;
        S m = scores.maxCoeff();
        Eigen::Array<S, Eigen::Dynamic, 1> e = (scores - m).exp();
        e /= e.sum();
        for (Eigen::Index j = 0; j <= i; ++j) att(i, j) = e(j);
      }
      Mat<S> att_used = att;
      if (drop) {
        L.att_mask[h] = detail::sample_mask<S>(T, T, cfg.dropout_rate, *dropout_rng);
        att_used.array() *= L.att_mask[h].array();
      }
      L.att_ctx.middleCols(h * hd, hd) = att_used * vh;
    }
    Mat<S> attn_out = (L.att_ctx * lp.wo).rowwise() + lp.bo.transpose();
    L.x_mid = L.x_in + attn_out;

    detail::layernorm(L.x_mid, lp.ln2_gain, lp.ln2_bias, L.ln2_out, L.ln2_mean, L.ln2_rstd);
    L.fc_pre = (L.ln2_out * lp.w_fc).rowwise() + lp.b_fc.transpose();
    L.fc_act = L.fc_pre.unaryExpr([](S v) { return detail::gelu(v); });
    Mat<S> mlp_out = (L.fc_act * lp.w_proj).rowwise() + lp.b_proj.transpose();
    if (drop) {
      L.mlp_mask = detail::sample_mask<S>(T, d, cfg.dropout_rate, *dropout_rng);
      mlp_out.array() *= L.mlp_mask.array();
    }
    x = L.x_mid + mlp_out;
  }

  acts.x_final = x;
  detail::layernorm(acts.x_final, p.lnf_gain, p.lnf_bias, acts.hidden, acts.lnf_mean, acts.lnf_rstd);
  acts.logits = acts.hidden * p.wte.transpose();

  if (drop) {
    acts.affect_mask =
        detail::sample_mask<S>(1, d, cfg.dropout_rate, *dropout_rng).row(0).transpose();
  } else {
    acts.affect_mask.resize(0);
  }
}

// Convenience wrapper returning (logits, hidden).
template <typename S>
std::pair<Mat<S>, Mat<S>> forward(const ModelParams<S>& p, const std::vector<tok::TokenId>& ids) {
  Activations<S> acts;
  forward(p, ids, acts);
  return {acts.logits, acts.hidden};
}

// Affect prediction from a forward pass (no dropout at prediction time).
template <typename S>
AffectPrediction predict_affect(const ModelParams<S>& p, const std::vector<tok::TokenId>& ids) {
  Activations<S> acts;
  forward(p, ids, acts);
  Vec<S> h = acts.hidden.row(acts.hidden.rows() - 1).transpose();
  Vec<S> out = p.w_affect.transpose() * h + p.b_affect;
  AffectPrediction pred;
  if (p.config.affect_mode == AffectMode::regression) {
    pred.scalar = static_cast<double>(out(0));
  } else {
    pred.class_logits.resize(out.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) pred.class_logits[i] = static_cast<double>(out(i));
  }
  return pred;
}

struct LossWeights {
  double lambda_affect = 1.0;
  double lambda_choice = 1.0;
};

struct LossBreakdown {
  double total = 0.0;
  double lm = 0.0;
  double affect = 0.0;
  double choice = 0.0;
  size_t lm_token_count = 0;
};

namespace detail {

template <typename S>
S row_logsumexp(const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>& row) {
  S m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

// Backward through one sequence given gradients on the logits and extra
// gradients injected directly into the post-lnf hidden states (from the
// auxiliary heads). Accumulates into `g`.
template <typename S>
void backward_sequence(const ModelParams<S>& p, const Activations<S>& acts, const Mat<S>& dlogits,
                       const Mat<S>& dhidden_extra, ModelParams<S>& g) {
  const ModelConfig& cfg = p.config;
  const Eigen::Index T = acts.hidden.rows();
  const int d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  const bool drop_emb = acts.emb_mask.size() > 0;
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  // LM head (tied to wte)
  Mat<S> dhidden = dhidden_extra;
  if (dlogits.size() > 0) {
    dhidden.noalias() += dlogits * p.wte;
    g.wte.noalias() += dlogits.transpose() * acts.hidden;
  }

  Mat<S> dx;
  layernorm_backward(acts.x_final, p.lnf_gain, acts.lnf_mean, acts.lnf_rstd, dhidden, dx,
                     g.lnf_gain, g.lnf_bias);

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& L = acts.layers[li];
    const auto& lp = p.layers[li];
    auto& gl = g.layers[li];

    // MLP branch
    Mat<S> dmlp_out = dx;
    if (L.mlp_mask.size() > 0) dmlp_out.array() *= L.mlp_mask.array();
    gl.w_proj.noalias() += L.fc_act.transpose() * dmlp_out;
    gl.b_proj += dmlp_out.colwise().sum().transpose();
    Mat<S> dfc_act = dmlp_out * lp.w_proj.transpose();
    Mat<S> dfc_pre =
        dfc_act.array() * L.fc_pre.unaryExpr([](S v) { return gelu_grad(v); }).array();
    gl.w_fc.noalias() += L.ln2_out.transpose() * dfc_pre;
    gl.b_fc += dfc_pre.colwise().sum().transpose();
    Mat<S> dln2_out = dfc_pre * lp.w_fc.transpose();

    Mat<S> dx_mid;
    layernorm_backward(L.x_mid, lp.ln2_gain, L.ln2_mean, L.ln2_rstd, dln2_out, dx_mid, gl.ln2_gain,
                       gl.ln2_bias);
    dx_mid += dx;  // residual

    // Attention branch
    Mat<S> dattn_out = dx_mid;
    gl.wo.noalias() += L.att_ctx.transpose() * dattn_out;
    gl.bo += dattn_out.colwise().sum().transpose();
    Mat<S> datt_ctx = dattn_out * lp.wo.transpose();

    Mat<S> dq = Mat<S>::Zero(T, d), dk = Mat<S>::Zero(T, d), dv = Mat<S>::Zero(T, d);
    for (int h = 0; h < H; ++h) {
      auto qh = L.q.middleCols(h * hd, hd);
      auto kh = L.k.middleCols(h * hd, hd);
      auto vh = L.v.middleCols(h * hd, hd);
      auto dctx_h = datt_ctx.middleCols(h * hd, hd);
      const Mat<S>& att = L.att[h];

      Mat<S> att_used = att;
      if (!L.att_mask.empty() && L.att_mask[h].size() > 0)
        att_used.array() *= L.att_mask[h].array();

      Mat<S> datt_used = dctx_h * vh.transpose();       // [T,T]
      dv.middleCols(h * hd, hd).noalias() += att_used.transpose() * dctx_h;
      Mat<S> datt = datt_used;
      if (!L.att_mask.empty() && L.att_mask[h].size() > 0)
        datt.array() *= L.att_mask[h].array();

      // softmax backward, row by row over the causal support
      Mat<S> dscores = Mat<S>::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        S dot = S(0);
        for (Eigen::Index j = 0; j <= i; ++j) dot += datt(i, j) * att(i, j);
        for (Eigen::Index j = 0; j <= i; ++j)
          dscores(i, j) = att(i, j) * (datt(i, j) - dot);
      }
      dq.middleCols(h * hd, hd).noalias() += dscores * kh * inv_sqrt_hd;
      dk.middleCols(h * hd, hd).noalias() += dscores.transpose() * qh * inv_sqrt_hd;
    }

    gl.wq.noalias() += L.ln1_out.transpose() * dq;
    gl.bq += dq.colwise().sum().transpose();
    gl.wk.noalias() += L.ln1_out.transpose() * dk;
    gl.bk += dk.colwise().sum().transpose();
    gl.wv.noalias() += L.ln1_out.transpose() * dv;
    gl.bv += dv.colwise().sum().transpose();
    Mat<S> dln1_out = dq * lp.wq.transpose() + dk * lp.wk.transpose() + dv * lp.wv.transpose();

    Mat<S> dx_in;
    layernorm_backward(L.x_in, lp.ln1_gain, L.ln1_mean, L.ln1_rstd, dln1_out, dx_in, gl.ln1_gain,
                       gl.ln1_bias);
    dx = dx_in + dx_mid;  // residual
  }

  if (drop_emb) dx.array() *= acts.emb_mask.array();
  for (Eigen::Index t = 0; t < T; ++t) {
    g.wte.row(acts.ids[t]) += dx.row(t);
    g.wpe.row(t) += dx.row(t);
  }
}

}  // namespace detail

// Multi-task loss over a batch, optionally with gradients. distractors[i]
// pairs batch[i]: same context, the distractor's response. L_lm pools
// cross-entropy over every target-mask position in the batch; L_aff and L_mc
// average per example. The lm_only variant takes no distractors and returns
// zero auxiliaries.
template <typename S>
LossBreakdown multitask_loss(const ModelParams<S>& params,
                             const std::vector<corpus::TrainingExample>& batch,
                             const std::vector<corpus::TrainingExample>& distractors,
                             const LossWeights& weights, ModelParams<S>* grads = nullptr,
                             Rng* dropout_rng = nullptr) {
  const ModelConfig& cfg = params.config;
  const bool multitask = cfg.variant == Variant::multitask;
  if (batch.empty()) throw UsageError("multitask_loss: empty batch");
  if (multitask && distractors.size() != batch.size())
    throw UsageError("multitask variant requires one distractor per example");
  if (!multitask && !distractors.empty())
    throw UsageError("lm_only variant takes no distractors");

  const size_t B = batch.size();
  const int d = cfg.d_model;

  std::vector<Activations<S>> acts(B);
  std::vector<Activations<S>> dis_acts(multitask ? B : 0);
  size_t token_count = 0;
  for (size_t b = 0; b < B; ++b) {
    forward(params, batch[b].input_ids, acts[b], dropout_rng);
    // position 0 has no predecessor to predict it from
    for (size_t t = 1; t < batch[b].target_mask.size(); ++t)
      if (batch[b].target_mask[t]) ++token_count;
    if (multitask) forward(params, distractors[b].input_ids, dis_acts[b], dropout_rng);
  }
  if (token_count == 0) throw DataError("batch has no target tokens");

  LossBreakdown out;
  out.lm_token_count = token_count;

  std::vector<Mat<S>> dlogits(B);
  std::vector<Mat<S>> dhidden(B);
  std::vector<Mat<S>> dis_dhidden(multitask ? B : 0);
  const bool want_grad = grads != nullptr;

  const S lm_scale = static_cast<S>(1.0 / static_cast<double>(token_count));
  double lm_sum = 0.0, aff_sum = 0.0, mc_sum = 0.0;

  for (size_t b = 0; b < B; ++b) {
    const auto& ex = batch[b];
    const auto& A = acts[b];
    const Eigen::Index T = A.logits.rows();
    if (want_grad) {
      dlogits[b] = Mat<S>::Zero(T, cfg.vocab_size);
      dhidden[b] = Mat<S>::Zero(T, d);
      if (multitask) dis_dhidden[b] = Mat<S>::Zero(dis_acts[b].hidden.rows(), d);
    }

    // language modeling: position p predicted from logits at p-1
    for (Eigen::Index pfull = 1; pfull < T; ++pfull) {
      if (!ex.target_mask[pfull]) continue;
      Eigen::Matrix<S, 1, Eigen::Dynamic> row = A.logits.row(pfull - 1);
      S lse = detail::row_logsumexp<S>(row);
      lm_sum += static_cast<double>(lse - row(ex.input_ids[pfull]));
      if (want_grad) {
        Eigen::Array<S, 1, Eigen::Dynamic> soft = (row.array() - lse).exp();
        dlogits[b].row(pfull - 1) += (soft * lm_scale).matrix();
        dlogits[b](pfull - 1, ex.input_ids[pfull]) -= lm_scale;
      }
    }

    if (!multitask) continue;

    // affect head reads the hidden state of the final non-pad position
    Vec<S> h_last = A.hidden.row(T - 1).transpose();
    Vec<S> h_aff = h_last;
    if (A.affect_mask.size() > 0) h_aff.array() *= A.affect_mask.array();
    Vec<S> aff_out = params.w_affect.transpose() * h_aff + params.b_affect;
    Vec<S> daff_out = Vec<S>::Zero(aff_out.size());
    if (cfg.affect_mode == AffectMode::regression) {
      if (!ex.affect_scalar)
        throw DataError("missing affect label for example " + ex.source_id + " in multitask mode");
      S diff = aff_out(0) - static_cast<S>(*ex.affect_scalar);
      aff_sum += static_cast<double>(diff) * static_cast<double>(diff);
      daff_out(0) = S(2) * diff;
    } else {
      if (!ex.affect_class)
        throw DataError("missing affect label for example " + ex.source_id + " in multitask mode");
      if (*ex.affect_class < 0 || *ex.affect_class >= cfg.affect_classes)
        throw DataError("affect class out of range for example " + ex.source_id);
      Eigen::Matrix<S, 1, Eigen::Dynamic> row = aff_out.transpose();
      S lse = detail::row_logsumexp<S>(row);
      aff_sum += static_cast<double>(lse - aff_out(*ex.affect_class));
      daff_out = ((row.array() - lse).exp()).matrix().transpose();
      daff_out(*ex.affect_class) -= S(1);
    }

    // multiple choice: true candidate scored against the distractor
    Vec<S> h_dis = dis_acts[b].hidden.row(dis_acts[b].hidden.rows() - 1).transpose();
    S score_true = (h_last.transpose() * params.w_choice)(0) + params.b_choice(0);
    S score_dis = (h_dis.transpose() * params.w_choice)(0) + params.b_choice(0);
    S m = std::max(score_true, score_dis);
    S lse = m + std::log(std::exp(score_true - m) + std::exp(score_dis - m));
    mc_sum += static_cast<double>(lse - score_true);

    if (want_grad) {
      const S aff_scale = static_cast<S>(weights.lambda_affect / static_cast<double>(B));
      Vec<S> daff = daff_out * aff_scale;
      grads->w_affect.noalias() += h_aff * daff.transpose();
      grads->b_affect += daff;
      Vec<S> dh_aff = params.w_affect * daff;
      if (A.affect_mask.size() > 0) dh_aff.array() *= A.affect_mask.array();
      dhidden[b].row(T - 1) += dh_aff.transpose();

      const S mc_scale = static_cast<S>(weights.lambda_choice / static_cast<double>(B));
      S p_true = std::exp(score_true - lse);
      S p_dis = std::exp(score_dis - lse);
      S ds_true = (p_true - S(1)) * mc_scale;
      S ds_dis = p_dis * mc_scale;
      grads->w_choice.noalias() += h_last * ds_true + h_dis * ds_dis;
      grads->b_choice(0) += ds_true + ds_dis;
      dhidden[b].row(T - 1) += (params.w_choice * ds_true).transpose();
      dis_dhidden[b].row(dis_acts[b].hidden.rows() - 1) += (params.w_choice * ds_dis).transpose();
    }
  }

  out.lm = lm_sum / static_cast<double>(token_count);
  out.affect = multitask ? aff_sum / static_cast<double>(B) : 0.0;
  out.choice = multitask ? mc_sum / static_cast<double>(B) : 0.0;
  out.total = out.lm + weights.lambda_affect * out.affect + weights.lambda_choice * out.choice;

  if (want_grad) {
    for (size_t b = 0; b < B; ++b) {
      detail::backward_sequence(params, acts[b], dlogits[b], dhidden[b], *grads);
      if (multitask && dis_dhidden[b].size() > 0)
        detail::backward_sequence(params, dis_acts[b], Mat<S>(), dis_dhidden[b], *grads);
    }
  }
  return out;
}

// Analytic gradients for every trainable tensor.
template <typename S>
LossBreakdown grad(const ModelParams<S>& params, const std::vector<corpus::TrainingExample>& batch,
                   const std::vector<corpus::TrainingExample>& distractors,
                   const LossWeights& weights, ModelParams<S>& grads, Rng* dropout_rng = nullptr) {
  grads = zeros_like(params);
  return multitask_loss(params, batch, distractors, weights, &grads, dropout_rng);
}

}  // namespace mtaf::model
