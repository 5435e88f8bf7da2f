#pragma once

// Windowed transformer regressors mapping an ROI matrix [T x R] to
// physiological predictions.
//
// seq2one: one encoder layer per sliding window (step 1); the representation
// at in-window index W/2 is projected to a single output sample, so the
// prediction covers input times [W/2, T - W/2].
//
// seq2seq: a stack of windowed encoder blocks of growing width. Each block
// runs the encoder on every window (step W/4, tail clamped) and averages the
// overlapping window outputs per time point, so the output keeps length T.

#include "physio/autodiff.hpp"

#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace physio {

using Rng = std::mt19937_64;
using ad::Index;

struct WindowSpec {
  Index window = 32;
  Index step = 1;
};

/// Window starts {0, s, 2s, ...} up to T - W, plus a final clamped start at
/// T - W when the stride does not land on it.
std::vector<Index> slide_windows(Index length, const WindowSpec& spec);

/// Stride of a seq2seq block: a quarter of its window, at least 1.
inline Index seq2seq_step(Index window) { return std::max<Index>(1, window / 4); }

struct AttentionConfig {
  int n_heads = 8;
  int head_dim = 60;
  double dropout = 0.3;
  int model_dim = 480;

  int inner_dim() const { return n_heads * head_dim; }
};

enum class Architecture { seq2one, seq2seq };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
  Architecture architecture = Architecture::seq2one;
  int n_roi = 497;
  int n_outputs = 1;
  AttentionConfig attention;
  bool positional_encoding = true;
  double layer_norm_eps = 1e-5;
  std::uint64_t init_seed = 0;

  // seq2one
  int window = 32;
  double ffn_expansion = 1.0;

  // seq2seq; the inter-block feature width is attention.model_dim.
  std::vector<int> block_windows{4, 8, 12, 16, 20};
  bool seq2seq_ffn = false;

  /// 8 heads x 60, model dim 480, window 32, FFN expansion 1.
  static ModelConfig seq2one_default(int n_roi = 497);
  /// 20 heads x 100, feature dim 500, windows {4, 8, 12, 16, 20}, no FFN.
  static ModelConfig seq2seq_default(int n_roi = 497);

  bool has_ffn() const {
    return architecture == Architecture::seq2one ? ffn_expansion > 0 : seq2seq_ffn;
  }
  int ffn_hidden() const;
  /// Shortest input the model accepts.
  Index min_length() const;
  void validate() const;
};

template <typename Scalar>
using ModelParams = std::map<std::string, ad::Tensor<Scalar>>;

template <typename Scalar>
std::size_t count_params(const ModelParams<Scalar>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += static_cast<std::size_t>(t.size());
  return n;
}

/// Fixed sin/cos positional encoding for positions 0..width-1.
template <typename Scalar>
ad::Matrix<Scalar> sinusoidal_encoding(Index width, Index dim) {
  ad::Matrix<Scalar> pe(width, dim);
  for (Index pos = 0; pos < width; ++pos) {
    for (Index i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, i) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// Parameters of one pre-norm encoder layer.
template <typename Scalar>
struct EncoderParams {
  ad::Tensor<Scalar> ln1_gain, ln1_bias;
  ad::Tensor<Scalar> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  bool has_ffn = false;
  ad::Tensor<Scalar> ln2_gain, ln2_bias, ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;

  static EncoderParams view(const ModelParams<Scalar>& p, const std::string& prefix, bool ffn) {
    EncoderParams e;
    auto at = [&](const std::string& name) { return p.at(prefix + name); };
    e.ln1_gain = at("ln1.gain");
    e.ln1_bias = at("ln1.bias");
    e.q_w = at("attn.q.weight");
    e.q_b = at("attn.q.bias");
    e.k_w = at("attn.k.weight");
    e.k_b = at("attn.k.bias");
    e.v_w = at("attn.v.weight");
    e.v_b = at("attn.v.bias");
    e.o_w = at("attn.o.weight");
    e.o_b = at("attn.o.bias");
    e.has_ffn = ffn;
    if (ffn) {
      e.ln2_gain = at("ln2.gain");
      e.ln2_bias = at("ln2.bias");
      e.ffn_in_w = at("ffn.in.weight");
      e.ffn_in_b = at("ffn.in.bias");
      e.ffn_out_w = at("ffn.out.weight");
      e.ffn_out_b = at("ffn.out.bias");
    }
    return e;
  }
};

namespace detail {

template <typename Scalar>
void add_linear(ModelParams<Scalar>& p, const std::string& name, Index in, Index out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  ad::Matrix<Scalar> w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(u(rng));
  p.emplace(name + ".weight", ad::Tensor<Scalar>::parameter(std::move(w)));
  p.emplace(name + ".bias", ad::Tensor<Scalar>::parameter(ad::Matrix<Scalar>::Zero(1, out)));
}

template <typename Scalar>
void add_layer_norm(ModelParams<Scalar>& p, const std::string& name, Index dim) {
  p.emplace(name + ".gain", ad::Tensor<Scalar>::parameter(ad::Matrix<Scalar>::Ones(1, dim)));
  p.emplace(name + ".bias", ad::Tensor<Scalar>::parameter(ad::Matrix<Scalar>::Zero(1, dim)));
}

template <typename Scalar>
void add_encoder(ModelParams<Scalar>& p, const std::string& prefix, const ModelConfig& cfg,
                 Rng& rng) {
  const Index d = cfg.attention.model_dim;
  const Index inner = cfg.attention.inner_dim();
  add_layer_norm(p, prefix + "ln1", d);
  add_linear(p, prefix + "attn.q", d, inner, rng);
  add_linear(p, prefix + "attn.k", d, inner, rng);
  add_linear(p, prefix + "attn.v", d, inner, rng);
  add_linear(p, prefix + "attn.o", inner, d, rng);
  if (cfg.has_ffn()) {
    add_layer_norm(p, prefix + "ln2", d);
    add_linear(p, prefix + "ffn.in", d, cfg.ffn_hidden(), rng);
    add_linear(p, prefix + "ffn.out", cfg.ffn_hidden(), d, rng);
  }
}

inline std::string block_prefix(std::size_t k) { return "block" + std::to_string(k) + "."; }

}  // namespace detail

/// Glorot-uniform projections, zero biases, unit layer-norm gains. The draw
/// order is fixed, so parameters are a pure function of the config.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  ModelParams<Scalar> p;
  const Index d = cfg.attention.model_dim;
  detail::add_linear(p, "embed", cfg.n_roi, d, rng);
  if (cfg.architecture == Architecture::seq2one) {
    detail::add_encoder(p, "layer0.", cfg, rng);
  } else {
    for (std::size_t k = 0; k < cfg.block_windows.size(); ++k) {
      detail::add_encoder(p, detail::block_prefix(k), cfg, rng);
    }
  }
  detail::add_linear(p, "head", d, cfg.n_outputs, rng);
  return p;
}

/// Pre-norm encoder layer applied to n stacked windows x [n * W x d]:
///   y = x + MHA(LN1(x) + PE), out = y + Dropout(FFN(LN2(y))).
/// The positional encoding enters only the attention input, so with zero
/// projections the layer is the identity. Attention is confined to each
/// window.
template <typename Scalar>
ad::Tensor<Scalar> encoder_layer(const ad::Tensor<Scalar>& x, Index n_windows,
                                 const EncoderParams<Scalar>& p, const AttentionConfig& cfg,
                                 const ad::Matrix<Scalar>* pe, bool training, Rng& rng,
                                 Scalar ln_eps = Scalar(1e-5),
                                 ad::Matrix<Scalar>* attention_weights = nullptr) {
  if (x.cols() != cfg.model_dim) {
    ad::shape_error("encoder_layer", ad::shape_str(x), ad::shape_str(x.rows(), cfg.model_dim));
  }
  using T = ad::Tensor<Scalar>;
  T h = ad::layer_norm(x, p.ln1_gain, p.ln1_bias, ln_eps);
  if (pe) h = ad::add_tiled(h, T::constant(*pe));
  T q = ad::linear(h, p.q_w, p.q_b);
  T k = ad::linear(h, p.k_w, p.k_b);
  T v = ad::linear(h, p.v_w, p.v_b);
  T att = ad::windowed_attention(q, k, v, n_windows, Index(cfg.n_heads), cfg.dropout, training, rng,
                                 attention_weights);
  T y = ad::add(x, ad::linear(att, p.o_w, p.o_b));
  if (!p.has_ffn) return y;
  T f = ad::layer_norm(y, p.ln2_gain, p.ln2_bias, ln_eps);
  f = ad::linear(ad::relu(ad::linear(f, p.ffn_in_w, p.ffn_in_b)), p.ffn_out_w, p.ffn_out_b);
  return ad::add(y, ad::dropout(f, cfg.dropout, training, rng));
}

/// seq2one forward. Returns [T - W + 1 x n_outputs]; row k predicts input
/// time k + W/2.
///
/// Only the midpoint row of each window reaches the output, and every
/// operation other than attention acts row by row, so layer norm and the
/// Q/K/V projections run once per time point and are gathered into windows
/// afterwards. This is algebraically identical to running encoder_layer on
/// every window and reading row W/2 (see seq2one_forward_reference).
template <typename Scalar>
ad::Tensor<Scalar> seq2one_forward(const ad::Matrix<Scalar>& roi, const ModelParams<Scalar>& params,
                                   const ModelConfig& cfg, bool training, Rng& rng) {
  using T = ad::Tensor<Scalar>;
  const Index length = roi.rows();
  const Index w = cfg.window;
  if (length < w) {
    fail("seq2one: input length " + std::to_string(length) + " is shorter than window " +
         std::to_string(w));
  }
  if (roi.cols() != cfg.n_roi) {
    ad::shape_error("seq2one", ad::shape_str(roi.rows(), roi.cols()),
                    ad::shape_str(length, cfg.n_roi));
  }
  const auto starts = slide_windows(length, {w, 1});
  const auto n = static_cast<Index>(starts.size());
  std::vector<Index> mids;
  for (Index s : starts) mids.push_back(s + w / 2);

  const auto p = EncoderParams<Scalar>::view(params, "layer0.", cfg.has_ffn());
  const T e = ad::linear(T::constant(roi), params.at("embed.weight"), params.at("embed.bias"));
  const T h = ad::layer_norm(e, p.ln1_gain, p.ln1_bias, Scalar(cfg.layer_norm_eps));
  T q = ad::gather_rows(ad::linear(h, p.q_w, p.q_b), mids);
  T k = ad::gather_windows(ad::linear(h, p.k_w, p.k_b), std::span<const Index>(starts), w);
  T v = ad::gather_windows(ad::linear(h, p.v_w, p.v_b), std::span<const Index>(starts), w);
  if (cfg.positional_encoding) {
    const T pe = T::constant(sinusoidal_encoding<Scalar>(w, cfg.attention.model_dim));
    q = ad::add_rowwise(q, ad::gather_rows(ad::matmul(pe, p.q_w), {w / 2}));
    k = ad::add_tiled(k, ad::matmul(pe, p.k_w));
    v = ad::add_tiled(v, ad::matmul(pe, p.v_w));
  }
  const T att = ad::windowed_attention(q, k, v, n, Index(cfg.attention.n_heads),
                                       cfg.attention.dropout, training, rng);
  T y = ad::add(ad::gather_rows(e, mids), ad::linear(att, p.o_w, p.o_b));
  if (p.has_ffn) {
    T f = ad::layer_norm(y, p.ln2_gain, p.ln2_bias, Scalar(cfg.layer_norm_eps));
    f = ad::linear(ad::relu(ad::linear(f, p.ffn_in_w, p.ffn_in_b)), p.ffn_out_w, p.ffn_out_b);
    y = ad::add(y, ad::dropout(f, cfg.attention.dropout, training, rng));
  }
  return ad::linear(y, params.at("head.weight"), params.at("head.bias"));
}

/// Direct evaluation of seq2one: full encoder layer per window, row W/2 kept.
/// Slower; used to cross-check seq2one_forward with dropout disabled.
template <typename Scalar>
ad::Tensor<Scalar> seq2one_forward_reference(const ad::Matrix<Scalar>& roi,
                                             const ModelParams<Scalar>& params,
                                             const ModelConfig& cfg) {
  using T = ad::Tensor<Scalar>;
  Rng rng(0);
  const Index w = cfg.window;
  const auto starts = slide_windows(roi.rows(), {w, 1});
  const T e = ad::linear(T::constant(roi), params.at("embed.weight"), params.at("embed.bias"));
  const auto p = EncoderParams<Scalar>::view(params, "layer0.", cfg.has_ffn());
  const ad::Matrix<Scalar> pe = sinusoidal_encoding<Scalar>(w, cfg.attention.model_dim);
  std::vector<T> rows;
  for (Index s : starts) {
    const T x = ad::gather_windows(e, std::span<const Index>(&s, 1), w);
    const T y = encoder_layer(x, 1, p, cfg.attention, cfg.positional_encoding ? &pe : nullptr,
                              false, rng, Scalar(cfg.layer_norm_eps));
    rows.push_back(ad::gather_rows(y, {w / 2}));
  }
  const T mid = ad::concat(std::span<const T>(rows), 0);
  return ad::linear(mid, params.at("head.weight"), params.at("head.bias"));
}

/// One seq2seq block evaluated literally: encoder on every window of width W
/// (step W/4, tail clamped), then per-time-point averaging of the
/// overlapping outputs.
template <typename Scalar>
ad::Tensor<Scalar> seq2seq_block_reference(const ad::Tensor<Scalar>& x, Index window,
                                           const EncoderParams<Scalar>& p, const ModelConfig& cfg,
                                           bool training, Rng& rng) {
  const Index length = x.rows();
  if (length < window) {
    fail("seq2seq block: input length " + std::to_string(length) + " is shorter than window " +
         std::to_string(window));
  }
  const auto starts = slide_windows(length, {window, seq2seq_step(window)});
  const auto stacked = ad::gather_windows(x, std::span<const Index>(starts), window);
  const ad::Matrix<Scalar> pe = sinusoidal_encoding<Scalar>(window, cfg.attention.model_dim);
  const auto y = encoder_layer(stacked, static_cast<Index>(starts.size()), p, cfg.attention,
                               cfg.positional_encoding ? &pe : nullptr, training, rng,
                               Scalar(cfg.layer_norm_eps));
  return ad::overlap_average(y, starts, window, length);
}

/// One seq2seq block. Without a feed-forward sublayer the block is
///   avg_w(x + A_w Wo + bo) = x + avg_w(A_w) Wo + bo,
/// so only the attention core runs per window; layer norm and all
/// projections run once per time point.
template <typename Scalar>
ad::Tensor<Scalar> seq2seq_block(const ad::Tensor<Scalar>& x, Index window,
                                 const EncoderParams<Scalar>& p, const ModelConfig& cfg,
                                 bool training, Rng& rng) {
  if (p.has_ffn) return seq2seq_block_reference(x, window, p, cfg, training, rng);
  using T = ad::Tensor<Scalar>;
  const Index length = x.rows();
  if (length < window) {
    fail("seq2seq block: input length " + std::to_string(length) + " is shorter than window " +
         std::to_string(window));
  }
  if (x.cols() != cfg.attention.model_dim) {
    ad::shape_error("seq2seq block", ad::shape_str(x), ad::shape_str(length, cfg.attention.model_dim));
  }
  const auto starts = slide_windows(length, {window, seq2seq_step(window)});
  const std::span<const Index> st(starts);
  const T h = ad::layer_norm(x, p.ln1_gain, p.ln1_bias, Scalar(cfg.layer_norm_eps));
  T q = ad::gather_windows(ad::linear(h, p.q_w, p.q_b), st, window);
  T k = ad::gather_windows(ad::linear(h, p.k_w, p.k_b), st, window);
  T v = ad::gather_windows(ad::linear(h, p.v_w, p.v_b), st, window);
  if (cfg.positional_encoding) {
    const T pe = T::constant(sinusoidal_encoding<Scalar>(window, cfg.attention.model_dim));
    q = ad::add_tiled(q, ad::matmul(pe, p.q_w));
    k = ad::add_tiled(k, ad::matmul(pe, p.k_w));
    v = ad::add_tiled(v, ad::matmul(pe, p.v_w));
  }
  const T att = ad::windowed_attention(q, k, v, static_cast<Index>(starts.size()),
                                       Index(cfg.attention.n_heads), cfg.attention.dropout,
                                       training, rng);
  return ad::add(x, ad::linear(ad::overlap_average(att, starts, window, length), p.o_w, p.o_b));
}

/// seq2seq forward. Returns [T x n_outputs].
template <typename Scalar>
ad::Tensor<Scalar> seq2seq_forward(const ad::Matrix<Scalar>& roi, const ModelParams<Scalar>& params,
                                   const ModelConfig& cfg, bool training, Rng& rng) {
  using T = ad::Tensor<Scalar>;
  if (roi.rows() < cfg.min_length()) {
    fail("seq2seq: input length " + std::to_string(roi.rows()) + " is shorter than the widest window " +
         std::to_string(cfg.min_length()));
  }
  if (roi.cols() != cfg.n_roi) {
    ad::shape_error("seq2seq", ad::shape_str(roi.rows(), roi.cols()),
                    ad::shape_str(roi.rows(), cfg.n_roi));
  }
  T x = ad::linear(T::constant(roi), params.at("embed.weight"), params.at("embed.bias"));
  for (std::size_t k = 0; k < cfg.block_windows.size(); ++k) {
    const auto p = EncoderParams<Scalar>::view(params, detail::block_prefix(k), cfg.has_ffn());
    x = seq2seq_block(x, Index(cfg.block_windows[k]), p, cfg, training, rng);
  }
  return ad::linear(x, params.at("head.weight"), params.at("head.bias"));
}

/// Owns a config and its parameters and dispatches on architecture.
template <typename Scalar>
class WindowModel {
 public:
  explicit WindowModel(ModelConfig cfg) : cfg_(std::move(cfg)), params_(init_params<Scalar>(cfg_)) {}
  WindowModel(ModelConfig cfg, ModelParams<Scalar> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {}

  const ModelConfig& config() const { return cfg_; }
  ModelParams<Scalar>& params() { return params_; }
  const ModelParams<Scalar>& params() const { return params_; }

  ad::Tensor<Scalar> forward(const ad::Matrix<Scalar>& roi, bool training, Rng& rng) const {
    return cfg_.architecture == Architecture::seq2one
               ? seq2one_forward(roi, params_, cfg_, training, rng)
               : seq2seq_forward(roi, params_, cfg_, training, rng);
  }

  /// Input time index of prediction row 0.
  Index prediction_offset() const {
    return cfg_.architecture == Architecture::seq2one ? cfg_.window / 2 : 0;
  }
  Index prediction_length(Index length) const {
    return cfg_.architecture == Architecture::seq2one ? length - cfg_.window + 1 : length;
  }

 private:
  ModelConfig cfg_;
  ModelParams<Scalar> params_;
};

}  // namespace physio
