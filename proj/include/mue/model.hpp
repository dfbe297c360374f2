#pragma once

// Encoder-decoder transformer with a single shared encoder stack.
//
// Image tokens and text tokens are encoded by two independent passes over the
// same encoder weights, so each modality can leave the stack at its own depth.
// Positions enter only through additive relative biases: 2D buckets on the
// image grid, 1D buckets on text and on the decoder's own history.
//
// Layer code is written once against an "ops" policy. PlainOps evaluates on
// Tensor2D directly; ad::TapeOps records a differentiable graph for training.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mue/autodiff.hpp"
#include "mue/numerics.hpp"

namespace mue {

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};
struct LengthError : std::length_error {
  using std::length_error::length_error;
};

namespace tokens {
constexpr TokenId kBos = 0;
constexpr TokenId kEos = 1;
constexpr TokenId kPad = 2;
}  // namespace tokens

struct ModelConfig {
  std::size_t n_enc_layers = 6;
  std::size_t n_dec_layers = 6;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 64;
  std::size_t grid_side = 4;
  std::size_t max_text_len = 8;
  std::size_t max_gen_len = 16;
  std::size_t rel_bucket_count = 8;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t image_tokens() const { return grid_side * grid_side; }
  /// Entries in a 1D relative-bias table: offset 0, then K-1 positive and K-1
  /// negative clipped distances.
  std::size_t bias_table_width() const { return 2 * rel_bucket_count - 1; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ContractError(std::string("ModelConfig: ") + name + " must be >= 1");
    };
    positive(n_enc_layers, "n_enc_layers");
    positive(n_dec_layers, "n_dec_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(ffn_dim, "ffn_dim");
    positive(grid_side, "grid_side");
    positive(max_text_len, "max_text_len");
    positive(max_gen_len, "max_gen_len");
    positive(rel_bucket_count, "rel_bucket_count");
    if (d_model % n_heads != 0) throw ContractError("ModelConfig: d_model not divisible by n_heads");
    if (vocab_size < 3) throw ContractError("ModelConfig: vocab_size must cover BOS, EOS, PAD");
  }

  bool operator==(const ModelConfig&) const = default;
};

// --- parameter layout -------------------------------------------------------

template <class P>
struct NormWeights {
  P gain, bias;
};

template <class P>
struct AttentionWeights {
  P wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class P>
struct FeedForwardWeights {
  P w1, b1, w2, b2;
};

template <class P>
struct EncoderLayerWeights {
  NormWeights<P> ln1;
  AttentionWeights<P> attn;
  NormWeights<P> ln2;
  FeedForwardWeights<P> ffn;
};

template <class P>
struct DecoderLayerWeights {
  NormWeights<P> ln1;
  AttentionWeights<P> self_attn;
  NormWeights<P> ln2;
  AttentionWeights<P> cross_attn;
  NormWeights<P> ln3;
  FeedForwardWeights<P> ffn;
};

/// Every trainable tensor of the model. The same layout holds parameters,
/// gradients, optimizer moments and tape handles.
template <class P>
struct ParamSet {
  P token_embedding;  // vocab x d, also the output projection
  P patch_w, patch_b;
  P text_bias;     // 1 x (2K-1)
  P image_bias;    // 2 x (2K-1): row offsets, column offsets
  P decoder_bias;  // 1 x (2K-1)
  std::vector<EncoderLayerWeights<P>> encoder;  // the one encoder stack
  NormWeights<P> encoder_norm;
  std::vector<DecoderLayerWeights<P>> decoder;
  NormWeights<P> decoder_norm;
};

namespace detail {

template <class F, class... N>
void visit_norm(F& f, const std::string& name, N&... n) {
  f(name + ".gain", n.gain...);
  f(name + ".bias", n.bias...);
}

template <class F, class... A>
void visit_attention(F& f, const std::string& name, A&... a) {
  f(name + ".wq", a.wq...);
  f(name + ".bq", a.bq...);
  f(name + ".wk", a.wk...);
  f(name + ".bk", a.bk...);
  f(name + ".wv", a.wv...);
  f(name + ".bv", a.bv...);
  f(name + ".wo", a.wo...);
  f(name + ".bo", a.bo...);
}

template <class F, class... W>
void visit_ffn(F& f, const std::string& name, W&... w) {
  f(name + ".w1", w.w1...);
  f(name + ".b1", w.b1...);
  f(name + ".w2", w.w2...);
  f(name + ".b2", w.b2...);
}

template <class First, class... Rest>
const First& first_of(const First& first, const Rest&...) {
  return first;
}

}  // namespace detail

/// Calls f(name, field...) for every tensor slot, walking several parameter
/// sets in lockstep. Order is fixed and is the checkpoint order.
template <class F, class... S>
void zip_visit(F&& f, S&... sets) {
  const auto& lead = detail::first_of(sets...);
  f(std::string("embed.tokens"), sets.token_embedding...);
  f(std::string("embed.patch.w"), sets.patch_w...);
  f(std::string("embed.patch.b"), sets.patch_b...);
  f(std::string("bias.text"), sets.text_bias...);
  f(std::string("bias.image"), sets.image_bias...);
  f(std::string("bias.decoder"), sets.decoder_bias...);
  for (std::size_t i = 0; i < lead.encoder.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    detail::visit_norm(f, p + ".ln1", sets.encoder[i].ln1...);
    detail::visit_attention(f, p + ".attn", sets.encoder[i].attn...);
    detail::visit_norm(f, p + ".ln2", sets.encoder[i].ln2...);
    detail::visit_ffn(f, p + ".ffn", sets.encoder[i].ffn...);
  }
  detail::visit_norm(f, std::string("enc.norm"), sets.encoder_norm...);
  for (std::size_t i = 0; i < lead.decoder.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    detail::visit_norm(f, p + ".ln1", sets.decoder[i].ln1...);
    detail::visit_attention(f, p + ".self", sets.decoder[i].self_attn...);
    detail::visit_norm(f, p + ".ln2", sets.decoder[i].ln2...);
    detail::visit_attention(f, p + ".cross", sets.decoder[i].cross_attn...);
    detail::visit_norm(f, p + ".ln3", sets.decoder[i].ln3...);
    detail::visit_ffn(f, p + ".ffn", sets.decoder[i].ffn...);
  }
  detail::visit_norm(f, std::string("dec.norm"), sets.decoder_norm...);
}

/// A parameter set of another element type with the same layer counts.
template <class Q, class P>
ParamSet<Q> same_layout(const ParamSet<P>& like) {
  ParamSet<Q> out;
  out.encoder.resize(like.encoder.size());
  out.decoder.resize(like.decoder.size());
  return out;
}

/// Tensor shapes for a configuration, keyed in visit order.
inline ParamSet<std::pair<std::size_t, std::size_t>> param_shapes(const ModelConfig& cfg) {
  using Shape = std::pair<std::size_t, std::size_t>;
  const std::size_t d = cfg.d_model, f = cfg.ffn_dim, w = cfg.bias_table_width();
  ParamSet<Shape> s;
  auto attention = [d] {
    return AttentionWeights<Shape>{{d, d}, {1, d}, {d, d}, {1, d}, {d, d}, {1, d}, {d, d}, {1, d}};
  };
  const NormWeights<Shape> norm{{1, d}, {1, d}};
  const FeedForwardWeights<Shape> ffn{{d, f}, {1, f}, {f, d}, {1, d}};
  s.token_embedding = {cfg.vocab_size, d};
  s.patch_w = {d, d};
  s.patch_b = {1, d};
  s.text_bias = {1, w};
  s.image_bias = {2, w};
  s.decoder_bias = {1, w};
  s.encoder.assign(cfg.n_enc_layers, EncoderLayerWeights<Shape>{norm, attention(), norm, ffn});
  s.encoder_norm = norm;
  s.decoder.assign(cfg.n_dec_layers,
                   DecoderLayerWeights<Shape>{norm, attention(), norm, attention(), norm, ffn});
  s.decoder_norm = norm;
  return s;
}

struct ModelParams {
  ModelConfig config;
  ParamSet<Tensor2D> weights;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    zip_visit([&n](const std::string&, const Tensor2D& t) { n += t.size(); }, weights);
    return n;
  }
};

/// Zero tensors shaped for cfg.
inline ParamSet<Tensor2D> zero_weights(const ModelConfig& cfg) {
  auto shapes = param_shapes(cfg);
  auto out = same_layout<Tensor2D>(shapes);
  zip_visit([](const std::string&, const std::pair<std::size_t, std::size_t>& s,
               Tensor2D& t) { t = Tensor2D(s.first, s.second); },
            shapes, out);
  return out;
}

/// Random initialisation. Norm gains start at one, biases and relative-bias
/// tables at zero; matrices are Gaussian with 1/sqrt(fan_in) spread, and the
/// projections that feed a residual stream are further damped by depth.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeededRng rng(seed);
  ModelParams p{cfg, zero_weights(cfg)};
  const double depth_damp = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_enc_layers + cfg.n_dec_layers));
  zip_visit(
      [&](const std::string& name, Tensor2D& t) {
        auto ends_with = [&name](const char* suffix) {
          const std::string s(suffix);
          return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with(".gain")) {
          std::fill(t.values().begin(), t.values().end(), 1.0);
        } else if (name == "embed.tokens") {
          t = seeded_normal(rng, t.rows(), t.cols(), 1.0 / std::sqrt(static_cast<double>(t.cols())));
        } else if (name == "embed.patch.w") {
          t = seeded_normal(rng, t.rows(), t.cols(), 0.02);
        } else if (t.rows() > 1 && name.rfind("bias.", 0) != 0) {
          double sd = 1.0 / std::sqrt(static_cast<double>(t.rows()));
          if (ends_with(".wo") || ends_with(".w2")) sd *= depth_damp;
          t = seeded_normal(rng, t.rows(), t.cols(), sd);
        }
      },
      p.weights);
  return p;
}

// --- hidden states ----------------------------------------------------------

enum class Modality { kImage, kText, kDecoder };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kImage: return "image";
    case Modality::kText: return "text";
    case Modality::kDecoder: return "decoder";
  }
  return "?";
}

struct HiddenState {
  Tensor2D tensor;
  Modality modality = Modality::kText;
  std::size_t layer = 0;  // 0 is the embedding output
};

// --- ops policy for plain evaluation ---------------------------------------

struct PlainOps {
  using Value = Tensor2D;
  using Param = Tensor2D;

  static const Tensor2D& value(const Tensor2D& t) { return t; }
  static Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) { return mue::matmul(a, b); }
  static Tensor2D matmul_nt(const Tensor2D& a, const Tensor2D& b) { return mue::matmul_nt(a, b); }
  static Tensor2D add(const Tensor2D& a, const Tensor2D& b) { return mue::add(a, b); }
  static Tensor2D add_row(const Tensor2D& x, const Tensor2D& r) { return mue::add_row(x, r); }
  static Tensor2D add_const(const Tensor2D& x, const Tensor2D& c) { return mue::add(x, c); }
  static Tensor2D scale(const Tensor2D& x, double s) { return mue::scale(x, s); }
  static Tensor2D slice_rows(const Tensor2D& x, std::size_t b, std::size_t e) {
    return mue::slice_rows(x, b, e);
  }
  static Tensor2D slice_cols(const Tensor2D& x, std::size_t b, std::size_t e) {
    return mue::slice_cols(x, b, e);
  }
  static Tensor2D concat_rows(const Tensor2D& a, const Tensor2D& b) { return mue::concat_rows(a, b); }
  static Tensor2D concat_cols(const std::vector<Tensor2D>& parts) { return mue::concat_cols(parts); }
  static Tensor2D gather_rows(const Tensor2D& table, std::span<const TokenId> ids) {
    return mue::gather_rows(table, ids);
  }
  static Tensor2D gather_flat(const Tensor2D& table, std::size_t rows, std::size_t cols,
                              const std::vector<std::size_t>& idx) {
    Tensor2D out(rows, cols);
    for (std::size_t k = 0; k < idx.size(); ++k) out.data()[k] = table.data()[idx[k]];
    return out;
  }
  static Tensor2D gelu(const Tensor2D& x) { return mue::gelu(x); }
  static Tensor2D softmax_rows(const Tensor2D& x) { return mue::softmax_rows(x); }
  static Tensor2D layer_norm(const Tensor2D& x, const Tensor2D& g, const Tensor2D& b) {
    return mue::layer_norm(x, g, b);
  }
};

// --- relative position biases ----------------------------------------------

/// Bucket of a signed offset: 0 for no offset, 1..K-1 for clipped positive
/// distances, K..2K-2 for clipped negative ones.
inline std::size_t relative_bucket(std::ptrdiff_t offset, std::size_t bucket_count) {
  if (offset == 0 || bucket_count <= 1) return 0;
  const auto limit = static_cast<std::ptrdiff_t>(bucket_count - 1);
  if (offset > 0) return static_cast<std::size_t>(std::min(offset, limit));
  return static_cast<std::size_t>(limit + std::min(-offset, limit));
}

/// Flat table indices for a len x len 1D bias, entry (i, j) keyed on j - i.
inline std::vector<std::size_t> bias_indices_1d(std::size_t len, std::size_t bucket_count) {
  std::vector<std::size_t> idx(len * len);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j)
      idx[i * len + j] = relative_bucket(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i),
                                         bucket_count);
  return idx;
}

/// Row-offset and column-offset index sets for a g x g grid in row-major order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> bias_indices_2d(
    std::size_t grid_side, std::size_t bucket_count) {
  const std::size_t n = grid_side * grid_side;
  const std::size_t width = 2 * bucket_count - 1;
  std::vector<std::size_t> rows(n * n), cols(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ri = static_cast<std::ptrdiff_t>(i / grid_side), ci = static_cast<std::ptrdiff_t>(i % grid_side);
    for (std::size_t j = 0; j < n; ++j) {
      const auto rj = static_cast<std::ptrdiff_t>(j / grid_side), cj = static_cast<std::ptrdiff_t>(j % grid_side);
      rows[i * n + j] = relative_bucket(rj - ri, bucket_count);
      cols[i * n + j] = width + relative_bucket(cj - ci, bucket_count);
    }
  }
  return {std::move(rows), std::move(cols)};
}

template <class Ops>
typename Ops::Value relative_bias_1d(const Ops& ops, const typename Ops::Param& table,
                                     std::size_t len, std::size_t bucket_count) {
  return ops.gather_flat(table, len, len, bias_indices_1d(len, bucket_count));
}

template <class Ops>
typename Ops::Value relative_bias_2d(const Ops& ops, const typename Ops::Param& table,
                                     std::size_t grid_side, std::size_t bucket_count) {
  auto [rows, cols] = bias_indices_2d(grid_side, bucket_count);
  const std::size_t n = grid_side * grid_side;
  return ops.add(ops.gather_flat(table, n, n, std::move(rows)),
                 ops.gather_flat(table, n, n, std::move(cols)));
}

/// Text self-attention bias for a sequence of len tokens.
inline Tensor2D relative_bias_1d(std::size_t len, const ModelParams& params) {
  return relative_bias_1d(PlainOps{}, params.weights.text_bias, len, params.config.rel_bucket_count);
}

/// Image self-attention bias: row-offset bucket plus column-offset bucket.
inline Tensor2D relative_bias_2d(std::size_t grid_side, const ModelParams& params) {
  return relative_bias_2d(PlainOps{}, params.weights.image_bias, grid_side,
                          params.config.rel_bucket_count);
}

/// Additive mask hiding future positions: 0 on and below the diagonal.
inline Tensor2D causal_mask(std::size_t len) {
  Tensor2D m(len, len);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) m(i, j) = -1e30;
  return m;
}

// --- generic blocks ---------------------------------------------------------

/// Multi-head attention of query_in over kv_in. bias is added to every head's
/// scores; mask likewise but carries no gradient.
template <class Ops>
typename Ops::Value attention(const Ops& ops, const typename Ops::Value& query_in,
                              const typename Ops::Value& kv_in,
                              const AttentionWeights<typename Ops::Param>& w, std::size_t n_heads,
                              const typename Ops::Value* bias, const Tensor2D* mask) {
  using V = typename Ops::Value;
  const V q = ops.add_row(ops.matmul(query_in, w.wq), w.bq);
  const V k = ops.add_row(ops.matmul(kv_in, w.wk), w.bk);
  const V v = ops.add_row(ops.matmul(kv_in, w.wv), w.bv);
  const std::size_t d = ops.value(q).cols();
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<V> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const V qh = ops.slice_cols(q, h * dh, (h + 1) * dh);
    const V kh = ops.slice_cols(k, h * dh, (h + 1) * dh);
    const V vh = ops.slice_cols(v, h * dh, (h + 1) * dh);
    V scores = ops.scale(ops.matmul_nt(qh, kh), inv_sqrt);
    if (bias) scores = ops.add(scores, *bias);
    if (mask) scores = ops.add_const(scores, *mask);
    heads.push_back(ops.matmul(ops.softmax_rows(scores), vh));
  }
  return ops.add_row(ops.matmul(ops.concat_cols(heads), w.wo), w.bo);
}

template <class Ops>
typename Ops::Value feed_forward(const Ops& ops, const typename Ops::Value& x,
                                 const FeedForwardWeights<typename Ops::Param>& w) {
  const auto hidden = ops.gelu(ops.add_row(ops.matmul(x, w.w1), w.b1));
  return ops.add_row(ops.matmul(hidden, w.w2), w.b2);
}

/// Pre-norm encoder block: x + SelfAttn(LN(x)), then + FFN(LN(.)).
template <class Ops>
typename Ops::Value encoder_block(const Ops& ops, const typename Ops::Value& x,
                                  const EncoderLayerWeights<typename Ops::Param>& w,
                                  const typename Ops::Value& bias, std::size_t n_heads) {
  const auto z = ops.layer_norm(x, w.ln1.gain, w.ln1.bias);
  const auto h = ops.add(x, attention(ops, z, z, w.attn, n_heads, &bias, nullptr));
  return ops.add(h, feed_forward(ops, ops.layer_norm(h, w.ln2.gain, w.ln2.bias), w.ffn));
}

/// Pre-norm decoder block over a whole (teacher-forced) prefix: causal
/// self-attention, cross-attention over memory, feed-forward.
template <class Ops>
typename Ops::Value decoder_block(const Ops& ops, const typename Ops::Value& x,
                                  const typename Ops::Value& memory,
                                  const DecoderLayerWeights<typename Ops::Param>& w,
                                  const typename Ops::Value& self_bias, const Tensor2D& mask,
                                  std::size_t n_heads) {
  const auto z1 = ops.layer_norm(x, w.ln1.gain, w.ln1.bias);
  const auto h1 = ops.add(x, attention(ops, z1, z1, w.self_attn, n_heads, &self_bias, &mask));
  const auto z2 = ops.layer_norm(h1, w.ln2.gain, w.ln2.bias);
  const auto h2 = ops.add(h1, attention(ops, z2, memory, w.cross_attn, n_heads, nullptr, nullptr));
  return ops.add(h2, feed_forward(ops, ops.layer_norm(h2, w.ln3.gain, w.ln3.bias), w.ffn));
}

// --- embeddings -------------------------------------------------------------

template <class Ops>
typename Ops::Value embed_image_tokens(const Ops& ops, const ParamSet<typename Ops::Param>& w,
                                       std::span<const TokenId> grid) {
  const auto e = ops.gather_rows(w.token_embedding, grid);
  return ops.add(e, ops.add_row(ops.matmul(e, w.patch_w), w.patch_b));
}

inline void check_tokens(std::span<const TokenId> ids, std::size_t vocab, const char* what) {
  for (TokenId t : ids) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError(std::string(what) + ": token " + std::to_string(t) + " outside vocab of " +
                       std::to_string(vocab));
    }
  }
}

inline HiddenState embed_text(std::span<const TokenId> text, const ModelParams& params) {
  if (text.size() > params.config.max_text_len) {
    throw LengthError("embed_text: " + std::to_string(text.size()) + " tokens exceeds max_text_len " +
                      std::to_string(params.config.max_text_len));
  }
  check_tokens(text, params.config.vocab_size, "embed_text");
  if (text.empty()) return {Tensor2D(0, params.config.d_model), Modality::kText, 0};
  return {gather_rows(params.weights.token_embedding, text), Modality::kText, 0};
}

/// Image cells are embedded through the token table and a learned linear
/// patch projection applied to each cell, e + e*W + b.
inline HiddenState embed_image(std::span<const TokenId> grid, const ModelParams& params) {
  if (grid.size() != params.config.image_tokens()) {
    throw ShapeError("embed_image: expected " + std::to_string(params.config.image_tokens()) +
                     " grid cells, got " + std::to_string(grid.size()));
  }
  check_tokens(grid, params.config.vocab_size, "embed_image");
  return {embed_image_tokens(PlainOps{}, params.weights, grid), Modality::kImage, 0};
}

/// Self-attention bias matching a state's modality and length.
inline Tensor2D encoder_bias_for(const HiddenState& state, const ModelParams& params) {
  if (state.modality == Modality::kImage) return relative_bias_2d(params.config.grid_side, params);
  return relative_bias_1d(state.tensor.rows(), params);
}

/// One encoder layer (1-based index) of the shared stack.
inline HiddenState encoder_layer_forward(const HiddenState& state, std::size_t layer_index,
                                         const ModelParams& params, const Tensor2D& bias) {
  if (layer_index < 1 || layer_index > params.config.n_enc_layers) {
    throw ContractError("encoder_layer_forward: layer " + std::to_string(layer_index) +
                        " outside [1, " + std::to_string(params.config.n_enc_layers) + "]");
  }
  if (state.modality == Modality::kDecoder) {
    throw ContractError("encoder_layer_forward: decoder state given to encoder");
  }
  const std::size_t n = state.tensor.rows();
  if (bias.rows() != n || bias.cols() != n) {
    throw ShapeError("encoder_layer_forward: bias " + bias.shape_str() + " for " +
                     std::to_string(n) + " tokens");
  }
  if (n == 0) return {state.tensor, state.modality, layer_index};
  return {encoder_block(PlainOps{}, state.tensor, params.weights.encoder[layer_index - 1], bias,
                        params.config.n_heads),
          state.modality, layer_index};
}

/// Normalised encoder memory C from the concatenated exit states.
inline Tensor2D encoder_memory(const Tensor2D& image_state, const Tensor2D& text_state,
                               const ModelParams& params) {
  return layer_norm(concat_rows(image_state, text_state), params.weights.encoder_norm.gain,
                    params.weights.encoder_norm.bias);
}

/// Logits over the unified vocabulary: final decoder norm, then the tied
/// token-embedding matrix.
inline Tensor2D output_head(const HiddenState& state, const ModelParams& params) {
  if (state.modality != Modality::kDecoder) {
    throw ContractError(std::string("output_head: expects a decoder state, got ") +
                        modality_name(state.modality));
  }
  const auto& w = params.weights;
  return matmul_nt(layer_norm(state.tensor, w.decoder_norm.gain, w.decoder_norm.bias), w.token_embedding);
}

template <class Ops>
typename Ops::Value output_logits(const Ops& ops, const ParamSet<typename Ops::Param>& w,
                                  const typename Ops::Value& state) {
  return ops.matmul_nt(ops.layer_norm(state, w.decoder_norm.gain, w.decoder_norm.bias),
                       w.token_embedding);
}

// --- full-depth passes ------------------------------------------------------

/// Runs every encoder layer on one modality and returns all states, index 0
/// being the embedding.
template <class Ops>
std::vector<typename Ops::Value> encode_all_layers(const Ops& ops,
                                                   const ParamSet<typename Ops::Param>& w,
                                                   const ModelConfig& cfg,
                                                   const typename Ops::Value& embedded,
                                                   const typename Ops::Value& bias) {
  std::vector<typename Ops::Value> states{embedded};
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    states.push_back(encoder_block(ops, states.back(), w.encoder[l], bias, cfg.n_heads));
  }
  return states;
}

/// Teacher-forced decoder over input tokens (BOS followed by the target
/// prefix). Returns the hidden states after each layer, 1..n_dec_layers.
template <class Ops>
std::vector<typename Ops::Value> decode_all_layers(const Ops& ops,
                                                   const ParamSet<typename Ops::Param>& w,
                                                   const ModelConfig& cfg,
                                                   const typename Ops::Value& memory,
                                                   std::span<const TokenId> inputs) {
  const auto bias = relative_bias_1d(ops, w.decoder_bias, inputs.size(), cfg.rel_bucket_count);
  const Tensor2D mask = causal_mask(inputs.size());
  std::vector<typename Ops::Value> states;
  auto x = ops.gather_rows(w.token_embedding, inputs);
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    x = decoder_block(ops, x, memory, w.decoder[l], bias, mask, cfg.n_heads);
    states.push_back(x);
  }
  return states;
}

// --- incremental decoding ---------------------------------------------------

struct LayerCache {
  Tensor2D self_keys, self_values;  // one row per emitted position
  Tensor2D cross_keys, cross_values;
  std::size_t positions() const { return self_keys.rows(); }
};

struct DecoderCaches {
  std::vector<LayerCache> layers;

  /// Projects the encoder memory into every layer's cross-attention keys and
  /// values once.
  static DecoderCaches build(const Tensor2D& memory, const ModelParams& params) {
    DecoderCaches c;
    c.layers.resize(params.config.n_dec_layers);
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
      const auto& a = params.weights.decoder[l].cross_attn;
      c.layers[l].cross_keys = add_row(matmul(memory, a.wk), a.bk);
      c.layers[l].cross_values = add_row(matmul(memory, a.wv), a.bv);
    }
    return c;
  }

  /// Appends the self-attention key/value of `state` (the input of layer
  /// `layer_index`) without running the layer. Used to keep skipped layers'
  /// history aligned after an early exit.
  void append_propagated(std::size_t layer_index, std::span<const double> state,
                         const ModelParams& params) {
    const auto& w = params.weights.decoder[layer_index - 1];
    Tensor2D x(1, state.size(), std::vector<double>(state.begin(), state.end()));
    const Tensor2D z = layer_norm(x, w.ln1.gain, w.ln1.bias);
    layers[layer_index - 1].self_keys.append_row(add_row(matmul(z, w.self_attn.wk), w.self_attn.bk).row(0));
    layers[layer_index - 1].self_values.append_row(add_row(matmul(z, w.self_attn.wv), w.self_attn.bv).row(0));
  }
};

namespace detail {

/// Single-row attention against cached keys/values.
inline Tensor2D attend_row(const Tensor2D& q, const Tensor2D& keys, const Tensor2D& values,
                           std::size_t n_heads, std::span<const double> bias) {
  const std::size_t d = q.cols(), dh = d / n_heads, n = keys.rows();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor2D out(1, d);
  Tensor2D scores(1, n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q(0, c) * keys(j, c);
      scores(0, j) = s * inv_sqrt + (bias.empty() ? 0.0 : bias[j]);
    }
    const Tensor2D p = softmax_rows(scores);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out(0, c) += p(0, j) * values(j, c);
  }
  return out;
}

}  // namespace detail

/// One decoder layer (1-based) for the newest position. `state` holds the
/// single current row; its self-attention key/value are appended to the cache.
inline HiddenState decoder_layer_forward(const HiddenState& state, std::size_t layer_index,
                                         DecoderCaches& caches, const ModelParams& params) {
  const auto& cfg = params.config;
  if (layer_index < 1 || layer_index > cfg.n_dec_layers || caches.layers.size() != cfg.n_dec_layers) {
    throw ContractError("decoder_layer_forward: bad layer index or cache layout");
  }
  if (state.modality != Modality::kDecoder || state.tensor.rows() != 1) {
    throw ContractError("decoder_layer_forward: expects a single decoder row");
  }
  LayerCache& cache = caches.layers[layer_index - 1];
  if (cache.cross_keys.rows() == 0) throw StateError("decoder_layer_forward: empty cross-attention cache");
  const auto& w = params.weights.decoder[layer_index - 1];
  const Tensor2D& x = state.tensor;

  const Tensor2D z1 = layer_norm(x, w.ln1.gain, w.ln1.bias);
  const Tensor2D q = add_row(matmul(z1, w.self_attn.wq), w.self_attn.bq);
  cache.self_keys.append_row(add_row(matmul(z1, w.self_attn.wk), w.self_attn.bk).row(0));
  cache.self_values.append_row(add_row(matmul(z1, w.self_attn.wv), w.self_attn.bv).row(0));
  const std::size_t pos = cache.positions() - 1;
  std::vector<double> bias(pos + 1);
  for (std::size_t j = 0; j <= pos; ++j) {
    const auto offset = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(pos);
    bias[j] = params.weights.decoder_bias.data()[relative_bucket(offset, cfg.rel_bucket_count)];
  }
  const Tensor2D self_out =
      add_row(matmul(detail::attend_row(q, cache.self_keys, cache.self_values, cfg.n_heads, bias),
                     w.self_attn.wo),
              w.self_attn.bo);
  const Tensor2D h1 = add(x, self_out);

  const Tensor2D z2 = layer_norm(h1, w.ln2.gain, w.ln2.bias);
  const Tensor2D cq = add_row(matmul(z2, w.cross_attn.wq), w.cross_attn.bq);
  const Tensor2D cross_out =
      add_row(matmul(detail::attend_row(cq, cache.cross_keys, cache.cross_values, cfg.n_heads, {}),
                     w.cross_attn.wo),
              w.cross_attn.bo);
  const Tensor2D h2 = add(h1, cross_out);

  Tensor2D y = add(h2, feed_forward(PlainOps{}, layer_norm(h2, w.ln3.gain, w.ln3.bias), w.ffn));
  return {std::move(y), Modality::kDecoder, layer_index};
}

/// Embedding of a single decoder input token as the layer-0 state.
inline HiddenState embed_decoder_token(TokenId token, const ModelParams& params) {
  const TokenId ids[1] = {token};
  check_tokens(ids, params.config.vocab_size, "embed_decoder_token");
  return {gather_rows(params.weights.token_embedding, ids), Modality::kDecoder, 0};
}

}  // namespace mue
