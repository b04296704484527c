#pragma once

// Neural building blocks on [N, C, H, W] feature maps: windowed
// self-attention with cyclic shift, Swin-style blocks, cross-attention
// fusion, the bottleneck projector and sinusoidal time embeddings.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dosediff/ops.hpp"
#include "dosediff/optim.hpp"
#include "dosediff/rng.hpp"

namespace dosediff::nn {

// ---------------------------------------------------------------------------
// Parameter construction helpers.

inline Tensor make_param(ParamStore& store, const std::string& name, Shape shape, std::vector<double> values) {
  return store.add(name, Tensor(std::move(shape), std::move(values), true));
}

inline Tensor trunc_normal_param(ParamStore& store, const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.truncated_normal(stddev);
  return make_param(store, name, std::move(shape), std::move(v));
}

inline Tensor zeros_param(ParamStore& store, const std::string& name, Shape shape) {
  const std::size_t n = shape_numel(shape);
  return make_param(store, name, std::move(shape), std::vector<double>(n, 0.0));
}

inline Tensor ones_param(ParamStore& store, const std::string& name, Shape shape) {
  const std::size_t n = shape_numel(shape);
  return make_param(store, name, std::move(shape), std::vector<double>(n, 1.0));
}

/// Kernel of a k x k conv, truncated normal scaled by fan-in.
inline Tensor conv_param(ParamStore& store, const std::string& name, std::size_t out_ch, std::size_t in_ch,
                         std::size_t k, Rng& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
  return trunc_normal_param(store, name, {out_ch, in_ch, k, k}, stddev, rng);
}

inline constexpr double kProjectionStd = 0.02;

/// [N, C, H, W] -> [N, H*W, C] token matrix.
inline Tensor to_tokens(const Tensor& x) {
  const Shape& s = x.shape();
  return permute(reshape(x, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

/// [N, H*W, C] -> [N, C, H, W].
inline Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w) {
  const Shape& s = t.shape();
  return reshape(permute(t, {0, 2, 1}), {s[0], s[2], h, w});
}

/// Adds a per-sample, per-channel bias [N, C] to [N, C, H, W].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  return add(x, reshape(bias, {bias.dim(0), bias.dim(1), 1, 1}));
}

/// Channel-wise layer normalization of [N, C, H, W] (per pixel, over C).
inline Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  return layer_norm(x, gamma, beta, 1);
}

// ---------------------------------------------------------------------------
// Windows and shifts.

/// Splits [C, H, W] into [(H/w)(W/w), C, w, w], or [N, C, H, W] into
/// [N (H/w)(W/w), C, w, w]. Windows are ordered row-major over the grid.
inline Tensor window_partition(const Tensor& x, std::size_t w) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw ShapeError("window_partition: expects [C,H,W] or [N,C,H,W]");
  const std::size_t N = batched ? x.dim(0) : 1;
  const std::size_t C = x.dim(x.rank() - 3), H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (w == 0 || H % w != 0 || W % w != 0) {
    throw ShapeError("window_partition: window " + std::to_string(w) + " does not divide " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  const std::size_t nh = H / w, nw = W / w;
  Tensor t = reshape(x, {N, C, nh, w, nw, w});
  t = permute(t, {0, 2, 4, 1, 3, 5});
  return reshape(t, {N * nh * nw, C, w, w});
}

/// Inverse of window_partition. `batch` = 0 returns [C, H, W].
inline Tensor window_merge(const Tensor& windows, std::size_t batch, std::size_t H, std::size_t W) {
  if (windows.rank() != 4) throw ShapeError("window_merge: expects [B,C,w,w]");
  const std::size_t C = windows.dim(1), w = windows.dim(2);
  if (w == 0 || H % w != 0 || W % w != 0) throw ShapeError("window_merge: window does not divide the map");
  const std::size_t N = batch == 0 ? 1 : batch;
  const std::size_t nh = H / w, nw = W / w;
  if (windows.dim(0) != N * nh * nw) {
    throw ShapeError("window_merge: " + std::to_string(windows.dim(0)) + " windows cannot tile " + std::to_string(N) +
                     " maps of " + std::to_string(H) + "x" + std::to_string(W));
  }
  Tensor t = reshape(windows, {N, nh, nw, C, w, w});
  t = permute(t, {0, 3, 1, 4, 2, 5});
  return batch == 0 ? reshape(t, {C, H, W}) : reshape(t, {N, C, H, W});
}

/// Toroidal shift of the spatial axes.
inline Tensor cyclic_shift(const Tensor& x, std::int64_t dy, std::int64_t dx) { return roll(x, dy, dx); }

// ---------------------------------------------------------------------------
// Window self-attention.

struct AttentionParams {
  Tensor w_q, w_k, w_v;  // [C, heads * head_dim], applied to token rows
  Tensor w_o, b_o;       // [heads * head_dim, C], [C]
  std::size_t heads = 1;
  std::size_t head_dim = 1;
};

inline AttentionParams init_attention(ParamStore& store, const std::string& prefix, std::size_t channels,
                                      std::size_t heads, Rng& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ShapeError("attention: " + std::to_string(heads) + " heads do not divide " + std::to_string(channels) +
                     " channels");
  }
  AttentionParams p;
  p.heads = heads;
  p.head_dim = channels / heads;
  p.w_q = trunc_normal_param(store, prefix + ".w_q", {channels, channels}, kProjectionStd, rng);
  p.w_k = trunc_normal_param(store, prefix + ".w_k", {channels, channels}, kProjectionStd, rng);
  p.w_v = trunc_normal_param(store, prefix + ".w_v", {channels, channels}, kProjectionStd, rng);
  p.w_o = trunc_normal_param(store, prefix + ".w_o", {channels, channels}, kProjectionStd, rng);
  p.b_o = zeros_param(store, prefix + ".b_o", {channels});
  return p;
}

/// Multi-head attention inside each window. windows: [B, C, w, w].
/// softmax(Q K^T / sqrt(d_k)) weights the values of every pixel in the
/// window; heads are concatenated and projected by W_o. When `maps` is
/// given it receives the attention weights, [B * heads, n, n].
inline Tensor window_attention(const Tensor& windows, const AttentionParams& p, Tensor* maps = nullptr) {
  if (windows.rank() != 4) throw ShapeError("window_attention: expects [B,C,w,w]");
  const std::size_t B = windows.dim(0), C = windows.dim(1), wh = windows.dim(2), ww = windows.dim(3);
  const std::size_t n = wh * ww, h = p.heads, dk = p.head_dim;
  if (p.w_q.dim(0) != C || h * dk != p.w_q.dim(1)) {
    throw ShapeError("window_attention: channels " + std::to_string(C) + " do not match projection " +
                     shape_str(p.w_q.shape()));
  }
  const Tensor tokens = reshape(permute(reshape(windows, {B, C, n}), {0, 2, 1}), {B * n, C});
  auto heads_of = [&](const Tensor& proj) {
    // [B*n, h*dk] -> [B*h, n, dk]
    return reshape(permute(reshape(proj, {B, n, h, dk}), {0, 2, 1, 3}), {B * h, n, dk});
  };
  const Tensor q = heads_of(matmul(tokens, p.w_q));
  const Tensor k = heads_of(matmul(tokens, p.w_k));
  const Tensor v = heads_of(matmul(tokens, p.w_v));
  const Tensor logits = scale(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dk)));
  const Tensor attn = softmax(logits, -1);
  if (maps) *maps = attn;
  Tensor out = matmul(attn, v);                                            // [B*h, n, dk]
  out = reshape(permute(reshape(out, {B, h, n, dk}), {0, 2, 1, 3}), {B * n, h * dk});
  out = add(matmul(out, p.w_o), reshape(p.b_o, {1, C}));                    // [B*n, C]
  return reshape(permute(reshape(out, {B, n, C}), {0, 2, 1}), {B, C, wh, ww});
}

// ---------------------------------------------------------------------------
// Swin block.

struct SwinBlockParams {
  Tensor norm1_g, norm1_b;
  AttentionParams attn;
  Tensor norm2_g, norm2_b;
  Tensor w1, b1, w2, b2;  // per-pixel MLP as 1x1 convs: [hidden, C, 1, 1], [C, hidden, 1, 1]
  Tensor time_w, time_b;  // optional: [time_dim, C], [C]
  std::size_t window = 1;
  bool shift = false;
};

inline SwinBlockParams init_swin_block(ParamStore& store, const std::string& prefix, std::size_t channels,
                                       std::size_t heads, std::size_t window, bool shift, std::size_t time_dim,
                                       Rng& rng, std::size_t mlp_ratio = 2) {
  SwinBlockParams p;
  p.window = window;
  p.shift = shift;
  p.norm1_g = ones_param(store, prefix + ".norm1.g", {channels});
  p.norm1_b = zeros_param(store, prefix + ".norm1.b", {channels});
  p.attn = init_attention(store, prefix + ".attn", channels, heads, rng);
  p.norm2_g = ones_param(store, prefix + ".norm2.g", {channels});
  p.norm2_b = zeros_param(store, prefix + ".norm2.b", {channels});
  const std::size_t hidden = channels * mlp_ratio;
  p.w1 = trunc_normal_param(store, prefix + ".mlp.w1", {hidden, channels, 1, 1}, kProjectionStd, rng);
  p.b1 = zeros_param(store, prefix + ".mlp.b1", {hidden});
  p.w2 = trunc_normal_param(store, prefix + ".mlp.w2", {channels, hidden, 1, 1}, kProjectionStd, rng);
  p.b2 = zeros_param(store, prefix + ".mlp.b2", {channels});
  if (time_dim > 0) {
    p.time_w = trunc_normal_param(store, prefix + ".time.w", {time_dim, channels}, kProjectionStd, rng);
    p.time_b = zeros_param(store, prefix + ".time.b", {channels});
  }
  return p;
}

/// Per-sample channel bias from a time embedding [N, D] through a block's projection.
inline Tensor time_bias(const Tensor& t_emb, const Tensor& w, const Tensor& b) {
  return add(matmul(t_emb, w), reshape(b, {1, b.dim(0)}));
}

/// x -> x + unshift(merge(attn(partition(shift(norm1(x))))))
///   -> x + W2 relu(W1 (norm2(x) + time bias) + b1) + b2.
/// `t_emb` ([N, D]) may be undefined; it is only used when the block has a
/// time projection.
inline Tensor swin_block(const Tensor& x, const SwinBlockParams& p, const Tensor& t_emb = Tensor{}) {
  if (x.rank() != 4) throw ShapeError("swin_block: expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t w = p.window;
  const auto half = static_cast<std::int64_t>(w / 2);
  const bool shifted = p.shift && half > 0;

  Tensor h = channel_norm(x, p.norm1_g, p.norm1_b);
  if (shifted) h = cyclic_shift(h, -half, -half);
  h = window_merge(window_attention(window_partition(h, w), p.attn), N, H, W);
  if (shifted) h = cyclic_shift(h, half, half);
  const Tensor x1 = add(x, h);

  Tensor m = channel_norm(x1, p.norm2_g, p.norm2_b);
  if (p.time_w.defined() && t_emb.defined()) {
    if (t_emb.rank() != 2 || t_emb.dim(0) != N || t_emb.dim(1) != p.time_w.dim(0)) {
      throw ShapeError("swin_block: time embedding " + shape_str(t_emb.shape()) + " does not match projection " +
                       shape_str(p.time_w.shape()));
    }
    m = add_channel_bias(m, time_bias(t_emb, p.time_w, p.time_b));
  }
  m = conv2d(relu(conv2d(m, p.w1, p.b1, 1, 0)), p.w2, p.b2, 1, 0);
  return add(x1, m);
}

// ---------------------------------------------------------------------------
// Cross-attention fusion.

struct CrossAttentionParams {
  Tensor w_q;  // [C_A, d]  structural map -> queries
  Tensor w_k;  // [C_B, d]  noise map -> keys
  Tensor w_v;  // [C_B, C_B] noise map -> values
};

inline CrossAttentionParams init_cross_attention(ParamStore& store, const std::string& prefix, std::size_t ch_a,
                                                 std::size_t ch_b, std::size_t inner, Rng& rng) {
  CrossAttentionParams p;
  p.w_q = trunc_normal_param(store, prefix + ".w_q", {ch_a, inner}, kProjectionStd, rng);
  p.w_k = trunc_normal_param(store, prefix + ".w_k", {ch_b, inner}, kProjectionStd, rng);
  p.w_v = trunc_normal_param(store, prefix + ".w_v", {ch_b, ch_b}, kProjectionStd, rng);
  return p;
}

struct CrossAttentionResult {
  Tensor output;   // [N, n, C_B] = weights x V_B
  Tensor weights;  // [N, n, n], rows indexed by A tokens
};

/// Token-level cross attention: Q_A = A W_Q, K_B = B W_K, V_B = B W_V,
/// weights = softmax(Q_A K_B^T / sqrt(d_k)), output = weights V_B.
/// a_tokens: [N, n_a, C_A], b_tokens: [N, n_b, C_B].
inline CrossAttentionResult cross_attention(const Tensor& a_tokens, const Tensor& b_tokens,
                                            const CrossAttentionParams& p) {
  if (a_tokens.rank() != 3 || b_tokens.rank() != 3 || a_tokens.dim(0) != b_tokens.dim(0)) {
    throw ShapeError("cross_attention: expects token batches [N,n,C], got " + shape_str(a_tokens.shape()) + " and " +
                     shape_str(b_tokens.shape()));
  }
  if (a_tokens.dim(2) != p.w_q.dim(0) || b_tokens.dim(2) != p.w_k.dim(0) || b_tokens.dim(2) != p.w_v.dim(0)) {
    throw ShapeError("cross_attention: channel dims " + shape_str(a_tokens.shape()) + "/" +
                     shape_str(b_tokens.shape()) + " do not match projections");
  }
  const double dk = static_cast<double>(p.w_k.dim(1));
  const Tensor q = matmul(a_tokens, p.w_q);
  const Tensor k = matmul(b_tokens, p.w_k);
  const Tensor v = matmul(b_tokens, p.w_v);
  const Tensor weights = softmax(scale(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(dk)), -1);
  return {matmul(weights, v), weights};
}

/// Fuses structural map A into noise map B: B + reshape(cross_attention(A, B)).
inline Tensor cross_attention_fuse(const Tensor& a, const Tensor& b, const CrossAttentionParams& p) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("cross_attention_fuse: spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto r = cross_attention(to_tokens(a), to_tokens(b), p);
  return add(b, from_tokens(r.output, b.dim(2), b.dim(3)));
}

// ---------------------------------------------------------------------------
// Projector.

struct ProjectorParams {
  Tensor down_w, down_b;  // [C/r, C, 1, 1], [C/r]
  Tensor up_w, up_b;      // [C, C/r, 1, 1], [C]
  std::size_t ratio = 1;
};

inline ProjectorParams init_projector(ParamStore& store, const std::string& prefix, std::size_t channels,
                                      std::size_t ratio, Rng& rng) {
  if (ratio == 0 || channels % ratio != 0) {
    throw ShapeError("projector: ratio " + std::to_string(ratio) + " does not divide " + std::to_string(channels));
  }
  ProjectorParams p;
  p.ratio = ratio;
  const std::size_t hidden = channels / ratio;
  p.down_w = trunc_normal_param(store, prefix + ".down.w", {hidden, channels, 1, 1}, kProjectionStd, rng);
  p.down_b = zeros_param(store, prefix + ".down.b", {hidden});
  p.up_w = zeros_param(store, prefix + ".up.w", {channels, hidden, 1, 1});
  p.up_b = zeros_param(store, prefix + ".up.b", {channels});
  return p;
}

/// F_o = F_i + MLP_up(GELU(MLP_down(F_i))), applied per pixel.
inline Tensor projector_forward(const Tensor& f, const ProjectorParams& p) {
  if (f.rank() != 4 || f.dim(1) != p.down_w.dim(1)) {
    throw ShapeError("projector: input " + shape_str(f.shape()) + " does not match " +
                     shape_str(p.down_w.shape()));
  }
  const Tensor hidden = gelu(conv2d(f, p.down_w, p.down_b, 1, 0));
  return add(f, conv2d(hidden, p.up_w, p.up_b, 1, 0));
}

// ---------------------------------------------------------------------------
// Time embedding.

/// Sinusoidal embedding: [sin(t w_0), ..., sin(t w_{h-1}), cos(t w_0), ...,
/// cos(t w_{h-1})] with w_k = 10000^(-k/h), h = dim/2.
inline std::vector<double> time_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even, got " + std::to_string(dim));
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::sin(t * freq);
    e[half + k] = std::cos(t * freq);
  }
  return e;
}

/// Batched embedding [N, dim] of integer timesteps.
inline Tensor time_embedding(std::span<const int> t, std::size_t dim) {
  std::vector<double> v;
  v.reserve(t.size() * dim);
  for (int ti : t) {
    const auto e = time_embedding(static_cast<double>(ti), dim);
    v.insert(v.end(), e.begin(), e.end());
  }
  return Tensor({t.size(), dim}, std::move(v));
}

}  // namespace dosediff::nn
