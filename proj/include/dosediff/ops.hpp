#pragma once

// Differentiable op catalog. All ops take and return Tensors; shapes are
// checked eagerly and mismatches raise ShapeError naming the op.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dosediff/tensor.hpp"

namespace dosediff {

namespace detail {

[[noreturn]] inline void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// Rank-equal broadcasting: each dim of a and b must match or be 1.
inline Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    shape_fail(op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      shape_fail(op, "incompatible dims " + shape_str(a) + " vs " + shape_str(b) +
                         " at axis " + std::to_string(i));
    }
  }
  return out;
}

// For each output element, the flat offset into an input of shape `in`
// broadcast to `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  if (in == out) {
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> counter(out.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (in[d] != 1) off += counter[d] * in_strides[d];
    }
    idx[i] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++counter[d] < out[d]) break;
      counter[d] = 0;
    }
  }
  return idx;
}

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const char* name = kind == BinaryKind::Add ? "add" : kind == BinaryKind::Sub ? "sub" : "mul";
  const Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  std::vector<std::size_t> ia, ib;
  if (!same) {
    ia = broadcast_index(a.shape(), out_shape);
    ib = broadcast_index(b.shape(), out_shape);
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[same ? i : ia[i]];
    const double y = bv[same ? i : ib[i]];
    out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
  }
  return make_result(name, out_shape, std::move(out), {&a, &b},
                     [kind, same, ia = std::move(ia), ib = std::move(ib)](Node& self) {
                       const auto& g = self.grad;
                       const auto& av = self.inputs[0]->data;
                       const auto& bv = self.inputs[1]->data;
                       if (auto* ga = input_grad(self, 0)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const std::size_t j = same ? i : ia[i];
                           (*ga)[j] += kind == BinaryKind::Mul ? g[i] * bv[same ? i : ib[i]] : g[i];
                         }
                       }
                       if (auto* gb = input_grad(self, 1)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const std::size_t j = same ? i : ib[i];
                           if (kind == BinaryKind::Add) {
                             (*gb)[j] += g[i];
                           } else if (kind == BinaryKind::Sub) {
                             (*gb)[j] -= g[i];
                           } else {
                             (*gb)[j] += g[i] * av[same ? i : ia[i]];
                           }
                         }
                       }
                     });
}

inline std::size_t normalize_axis(std::string_view op, std::int64_t axis, std::size_t rank) {
  const std::int64_t r = static_cast<std::int64_t>(rank);
  if (axis < -r || axis >= r) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Elementwise ops. Operands must have equal rank; size-1 dims broadcast.
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Mul, a, b); }

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return detail::make_result("scale", a.shape(), std::move(out), {&a}, [s](detail::Node& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * s;
    }
  });
}

/// Matrix product. Supports [M,K]x[K,N], [B,M,K]x[B,K,N] and [...,M,K]x[K,N]
/// (leading dims of the left operand flattened into rows).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || bs.size() > 3) {
    detail::shape_fail("matmul", "unsupported ranks " + shape_str(as) + " x " + shape_str(bs));
  }
  std::size_t batch = 1, m = 0, k = as.back(), n = bs.back();
  Shape out_shape;
  bool batched = bs.size() == 3;
  if (batched) {
    if (as.size() != 3 || as[0] != bs[0]) {
      detail::shape_fail("matmul", "batch mismatch " + shape_str(as) + " x " + shape_str(bs));
    }
    batch = as[0];
    m = as[1];
    out_shape = {batch, m, n};
  } else {
    m = a.numel() / k;
    out_shape = as;
    out_shape.back() = n;
  }
  if (bs[bs.size() - 2] != k) {
    detail::shape_fail("matmul", "inner dims differ " + shape_str(as) + " x " + shape_str(bs));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t p = 0; p < batch; ++p) {
    const double* A = av.data() + p * m * k;
    const double* B = bv.data() + (batched ? p * k * n : 0);
    double* C = out.data() + p * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t l = 0; l < k; ++l) {
        const double x = A[i * k + l];
        const double* brow = B + l * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += x * brow[j];
      }
    }
  }
  return detail::make_result(
      "matmul", out_shape, std::move(out), {&a, &b},
      [batch, m, k, n, batched](detail::Node& self) {
        const auto& g = self.grad;
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        auto* ga = detail::input_grad(self, 0);
        auto* gb = detail::input_grad(self, 1);
        for (std::size_t p = 0; p < batch; ++p) {
          const double* G = g.data() + p * m * n;
          const double* A = av.data() + p * m * k;
          const double* B = bv.data() + (batched ? p * k * n : 0);
          if (ga) {
            double* GA = ga->data() + p * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t l = 0; l < k; ++l) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[l * n + j];
                GA[i * k + l] += acc;
              }
          }
          if (gb) {
            double* GB = gb->data() + (batched ? p * k * n : 0);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t l = 0; l < k; ++l) {
                const double x = A[i * k + l];
                for (std::size_t j = 0; j < n; ++j) GB[l * n + j] += x * G[i * n + j];
              }
          }
        }
      });
}

/// 2-D cross-correlation with zero padding. x: [N,Ci,H,W], w: [Co,Ci,k,k],
/// optional bias: [Co]. Output side is (side + 2*padding - k)/stride + 1.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) {
    detail::shape_fail("conv2d", "expects x [N,C,H,W] and w [Co,Ci,k,k], got " + shape_str(xs) +
                                     " and " + shape_str(ws));
  }
  if (ws[1] != xs[1]) {
    detail::shape_fail("conv2d", "input channels " + std::to_string(xs[1]) +
                                     " do not match kernel channels " + std::to_string(ws[1]));
  }
  if (ws[2] != ws[3]) detail::shape_fail("conv2d", "kernel must be square, got " + shape_str(ws));
  if (stride == 0) detail::shape_fail("conv2d", "stride must be positive");
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ws[0], K = ws[2];
  if (H + 2 * padding < K || W + 2 * padding < K) {
    detail::shape_fail("conv2d", "kernel " + std::to_string(K) + " larger than padded input " +
                                     shape_str(xs));
  }
  if (bias.defined() && bias.shape() != Shape{Co}) {
    detail::shape_fail("conv2d", "bias shape " + shape_str(bias.shape()) + " expected [" +
                                     std::to_string(Co) + "]");
  }
  const std::size_t Ho = (H + 2 * padding - K) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - K) / stride + 1;
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<double> out(N * Co * Ho * Wo, 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Valid output range [lo, hi) for a kernel tap so the input index is in bounds.
  auto valid_range = [&](std::size_t tap, std::size_t in_side, std::size_t out_side) {
    std::size_t lo = 0, hi = 0;
    for (std::size_t o = 0; o < out_side; ++o) {
      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o * stride + tap) - pad;
      if (i < 0) lo = o + 1;
      if (i < static_cast<std::ptrdiff_t>(in_side)) hi = o + 1;
    }
    return std::pair{lo, std::max(lo, hi)};
  };
  std::vector<std::pair<std::size_t, std::size_t>> yr(K), xr(K);
  for (std::size_t t = 0; t < K; ++t) {
    yr[t] = valid_range(t, H, Ho);
    xr[t] = valid_range(t, W, Wo);
  }

  for (std::size_t nb = 0; nb < N; ++nb)
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out.data() + (nb * Co + co) * Ho * Wo;
      if (bias.defined()) std::fill(o, o + Ho * Wo, bias[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = xv.data() + (nb * Ci + ci) * H * W;
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const double wk = wv[((co * Ci + ci) * K + ky) * K + kx];
            for (std::size_t oy = yr[ky].first; oy < yr[ky].second; ++oy) {
              const std::size_t iy = oy * stride + ky - padding;
              const double* row = in + iy * W;
              double* orow = o + oy * Wo;
              for (std::size_t ox = xr[kx].first; ox < xr[kx].second; ++ox) {
                orow[ox] += wk * row[ox * stride + kx - padding];
              }
            }
          }
      }
    }

  return detail::make_result(
      "conv2d", {N, Co, Ho, Wo}, std::move(out), {&x, &w, &bias},
      [=](detail::Node& self) {
        const auto& g = self.grad;
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gw = detail::input_grad(self, 1);
        auto* gbias = self.inputs[2] ? detail::input_grad(self, 2) : nullptr;
        for (std::size_t nb = 0; nb < N; ++nb)
          for (std::size_t co = 0; co < Co; ++co) {
            const double* go = g.data() + (nb * Co + co) * Ho * Wo;
            if (gbias) {
              double acc = 0.0;
              for (std::size_t i = 0; i < Ho * Wo; ++i) acc += go[i];
              (*gbias)[co] += acc;
            }
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double* in = xv.data() + (nb * Ci + ci) * H * W;
              double* gin = gx ? gx->data() + (nb * Ci + ci) * H * W : nullptr;
              for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const std::size_t widx = ((co * Ci + ci) * K + ky) * K + kx;
                  const double wk = wv[widx];
                  double wacc = 0.0;
                  for (std::size_t oy = yr[ky].first; oy < yr[ky].second; ++oy) {
                    const std::size_t iy = oy * stride + ky - padding;
                    const double* grow = go + oy * Wo;
                    for (std::size_t ox = xr[kx].first; ox < xr[kx].second; ++ox) {
                      const std::size_t ix = ox * stride + kx - padding;
                      wacc += grow[ox] * in[iy * W + ix];
                      if (gin) gin[iy * W + ix] += grow[ox] * wk;
                    }
                  }
                  if (gw) (*gw)[widx] += wacc;
                }
            }
          }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 0) {
  return conv2d(x, w, Tensor{}, stride, padding);
}

/// Nearest-neighbour resize of the last two axes of [N,C,H,W] to [N,C,out_h,out_w].
inline Tensor upsample_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) detail::shape_fail("upsample", "expects [N,C,H,W], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) detail::shape_fail("upsample", "zero output size");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<std::size_t> src(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t xx = 0; xx < out_w; ++xx) src[y * out_w + xx] = (y * H / out_h) * W + xx * W / out_w;
  std::vector<double> out(NC * out_h * out_w);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t i = 0; i < src.size(); ++i) out[p * src.size() + i] = xv[p * H * W + src[i]];
  return detail::make_result("upsample", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {&x},
                             [src, NC, HW = H * W](detail::Node& self) {
                               if (auto* gx = detail::input_grad(self, 0)) {
                                 for (std::size_t p = 0; p < NC; ++p)
                                   for (std::size_t i = 0; i < src.size(); ++i)
                                     (*gx)[p * HW + src[i]] += self.grad[p * src.size() + i];
                               }
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    detail::shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result("reshape", std::move(shape), x.values(), {&x}, [](detail::Node& self) {
    if (auto* gx = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
    }
  });
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& xs = x.shape();
  if (perm.size() != xs.size()) {
    detail::shape_fail("permute", "permutation length " + std::to_string(perm.size()) +
                                      " for shape " + shape_str(xs));
  }
  std::vector<bool> used(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || used[p]) detail::shape_fail("permute", "invalid permutation");
    used[p] = true;
  }
  Shape out_shape(xs.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = xs[perm[i]];
  const auto in_strides = detail::strides_of(xs);
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(xs.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) off += counter[d] * in_strides[perm[d]];
    src[i] = off;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  return detail::make_result("permute", std::move(out_shape), std::move(out), {&x},
                             [src = std::move(src)](detail::Node& self) {
                               if (auto* gx = detail::input_grad(self, 0)) {
                                 for (std::size_t i = 0; i < src.size(); ++i) (*gx)[src[i]] += self.grad[i];
                               }
                             });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis_in) {
  if (xs.empty()) detail::shape_fail("concat", "no inputs");
  const Shape& first = xs[0].shape();
  const std::size_t axis = detail::normalize_axis("concat", axis_in, first.size());
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) detail::shape_fail("concat", "shape " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> lens;
  std::size_t base = 0;
  for (const auto& t : xs) {
    const std::size_t len = t.dim(axis);
    lens.push_back(len);
    const auto& v = t.values();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(v.data() + o * len * split.inner, len * split.inner,
                  out.data() + (o * split.len + base) * split.inner);
    base += len;
  }
  return detail::make_result("concat", out_shape, std::move(out), xs,
                             [split, lens](detail::Node& self) {
                               std::size_t base = 0;
                               for (std::size_t k = 0; k < lens.size(); ++k) {
                                 if (auto* g = detail::input_grad(self, k)) {
                                   for (std::size_t o = 0; o < split.outer; ++o)
                                     for (std::size_t i = 0; i < lens[k] * split.inner; ++i)
                                       (*g)[o * lens[k] * split.inner + i] +=
                                           self.grad[(o * split.len + base) * split.inner + i];
                                 }
                                 base += lens[k];
                               }
                             });
}

/// Contiguous range [start, start+length) along one axis.
inline Tensor slice(const Tensor& x, std::int64_t axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::normalize_axis("slice", axis_in, x.rank());
  if (length == 0 || start + length > x.dim(axis)) {
    detail::shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                                    ") outside axis of size " + std::to_string(x.dim(axis)));
  }
  const auto split = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(shape_numel(out_shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(xv.data() + (o * split.len + start) * split.inner, length * split.inner,
                out.data() + o * length * split.inner);
  return detail::make_result("slice", std::move(out_shape), std::move(out), {&x},
                             [split, start, length](detail::Node& self) {
                               if (auto* gx = detail::input_grad(self, 0)) {
                                 for (std::size_t o = 0; o < split.outer; ++o)
                                   for (std::size_t i = 0; i < length * split.inner; ++i)
                                     (*gx)[(o * split.len + start) * split.inner + i] +=
                                         self.grad[o * length * split.inner + i];
                               }
                             });
}

/// Toroidal roll of the last two axes: out[.., (y+dy) mod H, (x+dx) mod W] = in[.., y, x].
inline Tensor roll(const Tensor& x, std::int64_t dy, std::int64_t dx) {
  if (x.rank() < 2) detail::shape_fail("roll", "needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (H * W);
  auto wrap = [](std::int64_t v, std::size_t m) {
    const auto mm = static_cast<std::int64_t>(m);
    return static_cast<std::size_t>(((v % mm) + mm) % mm);
  };
  const std::size_t sy = wrap(dy, H), sx = wrap(dx, W);
  std::vector<std::size_t> dst(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx) dst[y * W + xx] = ((y + sy) % H) * W + (xx + sx) % W;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < H * W; ++i) out[p * H * W + dst[i]] = xv[p * H * W + i];
  return detail::make_result("roll", x.shape(), std::move(out), {&x},
                             [dst, planes, HW = H * W](detail::Node& self) {
                               if (auto* gx = detail::input_grad(self, 0)) {
                                 for (std::size_t p = 0; p < planes; ++p)
                                   for (std::size_t i = 0; i < HW; ++i)
                                     (*gx)[p * HW + i] += self.grad[p * HW + dst[i]];
                               }
                             });
}

inline Tensor softmax(const Tensor& x, std::int64_t axis_in = -1) {
  const std::size_t axis = detail::normalize_axis("softmax", axis_in, x.rank());
  const auto s = detail::split_axis(x.shape(), axis);
  const auto& xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(xv[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= total;
    }
  return detail::make_result("softmax", x.shape(), out, {&x}, [s, y = out](detail::Node& self) {
    if (auto* gx = detail::input_grad(self, 0)) {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.len; ++i) dot += self.grad[base + i * s.inner] * y[base + i * s.inner];
          for (std::size_t i = 0; i < s.len; ++i) {
            const std::size_t k = base + i * s.inner;
            (*gx)[k] += y[k] * (self.grad[k] - dot);
          }
        }
    }
  });
}

/// While set, relu folds the sign pattern of its inputs into this hash. The
/// gradient checker uses it to spot finite-difference stencils that straddle
/// a kink.
inline thread_local std::uint64_t* relu_sign_trace = nullptr;

/// relu with derivative 0 at 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  if (auto* h = relu_sign_trace)
    for (double v : xv) *h = (*h ^ static_cast<std::uint64_t>(v < 0.0)) * 0x100000001b3ULL;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] < 0.0 ? 0.0 : xv[i];  // NaN passes through
  return detail::make_result("relu", x.shape(), std::move(out), {&x}, [](detail::Node& self) {
    if (auto* gx = detail::input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->data;
      for (std::size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > 0.0) (*gx)[i] += self.grad[i];
    }
  });
}

/// Exact gelu: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  return detail::make_result("gelu", x.shape(), std::move(out), {&x}, [](detail::Node& self) {
    if (auto* gx = detail::input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->data;
      const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        (*gx)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

/// Normalizes along `axis` to zero mean / unit variance, then applies the
/// per-feature affine gamma, beta (both of length shape[axis]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::int64_t axis_in = -1,
                         double eps = 1e-5) {
  const std::size_t axis = detail::normalize_axis("layer_norm", axis_in, x.rank());
  const auto s = detail::split_axis(x.shape(), axis);
  if (gamma.shape() != Shape{s.len} || beta.shape() != Shape{s.len}) {
    detail::shape_fail("layer_norm", "affine params " + shape_str(gamma.shape()) + "/" +
                                         shape_str(beta.shape()) + " expected [" + std::to_string(s.len) + "]");
  }
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mean = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) mean += xv[base + i * s.inner];
      mean /= static_cast<double>(s.len);
      double var = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double d = xv[base + i * s.inner] - mean;
        var += d * d;
      }
      var /= static_cast<double>(s.len);
      const double r = 1.0 / std::sqrt(var + eps);
      inv_std[o * s.inner + in] = r;
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t k = base + i * s.inner;
        xhat[k] = (xv[k] - mean) * r;
        out[k] = xhat[k] * gv[i] + bv[i];
      }
    }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [s, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.grad;
        const auto& gv = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gg = detail::input_grad(self, 1);
        auto* gb = detail::input_grad(self, 2);
        const double n = static_cast<double>(s.len);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
              const std::size_t k = base + i * s.inner;
              const double dxhat = g[k] * gv[i];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat[k];
              if (gg) (*gg)[i] += g[k] * xhat[k];
              if (gb) (*gb)[i] += g[k];
            }
            if (gx) {
              const double r = inv_std[o * s.inner + in];
              for (std::size_t i = 0; i < s.len; ++i) {
                const std::size_t k = base + i * s.inner;
                const double dxhat = g[k] * gv[i];
                (*gx)[k] += r / n * (n * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
              }
            }
          }
      });
}

/// Sum of all elements, shape [1].
inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return detail::make_result("sum", {1}, {total}, {&x}, [](detail::Node& self) {
    if (auto* gx = detail::input_grad(self, 0)) {
      for (double& v : *gx) v += self.grad[0];
    }
  });
}

/// Mean of all elements, shape [1].
inline Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  const double n = static_cast<double>(x.numel());
  return detail::make_result("mean", {1}, {total / n}, {&x}, [n](detail::Node& self) {
    if (auto* gx = detail::input_grad(self, 0)) {
      for (double& v : *gx) v += self.grad[0] / n;
    }
  });
}

/// mean((a - b)^2), shape [1].
inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    detail::shape_fail("mse_loss", "shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    total += d * d;
  }
  const double n = static_cast<double>(av.size());
  return detail::make_result("mse_loss", {1}, {total / n}, {&a, &b}, [n](detail::Node& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    const double g = self.grad[0] * 2.0 / n;
    auto* ga = detail::input_grad(self, 0);
    auto* gb = detail::input_grad(self, 1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = av[i] - bv[i];
      if (ga) (*ga)[i] += g * d;
      if (gb) (*gb)[i] -= g * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Name-based dispatch.

class UnknownOpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using AttrValue = std::variant<std::int64_t, double, std::vector<std::int64_t>>;
using Attrs = std::map<std::string, AttrValue, std::less<>>;

namespace detail {

template <typename T>
T attr(std::string_view op, const Attrs& attrs, std::string_view key) {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw ShapeError(std::string(op) + ": missing attribute '" + std::string(key) + "'");
  if (const T* v = std::get_if<T>(&it->second)) return *v;
  throw ShapeError(std::string(op) + ": attribute '" + std::string(key) + "' has the wrong type");
}

template <typename T>
T attr_or(const Attrs& attrs, std::string_view key, T fallback) {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  if (const T* v = std::get_if<T>(&it->second)) return *v;
  return fallback;
}

inline void expect_inputs(std::string_view op, std::span<const Tensor> in, std::size_t lo, std::size_t hi) {
  if (in.size() < lo || in.size() > hi) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(lo) +
                     (lo == hi ? "" : "-" + std::to_string(hi)) + " inputs, got " + std::to_string(in.size()));
  }
}

inline std::vector<std::size_t> to_sizes(const std::vector<std::int64_t>& v) {
  std::vector<std::size_t> out;
  for (auto x : v) {
    if (x < 0) throw ShapeError("negative size in attribute");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

}  // namespace detail

/// Op names accepted by forward_op.
inline const std::vector<std::string>& op_catalog() {
  static const std::vector<std::string> names = {
      "add",    "sub",    "mul",   "scale",   "matmul", "conv2d", "upsample", "reshape",  "permute", "concat",
      "slice",  "roll",   "softmax", "relu",  "gelu",   "layer_norm", "mean", "sum",   "mse_loss"};
  return names;
}

/// Applies a catalog op by name. Attributes:
///   scale: s (double); conv2d: stride, padding (int, inputs x,w[,bias]);
///   upsample: height, width; reshape: shape (ints); permute: perm (ints);
///   concat: axis; slice: axis, start, length; roll: dy, dx;
///   softmax: axis (default -1); layer_norm: axis (default -1), eps (default 1e-5).
inline Tensor forward_op(std::string_view kind, std::span<const Tensor> in, const Attrs& attrs = {}) {
  using detail::attr;
  using detail::expect_inputs;
  if (kind == "add" || kind == "sub" || kind == "mul") {
    expect_inputs(kind, in, 2, 2);
    return kind == "add" ? add(in[0], in[1]) : kind == "sub" ? sub(in[0], in[1]) : mul(in[0], in[1]);
  }
  if (kind == "scale") {
    expect_inputs(kind, in, 1, 1);
    return scale(in[0], attr<double>(kind, attrs, "s"));
  }
  if (kind == "matmul") {
    expect_inputs(kind, in, 2, 2);
    return matmul(in[0], in[1]);
  }
  if (kind == "conv2d") {
    expect_inputs(kind, in, 2, 3);
    const auto stride = static_cast<std::size_t>(detail::attr_or<std::int64_t>(attrs, "stride", 1));
    const auto padding = static_cast<std::size_t>(detail::attr_or<std::int64_t>(attrs, "padding", 0));
    return conv2d(in[0], in[1], in.size() == 3 ? in[2] : Tensor{}, stride, padding);
  }
  if (kind == "upsample") {
    expect_inputs(kind, in, 1, 1);
    return upsample_nearest(in[0], static_cast<std::size_t>(attr<std::int64_t>(kind, attrs, "height")),
                            static_cast<std::size_t>(attr<std::int64_t>(kind, attrs, "width")));
  }
  if (kind == "reshape") {
    expect_inputs(kind, in, 1, 1);
    return reshape(in[0], detail::to_sizes(attr<std::vector<std::int64_t>>(kind, attrs, "shape")));
  }
  if (kind == "permute") {
    expect_inputs(kind, in, 1, 1);
    return permute(in[0], detail::to_sizes(attr<std::vector<std::int64_t>>(kind, attrs, "perm")));
  }
  if (kind == "concat") {
    if (in.empty()) throw ShapeError("concat: no inputs");
    return concat(std::vector<Tensor>(in.begin(), in.end()), attr<std::int64_t>(kind, attrs, "axis"));
  }
  if (kind == "slice") {
    expect_inputs(kind, in, 1, 1);
    return slice(in[0], attr<std::int64_t>(kind, attrs, "axis"),
                 static_cast<std::size_t>(attr<std::int64_t>(kind, attrs, "start")),
                 static_cast<std::size_t>(attr<std::int64_t>(kind, attrs, "length")));
  }
  if (kind == "roll") {
    expect_inputs(kind, in, 1, 1);
    return roll(in[0], attr<std::int64_t>(kind, attrs, "dy"), attr<std::int64_t>(kind, attrs, "dx"));
  }
  if (kind == "softmax") {
    expect_inputs(kind, in, 1, 1);
    return softmax(in[0], detail::attr_or<std::int64_t>(attrs, "axis", -1));
  }
  if (kind == "relu") {
    expect_inputs(kind, in, 1, 1);
    return relu(in[0]);
  }
  if (kind == "gelu") {
    expect_inputs(kind, in, 1, 1);
    return gelu(in[0]);
  }
  if (kind == "layer_norm") {
    expect_inputs(kind, in, 3, 3);
    return layer_norm(in[0], in[1], in[2], detail::attr_or<std::int64_t>(attrs, "axis", -1),
                      detail::attr_or<double>(attrs, "eps", 1e-5));
  }
  if (kind == "mean" || kind == "sum") {
    expect_inputs(kind, in, 1, 1);
    return kind == "mean" ? mean(in[0]) : sum(in[0]);
  }
  if (kind == "mse_loss") {
    expect_inputs(kind, in, 2, 2);
    return mse_loss(in[0], in[1]);
  }
  throw UnknownOpError("forward_op: unknown op kind '" + std::string(kind) + "'");
}

inline Tensor forward_op(std::string_view kind, std::initializer_list<Tensor> in, const Attrs& attrs = {}) {
  return forward_op(kind, std::span<const Tensor>(in.begin(), in.size()), attrs);
}

}  // namespace dosediff
