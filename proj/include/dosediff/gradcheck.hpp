#pragma once

// Central-difference verification of analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "dosediff/ops.hpp"
#include "dosediff/rng.hpp"

namespace dosediff {

/// Coordinates of one leaf to probe; empty `indices` means all of them.
struct Probe {
  Tensor leaf;
  std::vector<std::size_t> indices;
};

namespace detail {
struct SignTrace {
  explicit SignTrace(std::uint64_t* h) { relu_sign_trace = h; }
  ~SignTrace() { relu_sign_trace = nullptr; }
  SignTrace(const SignTrace&) = delete;
  SignTrace& operator=(const SignTrace&) = delete;
};
}  // namespace detail

/// Denominator floor for the relative error. A central difference with
/// h = 1e-5 on an O(1) loss carries ~1e-11..1e-10 of round-off, so smaller
/// gradients are effectively compared with an absolute tolerance.
inline constexpr double kRelativeFloor = 1e-6;

/// max over probed coordinates of |analytic - numeric| / max(|analytic|, kRelativeFloor).
/// `loss` must rebuild the graph from the probed leaves on every call and
/// return a scalar. Leaf values are restored exactly afterwards.
///
/// If the relu sign pattern differs between x + h and x - h the stencil
/// crosses a kink and measures no derivative; h is then cut by 10x, down to
/// 1e-8. `refined` (optional) counts coordinates that needed this.
inline double finite_diff_check(const std::function<Tensor()>& loss, std::vector<Probe> probes, double eps = 1e-5,
                                std::size_t* refined = nullptr) {
  for (auto& p : probes) p.leaf.zero_grad();
  backward(loss());
  double worst = 0.0;
  for (auto& p : probes) {
    std::vector<double> analytic(p.leaf.numel(), 0.0);
    if (p.leaf.has_grad()) std::copy(p.leaf.grad().begin(), p.leaf.grad().end(), analytic.begin());
    if (p.indices.empty()) {
      p.indices.resize(p.leaf.numel());
      for (std::size_t i = 0; i < p.indices.size(); ++i) p.indices[i] = i;
    }
    auto data = p.leaf.mutable_data();
    for (std::size_t i : p.indices) {
      const double saved = data[i];
      auto traced = [&](double at, std::uint64_t& sig) {
        sig = 0xcbf29ce484222325ULL;
        detail::SignTrace trace(&sig);
        data[i] = at;
        return loss().item();
      };
      double h = eps, numeric = 0.0;
      for (;;) {
        NoGradGuard guard;
        std::uint64_t sp = 0, sm = 0;
        const double plus = traced(saved + h, sp), minus = traced(saved - h, sm);
        numeric = (plus - minus) / (2.0 * h);
        if (sp == sm || h <= 1e-8) break;
        h /= 10.0;
      }
      if (h != eps && refined) ++*refined;
      data[i] = saved;
      const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), kRelativeFloor);
      worst = std::max(worst, err);
    }
    p.leaf.zero_grad();
  }
  return worst;
}

/// Checks one catalog op at the given point. The op output is reduced to a
/// scalar through a fixed random projection so every output element matters.
inline double finite_diff_check(std::string_view kind, std::span<const Tensor> point, const Attrs& attrs = {},
                                double eps = 1e-5, std::uint64_t projection_seed = 17) {
  std::vector<Tensor> leaves;
  for (const auto& t : point) leaves.emplace_back(t.shape(), t.values(), true);
  Tensor weights;
  {
    NoGradGuard guard;
    const Tensor probe_out = forward_op(kind, leaves, attrs);
    Rng rng(projection_seed);
    weights = Tensor(probe_out.shape(), rng.normal_vector(probe_out.numel()));
  }
  auto loss = [&] { return sum(mul(forward_op(kind, leaves, attrs), weights)); };
  std::vector<Probe> probes;
  for (const auto& l : leaves) probes.push_back({l, {}});
  return finite_diff_check(loss, std::move(probes), eps);
}

}  // namespace dosediff
