#pragma once

// Conditional DDPM: schedule tables, forward corruption, noise-prediction
// objective and the ancestral reverse sampler.
//
// Timesteps are 1-based: t in [1, T]. Tables are stored with an unused slot
// at index 0 where alpha_bar[0] = 1, so alpha_bar[t-1] is always valid.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dosediff/ops.hpp"
#include "dosediff/rng.hpp"

namespace dosediff::diffusion {

class ScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ScheduleKind { Linear };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Linear:
      return "linear";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  throw ScheduleError("unknown schedule kind '" + s + "'");
}

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // [0] unused
  std::vector<double> alpha;      // [0] unused
  std::vector<double> alpha_bar;  // [0] = 1

  void check_t(int t) const {
    if (t < 1 || t > T) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
  }
};

/// Builds the schedule from explicit per-step betas.
inline NoiseSchedule make_schedule(std::span<const double> betas) {
  if (betas.empty()) throw ScheduleError("schedule needs at least one step");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.beta.assign(1, 0.0);
  s.alpha.assign(1, 1.0);
  s.alpha_bar.assign(1, 1.0);
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ScheduleError("beta must lie in (0, 1), got " + std::to_string(b));
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    s.alpha_bar.push_back(s.alpha_bar.back() * (1.0 - b));
  }
  return s;
}

/// Linear kind: beta_t evenly spaced from beta_start (t=1) to beta_end (t=T).
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::Linear) {
  if (T < 1) throw ScheduleError("T must be >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ScheduleError("need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) + ", " +
                        std::to_string(beta_end));
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  switch (kind) {
    case ScheduleKind::Linear:
      for (int i = 0; i < T; ++i) {
        betas[static_cast<std::size_t>(i)] =
            T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
      }
      break;
  }
  return make_schedule(betas);
}

namespace detail {

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Per-sample timesteps broadcast over [N, ...]; a single timestep applies to all.
inline std::size_t sample_of(std::size_t i, std::size_t per_sample, std::size_t count) {
  return count == 1 ? 0 : i / per_sample;
}

}  // namespace detail

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. With several
/// timesteps, x0's leading axis indexes them.
inline Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& s) {
  detail::require_same("q_sample", x0, eps);
  if (t.empty() || (t.size() != 1 && t.size() != x0.dim(0))) {
    throw ShapeError("q_sample: need one timestep or one per sample");
  }
  for (int ti : t) s.check_t(ti);
  const std::size_t per = x0.numel() / (t.size() == 1 ? 1 : t.size());
  std::vector<double> out(x0.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double ab = s.alpha_bar[static_cast<std::size_t>(t[detail::sample_of(i, per, t.size())])];
    out[i] = std::sqrt(ab) * x0[i] + std::sqrt(1.0 - ab) * eps[i];
  }
  return Tensor(x0.shape(), std::move(out));
}

inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return q_sample(x0, std::span<const int>(&t, 1), eps, s);
}

/// Inverts q_sample given a noise estimate. With `clamp`, values are limited
/// to the normalized dose range [-1, 1]. Small alpha_bar makes the division
/// ill-conditioned; that is accepted rather than treated as an error.
inline Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s, bool clamp = false) {
  detail::require_same("predict_x0", x_t, eps_hat);
  s.check_t(t);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = (x_t[i] - b * eps_hat[i]) / a;
    if (clamp) v = std::clamp(v, -1.0, 1.0);
    out[i] = v;
  }
  return Tensor(x_t.shape(), std::move(out));
}

/// One ancestral step:
///   x_{t-1} = (x_t - (1 - alpha_t)/sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) * z.
/// `z` may be undefined to mean zero; it must be zero (or undefined) at t = 1.
inline Tensor p_sample_step(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s,
                            const Tensor& z = Tensor{}) {
  detail::require_same("p_sample_step", x_t, eps_hat);
  s.check_t(t);
  if (z.defined()) {
    detail::require_same("p_sample_step", x_t, z);
    if (t == 1) {
      for (double v : z.values()) {
        if (v != 0.0) throw std::invalid_argument("p_sample_step: noise must be zero at t = 1");
      }
    }
  }
  const auto ti = static_cast<std::size_t>(t);
  const double coef = (1.0 - s.alpha[ti]) / std::sqrt(1.0 - s.alpha_bar[ti]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[ti]);
  const double sigma = std::sqrt(s.beta[ti]);
  std::vector<double> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
    if (z.defined()) out[i] += sigma * z[i];
  }
  return Tensor(x_t.shape(), std::move(out));
}

/// eps_hat = model(x_t, per-sample timesteps, condition). The returned tensor
/// may be graph-tracked (training) or not (sampling).
using NoisePredictor = std::function<Tensor(const Tensor& x_t, std::span<const int> t, const Tensor& condition)>;

/// Draws t ~ U{1..T} and eps ~ N(0, I) per sample, corrupts x0 and returns
/// the graph-tracked MSE between the model's noise estimate and eps.
inline Tensor training_step(const NoisePredictor& model, const Tensor& x0, const Tensor& condition,
                            const NoiseSchedule& s, Rng& rng) {
  const std::size_t n = x0.dim(0);
  std::vector<int> t(n);
  for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(1, s.T));
  const Tensor eps(x0.shape(), rng.normal_vector(x0.numel()));
  const Tensor x_t = q_sample(x0.detach(), t, eps, s);
  const Tensor eps_hat = model(x_t, t, condition);
  return mse_loss(eps_hat, eps);
}

struct SampleOptions {
  bool clamp_output = true;       // clamp the final x0 to [-1, 1]
  bool stochastic = true;         // add sqrt(beta_t) z for t > 1
};

/// Reverse process from x_T ~ N(0, I) down to x_0. `shape` is the shape of
/// one dose batch, e.g. [1, 1, H, W]. Deterministic in `seed`.
inline Tensor sample_loop(const NoisePredictor& model, const Tensor& condition, const Shape& shape,
                          const NoiseSchedule& s, std::uint64_t seed, const SampleOptions& opt = {}) {
  NoGradGuard no_grad;
  Rng rng(seed);
  Tensor x(shape, rng.normal_vector(shape_numel(shape)));
  const std::size_t n = shape.empty() ? 1 : shape[0];
  std::vector<int> ts(n);
  for (int t = s.T; t >= 1; --t) {
    std::fill(ts.begin(), ts.end(), t);
    const Tensor eps_hat = model(x, ts, condition);
    Tensor z;
    if (opt.stochastic && t > 1) z = Tensor(shape, rng.normal_vector(shape_numel(shape)));
    x = p_sample_step(x, t, eps_hat, s, z);
  }
  if (opt.clamp_output) {
    std::vector<double> v = x.values();
    for (double& e : v) e = std::clamp(e, -1.0, 1.0);
    x = Tensor(shape, std::move(v));
  }
  return x;
}

}  // namespace dosediff::diffusion
