#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dosediff/tensor.hpp"

namespace dosediff {

/// Per-parameter Adam moments.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// Named trainable leaves plus their optimizer state. Iteration order is
/// the lexicographic order of names, which keeps every traversal deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    if (!value.requires_grad()) value = Tensor(value.shape(), value.values(), true);
    auto [it, _] = params_.emplace(name, std::move(value));
    return it->second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::map<std::string, AdamState>& optimizer_state() { return state_; }
  const std::map<std::string, AdamState>& optimizer_state() const { return state_; }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, AdamState> state_;
};

using GradMap = std::map<std::string, Tensor>;

/// Current gradients of every parameter; parameters the last backward did not
/// reach get zeros.
inline GradMap collect_grads(const ParamStore& store) {
  GradMap grads;
  for (const auto& [name, p] : store) {
    if (p.has_grad()) {
      grads.emplace(name, Tensor(p.shape(), std::vector<double>(p.grad().begin(), p.grad().end())));
    } else {
      grads.emplace(name, Tensor::zeros(p.shape()));
    }
  }
  return grads;
}

/// Clears stale gradients, back-propagates from a scalar root and returns
/// d(root)/d(parameter) for every parameter in the store.
inline GradMap backward(const Tensor& root, ParamStore& store) {
  store.zero_grad();
  backward(root);
  return collect_grads(store);
}

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update for every parameter present in `grads`.
inline void adam_step(ParamStore& store, const GradMap& grads, const AdamOptions& opt) {
  for (const auto& [name, g] : grads) {
    Tensor& p = store.at(name);
    if (g.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                       ", parameter has " + shape_str(p.shape()));
    }
    AdamState& st = store.optimizer_state()[name];
    if (st.m.empty()) {
      st.m.assign(p.numel(), 0.0);
      st.v.assign(p.numel(), 0.0);
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
    auto data = p.mutable_data();
    const auto& gv = g.values();
    for (std::size_t i = 0; i < data.size(); ++i) {
      st.m[i] = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * gv[i];
      st.v[i] = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * gv[i] * gv[i];
      const double m_hat = st.m[i] / bc1;
      const double v_hat = st.v[i] / bc2;
      data[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
  }
}

}  // namespace dosediff
