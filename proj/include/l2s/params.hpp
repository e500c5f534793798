// SPDX-License-Identifier: Apache-2.0
#ifndef L2S_PARAMS_HPP
#define L2S_PARAMS_HPP

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "l2s/rng.hpp"
#include "l2s/tensor.hpp"

namespace l2s {

using GradMap = std::map<std::string, Vec>;

// Ordered map of named trainable tensors plus AdamW moment state. Iteration
// order is the lexicographic name order, so it is deterministic.
class ParameterStore {
 public:
  struct Moments {
    Vec m, v;
  };

  explicit ParameterStore(uint64_t seed = 0) : seed_(seed) {}

  uint64_t rng_seed() const { return seed_; }
  RngStream rng(std::string_view label) const { return RngStream(seed_, "params").child(label); }

  Tensor& create(const std::string& name, Shape shape, double init_scale) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (init_scale != 0.0) {
      RngStream r = rng(name);
      for (double& v : *t.data) v = r.normal() * init_scale;
    }
    return insert(name, std::move(t));
  }

  Tensor& create_zeros(const std::string& name, Shape shape) {
    return insert(name, Tensor::zeros(std::move(shape)));
  }

  Tensor& insert(const std::string& name, Tensor t) {
    if (params_.count(name)) throw ValidationError("parameter exists: " + name);
    t.requires_grad = true;
    t.ensure_grad();
    auto [it, ok] = params_.emplace(name, std::move(t));
    (void)ok;
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("no such parameter: " + name);
    return it->second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("no such parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void set_trainable(const std::function<bool(const std::string&)>& pred) {
    for (auto& [name, t] : params_) t.requires_grad = pred(name);
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  Moments& moments(const std::string& name, int64_t numel) {
    Moments& mm = opt_[name];
    if (mm.m.empty()) {
      mm.m.assign(static_cast<size_t>(numel), 0.0);
      mm.v.assign(static_cast<size_t>(numel), 0.0);
    }
    return mm;
  }

  std::map<std::string, Moments>& all_moments() { return opt_; }
  void reset_moments() { opt_.clear(); }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Moments> opt_;
  uint64_t seed_;
};

// Reverse pass from a scalar loss. Populates Tensor::grad for every reachable
// trainable parameter (unreachable ones keep zeros), returns the gradients
// keyed by name, and frees the tape.
inline GradMap backward(const Tensor& loss, ParameterStore& store) {
  if (loss.numel() != 1) throw ShapeMismatch("backward: loss must be scalar");
  Tape* tp = Tape::current();
  if (!tp || loss.tape_gen != tp->gen || loss.node < 0)
    throw NoTape("backward: loss was not computed under a recording tape");
  store.zero_grads();
  tp->backprop(loss.node);
  GradMap grads;
  for (auto& [name, t] : store)
    if (t.requires_grad) grads.emplace(name, t.ensure_grad());
  return grads;
}

struct AdamBetas {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard AdamW with bias correction and decoupled weight decay. Frozen
// parameters (requires_grad == false) are untouched; each trainable parameter
// must appear in `grads`.
inline void adamw_step(ParameterStore& store, const GradMap& grads, double lr,
                       double weight_decay, AdamBetas betas, int64_t step_index) {
  if (step_index < 1) throw ValidationError("adamw_step: step_index must be >= 1");
  double bc1 = 1.0 - std::pow(betas.beta1, static_cast<double>(step_index));
  double bc2 = 1.0 - std::pow(betas.beta2, static_cast<double>(step_index));
  for (auto& [name, p] : store) {
    if (!p.requires_grad) continue;
    auto git = grads.find(name);
    if (git == grads.end()) throw MissingGrad("adamw_step: no gradient for " + name);
    const Vec& g = git->second;
    if (static_cast<int64_t>(g.size()) != p.numel())
      throw ShapeMismatch("adamw_step: gradient size mismatch for " + name);
    ParameterStore::Moments& mm = store.moments(name, p.numel());
    double* pv = p.ptr();
    for (size_t i = 0; i < g.size(); ++i) {
      mm.m[i] = betas.beta1 * mm.m[i] + (1.0 - betas.beta1) * g[i];
      mm.v[i] = betas.beta2 * mm.v[i] + (1.0 - betas.beta2) * g[i] * g[i];
      double mhat = mm.m[i] / bc1;
      double vhat = mm.v[i] / bc2;
      pv[i] -= lr * (mhat / (std::sqrt(vhat) + betas.eps) + weight_decay * pv[i]);
    }
  }
}

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = true;
  double worst = 0.0;
  std::string worst_name;
  std::vector<GradCheckEntry> entries;
};

// Compares analytic gradients against central finite differences
// (f(x+eps) - f(x-eps)) / (2 eps), parameter by parameter. `f` builds a
// deterministic scalar loss from the store; when a tape is active its graph
// supplies the analytic side.
inline GradCheckReport finite_diff_check(const std::function<Tensor(ParameterStore&)>& f,
                                         ParameterStore& store, double eps = 1e-5,
                                         double tol = 1e-4) {
  if (eps < 1e-7 || eps > 1e-3) throw ValidationError("finite_diff_check: eps out of [1e-7, 1e-3]");
  auto eval = [&](ParameterStore& s) -> double {
    NoGradScope ng;
    return f(s).item();
  };
  double v1 = eval(store);
  double v2 = eval(store);
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0)
    throw NonDeterministicFunction("finite_diff_check: two evaluations differ at the same point");

  GradMap analytic;
  {
    TapeScope ts;
    Tensor loss = f(store);
    analytic = backward(loss, store);
  }

  GradCheckReport report;
  for (auto& [name, p] : store) {
    if (!p.requires_grad) continue;
    const Vec& a = analytic.at(name);
    double worst = 0.0;
    double* pv = p.ptr();
    for (int64_t i = 0; i < p.numel(); ++i) {
      double saved = pv[i];
      pv[i] = saved + eps;
      double fp = eval(store);
      pv[i] = saved - eps;
      double fm = eval(store);
      pv[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double diff = std::fabs(a[static_cast<size_t>(i)] - numeric);
      double rel = 0.0;
      if (diff > 1e-9) {
        double denom = std::max(std::fabs(a[static_cast<size_t>(i)]), std::fabs(numeric));
        rel = denom > 0 ? diff / denom : 0.0;
      }
      worst = std::max(worst, rel);
    }
    report.entries.push_back({name, worst});
    if (worst > report.worst) {
      report.worst = worst;
      report.worst_name = name;
    }
    if (worst > tol) report.pass = false;
  }
  return report;
}

}  // namespace l2s

#endif  // L2S_PARAMS_HPP
