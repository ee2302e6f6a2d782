#pragma once

#include "dvc/layers.hpp"

namespace dvc {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
};

// Adam with bias correction. One instance owns the state for one parameter
// list; parameters missing from a step's gradient map are treated as having
// zero gradient, so every element advances deterministically with the step.
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(const ParamList& params) {
    states_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      size_t n = static_cast<size_t>(params[i].tensor.numel());
      states_[i].m.assign(n, 0.0);
      states_[i].v.assign(n, 0.0);
    }
  }

  void step(ParamList& params, const GradMap& grads, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& theta = params[i].tensor.mutable_data();
      auto it = grads.find(params[i].tensor.node().get());
      const std::vector<double>* g = it == grads.end() ? nullptr : &it->second;
      auto& st = states_[i];
      for (size_t j = 0; j < theta.size(); ++j) {
        double gj = g ? (*g)[j] : 0.0;
        st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * gj;
        st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * gj * gj;
        double mhat = st.m[j] / bc1;
        double vhat = st.v[j] / bc2;
        theta[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  int64_t step_count() const { return t_; }

  // flat serialization in parameter order: m then v per parameter
  std::vector<double> save_state() const {
    std::vector<double> out;
    out.push_back(static_cast<double>(t_));
    for (const auto& st : states_) {
      out.insert(out.end(), st.m.begin(), st.m.end());
      out.insert(out.end(), st.v.begin(), st.v.end());
    }
    return out;
  }

  void load_state(const std::vector<double>& flat) {
    size_t need = 1;
    for (const auto& st : states_) need += st.m.size() + st.v.size();
    if (flat.size() != need)
      throw DataError("optimizer state blob holds " + std::to_string(flat.size()) +
                      " values, expected " + std::to_string(need));
    size_t off = 0;
    t_ = static_cast<int64_t>(flat[off++]);
    for (auto& st : states_) {
      for (auto& x : st.m) x = flat[off++];
      for (auto& x : st.v) x = flat[off++];
    }
  }

 private:
  std::vector<AdamState> states_;
  int64_t t_ = 0;
};

// base * min(1, (epoch+1)/warmup) * 0.5^floor(epoch/halve_every), epochs 0-indexed
struct LrSchedule {
  double base = 1e-3;
  int64_t warmup = 15;
  int64_t halve_every = 100;

  double lr(int64_t epoch) const {
    double ramp = std::min(1.0, static_cast<double>(epoch + 1) / static_cast<double>(warmup));
    double decay = std::pow(0.5, static_cast<double>(epoch / halve_every));
    return base * ramp * decay;
  }

  bool in_warmup(int64_t epoch) const { return epoch < warmup; }
};

}  // namespace dvc
