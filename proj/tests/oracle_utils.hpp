#pragma once

// Reference implementations the test suites compare against. Everything here
// is deliberately naive: central differences, O(N^2) scans, direct DFT.

#include <complex>
#include <functional>
#include <vector>

#include "dvc/tensor.hpp"

namespace oracle {

// Central finite difference of a scalar-valued rebuild function with respect
// to one leaf element. The rebuild runs with graph construction off.
inline double fd_partial(const std::function<dvc::Tensor()>& loss_fn, dvc::Tensor& leaf,
                         int64_t index, double h = 1e-5) {
  double orig = leaf.mutable_data()[static_cast<size_t>(index)];
  double fp, fm;
  {
    dvc::NoGradGuard ng;
    leaf.mutable_data()[static_cast<size_t>(index)] = orig + h;
    fp = loss_fn().item();
    leaf.mutable_data()[static_cast<size_t>(index)] = orig - h;
    fm = loss_fn().item();
  }
  leaf.mutable_data()[static_cast<size_t>(index)] = orig;
  return (fp - fm) / (2.0 * h);
}

struct GradCheck {
  double max_rel_err = 0.0;  // |a-n| / max(|a|,|n|,1e-8)
  double max_abs_err = 0.0;
  int64_t checked = 0;
  // elements violating |a-n| <= atol + rtol*max(|a|,|n|); the tolerance pair
  // keeps finite-difference noise on near-zero gradients from counting
  int64_t violations = 0;

  bool ok() const { return violations == 0; }
};

inline double rel_err(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Compares the reverse-mode gradient of loss_fn at each element of each leaf
// against central differences. loss_fn must rebuild the graph from the
// leaves' current data on every call.
inline GradCheck check_gradients(const std::function<dvc::Tensor()>& loss_fn,
                                 std::vector<dvc::Tensor> leaves, double h = 1e-5,
                                 double rtol = 1e-5, double atol = 1e-7) {
  dvc::Tensor loss = loss_fn();
  dvc::GradMap grads = dvc::backward(loss);
  GradCheck res;
  for (auto& leaf : leaves) {
    const std::vector<double>* ga = dvc::grad_of(grads, leaf);
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      double analytic = ga ? (*ga)[static_cast<size_t>(i)] : 0.0;
      double numeric = fd_partial(loss_fn, leaf, i, h);
      double diff = std::abs(analytic - numeric);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic, numeric));
      res.max_abs_err = std::max(res.max_abs_err, diff);
      if (diff > atol + rtol * std::max(std::abs(analytic), std::abs(numeric))) ++res.violations;
      ++res.checked;
    }
  }
  return res;
}

// Direct O(N^2) discrete Fourier transform of a real signal.
inline std::vector<std::complex<double>> naive_dft(const std::vector<double>& x) {
  size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (size_t t = 0; t < n; ++t) {
      double ang = -2.0 * dvc::kPi * static_cast<double>(k * t % n) / static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

// Exhaustive nearest-neighbour scan, squared euclidean, first index wins ties.
inline int64_t brute_force_nearest(const std::vector<double>& query,
                                   const std::vector<std::vector<double>>& codebook) {
  int64_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < codebook.size(); ++k) {
    double d = 0.0;
    for (size_t j = 0; j < query.size(); ++j) {
      double diff = query[j] - codebook[k][j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int64_t>(k);
    }
  }
  return best;
}

}  // namespace oracle
