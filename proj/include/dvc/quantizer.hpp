#pragma once

#include "dvc/tensor.hpp"

namespace dvc {

// Learnable code vectors plus the EMA accumulators that train them. The
// codebook never receives optimizer gradients; codebook_update owns it.
struct Codebook {
  int64_t K = 0;
  int64_t D = 0;
  std::vector<double> vectors;    // K x D row-major
  std::vector<double> ema_sum;    // K x D, running sum of assigned inputs
  std::vector<double> ema_count;  // K, running assignment mass

  static Codebook init(int64_t K, int64_t D, Rng& rng) {
    if (K < 2) throw DataError("codebook needs at least 2 codes");
    Codebook cb;
    cb.K = K;
    cb.D = D;
    cb.vectors.resize(static_cast<size_t>(K * D));
    double s = 1.0 / std::sqrt(static_cast<double>(D));
    for (auto& v : cb.vectors) v = rng.uniform(-s, s);
    cb.ema_sum = cb.vectors;
    cb.ema_count.assign(static_cast<size_t>(K), 1.0);
    return cb;
  }

  double at(int64_t k, int64_t d) const { return vectors[static_cast<size_t>(k * D + d)]; }
};

struct QuantizeResult {
  Tensor codes;                  // [T',D] straight-through: values are the code rows,
                                 // gradient passes to z unchanged
  std::vector<int64_t> indices;  // length T'
  Tensor vq_loss;                // ||sg(z)-codes||^2 + 0.25*||z-sg(codes)||^2, frame mean
};

constexpr double kVqCommitBeta = 0.25;
constexpr double kVqEmaDecay = 0.99;
constexpr double kVqLaplaceEps = 1e-5;

// Nearest code per frame (squared euclidean, ties to the lowest index).
// Distances use the plain per-element loop so near-ties resolve identically
// to any direct re-computation.
inline std::vector<int64_t> nearest_codes(const Tensor& z, const Codebook& cb) {
  if (z.ndim() != 2 || z.size(1) != cb.D)
    throw ShapeError("quantize: input " + shape_str(z.shape()) + " vs codebook dim " +
                     std::to_string(cb.D));
  int64_t T = z.size(0), D = cb.D;
  std::vector<int64_t> idx(static_cast<size_t>(T));
  const auto& zv = z.data();
  for (int64_t t = 0; t < T; ++t) {
    int64_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k < cb.K; ++k) {
      double d = 0.0;
      for (int64_t j = 0; j < D; ++j) {
        double diff = zv[static_cast<size_t>(t * D + j)] - cb.vectors[static_cast<size_t>(k * D + j)];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    idx[static_cast<size_t>(t)] = best;
  }
  return idx;
}

inline QuantizeResult quantize(const Tensor& z, const Codebook& cb) {
  std::vector<int64_t> idx = nearest_codes(z, cb);
  int64_t T = z.size(0), D = cb.D;
  std::vector<double> code_vals(static_cast<size_t>(T * D));
  for (int64_t t = 0; t < T; ++t)
    std::memcpy(&code_vals[static_cast<size_t>(t * D)],
                &cb.vectors[static_cast<size_t>(idx[static_cast<size_t>(t)] * D)],
                static_cast<size_t>(D) * sizeof(double));
  Tensor codes = Tensor::leaf({T, D}, std::move(code_vals), false);

  // forward value = codes, backward identity into z
  Tensor st = add(z, sub(codes, z).detach());

  // the codebook side is a constant under EMA training; the commitment side
  // pulls z toward its assigned code
  Tensor sq_dist = sum_lastdim(square(sub(z, codes)));      // [T], grad -> z
  Tensor commit = mul_scalar(mean_all(sq_dist), kVqCommitBeta);
  Tensor codebook_term = mean_all(sum_lastdim(square(sub(z.detach(), codes))));
  Tensor vq_loss = add(codebook_term, commit);

  return {st, std::move(idx), vq_loss};
}

// EMA codebook step: assigned codes move toward the mean of their assigned
// inputs; unassigned codes are left untouched, accumulators included.
inline void codebook_update(Codebook& cb, const std::vector<double>& z_values,
                            const std::vector<int64_t>& indices) {
  int64_t T = static_cast<int64_t>(indices.size());
  int64_t D = cb.D;
  std::vector<double> batch_sum(static_cast<size_t>(cb.K * D), 0.0);
  std::vector<int64_t> batch_count(static_cast<size_t>(cb.K), 0);
  for (int64_t t = 0; t < T; ++t) {
    int64_t k = indices[static_cast<size_t>(t)];
    if (k < 0 || k >= cb.K) throw DataError("codebook_update: index out of range");
    ++batch_count[static_cast<size_t>(k)];
    for (int64_t j = 0; j < D; ++j)
      batch_sum[static_cast<size_t>(k * D + j)] += z_values[static_cast<size_t>(t * D + j)];
  }
  for (int64_t k = 0; k < cb.K; ++k) {
    if (batch_count[static_cast<size_t>(k)] == 0) continue;
    double& c = cb.ema_count[static_cast<size_t>(k)];
    c = kVqEmaDecay * c + (1.0 - kVqEmaDecay) * static_cast<double>(batch_count[static_cast<size_t>(k)]);
    for (int64_t j = 0; j < D; ++j) {
      double& s = cb.ema_sum[static_cast<size_t>(k * D + j)];
      s = kVqEmaDecay * s + (1.0 - kVqEmaDecay) * batch_sum[static_cast<size_t>(k * D + j)];
      cb.vectors[static_cast<size_t>(k * D + j)] = s / (c + kVqLaplaceEps);
      if (!std::isfinite(cb.vectors[static_cast<size_t>(k * D + j)]))
        throw NumericError("codebook vector became non-finite");
    }
  }
}

// Shannon entropy (nats) of the empirical code-usage distribution.
inline double code_usage_entropy(const std::vector<int64_t>& indices, int64_t K) {
  if (indices.empty()) return 0.0;
  std::vector<int64_t> counts(static_cast<size_t>(K), 0);
  for (int64_t k : indices) ++counts[static_cast<size_t>(k)];
  double h = 0.0;
  double n = static_cast<double>(indices.size());
  for (int64_t c : counts)
    if (c > 0) {
      double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
  return h;
}

inline int64_t codes_in_use(const std::vector<int64_t>& indices, int64_t K) {
  std::vector<bool> used(static_cast<size_t>(K), false);
  for (int64_t k : indices) used[static_cast<size_t>(k)] = true;
  int64_t n = 0;
  for (bool u : used)
    if (u) ++n;
  return n;
}

}  // namespace dvc
