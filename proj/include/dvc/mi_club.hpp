#pragma once

#include <array>

#include "dvc/layers.hpp"

namespace dvc {

constexpr double kLogTwoPi = 1.8378770664093453;

// Variational approximation q(y|x): two 2-layer MLPs produce the mean and
// log-variance of a diagonal Gaussian over y. Log-variance is clamped to
// [-10, 10] to keep densities finite while the net is learning.
struct VariationalNet {
  Linear mu1, mu2;
  Linear lv1, lv2;

  VariationalNet() = default;
  VariationalNet(int64_t dx, int64_t dy, int64_t hidden, Rng& rng)
      : mu1(dx, hidden, rng), mu2(hidden, dy, rng), lv1(dx, hidden, rng), lv2(hidden, dy, rng) {}

  // frozen reads the weights without wiring them into the graph, which is how
  // the main model step keeps the estimator fixed
  std::pair<Tensor, Tensor> forward(const Tensor& x, bool frozen) const {
    auto lin = [&](const Linear& l, const Tensor& input) {
      Tensor W = frozen ? l.W.detach() : l.W;
      Tensor b = frozen ? l.b.detach() : l.b;
      return add_rowvec(matmul(input, W, false, true), b);
    };
    Tensor mu = lin(mu2, relu(lin(mu1, x)));
    Tensor lv = clamp(lin(lv2, relu(lin(lv1, x))), -10.0, 10.0);
    return {mu, lv};
  }

  void collect(const std::string& prefix, ParamList& out) {
    mu1.collect(prefix + ".mu1", out);
    mu2.collect(prefix + ".mu2", out);
    lv1.collect(prefix + ".lv1", out);
    lv2.collect(prefix + ".lv2", out);
  }
};

namespace detail {

inline void check_club_batch(const Tensor& x, const Tensor& y) {
  if (x.ndim() != 2 || y.ndim() != 2)
    throw ShapeError("club batch must be matrices, got " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  if (x.size(0) != y.size(0))
    throw ShapeError("club batch size mismatch: " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  if (x.size(0) < 2) throw DataError("club estimation needs at least 2 samples");
}

}  // namespace detail

// mean over the batch of log q(y_i | x_i)
inline Tensor club_loglik(const VariationalNet& net, const Tensor& x, const Tensor& y,
                          bool frozen = false) {
  detail::check_club_batch(x, y);
  auto [mu, lv] = net.forward(x, frozen);
  Tensor prec = exp_t(neg(lv));
  Tensor se = mul(square(sub(y, mu)), prec);                     // [N,dy]
  Tensor per_dim = add_scalar(add(se, lv), kLogTwoPi);           // [N,dy]
  return mul_scalar(mean_all(sum_lastdim(per_dim)), -0.5);
}

// Sampled vCLUB upper bound:
//   I_hat = (1/N) sum_i [ log q(y_i|x_i) - (1/N) sum_j log q(y_j|x_i) ]
// The pairwise quadratic term expands into three matrix products, so the
// N x N table never materializes per element.
inline Tensor club_mi_estimate(const VariationalNet& net, const Tensor& x, const Tensor& y,
                               bool frozen = true) {
  detail::check_club_batch(x, y);
  int64_t dy = y.size(1);
  auto [mu, lv] = net.forward(x, frozen);
  Tensor prec = exp_t(neg(lv));  // [N,dy]

  // positive pairs, elementwise
  Tensor se_pos = mul(square(sub(y, mu)), prec);
  Tensor lv_row = sum_lastdim(lv);  // [N]
  Tensor pos = mul_scalar(
      add_scalar(mean_all(add(sum_lastdim(se_pos), lv_row)),
                 static_cast<double>(dy) * kLogTwoPi),
      -0.5);

  // all pairs: quad(i,j) = sum_d prec_id*(y_jd - mu_id)^2
  Tensor y2 = square(y);
  Tensor quad = matmul(prec, y2, false, true);                        // [N,N]
  quad = sub(quad, mul_scalar(matmul(mul(mu, prec), y, false, true), 2.0));
  quad = add_colvec(quad, sum_lastdim(mul(square(mu), prec)));
  Tensor logq_all = add_colvec(quad, lv_row);                         // + sum_d lv_id
  Tensor marg = mul_scalar(
      add_scalar(mean_all(logq_all), static_cast<double>(dy) * kLogTwoPi), -0.5);

  return sub(pos, marg);
}

struct MiWeights {
  double sp = 0.01;
  double sc = 0.01;
  double sf = 0.01;
  double pc = 0.01;
  double pf = 0.01;
  double cf = 0.01;

  std::array<double, 6> as_array() const { return {sp, sc, sf, pc, pf, cf}; }
};

// the six conditioning nets, one per pair, in the canonical order
struct MiNets {
  VariationalNet sp, sc, sf, pc, pf, cf;

  MiNets() = default;
  MiNets(int64_t ds, int64_t dp, int64_t dc, int64_t hidden, Rng& rng)
      : sp(ds, dp, hidden, rng),
        sc(ds, dc, hidden, rng),
        sf(ds, 1, hidden, rng),
        pc(dp, dc, hidden, rng),
        pf(dp, 1, hidden, rng),
        cf(dc, 1, hidden, rng) {}

  void collect(ParamList& out) {
    sp.collect("mi.sp", out);
    sc.collect("mi.sc", out);
    sf.collect("mi.sf", out);
    pc.collect("mi.pc", out);
    pf.collect("mi.pf", out);
    cf.collect("mi.cf", out);
  }
};

struct MiLossResult {
  Tensor total;                     // sum of weighted, floored terms
  std::array<double, 6> estimates;  // raw I_hat per pair, before the floor
};

// L_MI over frame-aligned representations. Each term is floored at zero in
// the graph so a negative finite-sample estimate cannot become a reward.
// Pair order: (s,p) (s,c) (s,f) (p,c) (p,f) (c,f).
inline MiLossResult mi_loss(const Tensor& zs, const Tensor& zp, const Tensor& zc,
                            const Tensor& zf, const MiNets& nets, const MiWeights& w,
                            bool frozen = true) {
  int64_t T = zs.size(0);
  for (const Tensor* t : {&zp, &zc, &zf})
    if (t->size(0) != T)
      throw ShapeError("mi_loss: representations not frame-aligned (" + std::to_string(T) +
                       " vs " + std::to_string(t->size(0)) + ")");

  const std::array<const VariationalNet*, 6> net_ptr = {&nets.sp, &nets.sc, &nets.sf,
                                                        &nets.pc, &nets.pf, &nets.cf};
  const std::array<std::pair<const Tensor*, const Tensor*>, 6> pairs = {
      std::pair{&zs, &zp}, {&zs, &zc}, {&zs, &zf}, {&zp, &zc}, {&zp, &zf}, {&zc, &zf}};
  const std::array<double, 6> lambda = w.as_array();

  MiLossResult res;
  Tensor total = Tensor::scalar(0.0);
  for (size_t k = 0; k < 6; ++k) {
    Tensor est = club_mi_estimate(*net_ptr[k], *pairs[k].first, *pairs[k].second, frozen);
    res.estimates[k] = est.item();
    if (lambda[k] != 0.0) total = add(total, mul_scalar(relu(est), lambda[k]));
  }
  res.total = total;
  return res;
}

}  // namespace dvc
