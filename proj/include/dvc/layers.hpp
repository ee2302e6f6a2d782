#pragma once

#include <string>
#include <vector>

#include "dvc/tensor.hpp"

namespace dvc {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

namespace init {

// uniform in (-s, s) with s = sqrt(1/fan_in)
inline Tensor uniform_fan_in(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  double s = std::sqrt(1.0 / static_cast<double>(fan_in));
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(-s, s);
  return Tensor::leaf(std::move(shape), std::move(v), true);
}

}  // namespace init

// y = x W^T + b
struct Linear {
  Tensor W;  // [out, in]
  Tensor b;  // [out]

  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng)
      : W(init::uniform_fan_in({out, in}, in, rng)),
        b(init::uniform_fan_in({out}, in, rng)) {}

  Tensor forward(const Tensor& x) const {
    if (x.ndim() == 1) return add(matvec(W, x), b);
    return add_rowvec(matmul(x, W, false, true), b);  // [T,in] -> [T,out]
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".W", W});
    out.push_back({prefix + ".b", b});
  }
};

namespace detail {

// left/right split of TensorFlow-style same padding
inline std::pair<int64_t, int64_t> same_pad(int64_t len, int64_t k, int64_t stride) {
  int64_t out = (len + stride - 1) / stride;
  int64_t total = std::max<int64_t>(0, (out - 1) * stride + k - len);
  return {total / 2, total - total / 2};
}

}  // namespace detail

// 1-d convolution over [Cin,T] with same padding: T_out = ceil(T/stride)
struct Conv1d {
  Tensor W;  // [Cout, Cin*k]
  Tensor b;  // [Cout]
  int64_t k = 0, stride = 1;

  Conv1d() = default;
  Conv1d(int64_t cin, int64_t cout, int64_t kernel, int64_t stride_, Rng& rng)
      : W(init::uniform_fan_in({cout, cin * kernel}, cin * kernel, rng)),
        b(init::uniform_fan_in({cout}, cin * kernel, rng)),
        k(kernel),
        stride(stride_) {}

  Tensor forward(const Tensor& x) const {
    auto [pl, pr] = detail::same_pad(x.size(1), k, stride);
    Tensor cols = im2col1d(x, k, stride, pl, pr);
    return add_colvec(matmul(W, cols), b);  // [Cout, T_out]
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".W", W});
    out.push_back({prefix + ".b", b});
  }
};

// 2-d convolution over [Cin,H,W] with same padding on both axes
struct Conv2d {
  Tensor W;  // [Cout, Cin*kh*kw]
  Tensor b;  // [Cout]
  int64_t kh = 0, kw = 0, sh = 1, sw = 1;

  Conv2d() = default;
  Conv2d(int64_t cin, int64_t cout, int64_t kh_, int64_t kw_, int64_t sh_, int64_t sw_, Rng& rng)
      : W(init::uniform_fan_in({cout, cin * kh_ * kw_}, cin * kh_ * kw_, rng)),
        b(init::uniform_fan_in({cout}, cin * kh_ * kw_, rng)),
        kh(kh_),
        kw(kw_),
        sh(sh_),
        sw(sw_) {}

  Tensor forward(const Tensor& x) const {
    auto [pt, pb] = detail::same_pad(x.size(1), kh, sh);
    auto [pl, pr] = detail::same_pad(x.size(2), kw, sw);
    int64_t ho = (x.size(1) + pt + pb - kh) / sh + 1;
    int64_t wo = (x.size(2) + pl + pr - kw) / sw + 1;
    Tensor cols = im2col2d(x, kh, kw, sh, sw, pt, pb, pl, pr);
    Tensor y = add_colvec(matmul(W, cols), b);
    return reshape(y, {W.size(0), ho, wo});
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".W", W});
    out.push_back({prefix + ".b", b});
  }
};

// Per-channel normalization over the sample's own non-channel axes, then a
// learned affine. Stateless, so training and inference behave identically.
struct ChanNorm {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  double eps = 1e-5;

  ChanNorm() = default;
  explicit ChanNorm(int64_t c)
      : gamma(Tensor::full({c}, 1.0, true)), beta(Tensor::zeros({c}, true)) {}

  // x is [C,N] or [C,H,W] with channels along axis 0
  Tensor forward(const Tensor& x) const {
    std::vector<int64_t> orig = x.shape();
    Tensor m = x;
    if (x.ndim() == 3) m = reshape(x, {orig[0], orig[1] * orig[2]});
    Tensor mu = mean_lastdim(m);
    Tensor centered = add_colvec(m, neg(mu));
    Tensor var = mean_lastdim(square(centered));
    Tensor inv_std = recip(sqrt_t(add_scalar(var, eps)));
    Tensor y = mul_colvec(centered, inv_std);
    y = add_colvec(mul_colvec(y, gamma), beta);
    if (x.ndim() == 3) y = reshape(y, orig);
    return y;
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// Gated recurrent unit, gate order (r, z, n) in the stacked weights.
// Whole GRU recurrence as a single graph node. xp is the precomputed x-side
// projection x*W_ih^T + b_ih; the reverse sweep replays the saved gate
// activations instead of taxing the graph with per-step ops.
inline Tensor gru_scan(const Tensor& xp, const Tensor& W_hh, const Tensor& b_hh, int64_t H) {
  int64_t T = xp.size(0);
  if (xp.size(1) != 3 * H || W_hh.size(0) != 3 * H || W_hh.size(1) != H ||
      b_hh.numel() != 3 * H)
    throw ShapeError("gru_scan: inconsistent shapes");
  const size_t TH = static_cast<size_t>(T * H);
  // saved planes: r, z, n, hp_n, h
  auto saved = std::make_shared<std::vector<double>>(TH * 5);
  double* R = saved->data();
  double* Z = R + TH;
  double* N = Z + TH;
  double* HPN = N + TH;
  double* HS = HPN + TH;
  std::vector<double> out(TH);
  {
    detail::ConstMatMap W(W_hh.data().data(), 3 * H, H);
    const double* xpv = xp.data().data();
    const double* bv = b_hh.data().data();
    Eigen::VectorXd h = Eigen::VectorXd::Zero(H), hp(3 * H);
    for (int64_t t = 0; t < T; ++t) {
      hp.noalias() = W * h;
      const double* xt = xpv + t * 3 * H;
      double* ht = out.data() + t * H;
      for (int64_t j = 0; j < H; ++j) {
        size_t tj = static_cast<size_t>(t * H + j);
        double r = 1.0 / (1.0 + std::exp(-(xt[j] + hp[j] + bv[j])));
        double z = 1.0 / (1.0 + std::exp(-(xt[H + j] + hp[H + j] + bv[H + j])));
        double hpn = hp[2 * H + j] + bv[2 * H + j];
        double n = std::tanh(xt[2 * H + j] + r * hpn);
        R[tj] = r;
        Z[tj] = z;
        N[tj] = n;
        HPN[tj] = hpn;
        ht[j] = (1.0 - z) * n + z * h[j];
      }
      for (int64_t j = 0; j < H; ++j) h[j] = ht[j];
      std::memcpy(HS + t * H, ht, static_cast<size_t>(H) * sizeof(double));
    }
  }
  NodePtr px = xp.node(), pw = W_hh.node(), pb = b_hh.node();
  return detail::make_op(
      {T, H}, std::move(out), {px, pw, pb},
      [px, pw, pb, saved, T, H](const std::vector<double>& g, GradStore& gs) {
        const size_t TH = static_cast<size_t>(T * H);
        const double* R = saved->data();
        const double* Z = R + TH;
        const double* N = Z + TH;
        const double* HPN = N + TH;
        const double* HS = HPN + TH;
        detail::ConstMatMap W(pw->data->data(), 3 * H, H);
        std::vector<double> dxp(TH * 3, 0.0), dW(static_cast<size_t>(3 * H * H), 0.0),
            db(static_cast<size_t>(3 * H), 0.0);
        detail::MatMap dWm(dW.data(), 3 * H, H);
        Eigen::VectorXd dh = Eigen::VectorXd::Zero(H), dhp(3 * H), hprev(H);
        for (int64_t t = T - 1; t >= 0; --t) {
          for (int64_t j = 0; j < H; ++j) {
            hprev[j] = t > 0 ? HS[(t - 1) * H + j] : 0.0;
            dh[j] += g[static_cast<size_t>(t * H + j)];
          }
          for (int64_t j = 0; j < H; ++j) {
            size_t tj = static_cast<size_t>(t * H + j);
            double r = R[tj], z = Z[tj], n = N[tj], hpn = HPN[tj];
            double dz = dh[j] * (hprev[j] - n);
            double dn = dh[j] * (1.0 - z);
            double dn_pre = dn * (1.0 - n * n);
            double dr = dn_pre * hpn;
            double dr_pre = dr * r * (1.0 - r);
            double dz_pre = dz * z * (1.0 - z);
            dxp[static_cast<size_t>(t * 3 * H + j)] = dr_pre;
            dxp[static_cast<size_t>(t * 3 * H + H + j)] = dz_pre;
            dxp[static_cast<size_t>(t * 3 * H + 2 * H + j)] = dn_pre;
            dhp[j] = dr_pre;
            dhp[H + j] = dz_pre;
            dhp[2 * H + j] = dn_pre * r;
            dh[j] *= z;  // carried term of dh_{t-1}
          }
          for (int64_t j4 = 0; j4 < 3 * H; ++j4) db[static_cast<size_t>(j4)] += dhp[j4];
          if (t > 0) dWm.noalias() += dhp * hprev.transpose();
          dh.noalias() += W.transpose() * dhp;
        }
        gs.accum(px, dxp);
        gs.accum(pw, dW);
        gs.accum(pb, db);
      });
}

// LSTM counterpart of gru_scan, gate order (i, f, g, o).
inline Tensor lstm_scan(const Tensor& xp, const Tensor& W_hh, const Tensor& b_hh, int64_t H) {
  int64_t T = xp.size(0);
  if (xp.size(1) != 4 * H || W_hh.size(0) != 4 * H || W_hh.size(1) != H ||
      b_hh.numel() != 4 * H)
    throw ShapeError("lstm_scan: inconsistent shapes");
  const size_t TH = static_cast<size_t>(T * H);
  // saved planes: i, f, g, o, c, tanh(c)
  auto saved = std::make_shared<std::vector<double>>(TH * 6);
  double* I = saved->data();
  double* F = I + TH;
  double* G = F + TH;
  double* O = G + TH;
  double* C = O + TH;
  double* TC = C + TH;
  std::vector<double> out(TH);
  {
    detail::ConstMatMap W(W_hh.data().data(), 4 * H, H);
    const double* xpv = xp.data().data();
    const double* bv = b_hh.data().data();
    Eigen::VectorXd h = Eigen::VectorXd::Zero(H), c = Eigen::VectorXd::Zero(H), hp(4 * H);
    for (int64_t t = 0; t < T; ++t) {
      hp.noalias() = W * h;
      const double* xt = xpv + t * 4 * H;
      double* ht = out.data() + t * H;
      for (int64_t j = 0; j < H; ++j) {
        size_t tj = static_cast<size_t>(t * H + j);
        double i = 1.0 / (1.0 + std::exp(-(xt[j] + hp[j] + bv[j])));
        double f = 1.0 / (1.0 + std::exp(-(xt[H + j] + hp[H + j] + bv[H + j])));
        double gg = std::tanh(xt[2 * H + j] + hp[2 * H + j] + bv[2 * H + j]);
        double o = 1.0 / (1.0 + std::exp(-(xt[3 * H + j] + hp[3 * H + j] + bv[3 * H + j])));
        double cn = f * c[j] + i * gg;
        double tc = std::tanh(cn);
        I[tj] = i;
        F[tj] = f;
        G[tj] = gg;
        O[tj] = o;
        C[tj] = cn;
        TC[tj] = tc;
        c[j] = cn;
        ht[j] = o * tc;
        h[j] = ht[j];
      }
    }
  }
  NodePtr px = xp.node(), pw = W_hh.node(), pb = b_hh.node();
  return detail::make_op(
      {T, H}, std::move(out), {px, pw, pb},
      [px, pw, pb, saved, T, H](const std::vector<double>& g, GradStore& gs) {
        const size_t TH = static_cast<size_t>(T * H);
        const double* I = saved->data();
        const double* F = I + TH;
        const double* G = F + TH;
        const double* O = G + TH;
        const double* C = O + TH;
        const double* TC = C + TH;
        detail::ConstMatMap W(pw->data->data(), 4 * H, H);
        std::vector<double> dxp(TH * 4, 0.0), dW(static_cast<size_t>(4 * H * H), 0.0),
            db(static_cast<size_t>(4 * H), 0.0);
        detail::MatMap dWm(dW.data(), 4 * H, H);
        Eigen::VectorXd dh = Eigen::VectorXd::Zero(H), dc = Eigen::VectorXd::Zero(H),
                        dg4(4 * H), hprev(H);
        for (int64_t t = T - 1; t >= 0; --t) {
          for (int64_t j = 0; j < H; ++j) {
            // h_{t-1} = o_{t-1} * tanh(c_{t-1}), so no extra plane is saved
            hprev[j] = t > 0 ? O[(t - 1) * H + j] * TC[(t - 1) * H + j] : 0.0;
            dh[j] += g[static_cast<size_t>(t * H + j)];
          }
          for (int64_t j = 0; j < H; ++j) {
            size_t tj = static_cast<size_t>(t * H + j);
            double i = I[tj], f = F[tj], gg = G[tj], o = O[tj], tc = TC[tj];
            double cprev = t > 0 ? C[(t - 1) * H + j] : 0.0;
            double dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
            double do_pre = dh[j] * tc * o * (1.0 - o);
            double di_pre = dct * gg * i * (1.0 - i);
            double df_pre = dct * cprev * f * (1.0 - f);
            double dg_pre = dct * i * (1.0 - gg * gg);
            dg4[j] = di_pre;
            dg4[H + j] = df_pre;
            dg4[2 * H + j] = dg_pre;
            dg4[3 * H + j] = do_pre;
            dxp[static_cast<size_t>(t * 4 * H + j)] = di_pre;
            dxp[static_cast<size_t>(t * 4 * H + H + j)] = df_pre;
            dxp[static_cast<size_t>(t * 4 * H + 2 * H + j)] = dg_pre;
            dxp[static_cast<size_t>(t * 4 * H + 3 * H + j)] = do_pre;
            dc[j] = dct * f;
          }
          for (int64_t j4 = 0; j4 < 4 * H; ++j4) db[static_cast<size_t>(j4)] += dg4[j4];
          if (t > 0) dWm.noalias() += dg4 * hprev.transpose();
          dh.noalias() = W.transpose() * dg4;
        }
        gs.accum(px, dxp);
        gs.accum(pw, dW);
        gs.accum(pb, db);
      });
}

struct Gru {
  Tensor W_ih;  // [3H, in]
  Tensor W_hh;  // [3H, H]
  Tensor b_ih;  // [3H]
  Tensor b_hh;  // [3H]
  int64_t hidden = 0;

  Gru() = default;
  Gru(int64_t in, int64_t h, Rng& rng)
      : W_ih(init::uniform_fan_in({3 * h, in}, h, rng)),
        W_hh(init::uniform_fan_in({3 * h, h}, h, rng)),
        b_ih(init::uniform_fan_in({3 * h}, h, rng)),
        b_hh(init::uniform_fan_in({3 * h}, h, rng)),
        hidden(h) {}

  struct Out {
    Tensor seq;   // [T,H]
    Tensor last;  // [1,H]
  };

  // x [T,in]; the x-side projections for the whole sequence are one gemm
  Out forward(const Tensor& x) const {
    int64_t T = x.size(0), H = hidden;
    Tensor xp = add_rowvec(matmul(x, W_ih, false, true), b_ih);  // [T,3H]
    Tensor seq = gru_scan(xp, W_hh, b_hh, H);
    return {seq, reshape(row(seq, T - 1), {1, H})};
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".W_ih", W_ih});
    out.push_back({prefix + ".W_hh", W_hh});
    out.push_back({prefix + ".b_ih", b_ih});
    out.push_back({prefix + ".b_hh", b_hh});
  }
};

// LSTM, gate order (i, f, g, o) in the stacked weights.
struct Lstm {
  Tensor W_ih;  // [4H, in]
  Tensor W_hh;  // [4H, H]
  Tensor b_ih;  // [4H]
  Tensor b_hh;  // [4H]
  int64_t hidden = 0;

  Lstm() = default;
  Lstm(int64_t in, int64_t h, Rng& rng)
      : W_ih(init::uniform_fan_in({4 * h, in}, h, rng)),
        W_hh(init::uniform_fan_in({4 * h, h}, h, rng)),
        b_ih(init::uniform_fan_in({4 * h}, h, rng)),
        b_hh(init::uniform_fan_in({4 * h}, h, rng)),
        hidden(h) {}

  // x [T,in] -> [T,H]
  Tensor forward(const Tensor& x) const {
    Tensor xp = add_rowvec(matmul(x, W_ih, false, true), b_ih);  // [T,4H]
    return lstm_scan(xp, W_hh, b_hh, hidden);
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".W_ih", W_ih});
    out.push_back({prefix + ".W_hh", W_hh});
    out.push_back({prefix + ".b_ih", b_ih});
    out.push_back({prefix + ".b_hh", b_hh});
  }
};

// Bank of 1-d convolutions with kernel sizes 1..n_kernels, outputs stacked
// along the channel axis.
struct ConvBank {
  std::vector<Conv1d> convs;

  ConvBank() = default;
  ConvBank(int64_t cin, int64_t cout_each, int64_t n_kernels, Rng& rng) {
    for (int64_t k = 1; k <= n_kernels; ++k) convs.emplace_back(cin, cout_each, k, 1, rng);
  }

  // [Cin,T] -> [n_kernels*cout_each, T]
  Tensor forward(const Tensor& x) const {
    std::vector<Tensor> parts;
    parts.reserve(convs.size());
    for (const auto& c : convs) parts.push_back(c.forward(x));
    return concat_rows(parts);
  }

  void collect(const std::string& prefix, ParamList& out) {
    for (size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(prefix + ".k" + std::to_string(i + 1), out);
  }
};

}  // namespace dvc
