#include <catch2/catch_amalgamated.hpp>

#include "dvc/layers.hpp"
#include "oracle_utils.hpp"

using namespace dvc;

namespace {

std::vector<std::vector<double>> as_rows(const Tensor& t) {
  std::vector<std::vector<double>> out(static_cast<size_t>(t.size(0)));
  for (int64_t r = 0; r < t.size(0); ++r) {
    out[static_cast<size_t>(r)].resize(static_cast<size_t>(t.size(1)));
    for (int64_t c = 0; c < t.size(1); ++c) out[static_cast<size_t>(r)][static_cast<size_t>(c)] = t.at(r, c);
  }
  return out;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// plain-loop GRU, written independently of the tensor graph
std::vector<std::vector<double>> gru_ref(const std::vector<std::vector<double>>& x,
                                         const std::vector<std::vector<double>>& w_ih,
                                         const std::vector<std::vector<double>>& w_hh,
                                         const std::vector<double>& b_ih,
                                         const std::vector<double>& b_hh, size_t H) {
  size_t T = x.size(), in = x[0].size();
  std::vector<double> h(H, 0.0);
  std::vector<std::vector<double>> out;
  for (size_t t = 0; t < T; ++t) {
    std::vector<double> xp(3 * H), hp(3 * H);
    for (size_t j = 0; j < 3 * H; ++j) {
      double sx = b_ih[j], sh = b_hh[j];
      for (size_t i = 0; i < in; ++i) sx += w_ih[j][i] * x[t][i];
      for (size_t i = 0; i < H; ++i) sh += w_hh[j][i] * h[i];
      xp[j] = sx;
      hp[j] = sh;
    }
    std::vector<double> h2(H);
    for (size_t u = 0; u < H; ++u) {
      double r = sigm(xp[u] + hp[u]);
      double z = sigm(xp[H + u] + hp[H + u]);
      double n = std::tanh(xp[2 * H + u] + r * hp[2 * H + u]);
      h2[u] = (1.0 - z) * n + z * h[u];
    }
    h = h2;
    out.push_back(h);
  }
  return out;
}

// plain-loop LSTM
std::vector<std::vector<double>> lstm_ref(const std::vector<std::vector<double>>& x,
                                          const std::vector<std::vector<double>>& w_ih,
                                          const std::vector<std::vector<double>>& w_hh,
                                          const std::vector<double>& b_ih,
                                          const std::vector<double>& b_hh, size_t H) {
  size_t T = x.size(), in = x[0].size();
  std::vector<double> h(H, 0.0), c(H, 0.0);
  std::vector<std::vector<double>> out;
  for (size_t t = 0; t < T; ++t) {
    std::vector<double> gate(4 * H);
    for (size_t j = 0; j < 4 * H; ++j) {
      double s = b_ih[j] + b_hh[j];
      for (size_t i = 0; i < in; ++i) s += w_ih[j][i] * x[t][i];
      for (size_t i = 0; i < H; ++i) s += w_hh[j][i] * h[i];
      gate[j] = s;
    }
    for (size_t u = 0; u < H; ++u) {
      double i_g = sigm(gate[u]);
      double f_g = sigm(gate[H + u]);
      double g_g = std::tanh(gate[2 * H + u]);
      double o_g = sigm(gate[3 * H + u]);
      c[u] = f_g * c[u] + i_g * g_g;
      h[u] = o_g * std::tanh(c[u]);
    }
    out.push_back(h);
  }
  return out;
}

Tensor rand_t(std::vector<int64_t> shape, Rng& rng, bool req = true) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::leaf(std::move(shape), std::move(v), req);
}

}  // namespace

TEST_CASE("linear layer forward and gradient") {
  Rng rng(31);
  Linear lin(4, 3, rng);
  Tensor x = rand_t({5, 4}, rng);
  Tensor y = lin.forward(x);
  REQUIRE(y.shape() == std::vector<int64_t>{5, 3});
  // row 0 against a hand loop
  for (int64_t o = 0; o < 3; ++o) {
    double s = lin.b.at(o);
    for (int64_t i = 0; i < 4; ++i) s += lin.W.at(o, i) * x.at(0, i);
    REQUIRE(y.at(0, o) == Catch::Approx(s).epsilon(1e-12));
  }
  auto loss = [&] { return sum_all(square(lin.forward(x))); };
  REQUIRE(oracle::check_gradients(loss, {x, lin.W, lin.b}).ok());
}

TEST_CASE("conv1d same padding and gradient") {
  Rng rng(32);
  SECTION("stride 1 output matches a direct correlation") {
    Conv1d conv(2, 3, 3, 1, rng);
    Tensor x = rand_t({2, 6}, rng, false);
    Tensor y = conv.forward(x);
    REQUIRE(y.shape() == std::vector<int64_t>{3, 6});
    for (int64_t co = 0; co < 3; ++co)
      for (int64_t t = 0; t < 6; ++t) {
        double s = conv.b.at(co);
        for (int64_t ci = 0; ci < 2; ++ci)
          for (int64_t j = 0; j < 3; ++j) {
            int64_t src = t + j - 1;  // pad 1 both sides
            if (src >= 0 && src < 6) s += conv.W.at(co, ci * 3 + j) * x.at(ci, src);
          }
        REQUIRE(y.at(co, t) == Catch::Approx(s).margin(1e-12));
      }
  }
  SECTION("strided output length is ceil(T/stride)") {
    Conv1d conv(1, 1, 4, 2, rng);
    REQUIRE(conv.forward(Tensor::zeros({1, 7})).size(1) == 4);
    REQUIRE(conv.forward(Tensor::zeros({1, 8})).size(1) == 4);
    REQUIRE(conv.forward(Tensor::zeros({1, 9})).size(1) == 5);
  }
  SECTION("gradient") {
    Conv1d conv(2, 3, 3, 2, rng);
    Tensor x = rand_t({2, 7}, rng);
    auto loss = [&] { return sum_all(square(conv.forward(x))); };
    REQUIRE(oracle::check_gradients(loss, {x, conv.W, conv.b}).ok());
  }
}

TEST_CASE("conv2d shape and gradient") {
  Rng rng(33);
  Conv2d conv(2, 3, 3, 3, 2, 2, rng);
  Tensor x = rand_t({2, 7, 6}, rng);
  Tensor y = conv.forward(x);
  REQUIRE(y.shape() == std::vector<int64_t>{3, 4, 3});
  auto loss = [&] { return sum_all(square(conv.forward(x))); };
  REQUIRE(oracle::check_gradients(loss, {x, conv.W, conv.b}).ok());
}

TEST_CASE("channel norm centers and scales each channel") {
  Rng rng(34);
  ChanNorm cn(3);
  Tensor x = rand_t({3, 8}, rng);
  Tensor y = cn.forward(x);
  for (int64_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (int64_t t = 0; t < 8; ++t) m += y.at(c, t);
    m /= 8.0;
    for (int64_t t = 0; t < 8; ++t) v += (y.at(c, t) - m) * (y.at(c, t) - m);
    v /= 8.0;
    REQUIRE(m == Catch::Approx(0.0).margin(1e-10));
    REQUIRE(v == Catch::Approx(1.0).epsilon(1e-3));  // eps in the denominator
  }
  // learnable affine shifts the stats
  cn.gamma.mutable_data() = {2.0, 1.0, 0.5};
  cn.beta.mutable_data() = {1.0, -1.0, 0.0};
  auto loss = [&] { return sum_all(square(cn.forward(x))); };
  REQUIRE(oracle::check_gradients(loss, {x, cn.gamma, cn.beta}).ok());

  SECTION("3d input normalizes over both trailing axes") {
    ChanNorm cn3(2);
    Tensor x3 = rand_t({2, 3, 4}, rng);
    Tensor y3 = cn3.forward(x3);
    REQUIRE(y3.shape() == std::vector<int64_t>{2, 3, 4});
    double m = 0.0;
    for (int64_t i = 0; i < 12; ++i) m += y3.data()[static_cast<size_t>(i)];
    REQUIRE(m / 12.0 == Catch::Approx(0.0).margin(1e-10));
  }
}

TEST_CASE("gru matches the plain-loop reference") {
  Rng rng(35);
  const int64_t in = 3, H = 4, T = 5;
  Gru gru(in, H, rng);
  Tensor x = rand_t({T, in}, rng);
  Tensor seq = gru.forward(x).seq;

  auto ref = gru_ref(as_rows(x), as_rows(gru.W_ih), as_rows(gru.W_hh), gru.b_ih.data(),
                     gru.b_hh.data(), static_cast<size_t>(H));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t u = 0; u < H; ++u)
      REQUIRE(seq.at(t, u) == Catch::Approx(ref[static_cast<size_t>(t)][static_cast<size_t>(u)]).margin(1e-12));

  auto loss = [&] { return sum_all(square(gru.forward(x).seq)); };
  auto res = oracle::check_gradients(loss, {x, gru.W_ih, gru.W_hh, gru.b_ih, gru.b_hh});
  REQUIRE(res.ok());
}

TEST_CASE("gru final state is the last sequence row") {
  Rng rng(36);
  Gru gru(2, 3, rng);
  Tensor x = rand_t({4, 2}, rng, false);
  auto out = gru.forward(x);
  REQUIRE(out.last.shape() == std::vector<int64_t>{1, 3});
  for (int64_t u = 0; u < 3; ++u) REQUIRE(out.last.at(0, u) == out.seq.at(3, u));
}

TEST_CASE("lstm matches the plain-loop reference") {
  Rng rng(37);
  const int64_t in = 3, H = 4, T = 5;
  Lstm lstm(in, H, rng);
  Tensor x = rand_t({T, in}, rng);
  Tensor seq = lstm.forward(x);

  auto ref = lstm_ref(as_rows(x), as_rows(lstm.W_ih), as_rows(lstm.W_hh), lstm.b_ih.data(),
                      lstm.b_hh.data(), static_cast<size_t>(H));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t u = 0; u < H; ++u)
      REQUIRE(seq.at(t, u) == Catch::Approx(ref[static_cast<size_t>(t)][static_cast<size_t>(u)]).margin(1e-12));

  auto loss = [&] { return sum_all(square(lstm.forward(x))); };
  auto res = oracle::check_gradients(loss, {x, lstm.W_ih, lstm.W_hh, lstm.b_ih, lstm.b_hh});
  REQUIRE(res.ok());
}

TEST_CASE("conv bank stacks kernel sizes along channels") {
  Rng rng(38);
  ConvBank bank(2, 3, 4, rng);
  Tensor x = rand_t({2, 6}, rng);
  Tensor y = bank.forward(x);
  REQUIRE(y.shape() == std::vector<int64_t>{12, 6});
  ParamList ps;
  bank.collect("bank", ps);
  REQUIRE(ps.size() == 8);
  REQUIRE(ps[0].name == "bank.k1.W");
  REQUIRE(ps[7].name == "bank.k4.b");
  std::vector<Tensor> leaves{x};
  for (auto& p : ps) leaves.push_back(p.tensor);
  auto loss = [&] { return sum_all(square(bank.forward(x))); };
  REQUIRE(oracle::check_gradients(loss, leaves).ok());
}
