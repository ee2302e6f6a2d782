#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "dvc/dsp.hpp"
#include "oracle_utils.hpp"

using namespace dvc;

namespace {

Waveform sine(double freq, double amp, double seconds = 1.0) {
  Waveform w;
  size_t n = static_cast<size_t>(seconds * kSampleRate);
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i)
    w.samples[i] = amp * std::sin(kTwoPi * freq * static_cast<double>(i) / kSampleRate);
  return w;
}

Waveform noise(double amp, uint64_t seed, double seconds = 1.0) {
  Rng rng(seed);
  Waveform w;
  w.samples.resize(static_cast<size_t>(seconds * kSampleRate));
  for (auto& s : w.samples) s = amp * rng.uniform(-1.0, 1.0);
  return w;
}

// harmonic-rich voiced signal with a slow envelope
Waveform speech_like(uint64_t seed) {
  Rng rng(seed);
  Waveform w;
  size_t n = kSampleRate;
  w.samples.assign(n, 0.0);
  double f0 = 150.0;
  for (int h = 1; h <= 12; ++h) {
    double phase = rng.uniform(0.0, kTwoPi);
    double amp = 0.3 / h;
    for (size_t i = 0; i < n; ++i)
      w.samples[i] += amp * std::sin(kTwoPi * f0 * h * static_cast<double>(i) / kSampleRate + phase);
  }
  for (size_t i = 0; i < n; ++i)
    w.samples[i] *= 0.6 + 0.4 * std::sin(kTwoPi * 2.3 * static_cast<double>(i) / kSampleRate);
  return w;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(a.size());
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("fft matches the naive dft oracle") {
  Rng rng(41);
  for (size_t n : {8u, 64u, 1024u}) {
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    std::vector<std::complex<double>> a(n);
    for (size_t i = 0; i < n; ++i) a[i] = {x[i], 0.0};
    fft(a);
    auto ref = oracle::naive_dft(x);
    for (size_t k = 0; k < n; ++k) {
      REQUIRE(a[k].real() == Catch::Approx(ref[k].real()).margin(1e-9 * static_cast<double>(n)));
      REQUIRE(a[k].imag() == Catch::Approx(ref[k].imag()).margin(1e-9 * static_cast<double>(n)));
    }
  }
}

TEST_CASE("ifft inverts fft") {
  Rng rng(42);
  std::vector<std::complex<double>> a(256);
  for (auto& v : a) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  auto orig = a;
  fft(a);
  ifft(a);
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].real() == Catch::Approx(orig[i].real()).margin(1e-12));
    REQUIRE(a[i].imag() == Catch::Approx(orig[i].imag()).margin(1e-12));
  }
}

TEST_CASE("frame count is ceil(len/hop) rounded up to even") {
  auto T = [](size_t len) { return mel_spectrogram({std::vector<double>(len, 0.0)}).T; };
  REQUIRE(T(16000) == 100);           // exactly 100 frames
  REQUIRE(T(16001) == 102);           // 101 -> even
  REQUIRE(T(15999) == 100);
  REQUIRE(T(7201) == 46);             // ceil = 46
  REQUIRE(T(7200) == 46);             // ceil = 45 -> even
  REQUIRE_THROWS_AS(mel_spectrogram({std::vector<double>(200, 0.0)}), DataError);
}

TEST_CASE("mel of silence sits exactly on the log floor") {
  MelSpectrogram m = mel_spectrogram({std::vector<double>(16000, 0.0)});
  for (double v : m.frames) REQUIRE(v == std::log(1e-5));
}

TEST_CASE("1 kHz sine peaks in the mel band containing 1 kHz") {
  MelSpectrogram m = mel_spectrogram(sine(1000.0, 0.5));
  // independent reconstruction of the band edges
  auto hz2mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto mel2hz = [](double mm) { return 700.0 * (std::pow(10.0, mm / 2595.0) - 1.0); };
  double lo = hz2mel(80.0), hi = hz2mel(7600.0);
  std::vector<double> pts(82);
  for (int i = 0; i < 82; ++i) pts[static_cast<size_t>(i)] = mel2hz(lo + (hi - lo) * i / 81.0);
  std::vector<int64_t> containing;  // triangles whose support covers 1 kHz
  for (int64_t b = 0; b < 80; ++b)
    if (pts[static_cast<size_t>(b)] < 1000.0 && 1000.0 < pts[static_cast<size_t>(b + 2)])
      containing.push_back(b);
  REQUIRE_FALSE(containing.empty());
  for (int64_t t = 2; t < m.T - 2; ++t) {
    int64_t arg = 0;
    for (int64_t b = 1; b < 80; ++b)
      if (m.at(t, b) > m.at(t, arg)) arg = b;
    REQUIRE(std::find(containing.begin(), containing.end(), arg) != containing.end());
  }
}

TEST_CASE("stft frame energy matches the naive dft oracle") {
  Waveform w = noise(0.5, 43);
  int64_t T = 100;
  // reproduce the window/framing arithmetic independently
  std::vector<double> padded = w.samples;
  size_t need = static_cast<size_t>((T - 1) * 160 + 400);
  size_t i = 1;
  while (padded.size() < need) padded.push_back(w.samples[w.samples.size() - 1 - i++]);

  MelSpectrogram m = mel_spectrogram(w);  // same T by construction
  REQUIRE(m.T == T);

  Rng rng(44);
  for (int trial = 0; trial < 3; ++trial) {
    int64_t t = 2 + rng.randint(T - 4);
    std::vector<double> xw(1024, 0.0);
    double time_energy = 0.0;
    for (int64_t j = 0; j < 400; ++j) {
      double win = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(j) / 400.0);
      xw[static_cast<size_t>(j)] = padded[static_cast<size_t>(t * 160 + j)] * win;
      time_energy += xw[static_cast<size_t>(j)] * xw[static_cast<size_t>(j)];
    }
    auto spec = oracle::naive_dft(xw);
    double freq_energy = 0.0;
    for (const auto& c : spec) freq_energy += std::norm(c);
    freq_energy /= 1024.0;
    // Parseval: windowed time energy equals spectral energy / N
    REQUIRE(freq_energy == Catch::Approx(time_energy).epsilon(0.05));
  }
}

TEST_CASE("yin finds a 220 Hz sine within 2 Hz") {
  F0Contour f0 = extract_f0(sine(220.0, 0.4));
  std::vector<double> voiced;
  for (double hz : f0.hz)
    if (hz > 0.0) voiced.push_back(hz);
  REQUIRE(voiced.size() > f0.hz.size() * 8 / 10);
  std::sort(voiced.begin(), voiced.end());
  double median = voiced[voiced.size() / 2];
  REQUIRE(std::abs(median - 220.0) < 2.0);
}

TEST_CASE("yin calls low-level noise unvoiced") {
  F0Contour f0 = extract_f0(noise(0.02, 45));
  size_t unvoiced = 0;
  for (double hz : f0.hz)
    if (hz == 0.0) ++unvoiced;
  REQUIRE(unvoiced >= f0.hz.size() * 9 / 10);
}

TEST_CASE("yin calls silence unvoiced") {
  F0Contour f0 = extract_f0({std::vector<double>(16000, 0.0)});
  for (double hz : f0.hz) REQUIRE(hz == 0.0);
}

TEST_CASE("mel and f0 agree on the frame count") {
  for (size_t len : {16000u, 16001u, 9333u, 12800u}) {
    Waveform w = noise(0.1, len);
    REQUIRE(mel_spectrogram(w).T == static_cast<int64_t>(extract_f0(w).hz.size()));
  }
}

TEST_CASE("f0 log normalization definitions and round trip") {
  SpeakerF0Stats st;
  st.mean_log_f0 = std::log(180.0);
  st.std_log_f0 = 0.25;
  st.n_voiced_frames = 100;

  F0Contour c;
  c.hz = {180.0, 180.0 * std::exp(0.25), 0.0, 90.0};
  auto z = log_normalize_f0(c, st);
  REQUIRE(z[0] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(z[1] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(z[2] == 0.0);

  auto back = denormalize_f0(z, st, {true, true, false, true});
  for (size_t i = 0; i < c.hz.size(); ++i)
    REQUIRE(back.hz[i] == Catch::Approx(c.hz[i]).margin(1e-12));

  SpeakerF0Stats bad;
  REQUIRE_THROWS_AS(log_normalize_f0(c, bad), DataError);
}

TEST_CASE("normalizing with own empirical stats gives zero mean unit std") {
  Rng rng(46);
  std::vector<F0Contour> contours(4);
  for (auto& c : contours) {
    c.hz.resize(50);
    for (auto& hz : c.hz) hz = rng.uniform() < 0.2 ? 0.0 : rng.uniform(120.0, 300.0);
  }
  std::vector<const F0Contour*> ptrs;
  for (auto& c : contours) ptrs.push_back(&c);
  SpeakerF0Stats st = compute_f0_stats(ptrs);
  REQUIRE(st.valid());

  double sum = 0.0, sq = 0.0;
  int64_t n = 0;
  for (auto& c : contours)
    for (double z : log_normalize_f0(c, st))
      if (z != 0.0 || false) {  // voiced frames only; exact-zero voiced z has measure zero here
        sum += z;
        sq += z * z;
        ++n;
      }
  double mean = sum / static_cast<double>(n);
  double stddev = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  REQUIRE(mean == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(stddev == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("lg conversion closed forms") {
  SpeakerF0Stats src{std::log(200.0), 0.1, 10};
  SpeakerF0Stats tgt{std::log(100.0), 0.1, 10};
  F0Contour c;
  c.hz = {200.0, 0.0};
  F0Contour out = lg_convert_f0(c, src, tgt);
  REQUIRE(out.hz[0] == Catch::Approx(100.0).margin(1e-9));
  REQUIRE(out.hz[1] == 0.0);

  F0Contour same = lg_convert_f0(c, src, src);
  REQUIRE(same.hz[0] == Catch::Approx(200.0).margin(1e-9));
}

TEST_CASE("lg conversion lands on the target moments") {
  Rng rng(47);
  F0Contour c;
  c.hz.resize(400);
  for (auto& hz : c.hz) hz = rng.uniform() < 0.25 ? 0.0 : std::exp(rng.uniform(4.8, 5.8));
  SpeakerF0Stats src = compute_f0_stats({&c});
  SpeakerF0Stats tgt{std::log(140.0), 0.31, 99};
  F0Contour out = lg_convert_f0(c, src, tgt);
  SpeakerF0Stats got = compute_f0_stats({&out});
  REQUIRE(got.mean_log_f0 == Catch::Approx(tgt.mean_log_f0).margin(1e-9));
  REQUIRE(got.std_log_f0 == Catch::Approx(tgt.std_log_f0).margin(1e-9));
}

TEST_CASE("griffin-lim of silence is near-silent") {
  MelSpectrogram m = mel_spectrogram({std::vector<double>(16000, 0.0)});
  Waveform w = griffin_lim(m);
  double rms = 0.0;
  for (double s : w.samples) rms += s * s;
  rms = std::sqrt(rms / static_cast<double>(w.samples.size()));
  REQUIRE(rms < 1e-3);
}

TEST_CASE("griffin-lim of a 1 kHz sine peaks within one bin of 1 kHz") {
  Waveform w = griffin_lim(mel_spectrogram(sine(1000.0, 0.5)));
  size_t n = 16384;
  std::vector<double> x(n, 0.0);
  for (size_t i = 0; i < std::min(n, w.samples.size()); ++i) x[i] = w.samples[i];
  auto spec = oracle::naive_dft(x);
  size_t arg = 1;
  for (size_t k = 1; k < n / 2; ++k)
    if (std::abs(spec[k]) > std::abs(spec[arg])) arg = k;
  double peak_hz = static_cast<double>(arg) * kSampleRate / static_cast<double>(n);
  double bin_hz = static_cast<double>(kSampleRate) / kNfft;  // analysis grid
  REQUIRE(std::abs(peak_hz - 1000.0) <= bin_hz);
}

TEST_CASE("griffin-lim round trip correlates with the input mel") {
  MelSpectrogram m = mel_spectrogram(speech_like(48));
  Waveform w = griffin_lim(m);
  w.samples.resize(16000);  // keep the framing grid
  MelSpectrogram m2 = mel_spectrogram(w);
  REQUIRE(m2.T == m.T);
  double total_r = 0.0;
  int64_t counted = 0;
  for (int64_t t = 2; t < m.T - 2; ++t) {
    std::vector<double> a(80), b(80);
    for (int64_t i = 0; i < 80; ++i) {
      a[static_cast<size_t>(i)] = m.at(t, i);
      b[static_cast<size_t>(i)] = m2.at(t, i);
    }
    total_r += pearson(a, b);
    ++counted;
  }
  REQUIRE(total_r / static_cast<double>(counted) > 0.9);
}

TEST_CASE("wav round trip is bit exact") {
  Rng rng(49);
  Waveform w;
  w.samples.resize(5000);
  for (auto& s : w.samples)
    s = static_cast<double>(static_cast<int16_t>(rng.next_u64() & 0xffff)) / 32768.0;
  std::string path = temp_path("dvc_test_rt.wav");
  save_wav(w, path);
  Waveform r = load_wav(path);
  REQUIRE(r.samples.size() == w.samples.size());
  for (size_t i = 0; i < w.samples.size(); ++i) REQUIRE(r.samples[i] == w.samples[i]);
  std::filesystem::remove(path);
}

TEST_CASE("wav loader rejects wrong formats") {
  std::string path = temp_path("dvc_test_bad.wav");
  auto write_header = [&](uint16_t fmt, uint16_t ch, uint32_t rate, uint16_t bits) {
    std::ofstream f(path, std::ios::binary);
    auto u32 = [&](uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); };
    auto u16 = [&](uint16_t v) { f.write(reinterpret_cast<char*>(&v), 2); };
    f.write("RIFF", 4);
    u32(36);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    u32(16);
    u16(fmt);
    u16(ch);
    u32(rate);
    u32(rate * ch * bits / 8);
    u16(static_cast<uint16_t>(ch * bits / 8));
    u16(bits);
    f.write("data", 4);
    u32(0);
  };
  write_header(1, 2, 16000, 16);
  REQUIRE_THROWS_AS(load_wav(path), DataError);
  write_header(1, 1, 22050, 16);
  REQUIRE_THROWS_AS(load_wav(path), DataError);
  write_header(1, 1, 16000, 8);
  REQUIRE_THROWS_AS(load_wav(path), DataError);
  write_header(3, 1, 16000, 16);
  REQUIRE_THROWS_AS(load_wav(path), DataError);
  {
    std::ofstream f(path, std::ios::binary);
    f.write("garbage", 7);
  }
  REQUIRE_THROWS_AS(load_wav(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("feature files round trip and validate") {
  Rng rng(50);
  MelSpectrogram m;
  m.T = 6;
  m.frames.resize(6 * 80);
  for (auto& v : m.frames) v = rng.uniform(std::log(1e-5), 2.0);
  F0Contour f0;
  f0.hz = {0.0, 120.5, 130.25, 0.0, 99.0, 101.0};

  std::string path = temp_path("dvc_test_feat.bin");
  write_features(path, m, &f0);
  FeatureFile r = read_features(path);
  REQUIRE(r.mel.T == 6);
  REQUIRE(r.f0.has_value());
  for (size_t i = 0; i < m.frames.size(); ++i)
    REQUIRE(r.mel.frames[i] == static_cast<double>(static_cast<float>(m.frames[i])));
  for (size_t i = 0; i < 6; ++i)
    REQUIRE(r.f0->hz[i] == static_cast<double>(static_cast<float>(f0.hz[i])));

  write_features(path, m, nullptr);
  REQUIRE_FALSE(read_features(path).f0.has_value());

  {
    std::ofstream f(path, std::ios::binary);
    f.write("DVC2", 4);
  }
  REQUIRE_THROWS_AS(read_features(path), DataError);
  write_features(path, m, &f0);
  {
    std::filesystem::resize_file(path, 100);  // truncate
  }
  REQUIRE_THROWS_AS(read_features(path), DataError);
  std::filesystem::remove(path);
}
