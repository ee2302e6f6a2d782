#pragma once

#include <complex>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>

#include <Eigen/Dense>

#include "dvc/common.hpp"

namespace dvc {

constexpr int kSampleRate = 16000;
constexpr int64_t kWinLen = 400;   // 25 ms
constexpr int64_t kHopLen = 160;   // 10 ms
constexpr int64_t kNfft = 1024;
constexpr int64_t kNumMels = 80;
constexpr double kMelLoHz = 80.0;
constexpr double kMelHiHz = 7600.0;
constexpr double kLogFloor = 1e-5;
constexpr int64_t kYinWin = 1024;
constexpr double kF0MinHz = 50.0;
constexpr double kF0MaxHz = 600.0;
constexpr double kYinThreshold = 0.15;
constexpr int kGriffinLimIters = 60;

struct Waveform {
  std::vector<double> samples;  // [-1, 1]
  int sample_rate = kSampleRate;
};

struct MelSpectrogram {
  int64_t T = 0;
  std::vector<double> frames;  // row-major T x 80, natural-log mel magnitudes
  double frame_hop_s = static_cast<double>(kHopLen) / kSampleRate;
  double frame_len_s = static_cast<double>(kWinLen) / kSampleRate;

  double at(int64_t t, int64_t m) const { return frames[static_cast<size_t>(t * kNumMels + m)]; }
};

struct F0Contour {
  std::vector<double> hz;  // 0.0 marks an unvoiced frame
};

struct SpeakerF0Stats {
  double mean_log_f0 = 0.0;
  double std_log_f0 = 0.0;
  int64_t n_voiced_frames = 0;

  bool valid() const { return n_voiced_frames > 0 && std_log_f0 > 0.0; }
};

// ---- WAV I/O: RIFF PCM, mono, 16-bit LE, 16 kHz, nothing else ----

namespace detail {

inline uint32_t read_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
inline uint16_t read_u16le(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | p[1] << 8);
}

}  // namespace detail

inline Waveform load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open wav file: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 44 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0)
    throw DataError("not a RIFF/WAVE file: " + path);

  size_t pos = 12;
  bool have_fmt = false;
  size_t data_off = 0, data_len = 0;
  while (pos + 8 <= raw.size()) {
    uint32_t chunk_len = detail::read_u32le(&raw[pos + 4]);
    if (std::memcmp(&raw[pos], "fmt ", 4) == 0) {
      if (pos + 8 + 16 > raw.size()) throw DataError("truncated fmt chunk: " + path);
      uint16_t fmt = detail::read_u16le(&raw[pos + 8]);
      uint16_t channels = detail::read_u16le(&raw[pos + 10]);
      uint32_t rate = detail::read_u32le(&raw[pos + 12]);
      uint16_t bits = detail::read_u16le(&raw[pos + 22]);
      if (fmt != 1) throw DataError("wav is not integer PCM: " + path);
      if (channels != 1) throw DataError("wav has " + std::to_string(channels) +
                                         " channels, need mono: " + path);
      if (rate != kSampleRate)
        throw DataError("wav sample rate " + std::to_string(rate) + ", need 16000: " + path);
      if (bits != 16) throw DataError("wav is " + std::to_string(bits) + "-bit, need 16: " + path);
      have_fmt = true;
    } else if (std::memcmp(&raw[pos], "data", 4) == 0) {
      data_off = pos + 8;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }
  if (!have_fmt || data_off == 0) throw DataError("wav missing fmt or data chunk: " + path);
  if (data_off + data_len > raw.size()) throw DataError("wav data chunk truncated: " + path);

  Waveform w;
  size_t n = data_len / 2;
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    int16_t s = static_cast<int16_t>(raw[data_off + 2 * i] | raw[data_off + 2 * i + 1] << 8);
    w.samples[i] = static_cast<double>(s) / 32768.0;
  }
  return w;
}

inline void save_wav(const Waveform& w, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write wav file: " + path);
  uint32_t data_len = static_cast<uint32_t>(w.samples.size() * 2);
  uint32_t riff_len = 36 + data_len;
  auto u32 = [&](uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  auto u16 = [&](uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    f.write(reinterpret_cast<char*>(b), 2);
  };
  f.write("RIFF", 4);
  u32(riff_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(kSampleRate);
  u32(kSampleRate * 2);  // byte rate
  u16(2);                // block align
  u16(16);               // bits
  f.write("data", 4);
  u32(data_len);
  for (double x : w.samples) {
    long v = std::lrint(std::min(1.0, std::max(-1.0, x)) * 32768.0);
    int16_t s = static_cast<int16_t>(std::min(32767L, std::max(-32768L, v)));
    u16(static_cast<uint16_t>(s));
  }
}

// ---- FFT ----

namespace detail {

inline const std::vector<std::complex<double>>& twiddles(size_t n) {
  thread_local std::vector<std::complex<double>> table;
  thread_local size_t table_n = 0;
  if (table_n != n) {
    table.resize(n / 2);
    for (size_t i = 0; i < n / 2; ++i) {
      double ang = -kTwoPi * static_cast<double>(i) / static_cast<double>(n);
      table[i] = {std::cos(ang), std::sin(ang)};
    }
    table_n = n;
  }
  return table;
}

}  // namespace detail

// in-place radix-2 FFT, n must be a power of two
inline void fft(std::vector<std::complex<double>>& a) {
  size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw NumericError("fft size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& tw = detail::twiddles(n);
  for (size_t len = 2; len <= n; len <<= 1) {
    size_t step = n / len;
    for (size_t i = 0; i < n; i += len) {
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * tw[k * step];
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

inline void ifft(std::vector<std::complex<double>>& a) {
  for (auto& x : a) x = std::conj(x);
  fft(a);
  double inv = 1.0 / static_cast<double>(a.size());
  for (auto& x : a) x = std::conj(x) * inv;
}

// ---- framing ----

namespace detail {

// periodic Hann
inline const std::vector<double>& hann_window() {
  thread_local std::vector<double> w;
  if (w.empty()) {
    w.resize(static_cast<size_t>(kWinLen));
    for (int64_t i = 0; i < kWinLen; ++i)
      w[static_cast<size_t>(i)] =
          0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(kWinLen));
  }
  return w;
}

// frame count the whole front-end agrees on: ceil(len/hop), forced even
inline int64_t frame_count(size_t len) {
  int64_t t = (static_cast<int64_t>(len) + kHopLen - 1) / kHopLen;
  if (t < 2) t = 2;
  if (t % 2 != 0) ++t;
  return t;
}

// extend to target_len, mirroring the tail (no edge repeat), zeros if the
// mirror runs out
inline std::vector<double> reflect_pad(const std::vector<double>& x, size_t target_len) {
  std::vector<double> out(x);
  out.reserve(target_len);
  size_t i = 1;
  while (out.size() < target_len) {
    if (i < x.size())
      out.push_back(x[x.size() - 1 - i]);
    else
      out.push_back(0.0);
    ++i;
  }
  return out;
}

// T frames of the 513-bin magnitude spectrum; x must cover (T-1)*hop+win
inline std::vector<std::vector<std::complex<double>>> stft_raw(const std::vector<double>& x,
                                                               int64_t T) {
  const auto& win = hann_window();
  std::vector<std::vector<std::complex<double>>> frames(static_cast<size_t>(T));
  std::vector<std::complex<double>> buf(static_cast<size_t>(kNfft));
  for (int64_t t = 0; t < T; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    size_t start = static_cast<size_t>(t * kHopLen);
    for (int64_t i = 0; i < kWinLen; ++i)
      buf[static_cast<size_t>(i)] = x[start + static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
    fft(buf);
    frames[static_cast<size_t>(t)].assign(buf.begin(), buf.begin() + kNfft / 2 + 1);
  }
  return frames;
}

// overlap-add inverse with squared-window normalization
inline std::vector<double> istft_raw(const std::vector<std::vector<std::complex<double>>>& frames) {
  const auto& win = hann_window();
  int64_t T = static_cast<int64_t>(frames.size());
  size_t out_len = static_cast<size_t>((T - 1) * kHopLen + kWinLen);
  std::vector<double> out(out_len, 0.0);
  std::vector<double> norm(out_len, 0.0);
  std::vector<std::complex<double>> buf(static_cast<size_t>(kNfft));
  for (int64_t t = 0; t < T; ++t) {
    const auto& half = frames[static_cast<size_t>(t)];
    for (int64_t k = 0; k <= kNfft / 2; ++k) buf[static_cast<size_t>(k)] = half[static_cast<size_t>(k)];
    for (int64_t k = kNfft / 2 + 1; k < kNfft; ++k)
      buf[static_cast<size_t>(k)] = std::conj(half[static_cast<size_t>(kNfft - k)]);
    ifft(buf);
    size_t start = static_cast<size_t>(t * kHopLen);
    for (int64_t i = 0; i < kWinLen; ++i) {
      out[start + static_cast<size_t>(i)] += buf[static_cast<size_t>(i)].real() * win[static_cast<size_t>(i)];
      norm[start + static_cast<size_t>(i)] += win[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
    }
  }
  for (size_t i = 0; i < out_len; ++i)
    if (norm[i] > 1e-10) out[i] /= norm[i];
  return out;
}

}  // namespace detail

// ---- mel filterbank ----

namespace detail {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// [80 x 513] triangular filters, peak 1, HTK mel scale
inline const Eigen::MatrixXd& mel_filterbank() {
  static const Eigen::MatrixXd fb = [] {
    int64_t n_bins = kNfft / 2 + 1;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(kNumMels, n_bins);
    double mel_lo = hz_to_mel(kMelLoHz), mel_hi = hz_to_mel(kMelHiHz);
    std::vector<double> hz_pts(static_cast<size_t>(kNumMels) + 2);
    for (size_t i = 0; i < hz_pts.size(); ++i)
      hz_pts[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                         static_cast<double>(kNumMels + 1));
    for (int64_t b = 0; b < kNumMels; ++b) {
      double lo = hz_pts[static_cast<size_t>(b)], c = hz_pts[static_cast<size_t>(b) + 1],
             hi = hz_pts[static_cast<size_t>(b) + 2];
      for (int64_t k = 0; k < n_bins; ++k) {
        double f = static_cast<double>(k) * kSampleRate / kNfft;
        if (f > lo && f < c)
          m(b, k) = (f - lo) / (c - lo);
        else if (f >= c && f < hi)
          m(b, k) = (hi - f) / (hi - c);
      }
    }
    return m;
  }();
  return fb;
}

}  // namespace detail

// Hann 400 / hop 160 / FFT 1024 magnitude STFT, 80-band mel (80-7600 Hz),
// natural log with floor 1e-5. T = ceil(len/hop) rounded up to even.
inline MelSpectrogram mel_spectrogram(const Waveform& w) {
  if (static_cast<int64_t>(w.samples.size()) < kWinLen)
    throw DataError("waveform shorter than one analysis window (" + std::to_string(kWinLen) +
                    " samples)");
  int64_t T = detail::frame_count(w.samples.size());
  size_t need = static_cast<size_t>((T - 1) * kHopLen + kWinLen);
  std::vector<double> x = detail::reflect_pad(w.samples, need);
  auto frames = detail::stft_raw(x, T);

  const Eigen::MatrixXd& fb = detail::mel_filterbank();
  int64_t n_bins = kNfft / 2 + 1;
  Eigen::MatrixXd mag(n_bins, T);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t k = 0; k < n_bins; ++k)
      mag(k, t) = std::abs(frames[static_cast<size_t>(t)][static_cast<size_t>(k)]);
  Eigen::MatrixXd mel = fb * mag;  // [80, T]

  MelSpectrogram out;
  out.T = T;
  out.frames.resize(static_cast<size_t>(T * kNumMels));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t b = 0; b < kNumMels; ++b)
      out.frames[static_cast<size_t>(t * kNumMels + b)] = std::log(std::max(mel(b, t), kLogFloor));
  return out;
}

// ---- YIN pitch tracking ----

namespace detail {

// one YIN frame: difference function over a fixed integration window,
// cumulative mean normalization, absolute threshold, parabolic refinement
inline double yin_frame(const double* x, int64_t n_avail) {
  const int64_t W = kYinWin;
  const int64_t half = W / 2;
  int64_t tau_min = static_cast<int64_t>(kSampleRate / kF0MaxHz);          // 26
  int64_t tau_max = static_cast<int64_t>(std::ceil(kSampleRate / kF0MinHz));  // 320
  if (n_avail < W) return 0.0;  // not enough signal, call it unvoiced

  std::vector<double> d(static_cast<size_t>(tau_max) + 2, 0.0);
  for (int64_t tau = 1; tau <= tau_max + 1; ++tau) {
    double acc = 0.0;
    for (int64_t j = 0; j < half; ++j) {
      double diff = x[j] - x[j + tau];
      acc += diff * diff;
    }
    d[static_cast<size_t>(tau)] = acc;
  }
  // cumulative-mean normalization
  std::vector<double> cmnd(d.size(), 1.0);
  double running = 0.0;
  for (int64_t tau = 1; tau <= tau_max + 1; ++tau) {
    running += d[static_cast<size_t>(tau)];
    cmnd[static_cast<size_t>(tau)] =
        running > 0.0 ? d[static_cast<size_t>(tau)] * static_cast<double>(tau) / running : 1.0;
  }
  // first dip under threshold, then descend to its local minimum
  int64_t tau = -1;
  for (int64_t t = tau_min; t <= tau_max; ++t) {
    if (cmnd[static_cast<size_t>(t)] < kYinThreshold) {
      while (t + 1 <= tau_max && cmnd[static_cast<size_t>(t) + 1] < cmnd[static_cast<size_t>(t)]) ++t;
      tau = t;
      break;
    }
  }
  if (tau < 0) return 0.0;

  double better = static_cast<double>(tau);
  if (tau > 1 && tau < tau_max + 1) {
    double s0 = cmnd[static_cast<size_t>(tau) - 1];
    double s1 = cmnd[static_cast<size_t>(tau)];
    double s2 = cmnd[static_cast<size_t>(tau) + 1];
    double denom = 2.0 * (2.0 * s1 - s2 - s0);
    if (std::abs(denom) > 1e-12) better += (s2 - s0) / denom;
  }
  double f0 = kSampleRate / better;
  return std::min(kF0MaxHz, std::max(kF0MinHz, f0));
}

}  // namespace detail

// YIN on the same hop grid as mel_spectrogram; entry 0 means unvoiced
inline F0Contour extract_f0(const Waveform& w) {
  if (static_cast<int64_t>(w.samples.size()) < kWinLen)
    throw DataError("waveform shorter than one analysis window");
  int64_t T = detail::frame_count(w.samples.size());
  // the pitch window is longer than the mel window; pad for the last frames
  size_t need = static_cast<size_t>((T - 1) * kHopLen + kYinWin + kYinWin / 2 + 2);
  std::vector<double> x = detail::reflect_pad(w.samples, need);
  F0Contour out;
  out.hz.resize(static_cast<size_t>(T));
  for (int64_t t = 0; t < T; ++t) {
    size_t start = static_cast<size_t>(t * kHopLen);
    out.hz[static_cast<size_t>(t)] =
        detail::yin_frame(x.data() + start, static_cast<int64_t>(x.size() - start));
  }
  return out;
}

// ---- F0 statistics and transforms ----

inline SpeakerF0Stats compute_f0_stats(const std::vector<const F0Contour*>& contours) {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto* c : contours)
    for (double hz : c->hz)
      if (hz > 0.0) {
        sum += std::log(hz);
        ++n;
      }
  SpeakerF0Stats s;
  s.n_voiced_frames = n;
  if (n == 0) return s;
  s.mean_log_f0 = sum / static_cast<double>(n);
  double var = 0.0;
  for (const auto* c : contours)
    for (double hz : c->hz)
      if (hz > 0.0) {
        double d = std::log(hz) - s.mean_log_f0;
        var += d * d;
      }
  s.std_log_f0 = std::sqrt(var / static_cast<double>(n));
  return s;
}

// voiced -> (ln f0 - mean)/std, unvoiced -> 0; this is the pitch input track
inline std::vector<double> log_normalize_f0(const F0Contour& f0, const SpeakerF0Stats& stats) {
  if (!stats.valid()) throw DataError("invalid F0 stats (no voiced frames or zero variance)");
  std::vector<double> z(f0.hz.size(), 0.0);
  for (size_t i = 0; i < f0.hz.size(); ++i)
    if (f0.hz[i] > 0.0) z[i] = (std::log(f0.hz[i]) - stats.mean_log_f0) / stats.std_log_f0;
  return z;
}

inline F0Contour denormalize_f0(const std::vector<double>& z, const SpeakerF0Stats& stats,
                                const std::vector<bool>& voiced) {
  if (!stats.valid()) throw DataError("invalid F0 stats (no voiced frames or zero variance)");
  F0Contour out;
  out.hz.resize(z.size(), 0.0);
  for (size_t i = 0; i < z.size(); ++i)
    if (voiced[i]) out.hz[i] = std::exp(z[i] * stats.std_log_f0 + stats.mean_log_f0);
  return out;
}

// log-Gaussian transform: f0' = exp((ln f0 - mu_src)/sigma_src * sigma_tgt + mu_tgt)
inline F0Contour lg_convert_f0(const F0Contour& src, const SpeakerF0Stats& src_stats,
                               const SpeakerF0Stats& tgt_stats) {
  if (!src_stats.valid() || !tgt_stats.valid())
    throw DataError("invalid F0 stats (no voiced frames or zero variance)");
  F0Contour out;
  out.hz.resize(src.hz.size(), 0.0);
  for (size_t i = 0; i < src.hz.size(); ++i)
    if (src.hz[i] > 0.0)
      out.hz[i] = std::exp((std::log(src.hz[i]) - src_stats.mean_log_f0) / src_stats.std_log_f0 *
                               tgt_stats.std_log_f0 +
                           tgt_stats.mean_log_f0);
  return out;
}

// ---- Griffin-Lim ----

namespace detail {

// [513 x 80] pseudo-inverse of the filterbank, rows clamped where negative
inline const Eigen::MatrixXd& mel_pinv() {
  static const Eigen::MatrixXd pinv = [] {
    const Eigen::MatrixXd& fb = mel_filterbank();
    Eigen::MatrixXd gram = fb * fb.transpose();  // [80,80]
    return Eigen::MatrixXd(fb.transpose() * gram.ldlt().solve(
                                                Eigen::MatrixXd::Identity(kNumMels, kNumMels)));
  }();
  return pinv;
}

}  // namespace detail

// log-mel -> waveform: pseudo-inverse to linear magnitude (clamped at 0),
// then fixed-count Griffin-Lim with zero-phase init
inline Waveform griffin_lim(const MelSpectrogram& mel) {
  int64_t T = mel.T;
  int64_t n_bins = kNfft / 2 + 1;
  Eigen::MatrixXd m(kNumMels, T);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t b = 0; b < kNumMels; ++b) m(b, t) = std::exp(mel.at(t, b));
  Eigen::MatrixXd mag = detail::mel_pinv() * m;  // [513, T]
  mag = mag.cwiseMax(0.0);

  std::vector<std::vector<std::complex<double>>> spec(
      static_cast<size_t>(T), std::vector<std::complex<double>>(static_cast<size_t>(n_bins)));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t k = 0; k < n_bins; ++k)
      spec[static_cast<size_t>(t)][static_cast<size_t>(k)] = {mag(k, t), 0.0};

  std::vector<double> x;
  for (int iter = 0; iter < kGriffinLimIters; ++iter) {
    x = detail::istft_raw(spec);
    auto est = detail::stft_raw(x, T);
    for (int64_t t = 0; t < T; ++t)
      for (int64_t k = 0; k < n_bins; ++k) {
        std::complex<double> p = est[static_cast<size_t>(t)][static_cast<size_t>(k)];
        double a = std::abs(p);
        spec[static_cast<size_t>(t)][static_cast<size_t>(k)] =
            a > 1e-12 ? std::complex<double>(mag(k, t) * p.real() / a, mag(k, t) * p.imag() / a)
                      : std::complex<double>(mag(k, t), 0.0);
      }
  }
  Waveform out;
  out.samples = detail::istft_raw(spec);
  return out;
}

// ---- feature files ----

// "DVC1": magic, u32 T, u32 n_mels, u32 has_f0, f32 mel rows, f32 f0 values
struct FeatureFile {
  MelSpectrogram mel;
  std::optional<F0Contour> f0;
};

inline void write_features(const std::string& path, const MelSpectrogram& mel,
                           const F0Contour* f0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature file: " + path);
  auto u32 = [&](uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  auto f32 = [&](double v) {
    float fv = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &fv, 4);
    u32(bits);
  };
  f.write("DVC1", 4);
  u32(static_cast<uint32_t>(mel.T));
  u32(static_cast<uint32_t>(kNumMels));
  u32(f0 ? 1u : 0u);
  for (double v : mel.frames) f32(v);
  if (f0) {
    if (static_cast<int64_t>(f0->hz.size()) != mel.T)
      throw DataError("f0 length does not match mel frame count");
    for (double v : f0->hz) f32(v);
  }
}

inline FeatureFile read_features(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature file: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 16 || std::memcmp(raw.data(), "DVC1", 4) != 0)
    throw DataError("not a DVC1 feature file: " + path);
  uint32_t T = detail::read_u32le(&raw[4]);
  uint32_t n_mels = detail::read_u32le(&raw[8]);
  uint32_t has_f0 = detail::read_u32le(&raw[12]);
  if (n_mels != kNumMels)
    throw DataError("feature file has " + std::to_string(n_mels) + " mel bands, need 80: " + path);
  size_t need = 16 + static_cast<size_t>(T) * n_mels * 4 + (has_f0 ? static_cast<size_t>(T) * 4 : 0);
  if (raw.size() != need)
    throw DataError("feature file size mismatch (" + std::to_string(raw.size()) + " vs " +
                    std::to_string(need) + " bytes): " + path);
  auto rd_f32 = [&](size_t off) {
    uint32_t bits = detail::read_u32le(&raw[off]);
    float fv;
    std::memcpy(&fv, &bits, 4);
    return static_cast<double>(fv);
  };
  FeatureFile out;
  out.mel.T = T;
  out.mel.frames.resize(static_cast<size_t>(T) * kNumMels);
  size_t off = 16;
  for (auto& v : out.mel.frames) {
    v = rd_f32(off);
    off += 4;
  }
  if (has_f0) {
    F0Contour c;
    c.hz.resize(T);
    for (auto& v : c.hz) {
      v = rd_f32(off);
      off += 4;
    }
    out.f0 = std::move(c);
  }
  return out;
}

}  // namespace dvc
