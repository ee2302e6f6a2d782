#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dvc/dsp.hpp"

namespace dvc {

struct SynthSpec {
  int64_t n_speakers = 4;
  int64_t n_styles = 3;
  int64_t utts_train = 20;
  int64_t utts_val = 5;
  int64_t utts_test = 5;
  double utt_len_s = 1.0;
  uint64_t seed = 1234;
};

// one fixed spectral identity per speaker
struct SpeakerFactors {
  double f1, f2, f3;     // formant centers, Hz
  double base_pitch;     // Hz
};

// one prosodic contour family per style
struct StyleFactors {
  double level_ratio;    // multiplies base pitch
  double vib_depth;      // relative F0 excursion
  double vib_rate;       // Hz
  double slope_oct;      // octaves per second across the utterance
  double am_rate;        // energy modulation, Hz
  double am_depth;
};

struct UttTruth {
  std::string utt_id, speaker_id, style_id, split;
  std::vector<int> symbols;
  std::vector<double> f0_frames;  // per mel frame, 0 where unvoiced
};

namespace synth_detail {

constexpr int kNumSymbols = 8;

// per-symbol envelope perturbation: formant gains, extra high resonance, tilt
struct Symbol {
  double g1, g2, g3;
  double extra_hz;
  double tilt;
};

inline const Symbol& symbol_table(int k) {
  static const Symbol table[kNumSymbols] = {
      {1.0, 0.7, 0.4, 3200.0, 0.00},  {0.5, 1.0, 0.6, 3714.3, 0.15},
      {0.8, 0.4, 1.0, 4228.6, -0.15}, {1.0, 1.0, 0.3, 4742.9, 0.30},
      {0.4, 0.8, 0.9, 5257.1, -0.30}, {0.9, 0.5, 0.7, 5771.4, 0.10},
      {0.6, 1.0, 1.0, 6285.7, -0.10}, {1.0, 0.6, 0.8, 6800.0, 0.20},
  };
  return table[k];
}

inline double resonance(double f, double center, double bw) {
  double d = (f - center) / bw;
  return 1.0 / (1.0 + d * d);
}

// glottal-like source roll-off, steep above the knee; keeps voiced power in
// the first few harmonics the way a periodicity tracker expects, and keeps
// the wandering upper comb quiet where spectra get measured
inline double source_rolloff(double f) {
  double r = f / 350.0;
  double r2 = r * r;
  return 1.0 / (1.0 + r2 * r2);
}

inline double envelope_gain(double f, const SpeakerFactors& spk, const Symbol& sym) {
  double g = sym.g1 * resonance(f, spk.f1, 90.0) + sym.g2 * resonance(f, spk.f2, 130.0) +
             sym.g3 * resonance(f, spk.f3, 180.0) + 0.6 * resonance(f, sym.extra_hz, 260.0);
  // the 0.2 valley floor keeps off-formant harmonics audible; a comb with
  // dead valleys lets a formant parked on an even harmonic mimic half the
  // true period
  return (g * std::pow(std::max(f, 100.0) / 500.0, sym.tilt) + 0.2) * source_rolloff(f);
}

// flat-source resonance mix for the aspiration bursts; no roll-off, no
// symbol perturbation, so the bursts carry the speaker's bare envelope
inline double hiss_gain(double f, const SpeakerFactors& spk) {
  return resonance(f, spk.f1, 90.0) + resonance(f, spk.f2, 130.0) +
         resonance(f, spk.f3, 180.0) + 0.1;
}

struct Segment {
  double start_s, end_s;  // full extent including ramps
  int symbol;
  double pitch;  // per-segment multiplier on the utterance F0
};

}  // namespace synth_detail

inline SpeakerFactors speaker_factors(const SynthSpec& spec, int64_t s) {
  Rng rng = Rng(spec.seed).fork(0x5350u + static_cast<uint64_t>(s));
  SpeakerFactors f;
  f.base_pitch = rng.uniform(100.0, 260.0);
  // the first resonance stays above the fundamental's reach and the
  // resonances stay apart from each other, so every long-term spectrum
  // shows three distinct envelope peaks instead of source lines or merged
  // skirts
  do f.f1 = rng.uniform(300.0, 900.0);
  while (f.f1 < 1.43 * f.base_pitch + 284.0);
  do f.f2 = rng.uniform(900.0, 1800.0);
  while (f.f2 - f.f1 < 380.0);
  do f.f3 = rng.uniform(1800.0, 3000.0);
  while (f.f3 - f.f2 < 450.0);
  return f;
}

inline StyleFactors style_factors(const SynthSpec& spec, int64_t e) {
  // evenly spread family parameters plus a small seeded jitter, so styles
  // stay separated for any n_styles
  Rng rng = Rng(spec.seed).fork(0x5459u + static_cast<uint64_t>(e));
  double u = (spec.n_styles == 1) ? 0.5
                                  : static_cast<double>(e) / static_cast<double>(spec.n_styles - 1);
  StyleFactors f;
  f.level_ratio = 0.84 + 0.32 * u + rng.uniform(-0.02, 0.02);
  // vibrato and slope stay inside what a 32 ms difference-function window can
  // cancel, or voiced frames stop registering as periodic at all
  f.vib_depth = 0.004 + 0.012 * u + rng.uniform(0.0, 0.002);
  f.vib_rate = 4.5 + 2.0 * u;
  // alternating-sign slopes of at least ~0.3 oct/s keep harmonics sweeping
  // across their spacing, so long-term spectra resolve the envelope rather
  // than individual harmonic lines
  double sign = (e % 2 == 0) ? -1.0 : 1.0;
  f.slope_oct = sign * (0.28 + 0.16 * u + rng.uniform(0.0, 0.02));
  f.am_rate = 2.0 + 3.0 * u;
  f.am_depth = 0.12 + 0.33 * u;
  return f;
}

struct RenderedUtt {
  Waveform wav;
  std::vector<int> symbols;
  std::vector<double> f0_frames;
};

// harmonic source at the style-shaped F0, filtered by the speaker envelope
// under the active content symbol, with short aspiration bursts between
// segments
inline RenderedUtt render_utterance(const SpeakerFactors& spk, const StyleFactors& sty,
                                    double len_s, Rng& rng) {
  using namespace synth_detail;
  const int64_t fs = kSampleRate;
  const int64_t n = static_cast<int64_t>(std::llround(len_s * static_cast<double>(fs)));

  // each take drifts a little in overall pitch, which also lets harmonics of
  // pooled utterances tile the spectrum densely enough to expose the envelope
  double pitch_jitter = std::pow(2.0, rng.uniform(-0.15, 0.15));

  int n_seg = 3 + static_cast<int>(rng.randint(4));
  // aspiration bursts fill the slots before and between the vowels
  const double lead = 0.02, burst0 = 0.10, burst = 0.05, ramp = 0.01;
  double body = len_s - lead - burst0 - burst * (n_seg - 1);
  double seg_len = body / static_cast<double>(n_seg);
  if (seg_len < 3.0 * ramp) throw DataError("utterance too short for segment layout");

  std::vector<Segment> segs;
  std::vector<std::pair<double, double>> bursts;
  RenderedUtt out;
  double cursor = lead;
  for (int i = 0; i < n_seg; ++i) {
    double b = (i == 0) ? burst0 : burst;
    bursts.emplace_back(cursor, cursor + b);
    cursor += b;
    Segment s;
    s.start_s = cursor;
    s.end_s = cursor + seg_len;
    s.symbol = static_cast<int>(rng.randint(kNumSymbols));
    s.pitch = std::pow(2.0, rng.uniform(-0.10, 0.10));
    segs.push_back(s);
    out.symbols.push_back(s.symbol);
    cursor = s.end_s;
  }

  // bursts are unvoiced, so letting each one inherit the next segment's
  // offset keeps f0_at well defined everywhere without audible steps
  auto seg_mul = [&](double t) {
    for (const auto& s : segs)
      if (t < s.end_s) return s.pitch;
    return segs.back().pitch;
  };

  auto f0_at = [&](double t) {
    double f = spk.base_pitch * sty.level_ratio * pitch_jitter * seg_mul(t) *
               std::pow(2.0, sty.slope_oct * (t - 0.5 * len_s)) *
               (1.0 + sty.vib_depth * std::sin(kTwoPi * sty.vib_rate * t));
    return std::min(500.0, std::max(60.0, f));
  };

  // the bursts are one fixed bed of tones through the speaker's bare
  // resonances; every take lights the same frequencies at the same phases,
  // so long-term spectra of any two takes share their envelope peaks. The
  // ladder comes from its own generator, and its irregular offsets keep the
  // ensemble aperiodic, so it owns no lag inside the tracker's search range
  struct Hiss {
    double hz, phase, gain;
  };
  std::vector<Hiss> hiss;
  Rng ladder(0x6c616464u);
  for (double gf = 250.0; gf <= 3550.0; gf += 50.0) {
    double f = gf + ladder.uniform(0.0, 50.0);
    hiss.push_back({f, ladder.uniform(0.0, kTwoPi), 1.1 * hiss_gain(f, spk)});
  }

  // amplitude envelope and active symbol per sample
  auto segment_at = [&](double t) -> const Segment* {
    for (const auto& s : segs)
      if (t >= s.start_s && t < s.end_s) return &s;
    return nullptr;
  };

  double f0_max = 0.0;
  for (int64_t i = 0; i < n; i += 37) f0_max = std::max(f0_max, f0_at(static_cast<double>(i) / fs));
  int n_harm = std::min<int>(40, static_cast<int>(7200.0 / f0_max));

  std::vector<double> x(static_cast<size_t>(n), 0.0);
  double phase = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(fs);
    double f0 = f0_at(t);
    phase += kTwoPi * f0 / static_cast<double>(fs);
    const Segment* seg = segment_at(t);
    if (seg) {
      double amp = 1.0;
      if (t < seg->start_s + ramp) amp = (t - seg->start_s) / ramp;
      if (t > seg->end_s - ramp) amp = std::min(amp, (seg->end_s - t) / ramp);
      double am = 1.0 + sty.am_depth * std::sin(kTwoPi * sty.am_rate * t);
      const Symbol& sym = symbol_table(seg->symbol);
      double v = 0.0;
      for (int h = 1; h <= n_harm; ++h) {
        double fh = static_cast<double>(h) * f0;
        if (fh > 7600.0) break;
        double a = envelope_gain(fh, spk, sym);
        // mild fundamental emphasis; together with the envelope valley floor
        // it keeps the octave-up dip shallower than the true-period one
        // whenever a formant sits on an even harmonic
        if (h == 1) a += 0.15 * source_rolloff(f0);
        v += a * std::sin(static_cast<double>(h) * phase);
      }
      x[static_cast<size_t>(i)] = amp * am * v;
    } else {
      for (const auto& [a, b] : bursts) {
        if (t < a || t >= b) continue;
        double ha = std::min(1.0, std::min(t - a, b - t) / 0.005);
        double v = 0.0;
        for (const auto& g : hiss) v += g.gain * std::sin(kTwoPi * g.hz * t + g.phase);
        x[static_cast<size_t>(i)] = ha * v;
        break;
      }
    }
  }

  double peak = 1e-9;
  for (double v : x) peak = std::max(peak, std::abs(v));
  for (double& v : x) v *= 0.45 / peak;

  out.wav = Waveform{std::move(x), static_cast<int>(fs)};

  // per-frame truth: voiced only when the tracker's whole reach sits inside a
  // segment body (ramps excluded); the value averages F0 over the span the
  // difference function actually cancels, half window plus one period
  int64_t T = detail::frame_count(n);
  out.f0_frames.assign(static_cast<size_t>(T), 0.0);
  const double gate_s = static_cast<double>(kYinWin / 2 + 360) / static_cast<double>(fs);
  for (int64_t fm = 0; fm < T; ++fm) {
    double t0 = static_cast<double>(fm * kHopLen) / fs;
    const Segment* s0 = segment_at(t0);
    if (!s0 || t0 < s0->start_s + ramp || t0 + gate_s > s0->end_s - ramp) continue;
    double span_s = (static_cast<double>(kYinWin) / 2.0 + fs / f0_at(t0 + 0.016)) / fs;
    double acc = 0.0;
    int cnt = 0;
    for (double t = t0; t <= t0 + span_s; t += 0.002) {
      acc += f0_at(t);
      ++cnt;
    }
    out.f0_frames[static_cast<size_t>(fm)] = acc / cnt;
  }
  return out;
}

struct CorpusPaths {
  std::string manifest;
  std::string truth_csv;
  int64_t n_utts = 0;
};

inline CorpusPaths generate(const SynthSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (spec.n_speakers < 2 || spec.n_styles < 2)
    throw DataError("corpus needs at least 2 speakers and 2 styles");
  if (spec.utts_train < 1 || spec.utts_val < 1 || spec.utts_test < 1)
    throw DataError("every split needs at least one utterance per cell");

  fs::create_directories(fs::path(out_dir) / "wav");
  fs::create_directories(fs::path(out_dir) / "feat");

  std::ostringstream manifest, truth;
  const char* split_names[3] = {"train", "val", "test"};
  const int64_t split_sizes[3] = {spec.utts_train, spec.utts_val, spec.utts_test};

  CorpusPaths res;
  for (int64_t s = 0; s < spec.n_speakers; ++s) {
    SpeakerFactors spk = speaker_factors(spec, s);
    for (int64_t e = 0; e < spec.n_styles; ++e) {
      StyleFactors sty = style_factors(spec, e);
      for (int sp = 0; sp < 3; ++sp) {
        for (int64_t k = 0; k < split_sizes[sp]; ++k) {
          uint64_t salt = ((static_cast<uint64_t>(s) * 64 + static_cast<uint64_t>(e)) * 4 +
                           static_cast<uint64_t>(sp)) *
                              1024 +
                          static_cast<uint64_t>(k);
          Rng rng = Rng(spec.seed).fork(0xA000000u + salt);
          RenderedUtt utt = render_utterance(spk, sty, spec.utt_len_s, rng);

          std::string stem = "spk" + std::to_string(s) + "_sty" + std::to_string(e) + "_" +
                             split_names[sp] + "_" + std::to_string(k);
          std::string wav_rel = "wav/" + stem + ".wav";
          std::string feat_rel = "feat/" + stem + ".dvc1";
          save_wav(utt.wav, (fs::path(out_dir) / wav_rel).string());

          MelSpectrogram mel = mel_spectrogram(utt.wav);
          F0Contour f0 = extract_f0(utt.wav);
          write_features((fs::path(out_dir) / feat_rel).string(), mel, &f0);

          manifest << "spk" << s << "\t"
                   << "sty" << e << "\t" << split_names[sp] << "\t" << feat_rel << "\n";

          truth << stem << ",spk" << s << ",sty" << e << "," << split_names[sp] << ",";
          for (size_t i = 0; i < utt.symbols.size(); ++i) {
            if (i) truth << "-";
            truth << utt.symbols[i];
          }
          truth << ",";
          char buf[32];
          for (size_t i = 0; i < utt.f0_frames.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.4f", utt.f0_frames[i]);
            if (i) truth << ";";
            truth << buf;
          }
          truth << "\n";
          ++res.n_utts;
        }
      }
    }
  }

  res.manifest = (fs::path(out_dir) / "manifest.tsv").string();
  res.truth_csv = (fs::path(out_dir) / "truth.csv").string();
  {
    std::ofstream mf(res.manifest, std::ios::binary);
    mf << manifest.str();
    std::ofstream tf(res.truth_csv, std::ios::binary);
    tf << "utt,speaker_id,style_id,split,symbols,f0_frames\n" << truth.str();
    if (!mf || !tf) throw DataError("failed writing corpus index files");
  }
  return res;
}

inline std::vector<UttTruth> read_truth_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open truth csv: " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<UttTruth> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    UttTruth t;
    std::istringstream ls(line);
    std::string symbols, frames;
    std::getline(ls, t.utt_id, ',');
    std::getline(ls, t.speaker_id, ',');
    std::getline(ls, t.style_id, ',');
    std::getline(ls, t.split, ',');
    std::getline(ls, symbols, ',');
    std::getline(ls, frames);
    std::istringstream ss(symbols);
    std::string tok;
    while (std::getline(ss, tok, '-')) t.symbols.push_back(std::stoi(tok));
    std::istringstream fsx(frames);
    while (std::getline(fsx, tok, ';')) t.f0_frames.push_back(std::stod(tok));
    rows.push_back(std::move(t));
  }
  return rows;
}

}  // namespace dvc
