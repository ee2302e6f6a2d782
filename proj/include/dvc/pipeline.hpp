#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dvc/dsp.hpp"
#include "dvc/mi_club.hpp"
#include "dvc/networks.hpp"
#include "dvc/optim.hpp"

namespace dvc {

struct ManifestEntry {
  std::string speaker_id, style_id, split, feature_path;
};

// one record per line: speaker_id \t style_id \t split \t feature_path;
// relative feature paths resolve against the manifest's directory
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  int64_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!std::getline(ls, e.speaker_id, '\t') || !std::getline(ls, e.style_id, '\t') ||
        !std::getline(ls, e.split, '\t') || !std::getline(ls, e.feature_path) ||
        e.speaker_id.empty() || e.feature_path.empty() ||
        e.feature_path.find('\t') != std::string::npos)
      throw DataError("manifest line " + std::to_string(ln) +
                      " is not 4 tab-separated fields: " + path);
    std::filesystem::path fp(e.feature_path);
    if (fp.is_relative()) e.feature_path = (base / fp).string();
    out.push_back(std::move(e));
  }
  if (out.empty()) throw DataError("manifest is empty: " + path);
  return out;
}

struct TrainConfig {
  int64_t epochs = 500;
  int64_t batch_size = 128;
  double base_lr = 1e-3;
  int64_t warmup_epochs = 15;
  int64_t halve_every = 100;
  MiWeights mi_weights;
  uint64_t seed = 1234;
  int64_t crop_frames = 256;    // training window per utterance, even
  int64_t mi_max_frames = 512;  // cap on pooled frames fed to the MI estimators

  static TrainConfig desk() {
    TrainConfig c;
    c.batch_size = 16;
    c.crop_frames = 128;
    return c;
  }
};

constexpr double kSigmaFloor = 1e-3;

struct SpeakerStatsRow {
  std::string speaker_id;
  SpeakerF0Stats stats;
  std::string split;           // which manifest split produced this row
  bool sigma_floored = false;  // degenerate variance was clamped to kSigmaFloor
};

using SpeakerStatsTable = std::vector<SpeakerStatsRow>;

inline const SpeakerStatsRow* find_stats(const SpeakerStatsTable& table, const std::string& id) {
  for (const auto& r : table)
    if (r.speaker_id == id) return &r;
  return nullptr;
}

// pooled voiced log-F0 mean/std per speaker over one manifest split
inline SpeakerStatsTable compute_speaker_stats(const std::vector<ManifestEntry>& entries,
                                               const std::string& split = "val") {
  std::vector<std::string> order;
  std::map<std::string, std::vector<F0Contour>> grouped;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    FeatureFile f = read_features(e.feature_path);
    if (!f.f0) throw DataError("feature file has no F0 track: " + e.feature_path);
    if (!grouped.count(e.speaker_id)) order.push_back(e.speaker_id);
    grouped[e.speaker_id].push_back(std::move(*f.f0));
  }
  if (order.empty()) throw DataError("manifest has no '" + split + "' utterances");
  SpeakerStatsTable table;
  for (const auto& id : order) {
    std::vector<const F0Contour*> ptrs;
    for (const auto& c : grouped[id]) ptrs.push_back(&c);
    SpeakerStatsRow row;
    row.speaker_id = id;
    row.split = split;
    row.stats = compute_f0_stats(ptrs);
    if (row.stats.n_voiced_frames == 0)
      throw DataError("speaker " + id + " has no voiced frames in split '" + split + "'");
    if (row.stats.std_log_f0 < kSigmaFloor) {
      row.stats.std_log_f0 = kSigmaFloor;
      row.sigma_floored = true;
    }
    table.push_back(std::move(row));
  }
  return table;
}

struct EpochMetrics {
  int64_t epoch = 0;  // 1-based in the log
  double l_recon = 0.0;
  double l_vq = 0.0;
  std::array<double, 6> mi{};  // sp, sc, sf, pc, pf, cf
  double lr = 0.0;
  double code_entropy = 0.0;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = "epoch,l_recon,l_vq,mi_sp,mi_sc,mi_sf,mi_pc,mi_pf,mi_cf,lr,code_usage_entropy\n";
  char buf[400];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.epoch), r.l_recon, r.l_vq, r.mi[0], r.mi[1], r.mi[2],
                  r.mi[3], r.mi[4], r.mi[5], r.lr, r.code_entropy);
    out += buf;
  }
  return out;
}

// everything a run leaves behind: weights, codebook, the six conditioners,
// optimizer states, the speaker F0 table, and the config that produced it
struct Checkpoint {
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  int64_t epoch = 0;
  Model model;
  MiNets mi_nets;
  std::vector<double> opt_main;
  std::vector<double> opt_aux;
  SpeakerStatsTable stats;
};

namespace pipe_detail {

struct ByteWriter {
  std::string buf;
  void u8(uint8_t v) { buf.push_back(static_cast<char>(v)); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>(v >> (8 * i)));
  }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f64(double d) { u64(std::bit_cast<uint64_t>(d)); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    buf += s;
  }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    for (double d : v) f64(d);
  }
};

struct ByteReader {
  const std::string& buf;
  size_t off = 0;

  void need(size_t n) const {
    if (off + n > buf.size()) throw DataError("checkpoint section truncated");
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[off++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off++])) << (8 * i);
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s = buf.substr(off, n);
    off += n;
    return s;
  }
  std::vector<double> f64s() {
    uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (auto& d : v) d = f64();
    return v;
  }
  void done(const std::string& section) const {
    if (off != buf.size()) throw DataError("checkpoint section '" + section + "' has trailing bytes");
  }
};

inline void write_params(ByteWriter& w, const ParamList& ps) {
  w.u32(static_cast<uint32_t>(ps.size()));
  for (const auto& p : ps) {
    w.str(p.name);
    w.f64s(p.tensor.data());
  }
}

inline void read_params(ByteReader& r, ParamList& ps) {
  std::map<std::string, Tensor*> by_name;
  for (auto& p : ps) by_name[p.name] = &p.tensor;
  uint32_t n = r.u32();
  if (n != ps.size())
    throw DataError("checkpoint holds " + std::to_string(n) + " parameters, model has " +
                    std::to_string(ps.size()));
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    std::vector<double> vals = r.f64s();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint parameter unknown to model: " + name);
    if (static_cast<int64_t>(vals.size()) != it->second->numel())
      throw DataError("checkpoint parameter size mismatch: " + name);
    it->second->mutable_data() = std::move(vals);
  }
}

}  // namespace pipe_detail

inline void save_checkpoint(Checkpoint& ck, const std::string& path) {
  using pipe_detail::ByteWriter;
  ByteWriter meta;
  meta.i64(ck.epoch);
  const ModelConfig& m = ck.model_cfg;
  meta.str(m.preset);
  for (int64_t v : {m.d_s, m.d_p, m.d_code, m.k_codes, m.style_base_channels, m.style_gru_hidden,
                    m.style_fc_hidden, m.content_conv_channels, m.content_linear_dim,
                    m.content_rnn_hidden, m.spk_bank_kernels, m.spk_bank_channels,
                    m.spk_conv_layers, m.spk_conv_channels, m.spk_linear_layers,
                    m.spk_linear_hidden, m.dec_lstm1_hidden, m.dec_conv_channels,
                    m.dec_lstm2_hidden, m.mi_hidden})
    meta.i64(v);
  const TrainConfig& t = ck.train_cfg;
  for (int64_t v : {t.epochs, t.batch_size, t.warmup_epochs, t.halve_every, t.crop_frames,
                    t.mi_max_frames})
    meta.i64(v);
  meta.f64(t.base_lr);
  for (double w : t.mi_weights.as_array()) meta.f64(w);
  meta.u64(t.seed);

  ByteWriter model_w;
  ParamList mp = ck.model.params();
  pipe_detail::write_params(model_w, mp);

  ByteWriter cb;
  cb.i64(ck.model.codebook.K);
  cb.i64(ck.model.codebook.D);
  cb.f64s(ck.model.codebook.vectors);
  cb.f64s(ck.model.codebook.ema_sum);
  cb.f64s(ck.model.codebook.ema_count);

  ByteWriter mi_w;
  ParamList ap;
  ck.mi_nets.collect(ap);
  pipe_detail::write_params(mi_w, ap);

  ByteWriter om, oa;
  om.f64s(ck.opt_main);
  oa.f64s(ck.opt_aux);

  ByteWriter st;
  st.u32(static_cast<uint32_t>(ck.stats.size()));
  for (const auto& row : ck.stats) {
    st.str(row.speaker_id);
    st.str(row.split);
    st.u8(row.sigma_floored ? 1 : 0);
    st.f64(row.stats.mean_log_f0);
    st.f64(row.stats.std_log_f0);
    st.i64(row.stats.n_voiced_frames);
  }

  ByteWriter file;
  file.buf += "DVCK1";
  auto section = [&file](const char* name, const ByteWriter& payload) {
    file.str(name);
    file.u64(payload.buf.size());
    file.buf += payload.buf;
  };
  section("meta", meta);
  section("model", model_w);
  section("codebook", cb);
  section("minets", mi_w);
  section("opt_main", om);
  section("opt_aux", oa);
  section("stats", st);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(file.buf.data(), static_cast<std::streamsize>(file.buf.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 5 || raw.compare(0, 5, "DVCK1") != 0)
    throw DataError("not a DVCK1 checkpoint: " + path);

  std::map<std::string, std::string> sections;
  {
    pipe_detail::ByteReader r{raw, 5};
    while (r.off < raw.size()) {
      std::string name = r.str();
      uint64_t len = r.u64();
      r.need(len);
      sections[name] = raw.substr(r.off, len);
      r.off += len;
    }
  }
  for (const char* need : {"meta", "model", "codebook", "minets", "opt_main", "opt_aux", "stats"})
    if (!sections.count(need)) throw DataError("checkpoint missing section '" + std::string(need) + "'");

  Checkpoint ck;
  {
    pipe_detail::ByteReader r{sections["meta"]};
    ck.epoch = r.i64();
    ModelConfig& m = ck.model_cfg;
    m.preset = r.str();
    for (int64_t* v : {&m.d_s, &m.d_p, &m.d_code, &m.k_codes, &m.style_base_channels,
                       &m.style_gru_hidden, &m.style_fc_hidden, &m.content_conv_channels,
                       &m.content_linear_dim, &m.content_rnn_hidden, &m.spk_bank_kernels,
                       &m.spk_bank_channels, &m.spk_conv_layers, &m.spk_conv_channels,
                       &m.spk_linear_layers, &m.spk_linear_hidden, &m.dec_lstm1_hidden,
                       &m.dec_conv_channels, &m.dec_lstm2_hidden, &m.mi_hidden})
      *v = r.i64();
    TrainConfig& t = ck.train_cfg;
    for (int64_t* v : {&t.epochs, &t.batch_size, &t.warmup_epochs, &t.halve_every, &t.crop_frames,
                       &t.mi_max_frames})
      *v = r.i64();
    t.base_lr = r.f64();
    t.mi_weights.sp = r.f64();
    t.mi_weights.sc = r.f64();
    t.mi_weights.sf = r.f64();
    t.mi_weights.pc = r.f64();
    t.mi_weights.pf = r.f64();
    t.mi_weights.cf = r.f64();
    t.seed = r.u64();
    r.done("meta");
  }

  Rng init_rng(0);
  ck.model = Model(ck.model_cfg, init_rng);
  ck.mi_nets = MiNets(ck.model_cfg.d_s, ck.model_cfg.d_p, ck.model_cfg.d_code,
                      ck.model_cfg.mi_hidden, init_rng);
  {
    pipe_detail::ByteReader r{sections["model"]};
    ParamList ps = ck.model.params();
    pipe_detail::read_params(r, ps);
    r.done("model");
  }
  {
    pipe_detail::ByteReader r{sections["codebook"]};
    Codebook& cb = ck.model.codebook;
    int64_t K = r.i64(), D = r.i64();
    if (K != cb.K || D != cb.D) throw DataError("checkpoint codebook shape mismatch");
    cb.vectors = r.f64s();
    cb.ema_sum = r.f64s();
    cb.ema_count = r.f64s();
    if (static_cast<int64_t>(cb.vectors.size()) != K * D ||
        static_cast<int64_t>(cb.ema_sum.size()) != K * D ||
        static_cast<int64_t>(cb.ema_count.size()) != K)
      throw DataError("checkpoint codebook payload size mismatch");
    r.done("codebook");
  }
  {
    pipe_detail::ByteReader r{sections["minets"]};
    ParamList ps;
    ck.mi_nets.collect(ps);
    pipe_detail::read_params(r, ps);
    r.done("minets");
  }
  {
    pipe_detail::ByteReader r{sections["opt_main"]};
    ck.opt_main = r.f64s();
    r.done("opt_main");
  }
  {
    pipe_detail::ByteReader r{sections["opt_aux"]};
    ck.opt_aux = r.f64s();
    r.done("opt_aux");
  }
  {
    pipe_detail::ByteReader r{sections["stats"]};
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      SpeakerStatsRow row;
      row.speaker_id = r.str();
      row.split = r.str();
      row.sigma_floored = r.u8() != 0;
      row.stats.mean_log_f0 = r.f64();
      row.stats.std_log_f0 = r.f64();
      row.stats.n_voiced_frames = r.i64();
      ck.stats.push_back(std::move(row));
    }
    r.done("stats");
  }
  return ck;
}

namespace pipe_detail {

// per-utterance stats drive the pitch input track; a constant contour gets
// the same variance floor the speaker table uses
inline SpeakerF0Stats utt_f0_stats(const F0Contour& f0, bool* floored) {
  SpeakerF0Stats s = compute_f0_stats({&f0});
  if (s.n_voiced_frames > 0 && s.std_log_f0 < kSigmaFloor) {
    s.std_log_f0 = kSigmaFloor;
    if (floored) *floored = true;
  }
  return s;
}

struct TrainUtt {
  std::string speaker_id, style_id;
  MelSpectrogram mel;
  std::vector<double> zf;  // per-utterance normalized log-F0, 0 where unvoiced
};

inline TrainUtt load_train_utt(const ManifestEntry& e, std::vector<std::string>& warnings) {
  FeatureFile f = read_features(e.feature_path);
  if (!f.f0) throw DataError("feature file has no F0 track: " + e.feature_path);
  if (f.mel.T < 1) throw DataError("feature file has no frames: " + e.feature_path);
  TrainUtt u;
  u.speaker_id = e.speaker_id;
  u.style_id = e.style_id;
  u.mel = std::move(f.mel);
  bool floored = false;
  SpeakerF0Stats st = utt_f0_stats(*f.f0, &floored);
  if (st.n_voiced_frames == 0) {
    warnings.push_back("no voiced frames, pitch track zeroed: " + e.feature_path);
    u.zf.assign(static_cast<size_t>(u.mel.T), 0.0);
  } else {
    if (floored) warnings.push_back("pitch variance degenerate, sigma floored: " + e.feature_path);
    u.zf = log_normalize_f0(*f.f0, st);
  }
  return u;
}

// fixed-length window; short utterances wrap around rather than padding with
// frames the corpus never produced
inline std::pair<Tensor, Tensor> crop_utt(const TrainUtt& u, int64_t crop, Rng& rng) {
  int64_t T = u.mel.T;
  int64_t start = (T > crop) ? rng.randint(T - crop + 1) : 0;
  std::vector<double> mel(static_cast<size_t>(crop * kNumMels));
  std::vector<double> zf(static_cast<size_t>(crop));
  for (int64_t t = 0; t < crop; ++t) {
    int64_t src = (start + t) % T;
    std::memcpy(&mel[static_cast<size_t>(t * kNumMels)],
                &u.mel.frames[static_cast<size_t>(src * kNumMels)],
                static_cast<size_t>(kNumMels) * sizeof(double));
    zf[static_cast<size_t>(t)] = u.zf[static_cast<size_t>(src)];
  }
  return {Tensor::leaf({crop, kNumMels}, std::move(mel)), Tensor::leaf({crop}, std::move(zf))};
}

// evenly strided subsample, so the cap needs no extra randomness
inline std::vector<int64_t> stride_select(int64_t total, int64_t cap) {
  std::vector<int64_t> idx;
  if (total <= cap) return idx;  // empty means keep everything
  idx.reserve(static_cast<size_t>(cap));
  for (int64_t i = 0; i < cap; ++i) idx.push_back(i * total / cap);
  return idx;
}

}  // namespace pipe_detail

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> metrics;
  std::vector<std::string> warnings;
};

// Two-phase schedule per step: the six conditioners ascend their
// log-likelihood on the batch's detached representations, then the main model
// descends reconstruction + commitment (+ the frozen-net MI bound once the
// warm-up ends). Codebook vectors move by EMA after the gradient step; a
// zero-lr run leaves them untouched so frozen runs stay frozen.
inline TrainResult train(const std::vector<ManifestEntry>& entries, const TrainConfig& tcfg,
                         const ModelConfig& mcfg) {
  if (tcfg.epochs < 1) throw UsageError("epochs must be >= 1");
  if (tcfg.batch_size < 2)
    throw UsageError("batch_size must be >= 2; the MI estimator needs sample pairs");
  if (tcfg.crop_frames < 4 || tcfg.crop_frames % 2 != 0)
    throw UsageError("crop_frames must be even and >= 4");
  if (tcfg.mi_max_frames < 2) throw UsageError("mi_max_frames must be >= 2");
  if (entries.empty()) throw DataError("manifest is empty");

  TrainResult res;
  std::vector<pipe_detail::TrainUtt> train_set;
  bool has_val = false;
  for (const auto& e : entries) {
    if (e.split == "train") train_set.push_back(pipe_detail::load_train_utt(e, res.warnings));
    if (e.split == "val") has_val = true;
  }
  if (train_set.size() < 2) throw DataError("manifest needs at least 2 train utterances");

  SpeakerStatsTable stats;
  if (has_val)
    stats = compute_speaker_stats(entries, "val");
  else
    res.warnings.push_back("manifest has no val split; checkpoint carries no speaker stats");

  Rng rng(tcfg.seed);
  Model model(mcfg, rng);
  MiNets nets(mcfg.d_s, mcfg.d_p, mcfg.d_code, mcfg.mi_hidden, rng);
  ParamList params = model.params();
  ParamList aux_params;
  nets.collect(aux_params);
  Adam opt_main(params), opt_aux(aux_params);
  LrSchedule sched{tcfg.base_lr, tcfg.warmup_epochs, tcfg.halve_every};
  Rng data_rng = rng.fork(0xda7a);

  const int64_t crop = tcfg.crop_frames;
  for (int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    double lr = sched.lr(epoch);
    bool regularize = !sched.in_warmup(epoch);
    Rng erng = data_rng.fork(static_cast<uint64_t>(epoch));
    std::vector<int64_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    erng.shuffle(order);

    double sum_recon = 0.0, sum_vq = 0.0;
    std::array<double, 6> sum_mi{};
    int64_t steps = 0;
    std::vector<int64_t> epoch_codes;

    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(tcfg.batch_size)) {
      size_t end = std::min(order.size(), pos + static_cast<size_t>(tcfg.batch_size));
      if (end - pos < 2) break;  // a trailing singleton cannot feed the estimators

      std::vector<Tensor> zs_l, zp_l, zc_l, zf_l;
      Tensor recon_acc = Tensor::scalar(0.0), vq_acc = Tensor::scalar(0.0);
      std::vector<double> ze_pool;
      std::vector<int64_t> idx_pool;
      for (size_t i = pos; i < end; ++i) {
        const auto& u = train_set[static_cast<size_t>(order[i])];
        auto [mel_t, zf_t] = pipe_detail::crop_utt(u, crop, erng);
        EncodeOut enc = model.encode(mel_t, zf_t);
        Tensor mel_hat = model.decode(enc.bundle);
        recon_acc = add(recon_acc, reconstruction_loss(mel_hat, mel_t));
        vq_acc = add(vq_acc, enc.vq_loss);
        zs_l.push_back(tile_rows(enc.bundle.z_style, crop));
        zp_l.push_back(tile_rows(enc.bundle.z_speaker, crop));
        zc_l.push_back(repeat_rows2(enc.bundle.z_content));
        zf_l.push_back(reshape(zf_t, {crop, 1}));
        ze_pool.insert(ze_pool.end(), enc.z_e.data().begin(), enc.z_e.data().end());
        idx_pool.insert(idx_pool.end(), enc.indices.begin(), enc.indices.end());
      }
      double inv_b = 1.0 / static_cast<double>(end - pos);
      Tensor l_recon = mul_scalar(recon_acc, inv_b);
      Tensor l_vq = mul_scalar(vq_acc, inv_b);
      if (!std::isfinite(l_recon.item()) || !std::isfinite(l_vq.item()))
        throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch + 1));

      Tensor zs = concat_rows(zs_l), zp = concat_rows(zp_l);
      Tensor zc = concat_rows(zc_l), zf = concat_rows(zf_l);
      std::vector<int64_t> keep = pipe_detail::stride_select(zs.size(0), tcfg.mi_max_frames);
      if (!keep.empty()) {
        zs = gather_rows(zs, keep);
        zp = gather_rows(zp, keep);
        zc = gather_rows(zc, keep);
        zf = gather_rows(zf, keep);
      }
      Tensor zs_d = zs.detach(), zp_d = zp.detach(), zc_d = zc.detach(), zf_d = zf.detach();

      Tensor aux = club_loglik(nets.sp, zs_d, zp_d, false);
      aux = add(aux, club_loglik(nets.sc, zs_d, zc_d, false));
      aux = add(aux, club_loglik(nets.sf, zs_d, zf_d, false));
      aux = add(aux, club_loglik(nets.pc, zp_d, zc_d, false));
      aux = add(aux, club_loglik(nets.pf, zp_d, zf_d, false));
      aux = add(aux, club_loglik(nets.cf, zc_d, zf_d, false));
      GradMap aux_grads = backward_multi({{aux, {-1.0}}});
      opt_aux.step(aux_params, aux_grads, lr);

      // during warm-up the estimates are logged off detached inputs, so no
      // penalty gradient reaches the encoders
      MiLossResult mi = regularize
                            ? mi_loss(zs, zp, zc, zf, nets, tcfg.mi_weights, true)
                            : mi_loss(zs_d, zp_d, zc_d, zf_d, nets, tcfg.mi_weights, true);
      Tensor loss = add(l_recon, l_vq);
      if (regularize) loss = add(loss, mi.total);
      GradMap grads = backward_multi({{loss, {1.0}}});
      opt_main.step(params, grads, lr);
      if (lr > 0.0) codebook_update(model.codebook, ze_pool, idx_pool);

      sum_recon += l_recon.item();
      sum_vq += l_vq.item();
      for (size_t k = 0; k < 6; ++k) sum_mi[k] += mi.estimates[k];
      epoch_codes.insert(epoch_codes.end(), idx_pool.begin(), idx_pool.end());
      ++steps;
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.l_recon = sum_recon / static_cast<double>(steps);
    m.l_vq = sum_vq / static_cast<double>(steps);
    for (size_t k = 0; k < 6; ++k) m.mi[k] = sum_mi[k] / static_cast<double>(steps);
    m.lr = lr;
    m.code_entropy = code_usage_entropy(epoch_codes, mcfg.k_codes);
    res.metrics.push_back(m);
  }

  Checkpoint ck;
  ck.model_cfg = mcfg;
  ck.train_cfg = tcfg;
  ck.epoch = tcfg.epochs;
  ck.model = std::move(model);
  ck.mi_nets = std::move(nets);
  ck.opt_main = opt_main.save_state();
  ck.opt_aux = opt_aux.save_state();
  ck.stats = std::move(stats);
  res.checkpoint = std::move(ck);
  return res;
}

struct ConvertResult {
  MelSpectrogram mel;
  Waveform wav;
  F0Contour f0;                        // converted contour, 0 where unvoiced
  std::vector<int64_t> content_indices;
  std::vector<std::string> warnings;
};

// content from the source, speaker and style from the reference, pitch moved
// onto the target speaker's log-F0 distribution
inline ConvertResult convert(const Waveform& source, const Waveform& reference,
                             const std::string& target_speaker_id, const Checkpoint& ck) {
  const SpeakerStatsRow* row = find_stats(ck.stats, target_speaker_id);
  if (!row) throw DataError("checkpoint has no F0 stats for speaker " + target_speaker_id);

  ConvertResult out;
  MelSpectrogram mel_src = mel_spectrogram(source);
  F0Contour f0_src = extract_f0(source);
  MelSpectrogram mel_ref = mel_spectrogram(reference);

  out.f0.hz.assign(f0_src.hz.size(), 0.0);
  std::vector<double> zf(f0_src.hz.size(), 0.0);
  bool floored = false;
  SpeakerF0Stats src_stats = pipe_detail::utt_f0_stats(f0_src, &floored);
  if (src_stats.n_voiced_frames == 0) {
    out.warnings.push_back("source has no voiced frames; converted pitch track is unvoiced");
  } else {
    if (floored) out.warnings.push_back("source pitch variance degenerate, sigma floored");
    out.f0 = lg_convert_f0(f0_src, src_stats, row->stats);
    zf = log_normalize_f0(out.f0, row->stats);
  }

  NoGradGuard ng;
  Tensor mel_src_t = Tensor::leaf({mel_src.T, kNumMels}, mel_src.frames);
  Tensor mel_ref_t = Tensor::leaf({mel_ref.T, kNumMels}, mel_ref.frames);
  Tensor zf_t = Tensor::leaf({mel_src.T}, std::move(zf));

  ContentOut c = ck.model.content_enc.forward(mel_src_t, ck.model.codebook);
  RepBundle b;
  b.z_content = c.z_content;
  b.z_speaker = ck.model.speaker_enc.forward(mel_ref_t);
  b.z_style = ck.model.style_enc.forward(mel_ref_t);
  b.z_pitch = zf_t;
  Tensor mel_hat = ck.model.decode(b);

  out.content_indices = std::move(c.indices);
  out.mel.T = mel_src.T;
  out.mel.frames = mel_hat.data();
  out.wav = griffin_lim(out.mel);
  return out;
}

}  // namespace dvc
