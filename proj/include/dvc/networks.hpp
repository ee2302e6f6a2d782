#pragma once

#include <string>
#include <vector>

#include "dvc/layers.hpp"
#include "dvc/quantizer.hpp"

namespace dvc {

struct ModelConfig {
  std::string preset = "desk";

  int64_t d_s = 16;       // style embedding
  int64_t d_p = 16;       // speaker embedding
  int64_t d_code = 16;    // codebook vector width
  int64_t k_codes = 64;   // codebook size

  int64_t style_base_channels = 8;    // doubled every second conv layer
  int64_t style_gru_hidden = 32;
  int64_t style_fc_hidden = 32;

  int64_t content_conv_channels = 64;
  int64_t content_linear_dim = 64;
  int64_t content_rnn_hidden = 32;

  int64_t spk_bank_kernels = 4;
  int64_t spk_bank_channels = 16;     // per bank kernel
  int64_t spk_conv_layers = 3;
  int64_t spk_conv_channels = 32;
  int64_t spk_linear_layers = 2;
  int64_t spk_linear_hidden = 32;

  int64_t dec_lstm1_hidden = 64;
  int64_t dec_conv_channels = 64;
  int64_t dec_lstm2_hidden = 64;

  int64_t mi_hidden = 64;  // variational conditioner width; not part of the model graph

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.preset = "paper";
    c.d_s = 128;
    c.d_p = 256;
    c.d_code = 64;
    c.k_codes = 512;
    c.style_base_channels = 32;
    c.style_gru_hidden = 256;
    c.style_fc_hidden = 256;
    c.content_conv_channels = 512;
    c.content_linear_dim = 512;
    c.content_rnn_hidden = 256;
    c.spk_bank_kernels = 8;
    c.spk_bank_channels = 128;
    c.spk_conv_layers = 12;
    c.spk_conv_channels = 512;
    c.spk_linear_layers = 4;
    c.spk_linear_hidden = 512;
    c.dec_lstm1_hidden = 1024;
    c.dec_conv_channels = 512;
    c.dec_lstm2_hidden = 1024;
    return c;
  }

  int64_t decoder_input_width() const { return d_code + d_p + d_s + 1; }
};

// Everything an utterance reduces to before decoding. z_content runs at half
// the mel frame rate; the other three live at utterance or frame level.
struct RepBundle {
  Tensor z_style;    // [d_s]
  Tensor z_speaker;  // [d_p]
  Tensor z_content;  // [T/2, d_code]
  Tensor z_pitch;    // [T]
};

// 6 conv2d blocks over the (freq, time) plane, stride 2 on frequency only so
// any sequence length passes through, then a GRU summarized by its final
// state and two FC+ReLU layers.
struct StyleEncoder {
  std::vector<Conv2d> convs;
  std::vector<ChanNorm> norms;
  Gru gru;
  Linear fc1, fc2;

  StyleEncoder() = default;
  StyleEncoder(const ModelConfig& cfg, Rng& rng) {
    int64_t cin = 1;
    for (int i = 0; i < 6; ++i) {
      int64_t cout = cfg.style_base_channels << (i / 2);
      convs.emplace_back(cin, cout, 3, 3, 2, 1, rng);
      norms.emplace_back(cout);
      cin = cout;
    }
    int64_t freq = 80;
    for (int i = 0; i < 6; ++i) freq = (freq + 1) / 2;
    gru = Gru(cin * freq, cfg.style_gru_hidden, rng);
    fc1 = Linear(cfg.style_gru_hidden, cfg.style_fc_hidden, rng);
    fc2 = Linear(cfg.style_fc_hidden, cfg.d_s, rng);
  }

  Tensor forward(const Tensor& mel) const {
    Tensor h = reshape(transpose2d(mel), {1, mel.size(1), mel.size(0)});
    for (size_t i = 0; i < convs.size(); ++i) h = relu(norms[i].forward(convs[i].forward(h)));
    Tensor seq = time_major(h);  // [T, C*freq]
    Tensor last = reshape(gru.forward(seq).last, {gru.hidden});
    return relu(fc2.forward(relu(fc1.forward(last))));
  }

  void collect(ParamList& out) {
    for (size_t i = 0; i < convs.size(); ++i) {
      std::string p = "style.conv" + std::to_string(i + 1);
      convs[i].collect(p, out);
      norms[i].collect(p + ".norm", out);
    }
    gru.collect("style.gru", out);
    fc1.collect("style.fc1", out);
    fc2.collect("style.fc2", out);
  }
};

struct ContentOut {
  Tensor z_content;              // [T/2, d_code]
  Tensor vq_loss;
  Tensor z_e;                    // pre-quantization projections, for EMA updates
  std::vector<int64_t> indices;
};

// Strided conv halves the frame rate, a per-frame linear widens, a projection
// drops to codebook width, the codes pass through the quantizer, and a GRU
// plus linear smooths the discrete sequence back into d_code dims.
struct ContentEncoder {
  Conv1d conv;
  ChanNorm norm;
  Linear widen, proj;
  Gru gru;
  Linear out;

  ContentEncoder() = default;
  ContentEncoder(const ModelConfig& cfg, Rng& rng)
      : conv(80, cfg.content_conv_channels, 4, 2, rng),
        norm(cfg.content_conv_channels),
        widen(cfg.content_conv_channels, cfg.content_linear_dim, rng),
        proj(cfg.content_linear_dim, cfg.d_code, rng),
        gru(cfg.d_code, cfg.content_rnn_hidden, rng),
        out(cfg.content_rnn_hidden, cfg.d_code, rng) {}

  ContentOut forward(const Tensor& mel, const Codebook& cb) const {
    if (mel.size(0) % 2 != 0)
      throw ShapeError("content encoder needs an even frame count, got " +
                       std::to_string(mel.size(0)));
    Tensor h = relu(norm.forward(conv.forward(transpose2d(mel))));  // [C, T/2]
    Tensor z_e = proj.forward(relu(widen.forward(transpose2d(h))));  // [T/2, d_code]
    QuantizeResult q = quantize(z_e, cb);
    ContentOut res;
    res.z_content = out.forward(gru.forward(q.codes).seq);
    res.vq_loss = q.vq_loss;
    res.z_e = z_e;
    res.indices = std::move(q.indices);
    return res;
  }

  void collect(ParamList& out_list) {
    conv.collect("content.conv", out_list);
    norm.collect("content.norm", out_list);
    widen.collect("content.widen", out_list);
    proj.collect("content.proj", out_list);
    gru.collect("content.gru", out_list);
    out.collect("content.out", out_list);
  }
};

// ConvBank over the mel channels, a conv stack, mean pooling over time, then
// a linear stack down to the embedding.
struct SpeakerEncoder {
  ConvBank bank;
  ChanNorm bank_norm;
  std::vector<Conv1d> convs;
  std::vector<ChanNorm> norms;
  std::vector<Linear> linears;

  SpeakerEncoder() = default;
  SpeakerEncoder(const ModelConfig& cfg, Rng& rng)
      : bank(80, cfg.spk_bank_channels, cfg.spk_bank_kernels, rng),
        bank_norm(cfg.spk_bank_channels * cfg.spk_bank_kernels) {
    int64_t cin = cfg.spk_bank_channels * cfg.spk_bank_kernels;
    for (int64_t i = 0; i < cfg.spk_conv_layers; ++i) {
      convs.emplace_back(cin, cfg.spk_conv_channels, 3, 1, rng);
      norms.emplace_back(cfg.spk_conv_channels);
      cin = cfg.spk_conv_channels;
    }
    for (int64_t i = 0; i < cfg.spk_linear_layers; ++i) {
      int64_t in_dim = (i == 0) ? cin : cfg.spk_linear_hidden;
      int64_t out_dim = (i == cfg.spk_linear_layers - 1) ? cfg.d_p : cfg.spk_linear_hidden;
      linears.emplace_back(in_dim, out_dim, rng);
    }
  }

  Tensor forward(const Tensor& mel) const {
    Tensor h = relu(bank_norm.forward(bank.forward(transpose2d(mel))));
    for (size_t i = 0; i < convs.size(); ++i) h = relu(norms[i].forward(convs[i].forward(h)));
    Tensor pooled = mean_rows(transpose2d(h));  // [C]
    for (size_t i = 0; i < linears.size(); ++i) {
      pooled = linears[i].forward(pooled);
      if (i + 1 < linears.size()) pooled = relu(pooled);
    }
    return pooled;
  }

  void collect(ParamList& out) {
    bank.collect("spk.bank", out);
    bank_norm.collect("spk.bank.norm", out);
    for (size_t i = 0; i < convs.size(); ++i) {
      std::string p = "spk.conv" + std::to_string(i + 1);
      convs[i].collect(p, out);
      norms[i].collect(p + ".norm", out);
    }
    for (size_t i = 0; i < linears.size(); ++i)
      linears[i].collect("spk.fc" + std::to_string(i + 1), out);
  }
};

// LSTM, three convs, two more LSTMs, linear out to 80 mel bins.
struct Decoder {
  Lstm lstm1;
  std::vector<Conv1d> convs;
  std::vector<ChanNorm> norms;
  Lstm lstm2, lstm3;
  Linear out;

  Decoder() = default;
  Decoder(const ModelConfig& cfg, Rng& rng)
      : lstm1(cfg.decoder_input_width(), cfg.dec_lstm1_hidden, rng),
        lstm2(cfg.dec_conv_channels, cfg.dec_lstm2_hidden, rng),
        lstm3(cfg.dec_lstm2_hidden, cfg.dec_lstm2_hidden, rng),
        out(cfg.dec_lstm2_hidden, 80, rng) {
    int64_t cin = cfg.dec_lstm1_hidden;
    for (int i = 0; i < 3; ++i) {
      convs.emplace_back(cin, cfg.dec_conv_channels, 3, 1, rng);
      norms.emplace_back(cfg.dec_conv_channels);
      cin = cfg.dec_conv_channels;
    }
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = transpose2d(lstm1.forward(x));  // [H, T]
    for (size_t i = 0; i < convs.size(); ++i) h = relu(norms[i].forward(convs[i].forward(h)));
    Tensor seq = lstm3.forward(lstm2.forward(transpose2d(h)));
    return out.forward(seq);  // [T, 80]
  }

  void collect(ParamList& out_list) {
    lstm1.collect("dec.lstm1", out_list);
    for (size_t i = 0; i < convs.size(); ++i) {
      std::string p = "dec.conv" + std::to_string(i + 1);
      convs[i].collect(p, out_list);
      norms[i].collect(p + ".norm", out_list);
    }
    lstm2.collect("dec.lstm2", out_list);
    lstm3.collect("dec.lstm3", out_list);
    out.collect("dec.out", out_list);
  }
};

// Repeats each content frame twice, broadcasts the two utterance vectors,
// appends pitch as one channel. Column order: [content | speaker | style | pitch].
inline Tensor upsample_and_concat(const RepBundle& b) {
  Tensor content = repeat_rows2(b.z_content);
  int64_t T = content.size(0);
  if (b.z_pitch.numel() != T)
    throw ShapeError("pitch length " + std::to_string(b.z_pitch.numel()) +
                     " does not match upsampled content frames " + std::to_string(T));
  Tensor spk = tile_rows(b.z_speaker, T);
  Tensor sty = tile_rows(b.z_style, T);
  Tensor pitch = reshape(b.z_pitch, {T, 1});
  return concat_lastdim(concat_lastdim(concat_lastdim(content, spk), sty), pitch);
}

inline Tensor reconstruction_loss(const Tensor& mel_hat, const Tensor& mel) {
  if (mel_hat.shape() != mel.shape())
    throw ShapeError("reconstruction loss shape mismatch: " + shape_str(mel_hat.shape()) +
                     " vs " + shape_str(mel.shape()));
  Tensor d = sub(mel_hat, mel);
  return add(mean_all(abs_t(d)), mul_scalar(mean_all(square(d)), 0.5));
}

struct EncodeOut {
  RepBundle bundle;
  Tensor vq_loss;
  Tensor z_e;
  std::vector<int64_t> indices;
};

struct Model {
  ModelConfig cfg;
  StyleEncoder style_enc;
  ContentEncoder content_enc;
  SpeakerEncoder speaker_enc;
  Decoder decoder;
  Codebook codebook;

  Model() = default;
  Model(const ModelConfig& config, Rng& rng)
      : cfg(config),
        style_enc(config, rng),
        content_enc(config, rng),
        speaker_enc(config, rng),
        decoder(config, rng),
        codebook(Codebook::init(config.k_codes, config.d_code, rng)) {}

  // the trainable parameters; codebook vectors move by EMA, not by gradient
  ParamList params() {
    ParamList out;
    style_enc.collect(out);
    content_enc.collect(out);
    speaker_enc.collect(out);
    decoder.collect(out);
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (auto& p : params()) n += p.tensor.numel();
    return n;
  }

  EncodeOut encode(const Tensor& mel, const Tensor& z_pitch) const {
    EncodeOut res;
    ContentOut c = content_enc.forward(mel, codebook);
    res.bundle.z_style = style_enc.forward(mel);
    res.bundle.z_speaker = speaker_enc.forward(mel);
    res.bundle.z_content = c.z_content;
    res.bundle.z_pitch = z_pitch;
    res.vq_loss = c.vq_loss;
    res.z_e = c.z_e;
    res.indices = std::move(c.indices);
    return res;
  }

  Tensor decode(const RepBundle& bundle) const { return decoder.forward(upsample_and_concat(bundle)); }
};

}  // namespace dvc
