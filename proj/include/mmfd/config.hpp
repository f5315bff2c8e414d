#pragma once

// Architecture and optimisation hyperparameters for one model variant.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mmfd {

/// Invalid configuration or experiment plan.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class AudioEncoderKind { none, vgg, w2v };

inline std::string to_string(AudioEncoderKind k) {
  switch (k) {
    case AudioEncoderKind::none: return "none";
    case AudioEncoderKind::vgg: return "vgg";
    case AudioEncoderKind::w2v: return "w2v";
  }
  return "?";
}

inline AudioEncoderKind audio_encoder_from_string(const std::string& s) {
  if (s == "none") return AudioEncoderKind::none;
  if (s == "vgg") return AudioEncoderKind::vgg;
  if (s == "w2v" || s == "wav2vec2" || s == "wav2vec2.0") return AudioEncoderKind::w2v;
  throw ConfigError("unknown audio encoder '" + s + "' (expected none, vgg or w2v)");
}

struct ConvStage {
  std::size_t width = 4;
  std::size_t stride = 2;
  bool operator==(const ConvStage&) const = default;
};

/// Which inputs of a post the model sees. Ablations retrain with a
/// different mask; they never switch modalities off at inference time.
struct ModalityMask {
  bool audio = true;
  bool text = true;
  bool video = true;
  bool social = true;

  bool any() const { return audio || text || video || social; }
  bool operator==(const ModalityMask&) const = default;

  std::string label() const {
    std::string s;
    auto add = [&](bool on, const char* n) {
      if (!on) return;
      if (!s.empty()) s += '+';
      s += n;
    };
    add(text, "text");
    add(audio, "audio");
    add(video, "video");
    add(social, "social");
    return s.empty() ? "none" : s;
  }
};

struct ModelConfig {
  // shared widths
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_hidden = 128;
  std::size_t encoder_depth = 2;  // transformer blocks in text/social/w2v encoders
  std::size_t fusion_depth = 1;   // blocks per fusion stage

  // text and social context
  std::size_t vocab_size = 256;
  std::size_t max_text_len = 32;

  // audio
  AudioEncoderKind audio_encoder = AudioEncoderKind::vgg;
  double sample_rate = 8000.0;
  std::size_t stft_window = 64;
  std::size_t stft_hop = 32;
  std::size_t n_mels = 16;
  std::size_t vgg_channels = 8;
  std::size_t vgg_blocks = 1;
  std::size_t w2v_channels = 32;
  std::vector<ConvStage> w2v_schedule{{4, 2}, {4, 2}};

  // video
  std::size_t frame_height = 8;
  std::size_t frame_width = 8;
  std::size_t frame_channels_in = 1;
  std::size_t frame_channels = 8;
  std::size_t clip_len = 4;
  std::size_t clip_channels = 32;

  // fusion and head
  ModalityMask modalities{};
  bool swap_attention_roles = false;  // alternative query/key assignment in the fusion stages
  bool social_positional = false;     // positional encodings on the six-slot sequence
  std::size_t classifier_hidden = 0;  // 0: single affine layer
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;

  // optimisation
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;

  std::size_t head_dim() const { return d_model / n_heads; }

  /// Smallest configuration that still exercises every code path.
  static ModelConfig minimal() {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 1;
    c.ffn_hidden = 8;
    c.encoder_depth = 1;
    c.fusion_depth = 1;
    c.vocab_size = 24;
    c.max_text_len = 8;
    c.vgg_channels = 2;
    c.w2v_channels = 3;
    c.frame_channels = 2;
    c.clip_channels = 3;
    c.dropout = 0.0;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (d_model == 0 || n_heads == 0) fail("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (ffn_hidden == 0) fail("ffn_hidden must be positive");
    if (fusion_depth == 0) fail("fusion_depth must be positive");
    if (vocab_size < 2) fail("vocab_size must be at least 2");
    if (max_text_len == 0) fail("max_text_len must be positive");
    if (!modalities.any()) fail("at least one modality must be enabled");
    if (modalities.audio != (audio_encoder != AudioEncoderKind::none)) {
      fail("audio is enabled iff an audio encoder is selected (audio=" + std::string(modalities.audio ? "on" : "off") +
           ", encoder=" + to_string(audio_encoder) + ")");
    }
    if (stft_window == 0 || stft_hop == 0 || n_mels == 0) fail("stft window, hop and n_mels must be positive");
    if (!(sample_rate > 0.0)) fail("sample_rate must be positive");
    if (vgg_channels == 0 || vgg_blocks == 0) fail("vgg needs at least one block and channel");
    if (w2v_channels == 0 || w2v_schedule.empty()) fail("w2v needs channels and a conv schedule");
    for (const auto& s : w2v_schedule)
      if (s.width == 0 || s.stride == 0) fail("w2v conv widths and strides must be positive");
    if (frame_height < 4 || frame_width < 4) fail("frames must be at least 4x4");
    if (frame_channels_in == 0 || frame_channels == 0 || clip_channels == 0) fail("video channels must be positive");
    if (clip_len == 0) fail("clip_len must be positive");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
    if (lr < 0.0 || weight_decay < 0.0) fail("lr and weight_decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModalityMask& m) {
  j = nlohmann::json::array();
  if (m.audio) j.push_back("audio");
  if (m.text) j.push_back("text");
  if (m.video) j.push_back("video");
  if (m.social) j.push_back("social");
}

inline void from_json(const nlohmann::json& j, ModalityMask& m) {
  m = ModalityMask{false, false, false, false};
  for (const auto& e : j) {
    const auto s = e.get<std::string>();
    if (s == "audio") m.audio = true;
    else if (s == "text") m.text = true;
    else if (s == "video") m.video = true;
    else if (s == "social") m.social = true;
    else throw ConfigError("unknown modality '" + s + "'");
  }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& s : c.w2v_schedule) sched.push_back({s.width, s.stride});
  j = nlohmann::json{
      {"d_model", c.d_model},
      {"n_heads", c.n_heads},
      {"ffn_hidden", c.ffn_hidden},
      {"encoder_depth", c.encoder_depth},
      {"fusion_depth", c.fusion_depth},
      {"vocab_size", c.vocab_size},
      {"max_text_len", c.max_text_len},
      {"audio_encoder", to_string(c.audio_encoder)},
      {"sample_rate", c.sample_rate},
      {"stft_window", c.stft_window},
      {"stft_hop", c.stft_hop},
      {"n_mels", c.n_mels},
      {"vgg_channels", c.vgg_channels},
      {"vgg_blocks", c.vgg_blocks},
      {"w2v_channels", c.w2v_channels},
      {"w2v_schedule", sched},
      {"frame_height", c.frame_height},
      {"frame_width", c.frame_width},
      {"frame_channels_in", c.frame_channels_in},
      {"frame_channels", c.frame_channels},
      {"clip_len", c.clip_len},
      {"clip_channels", c.clip_channels},
      {"modalities", c.modalities},
      {"swap_attention_roles", c.swap_attention_roles},
      {"social_positional", c.social_positional},
      {"classifier_hidden", c.classifier_hidden},
      {"dropout", c.dropout},
      {"layer_norm_eps", c.layer_norm_eps},
      {"seed", c.seed},
      {"lr", c.lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
  };
}

/// Missing keys keep their defaults, so partial JSON configs are fine.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("ffn_hidden", c.ffn_hidden);
  get("encoder_depth", c.encoder_depth);
  get("fusion_depth", c.fusion_depth);
  get("vocab_size", c.vocab_size);
  get("max_text_len", c.max_text_len);
  if (j.contains("audio_encoder")) c.audio_encoder = audio_encoder_from_string(j.at("audio_encoder").get<std::string>());
  get("sample_rate", c.sample_rate);
  get("stft_window", c.stft_window);
  get("stft_hop", c.stft_hop);
  get("n_mels", c.n_mels);
  get("vgg_channels", c.vgg_channels);
  get("vgg_blocks", c.vgg_blocks);
  get("w2v_channels", c.w2v_channels);
  if (j.contains("w2v_schedule")) {
    c.w2v_schedule.clear();
    for (const auto& s : j.at("w2v_schedule")) c.w2v_schedule.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  }
  get("frame_height", c.frame_height);
  get("frame_width", c.frame_width);
  get("frame_channels_in", c.frame_channels_in);
  get("frame_channels", c.frame_channels);
  get("clip_len", c.clip_len);
  get("clip_channels", c.clip_channels);
  get("modalities", c.modalities);
  get("swap_attention_roles", c.swap_attention_roles);
  get("social_positional", c.social_positional);
  get("classifier_hidden", c.classifier_hidden);
  get("dropout", c.dropout);
  get("layer_norm_eps", c.layer_norm_eps);
  get("seed", c.seed);
  get("lr", c.lr);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
}

}  // namespace mmfd
