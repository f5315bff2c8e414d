#pragma once

// Per-modality feature extractors. Each produces a FeatureSequence of width
// d_model. All encoders are trained from scratch together with the fusion
// network.

#include <string>
#include <vector>

#include "mmfd/audio.hpp"
#include "mmfd/config.hpp"
#include "mmfd/layers.hpp"
#include "mmfd/sample.hpp"

namespace mmfd {

enum class FeatureKind { text, audio, frame, clip, user, comment };

inline const char* to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::text: return "text";
    case FeatureKind::audio: return "audio";
    case FeatureKind::frame: return "frame";
    case FeatureKind::clip: return "clip";
    case FeatureKind::user: return "user";
    case FeatureKind::comment: return "comment";
  }
  return "?";
}

struct FeatureSequence {
  FeatureKind kind = FeatureKind::text;
  Tensor features;  // [L × d_model]

  std::size_t length() const { return features.dim(0); }
  std::size_t width() const { return features.dim(1); }
};

// ---------------------------------------------------------------- text ----

/// Token embedding + fixed positional table + encoder_depth self-attention
/// blocks. Also used (with separate weights) for user info and comments.
struct TextEncoderParams {
  Tensor embedding;  // [vocab × d_model]
  std::vector<AttentionBlock> blocks;
  mutable std::size_t evaluations = 0;

  TextEncoderParams() = default;
  TextEncoderParams(ParamSet& ps, const std::string& name, const ModelConfig& c, std::size_t depth)
      : embedding(ps.make(name + ".embedding", {c.vocab_size, c.d_model}, Init::embedding)) {
    for (std::size_t i = 0; i < depth; ++i)
      blocks.emplace_back(ps, name + ".block" + std::to_string(i), c.d_model, c.n_heads, c.ffn_hidden,
                          c.layer_norm_eps);
  }
};

inline void check_tokens(const std::vector<int>& tokens, const ModelConfig& c, const char* what) {
  if (tokens.empty()) throw InputError(std::string(what) + ": empty token sequence");
  if (tokens.size() > c.max_text_len) {
    throw InputError(std::string(what) + ": " + std::to_string(tokens.size()) + " tokens exceed max_text_len " +
                     std::to_string(c.max_text_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
      throw InputError(std::string(what) + ": token " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " is outside the vocabulary of " + std::to_string(c.vocab_size));
    }
  }
}

inline Tensor run_token_encoder(const std::vector<int>& tokens, const TextEncoderParams& p, const ModelConfig& c,
                                const ForwardContext& ctx, const char* what) {
  check_tokens(tokens, c, what);
  ++p.evaluations;
  Tensor x = add_positional(gather_rows(p.embedding, tokens));
  for (const auto& b : p.blocks) x = b(x, x, ctx);
  return x;
}

inline FeatureSequence encode_text(const std::vector<int>& tokens, const TextEncoderParams& p, const ModelConfig& c,
                                   const ForwardContext& ctx = {}) {
  return {FeatureKind::text, run_token_encoder(tokens, p, c, ctx, "encode_text")};
}

/// User information and comments go through two independent token
/// encoders. An empty comment stream becomes a single PAD token.
inline std::pair<FeatureSequence, FeatureSequence> encode_social(const std::vector<int>& user_tokens,
                                                                 const std::vector<int>& comment_tokens,
                                                                 const TextEncoderParams& user,
                                                                 const TextEncoderParams& comment,
                                                                 const ModelConfig& c, const ForwardContext& ctx = {}) {
  static const std::vector<int> pad_only{kPadToken};
  const auto& ut = user_tokens.empty() ? pad_only : user_tokens;
  const auto& ct = comment_tokens.empty() ? pad_only : comment_tokens;
  return {FeatureSequence{FeatureKind::user, run_token_encoder(ut, user, c, ctx, "encode_social(user)")},
          FeatureSequence{FeatureKind::comment, run_token_encoder(ct, comment, c, ctx, "encode_social(comment)")}};
}

// ----------------------------------------------------------- audio/vgg ----

/// conv2d(3x3) → relu → conv2d(3x3) → relu → maxpool(2, 2) over the
/// time × mel plane, repeated vgg_blocks times.
struct VggBlockParams {
  Tensor conv_a, bias_a, conv_b, bias_b;
};

struct VggEncoderParams {
  std::vector<VggBlockParams> blocks;
  Linear proj;
  mutable std::size_t evaluations = 0;

  VggEncoderParams() = default;
  VggEncoderParams(ParamSet& ps, const std::string& name, const ModelConfig& c) {
    std::size_t cin = 1;
    for (std::size_t b = 0; b < c.vgg_blocks; ++b) {
      const std::string n = name + ".block" + std::to_string(b);
      const std::size_t ch = c.vgg_channels;
      blocks.push_back({ps.make(n + ".conv_a", {ch, cin, 3, 3}, Init::xavier, cin * 9, ch * 9),
                        ps.make(n + ".bias_a", {ch}, Init::zeros),
                        ps.make(n + ".conv_b", {ch, ch, 3, 3}, Init::xavier, ch * 9, ch * 9),
                        ps.make(n + ".bias_b", {ch}, Init::zeros)});
      cin = ch;
    }
    proj = Linear(ps, name + ".proj", vgg_output_mels(c) * c.vgg_channels, c.d_model);
  }

  static std::size_t block_out(std::size_t extent) { return extent < 6 ? 0 : (extent - 4 - 2) / 2 + 1; }

  /// Width of the mel axis after all blocks.
  static std::size_t vgg_output_mels(const ModelConfig& c) {
    std::size_t m = c.n_mels;
    for (std::size_t b = 0; b < c.vgg_blocks; ++b) {
      m = block_out(m);
      if (m == 0) throw ConfigError("vgg: n_mels=" + std::to_string(c.n_mels) + " too small for " +
                                    std::to_string(c.vgg_blocks) + " blocks");
    }
    return m;
  }

  /// Fewest mel frames that survive every block.
  static std::size_t min_frames(const ModelConfig& c) {
    std::size_t t = 1;
    for (std::size_t b = 0; b < c.vgg_blocks; ++b) t = (t - 1) * 2 + 2 + 4;
    return t;
  }
};

inline Tensor conv2d_bias(const Tensor& x, const Tensor& k, const Tensor& b) { return add_row(conv2d(x, k, 1), b); }

inline FeatureSequence encode_audio_vgg(const MelFrames& mel, const VggEncoderParams& p, const ModelConfig& c) {
  const Tensor& m = mel.frames;
  if (m.rank() != 2 || m.dim(1) != c.n_mels) {
    throw ShapeError("encode_audio_vgg: mel " + shape_str(m.shape()) + " does not have n_mels=" +
                     std::to_string(c.n_mels) + " columns");
  }
  ++p.evaluations;
  Tensor x = reshape(m, {m.dim(0), m.dim(1), 1});
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    if (x.dim(0) < 6) {
      throw ShapeError("encode_audio_vgg: block " + std::to_string(b) + " needs at least 6 time steps, got " +
                       std::to_string(x.dim(0)) + " (input has " + std::to_string(m.dim(0)) + " frames)");
    }
    const auto& blk = p.blocks[b];
    x = relu(conv2d_bias(x, blk.conv_a, blk.bias_a));
    x = relu(conv2d_bias(x, blk.conv_b, blk.bias_b));
    x = pool2d(x, PoolKind::max, 2, 2);
  }
  Tensor flat = reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
  return {FeatureKind::audio, p.proj(flat)};
}

// ----------------------------------------------------------- audio/w2v ----

/// Strided conv1d stack (gelu after each layer) → layer_norm → linear to
/// d_model → positional table → encoder_depth transformer blocks.
struct W2vEncoderParams {
  std::vector<Tensor> conv;
  std::vector<Tensor> conv_bias;
  std::vector<std::size_t> strides;
  LayerNormParams norm;
  Linear proj;
  std::vector<AttentionBlock> blocks;
  mutable std::size_t evaluations = 0;

  W2vEncoderParams() = default;
  W2vEncoderParams(ParamSet& ps, const std::string& name, const ModelConfig& c) {
    std::size_t cin = 1;
    for (std::size_t i = 0; i < c.w2v_schedule.size(); ++i) {
      const auto& s = c.w2v_schedule[i];
      const std::string n = name + ".conv" + std::to_string(i);
      conv.push_back(ps.make(n + ".kernel", {c.w2v_channels, cin, s.width}, Init::xavier, cin * s.width,
                             c.w2v_channels * s.width));
      conv_bias.push_back(ps.make(n + ".bias", {c.w2v_channels}, Init::zeros));
      strides.push_back(s.stride);
      cin = c.w2v_channels;
    }
    norm = LayerNormParams(ps, name + ".norm", c.w2v_channels);
    proj = Linear(ps, name + ".proj", c.w2v_channels, c.d_model);
    for (std::size_t i = 0; i < c.encoder_depth; ++i)
      blocks.emplace_back(ps, name + ".block" + std::to_string(i), c.d_model, c.n_heads, c.ffn_hidden,
                          c.layer_norm_eps);
  }

  /// Shortest waveform the conv schedule accepts.
  static std::size_t min_length(const ModelConfig& c) {
    std::size_t len = 1;
    for (auto it = c.w2v_schedule.rbegin(); it != c.w2v_schedule.rend(); ++it) len = (len - 1) * it->stride + it->width;
    return len;
  }

  static std::size_t output_length(const ModelConfig& c, std::size_t len) {
    for (const auto& s : c.w2v_schedule) {
      if (len < s.width) return 0;
      len = (len - s.width) / s.stride + 1;
    }
    return len;
  }
};

/// Output of the conv feature extractor alone, [L' × w2v_channels].
inline Tensor w2v_conv_features(const Tensor& waveform, const W2vEncoderParams& p) {
  Tensor x = waveform;
  for (std::size_t i = 0; i < p.conv.size(); ++i) x = gelu(add_row(conv1d(x, p.conv[i], p.strides[i]), p.conv_bias[i]));
  return x;
}

/// waveform: [len × 1].
inline FeatureSequence encode_audio_w2v(const Tensor& waveform, const W2vEncoderParams& p, const ModelConfig& c,
                                        const ForwardContext& ctx = {}) {
  if (waveform.rank() != 2 || waveform.dim(1) != 1) {
    throw ShapeError("encode_audio_w2v: waveform must be [len x 1], got " + shape_str(waveform.shape()));
  }
  const std::size_t need = W2vEncoderParams::min_length(c);
  if (waveform.dim(0) < need) {
    throw InputError("encode_audio_w2v: waveform of " + std::to_string(waveform.dim(0)) +
                     " samples is shorter than the minimum length " + std::to_string(need));
  }
  ++p.evaluations;
  Tensor x = p.norm(w2v_conv_features(waveform, p), c.layer_norm_eps);
  x = add_positional(p.proj(x));
  for (const auto& b : p.blocks) x = b(x, x, ctx);
  return {FeatureKind::audio, x};
}

// --------------------------------------------------------------- video ----

/// Frame level: one shared conv2d(3x3) → relu → maxpool(2,2) → linear per
/// frame; no mixing across frames.
struct FrameEncoderParams {
  Tensor conv, bias;
  Linear proj;
  mutable std::size_t evaluations = 0;

  FrameEncoderParams() = default;
  FrameEncoderParams(ParamSet& ps, const std::string& name, const ModelConfig& c)
      : conv(ps.make(name + ".conv", {c.frame_channels, c.frame_channels_in, 3, 3}, Init::xavier,
                     c.frame_channels_in * 9, c.frame_channels * 9)),
        bias(ps.make(name + ".bias", {c.frame_channels}, Init::zeros)),
        proj(ps, name + ".proj", ((c.frame_height - 2 - 2) / 2 + 1) * ((c.frame_width - 2 - 2) / 2 + 1) * c.frame_channels,
             c.d_model) {}
};

inline void check_frames(const Tensor& frames, const ModelConfig& c, const char* what) {
  if (frames.rank() != 4 || frames.dim(1) != c.frame_height || frames.dim(2) != c.frame_width ||
      frames.dim(3) != c.frame_channels_in) {
    throw ShapeError(std::string(what) + ": frames " + shape_str(frames.shape()) + " do not match [F x " +
                     std::to_string(c.frame_height) + " x " + std::to_string(c.frame_width) + " x " +
                     std::to_string(c.frame_channels_in) + "]");
  }
}

inline FeatureSequence encode_frames(const Tensor& frames, const FrameEncoderParams& p, const ModelConfig& c) {
  check_frames(frames, c, "encode_frames");
  ++p.evaluations;
  std::vector<Tensor> rows;
  rows.reserve(frames.dim(0));
  for (std::size_t f = 0; f < frames.dim(0); ++f) {
    Tensor x = relu(conv2d_bias(slice_first(frames, f), p.conv, p.bias));
    x = pool2d(x, PoolKind::max, 2, 2);
    rows.push_back(reshape(x, {1, x.numel()}));
  }
  return {FeatureKind::frame, p.proj(concat_rows(rows))};
}

/// Clip level: each frame is mean-pooled 2x2 and flattened; a temporal
/// conv1d of width clip_len slides over the frame sequence (one output per
/// window of clip_len consecutive frames) → relu → linear; the windows are
/// then averaged into one motion feature.
struct ClipEncoderParams {
  Tensor conv, bias;
  Linear proj;
  mutable std::size_t evaluations = 0;

  ClipEncoderParams() = default;
  ClipEncoderParams(ParamSet& ps, const std::string& name, const ModelConfig& c)
      : conv(ps.make(name + ".conv", {c.clip_channels, spatial_dim(c), c.clip_len}, Init::xavier,
                     spatial_dim(c) * c.clip_len, c.clip_channels * c.clip_len)),
        bias(ps.make(name + ".bias", {c.clip_channels}, Init::zeros)),
        proj(ps, name + ".proj", c.clip_channels, c.d_model) {}

  static std::size_t spatial_dim(const ModelConfig& c) {
    return (c.frame_height / 2) * (c.frame_width / 2) * c.frame_channels_in;
  }
};

/// Per-window features [windows × d_model] before averaging.
inline Tensor clip_window_features(const Tensor& frames, const ClipEncoderParams& p) {
  std::vector<Tensor> rows;
  rows.reserve(frames.dim(0));
  for (std::size_t f = 0; f < frames.dim(0); ++f) {
    Tensor x = pool2d(slice_first(frames, f), PoolKind::mean, 2, 2);
    rows.push_back(reshape(x, {1, x.numel()}));
  }
  Tensor seq = concat_rows(rows);  // [F × spatial]
  return p.proj(relu(add_row(conv1d(seq, p.conv, 1), p.bias)));
}

inline FeatureSequence encode_clips(const Tensor& frames, const ClipEncoderParams& p, const ModelConfig& c) {
  check_frames(frames, c, "encode_clips");
  if (frames.dim(0) < c.clip_len) {
    throw InputError("encode_clips: " + std::to_string(frames.dim(0)) + " frames are fewer than clip_len " +
                     std::to_string(c.clip_len));
  }
  ++p.evaluations;
  Tensor pooled = mean_rows(clip_window_features(frames, p));
  return {FeatureKind::clip, reshape(pooled, {1, c.d_model})};
}

}  // namespace mmfd
