#pragma once

// Multimodal fusion network: modality encoders, two cross-attention fusion
// stages (text<->audio, then audio-enhanced text<->frames), per-sequence
// mean pooling into six slot vectors, self-attention across the slots, a
// final transformer layer and a two-way classifier (0 = real, 1 = fake).

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mmfd/encoders.hpp"
#include "mmfd/sample.hpp"

namespace mmfd {

/// Order of the six pooled features fed to the slot self-attention.
enum Slot : std::size_t { kSlotText = 0, kSlotAudio, kSlotFrame, kSlotClip, kSlotUser, kSlotComment, kSlotCount };

inline const char* slot_name(std::size_t s) {
  static const char* names[] = {"text", "audio", "frame", "clip", "user", "comment"};
  return s < kSlotCount ? names[s] : "?";
}

/// x_t, x_a, x_f, x_c, x_u, x_m, each [d_model].
using FusedFeatures = std::array<Tensor, kSlotCount>;

/// Sample with model-ready tensors (mel frames are computed once here so
/// training epochs do not repeat the STFT).
struct PreparedSample {
  const MultimodalSample* sample = nullptr;
  Tensor waveform;  // [len × 1]
  std::optional<MelFrames> mel;
  Tensor frames;  // [F × H × W × ch]
};

inline PreparedSample prepare(const MultimodalSample& s, const ModelConfig& c) {
  PreparedSample p;
  p.sample = &s;
  if (c.modalities.audio) {
    if (s.waveform.empty()) throw InputError("sample " + s.id + ": audio is enabled but the waveform is missing");
    p.waveform = Tensor({s.waveform.size(), 1}, s.waveform);
    if (c.audio_encoder == AudioEncoderKind::vgg)
      p.mel = mel_spectrogram(s.waveform, MelSettings{c.sample_rate, c.stft_window, c.stft_hop, c.n_mels});
  }
  if (c.modalities.video) {
    if (s.frames.empty()) throw InputError("sample " + s.id + ": video is enabled but the frames are missing");
    p.frames = s.frames_tensor();
  }
  if (c.modalities.text && s.text_tokens.empty())
    throw InputError("sample " + s.id + ": text is enabled but the text tokens are missing");
  if (c.modalities.social && s.user_tokens.empty())
    throw InputError("sample " + s.id + ": social is enabled but the user tokens are missing");
  return p;
}

/// Optional hooks for tests: attention weights of every block evaluated.
struct ForwardTrace {
  std::vector<AttentionTrace> attention;
  std::optional<FusedFeatures> pooled;
};

/// One fusion stage: `depth` cross-attention blocks that repeatedly refine
/// the query sequence against a fixed key/value sequence.
struct FusionStage {
  std::vector<AttentionBlock> blocks;

  FusionStage() = default;
  FusionStage(ParamSet& ps, const std::string& name, const ModelConfig& c) {
    for (std::size_t i = 0; i < c.fusion_depth; ++i)
      blocks.emplace_back(ps, name + ".block" + std::to_string(i), c.d_model, c.n_heads, c.ffn_hidden,
                          c.layer_norm_eps);
  }

  Tensor operator()(const Tensor& query, const Tensor& source, const ForwardContext& ctx,
                    ForwardTrace* trace) const {
    Tensor x = query;
    for (const auto& b : blocks) {
      AttentionTrace t;
      x = b(x, source, ctx, trace ? &t : nullptr);
      if (trace) trace->attention.push_back(std::move(t));
    }
    return x;
  }
};

/// Cross-attention: queries from `query`, keys and values from `source`.
/// Output length equals the query length.
inline FeatureSequence cross_attention(const FeatureSequence& query, const FeatureSequence& source,
                                       const AttentionBlock& params, const ForwardContext& ctx = {},
                                       AttentionTrace* trace = nullptr) {
  return {query.kind, params(query.features, source.features, ctx, trace)};
}

inline Tensor pool_mean(const FeatureSequence& f) { return mean_rows(f.features); }

class FusionModel {
 public:
  explicit FusionModel(const ModelConfig& config) : config_(config), params_(config.seed) {
    config_.validate();
    const auto& c = config_;
    const auto& m = c.modalities;
    if (m.text) text_ = TextEncoderParams(params_, "text", c, c.encoder_depth);
    if (m.audio && c.audio_encoder == AudioEncoderKind::vgg) vgg_ = VggEncoderParams(params_, "audio_vgg", c);
    if (m.audio && c.audio_encoder == AudioEncoderKind::w2v) w2v_ = W2vEncoderParams(params_, "audio_w2v", c);
    if (m.video) {
      frame_ = FrameEncoderParams(params_, "frame", c);
      clip_ = ClipEncoderParams(params_, "clip", c);
    }
    if (m.social) {
      user_ = TextEncoderParams(params_, "user", c, c.encoder_depth);
      comment_ = TextEncoderParams(params_, "comment", c, c.encoder_depth);
    }
    if (m.text && m.audio) {
      stage1_text_ = FusionStage(params_, "stage1.text_from_audio", c);
      stage1_audio_ = FusionStage(params_, "stage1.audio_from_text", c);
    }
    if (m.text && m.video) {
      stage2_text_ = FusionStage(params_, "stage2.text_from_frames", c);
      stage2_frame_ = FusionStage(params_, "stage2.frames_from_text", c);
    }
    for (std::size_t s = 0; s < kSlotCount; ++s)
      placeholder_[s] = params_.make(std::string("placeholder.") + slot_name(s), {c.d_model}, Init::embedding);
    slot_attention_ = AttentionBlock(params_, "slots.self_attention", c.d_model, c.n_heads, c.ffn_hidden,
                                     c.layer_norm_eps);
    aggregate_ = AttentionBlock(params_, "aggregate.transformer", c.d_model, c.n_heads, c.ffn_hidden,
                                c.layer_norm_eps);
    if (c.classifier_hidden > 0) {
      hidden_ = Linear(params_, "classifier.hidden", c.d_model, c.classifier_hidden);
      classifier_ = Linear(params_, "classifier.out", c.classifier_hidden, 2);
    } else {
      classifier_ = Linear(params_, "classifier.out", c.d_model, 2);
    }
  }

  // The registry hands out shared handles; copies would alias parameters.
  FusionModel(const FusionModel&) = delete;
  FusionModel& operator=(const FusionModel&) = delete;
  FusionModel(FusionModel&&) = default;

  const ModelConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  const TextEncoderParams& text_encoder() const { return text_; }
  const TextEncoderParams& user_encoder() const { return user_; }
  const TextEncoderParams& comment_encoder() const { return comment_; }
  const VggEncoderParams& vgg_encoder() const { return vgg_; }
  const W2vEncoderParams& w2v_encoder() const { return w2v_; }
  const FrameEncoderParams& frame_encoder() const { return frame_; }
  const ClipEncoderParams& clip_encoder() const { return clip_; }
  const AttentionBlock& slot_attention() const { return slot_attention_; }
  const AttentionBlock& aggregate_block() const { return aggregate_; }
  const Linear& classifier() const { return classifier_; }
  const Tensor& placeholder(std::size_t slot) const { return placeholder_.at(slot); }

  /// Encoder evaluation counts: text, audio, frame, clip, user, comment.
  std::array<std::size_t, kSlotCount> encoder_evaluations() const {
    return {text_.evaluations,  vgg_.evaluations + w2v_.evaluations, frame_.evaluations, clip_.evaluations,
            user_.evaluations, comment_.evaluations};
  }

  /// Text/audio stage. Returns (audio-enhanced text, text-enhanced audio).
  std::pair<Tensor, Tensor> fuse_stage1(const Tensor& text, const Tensor& audio, const ForwardContext& ctx = {},
                                        ForwardTrace* trace = nullptr) const {
    return run_stage(stage1_text_, stage1_audio_, text, audio, ctx, trace);
  }

  /// Audio-enhanced text / frame stage. Returns (text enhanced by audio and
  /// frames, text-enhanced frames).
  std::pair<Tensor, Tensor> fuse_stage2(const Tensor& text_audio, const Tensor& frames, const ForwardContext& ctx = {},
                                        ForwardTrace* trace = nullptr) const {
    return run_stage(stage2_text_, stage2_frame_, text_audio, frames, ctx, trace);
  }

  /// Self-attention across the six slot vectors; order is preserved.
  std::vector<Tensor> social_self_attention(const std::vector<Tensor>& content, const std::vector<Tensor>& social,
                                            const ForwardContext& ctx = {}, ForwardTrace* trace = nullptr) const {
    if (content.size() + social.size() != kSlotCount) {
      throw ContractError("social_self_attention: expected six features, got " +
                          std::to_string(content.size() + social.size()));
    }
    std::vector<Tensor> all(content);
    all.insert(all.end(), social.begin(), social.end());
    Tensor seq = concat_rows(all);
    if (config_.social_positional) seq = add_positional(seq);
    AttentionTrace t;
    Tensor out = slot_attention_(seq, seq, ctx, trace ? &t : nullptr);
    if (trace) trace->attention.push_back(std::move(t));
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < kSlotCount; ++i) rows.push_back(row(out, i));
    return rows;
  }

  /// Final transformer layer over the six slots → mean → classifier → [2].
  Tensor aggregate_classify(const FusedFeatures& fused, const ForwardContext& ctx = {},
                            ForwardTrace* trace = nullptr) const {
    Tensor seq = concat_rows(std::vector<Tensor>(fused.begin(), fused.end()));
    AttentionTrace t;
    Tensor out = aggregate_(seq, seq, ctx, trace ? &t : nullptr);
    if (trace) trace->attention.push_back(std::move(t));
    Tensor pooled = reshape(mean_rows(out), {1, config_.d_model});
    if (config_.classifier_hidden > 0) pooled = gelu(hidden_(pooled));
    return reshape(classifier_(pooled), {2});
  }

  Tensor forward(const PreparedSample& in, const ForwardContext& ctx = {}, ForwardTrace* trace = nullptr) const {
    const auto& c = config_;
    const auto& m = c.modalities;
    const MultimodalSample& s = *in.sample;

    std::optional<Tensor> text, audio, frames, clip, user, comment;
    if (m.text) text = encode_text(s.text_tokens, text_, c, ctx).features;
    if (m.audio) {
      if (c.audio_encoder == AudioEncoderKind::vgg) {
        if (!in.mel) throw InputError("forward: sample " + s.id + " was prepared without mel frames");
        // The conv stack is translation invariant; position enters here,
        // before the first attention layer that sees the sequence.
        audio = add_positional(encode_audio_vgg(*in.mel, vgg_, c).features);
      } else {
        if (!in.waveform.defined()) throw InputError("forward: sample " + s.id + " is missing the audio modality");
        audio = encode_audio_w2v(in.waveform, w2v_, c, ctx).features;
      }
    }
    if (m.video) {
      if (!in.frames.defined()) throw InputError("forward: sample " + s.id + " is missing the video modality");
      frames = add_positional(encode_frames(in.frames, frame_, c).features);
      clip = encode_clips(in.frames, clip_, c).features;
    }
    if (m.social) {
      auto [u, cm] = encode_social(s.user_tokens, s.comment_tokens, user_, comment_, c, ctx);
      user = u.features;
      comment = cm.features;
    }

    // A stage runs only when both of its inputs exist; otherwise each
    // present input passes through unchanged.
    std::optional<Tensor> text_audio = text, audio_text = audio;
    if (text && audio) std::tie(text_audio, audio_text) = fuse_stage1(*text, *audio, ctx, trace);
    std::optional<Tensor> text_full = text_audio, frame_text = frames;
    if (text_audio && frames) std::tie(text_full, frame_text) = fuse_stage2(*text_audio, *frames, ctx, trace);

    FusedFeatures pooled;
    auto slot = [&](std::size_t i, const std::optional<Tensor>& seq) {
      pooled[i] = seq ? mean_rows(*seq) : placeholder_[i];
    };
    slot(kSlotText, text_full);
    slot(kSlotAudio, audio_text);
    slot(kSlotFrame, frame_text);
    slot(kSlotClip, clip);
    slot(kSlotUser, user);
    slot(kSlotComment, comment);

    auto enhanced = social_self_attention({pooled.begin(), pooled.begin() + kSlotUser},
                                          {pooled.begin() + kSlotUser, pooled.end()}, ctx, trace);
    if (trace) trace->pooled = pooled;
    FusedFeatures fused;
    std::copy(enhanced.begin(), enhanced.end(), fused.begin());
    return aggregate_classify(fused, ctx, trace);
  }

  Tensor forward(const MultimodalSample& s, const ForwardContext& ctx = {}, ForwardTrace* trace = nullptr) const {
    return forward(prepare(s, config_), ctx, trace);
  }

 private:
  std::pair<Tensor, Tensor> run_stage(const FusionStage& first_from_second, const FusionStage& second_from_first,
                                      const Tensor& a, const Tensor& b, const ForwardContext& ctx,
                                      ForwardTrace* trace) const {
    if (first_from_second.blocks.empty()) throw ContractError("fusion stage is not part of this configuration");
    if (config_.swap_attention_roles) {
      // Alternative reading: the arrow source supplies the queries.
      return {first_from_second(b, a, ctx, trace), second_from_first(a, b, ctx, trace)};
    }
    return {first_from_second(a, b, ctx, trace), second_from_first(b, a, ctx, trace)};
  }

  ModelConfig config_;
  ParamSet params_;
  TextEncoderParams text_, user_, comment_;
  VggEncoderParams vgg_;
  W2vEncoderParams w2v_;
  FrameEncoderParams frame_;
  ClipEncoderParams clip_;
  FusionStage stage1_text_, stage1_audio_, stage2_text_, stage2_frame_;
  std::array<Tensor, kSlotCount> placeholder_;
  AttentionBlock slot_attention_, aggregate_;
  Linear hidden_, classifier_;
};

}  // namespace mmfd
