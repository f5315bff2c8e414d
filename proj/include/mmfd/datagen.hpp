#pragma once

// Synthetic cross-modal-consistency corpus.
//
// Every post has three hidden topic codes. Text shows topic_text through a
// topic-specific token range, audio plays a tone in the mel band assigned
// to topic_audio during the signal window, and frames light the row group
// of topic_video during the same window. A post is real iff the three codes
// agree. Outside the window, audio and frames carry a distractor topic, so
// a model has to read the window, not just detect which tones are present.

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfd/audio.hpp"
#include "mmfd/checkpoint.hpp"
#include "mmfd/config.hpp"
#include "mmfd/rng.hpp"
#include "mmfd/sample.hpp"

namespace mmfd {

struct CorpusSpec {
  std::size_t n_samples = 2000;
  std::size_t n_topics = 4;
  double noise_level = 0.0;  // white-noise std added to audio and frames
  double fake_fraction = 0.5;
  std::uint64_t seed = 0;
  // signal window in audio hop units; frames use the proportional range
  std::size_t window_begin = 0;
  std::size_t window_end = 8;
  bool social_signal = false;
  double social_signal_rate = 0.3;

  // payload geometry
  double sample_rate = 8000.0;
  std::size_t stft_window = 64;
  std::size_t hop = 32;
  std::size_t n_mels = 16;
  std::size_t waveform_hops = 16;  // waveform length = waveform_hops · hop
  std::size_t n_frames = 8;
  std::size_t frame_height = 8;
  std::size_t frame_width = 8;
  std::size_t frame_channels = 1;
  std::size_t text_len = 16;
  std::size_t user_len = 4;
  std::size_t max_comment_len = 8;
  std::size_t vocab_size = 256;

  std::size_t waveform_length() const { return waveform_hops * hop; }
  MelSettings mel_settings() const { return {sample_rate, stft_window, hop, n_mels}; }
  bool operator==(const CorpusSpec&) const = default;
};

inline constexpr std::size_t kTopicTokenBase = 16;
inline constexpr std::size_t kTopicTokenSpan = 16;
inline constexpr int kSocialRealMarker = 1;
inline constexpr int kSocialFakeMarker = 2;

inline std::size_t filler_token_begin(const CorpusSpec& s) { return kTopicTokenBase + kTopicTokenSpan * s.n_topics; }

/// Token range [first, last) that marks topic z in text.
inline std::pair<int, int> topic_token_range(std::size_t z) {
  const auto lo = kTopicTokenBase + kTopicTokenSpan * z;
  return {static_cast<int>(lo), static_cast<int>(lo + kTopicTokenSpan)};
}

/// Mel band carrying topic z: resolvable bands, evenly strided, anchored at
/// the highest one.
inline std::vector<std::size_t> topic_bands(const CorpusSpec& s) {
  const auto bands = MelFilterbank(s.mel_settings()).resolvable_bands();
  if (s.n_topics > bands.size()) {
    throw ConfigError("corpus: " + std::to_string(s.n_topics) + " topics but only " + std::to_string(bands.size()) +
                      " mel bands are wide enough to carry a tone");
  }
  const std::size_t stride = bands.size() / s.n_topics;
  std::vector<std::size_t> out(s.n_topics);
  for (std::size_t z = 0; z < s.n_topics; ++z) out[z] = bands[bands.size() - 1 - (s.n_topics - 1 - z) * stride];
  return out;
}

/// Frames whose time span lies in the signal window.
inline std::pair<std::size_t, std::size_t> frame_window(const CorpusSpec& s) {
  return {s.window_begin * s.n_frames / s.waveform_hops, s.window_end * s.n_frames / s.waveform_hops};
}

/// Row group lit by topic z in a frame.
inline std::size_t row_group(std::size_t row, const CorpusSpec& s) { return row * s.n_topics / s.frame_height; }

inline void validate(const CorpusSpec& s) {
  auto fail = [](const std::string& m) { throw ConfigError("corpus spec: " + m); };
  if (s.n_samples == 0) fail("n_samples must be positive");
  if (s.n_topics < 2) fail("n_topics must be at least 2");
  if (!(s.noise_level >= 0.0) || !std::isfinite(s.noise_level)) fail("noise_level must be finite and >= 0");
  if (!(s.fake_fraction > 0.0 && s.fake_fraction < 1.0)) fail("fake_fraction must lie in (0, 1)");
  if (s.hop == 0 || s.stft_window == 0 || s.n_mels == 0) fail("audio geometry must be positive");
  if (s.waveform_length() < s.stft_window) fail("waveform shorter than one STFT window");
  if (s.window_begin >= s.window_end || s.window_end > s.waveform_hops) fail("signal window must satisfy 0 <= begin < end <= waveform_hops");
  if (s.window_end - s.window_begin == s.waveform_hops) fail("signal window may not cover the whole waveform");
  const auto [fb, fe] = frame_window(s);
  if (fb >= fe) fail("signal window covers no whole frame");
  if (s.n_frames == 0 || s.frame_height == 0 || s.frame_width == 0 || s.frame_channels == 0) fail("frame geometry must be positive");
  if (s.n_topics > s.frame_height) fail("more topics than frame rows");
  if (s.text_len == 0 || s.user_len == 0) fail("token sequences must be non-empty");
  if (filler_token_begin(s) >= s.vocab_size) fail("vocab_size too small for " + std::to_string(s.n_topics) + " topics");
  if (!(s.social_signal_rate >= 0.0 && s.social_signal_rate <= 1.0)) fail("social_signal_rate must lie in [0, 1]");
  (void)topic_bands(s);
}

inline void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"n_samples", s.n_samples},       {"n_topics", s.n_topics},
       {"noise_level", s.noise_level},   {"fake_fraction", s.fake_fraction},
       {"seed", s.seed},                 {"window_begin", s.window_begin},
       {"window_end", s.window_end},     {"social_signal", s.social_signal},
       {"social_signal_rate", s.social_signal_rate},
       {"sample_rate", s.sample_rate},   {"stft_window", s.stft_window},
       {"hop", s.hop},                   {"n_mels", s.n_mels},
       {"waveform_hops", s.waveform_hops}, {"n_frames", s.n_frames},
       {"frame_height", s.frame_height}, {"frame_width", s.frame_width},
       {"frame_channels", s.frame_channels}, {"text_len", s.text_len},
       {"user_len", s.user_len},         {"max_comment_len", s.max_comment_len},
       {"vocab_size", s.vocab_size}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_samples", d.n_samples);
  get("n_topics", d.n_topics);
  get("noise_level", d.noise_level);
  get("fake_fraction", d.fake_fraction);
  get("seed", d.seed);
  get("window_begin", d.window_begin);
  get("window_end", d.window_end);
  get("social_signal", d.social_signal);
  get("social_signal_rate", d.social_signal_rate);
  get("sample_rate", d.sample_rate);
  get("stft_window", d.stft_window);
  get("hop", d.hop);
  get("n_mels", d.n_mels);
  get("waveform_hops", d.waveform_hops);
  get("n_frames", d.n_frames);
  get("frame_height", d.frame_height);
  get("frame_width", d.frame_width);
  get("frame_channels", d.frame_channels);
  get("text_len", d.text_len);
  get("user_len", d.user_len);
  get("max_comment_len", d.max_comment_len);
  get("vocab_size", d.vocab_size);
  s = d;
}

/// Model settings that read this corpus's payloads as generated.
inline ModelConfig adapt_config(ModelConfig c, const CorpusSpec& s) {
  c.sample_rate = s.sample_rate;
  c.stft_window = s.stft_window;
  c.stft_hop = s.hop;
  c.n_mels = s.n_mels;
  c.frame_height = s.frame_height;
  c.frame_width = s.frame_width;
  c.frame_channels_in = s.frame_channels;
  c.vocab_size = std::max(c.vocab_size, s.vocab_size);
  c.max_text_len = std::max({c.max_text_len, s.text_len, s.user_len, s.max_comment_len});
  return c;
}

namespace detail {

inline int draw_other(Rng& rng, int z, std::size_t n_topics) {
  // uniform over the n_topics-1 codes different from z
  const int k = static_cast<int>(rng.below(n_topics - 1));
  return k >= z ? k + 1 : k;
}

inline int filler_token(Rng& rng, const CorpusSpec& s) {
  const auto lo = filler_token_begin(s);
  return static_cast<int>(lo + rng.below(s.vocab_size - lo));
}

inline std::vector<double> tone_waveform(const CorpusSpec& s, const std::vector<double>& centers, int topic,
                                         int distractor, Rng& rng) {
  std::vector<double> w(s.waveform_length());
  const double begin = static_cast<double>(s.window_begin * s.hop);
  const double end = static_cast<double>(s.window_end * s.hop);
  const double phase_a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phase_b = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double t = static_cast<double>(i);
    const bool inside = t >= begin && t < end;
    const double f = centers[static_cast<std::size_t>(inside ? topic : distractor)];
    w[i] = std::sin(2.0 * std::numbers::pi * f * t / s.sample_rate + (inside ? phase_a : phase_b));
  }
  return w;
}

inline std::vector<double> pattern_frames(const CorpusSpec& s, int topic, int distractor) {
  const auto [fb, fe] = frame_window(s);
  const std::size_t per_frame = s.frame_height * s.frame_width * s.frame_channels;
  std::vector<double> v(s.n_frames * per_frame, 0.0);
  for (std::size_t f = 0; f < s.n_frames; ++f) {
    const auto z = static_cast<std::size_t>(f >= fb && f < fe ? topic : distractor);
    for (std::size_t r = 0; r < s.frame_height; ++r) {
      if (row_group(r, s) != z) continue;
      for (std::size_t c = 0; c < s.frame_width * s.frame_channels; ++c)
        v[f * per_frame + r * s.frame_width * s.frame_channels + c] = 1.0;
    }
  }
  return v;
}

}  // namespace detail

inline std::size_t fake_count(const CorpusSpec& s) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(s.n_samples) * s.fake_fraction));
}

inline std::vector<MultimodalSample> generate_corpus(const CorpusSpec& spec) {
  validate(spec);
  const auto bands = topic_bands(spec);
  const MelFilterbank fb(spec.mel_settings());
  std::vector<double> centers;
  for (auto b : bands) centers.push_back(fb.center_hz(b));

  std::vector<std::size_t> perm(spec.n_samples);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng label_rng(spec.seed, {0x4c4142454cULL});
  label_rng.shuffle(perm.begin(), perm.end());
  std::vector<int> labels(spec.n_samples, kLabelReal);
  for (std::size_t k = 0; k < fake_count(spec); ++k) labels[perm[k]] = kLabelFake;

  std::vector<MultimodalSample> out(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    Rng rng(spec.seed, {0x53414d504cULL, i});
    MultimodalSample& s = out[i];
    char id[32];
    std::snprintf(id, sizeof id, "post-%06zu", i);
    s.id = id;
    s.timestamp = static_cast<std::int64_t>(i) * 100 + static_cast<std::int64_t>(rng.below(50));
    s.label = labels[i];

    const int z = static_cast<int>(rng.below(spec.n_topics));
    s.topic_text = s.topic_audio = s.topic_video = z;
    const bool flip_video = rng.uniform() < 0.5;
    const int other_audio = detail::draw_other(rng, z, spec.n_topics);
    const int other_video = detail::draw_other(rng, z, spec.n_topics);
    if (s.label == kLabelFake) {
      s.topic_audio = other_audio;
      if (flip_video) s.topic_video = other_video;
    }

    s.text_tokens.resize(spec.text_len);
    const auto [tlo, thi] = topic_token_range(static_cast<std::size_t>(s.topic_text));
    for (auto& t : s.text_tokens)
      t = rng.uniform() < 0.5 ? tlo + static_cast<int>(rng.below(static_cast<std::uint64_t>(thi - tlo)))
                              : detail::filler_token(rng, spec);

    const int audio_distractor = detail::draw_other(rng, s.topic_audio, spec.n_topics);
    s.waveform = detail::tone_waveform(spec, centers, s.topic_audio, audio_distractor, rng);
    const int video_distractor = detail::draw_other(rng, s.topic_video, spec.n_topics);
    s.frame_dims = {spec.n_frames, spec.frame_height, spec.frame_width, spec.frame_channels};
    s.frames = detail::pattern_frames(spec, s.topic_video, video_distractor);

    s.user_tokens.resize(spec.user_len);
    for (auto& t : s.user_tokens) t = detail::filler_token(rng, spec);
    s.comment_tokens.resize(rng.below(spec.max_comment_len + 1));
    for (auto& t : s.comment_tokens) t = detail::filler_token(rng, spec);
    if (spec.social_signal && rng.uniform() < spec.social_signal_rate)
      s.comment_tokens.push_back(s.label == kLabelFake ? kSocialFakeMarker : kSocialRealMarker);

    if (spec.noise_level > 0.0) {
      for (auto& x : s.waveform) x += spec.noise_level * rng.normal();
      for (auto& x : s.frames) x += spec.noise_level * rng.normal();
    }
  }
  return out;
}

/// Circular right shift of the waveform by shift·hop samples; negative
/// shifts move left. |shift| may be at most the number of hop units.
inline MultimodalSample inject_misalignment(MultimodalSample s, long shift, std::size_t hop) {
  if (hop == 0) throw ConfigError("inject_misalignment: hop must be positive");
  const auto units = static_cast<long>(s.waveform.size() / hop);
  if (shift < -units || shift > units) {
    throw ConfigError("inject_misalignment: shift " + std::to_string(shift) + " outside [-" + std::to_string(units) +
                      ", " + std::to_string(units) + "]");
  }
  const auto n = static_cast<long>(s.waveform.size());
  if (n == 0) return s;
  const long k = ((shift * static_cast<long>(hop)) % n + n) % n;
  std::vector<double> out(s.waveform.size());
  for (long i = 0; i < n; ++i) out[static_cast<std::size_t>((i + k) % n)] = s.waveform[static_cast<std::size_t>(i)];
  s.waveform = std::move(out);
  return s;
}

// ---------------------------------------------------------------- file I/O

inline constexpr char kCorpusMagic[9] = "MMFDCORP";
inline constexpr std::uint32_t kCorpusVersion = 1;

struct Corpus {
  std::optional<CorpusSpec> spec;  // absent for derived corpora
  std::vector<MultimodalSample> samples;
};

namespace detail {

inline void put_ints(std::string& out, const std::vector<int>& v) {
  binio::put_u32(out, static_cast<std::uint32_t>(v.size()));
  for (int x : v) binio::put_i32(out, x);
}
inline void put_doubles(std::string& out, const std::vector<double>& v) {
  binio::put_u64(out, v.size());
  for (double x : v) binio::put_f64(out, x);
}
inline std::vector<int> get_ints(binio::Reader& r) {
  const auto n = r.u32();
  if (n > r.remaining() / 4) throw ParseError("implausible token count " + std::to_string(n));
  std::vector<int> v(n);
  for (auto& x : v) x = r.i32();
  return v;
}
inline std::vector<double> get_doubles(binio::Reader& r) {
  const auto n = r.u64();
  if (n > r.remaining() / 8) throw ParseError("implausible value count " + std::to_string(n));
  std::vector<double> v(n);
  for (auto& x : v) x = r.f64();
  return v;
}

inline std::string encode_record(const MultimodalSample& s) {
  std::string out;
  binio::put_u32(out, static_cast<std::uint32_t>(s.id.size()));
  out += s.id;
  binio::put_i64(out, s.timestamp);
  binio::put_i32(out, s.label);
  binio::put_i32(out, s.topic_text);
  binio::put_i32(out, s.topic_audio);
  binio::put_i32(out, s.topic_video);
  put_ints(out, s.text_tokens);
  put_doubles(out, s.waveform);
  for (auto d : s.frame_dims) binio::put_u32(out, static_cast<std::uint32_t>(d));
  put_doubles(out, s.frames);
  put_ints(out, s.user_tokens);
  put_ints(out, s.comment_tokens);
  return out;
}

inline MultimodalSample decode_record(const std::string& payload) {
  binio::Reader r(payload, "record");
  MultimodalSample s;
  s.id = r.bytes(r.u32());
  s.timestamp = r.i64();
  s.label = r.i32();
  s.topic_text = r.i32();
  s.topic_audio = r.i32();
  s.topic_video = r.i32();
  s.text_tokens = get_ints(r);
  s.waveform = get_doubles(r);
  for (auto& d : s.frame_dims) d = r.u32();
  s.frames = get_doubles(r);
  s.user_tokens = get_ints(r);
  s.comment_tokens = get_ints(r);
  if (r.remaining() != 0) throw ParseError(std::to_string(r.remaining()) + " unread bytes");
  if (s.label != kLabelReal && s.label != kLabelFake) throw ParseError("label " + std::to_string(s.label));
  std::size_t want = 1;
  for (auto d : s.frame_dims) want *= d;
  if (!s.frames.empty() && want != s.frames.size()) throw ParseError("frame dims do not match frame values");
  return s;
}

}  // namespace detail

inline std::string serialize_corpus(const Corpus& c) {
  nlohmann::json header{{"format", "mmfd-corpus"}, {"format_version", kCorpusVersion}, {"count", c.samples.size()}};
  header["spec"] = c.spec ? nlohmann::json(*c.spec) : nlohmann::json(nullptr);
  const std::string h = header.dump();
  std::string out(kCorpusMagic, 8);
  binio::put_u32(out, kCorpusVersion);
  binio::put_u64(out, h.size());
  out += h;
  for (const auto& s : c.samples) {
    const std::string rec = detail::encode_record(s);
    binio::put_u64(out, rec.size());
    out += rec;
  }
  return out;
}

inline Corpus deserialize_corpus(const std::string& bytes, const std::string& origin = "corpus") {
  binio::Reader r(bytes, origin + ": header");
  if (r.bytes(8) != std::string(kCorpusMagic, 8)) throw ParseError(origin + ": not a corpus file (bad magic)");
  const auto version = r.u32();
  if (version != kCorpusVersion) throw ParseError(origin + ": unsupported corpus version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(r.u64()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": malformed header: " + e.what());
  }
  Corpus c;
  std::size_t count = 0;
  try {
    if (header.at("format").get<std::string>() != "mmfd-corpus") throw ParseError(origin + ": wrong format tag");
    count = header.at("count").get<std::size_t>();
    if (!header.at("spec").is_null()) c.spec = header.at("spec").get<CorpusSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": bad header field: " + e.what());
  }
  c.samples.reserve(std::min<std::size_t>(count, bytes.size()));
  for (std::size_t i = 0; i < count; ++i) {
    const std::string where = origin + ": record " + std::to_string(i);
    r.set_context(where);
    try {
      c.samples.push_back(detail::decode_record(r.bytes(r.u64())));
    } catch (const ParseError& e) {
      if (std::string(e.what()).rfind(where, 0) == 0) throw;
      throw ParseError(where + ": " + e.what());
    }
  }
  r.set_context(origin);
  if (r.remaining() != 0) throw ParseError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes after record " + std::to_string(count));
  return c;
}

inline void save_corpus(const Corpus& c, const std::string& path) { binio::write_file(path, serialize_corpus(c)); }
inline Corpus load_corpus(const std::string& path) { return deserialize_corpus(binio::read_file(path), path); }

}  // namespace mmfd
