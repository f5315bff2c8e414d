#pragma once

// Log-mel spectrogram: Hann-windowed magnitude STFT (FFTW), HTK-scale
// triangular filterbank, natural log with a fixed floor.

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <fftw3.h>

#include "mmfd/tensor.hpp"

namespace mmfd {

/// Lower bound of every log-mel entry, log(1e-10).
inline const double kLogMelFloor = std::log(1e-10);

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelSettings {
  double sample_rate = 8000.0;
  std::size_t window = 64;
  std::size_t hop = 32;
  std::size_t n_mels = 16;
};

struct MelFrames {
  Tensor frames;  // [T × n_mels] log-mel energies
  double frame_rate = 0.0;

  std::size_t count() const { return frames.dim(0); }
};

/// Triangular filters between mel-spaced edge points over [0, sr/2].
class MelFilterbank {
 public:
  explicit MelFilterbank(const MelSettings& s) : settings_(s), n_bins_(s.window / 2 + 1) {
    if (s.n_mels == 0 || s.window < 2) throw InputError("mel filterbank: need n_mels >= 1 and window >= 2");
    const double mel_max = hz_to_mel(s.sample_rate / 2.0);
    edges_hz_.resize(s.n_mels + 2);
    for (std::size_t i = 0; i < edges_hz_.size(); ++i)
      edges_hz_[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(s.n_mels + 1));
    weights_.assign(s.n_mels * n_bins_, 0.0);
    for (std::size_t j = 0; j < s.n_mels; ++j) {
      const double lo = edges_hz_[j], c = edges_hz_[j + 1], hi = edges_hz_[j + 2];
      for (std::size_t k = 0; k < n_bins_; ++k) {
        const double f = bin_hz() * static_cast<double>(k);
        double w = 0.0;
        if (f >= lo && f <= c) w = (f - lo) / (c - lo);
        else if (f > c && f <= hi) w = (hi - f) / (hi - c);
        weights_[j * n_bins_ + k] = w;
      }
    }
  }

  double bin_hz() const { return settings_.sample_rate / static_cast<double>(settings_.window); }
  std::size_t n_bins() const { return n_bins_; }
  std::size_t n_mels() const { return settings_.n_mels; }
  double center_hz(std::size_t band) const { return edges_hz_.at(band + 1); }
  double lower_hz(std::size_t band) const { return edges_hz_.at(band); }
  double upper_hz(std::size_t band) const { return edges_hz_.at(band + 2); }
  double weight(std::size_t band, std::size_t bin) const { return weights_[band * n_bins_ + bin]; }

  /// Bands whose triangle spans at least `min_bins` FFT bins, ascending.
  /// Narrower filters cannot reliably isolate a pure tone.
  std::vector<std::size_t> resolvable_bands(double min_bins = 3.0) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < settings_.n_mels; ++j)
      if (upper_hz(j) - lower_hz(j) >= min_bins * bin_hz()) out.push_back(j);
    return out;
  }

  /// mel[j] = Σ_k weight(j,k) · magnitude[k]
  void apply(std::span<const double> magnitude, std::span<double> mel) const {
    for (std::size_t j = 0; j < settings_.n_mels; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n_bins_; ++k) s += weights_[j * n_bins_ + k] * magnitude[k];
      mel[j] = s;
    }
  }

 private:
  MelSettings settings_;
  std::size_t n_bins_;
  std::vector<double> edges_hz_;
  std::vector<double> weights_;
};

namespace detail {

// FFTW planning is not thread-safe; plans are created once per size under a
// lock and then executed with the new-array interface.
class RealFft {
 public:
  static RealFft& instance() {
    static RealFft fft;
    return fft;
  }

  /// |X[k]| for k in [0, n/2].
  void magnitude(std::span<const double> frame, std::span<double> out) {
    const std::size_t n = frame.size();
    fftw_plan plan = plan_for(n);
    double* in = fftw_alloc_real(n);
    fftw_complex* spec = fftw_alloc_complex(n / 2 + 1);
    std::copy(frame.begin(), frame.end(), in);
    fftw_execute_dft_r2c(plan, in, spec);
    for (std::size_t k = 0; k <= n / 2; ++k) out[k] = std::hypot(spec[k][0], spec[k][1]);
    fftw_free(in);
    fftw_free(spec);
  }

  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

 private:
  RealFft() = default;
  ~RealFft() {
    for (auto& [n, p] : plans_) fftw_destroy_plan(p);
  }

  fftw_plan plan_for(std::size_t n) {
    std::lock_guard lock(mu_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(n, p);
    return p;
  }

  std::mutex mu_;
  std::map<std::size_t, fftw_plan> plans_;
};

}  // namespace detail

/// Periodic Hann window, w[n] = 0.5 - 0.5 cos(2πn/N).
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

inline std::size_t stft_frame_count(std::size_t length, std::size_t window, std::size_t hop) {
  if (length < window) return 0;
  return (length - window) / hop + 1;
}

inline MelFrames mel_spectrogram(std::span<const double> waveform, const MelSettings& s) {
  if (s.window == 0 || s.hop == 0) throw InputError("mel_spectrogram: window and hop must be positive");
  if (waveform.size() < s.window) {
    throw InputError("mel_spectrogram: waveform of " + std::to_string(waveform.size()) +
                     " samples is shorter than one window (" + std::to_string(s.window) + ")");
  }
  static thread_local std::map<std::tuple<double, std::size_t, std::size_t>, MelFilterbank> banks;
  auto key = std::make_tuple(s.sample_rate, s.window, s.n_mels);
  auto it = banks.find(key);
  if (it == banks.end()) it = banks.emplace(key, MelFilterbank(s)).first;
  const MelFilterbank& bank = it->second;

  const std::size_t frames = stft_frame_count(waveform.size(), s.window, s.hop);
  const auto win = hann_window(s.window);
  std::vector<double> buf(s.window), mag(bank.n_bins()), mel(s.n_mels);
  std::vector<double> out(frames * s.n_mels);
  auto& fft = detail::RealFft::instance();
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < s.window; ++i) buf[i] = waveform[t * s.hop + i] * win[i];
    fft.magnitude(buf, mag);
    bank.apply(mag, mel);
    for (std::size_t j = 0; j < s.n_mels; ++j) out[t * s.n_mels + j] = std::log(std::max(mel[j], 1e-10));
  }
  return MelFrames{Tensor({frames, s.n_mels}, std::move(out)), s.sample_rate / static_cast<double>(s.hop)};
}

}  // namespace mmfd
