#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmfd/tensor.hpp"

namespace mmfd {

inline constexpr int kLabelReal = 0;
inline constexpr int kLabelFake = 1;
inline constexpr int kPadToken = 0;

/// One synthetic short-video post. The topic codes are ground truth for
/// oracle tests and are never shown to the model.
struct MultimodalSample {
  std::string id;
  std::int64_t timestamp = 0;
  std::vector<int> text_tokens;
  std::vector<double> waveform;
  std::array<std::size_t, 4> frame_dims{0, 0, 0, 0};  // F, H, W, channels
  std::vector<double> frames;                          // row-major over frame_dims
  std::vector<int> user_tokens;
  std::vector<int> comment_tokens;
  int label = kLabelReal;
  int topic_text = 0;
  int topic_audio = 0;
  int topic_video = 0;

  Tensor frames_tensor() const {
    return Tensor({frame_dims[0], frame_dims[1], frame_dims[2], frame_dims[3]}, frames);
  }

  bool operator==(const MultimodalSample&) const = default;
};

}  // namespace mmfd
