#pragma once

// Model checkpoints: config echo plus every named parameter tensor.
//
// File layout (all integers little-endian):
//   8 bytes  magic "MMFDCKPT"
//   u32      format version (1)
//   u64      header length H
//   H bytes  JSON header {"config": {...}, "tensors": [{"name", "shape"}...]}
//   then, for each tensor in header order, numel IEEE-754 binary64 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfd/fusion.hpp"

namespace mmfd {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace binio {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i64(std::string& out, std::int64_t v) { put_u64(out, static_cast<std::uint64_t>(v)); }
inline void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  Reader(const std::string& data, std::string context) : data_(data), context_(std::move(context)) {}

  void set_context(std::string c) { context_ = std::move(c); }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
  std::uint64_t u64() { return u(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(u(1)); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw ParseError(context_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                                          std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
  }

  const std::string& data_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace binio

inline constexpr char kCheckpointMagic[9] = "MMFDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Detached copy of a model's parameters plus the config that built it.
struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor> tensors;
};

inline Checkpoint snapshot(const FusionModel& model) {
  Checkpoint ck{model.config(), {}};
  for (const auto& [name, t] : model.params().all()) ck.tensors.emplace_back(name, t.detach());
  return ck;
}

/// Copies checkpoint values into an existing model with the same layout.
inline void load_into(FusionModel& model, const Checkpoint& ck) {
  const auto& params = model.params().all();
  if (params.size() != ck.tensors.size()) {
    throw ContractError("checkpoint has " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, src] = ck.tensors[i];
    Tensor dst = params[i].second;
    if (name != params[i].first || src.shape() != dst.shape()) {
      throw ContractError("checkpoint tensor '" + name + "' " + shape_str(src.shape()) + " does not match model tensor '" +
                          params[i].first + "' " + shape_str(dst.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
  }
}

inline std::unique_ptr<FusionModel> instantiate(const Checkpoint& ck) {
  auto model = std::make_unique<FusionModel>(ck.config);
  load_into(*model, ck);
  return model;
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["config"] = ck.config;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  binio::put_u32(out, kCheckpointVersion);
  binio::put_u64(out, h.size());
  out += h;
  for (const auto& [name, t] : ck.tensors)
    for (double v : t.values()) binio::put_f64(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  binio::Reader r(bytes, origin);
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) throw ParseError(origin + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw ParseError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const auto hlen = r.u64();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": malformed header: " + e.what());
  }
  Checkpoint ck;
  ck.config = header.at("config").get<ModelConfig>();
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    r.set_context(origin + ": tensor '" + name + "'");
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.f64();
    ck.tensors.emplace_back(name, Tensor(shape, std::move(values)));
  }
  if (r.remaining() != 0) throw ParseError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  binio::write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(binio::read_file(path), path); }

}  // namespace mmfd
