#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyatt/config.hpp"
#include "hyatt/file_io.hpp"
#include "hyatt/network.hpp"

namespace hyatt {

// Layout (all integers little-endian):
//   "HYATT1"
//   u32 config length, config JSON bytes
//   u32 entry count, then per entry: u32 name length, name, u32 rank, u32 dims..., u64 offset
//   u64 value count, then float32 values

inline constexpr char kCheckpointMagic[] = "HYATT1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
};

struct Checkpoint {
  HyattConfig config;
  std::vector<CheckpointEntry> entries;
  std::vector<float> values;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 6);
  const std::string cfg = to_json(ck.config).dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    detail::put_le<std::uint64_t>(out, e.offset);
  }
  detail::put_le<std::uint64_t>(out, ck.values.size());
  for (float v : ck.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::Reader in(bytes);
  if (in.take(6) != std::string(kCheckpointMagic, 6)) throw CheckpointError("checkpoint: bad magic (expected HYATT1)");
  Checkpoint ck;
  const std::string cfg = in.take(in.get<std::uint32_t>());
  try {
    ck.config = config_from_json(nlohmann::json::parse(cfg));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: embedded config is not valid JSON: ") + e.what());
  }
  const auto n = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointEntry e;
    e.name = in.take(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(in.get<std::uint32_t>());
    e.offset = in.get<std::uint64_t>();
    ck.entries.push_back(std::move(e));
  }
  const auto count = in.get<std::uint64_t>();
  for (const auto& e : ck.entries) {
    if (e.offset + numel_of(e.shape) > count) throw CheckpointError("checkpoint: entry " + e.name + " out of bounds");
  }
  ck.values.resize(count);
  for (auto& v : ck.values) v = std::bit_cast<float>(in.get<std::uint32_t>());
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

/// Snapshot of every registered tensor (parameters and normalization buffers).
template <class T>
Checkpoint make_checkpoint(const HyattNet<T>& net) {
  Checkpoint ck;
  ck.config = net.config();
  for (const auto& e : net.parameters().entries()) {
    ck.entries.push_back({e.name, e.tensor.shape(), ck.values.size()});
    for (T v : e.tensor.data()) ck.values.push_back(static_cast<float>(v));
  }
  return ck;
}

/// Copies checkpoint values into a network built from a compatible config.
template <class T>
void load_weights(HyattNet<T>& net, const Checkpoint& ck) {
  const auto& entries = net.parameters().entries();
  if (entries.size() != ck.entries.size()) {
    throw CheckpointError("checkpoint: holds " + std::to_string(ck.entries.size()) + " tensors, network expects " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = ck.entries[i];
    auto dst = entries[i].tensor;
    if (src.name != entries[i].name || src.shape != dst.shape()) {
      throw CheckpointError("checkpoint: entry " + std::to_string(i) + " is " + src.name + " " + to_string(src.shape) +
                            ", network expects " + entries[i].name + " " + to_string(dst.shape()));
    }
    for (std::size_t j = 0; j < dst.numel(); ++j) dst.data()[j] = static_cast<T>(ck.values[src.offset + j]);
  }
}

template <class T>
void save_checkpoint(const HyattNet<T>& net, const std::string& path) {
  write_file(path, serialize_checkpoint(make_checkpoint(net)));
}

inline HyattNet<float> load_checkpoint(const std::string& path) {
  const Checkpoint ck = parse_checkpoint(read_file(path));
  HyattNet<float> net(ck.config);
  load_weights(net, ck);
  return net;
}

}  // namespace hyatt
