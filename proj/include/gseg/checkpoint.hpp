#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gseg/unet.hpp"

namespace gseg {

// Checkpoint byte format, version 1 (all integers little-endian):
//   "GSEG" | u32 version | u32 block_kind | u32 depth | u32 base_filters
//   | u32 num_classes | u32 input_side | u32 input_channels
//   | repeated records: u16 name_len | name | u8 rank | u32 dims... | f32 data
inline constexpr char kCheckpointMagic[4] = {'G', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
  put_u32(buf, std::bit_cast<std::uint32_t>(v));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& what)
      : bytes_(bytes), what_(what) {}

  bool eof() const { return pos_ == bytes_.size(); }

  std::uint8_t u8() { return take(1)[0]; }

  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32() {
    const auto* p = take(4);
    return static_cast<std::uint32_t>(p[0]) |
           (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string str(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(what_ + ": truncated file");
    }
    const auto* p =
        reinterpret_cast<const std::uint8_t*>(bytes_.data()) + pos_;
    pos_ += n;
    return p;
  }

  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(UNetModel<float>& model, const std::string& path) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  detail::put_u32(buf, kCheckpointVersion);
  const UNetConfig& c = model.config;
  detail::put_u32(buf, static_cast<std::uint32_t>(c.block_kind));
  detail::put_u32(buf, static_cast<std::uint32_t>(c.depth));
  detail::put_u32(buf, static_cast<std::uint32_t>(c.base_filters));
  detail::put_u32(buf, static_cast<std::uint32_t>(c.num_classes));
  detail::put_u32(buf, static_cast<std::uint32_t>(c.input_side));
  detail::put_u32(buf, static_cast<std::uint32_t>(c.input_channels));
  for (auto& [name, t] : model.named_params()) {
    detail::put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf.append(name);
    buf.push_back(static_cast<char>(t->rank()));
    for (int d : t->shape) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : *t->data) detail::put_f32(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

inline UNetModel<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  detail::ByteReader r(bytes, path);
  if (r.str(4) != std::string(kCheckpointMagic, 4)) {
    throw CheckpointError(path + ": bad magic, not a checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " +
                          std::to_string(version));
  }
  UNetConfig c;
  c.block_kind = static_cast<BlockKind>(r.u32());
  if (c.block_kind != BlockKind::Basic && c.block_kind != BlockKind::Residual &&
      c.block_kind != BlockKind::MultiRes) {
    throw CheckpointError(path + ": invalid block kind field");
  }
  c.depth = static_cast<int>(r.u32());
  c.base_filters = static_cast<int>(r.u32());
  c.num_classes = static_cast<int>(r.u32());
  c.input_side = static_cast<int>(r.u32());
  c.input_channels = static_cast<int>(r.u32());
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": inconsistent config: " + e.what());
  }

  UNetModel<float> model = build_unet<float>(c, 0);
  std::map<std::string, Tensor<float>*> wanted;
  for (auto& [name, t] : model.named_params()) wanted[name] = t;
  std::size_t filled = 0;
  while (!r.eof()) {
    const std::uint16_t len = r.u16();
    const std::string name = r.str(len);
    const int rank = r.u8();
    Shape shape;
    std::size_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      shape.push_back(static_cast<int>(r.u32()));
      numel *= static_cast<std::size_t>(shape.back());
    }
    auto it = wanted.find(name);
    if (it == wanted.end()) {
      throw CheckpointError(path + ": unexpected parameter '" + name + "'");
    }
    Tensor<float>* t = it->second;
    if (t->shape != shape) {
      throw CheckpointError(path + ": parameter '" + name + "' has shape " +
                            shape_str(shape) + ", expected " +
                            shape_str(t->shape));
    }
    for (std::size_t i = 0; i < numel; ++i) (*t->data)[i] = r.f32();
    wanted.erase(it);
    ++filled;
  }
  if (!wanted.empty()) {
    throw CheckpointError(path + ": missing parameter '" +
                          wanted.begin()->first + "' (" +
                          std::to_string(wanted.size()) + " missing)");
  }
  (void)filled;
  return model;
}

}  // namespace gseg
