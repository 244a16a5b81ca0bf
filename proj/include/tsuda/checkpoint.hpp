#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsuda/net.hpp"
#include "tsuda/tensor.hpp"

namespace tsuda {

inline constexpr char kCheckpointMagic[] = "TSUDA1";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw std::runtime_error("truncated checkpoint '" + path_ + "': expected " + std::to_string(n) + " bytes of " +
                               what + " at offset " + std::to_string(pos_) + ", " +
                               std::to_string(bytes_.size() - pos_) + " left");
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serialized layout: "TSUDA1", u32 count, then per tensor u32 name length,
/// name bytes, u32 rank, u32 dims, f32 data. Everything little-endian.
inline std::string encode_tensors(const NamedTensors& tensors) {
  std::string buf(kCheckpointMagic, 6);
  detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.dims()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
  }
  return buf;
}

inline NamedTensors decode_tensors(std::string bytes, const std::string& path = "<memory>") {
  detail::ByteReader in(std::move(bytes), path);
  if (in.remaining() < 6 || in.str(6, "magic") != std::string(kCheckpointMagic, 6))
    throw std::runtime_error("not a TSUDA1 checkpoint: '" + path + "' (magic mismatch)");
  const std::uint32_t count = in.u32("tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = in.u32("name length");
    std::string name = in.str(len, "name");
    const std::uint32_t rank = in.u32("rank");
    Shape dims;
    for (std::uint32_t r = 0; r < rank; ++r) dims.push_back(in.u32("dims"));
    const std::size_t n = numel(dims);
    if (n > in.remaining() / 4)
      throw std::runtime_error("truncated checkpoint '" + path + "': tensor '" + name + "' needs " +
                               std::to_string(n * 4) + " bytes, " + std::to_string(in.remaining()) + " left");
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(in.u32("data"));
    out.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  if (!in.done())
    throw std::runtime_error("checkpoint '" + path + "' has " + std::to_string(in.remaining()) + " trailing bytes");
  return out;
}

inline void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  const std::string bytes = encode_tensors(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for checkpoint '" + path.string() + "'");
}

inline NamedTensors read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensors(std::move(bytes), path.string());
}

/// Prefixes every parameter name; the tensors share storage with `params`.
inline void append_params(NamedTensors& out, const ModelParams& params, const std::string& prefix = "") {
  for (const auto& [n, t] : params) out.emplace_back(prefix + n, t);
}

/// Extracts the tensors under `prefix` and checks them against the
/// descriptor implied by `config`.
inline ModelParams params_from(const NamedTensors& tensors, const NetConfig& config, const std::string& prefix = "",
                               const std::string& source = "checkpoint") {
  const ModelParams expected = build_net(config, 0);
  ModelParams out(config);
  std::size_t found = 0;
  for (const auto& [n, t] : tensors) {
    if (n.compare(0, prefix.size(), prefix) != 0) continue;
    const std::string local = n.substr(prefix.size());
    if (found >= expected.size() || expected.name(found) != local)
      throw std::runtime_error(source + ": unexpected tensor '" + n + "' for net base_width=" +
                               std::to_string(config.base_width) + " depth=" + std::to_string(config.depth));
    if (t.dims() != expected.tensor(found).dims())
      throw std::runtime_error(source + ": tensor '" + n + "' has dims " + to_string(t.dims()) + ", expected " +
                               to_string(expected.tensor(found).dims()));
    out.add(local, t.clone());
    ++found;
  }
  if (found != expected.size())
    throw std::runtime_error(source + ": missing tensor '" + prefix + expected.name(found) + "'");
  return out;
}

inline void save_params(const std::filesystem::path& path, const ModelParams& params) {
  NamedTensors t;
  append_params(t, params);
  write_tensors(path, t);
}

inline ModelParams load_params(const std::filesystem::path& path, const NetConfig& config) {
  return params_from(read_tensors(path), config, "", path.string());
}

}  // namespace tsuda
