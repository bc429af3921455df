#pragma once

// Named-parameter container: 8-byte magic "INCKPT01", uint64 little-endian
// header length, a JSON header {"tensors": [{name, shape, offset}], "meta"},
// then the tensor payloads as little-endian float64 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "incarpose/errors.hpp"
#include "incarpose/tensor.hpp"

namespace incarpose {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  std::vector<NamedArray> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const NamedArray& at(const std::string& name) const {
    for (const NamedArray& t : tensors)
      if (t.name == name) return t;
    throw DataError("checkpoint has no tensor named '" + name + "'");
  }
};

inline constexpr char kCheckpointMagic[9] = "INCKPT01";

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFF) << (8 * (7 - i));
    return r;
  }
  return v;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  v = to_le(v);
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v;
  std::memcpy(&v, in.data() + pos, 8);
  return to_le(v);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const NamedArray& t : ck.tensors) {
    if (t.values.size() != shape_numel(t.shape)) throw ShapeError("checkpoint tensor '" + t.name + "' shape mismatch");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += 8 * t.values.size();
  }
  header["meta"] = ck.meta;
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const NamedArray& t : ck.tensors)
    for (double v : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, kCheckpointMagic) != 0) throw DataError("not a checkpoint file");
  const std::uint64_t hlen = detail::get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw DataError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  const std::size_t base = 16 + hlen;
  Checkpoint ck;
  try {
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      NamedArray t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_numel(t.shape);
      if (off % 8 != 0 || base + off + 8 * n > bytes.size()) throw DataError("tensor '" + t.name + "' out of bounds");
      t.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<double>(detail::get_u64(bytes, base + off + 8 * i));
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace incarpose
