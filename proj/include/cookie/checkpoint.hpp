#pragma once

// Binary checkpoint container:
//   magic "COOKIECK" | u32 version | u64 meta length | meta JSON
//   | u32 tensor count | tensors... | u64 FNV-1a checksum of all prior bytes
// tensor = u32 name length | name | u8 dtype (0 f32, 1 f64) | u32 rank
//          | u64 extents... | little-endian data

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

#include "cookie/error.hpp"
#include "cookie/tensor.hpp"

namespace cookie {

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'O', 'K', 'I', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using StoredTensor = std::variant<Tensor<float>, Tensor<double>>;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;

  template <class T>
  const Tensor<T>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    if (!std::holds_alternative<Tensor<T>>(it->second)) throw CheckpointError("tensor '" + name + "' has a different dtype");
    return std::get<Tensor<T>>(it->second);
  }
};

namespace detail {

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <class U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > limit_ || pos_ > limit_ - n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

template <class T>
void put_tensor(std::string& out, const Tensor<T>& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (T x : t.data()) {
    if constexpr (sizeof(T) == 4) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
    } else {
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
    }
  }
}

template <class T>
Tensor<T> get_tensor(ByteReader& r, const std::string& name) {
  const std::uint32_t rank = r.le<std::uint32_t>();
  if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
  Shape s(rank);
  std::uint64_t count = 1;
  for (auto& d : s) {
    d = r.le<std::uint64_t>();
    if (d == 0 || d > (1ULL << 32)) throw CheckpointError("tensor '" + name + "' has invalid extent");
    count *= d;
    if (count > (1ULL << 32)) throw CheckpointError("tensor '" + name + "' is implausibly large");
  }
  Tensor<T> t(s);
  for (T& x : t.data()) {
    if constexpr (sizeof(T) == 4) {
      x = std::bit_cast<T>(r.le<std::uint32_t>());
    } else {
      x = std::bit_cast<T>(r.le<std::uint64_t>());
    }
  }
  return t;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = ck.meta.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out += meta;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    if (std::holds_alternative<Tensor<float>>(t)) {
      out.push_back(0);
      detail::put_tensor(out, std::get<Tensor<float>>(t));
    } else {
      out.push_back(1);
      detail::put_tensor(out, std::get<Tensor<double>>(t));
    }
  }
  detail::put_le<std::uint64_t>(out, detail::fnv1a(out.data(), out.size()));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + 8 + 4 + 8) throw CheckpointError("checkpoint truncated (too short)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 8;
  detail::ByteReader tail(bytes, bytes.size());
  (void)tail.take(body);
  const std::uint64_t stored = tail.le<std::uint64_t>();
  detail::ByteReader r(bytes, body);
  (void)r.take(sizeof(kCheckpointMagic));
  const std::uint32_t version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " does not match supported version " +
                          std::to_string(kCheckpointVersion));
  }
  if (stored != detail::fnv1a(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)");
  Checkpoint ck;
  const std::uint64_t meta_len = r.le<std::uint64_t>();
  try {
    ck.meta = nlohmann::json::parse(r.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const std::uint32_t n = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t len = r.le<std::uint32_t>();
    std::string name = r.take(len);
    const auto dtype = r.le<std::uint8_t>();
    if (dtype == 0) {
      ck.tensors.emplace(name, detail::get_tensor<float>(r, name));
    } else if (dtype == 1) {
      ck.tensors.emplace(name, detail::get_tensor<double>(r, name));
    } else {
      throw CheckpointError("tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
    }
  }
  if (r.pos() != body) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

/// Writes atomically: a temporary file is renamed over the destination, so a
/// failed write never clobbers an existing checkpoint.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace cookie
