#pragma once

// Tensor container: "VILA" magic, u32 version, u32 tensor count, then per tensor
// u32 name length, UTF-8 name, u32 rank, u64 dims, u8 dtype tag, raw little-endian values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "vila/autodiff.hpp"
#include "vila/error.hpp"
#include "vila/io.hpp"

namespace vila::ckpt {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'V', 'I', 'L', 'A'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct Record {
  std::string name;
  ad::Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const { return values.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const {
    return std::visit([](const auto& v) { return v.size(); }, values);
  }

  /// Values converted to T (exact when the stored dtype is T).
  template <typename T>
  std::vector<T> as() const {
    return std::visit([](const auto& v) { return std::vector<T>(v.begin(), v.end()); }, values);
  }

  bool operator==(const Record&) const = default;
};

template <typename T>
Record make_record(std::string name, const ad::Shape& shape, const std::vector<T>& data) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return Record{std::move(name), shape, data};
}

using Records = std::vector<Record>;

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U v;
    take(&v, sizeof(U), what);
    return v;
  }
  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Records& records) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (ad::numel(r.shape) != r.size()) {
      throw ShapeError("checkpoint: tensor '" + r.name + "' shape " + ad::to_string(r.shape) +
                       " does not match its data");
    }
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put<std::uint64_t>(out, d);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype()));
    std::visit(
        [&out](const auto& v) {
          out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(v[0]));
        },
        r.values);
  }
  return out;
}

inline Records deserialize(std::string_view bytes) {
  detail::Reader in(bytes);
  char magic[4];
  in.take(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  }
  const auto count = in.get<std::uint32_t>("tensor count");
  Records records;
  for (std::uint32_t t = 0; t < count; ++t) {
    Record r;
    const auto len = in.get<std::uint32_t>("name length");
    if (len > bytes.size()) throw FormatError("checkpoint truncated while reading tensor name");
    r.name.resize(len);
    in.take(r.name.data(), len, "tensor name");
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("checkpoint: tensor '" + r.name + "' has implausible rank");
    std::uint64_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = in.get<std::uint64_t>("dims");
      if (d == 0 || d > bytes.size()) throw FormatError("checkpoint: tensor '" + r.name + "' has invalid dim");
      r.shape.push_back(d);
      total *= d;
    }
    const auto tag = in.get<std::uint8_t>("dtype");
    if (total > bytes.size()) throw FormatError("checkpoint truncated in tensor '" + r.name + "'");
    if (tag == static_cast<std::uint8_t>(DType::f32)) {
      std::vector<float> v(total);
      in.take(v.data(), total * sizeof(float), "tensor values");
      r.values = std::move(v);
    } else if (tag == static_cast<std::uint8_t>(DType::f64)) {
      std::vector<double> v(total);
      in.take(v.data(), total * sizeof(double), "tensor values");
      r.values = std::move(v);
    } else {
      throw FormatError("checkpoint: tensor '" + r.name + "' has unknown dtype tag " + std::to_string(tag));
    }
    records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError("checkpoint: trailing bytes after last tensor");
  return records;
}

inline void save(const Records& records, const std::filesystem::path& path) {
  io::atomic_write(path, serialize(records));
}

inline Records load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

inline const Record* find(const Records& records, std::string_view name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace vila::ckpt
