#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "vssd/core/tensor.hpp"

// NCTD v1 tensor exchange format:
//   bytes 0..3   magic "NCTD"
//   u32 LE       version = 1
//   u8           dtype code (1 = float32, 2 = float64)
//   u8           rank
//   rank x u64 LE extents
//   payload      row-major, little-endian IEEE-754 values
namespace vssd::nctd {

static_assert(std::endian::native == std::endian::little, "NCTD writer assumes a little-endian host");

inline constexpr std::array<char, 4> kMagic{'N', 'C', 'T', 'D'};
inline constexpr std::uint32_t kVersion = 1;

struct Header {
  DType dtype = DType::Float64;
  Shape shape;
  std::size_t header_bytes = 0;
  std::size_t payload_bytes() const { return numel(shape) * dtype_size(dtype); }
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

namespace detail {

template <class U>
void put(std::vector<char>& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.insert(out.end(), buf, buf + sizeof(U));
}

template <class U>
U get(const std::vector<char>& in, std::size_t& pos, const char* field) {
  if (pos + sizeof(U) > in.size()) {
    throw FormatError(std::string("NCTD: truncated header while reading ") + field + " (need " +
                      std::to_string(pos + sizeof(U)) + " bytes, have " + std::to_string(in.size()) + ")");
  }
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

template <Real T>
std::vector<char> encode(const Tensor<T>& t) {
  std::vector<char> out(kMagic.begin(), kMagic.end());
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  if (t.rank() > 255) throw FormatError("NCTD: rank exceeds 255");
  detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put<std::uint64_t>(out, e);
  const auto* bytes = reinterpret_cast<const char*>(t.ptr());
  out.insert(out.end(), bytes, bytes + t.size() * sizeof(T));
  return out;
}

inline Header decode_header(const std::vector<char>& in) {
  std::size_t pos = 0;
  if (in.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), in.begin())) {
    throw FormatError("NCTD: bad magic (expected \"NCTD\")");
  }
  pos = 4;
  const auto version = detail::get<std::uint32_t>(in, pos, "version");
  if (version != kVersion) {
    throw FormatError("NCTD: unsupported version " + std::to_string(version) + " (expected 1)");
  }
  const auto code = detail::get<std::uint8_t>(in, pos, "dtype");
  if (code != 1 && code != 2) throw FormatError("NCTD: unknown dtype code " + std::to_string(code));
  const auto rank = detail::get<std::uint8_t>(in, pos, "rank");
  Header h;
  h.dtype = static_cast<DType>(code);
  for (std::uint8_t i = 0; i < rank; ++i) h.shape.push_back(detail::get<std::uint64_t>(in, pos, "extent"));
  h.header_bytes = pos;
  return h;
}

inline AnyTensor decode(const std::vector<char>& in) {
  const Header h = decode_header(in);
  const std::size_t expected = h.header_bytes + h.payload_bytes();
  if (in.size() != expected) {
    throw FormatError("NCTD: payload size mismatch, expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(in.size()));
  }
  auto fill = [&]<Real T>(Tensor<T> t) -> AnyTensor {
    std::memcpy(t.ptr(), in.data() + h.header_bytes, h.payload_bytes());
    return t;
  };
  if (h.dtype == DType::Float32) return fill(Tensor<float>(h.shape));
  return fill(Tensor<double>(h.shape));
}

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FormatError("NCTD: cannot open " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline AnyTensor read_any(const std::filesystem::path& p) { return decode(read_bytes(p)); }

/// Reads a tensor of the requested dtype; a dtype mismatch is a format error.
template <Real T>
Tensor<T> read(const std::filesystem::path& p) {
  AnyTensor any = read_any(p);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError("NCTD: " + p.string() + " has dtype " +
                    dtype_name(std::holds_alternative<Tensor<float>>(any) ? DType::Float32 : DType::Float64) +
                    ", expected " + dtype_name(dtype_of<T>()));
}

template <Real T>
void write(const std::filesystem::path& p, const Tensor<T>& t) {
  const auto bytes = encode(t);
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("NCTD: cannot open " + p.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("NCTD: write failed for " + p.string());
}

inline void write_any(const std::filesystem::path& p, const AnyTensor& t) {
  std::visit([&](const auto& x) { write(p, x); }, t);
}

}  // namespace vssd::nctd
