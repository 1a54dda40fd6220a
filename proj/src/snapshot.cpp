#include "stp/snapshot.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace stp {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'B', 'T'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("MOBT: truncated file");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  out.reserve(out.size() + t.bytes());
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("MOBT: bad magic");
  }
  std::size_t pos = 4;
  const auto rank = get_le<std::uint32_t>(bytes, pos);
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint64_t>(bytes, pos);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() - pos != n * 8) {
    throw std::runtime_error("MOBT: payload is " + std::to_string(bytes.size() - pos) +
                             " bytes, expected " + std::to_string(n * 8));
  }
  std::vector<double> values(n);
  for (auto& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
  return Tensor(std::move(shape), std::move(values));
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  auto bytes = encode_tensor(t);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace stp
