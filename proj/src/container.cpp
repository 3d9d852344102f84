#include "mlomae/container.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace mlomae {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'L', 'O', 'M'};

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

void put_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  os.write(b.data(), 8);
}

void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError(std::string("container truncated while reading ") + what);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  std::array<unsigned char, 4> b{};
  read_exact(is, reinterpret_cast<char*>(b.data()), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  read_exact(is, reinterpret_cast<char*>(b.data()), 8, "tensor data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_container(std::ostream& os, const TensorMap& tensors) {
  os.write(kMagic.data(), 4);
  put_u32(os, kContainerVersion);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, 2);
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) put_f64(os, m.data()[i]);
  }
}

TensorMap read_container(std::istream& is) {
  std::array<char, 4> magic{};
  read_exact(is, magic.data(), 4, "magic");
  if (magic != kMagic) throw FormatError("not an MLOM container (bad magic)");
  const std::uint32_t version = get_u32(is, "version");
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  const std::uint32_t count = get_u32(is, "tensor count");
  TensorMap out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t len = get_u32(is, "name length");
    if (len > (1u << 16)) throw FormatError("implausible tensor name length");
    std::string name(len, '\0');
    read_exact(is, name.data(), len, "name");
    const std::uint32_t rank = get_u32(is, "rank");
    if (rank < 1 || rank > 8) throw FormatError("tensor " + name + ": unsupported rank");
    std::vector<Index> dims;
    for (std::uint32_t r = 0; r < rank; ++r) dims.push_back(get_u32(is, "dims"));
    // Leading axes fold into rows, the last axis is the column count.
    Index rows = 1;
    for (std::size_t r = 0; r + 1 < dims.size(); ++r) rows *= dims[r];
    const Index cols = dims.back();
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = get_f64(is);
    if (!out.emplace(std::move(name), std::move(m)).second) throw FormatError("duplicate tensor name");
  }
  return out;
}

void save_container(const std::string& path, const TensorMap& tensors) {
  std::ostringstream buf(std::ios::binary);
  write_container(buf, tensors);
  const std::string bytes = buf.str();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path);
}

TensorMap load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_container(is);
}

}  // namespace mlomae
