#include "clmr/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "clmr/error.hpp"

namespace clmr {

namespace {

static_assert(std::endian::native == std::endian::little, "TNSR I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  std::memcpy(b.data(), &v, 4);
  out.write(b.data(), 4);
}

bool get_bytes(std::istream& in, void* dst, std::size_t n) {
  in.read(static_cast<char*>(dst), std::streamsize(n));
  return std::size_t(in.gcount()) == n;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  out.write(kTensorMagic, 4);
  put_u32(out, std::uint32_t(tensor.rank()));
  for (auto d : tensor.shape()) put_u32(out, std::uint32_t(d));
  const auto v = tensor.values();
  out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in, const std::string& source) {
  char magic[4];
  if (!get_bytes(in, magic, 4)) throw CorruptFileError(source + ": truncated before the TNSR header");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) {
    throw FormatError(source + ": bad magic bytes, expected 'TNSR'");
  }
  std::uint32_t rank = 0;
  if (!get_bytes(in, &rank, 4)) throw CorruptFileError(source + ": truncated rank field");
  if (rank > 16) throw FormatError(source + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& d : shape) {
    std::uint32_t dim = 0;
    if (!get_bytes(in, &dim, 4)) throw CorruptFileError(source + ": truncated dimension list");
    if (dim == 0) throw FormatError(source + ": zero-sized dimension");
    d = dim;
    count *= dim;
    if (count > (std::size_t(1) << 34)) throw FormatError(source + ": implausible element count");
  }
  std::vector<double> values(count);
  if (!get_bytes(in, values.data(), count * sizeof(double))) {
    throw CorruptFileError(source + ": payload truncated, expected " + std::to_string(count) + " float64 values");
  }
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_tensor(out, tensor);
  if (!out) throw IoError("write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_tensor(in, path);
}

}  // namespace clmr
