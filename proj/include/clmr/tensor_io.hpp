#pragma once

#include <iosfwd>
#include <string>

#include "clmr/tensor.hpp"

namespace clmr {

/// Binary tensor file: the 4 magic bytes `TNSR`, a little-endian u32 rank,
/// rank little-endian u32 dimensions, then the values as little-endian
/// IEEE-754 float64 in row-major order.
inline constexpr char kTensorMagic[4] = {'T', 'N', 'S', 'R'};

void write_tensor(std::ostream& out, const Tensor& tensor);
/// Throws FormatError on a wrong magic and CorruptFileError on a short payload.
Tensor read_tensor(std::istream& in, const std::string& source = "<stream>");

void save_tensor(const std::string& path, const Tensor& tensor);
Tensor load_tensor(const std::string& path);

}  // namespace clmr
