#pragma once

#include "tdm/numeric/tensor.hpp"

#include <filesystem>
#include <iosfwd>

namespace tdm {

/// Binary tensor container: "TNSR", u32 version, u32 rank, u64 extents,
/// then little-endian float64 values.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

/// Byte size of a serialized tensor of the given shape.
std::uint64_t serialized_size(const Shape& shape);

}  // namespace tdm
