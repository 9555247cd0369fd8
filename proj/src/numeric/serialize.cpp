#include "tdm/numeric/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tdm {
namespace {

template <typename T>
void put(std::ostream& out, T value) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
        std::reverse(bytes.begin(), bytes.end());
        value = std::bit_cast<T>(bytes);
    }
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error("tensor container truncated");
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
        std::reverse(bytes.begin(), bytes.end());
        value = std::bit_cast<T>(bytes);
    }
    return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
    out.write("TNSR", 4);
    put<std::uint32_t>(out, kTensorFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (Index d : tensor.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.size() * 8));
    } else {
        for (Index i = 0; i < tensor.size(); ++i) put<double>(out, tensor[i]);
    }
    if (!out) throw std::runtime_error("failed writing tensor container");
}

Tensor read_tensor(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TNSR", 4) != 0) throw std::runtime_error("not a tensor container (bad magic)");
    const auto version = get<std::uint32_t>(in);
    if (version != kTensorFormatVersion) {
        throw std::runtime_error("unsupported tensor container version " + std::to_string(version));
    }
    const auto rank = get<std::uint32_t>(in);
    if (rank > 16) throw std::runtime_error("tensor container rank " + std::to_string(rank) + " is implausible");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(get<std::uint64_t>(in));
    Tensor t(shape);
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
        if (!in) throw std::runtime_error("tensor container truncated");
    } else {
        for (Index i = 0; i < t.size(); ++i) t[i] = get<double>(in);
    }
    return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_tensor(out, tensor);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return read_tensor(in);
}

std::uint64_t serialized_size(const Shape& shape) {
    return 4 + 4 + 4 + 8 * shape.size() + 8 * static_cast<std::uint64_t>(numel(shape));
}

}  // namespace tdm
