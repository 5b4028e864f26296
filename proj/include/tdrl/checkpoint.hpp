#pragma once

// Flat binary parameter files.
//
//   magic bytes (e.g. "TDRL1")
//   repeated until end of file:
//     u32 name_length, name bytes,
//     u32 rank, rank x u32 extents,
//     product(extents) x f32 values
//
// All integers and floats are little-endian.

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

inline constexpr std::string_view kCheckpointMagic = "TDRL1";

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensor_file(const std::filesystem::path& path, std::string_view magic, const NamedTensors& records);
NamedTensors read_tensor_file(const std::filesystem::path& path, std::string_view magic);

std::string encode_tensor_records(std::string_view magic, const NamedTensors& records);
NamedTensors decode_tensor_records(std::string_view bytes, std::string_view magic);

}  // namespace tdrl
