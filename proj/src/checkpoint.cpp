#include "tdrl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace tdrl {

namespace {

static_assert(std::numeric_limits<float>::is_iec559, "checkpoint format requires IEEE-754 floats");

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t& pos) {
  if (pos + 4 > bytes.size()) throw FormatError("truncated tensor file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError(std::string(what) + " too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string encode_tensor_records(std::string_view magic, const NamedTensors& records) {
  std::string out(magic);
  for (const auto& [name, tensor] : records) {
    put_u32(out, checked_u32(name.size(), "name"));
    out.append(name);
    put_u32(out, checked_u32(tensor.rank(), "rank"));
    for (std::size_t e : tensor.shape()) put_u32(out, checked_u32(e, "extent"));
    for (float v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

NamedTensors decode_tensor_records(std::string_view bytes, std::string_view magic) {
  if (bytes.substr(0, magic.size()) != magic) {
    throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
  }
  std::size_t pos = magic.size();
  NamedTensors records;
  while (pos < bytes.size()) {
    const std::uint32_t name_len = get_u32(bytes, pos);
    if (pos + name_len > bytes.size()) throw FormatError("truncated tensor name");
    std::string name(bytes.substr(pos, name_len));
    pos += name_len;
    const std::uint32_t rank = get_u32(bytes, pos);
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& e : shape) {
      e = get_u32(bytes, pos);
      if (e == 0) throw FormatError("tensor '" + name + "' has a zero extent");
      count *= e;
    }
    if (count > (bytes.size() - pos) / 4) throw FormatError("truncated data for tensor '" + name + "'");
    std::vector<float> data(count);
    for (auto& v : data) v = std::bit_cast<float>(get_u32(bytes, pos));
    records.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return records;
}

void write_tensor_file(const std::filesystem::path& path, std::string_view magic, const NamedTensors& records) {
  const std::string bytes = encode_tensor_records(magic, records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

NamedTensors read_tensor_file(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor_records(bytes, magic);
}

}  // namespace tdrl
