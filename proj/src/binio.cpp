#include "lyaprobe/binio.hpp"

#include <fstream>
#include <iterator>

namespace lyaprobe::binio {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::span<const std::uint8_t> verify_sealed(std::span<const std::uint8_t> data,
                                            std::size_t min_size, std::string_view what) {
  if (data.size() < min_size) {
    throw TruncatedError(std::string(what) + ": file is " + std::to_string(data.size()) +
                         " bytes, shorter than the minimum " + std::to_string(min_size) +
                         " (checksum cannot be verified)");
  }
  const auto payload = data.first(data.size() - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, data.data() + payload.size(), sizeof(stored));
  const std::uint64_t computed = fnv1a64(payload);
  if (stored != computed) {
    throw ChecksumError(std::string(what) + ": checksum mismatch (file truncated or corrupted)");
  }
  return payload;
}

}  // namespace lyaprobe::binio
