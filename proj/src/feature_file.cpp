#include "refseg/feature_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

constexpr char kMagic[4] = {'S', 'G', 'F', 'T'};
constexpr std::size_t kMaxElements = std::size_t{1} << 34;

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t offset) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return value;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open feature file " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void need(const std::string& bytes, std::size_t offset, std::size_t count, const std::string& what,
          const std::filesystem::path& path) {
  if (bytes.size() < offset + count) {
    throw FormatError(path.string() + ": truncated " + what + " at byte offset " + std::to_string(offset) +
                      ": expected " + std::to_string(count) + " bytes, found " +
                      std::to_string(bytes.size() > offset ? bytes.size() - offset : 0));
  }
}

}  // namespace

void write_feature_file(const std::filesystem::path& path, const FeatureFile& file) {
  std::size_t numel = 1;
  for (auto d : file.dims) numel *= d;
  if (file.dims.empty() || numel != file.payload.size()) {
    throw DimensionError("feature file payload has " + std::to_string(file.payload.size()) +
                         " values, dims imply " + std::to_string(numel));
  }
  std::string out(kMagic, 4);
  put_le<std::uint16_t>(out, kFeatureFileVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(file.role));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.dims.size()));
  for (auto d : file.dims) put_le<std::uint32_t>(out, d);
  out.reserve(out.size() + 4 * numel);
  for (float v : file.payload) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  std::ofstream stream(path, std::ios::binary);
  if (!stream) throw FormatError("cannot open " + path.string() + " for writing");
  stream.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!stream) throw FormatError("short write to " + path.string());
}

FeatureFile read_feature_file(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  need(bytes, 0, 4, "magic", path);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(path.string() + ": bad magic at byte offset 0");
  need(bytes, 4, 2, "version", path);
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kFeatureFileVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  need(bytes, 6, 1, "role", path);
  FeatureFile file;
  const auto role = static_cast<std::uint8_t>(bytes[6]);
  if (role > 1) throw FormatError(path.string() + ": bad role " + std::to_string(role) + " at byte offset 6");
  file.role = static_cast<FeatureRole>(role);
  need(bytes, 7, 4, "rank", path);
  const auto rank = get_le<std::uint32_t>(bytes, 7);
  if (rank == 0 || rank > 8) throw FormatError(path.string() + ": bad rank " + std::to_string(rank) + " at byte offset 7");
  std::size_t offset = 11, numel = 1;
  need(bytes, offset, 4 * std::size_t{rank}, "dims", path);
  for (std::uint32_t i = 0; i < rank; ++i, offset += 4) {
    const auto d = get_le<std::uint32_t>(bytes, offset);
    if (d == 0 || numel > kMaxElements / d) {
      throw FormatError(path.string() + ": dimension " + std::to_string(d) + " overflows at byte offset " +
                        std::to_string(offset));
    }
    numel *= d;
    file.dims.push_back(d);
  }
  need(bytes, offset, 4 * numel, "payload", path);
  if (bytes.size() != offset + 4 * numel) {
    throw FormatError(path.string() + ": " + std::to_string(bytes.size() - offset - 4 * numel) +
                      " trailing bytes after payload at byte offset " + std::to_string(offset + 4 * numel));
  }
  file.payload.resize(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    file.payload[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, offset + 4 * i));
  }
  return file;
}

template <typename T>
void write_feature_file(const std::filesystem::path& path, const Tensor<T>& tensor, FeatureRole role) {
  FeatureFile file;
  file.role = role;
  for (auto d : tensor.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("extent does not fit in u32");
    file.dims.push_back(static_cast<std::uint32_t>(d));
  }
  const auto data = tensor.data();
  file.payload.assign(data.begin(), data.end());
  write_feature_file(path, file);
}

template <typename T>
Tensor<T> read_feature_tensor(const std::filesystem::path& path, FeatureRole* role) {
  auto file = read_feature_file(path);
  if (role) *role = file.role;
  Shape shape(file.dims.begin(), file.dims.end());
  return Tensor<T>(shape, std::vector<T>(file.payload.begin(), file.payload.end()));
}

template void write_feature_file(const std::filesystem::path&, const Tensor<float>&, FeatureRole);
template void write_feature_file(const std::filesystem::path&, const Tensor<double>&, FeatureRole);
template Tensor<float> read_feature_tensor(const std::filesystem::path&, FeatureRole*);
template Tensor<double> read_feature_tensor(const std::filesystem::path&, FeatureRole*);

}  // namespace refseg
