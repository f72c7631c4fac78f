#include "refseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

constexpr char kMagic[4] = {'S', 'G', 'C', 'K'};

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
void put_values(std::string& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) put_le<Bits>(out, std::bit_cast<Bits>(v));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  std::vector<T> get_values(std::size_t n, const char* what) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(n * sizeof(T), what);
    std::vector<T> out(n);
    for (auto& v : out) v = std::bit_cast<T>(get<Bits>(what));
    return out;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(source_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      fail(std::string("truncated ") + what + ": expected " + std::to_string(n) + " bytes, found " +
           std::to_string(bytes_.size() - pos_));
    }
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::F32 : Precision::F64;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Precision read_header(Reader& r) {
  if (r.get_string(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto precision = r.get<std::uint8_t>("precision");
  if (precision > 1) r.fail("bad precision tag " + std::to_string(precision));
  return precision == 0 ? Precision::F32 : Precision::F64;
}

}  // namespace

template <typename T>
std::string checkpoint_bytes(const RunConfig& cfg, const Model<T>& model, const AdamW<T>& optim) {
  std::string out(kMagic, 4);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint8_t>(out, precision_of<T>() == Precision::F32 ? 0 : 1);
  RunConfig echo = cfg;
  echo.precision = precision_of<T>();
  const std::string json = echo.to_json();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  put_le<std::uint64_t>(out, optim.steps());
  const auto& entries = model.params().entries();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, tensor] = entries[i];
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put_values<T>(out, tensor.data());
    put_values<T>(out, std::span<const T>(optim.first_moments()[i]));
    put_values<T>(out, std::span<const T>(optim.second_moments()[i]));
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const Model<T>& model,
                     const AdamW<T>& optim) {
  const auto bytes = checkpoint_bytes(cfg, model, optim);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

template <typename T>
LoadedCheckpoint<T> checkpoint_from_bytes(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (read_header(r) != precision_of<T>()) {
    r.fail("checkpoint precision is not " + to_string(precision_of<T>()));
  }
  const auto json_len = r.get<std::uint32_t>("config length");
  LoadedCheckpoint<T> out;
  out.config = RunConfig::from_json(r.get_string(json_len, "config"));
  out.model = std::make_unique<Model<T>>(out.config.model, 0);
  out.optimizer = std::make_unique<AdamW<T>>(out.model->params(), out.config.optim);
  out.optimizer->set_steps(r.get<std::uint64_t>("step"));
  const auto& entries = out.model->params().entries();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != entries.size()) {
    r.fail("checkpoint holds " + std::to_string(count) + " tensors, model expects " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto [name, tensor] = entries[i];
    const auto stored = r.get_string(r.get<std::uint32_t>("name length"), "name");
    if (stored != name) r.fail("expected tensor '" + name + "', found '" + stored + "'");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(r.get<std::uint32_t>("extent"));
    if (shape != tensor.shape()) r.fail("tensor '" + name + "' has shape " + shape_str(shape));
    const auto values = r.template get_values<T>(tensor.numel(), "values");
    std::copy(values.begin(), values.end(), tensor.mutable_data().begin());
    out.optimizer->first_moments()[i] = r.template get_values<T>(tensor.numel(), "first moments");
    out.optimizer->second_moments()[i] = r.template get_values<T>(tensor.numel(), "second moments");
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return out;
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_bytes<T>(slurp(path), path.string());
}

Precision checkpoint_precision(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  Reader r(bytes, path.string());
  return read_header(r);
}

#define REFSEG_INSTANTIATE_CHECKPOINT(T)                                                                   \
  template std::string checkpoint_bytes(const RunConfig&, const Model<T>&, const AdamW<T>&);              \
  template void save_checkpoint(const std::filesystem::path&, const RunConfig&, const Model<T>&,          \
                                const AdamW<T>&);                                                          \
  template LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path&);                             \
  template LoadedCheckpoint<T> checkpoint_from_bytes(const std::string&, const std::string&);

REFSEG_INSTANTIATE_CHECKPOINT(float)
REFSEG_INSTANTIATE_CHECKPOINT(double)

#undef REFSEG_INSTANTIATE_CHECKPOINT

}  // namespace refseg
