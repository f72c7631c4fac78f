#include <fstream>
#include <sstream>

#include "refseg/errors.hpp"
#include "refseg/metrics.hpp"

namespace refseg {

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::string row(mask.bits.size(), '\0');
  for (std::size_t i = 0; i < mask.bits.size(); ++i) row[i] = mask.bits[i] ? static_cast<char>(255) : '\0';
  out.write(row.data(), static_cast<std::streamsize>(row.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  for (int c = in.get(); c != EOF; c = in.get()) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

Mask read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  if (next_token(in) != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token(in));
    h = std::stoul(next_token(in));
    maxval = std::stoul(next_token(in));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  Mask mask(h, w);
  std::string pixels(w * h, '\0');
  in.read(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != pixels.size()) {
    throw FormatError(path.string() + ": expected " + std::to_string(pixels.size()) + " pixel bytes, found " +
                      std::to_string(in.gcount()));
  }
  for (std::size_t i = 0; i < pixels.size(); ++i) mask.bits[i] = static_cast<unsigned char>(pixels[i]) > 127 ? 1 : 0;
  return mask;
}

}  // namespace refseg
