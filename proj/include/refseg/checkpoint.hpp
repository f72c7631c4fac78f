#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "refseg/config.hpp"
#include "refseg/model.hpp"
#include "refseg/optimizer.hpp"

namespace refseg {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Binary layout: "SGCK", u16 version, u8 precision, u32 length + config
/// JSON, u64 optimizer step, u32 tensor count, then per tensor: u32 length +
/// name, u32 rank, u32 extents, values, first moments, second moments (all
/// little-endian at the model precision).
template <typename T>
std::string checkpoint_bytes(const RunConfig& cfg, const Model<T>& model, const AdamW<T>& optim);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const Model<T>& model,
                     const AdamW<T>& optim);

template <typename T>
struct LoadedCheckpoint {
  RunConfig config;
  std::unique_ptr<Model<T>> model;
  std::unique_ptr<AdamW<T>> optimizer;
};

/// Throws FormatError on malformed data or a precision other than T.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);
template <typename T>
LoadedCheckpoint<T> checkpoint_from_bytes(const std::string& bytes, const std::string& source = "checkpoint");

/// Reads only the header; used to dispatch on precision.
Precision checkpoint_precision(const std::filesystem::path& path);

}  // namespace refseg
