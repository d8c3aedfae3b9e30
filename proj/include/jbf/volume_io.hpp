#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "jbf/params.hpp"
#include "jbf/volume.hpp"

namespace jbf {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};
class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};
class NonFiniteError : public IoError {
 public:
  using IoError::IoError;
};
/// Malformed header, unsupported version, or trailing bytes.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};
class UnknownTensorError : public IoError {
 public:
  using IoError::IoError;
};

Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamSet<float> tensors;
  std::map<std::string, std::string> metadata;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `params`. Every parameter must be present
/// with a matching shape; checkpoint tensors not in `params` raise
/// UnknownTensorError unless their name starts with `ignore_prefix`.
void restore_params(const Checkpoint& ckpt, ParamSet<float>& params, std::string_view ignore_prefix = {});

/// 8-bit grayscale PNG of slice z. pixel = floor(255 * clamp((v - lo) / (hi - lo), 0, 1)).
void export_png_slice(const Volume& volume, int z, double window_lo, double window_hi,
                      const std::filesystem::path& path);

inline constexpr double kDefaultWindowLo = -800.0;
inline constexpr double kDefaultWindowHi = 1200.0;

}  // namespace jbf
