#pragma once

// Versioned binary container for resumable state: text metadata plus named
// float64 arrays, closed by a checksum.
//
// Layout (little-endian): "FNAS", u32 version, str config_digest,
// u32 meta count, (str key, str value)*, u32 array count,
// (str name, u32 rank, u64 dims[rank], f64 values[Π dims])*, u64 FNV-1a of
// all preceding bytes. str is u32 length + bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "fnas/optim.hpp"
#include "fnas/tensor.hpp"

namespace fnas {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string config_digest;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<CheckpointArray> arrays;

  void set_meta(const std::string& key, const std::string& value);
  void add_array(const std::string& name, Shape shape, std::vector<double> values);

  bool has_meta(const std::string& key) const;
  /// Throws FormatError when the key or array is absent.
  const std::string& meta_value(const std::string& key) const;
  const CheckpointArray& array(const std::string& name) const;
  bool has_array(const std::string& name) const;

  /// Copies the named array into a tensor of the same shape (FormatError on mismatch).
  void restore_into(const std::string& name, Tensor& target) const;
  void restore_into(const std::string& name, std::vector<double>& target) const;
};

std::string encode_checkpoint(const Checkpoint& ck);
/// Throws FormatError (with byte offset) on bad magic, unknown version,
/// truncation or checksum mismatch.
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "checkpoint");

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Optimizer buffers as arrays "<prefix>.first.<k>", "<prefix>.second.<k>" and
/// meta "<prefix>.step".
void store_optimizer(Checkpoint& ck, const std::string& prefix, const Optimizer& opt);
void restore_optimizer(const Checkpoint& ck, const std::string& prefix, Optimizer& opt);

/// Writes `contents` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace fnas
