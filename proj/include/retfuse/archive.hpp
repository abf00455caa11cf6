#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "retfuse/tensor.hpp"

namespace retfuse::nn {

// Flat name -> tensor container, the on-disk unit for model checkpoints and
// backbone weights. Binary layout (little-endian throughout):
//
//   magic "RFTA" | u32 version=1 | u64 entry_count
//   entry: u32 name_len | name | u8 dtype (1=f32, 2=f64) | u8 ndim=4
//          | u32 dims[4] (n,c,h,w) | payload dims-product scalars
//
// Callers keep a JSON manifest sidecar at <path>.json; this class only moves
// tensors. See docs/checkpoint-format.md.
class TensorArchive {
 public:
  enum Dtype : std::uint8_t { kF32 = 1, kF64 = 2 };

  struct Entry {
    Dtype dtype = kF32;
    std::array<std::uint32_t, 4> dims{};
    std::vector<std::uint8_t> bytes;
    std::size_t numel() const {
      return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * dims[3];
    }
  };

  void put(const std::string& name, const Tensor<float>& t);
  void put(const std::string& name, const Tensor<double>& t);
  // Interchange form: stores float32 regardless of source precision.
  void put_f32(const std::string& name, const Tensor<double>& t);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;

  // Casts stored payload to T. Throws DecodeError if absent.
  template <typename T>
  Tensor<T> get(const std::string& name) const;

  // Same, but the shape must match exactly (IncompatibleCheckpoint otherwise).
  template <typename T>
  Tensor<T> get_checked(const std::string& name, int n, int c, int h, int w) const;

  void write(const std::filesystem::path& path) const;  // atomic: tmp + rename
  static TensorArchive read(const std::filesystem::path& path);

 private:
  const Entry& entry(const std::string& name) const;
  std::map<std::string, Entry> entries_;
};

// Write bytes atomically (tmp file in the same directory, then rename).
void atomic_write_bytes(const std::filesystem::path& path, const void* data,
                        std::size_t size);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace retfuse::nn
