#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kforge/tensor.hpp"

namespace kforge {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/*
 * KFORGE1 container.
 *
 *   "KFORGE1"                      7 bytes
 *   version                        u32 (= 1)
 *   entry count                    u32
 *   per entry: name length u32, name bytes, rank u32, dims u64 × rank,
 *              payload offset u64 (in elements)
 *   payload element count          u64
 *   payload                        f64 × count
 *
 * All integers and floats little-endian. Entries are kept sorted by name so
 * identical contents serialize to identical bytes.
 */
class Checkpoint {
 public:
  static constexpr char kMagic[] = "KFORGE1";
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, Shape shape, std::vector<double> values);
  void put(const std::string& name, const Tensor& tensor);
  void put_scalar(const std::string& name, double value);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const NamedArray& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  /// Copies the stored values into dst; shapes must agree exactly.
  void copy_into(const std::string& name, Tensor& dst) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

  /// Written to a temporary sibling and renamed into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, NamedArray> entries_;
};

/// Writes bytes to path via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace kforge
