#include "kforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace kforge {
namespace {

constexpr std::size_t kMagicLength = sizeof(Checkpoint::kMagic) - 1;

class Writer {
 public:
  void bytes(const void* src, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename T>
  void le(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>("payload")); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw CheckpointError("entry '" + name + "': shape " + shape_to_string(shape) + " does not hold " +
                          std::to_string(values.size()) + " values");
  }
  entries_[name] = NamedArray{name, std::move(shape), std::move(values)};
}

void Checkpoint::put(const std::string& name, const Tensor& tensor) {
  const auto d = tensor.data();
  put(name, tensor.shape(), std::vector<double>(d.begin(), d.end()));
}

void Checkpoint::put_scalar(const std::string& name, double value) { put(name, Shape{1}, {value}); }

const NamedArray& Checkpoint::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint has no entry '" + name + "'");
  return it->second;
}

double Checkpoint::get_scalar(const std::string& name) const {
  const NamedArray& a = get(name);
  if (a.values.size() != 1) throw CheckpointError("entry '" + name + "' is not a scalar");
  return a.values[0];
}

Tensor Checkpoint::tensor(const std::string& name) const {
  const NamedArray& a = get(name);
  return Tensor::from(a.shape, a.values);
}

void Checkpoint::copy_into(const std::string& name, Tensor& dst) const {
  const NamedArray& a = get(name);
  if (a.shape != dst.shape()) {
    throw CheckpointError("entry '" + name + "' has shape " + shape_to_string(a.shape) + ", expected " +
                          shape_to_string(dst.shape()));
  }
  std::copy(a.values.begin(), a.values.end(), dst.data().begin());
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.bytes(kMagic, kMagicLength);
  w.le<std::uint32_t>(kVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, a] : entries_) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) w.le<std::uint64_t>(d);
    w.le<std::uint64_t>(offset);
    offset += a.values.size();
  }
  w.le<std::uint64_t>(offset);
  for (const auto& [_, a] : entries_) {
    for (double v : a.values) w.f64(v);
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(std::min(kMagicLength, bytes.size()), "magic") != std::string(kMagic, kMagicLength)) {
    throw CheckpointError("bad magic: not a KFORGE1 checkpoint");
  }
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>("entry count");

  struct Manifest {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Manifest> manifest;
  manifest.reserve(count);
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>("name length");
    Manifest m;
    m.name = r.str(name_len, "name");
    const auto rank = r.le<std::uint32_t>("rank");
    r.need(static_cast<std::size_t>(rank) * 8, "dims");
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.le<std::uint64_t>("dim");
      if (d == 0) throw CheckpointError("entry '" + m.name + "' has a zero dimension");
      m.shape.push_back(static_cast<std::size_t>(d));
    }
    m.offset = r.le<std::uint64_t>("offset");
    if (m.offset != expected_offset) {
      throw CheckpointError("entry '" + m.name + "' offset " + std::to_string(m.offset) + " does not follow " +
                            "previous entries (expected " + std::to_string(expected_offset) + ")");
    }
    expected_offset += shape_numel(m.shape);
    manifest.push_back(std::move(m));
  }
  const auto payload = r.le<std::uint64_t>("payload size");
  if (payload != expected_offset) {
    throw CheckpointError("manifest shapes total " + std::to_string(expected_offset) + " values but payload declares " +
                          std::to_string(payload));
  }
  if (r.remaining() != payload * 8) {
    throw CheckpointError("payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(payload * 8));
  }

  Checkpoint ckpt;
  for (Manifest& m : manifest) {
    std::vector<double> values(shape_numel(m.shape));
    for (double& v : values) v = r.f64();
    if (ckpt.contains(m.name)) throw CheckpointError("duplicate entry '" + m.name + "'");
    ckpt.put(m.name, std::move(m.shape), std::move(values));
  }
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace kforge
