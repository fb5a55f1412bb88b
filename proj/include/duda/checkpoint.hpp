#pragma once

// Binary model checkpoints. Layout (little-endian):
//   "DUDACKPT" u32 version  i32 iteration  str network  str architecture
//   i32 height  i32 width  u32 groups  { str name  u32 ndim  i32 dims[ndim] }
//   u64 count  f64 values[count]
// where str = u32 length + bytes.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/segmodel.hpp"

namespace duda {

inline constexpr char kCheckpointMagic[8] = {'D', 'U', 'D', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointGroup {
  std::string name;
  std::vector<int> shape;

  friend bool operator==(const CheckpointGroup&, const CheckpointGroup&) = default;
};

struct Checkpoint {
  int iteration = 0;
  std::string network;
  std::string architecture;  // Architecture::descriptor()
  int height = 0;
  int width = 0;
  std::vector<CheckpointGroup> groups;
  std::vector<double> values;
};

template <typename T>
Checkpoint make_checkpoint(const SegModel<T>& model, std::string network, int iteration) {
  Checkpoint c;
  c.iteration = iteration;
  c.network = std::move(network);
  c.architecture = model.architecture().descriptor();
  c.height = model.height();
  c.width = model.width();
  for (const auto& g : model.groups()) c.groups.push_back({g.name, g.shape});
  c.values.resize(static_cast<std::size_t>(model.parameters().size()));
  for (Eigen::Index i = 0; i < model.parameters().size(); ++i) c.values[i] = static_cast<double>(model.parameters()[i]);
  return c;
}

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& os) : os_(os) {}
  template <typename V>
  void pod(V v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class BinReader {
 public:
  BinReader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename V>
  V pod() {
    V v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is_) throw IoError("truncated checkpoint " + path_);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 20)) throw IoError("corrupt string length in checkpoint " + path_);
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) throw IoError("truncated checkpoint " + path_);
    return s;
  }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path);
  detail::BinWriter w(os);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::int32_t>(c.iteration));
  w.str(c.network);
  w.str(c.architecture);
  w.pod(static_cast<std::int32_t>(c.height));
  w.pod(static_cast<std::int32_t>(c.width));
  w.pod(static_cast<std::uint32_t>(c.groups.size()));
  for (const auto& g : c.groups) {
    w.str(g.name);
    w.pod(static_cast<std::uint32_t>(g.shape.size()));
    for (int d : g.shape) w.pod(static_cast<std::int32_t>(d));
  }
  w.pod(static_cast<std::uint64_t>(c.values.size()));
  os.write(reinterpret_cast<const char*>(c.values.data()), static_cast<std::streamsize>(c.values.size() * sizeof(double)));
  if (!os) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError(path + " is not a checkpoint");
  detail::BinReader r(is, path);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  Checkpoint c;
  c.iteration = r.pod<std::int32_t>();
  c.network = r.str();
  c.architecture = r.str();
  c.height = r.pod<std::int32_t>();
  c.width = r.pod<std::int32_t>();
  const auto ng = r.pod<std::uint32_t>();
  std::uint64_t expected = 0;
  for (std::uint32_t i = 0; i < ng; ++i) {
    CheckpointGroup g;
    g.name = r.str();
    const auto nd = r.pod<std::uint32_t>();
    if (nd > 8) throw IoError("corrupt group rank in checkpoint " + path);
    std::uint64_t size = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      g.shape.push_back(r.pod<std::int32_t>());
      size *= static_cast<std::uint64_t>(std::max(g.shape.back(), 0));
    }
    expected += size;
    c.groups.push_back(std::move(g));
  }
  const auto count = r.pod<std::uint64_t>();
  if (count != expected) throw IoError("checkpoint " + path + " value count does not match its groups");
  c.values.resize(count);
  is.read(reinterpret_cast<char*>(c.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!is) throw IoError("truncated checkpoint " + path);
  return c;
}

// Copies checkpoint values into a model of the same architecture and size.
template <typename T>
void restore(const Checkpoint& c, SegModel<T>& model) {
  if (c.architecture != model.architecture().descriptor())
    throw StructuralError("checkpoint architecture '" + c.architecture + "' does not match model '" +
                          model.architecture().descriptor() + "'");
  if (c.height != model.height() || c.width != model.width())
    throw StructuralError("checkpoint input size does not match model");
  if (c.values.size() != static_cast<std::size_t>(model.parameters().size()))
    throw StructuralError("checkpoint parameter count does not match model");
  for (std::size_t i = 0; i < c.values.size(); ++i) model.parameters()[i] = static_cast<T>(c.values[i]);
}

}  // namespace duda
