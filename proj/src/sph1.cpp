#include "superpart/sph1.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "sph1 serialization assumes a little endian host");

namespace superpart {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'H', '1'};
constexpr std::uint8_t kVersion = 1;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

class Writer {
 public:
  Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) fail(path_, "cannot open for writing");
  }

  template <typename T>
  void pod(T value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }

  void u64_array(const Index* data, std::size_t n) {
    buffer_u64_.resize(n);
    for (std::size_t i = 0; i < n; ++i) buffer_u64_[i] = static_cast<std::uint64_t>(data[i]);
    out_.write(reinterpret_cast<const char*>(buffer_u64_.data()),
               static_cast<std::streamsize>(n * sizeof(std::uint64_t)));
  }

  void f32_array(const double* data, std::size_t n) {
    buffer_f32_.resize(n);
    for (std::size_t i = 0; i < n; ++i) buffer_f32_[i] = static_cast<float>(data[i]);
    out_.write(reinterpret_cast<const char*>(buffer_f32_.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
  }

  void finish() {
    out_.flush();
    if (!out_) fail(path_, "write failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
  std::vector<std::uint64_t> buffer_u64_;
  std::vector<float> buffer_f32_;
};

class Reader {
 public:
  Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail(path_, "cannot open for reading");
  }

  template <typename T>
  T pod(const char* what) {
    T value;
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in_) fail(path_, std::string("truncated file reading ") + what);
    return value;
  }

  void u64_array(Index* data, std::size_t n, const char* what) {
    buffer_u64_.resize(n);
    in_.read(reinterpret_cast<char*>(buffer_u64_.data()),
             static_cast<std::streamsize>(n * sizeof(std::uint64_t)));
    if (!in_) fail(path_, std::string("truncated file reading ") + what);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<Index>(buffer_u64_[i]);
  }

  void f32_array(double* data, std::size_t n, const char* what) {
    buffer_f32_.resize(n);
    in_.read(reinterpret_cast<char*>(buffer_f32_.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
    if (!in_) fail(path_, std::string("truncated file reading ") + what);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(buffer_f32_[i]);
  }

  bool at_eof() { return in_.peek() == std::ifstream::traits_type::eof(); }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::vector<std::uint64_t> buffer_u64_;
  std::vector<float> buffer_f32_;
};

}  // namespace

void write_sph1(const std::string& path, const Sph1File& file) {
  const HierarchicalPartition& hp = file.hierarchy;
  const std::size_t level_count = hp.levels.size();
  require(level_count >= 1 && level_count <= 255, "hierarchy must have 1..255 levels");
  const Index feature_dim = hp.levels[0].mean_features.cols();
  for (const HierarchyLevel& level : hp.levels)
    require(level.mean_features.cols() == feature_dim,
            "all levels must share one feature dimension");
  require(file.graphs.empty() || file.graphs.size() == level_count,
          "graphs must be empty or cover every level");
  for (std::size_t i = 0; i < file.graphs.size(); ++i) {
    const SuperpointGraph& graph = file.graphs[i];
    if (graph.edge_count() == 0) continue;  // placeholder slot
    require(graph.level == static_cast<Index>(i) + 1, "graph level does not match its slot");
    require(graph.features.rows() == graph.edge_count() && graph.features.cols() == 18,
            "graph features must be computed before writing");
    require(graph.gaps.size() == graph.edge_count(), "graph gaps must match edge count");
  }

  Writer writer(path);
  writer.pod(kMagic[0]);
  writer.pod(kMagic[1]);
  writer.pod(kMagic[2]);
  writer.pod(kMagic[3]);
  writer.pod(kVersion);
  writer.pod(static_cast<std::uint8_t>(level_count));
  writer.pod(static_cast<std::uint64_t>(feature_dim));

  for (const HierarchyLevel& level : hp.levels) {
    const Index n = static_cast<Index>(level.super_index.size());
    const Index s = level.component_count();
    writer.pod(static_cast<std::uint64_t>(n));
    writer.pod(static_cast<std::uint64_t>(s));
    writer.u64_array(level.super_index.data(), static_cast<std::size_t>(n));
    writer.f32_array(level.centroids.data(), static_cast<std::size_t>(s) * 3);
    writer.f32_array(level.mean_features.data(),
                     static_cast<std::size_t>(s) * static_cast<std::size_t>(feature_dim));
    writer.u64_array(level.point_counts.data(), static_cast<std::size_t>(s));
    writer.f32_array(level.radii.data(), static_cast<std::size_t>(s));
  }

  for (const SuperpointGraph& graph : file.graphs) {
    const Index e = graph.edge_count();
    writer.pod(static_cast<std::uint64_t>(e));
    writer.u64_array(graph.edges.data(), static_cast<std::size_t>(e) * 2);
    writer.f32_array(graph.features.data(), static_cast<std::size_t>(e) * 18);
    writer.f32_array(graph.gaps.data(), static_cast<std::size_t>(e));
  }
  writer.finish();
}

Sph1File read_sph1(const std::string& path) {
  Reader reader(path);
  char magic[4];
  for (char& c : magic) c = reader.pod<char>("magic");
  if (std::memcmp(magic, kMagic, 4) != 0) fail(path, "not an sph1 file");
  const auto version = reader.pod<std::uint8_t>("version");
  if (version != kVersion)
    fail(path, "unsupported version " + std::to_string(static_cast<int>(version)));
  const auto level_count = reader.pod<std::uint8_t>("level count");
  if (level_count == 0) fail(path, "level count must be >= 1");
  const auto feature_dim = static_cast<Index>(reader.pod<std::uint64_t>("feature dim"));

  Sph1File file;
  file.hierarchy.levels.resize(level_count);
  for (std::size_t i = 0; i < level_count; ++i) {
    HierarchyLevel& level = file.hierarchy.levels[i];
    const auto n = static_cast<Index>(reader.pod<std::uint64_t>("element count"));
    const auto s = static_cast<Index>(reader.pod<std::uint64_t>("component count"));
    level.super_index.resize(static_cast<std::size_t>(n));
    reader.u64_array(level.super_index.data(), static_cast<std::size_t>(n), "super index");
    level.centroids.resize(s, 3);
    reader.f32_array(level.centroids.data(), static_cast<std::size_t>(s) * 3, "centroids");
    level.mean_features.resize(s, feature_dim);
    reader.f32_array(level.mean_features.data(),
                     static_cast<std::size_t>(s) * static_cast<std::size_t>(feature_dim),
                     "mean features");
    level.point_counts.resize(s);
    reader.u64_array(level.point_counts.data(), static_cast<std::size_t>(s), "point counts");
    level.radii.resize(s);
    reader.f32_array(level.radii.data(), static_cast<std::size_t>(s), "radii");
    if (i == 0) file.hierarchy.point_count = n;
    for (Index v : level.super_index)
      if (v < 0 || v >= s) fail(path, "super index out of range");
  }

  if (reader.at_eof()) return file;
  file.graphs.resize(level_count);
  for (std::size_t i = 0; i < level_count; ++i) {
    SuperpointGraph& graph = file.graphs[i];
    graph.level = static_cast<Index>(i) + 1;
    const auto e = static_cast<Index>(reader.pod<std::uint64_t>("edge count"));
    graph.edges.resize(e, 2);
    reader.u64_array(graph.edges.data(), static_cast<std::size_t>(e) * 2, "edges");
    graph.features.resize(e, 18);
    reader.f32_array(graph.features.data(), static_cast<std::size_t>(e) * 18, "edge features");
    graph.gaps.resize(e);
    reader.f32_array(graph.gaps.data(), static_cast<std::size_t>(e), "gaps");
    const Index s = file.hierarchy.size_at(static_cast<Index>(i) + 1);
    for (Index row = 0; row < e; ++row)
      if (graph.edges(row, 0) < 0 || graph.edges(row, 0) >= s || graph.edges(row, 1) < 0 ||
          graph.edges(row, 1) >= s)
        fail(path, "graph edge endpoint out of range");
  }
  if (!reader.at_eof()) fail(path, "trailing bytes after graph section");
  return file;
}

}  // namespace superpart
