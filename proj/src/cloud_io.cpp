#include "superpart/cloud_io.hpp"

#include "superpart/neighborhood.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace superpart {

namespace {

enum class PlyType { Float32, Float64, Uint8, Int8, Uint16, Int16, Uint32, Int32 };

std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
    case PlyType::Uint8:
    case PlyType::Int8: return 1;
    case PlyType::Uint16:
    case PlyType::Int16: return 2;
    case PlyType::Uint32:
    case PlyType::Int32: return 4;
  }
  return 0;
}

bool parse_ply_type(const std::string& token, PlyType& out) {
  if (token == "float" || token == "float32") out = PlyType::Float32;
  else if (token == "double" || token == "float64") out = PlyType::Float64;
  else if (token == "uchar" || token == "uint8") out = PlyType::Uint8;
  else if (token == "char" || token == "int8") out = PlyType::Int8;
  else if (token == "ushort" || token == "uint16") out = PlyType::Uint16;
  else if (token == "short" || token == "int16") out = PlyType::Int16;
  else if (token == "uint" || token == "uint32") out = PlyType::Uint32;
  else if (token == "int" || token == "int32") out = PlyType::Int32;
  else return false;
  return true;
}

struct PlyProperty {
  std::string name;
  PlyType type{PlyType::Float32};
};

struct PlyHeader {
  bool binary{false};
  Index vertex_count{0};
  std::vector<PlyProperty> vertex_properties;
  std::size_t header_bytes{0};
};

[[noreturn]] void parse_fail(const std::string& path, int line, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

PlyHeader parse_ply_header(std::istream& in, const std::string& path) {
  PlyHeader header;
  std::string line;
  int line_no = 0;
  std::size_t consumed = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    consumed += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++line_no;
    return true;
  };

  if (!next_line() || line != "ply") parse_fail(path, 1, "missing 'ply' magic");
  bool in_vertex_element = false;
  bool saw_format = false;
  bool vertex_seen = false;
  while (next_line()) {
    std::istringstream iss(line);
    std::string keyword;
    iss >> keyword;
    if (keyword == "comment" || keyword == "obj_info" || keyword.empty()) continue;
    if (keyword == "format") {
      std::string fmt, version;
      iss >> fmt >> version;
      if (fmt == "ascii") header.binary = false;
      else if (fmt == "binary_little_endian") header.binary = true;
      else parse_fail(path, line_no, "unsupported format '" + fmt + "'");
      saw_format = true;
    } else if (keyword == "element") {
      std::string name;
      Index count = 0;
      if (!(iss >> name >> count)) parse_fail(path, line_no, "malformed element line");
      if (name == "vertex") {
        header.vertex_count = count;
        in_vertex_element = true;
        vertex_seen = true;
      } else {
        if (!vertex_seen && count > 0)
          parse_fail(path, line_no, "element '" + name + "' precedes vertex data");
        in_vertex_element = false;
      }
    } else if (keyword == "property") {
      std::string type_token;
      if (!(iss >> type_token)) parse_fail(path, line_no, "malformed property line");
      if (type_token == "list") {
        if (in_vertex_element) parse_fail(path, line_no, "list properties on vertices unsupported");
        continue;
      }
      if (!in_vertex_element) continue;
      PlyProperty prop;
      if (!parse_ply_type(type_token, prop.type))
        parse_fail(path, line_no, "unknown property type '" + type_token + "'");
      if (!(iss >> prop.name)) parse_fail(path, line_no, "property missing name");
      header.vertex_properties.push_back(prop);
    } else if (keyword == "end_header") {
      if (!saw_format) parse_fail(path, line_no, "missing format line");
      if (!vertex_seen) parse_fail(path, line_no, "missing vertex element");
      header.header_bytes = consumed;
      return header;
    } else {
      parse_fail(path, line_no, "unknown header keyword '" + keyword + "'");
    }
  }
  parse_fail(path, line_no, "unexpected end of header");
}

double decode_scalar(const char* bytes, PlyType type) {
  switch (type) {
    case PlyType::Float32: {
      float v;
      std::memcpy(&v, bytes, 4);
      return static_cast<double>(v);
    }
    case PlyType::Float64: {
      double v;
      std::memcpy(&v, bytes, 8);
      return v;
    }
    case PlyType::Uint8: {
      std::uint8_t v;
      std::memcpy(&v, bytes, 1);
      return static_cast<double>(v);
    }
    case PlyType::Int8: {
      std::int8_t v;
      std::memcpy(&v, bytes, 1);
      return static_cast<double>(v);
    }
    case PlyType::Uint16: {
      std::uint16_t v;
      std::memcpy(&v, bytes, 2);
      return static_cast<double>(v);
    }
    case PlyType::Int16: {
      std::int16_t v;
      std::memcpy(&v, bytes, 2);
      return static_cast<double>(v);
    }
    case PlyType::Uint32: {
      std::uint32_t v;
      std::memcpy(&v, bytes, 4);
      return static_cast<double>(v);
    }
    case PlyType::Int32: {
      std::int32_t v;
      std::memcpy(&v, bytes, 4);
      return static_cast<double>(v);
    }
  }
  return 0.0;
}

// Ascii values are parsed through the declared storage type, so an ascii
// file and its binary twin decode to identical doubles.
double parse_ascii_scalar(const std::string& token, PlyType type, const std::string& path,
                          int line_no) {
  errno = 0;
  char* end = nullptr;
  const double raw = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0')
    parse_fail(path, line_no, "invalid numeric token '" + token + "'");
  switch (type) {
    case PlyType::Float32: return static_cast<double>(static_cast<float>(raw));
    case PlyType::Float64: return raw;
    default: return static_cast<double>(static_cast<std::int64_t>(std::llround(raw)));
  }
}

double normalize_channel(double raw, PlyType type, double declared_max) {
  double value = raw;
  switch (type) {
    case PlyType::Uint8: value = raw / 255.0; break;
    case PlyType::Uint16: value = raw / 65535.0; break;
    case PlyType::Float32:
    case PlyType::Float64: value = declared_max > 0 ? raw / declared_max : raw; break;
    default: value = raw; break;
  }
  return std::clamp(value, 0.0, 1.0);
}

PointCloud assemble_cloud(const PlyHeader& header, const std::vector<std::vector<double>>& columns,
                          const ReadOptions& options, const std::string& path) {
  const auto& props = header.vertex_properties;
  auto find = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i)
      if (props[i].name == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  if (ix < 0 || iy < 0 || iz < 0) throw std::runtime_error(path + ": missing x/y/z properties");
  const int ir = find("red"), ig = find("green"), ib = find("blue");
  const int ii = find(options.intensity_property);
  const int il = find(options.label_property);
  // Remapped property names are a deliberate request; missing targets are a
  // configuration error. The defaults stay optional.
  const ReadOptions defaults;
  if (il < 0 && options.label_property != defaults.label_property)
    throw std::invalid_argument(path + ": no property named '" + options.label_property + "'");
  if (ii < 0 && options.intensity_property != defaults.intensity_property)
    throw std::invalid_argument(path + ": no property named '" + options.intensity_property + "'");

  const Index n = header.vertex_count;
  PointCloud cloud;
  cloud.positions.resize(n, 3);
  for (Index p = 0; p < n; ++p) {
    cloud.positions(p, 0) = columns[static_cast<std::size_t>(ix)][static_cast<std::size_t>(p)];
    cloud.positions(p, 1) = columns[static_cast<std::size_t>(iy)][static_cast<std::size_t>(p)];
    cloud.positions(p, 2) = columns[static_cast<std::size_t>(iz)][static_cast<std::size_t>(p)];
  }
  if (ir >= 0 && ig >= 0 && ib >= 0) {
    cloud.radiometry.resize(n, 3);
    const std::array<int, 3> idx = {ir, ig, ib};
    for (Index p = 0; p < n; ++p)
      for (int c = 0; c < 3; ++c)
        cloud.radiometry(p, c) =
            normalize_channel(columns[static_cast<std::size_t>(idx[static_cast<std::size_t>(c)])]
                                     [static_cast<std::size_t>(p)],
                              props[static_cast<std::size_t>(idx[static_cast<std::size_t>(c)])].type,
                              1.0);
  } else if (ii >= 0) {
    cloud.radiometry.resize(n, 1);
    for (Index p = 0; p < n; ++p)
      cloud.radiometry(p, 0) =
          normalize_channel(columns[static_cast<std::size_t>(ii)][static_cast<std::size_t>(p)],
                            props[static_cast<std::size_t>(ii)].type, options.intensity_max);
  }
  if (il >= 0) {
    cloud.labels.resize(n);
    for (Index p = 0; p < n; ++p)
      cloud.labels[p] = static_cast<int>(
          std::llround(columns[static_cast<std::size_t>(il)][static_cast<std::size_t>(p)]));
  }
  return cloud;
}

PointCloud read_ply(std::ifstream& in, const std::string& path, const ReadOptions& options) {
  PlyHeader header = parse_ply_header(in, path);
  const std::size_t prop_count = header.vertex_properties.size();
  std::vector<std::vector<double>> columns(prop_count);
  for (auto& c : columns) c.resize(static_cast<std::size_t>(header.vertex_count));

  if (header.binary) {
    // Reopen in binary mode at the data offset; getline may have run ahead.
    std::ifstream bin(path, std::ios::binary);
    bin.seekg(static_cast<std::streamoff>(header.header_bytes));
    std::size_t row_bytes = 0;
    for (const auto& prop : header.vertex_properties) row_bytes += ply_type_size(prop.type);
    std::vector<char> row(row_bytes);
    for (Index p = 0; p < header.vertex_count; ++p) {
      if (!bin.read(row.data(), static_cast<std::streamsize>(row_bytes)))
        throw std::runtime_error(path + ": truncated binary vertex data");
      std::size_t offset = 0;
      for (std::size_t c = 0; c < prop_count; ++c) {
        columns[c][static_cast<std::size_t>(p)] =
            decode_scalar(row.data() + offset, header.vertex_properties[c].type);
        offset += ply_type_size(header.vertex_properties[c].type);
      }
    }
  } else {
    std::string line;
    int line_no = 0;
    for (Index p = 0; p < header.vertex_count; ++p) {
      if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated vertex data");
      ++line_no;
      std::istringstream iss(line);
      std::string token;
      for (std::size_t c = 0; c < prop_count; ++c) {
        if (!(iss >> token))
          parse_fail(path, line_no, "vertex line has too few values");
        columns[c][static_cast<std::size_t>(p)] =
            parse_ascii_scalar(token, header.vertex_properties[c].type, path, line_no);
      }
    }
  }
  return assemble_cloud(header, columns, options, path);
}

PointCloud read_xyz(std::ifstream& in, const std::string& path) {
  std::vector<std::array<double, 3>> positions;
  std::vector<std::array<double, 3>> colors;
  std::vector<int> labels;
  int column_count = -1;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream iss(line);
    std::vector<std::string> tokens;
    std::string token;
    while (iss >> token) tokens.push_back(token);
    if (column_count < 0) {
      column_count = static_cast<int>(tokens.size());
      if (column_count != 3 && column_count != 4 && column_count != 6 && column_count != 7)
        parse_fail(path, line_no, "expected 3, 4, 6 or 7 columns");
    }
    if (static_cast<int>(tokens.size()) != column_count)
      parse_fail(path, line_no, "inconsistent column count");
    auto scalar = [&](int c) {
      return parse_ascii_scalar(tokens[static_cast<std::size_t>(c)], PlyType::Float32, path,
                                line_no);
    };
    positions.push_back({scalar(0), scalar(1), scalar(2)});
    if (column_count >= 6) colors.push_back({scalar(3), scalar(4), scalar(5)});
    if (column_count == 4 || column_count == 7)
      labels.push_back(static_cast<int>(
          std::llround(std::strtod(tokens.back().c_str(), nullptr))));
  }
  const Index n = static_cast<Index>(positions.size());
  PointCloud cloud;
  cloud.positions.resize(n, 3);
  for (Index p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c)
      cloud.positions(p, c) = positions[static_cast<std::size_t>(p)][static_cast<std::size_t>(c)];
  if (!colors.empty()) {
    cloud.radiometry.resize(n, 3);
    for (Index p = 0; p < n; ++p)
      for (int c = 0; c < 3; ++c)
        cloud.radiometry(p, c) = std::clamp(
            colors[static_cast<std::size_t>(p)][static_cast<std::size_t>(c)] / 255.0, 0.0, 1.0);
  }
  if (!labels.empty()) {
    cloud.labels.resize(n);
    for (Index p = 0; p < n; ++p) cloud.labels[p] = labels[static_cast<std::size_t>(p)];
  }
  return cloud;
}

// %.9g of a float32 value round-trips bit-exactly through strtod + cast.
std::string format_f32(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(value)));
  return buf;
}

void write_ply(const PointCloud& cloud, const std::string& path, bool binary,
               const ReadOptions& options) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  const Index n = cloud.size();
  const Index r = cloud.radiometry_dim();
  out << "ply\n";
  out << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n");
  out << "element vertex " << n << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (r == 3)
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  else if (r == 1)
    out << "property float " << options.intensity_property << "\n";
  if (cloud.has_labels()) out << "property int " << options.label_property << "\n";
  out << "end_header\n";

  for (Index p = 0; p < n; ++p) {
    const float x = static_cast<float>(cloud.positions(p, 0));
    const float y = static_cast<float>(cloud.positions(p, 1));
    const float z = static_cast<float>(cloud.positions(p, 2));
    if (binary) {
      out.write(reinterpret_cast<const char*>(&x), 4);
      out.write(reinterpret_cast<const char*>(&y), 4);
      out.write(reinterpret_cast<const char*>(&z), 4);
      if (r == 3) {
        for (int c = 0; c < 3; ++c) {
          const auto byte = static_cast<std::uint8_t>(
              std::lround(std::clamp(cloud.radiometry(p, c), 0.0, 1.0) * 255.0));
          out.write(reinterpret_cast<const char*>(&byte), 1);
        }
      } else if (r == 1) {
        const float i = static_cast<float>(cloud.radiometry(p, 0) * options.intensity_max);
        out.write(reinterpret_cast<const char*>(&i), 4);
      }
      if (cloud.has_labels()) {
        const std::int32_t label = cloud.labels[p];
        out.write(reinterpret_cast<const char*>(&label), 4);
      }
    } else {
      out << format_f32(x) << ' ' << format_f32(y) << ' ' << format_f32(z);
      if (r == 3) {
        for (int c = 0; c < 3; ++c)
          out << ' '
              << std::lround(std::clamp(cloud.radiometry(p, c), 0.0, 1.0) * 255.0);
      } else if (r == 1) {
        out << ' ' << format_f32(cloud.radiometry(p, 0) * options.intensity_max);
      }
      if (cloud.has_labels()) out << ' ' << cloud.labels[p];
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

void write_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  const Index n = cloud.size();
  const bool rgb = cloud.radiometry_dim() == 3;
  for (Index p = 0; p < n; ++p) {
    out << format_f32(cloud.positions(p, 0)) << ' ' << format_f32(cloud.positions(p, 1)) << ' '
        << format_f32(cloud.positions(p, 2));
    if (rgb)
      for (int c = 0; c < 3; ++c)
        out << ' ' << std::lround(std::clamp(cloud.radiometry(p, c), 0.0, 1.0) * 255.0);
    if (cloud.has_labels()) out << ' ' << cloud.labels[p];
    out << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace

PointCloud read_cloud(const std::string& path, const ReadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[3] = {0, 0, 0};
  in.read(magic, 3);
  in.seekg(0);
  if (magic[0] == 'p' && magic[1] == 'l' && magic[2] == 'y') return read_ply(in, path, options);
  return read_xyz(in, path);
}

void write_cloud(const PointCloud& cloud, const std::string& path, CloudFormat format,
                 const ReadOptions& options) {
  switch (format) {
    case CloudFormat::PlyAscii: write_ply(cloud, path, false, options); break;
    case CloudFormat::PlyBinary: write_ply(cloud, path, true, options); break;
    case CloudFormat::XyzText: write_xyz(cloud, path); break;
  }
}

VoxelSubsampleResult voxel_subsample(const PointCloud& cloud, double voxel_size) {
  require(voxel_size > 0.0, "voxel_size must be > 0");
  const Index n = cloud.size();
  const Index r = cloud.radiometry_dim();

  struct Key {
    std::int64_t x, y, z;
    bool operator==(const Key&) const = default;
    bool operator<(const Key& o) const {
      if (x != o.x) return x < o.x;
      if (y != o.y) return y < o.y;
      return z < o.z;
    }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = 1469598103934665603ull;
      for (std::int64_t v : {k.x, k.y, k.z}) {
        h ^= static_cast<std::uint64_t>(v);
        h *= 1099511628211ull;
      }
      return static_cast<std::size_t>(h);
    }
  };

  std::unordered_map<Key, std::vector<Index>, KeyHash> grid;
  grid.reserve(static_cast<std::size_t>(n));
  for (Index p = 0; p < n; ++p) {
    const Key key{static_cast<std::int64_t>(std::floor(cloud.positions(p, 0) / voxel_size)),
                  static_cast<std::int64_t>(std::floor(cloud.positions(p, 1) / voxel_size)),
                  static_cast<std::int64_t>(std::floor(cloud.positions(p, 2) / voxel_size))};
    grid[key].push_back(p);
  }

  std::vector<std::pair<Key, std::vector<Index>>> cells(grid.begin(), grid.end());
  std::sort(cells.begin(), cells.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  const Index m = static_cast<Index>(cells.size());
  VoxelSubsampleResult result;
  result.cloud.positions.resize(m, 3);
  if (r > 0) result.cloud.radiometry.resize(m, r);
  if (cloud.has_labels()) result.cloud.labels.resize(m);
  result.groups.resize(static_cast<std::size_t>(m));

  for (Index cell = 0; cell < m; ++cell) {
    auto& members = cells[static_cast<std::size_t>(cell)].second;
    std::sort(members.begin(), members.end());
    Vec3 pos_sum = Vec3::Zero();
    Vec rad_sum = Vec::Zero(r);
    std::map<int, Index> votes;
    for (Index p : members) {
      pos_sum += cloud.positions.row(p).transpose();
      if (r > 0) rad_sum += cloud.radiometry.row(p).transpose();
      if (cloud.has_labels()) ++votes[cloud.labels[p]];
    }
    const double inv = 1.0 / static_cast<double>(members.size());
    result.cloud.positions.row(cell) = (pos_sum * inv).transpose();
    if (r > 0) result.cloud.radiometry.row(cell) = (rad_sum * inv).transpose();
    if (cloud.has_labels()) {
      int best_label = -1;
      Index best_count = -1;
      for (const auto& [label, count] : votes) {
        if (count > best_count) {  // map order gives smallest label on ties
          best_label = label;
          best_count = count;
        }
      }
      result.cloud.labels[cell] = best_label;
    }
    result.groups[static_cast<std::size_t>(cell)] = std::move(members);
  }
  return result;
}

std::vector<Index> sample_sphere(const PointCloud& cloud, const Vec3& center, double radius) {
  require(radius > 0.0, "radius must be > 0");
  if (cloud.size() == 0) return {};
  const KdTree tree(cloud.positions);
  return tree.radius_query(center, radius);
}

}  // namespace superpart
