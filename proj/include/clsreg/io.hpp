#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "clsreg/geometry.hpp"

namespace clsreg {

using json = nlohmann::json;

// Raised for malformed input files; the CLI maps it to a usage/parse exit.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void set_full_precision(std::ostream& os) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
}
}  // namespace detail

// ---- CSV: one point per row, no header -------------------------------------

inline std::string cloud_to_csv_string(const PointCloud& cloud) {
  std::ostringstream os;
  detail::set_full_precision(os);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < cloud.dim(); ++k) {
      if (k) os << ',';
      os << cloud.points(i, k);
    }
    os << '\n';
  }
  return os.str();
}

inline PointCloud cloud_from_csv_string(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw ParseError("csv: cannot parse value '" + cell + "'");
      }
    }
    if (row.empty()) throw ParseError("csv: empty row");
    if (!rows.empty() && rows[0].size() != row.size())
      throw ParseError("csv: inconsistent column count");
    rows.push_back(std::move(row));
  }
  PointCloud out;
  if (rows.empty()) return out;
  out.points.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k)
      out.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  return out;
}

inline void write_csv(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << cloud_to_csv_string(cloud);
}

inline PointCloud read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return cloud_from_csv_string(buf.str());
}

// ---- ASCII PLY: element vertex, double properties x y z ---------------------

inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  if (cloud.dim() != 3 && !cloud.empty())
    throw std::invalid_argument("write_ply: only 3-D clouds supported");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::set_full_precision(os);
  os << "ply\n"
     << "format ascii 1.0\n"
     << "element vertex " << cloud.size() << "\n"
     << "property double x\n"
     << "property double y\n"
     << "property double z\n"
     << "end_header\n";
  for (Eigen::Index i = 0; i < cloud.size(); ++i)
    os << cloud.points(i, 0) << ' ' << cloud.points(i, 1) << ' ' << cloud.points(i, 2) << '\n';
}

inline PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "ply") throw ParseError(path.string() + ": not a PLY file");

  long vertex_count = -1;
  int property_count = 0;
  bool ascii = false;
  bool in_vertex_element = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok.empty()) continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw ParseError(path.string() + ": only ascii PLY supported");
      ascii = true;
    } else if (tok == "element") {
      std::string name;
      long count = 0;
      ls >> name >> count;
      if (name == "vertex") {
        vertex_count = count;
        in_vertex_element = true;
      } else {
        throw ParseError(path.string() + ": unsupported element '" + name + "'");
      }
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      if (!in_vertex_element) throw ParseError(path.string() + ": property outside vertex element");
      if (type != "double" && type != "float" && type != "float64" && type != "float32")
        throw ParseError(path.string() + ": unsupported property type '" + type + "'");
      static const char* expected[3] = {"x", "y", "z"};
      if (property_count >= 3 || name != expected[property_count])
        throw ParseError(path.string() + ": expected properties x y z");
      ++property_count;
    } else if (tok == "end_header") {
      break;
    } else {
      throw ParseError(path.string() + ": unexpected header token '" + tok + "'");
    }
  }
  if (!ascii || vertex_count < 0 || property_count != 3)
    throw ParseError(path.string() + ": incomplete PLY header");

  PointCloud out;
  out.points.resize(vertex_count, 3);
  for (long i = 0; i < vertex_count; ++i) {
    if (!std::getline(is, line)) throw ParseError(path.string() + ": truncated vertex data");
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) throw ParseError(path.string() + ": bad vertex row " + std::to_string(i));
    out.points.row(i) << x, y, z;
  }
  return out;
}

// Dispatch on extension: .ply or .csv.
inline PointCloud read_cloud(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ply") return read_ply(path);
  if (ext == ".csv") return read_csv(path);
  throw ParseError("unsupported cloud format: " + path.string());
}

inline void write_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  const auto ext = path.extension().string();
  if (ext == ".ply") return write_ply(path, cloud);
  if (ext == ".csv") return write_csv(path, cloud);
  throw std::invalid_argument("unsupported cloud format: " + path.string());
}

// ---- Poses and transforms as JSON -------------------------------------------
// Quaternions are serialized [w, x, y, z].

inline json quaternion_to_json(const Eigen::Quaterniond& q) {
  return json::array({q.w(), q.x(), q.y(), q.z()});
}

inline Eigen::Quaterniond quaternion_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ParseError("orientation must be [w,x,y,z]");
  Eigen::Quaterniond q(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
                       j[3].get<double>());
  if (std::abs(q.norm() - 1.0) > 1e-6) throw ParseError("orientation quaternion not unit-norm");
  return q.normalized();
}

inline json vector3_to_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Eigen::Vector3d vector3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ParseError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json pose_to_json(const Pose& p) {
  return {{"position", vector3_to_json(p.position)},
          {"orientation", quaternion_to_json(p.orientation)}};
}

inline Pose pose_from_json(const json& j) {
  Pose p;
  p.position = vector3_from_json(j.at("position"));
  p.orientation = quaternion_from_json(j.at("orientation"));
  return p;
}

inline json transform_to_json(const RigidTransform& t) {
  return {{"position", vector3_to_json(t.translation)},
          {"orientation", quaternion_to_json(t.rotation)}};
}

inline RigidTransform transform_from_json(const json& j) {
  RigidTransform t;
  t.translation = vector3_from_json(j.at("position"));
  t.rotation = quaternion_from_json(j.at("orientation"));
  return t;
}

inline json load_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace clsreg
