#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clsreg/geometry.hpp"
#include "clsreg/rng.hpp"

namespace clsreg {

struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
};

using ParamMap = std::map<std::string, double>;

// Parametric shape family used in place of a CAD corpus. Instances are
// surface point clouds in a fixed canonical frame, normalized so the
// analytic bounding-box diagonal is 1.
struct CategorySpec {
  std::string family;
  std::map<std::string, ParamRange> ranges;
  int samples = 300;
};

inline CategorySpec mug_spec(int samples = 300) {
  CategorySpec s;
  s.family = "mug";
  s.ranges = {{"body_radius", {0.30, 0.45}},
              {"body_height", {0.90, 1.30}},
              {"handle_radius", {0.18, 0.28}},
              {"handle_thickness", {0.04, 0.08}}};
  s.samples = samples;
  return s;
}

inline CategorySpec drill_spec(int samples = 300) {
  CategorySpec s;
  s.family = "drill";
  s.ranges = {{"barrel_radius", {0.12, 0.20}},
              {"barrel_length", {0.80, 1.20}},
              {"grip_radius", {0.08, 0.14}},
              {"grip_length", {0.35, 0.55}}};
  s.samples = samples;
  return s;
}

inline ParamMap nominal_params(const CategorySpec& spec) {
  ParamMap p;
  for (const auto& [name, r] : spec.ranges) p[name] = 0.5 * (r.lo + r.hi);
  return p;
}

// Uniform draw from every range; map iteration order is sorted by key, so
// the draw sequence is stable.
inline ParamMap sample_params(const CategorySpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  ParamMap p;
  for (const auto& [name, r] : spec.ranges) p[name] = rng.uniform(r.lo, r.hi);
  return p;
}

inline void validate_params(const CategorySpec& spec, const ParamMap& params) {
  for (const auto& [name, r] : spec.ranges) {
    auto it = params.find(name);
    if (it == params.end())
      throw std::invalid_argument(spec.family + ": missing parameter '" + name + "'");
    if (it->second < r.lo || it->second > r.hi)
      throw std::invalid_argument(spec.family + ": parameter '" + name + "' out of range");
  }
}

namespace detail {

struct Face {
  std::string name;
  double area = 0.0;
  std::function<Eigen::Vector3d(Rng&)> sample;
};

// Mug: capped cylinder (axis z, base at z=0) plus a half-torus handle in the
// xz-plane on the +x side (canonical frame: handle points right).
inline std::vector<Face> mug_faces(const ParamMap& p) {
  const double r = p.at("body_radius");
  const double h = p.at("body_height");
  const double R = p.at("handle_radius");
  const double t = p.at("handle_thickness");
  const double cz = 0.5 * h;  // handle center height

  std::vector<Face> faces;
  faces.push_back({"wall", 2.0 * M_PI * r * h, [r, h](Rng& g) {
                     const double a = g.uniform(0.0, 2.0 * M_PI);
                     return Eigen::Vector3d(r * std::cos(a), r * std::sin(a), g.uniform(0.0, h));
                   }});
  auto cap = [r](double z) {
    return [r, z](Rng& g) {
      const double rad = r * std::sqrt(g.uniform01());
      const double a = g.uniform(0.0, 2.0 * M_PI);
      return Eigen::Vector3d(rad * std::cos(a), rad * std::sin(a), z);
    };
  };
  faces.push_back({"bottom", M_PI * r * r, cap(0.0)});
  faces.push_back({"top", M_PI * r * r, cap(h)});
  // Half torus: major circle center (r, 0, cz), major radius R, tube radius t,
  // torus axis y, arc angle phi in [-pi/2, pi/2] measured from +x. Density over
  // the tube angle psi follows the torus area element via rejection sampling.
  faces.push_back({"handle", 2.0 * M_PI * M_PI * R * t, [r, R, t, cz](Rng& g) {
                     const double phi = g.uniform(-0.5 * M_PI, 0.5 * M_PI);
                     double psi = 0.0;
                     for (;;) {
                       psi = g.uniform(0.0, 2.0 * M_PI);
                       const double accept = (R + t * std::cos(psi)) / (R + t);
                       if (g.uniform01() <= accept) break;
                     }
                     const Eigen::Vector3d u(std::cos(phi), 0.0, std::sin(phi));
                     const Eigen::Vector3d c(r + R * std::cos(phi), 0.0, cz + R * std::sin(phi));
                     return Eigen::Vector3d(c + t * std::cos(psi) * u +
                                            t * std::sin(psi) * Eigen::Vector3d::UnitY());
                   }});
  return faces;
}

inline BoundingBox mug_bbox(const ParamMap& p) {
  const double r = p.at("body_radius");
  const double h = p.at("body_height");
  const double R = p.at("handle_radius");
  const double t = p.at("handle_thickness");
  const double cz = 0.5 * h;
  BoundingBox b;
  b.min = Eigen::Vector3d(-r, -r, std::min(0.0, cz - R - t));
  b.max = Eigen::Vector3d(r + R + t, std::max(r, t), std::max(h, cz + R + t));
  return b;
}

// Drill: barrel cylinder along +x from x=0 to x=L (canonical frame: barrel
// points right), grip cylinder hanging down -z, tangent under the barrel at
// x = 0.3 L.
inline std::vector<Face> drill_faces(const ParamMap& p) {
  const double rb = p.at("barrel_radius");
  const double L = p.at("barrel_length");
  const double rg = p.at("grip_radius");
  const double H = p.at("grip_length");
  const double gx = 0.3 * L;   // grip axis x position
  const double gz = -rb;       // grip top (tangent plane under the barrel)

  std::vector<Face> faces;
  faces.push_back({"barrel_wall", 2.0 * M_PI * rb * L, [rb, L](Rng& g) {
                     const double a = g.uniform(0.0, 2.0 * M_PI);
                     return Eigen::Vector3d(g.uniform(0.0, L), rb * std::cos(a), rb * std::sin(a));
                   }});
  auto barrel_cap = [rb](double x) {
    return [rb, x](Rng& g) {
      const double rad = rb * std::sqrt(g.uniform01());
      const double a = g.uniform(0.0, 2.0 * M_PI);
      return Eigen::Vector3d(x, rad * std::cos(a), rad * std::sin(a));
    };
  };
  faces.push_back({"barrel_back", M_PI * rb * rb, barrel_cap(0.0)});
  faces.push_back({"barrel_front", M_PI * rb * rb, barrel_cap(L)});
  faces.push_back({"grip_wall", 2.0 * M_PI * rg * H, [rg, H, gx, gz](Rng& g) {
                     const double a = g.uniform(0.0, 2.0 * M_PI);
                     return Eigen::Vector3d(gx + rg * std::cos(a), rg * std::sin(a),
                                            gz - g.uniform(0.0, H));
                   }});
  auto grip_cap = [rg, gx](double z) {
    return [rg, gx, z](Rng& g) {
      const double rad = rg * std::sqrt(g.uniform01());
      const double a = g.uniform(0.0, 2.0 * M_PI);
      return Eigen::Vector3d(gx + rad * std::cos(a), rad * std::sin(a), z);
    };
  };
  faces.push_back({"grip_top", M_PI * rg * rg, grip_cap(gz)});
  faces.push_back({"grip_bottom", M_PI * rg * rg, grip_cap(gz - H)});
  return faces;
}

inline BoundingBox drill_bbox(const ParamMap& p) {
  const double rb = p.at("barrel_radius");
  const double L = p.at("barrel_length");
  const double rg = p.at("grip_radius");
  const double H = p.at("grip_length");
  const double gx = 0.3 * L;
  BoundingBox b;
  b.min = Eigen::Vector3d(std::min(0.0, gx - rg), -std::max(rb, rg), -rb - H);
  b.max = Eigen::Vector3d(std::max(L, gx + rg), std::max(rb, rg), rb);
  return b;
}

inline std::vector<Face> family_faces(const CategorySpec& spec, const ParamMap& params) {
  if (spec.family == "mug") return mug_faces(params);
  if (spec.family == "drill") return drill_faces(params);
  throw std::invalid_argument("unknown family: " + spec.family);
}

}  // namespace detail

// Axis-aligned bounds of the ideal surface at these parameters, before
// normalization. Closed form, independent of sampling.
inline BoundingBox analytic_bbox(const CategorySpec& spec, const ParamMap& params) {
  if (spec.family == "mug") return detail::mug_bbox(params);
  if (spec.family == "drill") return detail::drill_bbox(params);
  throw std::invalid_argument("unknown family: " + spec.family);
}

// Per-face sample counts proportional to area, largest-remainder rounding.
// Ties go to the lower face index, so the split is deterministic.
inline std::vector<int> allocate_proportional(const std::vector<double>& areas, int total) {
  if (total < 0) throw std::invalid_argument("allocate_proportional: negative total");
  double sum = 0.0;
  for (double a : areas) {
    if (a < 0.0) throw std::invalid_argument("allocate_proportional: negative area");
    sum += a;
  }
  if (sum <= 0.0) throw std::invalid_argument("allocate_proportional: zero total area");
  std::vector<int> counts(areas.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t i = 0; i < areas.size(); ++i) {
    const double quota = total * areas[i] / sum;
    counts[i] = static_cast<int>(std::floor(quota));
    assigned += counts[i];
    remainders.emplace_back(quota - counts[i], i);
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int j = 0; j < total - assigned; ++j) counts[remainders[static_cast<std::size_t>(j)].second]++;
  return counts;
}

// Surface point cloud at the given parameters, normalized to unit
// bounding-box diagonal. Deterministic for a fixed seed.
inline PointCloud generate_instance(const CategorySpec& spec, const ParamMap& params,
                                    std::uint64_t seed) {
  validate_params(spec, params);
  if (spec.samples < 1) throw std::invalid_argument("generate_instance: samples must be >= 1");
  const auto faces = detail::family_faces(spec, params);
  std::vector<double> areas;
  areas.reserve(faces.size());
  for (const auto& f : faces) areas.push_back(f.area);
  const auto counts = allocate_proportional(areas, spec.samples);

  const double diag = analytic_bbox(spec, params).diagonal();
  const double scale = 1.0 / diag;

  Rng rng(seed);
  PointCloud out;
  out.points.resize(spec.samples, 3);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < faces.size(); ++i)
    for (int j = 0; j < counts[i]; ++j) out.points.row(row++) = scale * faces[i].sample(rng);
  return out;
}

inline PointCloud generate_instance(const CategorySpec& spec, std::uint64_t seed) {
  return generate_instance(spec, sample_params(spec, mix_seed(seed, 0x70617261)), seed);
}

}  // namespace clsreg
