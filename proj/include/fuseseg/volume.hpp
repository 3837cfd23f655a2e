#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fuseseg/common.hpp"

namespace fuseseg {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
};

double norm(const Vec3& v);

enum class SpaceTag { MRI, TRUS, Other };

// Dense 3-D scalar field with physical geometry. Voxel (i,j,k) is centered
// at origin + (i,j,k) * spacing (mm); data is x-fastest.
struct Volume {
  int nx = 0, ny = 0, nz = 0;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  SpaceTag space = SpaceTag::Other;
  std::vector<float> data;

  static Volume create(int nx, int ny, int nz, Vec3 spacing, Vec3 origin = {},
                       SpaceTag space = SpaceTag::Other, float fill = 0.0f);

  size_t size() const { return data.size(); }
  size_t index(int x, int y, int z) const {
    return (static_cast<size_t>(z) * ny + y) * nx + x;
  }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }

  bool same_grid(const Volume& o, double tol = 1e-6) const;
  double voxel_volume_mm3() const { return spacing.x * spacing.y * spacing.z; }

  // Checks the type invariants (positive finite spacing, size consistency,
  // finite data). Throws NonFiniteData / InvalidConfig with `ctx` in the
  // message.
  void validate(const std::string& ctx) const;
};

Vec3 world_to_voxel(const Volume& vol, const Vec3& p);
Vec3 voxel_to_world(const Volume& vol, const Vec3& idx);

// Physical-space affine map, 3x4 row-major: p' = A * p + t with A the left
// 3x3 block and t the last column (mm).
struct Affine3 {
  std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

  static Affine3 identity() { return Affine3{}; }
  static Affine3 translation(const Vec3& t);

  double det() const;
  Vec3 apply(const Vec3& p) const;
  // Composition as maps: (*this)(other(p)).
  Affine3 compose(const Affine3& other) const;
  // Inverse map; throws SingularTransform when |det| <= 1e-9.
  Affine3 inverse() const;

  bool near(const Affine3& o, double tol = 1e-9) const;

  void save_json(const std::string& path) const;
  static Affine3 load_json(const std::string& path);
};

}  // namespace fuseseg
