#include "fuseseg/volume.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace fuseseg {

double norm(const Vec3& v) { return std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z); }

Volume Volume::create(int nx, int ny, int nz, Vec3 spacing, Vec3 origin, SpaceTag space,
                      float fill) {
  if (nx <= 0 || ny <= 0 || nz <= 0)
    fail(Err::InvalidConfig, "volume dims must be positive");
  Volume v;
  v.nx = nx;
  v.ny = ny;
  v.nz = nz;
  v.spacing = spacing;
  v.origin = origin;
  v.space = space;
  v.data.assign(static_cast<size_t>(nx) * ny * nz, fill);
  v.validate("Volume::create");
  return v;
}

bool Volume::same_grid(const Volume& o, double tol) const {
  if (nx != o.nx || ny != o.ny || nz != o.nz) return false;
  auto close = [tol](double a, double b) { return std::abs(a - b) <= tol; };
  return close(spacing.x, o.spacing.x) && close(spacing.y, o.spacing.y) &&
         close(spacing.z, o.spacing.z) && close(origin.x, o.origin.x) &&
         close(origin.y, o.origin.y) && close(origin.z, o.origin.z);
}

void Volume::validate(const std::string& ctx) const {
  for (int i = 0; i < 3; ++i) {
    double s = spacing[i];
    if (!(s > 0.0) || !std::isfinite(s))
      fail(Err::InvalidConfig, ctx + ": spacing must be positive and finite");
    if (!std::isfinite(origin[i])) fail(Err::InvalidConfig, ctx + ": non-finite origin");
  }
  if (data.size() != static_cast<size_t>(nx) * ny * nz)
    fail(Err::InvalidConfig, ctx + ": data length does not match dims");
  for (float v : data)
    if (!std::isfinite(v)) fail(Err::NonFiniteData, ctx + ": volume contains NaN/Inf");
}

Vec3 world_to_voxel(const Volume& vol, const Vec3& p) {
  return {(p.x - vol.origin.x) / vol.spacing.x, (p.y - vol.origin.y) / vol.spacing.y,
          (p.z - vol.origin.z) / vol.spacing.z};
}

Vec3 voxel_to_world(const Volume& vol, const Vec3& idx) {
  return {vol.origin.x + idx.x * vol.spacing.x, vol.origin.y + idx.y * vol.spacing.y,
          vol.origin.z + idx.z * vol.spacing.z};
}

Affine3 Affine3::translation(const Vec3& t) {
  Affine3 a;
  a.m[3] = t.x;
  a.m[7] = t.y;
  a.m[11] = t.z;
  return a;
}

double Affine3::det() const {
  return m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8]) +
         m[2] * (m[4] * m[9] - m[5] * m[8]);
}

Vec3 Affine3::apply(const Vec3& p) const {
  return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
          m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
          m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
}

Affine3 Affine3::compose(const Affine3& other) const {
  Affine3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += m[i * 4 + k] * other.m[k * 4 + j];
      if (j == 3) s += m[i * 4 + 3];
      r.m[i * 4 + j] = s;
    }
  }
  return r;
}

Affine3 Affine3::inverse() const {
  double d = det();
  if (std::abs(d) <= 1e-9) fail(Err::SingularTransform, "affine linear part not invertible");
  double inv[9];
  inv[0] = (m[5] * m[10] - m[6] * m[9]) / d;
  inv[1] = (m[2] * m[9] - m[1] * m[10]) / d;
  inv[2] = (m[1] * m[6] - m[2] * m[5]) / d;
  inv[3] = (m[6] * m[8] - m[4] * m[10]) / d;
  inv[4] = (m[0] * m[10] - m[2] * m[8]) / d;
  inv[5] = (m[2] * m[4] - m[0] * m[6]) / d;
  inv[6] = (m[4] * m[9] - m[5] * m[8]) / d;
  inv[7] = (m[1] * m[8] - m[0] * m[9]) / d;
  inv[8] = (m[0] * m[5] - m[1] * m[4]) / d;
  Affine3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.m[i * 4 + j] = inv[i * 3 + j];
  // t' = -A^-1 t
  for (int i = 0; i < 3; ++i)
    r.m[i * 4 + 3] = -(inv[i * 3] * m[3] + inv[i * 3 + 1] * m[7] + inv[i * 3 + 2] * m[11]);
  return r;
}

bool Affine3::near(const Affine3& o, double tol) const {
  for (int i = 0; i < 12; ++i)
    if (std::abs(m[i] - o.m[i]) > tol) return false;
  return true;
}

void Affine3::save_json(const std::string& path) const {
  nlohmann::json j = nlohmann::json::array();
  for (double v : m) j.push_back(v);
  std::ofstream f(path);
  if (!f) fail(Err::IoError, "cannot open for write: " + path);
  f << j.dump() << "\n";
  if (!f) fail(Err::IoError, "write failed: " + path);
}

Affine3 Affine3::load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::MissingFile, "cannot open: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(Err::SchemaError, "bad transform json " + path + ": " + e.what());
  }
  if (!j.is_array() || j.size() != 12)
    fail(Err::SchemaError, "transform json must be an array of 12 numbers: " + path);
  Affine3 a;
  for (int i = 0; i < 12; ++i) a.m[i] = j[i].get<double>();
  return a;
}

}  // namespace fuseseg
