#include "fuseseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fuseseg {

namespace {

// Thomas solve of the interpolation system along one axis:
//   (c[i-1] + 4 c[i] + c[i+1]) / 6 = f[i] in the interior, with
//   linearly-extrapolated edge coefficients (c[-1] = 2c[0] - c[1]), which
//   reduces the boundary rows to c[0] = f[0] and c[n-1] = f[n-1]. This makes
//   the spline reproduce linear data exactly up to the edges; sample_at uses
//   the same extension. `stride` walks the line.
void solve_line(float* base, size_t stride, int n, std::vector<double>& cp,
                std::vector<double>& dp) {
  const double off = 1.0 / 6.0, diag = 4.0 / 6.0;

  cp[0] = 0.0;  // boundary row: c[0] = f[0]
  dp[0] = base[0];
  for (int i = 1; i < n - 1; ++i) {
    double denom = diag - off * cp[i - 1];
    cp[i] = off / denom;
    dp[i] = (base[static_cast<size_t>(i) * stride] - off * dp[i - 1]) / denom;
  }
  dp[n - 1] = base[static_cast<size_t>(n - 1) * stride];  // c[n-1] = f[n-1]
  double prev = dp[n - 1];
  base[static_cast<size_t>(n - 1) * stride] = static_cast<float>(prev);
  for (int i = n - 2; i >= 0; --i) {
    prev = dp[i] - cp[i] * prev;
    base[static_cast<size_t>(i) * stride] = static_cast<float>(prev);
  }
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Cubic B-spline weights for fractional offset t in [0,1); taps are at
// floor(x)-1 .. floor(x)+2.
inline void bspline_weights(double t, double w[4]) {
  double t2 = t * t, t3 = t2 * t;
  w[0] = (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0;
  w[1] = (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0;
  w[2] = (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0;
  w[3] = t3 / 6.0;
}

long ceil_voxels(double extent_mm, double spacing) {
  // Tolerate float noise so an identity resample keeps its dims.
  return static_cast<long>(std::ceil(extent_mm / spacing - 1e-6));
}

}  // namespace

Volume bspline_prefilter(const Volume& vol) {
  vol.validate("bspline_prefilter");
  if (vol.nx < 2 || vol.ny < 2 || vol.nz < 2)
    fail(Err::DegenerateAxis, "bspline_prefilter needs every axis >= 2, got " +
                                  std::to_string(vol.nx) + "x" + std::to_string(vol.ny) +
                                  "x" + std::to_string(vol.nz));

  Volume out = vol;
  int n_max = std::max({vol.nx, vol.ny, vol.nz});
  std::vector<double> cp(n_max), dp(n_max);

  for (int z = 0; z < out.nz; ++z)
    for (int y = 0; y < out.ny; ++y)
      solve_line(&out.data[out.index(0, y, z)], 1, out.nx, cp, dp);
  for (int z = 0; z < out.nz; ++z)
    for (int x = 0; x < out.nx; ++x)
      solve_line(&out.data[out.index(x, 0, z)], out.nx, out.ny, cp, dp);
  for (int y = 0; y < out.ny; ++y)
    for (int x = 0; x < out.nx; ++x)
      solve_line(&out.data[out.index(x, y, 0)], static_cast<size_t>(out.nx) * out.ny,
                 out.nz, cp, dp);
  return out;
}

float sample_at(const Volume& vol, const Vec3& idx, InterpKind kind) {
  switch (kind) {
    case InterpKind::Nearest: {
      int x = clampi(static_cast<int>(std::round(idx.x)), 0, vol.nx - 1);
      int y = clampi(static_cast<int>(std::round(idx.y)), 0, vol.ny - 1);
      int z = clampi(static_cast<int>(std::round(idx.z)), 0, vol.nz - 1);
      return vol.at(x, y, z);
    }
    case InterpKind::Trilinear: {
      double fx = std::floor(idx.x), fy = std::floor(idx.y), fz = std::floor(idx.z);
      double tx = idx.x - fx, ty = idx.y - fy, tz = idx.z - fz;
      int x0 = clampi(static_cast<int>(fx), 0, vol.nx - 1);
      int x1 = clampi(x0 + 1, 0, vol.nx - 1);
      int y0 = clampi(static_cast<int>(fy), 0, vol.ny - 1);
      int y1 = clampi(y0 + 1, 0, vol.ny - 1);
      int z0 = clampi(static_cast<int>(fz), 0, vol.nz - 1);
      int z1 = clampi(z0 + 1, 0, vol.nz - 1);
      // Clamp the fractions too so far out-of-grid queries extend the edge.
      tx = std::clamp(tx + fx - x0, 0.0, 1.0);
      ty = std::clamp(ty + fy - y0, 0.0, 1.0);
      tz = std::clamp(tz + fz - z0, 0.0, 1.0);
      double c00 = vol.at(x0, y0, z0) * (1 - tx) + vol.at(x1, y0, z0) * tx;
      double c10 = vol.at(x0, y1, z0) * (1 - tx) + vol.at(x1, y1, z0) * tx;
      double c01 = vol.at(x0, y0, z1) * (1 - tx) + vol.at(x1, y0, z1) * tx;
      double c11 = vol.at(x0, y1, z1) * (1 - tx) + vol.at(x1, y1, z1) * tx;
      double c0 = c00 * (1 - ty) + c10 * ty;
      double c1 = c01 * (1 - ty) + c11 * ty;
      return static_cast<float>(c0 * (1 - tz) + c1 * tz);
    }
    case InterpKind::CubicBSpline: {
      // Queries outside the grid clamp to the edge of the sampled field;
      // in-range taps past the edge use the prefilter's linear coefficient
      // extrapolation.
      double qx = std::clamp(idx.x, 0.0, static_cast<double>(vol.nx - 1));
      double qy = std::clamp(idx.y, 0.0, static_cast<double>(vol.ny - 1));
      double qz = std::clamp(idx.z, 0.0, static_cast<double>(vol.nz - 1));
      double fx = std::floor(qx), fy = std::floor(qy), fz = std::floor(qz);
      double wx[4], wy[4], wz[4];
      bspline_weights(qx - fx, wx);
      bspline_weights(qy - fy, wy);
      bspline_weights(qz - fz, wz);
      int bx = static_cast<int>(fx) - 1, by = static_cast<int>(fy) - 1,
          bz = static_cast<int>(fz) - 1;
      double acc = 0;
      if (bx >= 0 && by >= 0 && bz >= 0 && bx + 3 < vol.nx && by + 3 < vol.ny &&
          bz + 3 < vol.nz) {
        for (int kz = 0; kz < 4; ++kz) {
          double az = wz[kz];
          for (int ky = 0; ky < 4; ++ky) {
            double ay = az * wy[ky];
            const float* row = &vol.data[vol.index(bx, by + ky, bz + kz)];
            acc += ay * (wx[0] * row[0] + wx[1] * row[1] + wx[2] * row[2] + wx[3] * row[3]);
          }
        }
        return static_cast<float>(acc);
      }
      auto coef = [&vol](int x, int y, int z) -> double {
        auto line = [](int i, int n, auto read) -> double {
          if (i < 0) return 2.0 * read(0) - read(1);
          if (i >= n) return 2.0 * read(n - 1) - read(n - 2);
          return read(i);
        };
        return line(x, vol.nx, [&](int xi) {
          return line(y, vol.ny, [&](int yi) {
            return line(z, vol.nz,
                        [&](int zi) { return static_cast<double>(vol.at(xi, yi, zi)); });
          });
        });
      };
      for (int kz = 0; kz < 4; ++kz) {
        double az = wz[kz];
        if (az == 0.0) continue;
        for (int ky = 0; ky < 4; ++ky) {
          double ay = az * wy[ky];
          if (ay == 0.0) continue;
          double ax = 0;
          for (int kx = 0; kx < 4; ++kx)
            ax += wx[kx] * coef(bx + kx, by + ky, bz + kz);
          acc += ay * ax;
        }
      }
      return static_cast<float>(acc);
    }
  }
  return 0.0f;
}

Volume resample_volume(const Volume& vol, const Vec3& target_spacing, InterpKind kind) {
  vol.validate("resample_volume");
  for (int i = 0; i < 3; ++i)
    if (!(target_spacing[i] > 0))
      fail(Err::InvalidConfig, "resample target spacing must be positive");

  long onx = ceil_voxels(vol.nx * vol.spacing.x, target_spacing.x);
  long ony = ceil_voxels(vol.ny * vol.spacing.y, target_spacing.y);
  long onz = ceil_voxels(vol.nz * vol.spacing.z, target_spacing.z);

  const Volume* src = &vol;
  Volume coeffs;
  if (kind == InterpKind::CubicBSpline) {
    coeffs = bspline_prefilter(vol);
    src = &coeffs;
  }

  Volume out = Volume::create(static_cast<int>(onx), static_cast<int>(ony),
                              static_cast<int>(onz), target_spacing, vol.origin, vol.space);
  double rx = target_spacing.x / vol.spacing.x;
  double ry = target_spacing.y / vol.spacing.y;
  double rz = target_spacing.z / vol.spacing.z;
  for (int z = 0; z < out.nz; ++z)
    for (int y = 0; y < out.ny; ++y) {
      float* row = &out.data[out.index(0, y, z)];
      for (int x = 0; x < out.nx; ++x)
        row[x] = sample_at(*src, {x * rx, y * ry, z * rz}, kind);
    }
  return out;
}

Volume center_crop_pad(const Volume& vol, double extent_x_mm, double extent_y_mm,
                       float pad_value) {
  vol.validate("center_crop_pad");
  if (!(extent_x_mm > 0) || !(extent_y_mm > 0))
    fail(Err::InvalidConfig, "crop extent must be positive");

  int onx = static_cast<int>(std::llround(extent_x_mm / vol.spacing.x));
  int ony = static_cast<int>(std::llround(extent_y_mm / vol.spacing.y));
  onx = std::max(onx, 1);
  ony = std::max(ony, 1);

  // Start offset of the output window in input indices; C integer division
  // truncates toward zero, which removes the extra voxel on the high side
  // when cropping and adds it on the high side when padding.
  int sx = (vol.nx - onx) / 2;
  int sy = (vol.ny - ony) / 2;

  Volume out = Volume::create(onx, ony, vol.nz, vol.spacing,
                              {vol.origin.x + sx * vol.spacing.x,
                               vol.origin.y + sy * vol.spacing.y, vol.origin.z},
                              vol.space, pad_value);
  for (int z = 0; z < vol.nz; ++z)
    for (int oy = 0; oy < ony; ++oy) {
      int iy = oy + sy;
      if (iy < 0 || iy >= vol.ny) continue;
      int ox_lo = std::max(0, -sx);
      int ox_hi = std::min(onx, vol.nx - sx);
      if (ox_lo >= ox_hi) continue;
      const float* src = &vol.data[vol.index(ox_lo + sx, iy, z)];
      float* dst = &out.data[out.index(ox_lo, oy, z)];
      std::copy(src, src + (ox_hi - ox_lo), dst);
    }
  return out;
}

Volume zscore_normalize(const Volume& vol, const Volume& gland_mask) {
  vol.validate("zscore_normalize");
  if (!vol.same_grid(gland_mask))
    fail(Err::GridMismatch, "zscore_normalize: gland mask grid differs from volume");

  double sum = 0.0, sum2 = 0.0;
  size_t count = 0;
  for (size_t i = 0; i < vol.data.size(); ++i) {
    if (gland_mask.data[i] >= 0.5f) {
      double v = vol.data[i];
      sum += v;
      sum2 += v * v;
      ++count;
    }
  }
  if (count < 2) fail(Err::EmptyGland, "zscore_normalize: fewer than 2 gland voxels");
  double mean = sum / static_cast<double>(count);
  double var = sum2 / static_cast<double>(count) - mean * mean;
  double sd = std::sqrt(std::max(var, 0.0));
  if (sd <= 1e-6) fail(Err::DegenerateStd, "zscore_normalize: near-constant gland intensities");

  Volume out = vol;
  float fmean = static_cast<float>(mean), finv = static_cast<float>(1.0 / sd);
  for (float& v : out.data) v = (v - fmean) * finv;
  return out;
}

}  // namespace fuseseg
