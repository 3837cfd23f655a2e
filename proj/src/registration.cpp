#include "fuseseg/registration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fuseseg {

namespace {

void mat3_mul(const double a[9], const double b[9], double out[9]) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      out[i * 3 + j] = s;
    }
}

Vec3 physical_center(const Volume& v) {
  return voxel_to_world(v, {(v.nx - 1) / 2.0, (v.ny - 1) / 2.0, (v.nz - 1) / 2.0});
}

// Incremental trilinear sampling of `moving` over the voxels of `fixed`
// mapped through map (fixed world -> moving world), feeding a Pearson
// accumulator. Returns the in-bounds voxel count.
struct MetricSums {
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  size_t n = 0;
};

size_t accumulate_overlap(const Volume& moving, const Volume& fixed, const Affine3& map,
                          MetricSums* sums) {
  // moving index = (map(world) - m_origin) / m_spacing, affine in (x,y,z).
  auto col = [&](double wx, double wy, double wz, bool translate) {
    Vec3 w = map.apply({wx, wy, wz});
    if (!translate) {
      Vec3 o = map.apply({0, 0, 0});
      w = w - o;
    }
    return w;
  };
  Vec3 base_w = col(fixed.origin.x, fixed.origin.y, fixed.origin.z, true);
  Vec3 cx = col(fixed.spacing.x, 0, 0, false);
  Vec3 cy = col(0, fixed.spacing.y, 0, false);
  Vec3 cz = col(0, 0, fixed.spacing.z, false);
  auto to_idx = [&moving](const Vec3& w) {
    return Vec3{(w.x - moving.origin.x) / moving.spacing.x,
                (w.y - moving.origin.y) / moving.spacing.y,
                (w.z - moving.origin.z) / moving.spacing.z};
  };
  Vec3 base = to_idx(base_w);
  Vec3 ix = {cx.x / moving.spacing.x, cx.y / moving.spacing.y, cx.z / moving.spacing.z};
  Vec3 iy = {cy.x / moving.spacing.x, cy.y / moving.spacing.y, cy.z / moving.spacing.z};
  Vec3 iz = {cz.x / moving.spacing.x, cz.y / moving.spacing.y, cz.z / moving.spacing.z};

  size_t in_bounds = 0;
  for (int z = 0; z < fixed.nz; ++z) {
    for (int y = 0; y < fixed.ny; ++y) {
      double px = base.x + y * iy.x + z * iz.x;
      double py = base.y + y * iy.y + z * iz.y;
      double pz = base.z + y * iy.z + z * iz.z;
      const float* frow = &fixed.data[fixed.index(0, y, z)];
      for (int x = 0; x < fixed.nx; ++x, px += ix.x, py += ix.y, pz += ix.z) {
        if (px < 0 || py < 0 || pz < 0 || px > moving.nx - 1 || py > moving.ny - 1 ||
            pz > moving.nz - 1)
          continue;
        ++in_bounds;
        if (sums) {
          int x0 = static_cast<int>(px), y0 = static_cast<int>(py),
              z0 = static_cast<int>(pz);
          if (x0 == moving.nx - 1) --x0;
          if (y0 == moving.ny - 1) --y0;
          if (z0 == moving.nz - 1) --z0;
          double tx = px - x0, ty = py - y0, tz = pz - z0;
          const float* d = moving.data.data();
          size_t i000 = moving.index(x0, y0, z0);
          size_t i100 = i000 + 1;
          size_t i010 = i000 + moving.nx;
          size_t i110 = i010 + 1;
          size_t izo = static_cast<size_t>(moving.nx) * moving.ny;
          double c00 = d[i000] * (1 - tx) + d[i100] * tx;
          double c10 = d[i010] * (1 - tx) + d[i110] * tx;
          double c01 = d[i000 + izo] * (1 - tx) + d[i100 + izo] * tx;
          double c11 = d[i010 + izo] * (1 - tx) + d[i110 + izo] * tx;
          double c0 = c00 * (1 - ty) + c10 * ty;
          double c1 = c01 * (1 - ty) + c11 * ty;
          double a = c0 * (1 - tz) + c1 * tz;
          double b = frow[x];
          sums->sa += a;
          sums->sb += b;
          sums->saa += a * a;
          sums->sbb += b * b;
          sums->sab += a * b;
        }
      }
    }
  }
  if (sums) sums->n = in_bounds;
  return in_bounds;
}

constexpr double kMetricInvalid = -std::numeric_limits<double>::infinity();

double metric_value(const Volume& moving, const Volume& fixed, const Affine3& t,
                    RegMetric metric, size_t min_count) {
  Affine3 inv;
  try {
    inv = t.inverse();
  } catch (const Error&) {
    return kMetricInvalid;
  }
  MetricSums s;
  accumulate_overlap(moving, fixed, inv, &s);
  if (s.n < std::max<size_t>(min_count, 16)) return kMetricInvalid;
  double n = static_cast<double>(s.n);
  if (metric == RegMetric::MSE) {
    double mse = (s.saa - 2 * s.sab + s.sbb) / n;
    return -mse;
  }
  double cov = s.sab - s.sa * s.sb / n;
  double va = s.saa - s.sa * s.sa / n;
  double vb = s.sbb - s.sb * s.sb / n;
  if (va <= 0 || vb <= 0) return kMetricInvalid;
  return cov / std::sqrt(va * vb);
}

}  // namespace

Affine3 RegParams::to_affine(const Vec3& center) const {
  double cx = std::cos(rotation[0]), sx = std::sin(rotation[0]);
  double cy = std::cos(rotation[1]), sy = std::sin(rotation[1]);
  double cz = std::cos(rotation[2]), sz = std::sin(rotation[2]);
  double rxm[9] = {1, 0, 0, 0, cx, -sx, 0, sx, cx};
  double rym[9] = {cy, 0, sy, 0, 1, 0, -sy, 0, cy};
  double rzm[9] = {cz, -sz, 0, sz, cz, 0, 0, 0, 1};
  double tmp[9], rot[9];
  mat3_mul(rym, rxm, tmp);
  mat3_mul(rzm, tmp, rot);  // intrinsic z-y-x

  double sc[3] = {std::exp(log_scale[0]), std::exp(log_scale[1]), std::exp(log_scale[2])};
  double sh[9] = {1, shear[0], shear[1], 0, 1, shear[2], 0, 0, 1};
  double ssh[9];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) ssh[i * 3 + j] = sc[i] * sh[i * 3 + j];
  double lin[9];
  mat3_mul(rot, ssh, lin);

  Affine3 a;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a.m[i * 4 + j] = lin[i * 3 + j];
  // translation: t + c - L*c
  double c[3] = {center.x, center.y, center.z};
  for (int i = 0; i < 3; ++i) {
    double lc = lin[i * 3] * c[0] + lin[i * 3 + 1] * c[1] + lin[i * 3 + 2] * c[2];
    a.m[i * 4 + 3] = translation[i] + c[i] - lc;
  }
  return a;
}

double ncc(const Volume& a, const Volume& b, const Volume* mask) {
  if (!a.same_grid(b)) fail(Err::GridMismatch, "ncc: volumes must share one grid");
  if (mask && !mask->same_grid(a)) fail(Err::GridMismatch, "ncc: mask grid differs");
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  size_t n = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (mask && mask->data[i] < 0.5f) continue;
    double x = a.data[i], y = b.data[i];
    sa += x;
    sb += y;
    saa += x * x;
    sbb += y * y;
    sab += x * y;
    ++n;
  }
  if (n < 2) fail(Err::DegenerateVariance, "ncc: fewer than 2 in-mask voxels");
  double nn = static_cast<double>(n);
  double va = saa - sa * sa / nn;
  double vb = sbb - sb * sb / nn;
  if (va <= 0 || vb <= 0) fail(Err::DegenerateVariance, "ncc: zero variance in mask");
  return (sab - sa * sb / nn) / std::sqrt(va * vb);
}

Volume downsample2x(const Volume& vol) {
  int nx = std::max(1, vol.nx / 2), ny = std::max(1, vol.ny / 2), nz = std::max(1, vol.nz / 2);
  Volume out = Volume::create(nx, ny, nz, vol.spacing * 2.0,
                              vol.origin + vol.spacing * 0.5, vol.space);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double acc = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              acc += vol.at(std::min(2 * x + dx, vol.nx - 1),
                            std::min(2 * y + dy, vol.ny - 1),
                            std::min(2 * z + dz, vol.nz - 1));
        out.at(x, y, z) = static_cast<float>(acc / 8.0);
      }
  return out;
}

Affine3 register_affine(const Volume& moving_in, const Volume& fixed,
                        const RegistrationConfig& cfg) {
  moving_in.validate("register_affine moving");
  fixed.validate("register_affine fixed");
  if (cfg.pyramid_levels < 1 || cfg.max_iters < 1 || cfg.convergence_tol <= 0)
    fail(Err::InvalidConfig, "register_affine: bad config");

  // Resolution matching: spline-reconstruct strongly anisotropic moving
  // axes before the metric sees them, so trilinear sampling between thick
  // slices does not bias the optimum.
  Volume moving = moving_in;
  {
    Vec3 target = moving.spacing;
    bool resample = false;
    const double fix_sp[3] = {fixed.spacing.x, fixed.spacing.y, fixed.spacing.z};
    double* tgt[3] = {&target.x, &target.y, &target.z};
    const double mov_sp[3] = {moving.spacing.x, moving.spacing.y, moving.spacing.z};
    for (int i = 0; i < 3; ++i) {
      if (mov_sp[i] > 2.5 * fix_sp[i]) {
        *tgt[i] = std::max(2.0 * fix_sp[i], mov_sp[i] / 4.0);
        resample = true;
      }
    }
    if (resample) moving = resample_volume(moving_in, target, InterpKind::CubicBSpline);
  }

  // Initial overlap check at identity.
  size_t inb = accumulate_overlap(moving, fixed, Affine3::identity(), nullptr);
  if (inb * 10 < fixed.size())
    fail(Err::NoOverlap, "register_affine: initial overlap below 10% of the fixed extent");
  {
    MetricSums s;
    accumulate_overlap(moving, fixed, Affine3::identity(), &s);
    double n = static_cast<double>(s.n);
    if (s.saa - s.sa * s.sa / n <= 0 || s.sbb - s.sb * s.sb / n <= 0)
      fail(Err::DegenerateVariance, "register_affine: constant intensities in overlap");
  }

  // Pyramids, coarsest first.
  std::vector<Volume> mov_pyr{moving}, fix_pyr{fixed};
  for (int l = 1; l < cfg.pyramid_levels; ++l) {
    const Volume& prev = fix_pyr.back();
    if (std::min({prev.nx, prev.ny, prev.nz}) < 8) break;
    fix_pyr.push_back(downsample2x(fix_pyr.back()));
    mov_pyr.push_back(downsample2x(mov_pyr.back()));
  }

  const Vec3 center = physical_center(fixed);
  const double deltas[12] = {
      cfg.step_translation, cfg.step_translation, cfg.step_translation,
      cfg.step_rotation,    cfg.step_rotation,    cfg.step_rotation,
      cfg.step_scale,       cfg.step_scale,       cfg.step_scale,
      cfg.step_shear,       cfg.step_shear,       cfg.step_shear};

  double q[12] = {0};  // scaled parameters, p[i] = q[i] * deltas[i]

  auto to_params = [&](const double qv[12]) {
    RegParams p;
    for (int i = 0; i < 3; ++i) p.translation[i] = qv[i] * deltas[i];
    for (int i = 0; i < 3; ++i) p.rotation[i] = qv[3 + i] * deltas[3 + i];
    for (int i = 0; i < 3; ++i) p.log_scale[i] = qv[6 + i] * deltas[6 + i];
    for (int i = 0; i < 3; ++i) p.shear[i] = qv[9 + i] * deltas[9 + i];
    return p;
  };

  for (int level = static_cast<int>(fix_pyr.size()) - 1; level >= 0; --level) {
    const Volume& mov = mov_pyr[level];
    const Volume& fix = fix_pyr[level];
    size_t min_count = fix.size() / 10;

    auto eval = [&](const double qv[12]) {
      return metric_value(mov, fix, to_params(qv).to_affine(center), cfg.metric, min_count);
    };

    // Two phases per level: translation+rotation first (the scale/shear
    // axes form a shallow valley with rotation that stalls plain gradient
    // ascent), then the full 12-parameter refinement from the rigid
    // optimum.
    auto ascend = [&](int active, int iter_budget) {
      double cur = eval(q);
      if (cur == kMetricInvalid) return;
      double lambda = 1.0;
      for (int iter = 0; iter < iter_budget; ++iter) {
        // Central differences give the gradient and the per-axis second
        // difference in one sweep; the diagonal-Newton direction balances
        // parameter classes whose units have very different leverage.
        double grad[12] = {0}, curv[12] = {0}, trial[12];
        double max_curv = 0;
        for (int i = 0; i < active; ++i) {
          std::copy(q, q + 12, trial);
          trial[i] = q[i] + 1.0;
          double hi = eval(trial);
          trial[i] = q[i] - 1.0;
          double lo = eval(trial);
          if (hi == kMetricInvalid || lo == kMetricInvalid) continue;
          grad[i] = (hi - lo) / 2.0;
          curv[i] = std::abs(hi + lo - 2.0 * cur);
          max_curv = std::max(max_curv, curv[i]);
        }
        double dir[12] = {0};
        double dnorm2 = 0;
        double floor_curv = std::max(max_curv * 1e-3, 1e-300);
        for (int i = 0; i < active; ++i) {
          dir[i] = grad[i] / std::max(curv[i], floor_curv);
          dnorm2 += dir[i] * dir[i];
        }
        if (dnorm2 < 1e-24 || max_curv == 0.0) break;

        auto probe = [&](double lam) {
          for (int i = 0; i < 12; ++i) trial[i] = q[i] + lam * dir[i];
          return eval(trial);
        };

        // Expanding/backtracking line search; only improving steps are
        // accepted, so the metric is non-decreasing.
        double m = probe(lambda);
        if (m > cur) {
          while (lambda < 1024.0) {
            double m2 = probe(lambda * 2);
            if (m2 <= m) break;
            lambda *= 2;
            m = m2;
          }
        } else {
          while (lambda > 1e-3) {
            lambda /= 2;
            m = probe(lambda);
            if (m > cur) break;
          }
        }
        if (m <= cur) break;  // no improving step at the minimum step size
        for (int i = 0; i < 12; ++i) q[i] += lambda * dir[i];
        double gain = m - cur;
        cur = m;
        lambda = std::min(lambda * 2.0, 64.0);
        if (gain < cfg.convergence_tol) break;
      }
    };

    ascend(6, (cfg.max_iters + 1) / 2);
    ascend(12, cfg.max_iters / 2);
  }

  return to_params(q).to_affine(center);
}

Volume apply_transform(const Volume& moving, const Affine3& t, const Volume& ref_grid,
                       InterpKind kind) {
  moving.validate("apply_transform moving");
  Affine3 inv = t.inverse();  // throws SingularTransform

  const Volume* src = &moving;
  Volume coeffs;
  if (kind == InterpKind::CubicBSpline) {
    coeffs = bspline_prefilter(moving);
    src = &coeffs;
  }

  Volume out = Volume::create(ref_grid.nx, ref_grid.ny, ref_grid.nz, ref_grid.spacing,
                              ref_grid.origin, ref_grid.space);
  for (int z = 0; z < out.nz; ++z)
    for (int y = 0; y < out.ny; ++y) {
      float* row = &out.data[out.index(0, y, z)];
      for (int x = 0; x < out.nx; ++x) {
        Vec3 w = voxel_to_world(out, {double(x), double(y), double(z)});
        Vec3 m = inv.apply(w);
        row[x] = sample_at(*src, world_to_voxel(moving, m), kind);
      }
    }
  return out;
}

}  // namespace fuseseg
