#pragma once

#include "fuseseg/preprocess.hpp"
#include "fuseseg/volume.hpp"

namespace fuseseg {

enum class RegMetric { NCC, MSE };

struct RegistrationConfig {
  int pyramid_levels = 3;  // downsample factor 2 per level
  RegMetric metric = RegMetric::NCC;
  int max_iters = 200;  // per level
  // Finite-difference deltas, one per parameter class; also the natural
  // step unit of the scaled gradient ascent.
  double step_rotation = 1e-3;     // rad
  double step_translation = 1e-1;  // mm
  double step_scale = 1e-3;        // log-scale
  double step_shear = 1e-3;
  double convergence_tol = 1e-6;  // on metric change
};

// Affine parameterization used by the optimizer: translation (mm),
// intrinsic z-y-x Euler angles (rad), log-scales, shears. The transform
// acts about `center`: p' = R*S*H*(p - center) + center + t.
struct RegParams {
  double translation[3] = {0, 0, 0};
  double rotation[3] = {0, 0, 0};  // rx, ry, rz
  double log_scale[3] = {0, 0, 0};
  double shear[3] = {0, 0, 0};  // hxy, hxz, hyz

  Affine3 to_affine(const Vec3& center) const;
};

// Pearson correlation of in-mask voxel pairs (mask == nullptr means all
// voxels). Errors: GridMismatch, DegenerateVariance (fewer than 2 in-mask
// voxels or zero variance on either side).
double ncc(const Volume& a, const Volume& b, const Volume* mask = nullptr);

// Coarse-to-fine maximization of the similarity of moving resampled
// through T against fixed; gradients by central differences on the 12
// parameters, monotone line-search acceptance. Deterministic for fixed
// inputs and config. Errors: NoOverlap, DegenerateVariance.
Affine3 register_affine(const Volume& moving, const Volume& fixed,
                        const RegistrationConfig& cfg = {});

// Resamples moving onto ref_grid's grid: each output voxel center is
// mapped through invert(t) and sampled from moving with `kind`
// (clamp-to-edge). Errors: SingularTransform.
Volume apply_transform(const Volume& moving, const Affine3& t, const Volume& ref_grid,
                       InterpKind kind);

// Mean-pool 2x downsample used by the registration pyramid (exposed for
// tests).
Volume downsample2x(const Volume& vol);

}  // namespace fuseseg
