#pragma once

#include "fuseseg/volume.hpp"

namespace fuseseg {

enum class InterpKind { Nearest, Trilinear, CubicBSpline };

struct PreprocessConfig {
  Vec3 mri_spacing{0.5, 0.5, 3.0};
  Vec3 trus_spacing{0.5, 0.5, 0.5};
  double crop_extent_mm[2] = {128.0, 128.0};  // x, y
  float pad_value = 0.0f;
};

// Solves the cubic B-spline interpolation system so that sampling the
// spline at integer grid points reproduces the input samples. Boundary
// handling is clamp-to-edge, consistent with sample_at. Errors:
// DegenerateAxis (any axis shorter than 2).
Volume bspline_prefilter(const Volume& vol);

// Samples at a continuous voxel index. Nearest rounds half away from zero;
// Trilinear is the 8-corner weighted sum; CubicBSpline is the 64-tap cubic
// kernel over prefiltered coefficients. Out-of-grid indices clamp to the
// edge.
float sample_at(const Volume& vol, const Vec3& idx, InterpKind kind);

// Resamples onto a grid with the given spacing; output dims are
// ceil(extent_mm / target), origin preserved, each output voxel sampled at
// its physical center.
Volume resample_volume(const Volume& vol, const Vec3& target_spacing, InterpKind kind);

// Center crop / symmetric pad of the x-y plane to a physical extent; the
// z axis is untouched. Odd size differences put the extra voxel on the
// high side. Origin shifts so retained voxels keep their physical position.
Volume center_crop_pad(const Volume& vol, double extent_x_mm, double extent_y_mm,
                       float pad_value = 0.0f);

// (v - mean) / std over gland voxels, applied to all voxels; population
// standard deviation, 64-bit accumulation. Errors: EmptyGland (< 2 gland
// voxels), DegenerateStd (gland std <= 1e-6), GridMismatch.
Volume zscore_normalize(const Volume& vol, const Volume& gland_mask);

}  // namespace fuseseg
