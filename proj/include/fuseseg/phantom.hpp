#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fuseseg/study.hpp"

namespace fuseseg {

enum class LesionVisibility { MriOnly, TrusOnly, Both };

struct PhantomLesion {
  int id = 0;
  Vec3 center_mm;   // TRUS space
  Vec3 semiaxes_mm;
  LesionVisibility visibility = LesionVisibility::Both;
  int gg = 1;
  double analytic_volume_mm3() const;
};

struct PhantomConfig {
  uint64_t seed = 7;
  int n_studies = 40;
  int n_train = 24, n_val = 4, n_test = 12;

  int trus_dims[3] = {96, 96, 48};  // nx, ny, nz
  Vec3 trus_spacing{0.5, 0.5, 0.5};
  Vec3 mri_spacing{0.5, 0.5, 3.0};

  double gland_semiaxes_min[3] = {14.0, 12.0, 8.0};  // mm, x/y/z
  double gland_semiaxes_max[3] = {18.0, 16.0, 11.0};
  double gland_wobble = 0.05;  // relative boundary perturbation

  int lesions_min = 0, lesions_max = 3;
  double lesion_radius_min_mm = 3.0, lesion_radius_max_mm = 8.0;

  // Visibility mix; must sum to 1.
  double vis_mri_only = 0.3, vis_trus_only = 0.3, vis_both = 0.4;

  // Lesion contrast added to the gland-relative intensity of each channel
  // when the lesion is visible there (ADC/T2w hypointense, DWI
  // hyperintense, TRUS hypoechoic).
  double contrast_t2w = -0.55, contrast_adc = -0.65, contrast_dwi = 0.65,
         contrast_trus = -0.60;
  // Small lesions get proportionally weaker contrast (partial-volume-like),
  // ramping linearly from contrast_floor at the minimum radius to 1 at
  // contrast_full_radius_mm.
  double contrast_floor = 0.65;
  double contrast_full_radius_mm = 6.0;

  double noise_sd = 0.05;    // additive, MRI-like channels
  double speckle_sd = 0.05;  // multiplicative, TRUS channel

  double max_rotation_deg = 6.0;  // hidden MRI->TRUS transform ranges
  double max_translation_mm = 4.0;

  void validate() const;
};

struct PhantomStudy {
  MultimodalStudy study;  // t2w/adc/dwi on the MRI grid, mri_to_trus unset
  Affine3 gt_mri_to_trus;
  std::vector<PhantomLesion> lesions;
};

// Deterministic synthetic cohort; study i is generated from substream
// (seed, i), so per-study generation order cannot change the output.
std::vector<PhantomStudy> generate_cohort(const PhantomConfig& cfg);
PhantomStudy generate_study(const PhantomConfig& cfg, int index);

// The exact transform used during synthesis.
Affine3 ground_truth_transform(const PhantomStudy& s);

// Writes NIfTI volumes, per-study ground-truth transform JSONs
// (gt_transform.json) and a manifest.json into dir.
void write_cohort(const std::vector<PhantomStudy>& cohort, const std::string& dir);

// Loads the ground-truth transform emitted by write_cohort; errors with
// NotAPhantom when the study directory has none.
Affine3 load_ground_truth_transform(const std::string& dir, const std::string& study_id);

}  // namespace fuseseg
