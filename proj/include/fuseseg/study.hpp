#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fuseseg/volume.hpp"

namespace fuseseg {

// One line of the cohort manifest; all paths are absolute after load.
struct StudyManifest {
  std::string study_id;
  std::string t2w, adc, dwi, trus;
  std::string gland, lesions;
  std::map<int, int> lesion_gg;  // lesion id -> grade group 1..5
  std::string mri_to_trus;       // transform json path, empty = absent
  std::string split;             // train | val | test
};

struct MultimodalStudy {
  std::string study_id;
  Volume t2w, adc, dwi;  // MRI space, or TRUS space after projection
  Volume trus;
  Volume gland_mask;     // {0,1}, TRUS grid
  Volume lesion_labels;  // integer ids >= 0, TRUS grid
  std::map<int, int> lesion_gg;
  std::optional<Affine3> mri_to_trus;
  std::string split;
};

// Manifest JSON: array of study objects (see README for the schema).
// Relative paths are resolved against the manifest's directory and must
// exist. Errors: MissingFile, SchemaError.
std::vector<StudyManifest> load_manifest(const std::string& path);

// Writes the manifest with paths relative to its directory when possible.
void save_manifest(const std::vector<StudyManifest>& studies, const std::string& path);

// Loads and validates one study. Errors: MissingFile (via nifti_read),
// GridMismatch (mask/labels vs TRUS), SchemaError (lesion id missing from
// lesion_gg). Lesion voxels outside the gland are warned to stderr, not
// rejected.
MultimodalStudy load_study(const StudyManifest& manifest);

}  // namespace fuseseg
