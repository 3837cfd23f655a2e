#pragma once

#include <string>

#include "fuseseg/volume.hpp"

namespace fuseseg {

// Uncompressed little-endian NIfTI-1 only. Reading supports uint8, int16,
// int32, float32 and float64 payloads (converted to float32, with
// scl_slope/scl_inter applied when scl_slope != 0); dim[0] must be 3.
// Oblique sforms are rejected with UnsupportedOrientation — this toolkit
// models axis-aligned grids only.
Volume nifti_read(const std::string& path);

// Writes a 348-byte header (+4 pad) and a float32 payload at vox_offset 352,
// sform_code 1 with srow rows diag(spacing) | origin. nifti_read of the
// result is a lossless roundtrip.
void nifti_write(const Volume& vol, const std::string& path);

}  // namespace fuseseg
