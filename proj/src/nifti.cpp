#include "fuseseg/nifti.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

namespace fuseseg {

namespace {

// NIfTI-1 datatype codes.
constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtInt32 = 8;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;     // 0: must be 348
  char data_type[10];     // 4
  char db_name[18];       // 14
  int32_t extents;        // 32
  int16_t session_error;  // 36
  char regular;           // 38
  char dim_info;          // 39
  int16_t dim[8];         // 40
  float intent_p1;        // 56
  float intent_p2;        // 60
  float intent_p3;        // 64
  int16_t intent_code;    // 68
  int16_t datatype;       // 70
  int16_t bitpix;         // 72
  int16_t slice_start;    // 74
  float pixdim[8];        // 76
  float vox_offset;       // 108
  float scl_slope;        // 112
  float scl_inter;        // 116
  int16_t slice_end;      // 120
  char slice_code;        // 122
  char xyzt_units;        // 123
  float cal_max;          // 124
  float cal_min;          // 128
  float slice_duration;   // 132
  float toffset;          // 136
  int32_t glmax;          // 140
  int32_t glmin;          // 144
  char descrip[80];       // 148
  char aux_file[24];      // 228
  int16_t qform_code;     // 252
  int16_t sform_code;     // 254
  float quatern_b;        // 256
  float quatern_c;        // 260
  float quatern_d;        // 264
  float qoffset_x;        // 268
  float qoffset_y;        // 272
  float qoffset_z;        // 276
  float srow_x[4];        // 280
  float srow_y[4];        // 296
  float srow_z[4];        // 312
  char intent_name[16];   // 328
  char magic[4];          // 344
};
#pragma pack(pop)

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

template <typename T>
void convert_payload(const std::vector<char>& raw, std::vector<float>& out) {
  const T* src = reinterpret_cast<const T*>(raw.data());
  size_t n = raw.size() / sizeof(T);
  out.resize(n);
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(src[i]);
}

}  // namespace

Volume nifti_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::MissingFile, "cannot open: " + path);

  Nifti1Header hdr;
  f.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
  if (f.gcount() != static_cast<std::streamsize>(sizeof(hdr)))
    fail(Err::BadMagic, "file shorter than a NIfTI-1 header: " + path);
  if (std::memcmp(hdr.magic, "n+1\0", 4) != 0 && std::memcmp(hdr.magic, "ni1\0", 4) != 0)
    fail(Err::BadMagic, "bad magic bytes at offset 344: " + path);
  if (hdr.dim[0] != 3)
    fail(Err::UnsupportedDim, "dim[0] = " + std::to_string(hdr.dim[0]) + ", want 3: " + path);

  int nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  if (nx <= 0 || ny <= 0 || nz <= 0) fail(Err::UnsupportedDim, "non-positive dims: " + path);

  size_t elem_size;
  switch (hdr.datatype) {
    case kDtUint8: elem_size = 1; break;
    case kDtInt16: elem_size = 2; break;
    case kDtInt32: elem_size = 4; break;
    case kDtFloat32: elem_size = 4; break;
    case kDtFloat64: elem_size = 8; break;
    default:
      fail(Err::UnsupportedDatatype,
           "datatype code " + std::to_string(hdr.datatype) + ": " + path);
  }

  Volume vol;
  vol.nx = nx;
  vol.ny = ny;
  vol.nz = nz;
  vol.spacing = {std::abs(hdr.pixdim[1]), std::abs(hdr.pixdim[2]), std::abs(hdr.pixdim[3])};

  if (hdr.sform_code > 0) {
    // Only axis-aligned, positively oriented sforms are supported.
    const float* rows[3] = {hdr.srow_x, hdr.srow_y, hdr.srow_z};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        float v = rows[i][j];
        if (i == j ? v <= 0.0f : std::abs(v) > 1e-4f * (1.0f + std::abs(rows[i][i])))
          fail(Err::UnsupportedOrientation, "oblique or flipped sform: " + path);
      }
    vol.origin = {hdr.srow_x[3], hdr.srow_y[3], hdr.srow_z[3]};
  } else if (hdr.qform_code > 0) {
    vol.origin = {hdr.qoffset_x, hdr.qoffset_y, hdr.qoffset_z};
  } else {
    vol.origin = {0, 0, 0};
  }

  size_t count = static_cast<size_t>(nx) * ny * nz;
  long offset = static_cast<long>(hdr.vox_offset);
  if (offset < 348) offset = 352;
  f.seekg(offset, std::ios::beg);
  std::vector<char> raw(count * elem_size);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    fail(Err::IoError, "payload truncated: " + path);

  switch (hdr.datatype) {
    case kDtUint8: convert_payload<uint8_t>(raw, vol.data); break;
    case kDtInt16: convert_payload<int16_t>(raw, vol.data); break;
    case kDtInt32: convert_payload<int32_t>(raw, vol.data); break;
    case kDtFloat32: convert_payload<float>(raw, vol.data); break;
    case kDtFloat64: convert_payload<double>(raw, vol.data); break;
    default: break;
  }

  if (hdr.scl_slope != 0.0f && !(hdr.scl_slope == 1.0f && hdr.scl_inter == 0.0f)) {
    for (float& v : vol.data) v = v * hdr.scl_slope + hdr.scl_inter;
  }

  vol.validate("nifti_read(" + path + ")");
  return vol;
}

void nifti_write(const Volume& vol, const std::string& path) {
  vol.validate("nifti_write");

  Nifti1Header hdr;
  std::memset(&hdr, 0, sizeof(hdr));
  hdr.sizeof_hdr = 348;
  hdr.regular = 'r';
  hdr.dim[0] = 3;
  hdr.dim[1] = static_cast<int16_t>(vol.nx);
  hdr.dim[2] = static_cast<int16_t>(vol.ny);
  hdr.dim[3] = static_cast<int16_t>(vol.nz);
  for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
  hdr.datatype = kDtFloat32;
  hdr.bitpix = 32;
  hdr.pixdim[0] = 1.0f;
  hdr.pixdim[1] = static_cast<float>(vol.spacing.x);
  hdr.pixdim[2] = static_cast<float>(vol.spacing.y);
  hdr.pixdim[3] = static_cast<float>(vol.spacing.z);
  hdr.vox_offset = 352.0f;
  hdr.scl_slope = 1.0f;
  hdr.scl_inter = 0.0f;
  hdr.xyzt_units = 2;  // NIFTI_UNITS_MM
  hdr.sform_code = 1;
  hdr.qform_code = 0;
  hdr.srow_x[0] = static_cast<float>(vol.spacing.x);
  hdr.srow_x[3] = static_cast<float>(vol.origin.x);
  hdr.srow_y[1] = static_cast<float>(vol.spacing.y);
  hdr.srow_y[3] = static_cast<float>(vol.origin.y);
  hdr.srow_z[2] = static_cast<float>(vol.spacing.z);
  hdr.srow_z[3] = static_cast<float>(vol.origin.z);
  std::memcpy(hdr.magic, "n+1\0", 4);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Err::IoError, "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
  const char pad[4] = {0, 0, 0, 0};  // header extension flag, all zero
  f.write(pad, 4);
  f.write(reinterpret_cast<const char*>(vol.data.data()),
          static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
  if (!f) fail(Err::IoError, "write failed: " + path);
}

}  // namespace fuseseg
