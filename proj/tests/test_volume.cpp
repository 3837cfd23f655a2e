#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "fuseseg/nifti.hpp"
#include "fuseseg/rng.hpp"
#include "fuseseg/study.hpp"
#include "fuseseg/volume.hpp"

using namespace fuseseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "fuseseg_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Volume small_volume(int nx = 4, int ny = 3, int nz = 2) {
  Volume v = Volume::create(nx, ny, nz, {0.5, 0.5, 0.5});
  for (size_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<float>(i) * 0.25f - 1.5f;
  return v;
}

}  // namespace

TEST_CASE("world/voxel mapping") {
  Volume v = Volume::create(8, 8, 8, {0.5, 0.5, 0.5});
  Vec3 idx = world_to_voxel(v, {1, 1, 1});
  CHECK(idx.x == doctest::Approx(2.0));
  CHECK(idx.y == doctest::Approx(2.0));
  CHECK(idx.z == doctest::Approx(2.0));

  Vec3 at_origin = world_to_voxel(v, v.origin);
  CHECK(at_origin.x == doctest::Approx(0.0));
  CHECK(at_origin.y == doctest::Approx(0.0));
  CHECK(at_origin.z == doctest::Approx(0.0));

  Volume w = Volume::create(4, 4, 4, {2, 1, 1}, {10, 0, 0});
  Vec3 neg = world_to_voxel(w, {9, 0, 0});
  CHECK(neg.x == doctest::Approx(-0.5));
  CHECK(neg.y == doctest::Approx(0.0));

  Volume u = Volume::create(4, 4, 4, {0.5, 0.5, 3.0});
  Vec3 p = voxel_to_world(u, {2, 2, 1});
  CHECK(p.x == doctest::Approx(1.0));
  CHECK(p.y == doctest::Approx(1.0));
  CHECK(p.z == doctest::Approx(3.0));
  CHECK(voxel_to_world(u, {0, 0, 0}).x == doctest::Approx(u.origin.x));
}

TEST_CASE("world/voxel roundtrip on random points") {
  Volume v = Volume::create(16, 16, 16, {0.7, 1.3, 2.9}, {-12.5, 3.25, 40});
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    Vec3 p{rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)};
    Vec3 back = voxel_to_world(v, world_to_voxel(v, p));
    CHECK(std::abs(back.x - p.x) < 1e-9);
    CHECK(std::abs(back.y - p.y) < 1e-9);
    CHECK(std::abs(back.z - p.z) < 1e-9);
  }
}

TEST_CASE("affine compose/invert properties") {
  Rng rng(5);
  auto random_affine = [&rng]() {
    Affine3 a;
    for (int i = 0; i < 12; ++i) a.m[static_cast<size_t>(i)] = rng.uniform(-0.3, 0.3);
    a.m[0] += 1.0;
    a.m[5] += 1.0;
    a.m[10] += 1.0;
    return a;
  };
  for (int rep = 0; rep < 20; ++rep) {
    Affine3 a = random_affine(), b = random_affine(), c = random_affine();
    Affine3 ab_c = a.compose(b).compose(c);
    Affine3 a_bc = a.compose(b.compose(c));
    CHECK(ab_c.near(a_bc, 1e-9));
    CHECK(a.compose(a.inverse()).near(Affine3::identity(), 1e-9));
    CHECK(a.inverse().inverse().near(a, 1e-9));
  }
}

TEST_CASE("affine json roundtrip") {
  auto dir = temp_dir("affine");
  Affine3 a;
  for (int i = 0; i < 12; ++i) a.m[static_cast<size_t>(i)] = 0.1234567890123 * (i + 1);
  std::string path = (dir / "t.json").string();
  a.save_json(path);
  Affine3 b = Affine3::load_json(path);
  for (int i = 0; i < 12; ++i) CHECK(a.m[static_cast<size_t>(i)] == b.m[static_cast<size_t>(i)]);
}

TEST_CASE("nifti write/read roundtrip is bit exact") {
  auto dir = temp_dir("nifti_rt");
  Volume v = small_volume();
  v.data[5] = -0.333333f;
  v.data[7] = 1e-20f;
  v.origin = {1.5, -2.25, 3.0};
  std::string path = (dir / "v.nii").string();
  nifti_write(v, path);

  CHECK(fs::file_size(path) == 352 + v.size() * 4);

  Volume r = nifti_read(path);
  CHECK(r.nx == v.nx);
  CHECK(r.ny == v.ny);
  CHECK(r.nz == v.nz);
  CHECK(r.spacing.x == doctest::Approx(0.5));
  CHECK(r.spacing.z == doctest::Approx(0.5));
  CHECK(r.origin.y == doctest::Approx(-2.25));
  REQUIRE(r.data.size() == v.data.size());
  CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * 4) == 0);
}

TEST_CASE("nifti 2x2x2 file size is 384 bytes") {
  auto dir = temp_dir("nifti_sz");
  Volume v = Volume::create(2, 2, 2, {1, 1, 1});
  std::string path = (dir / "z.nii").string();
  nifti_write(v, path);
  CHECK(fs::file_size(path) == 384);
}

TEST_CASE("nifti header parsed against a hand-built reference file") {
  // Header assembled from the raw field offsets, independent of nifti_write:
  // int16 payload with scl_slope 2 / scl_inter 1, pixdim (1, 0.5, 0.5, 3.0).
  auto dir = temp_dir("nifti_ref");
  std::vector<char> bytes(352 + 12 * 2, 0);
  auto put_i32 = [&](size_t off, int32_t v) { std::memcpy(&bytes[off], &v, 4); };
  auto put_i16 = [&](size_t off, int16_t v) { std::memcpy(&bytes[off], &v, 2); };
  auto put_f32 = [&](size_t off, float v) { std::memcpy(&bytes[off], &v, 4); };
  put_i32(0, 348);
  put_i16(40, 3);   // dim[0]
  put_i16(42, 3);   // nx
  put_i16(44, 2);   // ny
  put_i16(46, 2);   // nz
  put_i16(70, 4);   // datatype int16
  put_i16(72, 16);  // bitpix
  put_f32(76, 1.0f);
  put_f32(80, 0.5f);
  put_f32(84, 0.5f);
  put_f32(88, 3.0f);
  put_f32(108, 352.0f);  // vox_offset
  put_f32(112, 2.0f);    // scl_slope
  put_f32(116, 1.0f);    // scl_inter
  std::memcpy(&bytes[344], "n+1\0", 4);
  for (int16_t i = 0; i < 12; ++i) std::memcpy(&bytes[352 + i * 2], &i, 2);

  std::string path = (dir / "ref.nii").string();
  std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<long>(bytes.size()));

  Volume v = nifti_read(path);
  CHECK(v.nx == 3);
  CHECK(v.ny == 2);
  CHECK(v.nz == 2);
  CHECK(v.spacing.x == doctest::Approx(0.5));
  CHECK(v.spacing.y == doctest::Approx(0.5));
  CHECK(v.spacing.z == doctest::Approx(3.0));
  for (int i = 0; i < 12; ++i)
    CHECK(v.data[static_cast<size_t>(i)] == doctest::Approx(2.0 * i + 1.0));
}

TEST_CASE("nifti malformed inputs") {
  auto dir = temp_dir("nifti_bad");
  std::string trunc = (dir / "t.nii").string();
  {
    std::ofstream f(trunc, std::ios::binary);
    std::vector<char> junk(100, 7);
    f.write(junk.data(), 100);
  }
  CHECK_THROWS_AS(nifti_read(trunc), Error);

  Volume v = Volume::create(2, 2, 2, {1, 1, 1});
  std::string path = (dir / "m.nii").string();
  nifti_write(v, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(344);
    f.write("xxxx", 4);
  }
  try {
    nifti_read(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::BadMagic);
  }
}

TEST_CASE("nifti rejects unsupported datatype and dim") {
  auto dir = temp_dir("nifti_unsup");
  Volume v = Volume::create(2, 2, 2, {1, 1, 1});
  std::string path = (dir / "u.nii").string();

  nifti_write(v, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(70);
    int16_t dt = 128;  // RGB, unsupported
    f.write(reinterpret_cast<char*>(&dt), 2);
  }
  try {
    nifti_read(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::UnsupportedDatatype);
  }

  nifti_write(v, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    int16_t d0 = 4;
    f.write(reinterpret_cast<char*>(&d0), 2);
  }
  try {
    nifti_read(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::UnsupportedDim);
  }
}

namespace {

StudyManifest write_tiny_study(const fs::path& dir, const std::string& id) {
  fs::create_directories(dir / id);
  Volume trus = Volume::create(6, 6, 4, {0.5, 0.5, 0.5});
  Volume mri = Volume::create(5, 5, 3, {0.5, 0.5, 3.0});
  Volume gland = trus;
  Volume labels = trus;
  for (int z = 1; z < 3; ++z)
    for (int y = 1; y < 5; ++y)
      for (int x = 1; x < 5; ++x) gland.at(x, y, z) = 1.0f;
  labels.at(2, 2, 1) = 1.0f;
  labels.at(3, 2, 1) = 1.0f;

  StudyManifest m;
  m.study_id = id;
  auto put = [&dir, &id](const Volume& v, const char* name) {
    std::string p = (dir / id / name).string();
    nifti_write(v, p);
    return p;
  };
  m.t2w = put(mri, "t2w.nii");
  m.adc = put(mri, "adc.nii");
  m.dwi = put(mri, "dwi.nii");
  m.trus = put(trus, "trus.nii");
  m.gland = put(gland, "gland.nii");
  m.lesions = put(labels, "lesions.nii");
  m.lesion_gg = {{1, 2}};
  m.split = "train";
  return m;
}

}  // namespace

TEST_CASE("manifest save/load roundtrip with splits") {
  auto dir = temp_dir("manifest");
  std::vector<StudyManifest> studies;
  const char* splits[4] = {"train", "train", "val", "test"};
  for (int i = 0; i < 4; ++i) {
    auto m = write_tiny_study(dir, "s" + std::to_string(i));
    m.split = splits[i];
    studies.push_back(m);
  }
  std::string path = (dir / "manifest.json").string();
  save_manifest(studies, path);
  auto loaded = load_manifest(path);
  REQUIRE(loaded.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(loaded[static_cast<size_t>(i)].study_id == studies[static_cast<size_t>(i)].study_id);
    CHECK(loaded[static_cast<size_t>(i)].split == splits[i]);
    CHECK(loaded[static_cast<size_t>(i)].lesion_gg.at(1) == 2);
  }
  MultimodalStudy s = load_study(loaded[0]);
  CHECK(s.trus.nx == 6);
  CHECK(s.t2w.nx == 5);
}

TEST_CASE("manifest errors") {
  auto dir = temp_dir("manifest_err");
  auto m = write_tiny_study(dir, "s0");

  SUBCASE("missing gland file") {
    fs::remove(m.gland);
    std::string path = (dir / "manifest.json").string();
    save_manifest({m}, path);
    try {
      load_manifest(path);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::MissingFile);
      CHECK(std::string(e.what()).find("gland") != std::string::npos);
    }
  }

  SUBCASE("lesion id missing from lesion_gg") {
    Volume labels = nifti_read(m.lesions);
    labels.at(4, 4, 2) = 3.0f;  // id 3 has no gg entry
    nifti_write(labels, m.lesions);
    try {
      load_study(m);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::SchemaError);
      CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
  }

  SUBCASE("mask grid mismatch") {
    Volume bad = Volume::create(5, 6, 4, {0.5, 0.5, 0.5});
    nifti_write(bad, m.gland);
    try {
      load_study(m);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::GridMismatch);
    }
  }

  SUBCASE("unknown manifest key rejected") {
    std::string path = (dir / "manifest.json").string();
    save_manifest({m}, path);
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    text.insert(text.find("\"study_id\""), "\"unexpected\": 1, ");
    std::ofstream(path) << text;
    try {
      load_manifest(path);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::SchemaError);
    }
  }
}
