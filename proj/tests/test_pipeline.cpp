#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fuseseg/phantom.hpp"
#include "fuseseg/pipeline.hpp"
#include "fuseseg/registration.hpp"

using namespace fuseseg;

namespace {

// Tiny fully TRUS-space study with one CsPCa lesion voxel.
MultimodalStudy tiny_study(int nx = 24, int ny = 20, int nz = 12) {
  MultimodalStudy s;
  s.study_id = "tiny";
  s.split = "train";
  Volume grid = Volume::create(nx, ny, nz, {0.5, 0.5, 0.5}, {}, SpaceTag::TRUS);
  Rng rng(5);
  auto noisy = [&rng, &grid]() {
    Volume v = grid;
    for (auto& x : v.data) x = static_cast<float>(rng.normal());
    return v;
  };
  s.trus = noisy();
  s.t2w = noisy();
  s.adc = noisy();
  s.dwi = noisy();
  s.gland_mask = grid;
  s.lesion_labels = grid;
  for (int z = 2; z < nz - 2; ++z)
    for (int y = 2; y < ny - 2; ++y)
      for (int x = 2; x < nx - 2; ++x) s.gland_mask.at(x, y, z) = 1.0f;
  s.lesion_labels.at(nx / 2, ny / 2, nz / 2) = 1.0f;
  s.lesion_gg = {{1, 3}};
  return s;
}

}  // namespace

TEST_CASE("assemble_input channel counts and order") {
  MultimodalStudy s = tiny_study();
  CHECK(assemble_input(s, Setup::TrusOnly).size() == 1);
  CHECK(assemble_input(s, Setup::MriOnly).size() == 3);
  auto mm = assemble_input(s, Setup::Multimodal);
  REQUIRE(mm.size() == 4);
  CHECK(std::memcmp(mm[0].data.data(), s.trus.data.data(), s.trus.data.size() * 4) == 0);
  CHECK(std::memcmp(mm[1].data.data(), s.t2w.data.data(), s.t2w.data.size() * 4) == 0);

  SUBCASE("grid mismatch rejected") {
    MultimodalStudy bad = s;
    bad.t2w = Volume::create(10, 10, 10, {1, 1, 1});
    CHECK_THROWS_AS(assemble_input(bad, Setup::Multimodal), Error);
  }
}

TEST_CASE("prepare_study builds the three nested targets") {
  MultimodalStudy s = tiny_study();
  s.lesion_labels.at(4, 4, 4) = 2.0f;  // GG 1 lesion: any-cancer but not CsPCa
  s.lesion_gg[2] = 1;
  PreparedStudy ps = prepare_study(s, Setup::Multimodal);
  CHECK(ps.fg_gland.size() > ps.fg_any.size());
  CHECK(ps.fg_any.size() == 2);
  CHECK(ps.fg_cspca.size() == 1);
  size_t cspca_idx = static_cast<size_t>(ps.fg_cspca[0]);
  CHECK(ps.targets[0].data[cspca_idx] == 1.0f);
  CHECK(ps.targets[1].data[cspca_idx] == 1.0f);
  CHECK(ps.targets[2].data[cspca_idx] == 1.0f);
}

TEST_CASE("sample_patches honors fg_oversample = 1 with a single-voxel lesion") {
  MultimodalStudy s = tiny_study();
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);
  TrainConfig cfg;
  cfg.setup = Setup::TrusOnly;
  cfg.patch[0] = 8;
  cfg.patch[1] = 8;
  cfg.patch[2] = 8;
  cfg.batch_size = 2;
  cfg.fg_oversample = 1.0;
  Rng rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    PatchBatch b = sample_patches(ps, cfg, rng);
    for (int i = 0; i < cfg.batch_size; ++i) {
      double sum = 0;
      for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) sum += b.targets[2].at(i, 0, z, y, x);
      CHECK(sum >= 1.0);  // the lesion voxel is inside every patch
    }
  }
}

TEST_CASE("sample_patches centers are uniform when fg_oversample = 0") {
  MultimodalStudy s = tiny_study(16, 16, 16);
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);
  TrainConfig cfg;
  cfg.setup = Setup::TrusOnly;
  cfg.patch[0] = 8;
  cfg.patch[1] = 8;
  cfg.patch[2] = 8;
  cfg.batch_size = 10;
  cfg.fg_oversample = 0.0;
  Rng rng(42);
  int counts[8] = {0};
  int total = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    PatchBatch b = sample_patches(ps, cfg, rng);
    for (const auto& c : b.centers) {
      int octant = (c[0] >= 8 ? 1 : 0) | (c[1] >= 8 ? 2 : 0) | (c[2] >= 8 ? 4 : 0);
      ++counts[octant];
      ++total;
    }
  }
  REQUIRE(total == 10000);
  double expected = total / 8.0;
  double chi2 = 0;
  for (int i = 0; i < 8; ++i)
    chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
  CHECK(chi2 < 24.322);  // chi-square critical value, df = 7, alpha = 0.001
}

TEST_CASE("sample_patches pads volumes smaller than the patch") {
  MultimodalStudy s = tiny_study(6, 6, 4);
  PreparedStudy ps = prepare_study(s, Setup::Multimodal);
  TrainConfig cfg;
  cfg.patch[0] = 8;
  cfg.patch[1] = 16;
  cfg.patch[2] = 16;
  cfg.batch_size = 3;
  Rng rng(3);
  PatchBatch b = sample_patches(ps, cfg, rng);
  CHECK(b.input.shape == nn::Shape5{3, 4, 8, 16, 16});
  for (float v : b.input.data) CHECK(std::isfinite(v));
  // Out-of-volume voxels are zero-padded: column x=10 lies outside nx=6.
  CHECK(b.input.at(0, 0, 0, 0, 10) == 0.0f);
}

TEST_CASE("flip_sample is an involution and mirrors corners") {
  nn::Tensor5 t = nn::Tensor5::zeros({2, 3, 4, 6, 8});
  Rng rng(9);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1, 1));
  nn::Tensor5 orig = t;
  for (int axis = 0; axis < 3; ++axis) {
    flip_sample(t, 1, axis);
    flip_sample(t, 1, axis);
    CHECK(std::memcmp(t.data.data(), orig.data.data(), t.data.size() * 4) == 0);
  }

  nn::Tensor5 marked = nn::Tensor5::zeros({1, 1, 4, 4, 4});
  marked.at(0, 0, 0, 0, 0) = 1.0f;
  flip_sample(marked, 0, 2);  // flip x
  CHECK(marked.at(0, 0, 0, 0, 3) == 1.0f);
  flip_sample(marked, 0, 1);  // flip y
  CHECK(marked.at(0, 0, 0, 3, 3) == 1.0f);
  flip_sample(marked, 0, 0);  // flip z
  CHECK(marked.at(0, 0, 3, 3, 3) == 1.0f);
}

TEST_CASE("augment_flip applies the same flip to inputs and targets") {
  MultimodalStudy s = tiny_study();
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);
  TrainConfig cfg;
  cfg.setup = Setup::TrusOnly;
  cfg.patch[0] = 8;
  cfg.patch[1] = 8;
  cfg.patch[2] = 8;
  cfg.batch_size = 4;
  cfg.fg_oversample = 1.0;
  Rng rng(12);
  PatchBatch b = sample_patches(ps, cfg, rng);
  PatchBatch before = b;

  SUBCASE("disabled axes leave the batch unchanged") {
    Rng flip_rng(1);
    augment_flip(b, false, false, false, flip_rng);
    CHECK(std::memcmp(b.input.data.data(), before.input.data.data(),
                      b.input.data.size() * 4) == 0);
  }

  SUBCASE("x flips move input and target consistently") {
    Rng flip_rng(2);
    augment_flip(b, true, false, false, flip_rng);
    for (int i = 0; i < cfg.batch_size; ++i) {
      // Whether flipped or not, the target mass is preserved.
      double sum_before = 0, sum_after = 0;
      for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            sum_before += before.targets[2].at(i, 0, z, y, x);
            sum_after += b.targets[2].at(i, 0, z, y, x);
          }
      CHECK(sum_before == doctest::Approx(sum_after));
      // If the input was flipped, the target was flipped the same way.
      bool input_flipped = std::memcmp(&b.input.at(i, 0, 0, 0, 0),
                                       &before.input.at(i, 0, 0, 0, 0), 8 * sizeof(float)) != 0;
      nn::Tensor5 tcopy = before.targets[2];
      if (input_flipped) flip_sample(tcopy, i, 2);
      for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            CHECK(b.targets[2].at(i, 0, z, y, x) == tcopy.at(i, 0, z, y, x));
    }
  }
}

TEST_CASE("train is deterministic and rejects mismatched setups") {
  MultimodalStudy s = tiny_study(16, 16, 8);
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);

  UNetConfig ucfg;
  ucfg.in_channels = 1;
  ucfg.stages = 2;
  ucfg.base_channels = 4;

  TrainConfig tcfg;
  tcfg.setup = Setup::TrusOnly;
  tcfg.patch[0] = 8;
  tcfg.patch[1] = 8;
  tcfg.patch[2] = 8;
  tcfg.batch_size = 2;
  tcfg.epochs = 1;
  tcfg.steps_per_epoch = 6;
  tcfg.seed = 99;

  UNetModel m1 = build_unet(ucfg, tcfg.seed);
  UNetModel m2 = build_unet(ucfg, tcfg.seed);
  TrainResult r1 = train({ps}, m1, tcfg);
  TrainResult r2 = train({ps}, m2, tcfg);
  REQUIRE(r1.history.size() == 6);
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(std::isfinite(r1.history[i].total));
    CHECK(r1.history[i].total == r2.history[i].total);
  }
  for (size_t p = 0; p < m1.params.size(); ++p)
    CHECK(std::memcmp(m1.params[p].value.data.data(), m2.params[p].value.data.data(),
                      m1.params[p].value.data.size() * 4) == 0);

  SUBCASE("loss decreases while overfitting a single study") {
    TrainConfig longer = tcfg;
    longer.epochs = 4;
    longer.steps_per_epoch = 15;
    UNetModel m3 = build_unet(ucfg, 7);
    TrainResult r3 = train({ps}, m3, longer);
    auto median_of = [&](size_t lo, size_t hi) {
      std::vector<double> v;
      for (size_t i = lo; i < hi; ++i) v.push_back(r3.history[i].total);
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    size_t n = r3.history.size();
    CHECK(median_of(n - n / 10 - 1, n) < median_of(0, n / 10 + 1));
  }

  SUBCASE("wrong in_channels model is rejected") {
    UNetConfig bad = ucfg;
    bad.in_channels = 4;
    UNetModel mb = build_unet(bad, 1);
    CHECK_THROWS_AS(train({ps}, mb, tcfg), Error);
  }
}

TEST_CASE("sliding window: single tile equals a direct forward pass") {
  MultimodalStudy s = tiny_study(16, 16, 8);
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);
  UNetConfig ucfg;
  ucfg.in_channels = 1;
  ucfg.stages = 2;
  ucfg.base_channels = 4;
  UNetModel m = build_unet(ucfg, 21);

  InferenceConfig icfg;
  icfg.patch[0] = 8;
  icfg.patch[1] = 16;
  icfg.patch[2] = 16;
  auto probs = sliding_window_infer(m, ps.channels, icfg);

  nn::Tensor5 input = nn::Tensor5::zeros({1, 1, 8, 16, 16});
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) input.at(0, 0, z, y, x) = s.trus.at(x, y, z);
  nn::Tape tape;
  auto fw = m.forward(tape, input, false);
  for (int h = 0; h < 3; ++h)
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          CHECK(std::abs(probs[static_cast<size_t>(h)].at(x, y, z) -
                         fw.heads[static_cast<size_t>(h)]->value.at(0, 0, z, y, x)) < 1e-6);
}

TEST_CASE("sliding window: zero-head model blends to a constant 0.5") {
  MultimodalStudy s = tiny_study(24, 20, 12);
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);
  UNetConfig ucfg;
  ucfg.in_channels = 1;
  ucfg.stages = 2;
  ucfg.base_channels = 4;
  UNetModel m = build_unet(ucfg, 22);
  for (auto& p : m.params)
    if (p.name.rfind("head_", 0) == 0)
      std::fill(p.value.data.begin(), p.value.data.end(), 0.0f);

  InferenceConfig icfg;
  icfg.patch[0] = 8;
  icfg.patch[1] = 16;
  icfg.patch[2] = 16;
  icfg.overlap = 0.5;
  auto probs = sliding_window_infer(m, ps.channels, icfg);
  for (const auto& v : probs)
    for (float x : v.data) CHECK(x == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("sliding window: two-tile blend matches the hand-computed gaussian mix") {
  // Volume one patch wide in y beyond the patch: exactly two tiles in y.
  MultimodalStudy s = tiny_study(16, 24, 8);
  PreparedStudy ps = prepare_study(s, Setup::TrusOnly);
  UNetConfig ucfg;
  ucfg.in_channels = 1;
  ucfg.stages = 2;
  ucfg.base_channels = 4;
  UNetModel m = build_unet(ucfg, 23);

  InferenceConfig icfg;
  icfg.patch[0] = 8;
  icfg.patch[1] = 16;
  icfg.patch[2] = 16;
  icfg.overlap = 0.5;
  auto probs = sliding_window_infer(m, ps.channels, icfg);

  // Tiles start at y = 0 and y = 8. Recompute both tile outputs directly.
  auto run_tile = [&](int ty) {
    nn::Tensor5 input = nn::Tensor5::zeros({1, 1, 8, 16, 16});
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) input.at(0, 0, z, y, x) = s.trus.at(x, ty + y, z);
    nn::Tape tape;
    auto fw = m.forward(tape, input, false);
    return fw.heads[2]->value;
  };
  nn::Tensor5 tile0 = run_tile(0), tile1 = run_tile(8);

  // Independent gaussian weight recomputation at a probed voxel.
  auto weight = [&](int z, int y, int x) {
    double cz = (8 - 1) / 2.0, cy = (16 - 1) / 2.0, cx = (16 - 1) / 2.0;
    double sz = 8 / 8.0, sy = 16 / 8.0, sx = 16 / 8.0;
    return std::exp(-((z - cz) * (z - cz) / (2 * sz * sz) +
                      (y - cy) * (y - cy) / (2 * sy * sy) +
                      (x - cx) * (x - cx) / (2 * sx * sx)));
  };
  int px = 7, py = 11, pz = 3;  // inside both tiles
  double w0 = weight(pz, py, px);        // tile at y=0 sees local y=11
  double w1 = weight(pz, py - 8, px);    // tile at y=8 sees local y=3
  double v0 = tile0.at(0, 0, pz, py, px);
  double v1 = tile1.at(0, 0, pz, py - 8, px);
  double expected = (w0 * v0 + w1 * v1) / (w0 + w1);
  CHECK(probs[2].at(px, py, pz) == doctest::Approx(expected).epsilon(1e-5));
  CHECK(probs[2].at(px, py, pz) >= std::min(v0, v1) - 1e-6);
  CHECK(probs[2].at(px, py, pz) <= std::max(v0, v1) + 1e-6);
}

TEST_CASE("project_prediction") {
  Volume prob = Volume::create(20, 20, 10, {1, 1, 1});
  Volume trus = prob;
  trus.space = SpaceTag::TRUS;

  SUBCASE("identity on matching grids") {
    Rng rng(14);
    for (auto& v : prob.data) v = static_cast<float>(rng.uniform(0, 1));
    Volume out = project_prediction(prob, Affine3::identity(), trus);
    for (size_t i = 0; i < prob.data.size(); ++i)
      CHECK(out.data[i] == doctest::Approx(prob.data[i]).epsilon(1e-6));
  }

  SUBCASE("constant maps stay constant") {
    for (auto& v : prob.data) v = 0.7f;
    RegParams p;
    p.translation[0] = 1.5;
    Volume out = project_prediction(prob, p.to_affine({10, 10, 5}), trus);
    for (float v : out.data) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
  }

  SUBCASE("translation moves the blob centroid") {
    for (auto& v : prob.data) v = 0.0f;
    for (int z = 3; z < 7; ++z)
      for (int y = 6; y < 10; ++y)
        for (int x = 6; x < 10; ++x) prob.at(x, y, z) = 1.0f;
    Affine3 t = Affine3::translation({3, -2, 1});
    Volume out = project_prediction(prob, t, trus);
    auto centroid = [](const Volume& v) {
      double sx = 0, sy = 0, sz = 0, sw = 0;
      for (int z = 0; z < v.nz; ++z)
        for (int y = 0; y < v.ny; ++y)
          for (int x = 0; x < v.nx; ++x) {
            double w = v.at(x, y, z);
            sx += w * x;
            sy += w * y;
            sz += w * z;
            sw += w;
          }
      return Vec3{sx / sw, sy / sw, sz / sw};
    };
    Vec3 c0 = centroid(prob), c1 = centroid(out);
    CHECK(std::abs(c1.x - c0.x - 3.0) < 0.5);
    CHECK(std::abs(c1.y - c0.y + 2.0) < 0.5);
    CHECK(std::abs(c1.z - c0.z - 1.0) < 0.5);
  }
}

TEST_CASE("prepare_study projects targets onto the MRI grid for MriOnly") {
  PhantomConfig cfg;
  cfg.seed = 7;
  cfg.n_studies = 1;
  cfg.n_train = 1;
  cfg.n_val = 0;
  cfg.n_test = 0;
  cfg.trus_dims[0] = 48;
  cfg.trus_dims[1] = 48;
  cfg.trus_dims[2] = 24;
  cfg.gland_semiaxes_min[0] = 8;
  cfg.gland_semiaxes_min[1] = 7;
  cfg.gland_semiaxes_min[2] = 4.5;
  cfg.gland_semiaxes_max[0] = 10;
  cfg.gland_semiaxes_max[1] = 9;
  cfg.gland_semiaxes_max[2] = 5.5;
  cfg.lesions_min = 1;
  cfg.lesions_max = 1;
  cfg.lesion_radius_min_mm = 3.0;
  cfg.lesion_radius_max_mm = 4.0;
  PhantomStudy ph = generate_study(cfg, 0);
  ph.study.mri_to_trus = ph.gt_mri_to_trus;

  PreparedStudy ps = prepare_study(ph.study, Setup::MriOnly);
  CHECK(ps.channels.size() == 3);
  CHECK(ps.targets[0].same_grid(ph.study.t2w));
  CHECK(!ps.fg_gland.empty());

  // Projected gland occupies a similar physical volume.
  double trus_vol = 0, mri_vol = 0;
  for (float v : ph.study.gland_mask.data) trus_vol += v;
  trus_vol *= ph.study.gland_mask.voxel_volume_mm3();
  for (float v : ps.targets[0].data) mri_vol += v;
  mri_vol *= ps.targets[0].voxel_volume_mm3();
  CHECK(mri_vol == doctest::Approx(trus_vol).epsilon(0.25));

  MultimodalStudy no_t = ph.study;
  no_t.mri_to_trus.reset();
  CHECK_THROWS_AS(prepare_study(no_t, Setup::MriOnly), Error);
}
