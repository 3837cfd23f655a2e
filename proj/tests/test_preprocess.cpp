#include <doctest.h>

#include <cstring>
#include <cmath>
#include <set>
#include <vector>

#include "fuseseg/preprocess.hpp"
#include "fuseseg/rng.hpp"

using namespace fuseseg;

namespace {

// Dense Gaussian-elimination solve of the 1-D cubic B-spline interpolation
// system with linear-extrapolation boundary rows (c0 = f0, cn-1 = fn-1);
// the oracle for the prefilter.
std::vector<double> dense_prefilter_line(const std::vector<double>& f) {
  int n = static_cast<int>(f.size());
  std::vector<double> a(static_cast<size_t>(n) * n, 0.0), rhs = f;
  auto at = [&a, n](int r, int c) -> double& { return a[static_cast<size_t>(r) * n + c]; };
  for (int i = 0; i < n; ++i) {
    bool edge = i == 0 || i == n - 1;
    at(i, i) = edge ? 1.0 : 4.0 / 6.0;
    if (!edge) {
      at(i, i - 1) = 1.0 / 6.0;
      at(i, i + 1) = 1.0 / 6.0;
    }
  }
  // Gaussian elimination with partial pivoting.
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(at(r, col)) > std::abs(at(piv, col))) piv = r;
    if (piv != col) {
      for (int c = 0; c < n; ++c) std::swap(at(col, c), at(piv, c));
      std::swap(rhs[static_cast<size_t>(col)], rhs[static_cast<size_t>(piv)]);
    }
    for (int r = col + 1; r < n; ++r) {
      double k = at(r, col) / at(col, col);
      for (int c = col; c < n; ++c) at(r, c) -= k * at(col, c);
      rhs[static_cast<size_t>(r)] -= k * rhs[static_cast<size_t>(col)];
    }
  }
  std::vector<double> x(static_cast<size_t>(n));
  for (int r = n - 1; r >= 0; --r) {
    double s = rhs[static_cast<size_t>(r)];
    for (int c = r + 1; c < n; ++c) s -= at(r, c) * x[static_cast<size_t>(c)];
    x[static_cast<size_t>(r)] = s / at(r, r);
  }
  return x;
}

Volume dense_prefilter(const Volume& v) {
  Volume out = v;
  auto run_axis = [&out](int axis) {
    int n = axis == 0 ? out.nx : axis == 1 ? out.ny : out.nz;
    size_t stride = axis == 0 ? 1
                    : axis == 1 ? static_cast<size_t>(out.nx)
                                : static_cast<size_t>(out.nx) * out.ny;
    int n1 = axis == 0 ? out.ny : out.nx;
    int n2 = axis == 2 ? out.ny : out.nz;
    for (int j = 0; j < n2; ++j)
      for (int i = 0; i < n1; ++i) {
        size_t base;
        if (axis == 0)
          base = out.index(0, i, j);
        else if (axis == 1)
          base = out.index(i, 0, j);
        else
          base = out.index(i, j, 0);
        std::vector<double> line(static_cast<size_t>(n));
        for (int k = 0; k < n; ++k) line[static_cast<size_t>(k)] = out.data[base + k * stride];
        auto solved = dense_prefilter_line(line);
        for (int k = 0; k < n; ++k)
          out.data[base + k * stride] = static_cast<float>(solved[static_cast<size_t>(k)]);
      }
  };
  run_axis(0);
  run_axis(1);
  run_axis(2);
  return out;
}

}  // namespace

TEST_CASE("bspline prefilter: constant and ramp") {
  Volume c = Volume::create(6, 5, 4, {1, 1, 1}, {}, SpaceTag::Other, 3.25f);
  Volume cc = bspline_prefilter(c);
  for (float v : cc.data) CHECK(v == doctest::Approx(3.25f).epsilon(1e-6));

  Volume ramp = Volume::create(8, 4, 4, {1, 1, 1});
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 8; ++x) ramp.at(x, y, z) = static_cast<float>(x);
  Volume coef = bspline_prefilter(ramp);
  for (int x = 0; x < 8; ++x) {
    float s = sample_at(coef, {static_cast<double>(x), 1.0, 2.0}, InterpKind::CubicBSpline);
    CHECK(s == doctest::Approx(static_cast<double>(x)).epsilon(1e-4));
  }
  // Linear reproduction at a fractional position.
  float mid = sample_at(coef, {2.25, 1.0, 2.0}, InterpKind::CubicBSpline);
  CHECK(mid == doctest::Approx(2.25).epsilon(1e-4));
}

TEST_CASE("bspline prefilter matches the dense-solve oracle on a random 8x8x8 volume") {
  Volume v = Volume::create(8, 8, 8, {1, 1, 1});
  Rng rng(99);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-2, 2));

  Volume fast = bspline_prefilter(v);
  Volume oracle = dense_prefilter(v);
  for (size_t i = 0; i < v.data.size(); ++i)
    CHECK(fast.data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-4));

  // On-grid sampling of the spline reproduces the input.
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        float s = sample_at(fast, {double(x), double(y), double(z)}, InterpKind::CubicBSpline);
        CHECK(std::abs(s - v.at(x, y, z)) < 1e-3);
      }
}

TEST_CASE("bspline prefilter rejects degenerate axes") {
  Volume v = Volume::create(1, 5, 5, {1, 1, 1});
  try {
    bspline_prefilter(v);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::DegenerateAxis);
  }
}

TEST_CASE("sample_at basics") {
  Volume v = Volume::create(4, 3, 3, {1, 1, 1});
  v.at(0, 0, 0) = 2.0f;
  v.at(1, 0, 0) = 4.0f;
  v.at(2, 1, 1) = 7.0f;

  CHECK(sample_at(v, {2, 1, 1}, InterpKind::Trilinear) == doctest::Approx(7.0));
  CHECK(sample_at(v, {0.5, 0, 0}, InterpKind::Trilinear) == doctest::Approx(3.0));
  CHECK(sample_at(v, {1.4, 0, 0}, InterpKind::Nearest) == doctest::Approx(4.0));
  // Clamp-to-edge far outside.
  CHECK(sample_at(v, {-5, 0, 0}, InterpKind::Trilinear) == doctest::Approx(2.0));
  CHECK(sample_at(v, {-5, -9, -9}, InterpKind::Nearest) == doctest::Approx(2.0));
}

TEST_CASE("resample identity and constants") {
  Volume v = Volume::create(10, 8, 6, {0.5, 0.5, 0.5});
  Rng rng(3);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-1, 1));

  for (auto kind : {InterpKind::Trilinear, InterpKind::CubicBSpline}) {
    Volume r = resample_volume(v, v.spacing, kind);
    REQUIRE(r.nx == v.nx);
    REQUIRE(r.ny == v.ny);
    REQUIRE(r.nz == v.nz);
    for (size_t i = 0; i < v.data.size(); ++i)
      CHECK(r.data[i] == doctest::Approx(v.data[i]).epsilon(1e-5));
  }

  Volume c = Volume::create(7, 7, 7, {1.0, 1.0, 2.0}, {}, SpaceTag::Other, -0.75f);
  for (auto kind : {InterpKind::Nearest, InterpKind::Trilinear, InterpKind::CubicBSpline}) {
    Volume r = resample_volume(c, {0.6, 1.3, 0.9}, kind);
    for (float x : r.data) CHECK(x == doctest::Approx(-0.75f).epsilon(1e-5));
  }
}

TEST_CASE("resample against an analytic trilinear field") {
  // f(x,y,z) = 2x + 3y - z is reproduced exactly by trilinear interpolation.
  Volume v = Volume::create(12, 12, 12, {1, 1, 1}, {2, -3, 5});
  for (int z = 0; z < 12; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) {
        Vec3 w = voxel_to_world(v, {double(x), double(y), double(z)});
        v.at(x, y, z) = static_cast<float>(2 * w.x + 3 * w.y - w.z);
      }
  Volume r = resample_volume(v, {0.5, 0.5, 0.5}, InterpKind::Trilinear);
  CHECK(r.nx == 24);
  for (int z = 0; z < r.nz; ++z)
    for (int y = 0; y < r.ny; ++y)
      for (int x = 0; x < r.nx; ++x) {
        Vec3 w = voxel_to_world(r, {double(x), double(y), double(z)});
        // Output voxels past the input extent sample the clamped edge.
        Vec3 src = world_to_voxel(v, w);
        if (src.x > 11 || src.y > 11 || src.z > 11) continue;
        CHECK(r.at(x, y, z) ==
              doctest::Approx(2 * w.x + 3 * w.y - w.z).epsilon(1e-4));
      }
}

TEST_CASE("nearest resample of an integer mask emits only input values") {
  Volume v = Volume::create(9, 9, 5, {1, 1, 1});
  Rng rng(8);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform_int(0, 3));
  Volume r = resample_volume(v, {0.7, 1.4, 0.9}, InterpKind::Nearest);
  std::set<float> allowed(v.data.begin(), v.data.end());
  for (float x : r.data) CHECK(allowed.count(x) == 1);
}

TEST_CASE("center_crop_pad sizes and borders") {
  Volume big = Volume::create(300, 300, 4, {0.5, 0.5, 3.0});
  for (auto& x : big.data) x = 1.0f;
  Volume c = center_crop_pad(big, 128.0, 128.0);
  CHECK(c.nx == 256);
  CHECK(c.ny == 256);
  CHECK(c.nz == 4);

  Volume same = Volume::create(256, 256, 2, {0.5, 0.5, 3.0});
  Rng rng(4);
  for (auto& x : same.data) x = static_cast<float>(rng.uniform(-1, 1));
  Volume s = center_crop_pad(same, 128.0, 128.0);
  REQUIRE(s.nx == 256);
  CHECK(std::memcmp(s.data.data(), same.data.data(), same.data.size() * 4) == 0);

  Volume small = Volume::create(200, 200, 2, {0.5, 0.5, 3.0}, {}, SpaceTag::Other, 2.0f);
  Volume p = center_crop_pad(small, 128.0, 128.0);
  REQUIRE(p.nx == 256);
  REQUIRE(p.ny == 256);
  // 28-voxel zero borders on each side.
  for (int x = 0; x < 256; ++x) {
    bool border = x < 28 || x >= 228;
    CHECK(p.at(x, 128, 1) == (border ? 0.0f : 2.0f));
    CHECK(p.at(128, x, 1) == (border ? 0.0f : 2.0f));
  }
}

TEST_CASE("center_crop_pad puts the extra voxel on the high side") {
  Volume v = Volume::create(4, 7, 1, {1, 1, 1});
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 4; ++x) v.at(x, y, 0) = static_cast<float>(10 * y + x);

  // Pad 4 -> 7: one voxel low, two high.
  Volume p = center_crop_pad(v, 7.0, 7.0);
  REQUIRE(p.nx == 7);
  CHECK(p.at(0, 0, 0) == 0.0f);
  CHECK(p.at(1, 0, 0) == doctest::Approx(0.0f));
  CHECK(p.at(4, 0, 0) == doctest::Approx(3.0f));
  CHECK(p.at(5, 0, 0) == 0.0f);
  CHECK(p.at(6, 0, 0) == 0.0f);

  // Crop 7 -> 4 keeps rows 1..4 (one removed low, two high).
  Volume c = center_crop_pad(v, 4.0, 4.0);
  REQUIRE(c.ny == 4);
  CHECK(c.at(0, 0, 0) == doctest::Approx(10.0f));
  CHECK(c.at(0, 3, 0) == doctest::Approx(40.0f));
}

TEST_CASE("center_crop_pad preserves physical positions") {
  Volume v = Volume::create(20, 12, 3, {0.7, 1.1, 2.0}, {5, -2, 1});
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i);
  Volume c = center_crop_pad(v, 7.0, 20.0);
  for (int z = 0; z < c.nz; ++z)
    for (int y = 0; y < c.ny; ++y)
      for (int x = 0; x < c.nx; ++x) {
        Vec3 w = voxel_to_world(c, {double(x), double(y), double(z)});
        Vec3 src = world_to_voxel(v, w);
        int sx = static_cast<int>(std::llround(src.x));
        int sy = static_cast<int>(std::llround(src.y));
        CHECK(std::abs(src.x - sx) < 1e-6);
        CHECK(std::abs(src.y - sy) < 1e-6);
        if (sx >= 0 && sx < v.nx && sy >= 0 && sy < v.ny)
          CHECK(c.at(x, y, z) == v.at(sx, sy, z));
        else
          CHECK(c.at(x, y, z) == 0.0f);
      }
}

TEST_CASE("zscore_normalize") {
  Volume v = Volume::create(4, 1, 1, {1, 1, 1});
  Volume g = v;
  v.data = {1.0f, 3.0f, 100.0f, -7.0f};
  g.data = {1.0f, 1.0f, 0.0f, 0.0f};

  Volume n = zscore_normalize(v, g);
  CHECK(n.data[0] == doctest::Approx(-1.0));
  CHECK(n.data[1] == doctest::Approx(1.0));
  // Applied to all voxels, not just the gland.
  CHECK(n.data[2] == doctest::Approx((100.0 - 2.0) / 1.0));

  SUBCASE("idempotence") {
    Volume n2 = zscore_normalize(n, g);
    for (size_t i = 0; i < n.data.size(); ++i)
      CHECK(n2.data[i] == doctest::Approx(n.data[i]).epsilon(1e-5));
  }

  SUBCASE("affine intensity invariance") {
    Volume scaled = v;
    for (auto& x : scaled.data) x = 3.5f * x + 11.0f;
    Volume ns = zscore_normalize(scaled, g);
    for (size_t i = 0; i < n.data.size(); ++i)
      CHECK(ns.data[i] == doctest::Approx(n.data[i]).epsilon(1e-4));
  }

  SUBCASE("degenerate std") {
    Volume flat = v;
    flat.data = {2.0f, 2.0f, 5.0f, 9.0f};
    try {
      zscore_normalize(flat, g);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::DegenerateStd);
    }
  }

  SUBCASE("empty gland") {
    Volume none = g;
    none.data = {0.0f, 0.0f, 0.0f, 0.0f};
    try {
      zscore_normalize(v, none);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::EmptyGland);
    }
  }

  SUBCASE("gland statistics after normalization") {
    Volume big = Volume::create(16, 16, 8, {1, 1, 1});
    Volume mask = big;
    Rng rng(12);
    for (auto& x : big.data) x = static_cast<float>(rng.uniform(10, 30));
    for (size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = (i % 3 == 0) ? 1.0f : 0.0f;
    Volume nn = zscore_normalize(big, mask);
    double sum = 0, sq = 0;
    size_t cnt = 0;
    for (size_t i = 0; i < nn.data.size(); ++i)
      if (mask.data[i] >= 0.5f) {
        sum += nn.data[i];
        sq += static_cast<double>(nn.data[i]) * nn.data[i];
        ++cnt;
      }
    double mean = sum / cnt;
    double var = sq / cnt - mean * mean;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);
  }
}
