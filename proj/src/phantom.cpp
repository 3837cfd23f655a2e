#include "fuseseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "fuseseg/nifti.hpp"
#include "fuseseg/registration.hpp"
#include "fuseseg/rng.hpp"

namespace fs = std::filesystem;

namespace fuseseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct GlandShape {
  Vec3 center;
  Vec3 axes;
  double wobble;
  double phase_phi, phase_theta;

  // Normalized radial coordinate of p: <= boundary(p) means inside.
  double rho(const Vec3& p) const {
    Vec3 q = p - center;
    double ux = q.x / axes.x, uy = q.y / axes.y, uz = q.z / axes.z;
    return std::sqrt(ux * ux + uy * uy + uz * uz);
  }
  double boundary(const Vec3& p) const {
    Vec3 q = p - center;
    double ux = q.x / axes.x, uy = q.y / axes.y, uz = q.z / axes.z;
    double r = std::sqrt(ux * ux + uy * uy + uz * uz);
    if (r < 1e-9) return 1.0;
    double phi = std::atan2(uy, ux);
    double theta = std::acos(std::clamp(uz / r, -1.0, 1.0));
    return 1.0 + wobble * std::sin(3.0 * phi + phase_phi) * std::cos(2.0 * theta + phase_theta);
  }
  bool inside(const Vec3& p, double margin = 1.0) const {
    return rho(p) <= boundary(p) * margin;
  }
};

double lesion_rho(const PhantomLesion& l, const Vec3& p) {
  Vec3 q = p - l.center_mm;
  double ux = q.x / l.semiaxes_mm.x, uy = q.y / l.semiaxes_mm.y, uz = q.z / l.semiaxes_mm.z;
  return std::sqrt(ux * ux + uy * uy + uz * uz);
}

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

struct ChannelProfile {
  double background, gland, lesion_contrast, structure_scale;
};

// Extra-prostatic blobs shared by every channel; they anchor the affine
// registration away from the gland.
struct BackgroundStructure {
  Vec3 center;
  double sigma, amplitude;
};

// Continuous noise-free anatomy value for one channel at a TRUS-space
// point. Gland edge is softened over ~1 mm so intensity-driven
// registration sees gradients; background structures are masked out of the
// gland interior.
double anatomy_value(const GlandShape& gland, const std::vector<PhantomLesion>& lesions,
                     const std::vector<BackgroundStructure>& structures,
                     const ChannelProfile& prof, bool mri_channel, const PhantomConfig& cfg,
                     const Vec3& p) {
  double b = gland.boundary(p);
  double r = gland.rho(p);
  double mean_axis = (gland.axes.x + gland.axes.y + gland.axes.z) / 3.0;
  double edge = smoothstep01((b - r) * mean_axis / 1.2);
  double bg = prof.background;
  for (const auto& s : structures) {
    Vec3 q = p - s.center;
    double d2 = q.x * q.x + q.y * q.y + q.z * q.z;
    bg += prof.structure_scale * s.amplitude * std::exp(-d2 / (2 * s.sigma * s.sigma));
  }
  double v = bg + (prof.gland - bg) * edge;

  for (const auto& l : lesions) {
    bool visible = l.visibility == LesionVisibility::Both ||
                   (mri_channel && l.visibility == LesionVisibility::MriOnly) ||
                   (!mri_channel && l.visibility == LesionVisibility::TrusOnly);
    if (!visible) continue;
    double lr = lesion_rho(l, p);
    if (lr >= 1.25) continue;
    double la = (l.semiaxes_mm.x + l.semiaxes_mm.y + l.semiaxes_mm.z) / 3.0;
    double lesion_edge = smoothstep01((1.0 - lr) * la / 0.6);
    double r_eff = std::cbrt(l.semiaxes_mm.x * l.semiaxes_mm.y * l.semiaxes_mm.z);
    double ramp = cfg.contrast_floor +
                  (1.0 - cfg.contrast_floor) *
                      std::clamp((r_eff - cfg.lesion_radius_min_mm) /
                                     (cfg.contrast_full_radius_mm - cfg.lesion_radius_min_mm),
                                 0.0, 1.0);
    v += prof.lesion_contrast * ramp * lesion_edge;
  }
  return v;
}

}  // namespace

double PhantomLesion::analytic_volume_mm3() const {
  return 4.0 / 3.0 * kPi * semiaxes_mm.x * semiaxes_mm.y * semiaxes_mm.z;
}

void PhantomConfig::validate() const {
  if (n_studies < 1 || n_train + n_val + n_test != n_studies)
    fail(Err::InvalidConfig, "phantom: split counts must sum to n_studies");
  if (std::abs(vis_mri_only + vis_trus_only + vis_both - 1.0) > 1e-9)
    fail(Err::InvalidConfig, "phantom: visibility fractions must sum to 1");
  if (lesions_min < 0 || lesions_max < lesions_min)
    fail(Err::InvalidConfig, "phantom: bad lesion count range");
  if (!(lesion_radius_min_mm > 0) || lesion_radius_max_mm <= lesion_radius_min_mm)
    fail(Err::InvalidConfig, "phantom: bad lesion radius range");
  for (int i = 0; i < 3; ++i) {
    if (trus_dims[i] < 8) fail(Err::InvalidConfig, "phantom: trus grid too small");
    if (!(gland_semiaxes_min[i] > 0) || gland_semiaxes_max[i] < gland_semiaxes_min[i])
      fail(Err::InvalidConfig, "phantom: bad gland axes range");
  }
  if (noise_sd < 0 || speckle_sd < 0) fail(Err::InvalidConfig, "phantom: negative noise sd");
}

PhantomStudy generate_study(const PhantomConfig& cfg, int index) {
  cfg.validate();
  Rng rng = Rng::substream(cfg.seed, static_cast<uint64_t>(index));

  PhantomStudy ps;
  char idbuf[32];
  std::snprintf(idbuf, sizeof(idbuf), "phantom_%03d", index);
  ps.study.study_id = idbuf;
  ps.study.split = index < cfg.n_train            ? "train"
                   : index < cfg.n_train + cfg.n_val ? "val"
                                                     : "test";

  Volume trus = Volume::create(cfg.trus_dims[0], cfg.trus_dims[1], cfg.trus_dims[2],
                               cfg.trus_spacing, {0, 0, 0}, SpaceTag::TRUS);
  Vec3 tcenter = voxel_to_world(
      trus, {(trus.nx - 1) / 2.0, (trus.ny - 1) / 2.0, (trus.nz - 1) / 2.0});

  GlandShape gland;
  gland.center = {tcenter.x + rng.uniform(-2.0, 2.0), tcenter.y + rng.uniform(-2.0, 2.0),
                  tcenter.z + rng.uniform(-1.5, 1.5)};
  gland.axes = {rng.uniform(cfg.gland_semiaxes_min[0], cfg.gland_semiaxes_max[0]),
                rng.uniform(cfg.gland_semiaxes_min[1], cfg.gland_semiaxes_max[1]),
                rng.uniform(cfg.gland_semiaxes_min[2], cfg.gland_semiaxes_max[2])};
  gland.wobble = cfg.gland_wobble;
  gland.phase_phi = rng.uniform(0, 2 * kPi);
  gland.phase_theta = rng.uniform(0, 2 * kPi);

  // Shared extra-prostatic structures (muscle/bone-like blobs).
  std::vector<BackgroundStructure> structures;
  Vec3 extent{trus.nx * trus.spacing.x, trus.ny * trus.spacing.y, trus.nz * trus.spacing.z};
  for (int k = 0; k < 6; ++k) {
    BackgroundStructure st;
    bool ok = false;
    for (int attempt = 0; attempt < 30 && !ok; ++attempt) {
      st.center = {rng.uniform(0, extent.x), rng.uniform(0, extent.y),
                   rng.uniform(0, extent.z)};
      ok = !gland.inside(st.center, 1.35);
    }
    st.sigma = rng.uniform(4.0, 9.0);
    st.amplitude = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.15, 0.3);
    if (ok) structures.push_back(st);
  }

  // Lesions, placed fully inside the gland and pairwise disjoint.
  int want = static_cast<int>(rng.uniform_int(cfg.lesions_min, cfg.lesions_max));
  for (int li = 0; li < want; ++li) {
    double r = rng.uniform(cfg.lesion_radius_min_mm, cfg.lesion_radius_max_mm);
    double e1 = rng.uniform(0.8, 1.05);
    double e2 = rng.uniform(0.75, 0.95);
    double u = rng.uniform();
    LesionVisibility vis = u < cfg.vis_mri_only ? LesionVisibility::MriOnly
                           : u < cfg.vis_mri_only + cfg.vis_trus_only
                               ? LesionVisibility::TrusOnly
                               : LesionVisibility::Both;

    PhantomLesion lesion;
    lesion.visibility = vis;
    bool placed = false;
    double scale = 1.0;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      if (attempt > 0 && attempt % 10 == 0) scale *= 0.85;
      Vec3 axes{r * scale, r * e1 * scale, r * e2 * scale};
      if (axes.z > 0.75 * gland.axes.z) {
        double k = 0.75 * gland.axes.z / axes.z;
        axes = axes * k;
      }
      Vec3 c{gland.center.x + rng.uniform(-gland.axes.x, gland.axes.x),
             gland.center.y + rng.uniform(-gland.axes.y, gland.axes.y),
             gland.center.z + rng.uniform(-gland.axes.z, gland.axes.z)};
      lesion.center_mm = c;
      lesion.semiaxes_mm = axes;

      // Surface samples along 26 directions must stay inside the gland.
      bool ok = gland.inside(c, 0.95);
      for (int dz = -1; dz <= 1 && ok; ++dz)
        for (int dy = -1; dy <= 1 && ok; ++dy)
          for (int dx = -1; dx <= 1 && ok; ++dx) {
            if (!dx && !dy && !dz) continue;
            double n = std::sqrt(double(dx * dx + dy * dy + dz * dz));
            Vec3 s{c.x + dx / n * axes.x, c.y + dy / n * axes.y, c.z + dz / n * axes.z};
            ok = gland.inside(s, 0.95);
          }
      // Disjoint from already placed lesions (conservative).
      for (const auto& other : ps.lesions) {
        if (!ok) break;
        double dist = norm(other.center_mm - c);
        double amax = std::max({axes.x, axes.y, axes.z});
        double bmax = std::max({other.semiaxes_mm.x, other.semiaxes_mm.y,
                                other.semiaxes_mm.z});
        if (dist < amax + bmax + 1.0) ok = false;
      }
      placed = ok;
    }
    if (!placed) continue;

    double r_eff = std::cbrt(lesion.semiaxes_mm.x * lesion.semiaxes_mm.y *
                             lesion.semiaxes_mm.z);
    double q = std::clamp((r_eff - cfg.lesion_radius_min_mm) /
                              (cfg.lesion_radius_max_mm - cfg.lesion_radius_min_mm),
                          0.0, 1.0);
    lesion.gg = std::clamp(1 + static_cast<int>(q * 5.0), 1, 5);
    lesion.id = static_cast<int>(ps.lesions.size()) + 1;
    ps.lesions.push_back(lesion);
  }

  // Hidden MRI->TRUS transform about the TRUS physical center.
  RegParams gt;
  double max_rot = cfg.max_rotation_deg * kPi / 180.0;
  for (int i = 0; i < 3; ++i) gt.rotation[i] = rng.uniform(-max_rot, max_rot);
  for (int i = 0; i < 3; ++i)
    gt.translation[i] = rng.uniform(-cfg.max_translation_mm, cfg.max_translation_mm);
  ps.gt_mri_to_trus = gt.to_affine(tcenter);

  // MRI grid covering the TRUS extent mapped through the inverse transform.
  Affine3 inv = ps.gt_mri_to_trus.inverse();
  Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
  for (int corner = 0; corner < 8; ++corner) {
    Vec3 w{(corner & 1) ? (trus.nx - 1) * trus.spacing.x : 0.0,
           (corner & 2) ? (trus.ny - 1) * trus.spacing.y : 0.0,
           (corner & 4) ? (trus.nz - 1) * trus.spacing.z : 0.0};
    Vec3 m = inv.apply(w);
    lo = {std::min(lo.x, m.x), std::min(lo.y, m.y), std::min(lo.z, m.z)};
    hi = {std::max(hi.x, m.x), std::max(hi.y, m.y), std::max(hi.z, m.z)};
  }
  const double margin = 3.0;
  lo = lo - Vec3{margin, margin, margin};
  hi = hi + Vec3{margin, margin, margin};
  int mnx = static_cast<int>(std::ceil((hi.x - lo.x) / cfg.mri_spacing.x)) + 1;
  int mny = static_cast<int>(std::ceil((hi.y - lo.y) / cfg.mri_spacing.y)) + 1;
  int mnz = static_cast<int>(std::ceil((hi.z - lo.z) / cfg.mri_spacing.z)) + 1;

  const ChannelProfile prof_t2w{0.30, 1.00, cfg.contrast_t2w, 1.0};
  const ChannelProfile prof_adc{0.85, 1.00, cfg.contrast_adc, 0.6};
  const ChannelProfile prof_dwi{0.20, 0.55, cfg.contrast_dwi, 0.5};
  // Same background/structure ratios as T2w so the NCC optimum of the
  // registration pair sits at the true transform; texture and lesion
  // visibility still differ per modality.
  const ChannelProfile prof_trus{0.30, 1.00, cfg.contrast_trus, 1.0};

  auto make_mri = [&](const ChannelProfile& prof) {
    Volume v = Volume::create(mnx, mny, mnz, cfg.mri_spacing, lo, SpaceTag::MRI);
    for (int z = 0; z < v.nz; ++z)
      for (int y = 0; y < v.ny; ++y)
        for (int x = 0; x < v.nx; ++x) {
          Vec3 w = voxel_to_world(v, {double(x), double(y), double(z)});
          Vec3 p = ps.gt_mri_to_trus.apply(w);
          double val = anatomy_value(gland, ps.lesions, structures, prof, true, cfg, p) +
                       cfg.noise_sd * rng.normal();
          v.at(x, y, z) = static_cast<float>(val);
        }
    return v;
  };
  ps.study.t2w = make_mri(prof_t2w);
  ps.study.adc = make_mri(prof_adc);
  ps.study.dwi = make_mri(prof_dwi);

  // TRUS channel: speckle-like multiplicative noise on the smooth base.
  for (int z = 0; z < trus.nz; ++z)
    for (int y = 0; y < trus.ny; ++y)
      for (int x = 0; x < trus.nx; ++x) {
        Vec3 p = voxel_to_world(trus, {double(x), double(y), double(z)});
        double base = anatomy_value(gland, ps.lesions, structures, prof_trus, false, cfg, p);
        trus.at(x, y, z) = static_cast<float>(base * (1.0 + cfg.speckle_sd * rng.normal()));
      }
  ps.study.trus = trus;

  Volume gmask = Volume::create(trus.nx, trus.ny, trus.nz, trus.spacing, trus.origin,
                                SpaceTag::TRUS);
  Volume labels = gmask;
  for (int z = 0; z < trus.nz; ++z)
    for (int y = 0; y < trus.ny; ++y)
      for (int x = 0; x < trus.nx; ++x) {
        Vec3 p = voxel_to_world(trus, {double(x), double(y), double(z)});
        bool in_gland = gland.inside(p);
        if (!in_gland) continue;
        gmask.at(x, y, z) = 1.0f;
        for (const auto& l : ps.lesions)
          if (lesion_rho(l, p) <= 1.0) {
            labels.at(x, y, z) = static_cast<float>(l.id);
            break;
          }
      }
  ps.study.gland_mask = gmask;
  ps.study.lesion_labels = labels;
  for (const auto& l : ps.lesions) ps.study.lesion_gg[l.id] = l.gg;

  return ps;
}

std::vector<PhantomStudy> generate_cohort(const PhantomConfig& cfg) {
  cfg.validate();
  std::vector<PhantomStudy> out;
  out.reserve(cfg.n_studies);
  for (int i = 0; i < cfg.n_studies; ++i) out.push_back(generate_study(cfg, i));
  return out;
}

Affine3 ground_truth_transform(const PhantomStudy& s) { return s.gt_mri_to_trus; }

void write_cohort(const std::vector<PhantomStudy>& cohort, const std::string& dir) {
  fs::create_directories(dir);
  std::vector<StudyManifest> manifest;
  for (const auto& ps : cohort) {
    fs::path sdir = fs::path(dir) / ps.study.study_id;
    fs::create_directories(sdir);
    auto put = [&sdir](const Volume& v, const char* name) {
      std::string p = (sdir / name).string();
      nifti_write(v, p);
      return p;
    };
    StudyManifest m;
    m.study_id = ps.study.study_id;
    m.t2w = put(ps.study.t2w, "t2w.nii");
    m.adc = put(ps.study.adc, "adc.nii");
    m.dwi = put(ps.study.dwi, "dwi.nii");
    m.trus = put(ps.study.trus, "trus.nii");
    m.gland = put(ps.study.gland_mask, "gland.nii");
    m.lesions = put(ps.study.lesion_labels, "lesions.nii");
    m.lesion_gg = ps.study.lesion_gg;
    m.split = ps.study.split;
    ps.gt_mri_to_trus.save_json((sdir / "gt_transform.json").string());
    manifest.push_back(std::move(m));
  }
  save_manifest(manifest, (fs::path(dir) / "manifest.json").string());
}

Affine3 load_ground_truth_transform(const std::string& dir, const std::string& study_id) {
  fs::path p = fs::path(dir) / study_id / "gt_transform.json";
  if (!fs::exists(p))
    fail(Err::NotAPhantom, "no ground-truth transform for " + study_id + " under " + dir);
  return Affine3::load_json(p.string());
}

}  // namespace fuseseg
