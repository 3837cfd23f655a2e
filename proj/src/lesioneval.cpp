#include "fuseseg/lesioneval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fuseseg/rng.hpp"

namespace fuseseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Regularized incomplete beta via Lentz's continued fraction.
double betacf(double a, double b, double x) {
  const int kMaxIter = 300;
  const double eps = 1e-14, fpmin = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

double betai(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
              b * std::log(1.0 - x);
  double bt = std::exp(ln);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

bool LesionSet::grid_matches(const LesionSet& o) const {
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-6; };
  return nx == o.nx && ny == o.ny && nz == o.nz && close(spacing.x, o.spacing.x) &&
         close(spacing.y, o.spacing.y) && close(spacing.z, o.spacing.z) &&
         close(origin.x, o.origin.x) && close(origin.y, o.origin.y) &&
         close(origin.z, o.origin.z);
}

Volume binarize(const Volume& prob, float threshold) {
  Volume out = prob;
  for (float& v : out.data) v = v >= threshold ? 1.0f : 0.0f;
  return out;
}

LesionSet connected_components(const Volume& mask, int connectivity) {
  if (connectivity != 6 && connectivity != 26)
    fail(Err::InvalidConfig, "connected_components: connectivity must be 6 or 26");
  LesionSet set;
  set.nx = mask.nx;
  set.ny = mask.ny;
  set.nz = mask.nz;
  set.spacing = mask.spacing;
  set.origin = mask.origin;

  std::vector<int32_t> label(mask.size(), 0);
  std::vector<int64_t> stack;
  const double voxvol = mask.voxel_volume_mm3();

  int next_id = 0;
  for (int z = 0; z < mask.nz; ++z)
    for (int y = 0; y < mask.ny; ++y)
      for (int x = 0; x < mask.nx; ++x) {
        size_t i0 = mask.index(x, y, z);
        if (mask.data[i0] < 0.5f || label[i0]) continue;
        ++next_id;
        Lesion lesion;
        lesion.id = next_id;
        stack.clear();
        stack.push_back(static_cast<int64_t>(i0));
        label[i0] = next_id;
        double cx = 0, cy = 0, cz = 0;
        while (!stack.empty()) {
          int64_t cur = stack.back();
          stack.pop_back();
          lesion.voxels.push_back(cur);
          int vx = static_cast<int>(cur % mask.nx);
          int vy = static_cast<int>((cur / mask.nx) % mask.ny);
          int vz = static_cast<int>(cur / (static_cast<int64_t>(mask.nx) * mask.ny));
          cx += vx;
          cy += vy;
          cz += vz;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                if (!dx && !dy && !dz) continue;
                if (connectivity == 6 && std::abs(dx) + std::abs(dy) + std::abs(dz) != 1)
                  continue;
                int qx = vx + dx, qy = vy + dy, qz = vz + dz;
                if (qx < 0 || qy < 0 || qz < 0 || qx >= mask.nx || qy >= mask.ny ||
                    qz >= mask.nz)
                  continue;
                size_t qi = mask.index(qx, qy, qz);
                if (mask.data[qi] < 0.5f || label[qi]) continue;
                label[qi] = next_id;
                stack.push_back(static_cast<int64_t>(qi));
              }
        }
        double n = static_cast<double>(lesion.voxels.size());
        lesion.volume_mm3 = n * voxvol;
        lesion.centroid_mm = voxel_to_world(mask, {cx / n, cy / n, cz / n});
        std::sort(lesion.voxels.begin(), lesion.voxels.end());
        set.lesions.push_back(std::move(lesion));
      }
  return set;
}

LesionSet lesions_from_labels(const Volume& labels, const std::map<int, int>& lesion_gg,
                              int min_gg) {
  LesionSet set;
  set.nx = labels.nx;
  set.ny = labels.ny;
  set.nz = labels.nz;
  set.spacing = labels.spacing;
  set.origin = labels.origin;

  std::map<int, Lesion> by_id;
  for (size_t i = 0; i < labels.data.size(); ++i) {
    int id = static_cast<int>(labels.data[i]);
    if (id <= 0) continue;
    auto it = lesion_gg.find(id);
    if (it == lesion_gg.end() || it->second < min_gg) continue;
    Lesion& l = by_id[id];
    l.id = id;
    l.gg = it->second;
    l.voxels.push_back(static_cast<int64_t>(i));
  }
  const double voxvol = labels.voxel_volume_mm3();
  for (auto& [id, l] : by_id) {
    double cx = 0, cy = 0, cz = 0;
    for (int64_t v : l.voxels) {
      cx += static_cast<double>(v % labels.nx);
      cy += static_cast<double>((v / labels.nx) % labels.ny);
      cz += static_cast<double>(v / (static_cast<int64_t>(labels.nx) * labels.ny));
    }
    double n = static_cast<double>(l.voxels.size());
    l.volume_mm3 = n * voxvol;
    l.centroid_mm = voxel_to_world(labels, {cx / n, cy / n, cz / n});
    set.lesions.push_back(std::move(l));
  }
  return set;
}

double lesion_score(const Lesion& lesion, const Volume& prob) {
  double best = 0;
  for (int64_t v : lesion.voxels)
    best = std::max(best, static_cast<double>(prob.data[static_cast<size_t>(v)]));
  return best;
}

double volume_to_diameter(double v_mm3) {
  if (!(v_mm3 > 0)) fail(Err::NonPositiveVolume, "volume_to_diameter: v must be > 0");
  return std::cbrt(6.0 * v_mm3 / kPi);
}

MatchResult match_lesions(const LesionSet& gt, const LesionSet& pred, double min_dice) {
  if (!gt.grid_matches(pred))
    fail(Err::GridMismatch, "match_lesions: lesion sets on different grids");

  struct Cand {
    double dice;
    int gi, pi;
  };
  std::vector<Cand> cands;
  for (size_t gi = 0; gi < gt.lesions.size(); ++gi) {
    const auto& g = gt.lesions[gi].voxels;
    for (size_t pi = 0; pi < pred.lesions.size(); ++pi) {
      const auto& p = pred.lesions[pi].voxels;
      // Both voxel lists are sorted.
      size_t a = 0, b = 0, inter = 0;
      while (a < g.size() && b < p.size()) {
        if (g[a] < p[b])
          ++a;
        else if (g[a] > p[b])
          ++b;
        else {
          ++inter;
          ++a;
          ++b;
        }
      }
      if (inter == 0) continue;
      double dice = 2.0 * static_cast<double>(inter) /
                    static_cast<double>(g.size() + p.size());
      if (dice >= min_dice) cands.push_back({dice, static_cast<int>(gi), static_cast<int>(pi)});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dice != b.dice) return a.dice > b.dice;
    if (a.gi != b.gi) return a.gi < b.gi;
    return a.pi < b.pi;
  });

  MatchResult res;
  std::vector<bool> gt_used(gt.lesions.size(), false), pred_used(pred.lesions.size(), false);
  for (const auto& c : cands) {
    if (gt_used[c.gi] || pred_used[c.pi]) continue;
    gt_used[c.gi] = pred_used[c.pi] = true;
    res.pairs.push_back({gt.lesions[c.gi].id, pred.lesions[c.pi].id, c.dice});
  }
  for (size_t gi = 0; gi < gt.lesions.size(); ++gi)
    if (!gt_used[gi]) res.fn_gt_ids.push_back(gt.lesions[gi].id);
  for (size_t pi = 0; pi < pred.lesions.size(); ++pi)
    if (!pred_used[pi]) res.fp_pred_ids.push_back(pred.lesions[pi].id);
  return res;
}

std::array<Volume, 6> sextant_partition(const Volume& gland_mask) {
  int z_lo = gland_mask.nz, z_hi = -1;
  double cx = 0;
  size_t count = 0;
  for (int z = 0; z < gland_mask.nz; ++z)
    for (int y = 0; y < gland_mask.ny; ++y)
      for (int x = 0; x < gland_mask.nx; ++x)
        if (gland_mask.at(x, y, z) >= 0.5f) {
          z_lo = std::min(z_lo, z);
          z_hi = std::max(z_hi, z);
          cx += x;
          ++count;
        }
  if (count == 0) fail(Err::EmptyGland, "sextant_partition: empty gland mask");
  cx /= static_cast<double>(count);

  std::array<Volume, 6> out;
  for (auto& v : out)
    v = Volume::create(gland_mask.nx, gland_mask.ny, gland_mask.nz, gland_mask.spacing,
                       gland_mask.origin, gland_mask.space);

  int span = z_hi - z_lo + 1;
  for (int z = z_lo; z <= z_hi; ++z) {
    int band = std::min(2, (z - z_lo) * 3 / span);
    for (int y = 0; y < gland_mask.ny; ++y)
      for (int x = 0; x < gland_mask.nx; ++x) {
        if (gland_mask.at(x, y, z) < 0.5f) continue;
        int side = x < cx ? 0 : 1;
        out[static_cast<size_t>(band * 2 + side)].at(x, y, z) = 1.0f;
      }
  }
  return out;
}

CaseMetrics evaluate_case(const std::string& case_id, const Volume& lesion_labels,
                          const std::map<int, int>& lesion_gg, const Volume& gland_mask,
                          const Volume& prob_cspca, float threshold, double min_dice,
                          int connectivity) {
  if (!lesion_labels.same_grid(prob_cspca) || !gland_mask.same_grid(prob_cspca))
    fail(Err::GridMismatch, "evaluate_case: inputs must share one grid");

  CaseMetrics cm;
  cm.case_id = case_id;

  LesionSet gt = lesions_from_labels(lesion_labels, lesion_gg, 2);
  Volume pred_mask = binarize(prob_cspca, threshold);
  LesionSet pred = connected_components(pred_mask, connectivity);
  for (auto& l : pred.lesions) l.score = lesion_score(l, prob_cspca);

  MatchResult match = match_lesions(gt, pred, min_dice);
  cm.tp = static_cast<int>(match.pairs.size());
  cm.fn = static_cast<int>(match.fn_gt_ids.size());
  cm.fp = static_cast<int>(match.fp_pred_ids.size());
  if (cm.tp + cm.fn > 0)
    cm.sensitivity = static_cast<double>(cm.tp) / (cm.tp + cm.fn);

  // Per-lesion rows and scored positive units.
  for (const auto& g : gt.lesions) {
    double score = 0;
    bool tp = false;
    for (const auto& pair : match.pairs)
      if (pair.gt_id == g.id) {
        tp = true;
        for (const auto& p : pred.lesions)
          if (p.id == pair.pred_id) score = p.score;
      }
    cm.units.push_back({score, true});
    cm.gt_rows.push_back(
        {case_id, g.id, g.volume_mm3, volume_to_diameter(g.volume_mm3), g.gg, score, tp});
  }

  // Sextant-level negatives.
  auto sextants = sextant_partition(gland_mask);
  Volume gt_mask = Volume::create(lesion_labels.nx, lesion_labels.ny, lesion_labels.nz,
                                  lesion_labels.spacing, lesion_labels.origin,
                                  lesion_labels.space);
  for (const auto& g : gt.lesions)
    for (int64_t v : g.voxels) gt_mask.data[static_cast<size_t>(v)] = 1.0f;

  for (const auto& sx : sextants) {
    bool any_voxel = false, has_gt = false, has_pred = false;
    double max_prob = 0;
    for (size_t i = 0; i < sx.data.size(); ++i) {
      if (sx.data[i] < 0.5f) continue;
      any_voxel = true;
      if (gt_mask.data[i] >= 0.5f) has_gt = true;
      if (pred_mask.data[i] >= 0.5f) has_pred = true;
      max_prob = std::max(max_prob, static_cast<double>(prob_cspca.data[i]));
    }
    if (!any_voxel) continue;
    if (has_gt) {
      ++cm.sextant_pos;
      if (!has_pred) ++cm.sextant_fn;
    } else {
      if (has_pred)
        ++cm.sextant_fp;
      else
        ++cm.sextant_tn;
      cm.units.push_back({max_prob, false});
    }
  }
  if (cm.sextant_tn + cm.sextant_fp > 0)
    cm.specificity = static_cast<double>(cm.sextant_tn) / (cm.sextant_tn + cm.sextant_fp);
  if (cm.sextant_tn + cm.sextant_fn > 0)
    cm.npv = static_cast<double>(cm.sextant_tn) / (cm.sextant_tn + cm.sextant_fn);

  // Whole-volume Dice against the CsPCa ground truth.
  size_t gsum = 0, psum = 0, inter = 0;
  for (size_t i = 0; i < gt_mask.data.size(); ++i) {
    bool g = gt_mask.data[i] >= 0.5f, p = pred_mask.data[i] >= 0.5f;
    gsum += g;
    psum += p;
    inter += g && p;
  }
  if (gsum > 0) {
    double dice = 2.0 * static_cast<double>(inter) / static_cast<double>(gsum + psum);
    cm.overall_dice = dice;
    if (cm.tp > 0) cm.lesion_dice = dice;
  }
  return cm;
}

double roc_auc(const std::vector<ScoredUnit>& units) {
  size_t pos = 0, neg = 0;
  for (const auto& u : units) (u.positive ? pos : neg)++;
  if (pos == 0 || neg == 0)
    fail(Err::DegenerateClasses, "roc_auc: need at least one positive and one negative");

  // Mann-Whitney via average ranks.
  std::vector<size_t> order(units.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&units](size_t a, size_t b) { return units[a].score < units[b].score; });
  double rank_sum_pos = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && units[order[j]].score == units[order[i]].score) ++j;
    double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t k = i; k < j; ++k)
      if (units[order[k]].positive) rank_sum_pos += avg_rank;
    i = j;
  }
  double p = static_cast<double>(pos), n = static_cast<double>(neg);
  double u_stat = rank_sum_pos - p * (p + 1) / 2.0;
  return u_stat / (p * n);
}

double pr_auc(const std::vector<ScoredUnit>& units) {
  size_t pos = 0;
  for (const auto& u : units) pos += u.positive;
  if (pos == 0) fail(Err::DegenerateClasses, "pr_auc: need at least one positive");

  std::vector<ScoredUnit> sorted = units;
  std::sort(sorted.begin(), sorted.end(), [](const ScoredUnit& a, const ScoredUnit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.positive < b.positive;  // negatives first at equal score
  });
  double sum_prec = 0;
  size_t tp = 0;
  for (size_t r = 0; r < sorted.size(); ++r) {
    if (sorted[r].positive) {
      ++tp;
      sum_prec += static_cast<double>(tp) / static_cast<double>(r + 1);
    }
  }
  return sum_prec / static_cast<double>(pos);
}

std::vector<std::pair<double, double>> roc_curve_points(const std::vector<ScoredUnit>& units) {
  size_t pos = 0, neg = 0;
  for (const auto& u : units) (u.positive ? pos : neg)++;
  std::vector<ScoredUnit> sorted = units;
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredUnit& a, const ScoredUnit& b) { return a.score > b.score; });
  std::vector<std::pair<double, double>> pts{{0, 0}};
  size_t tp = 0, fp = 0, i = 0;
  while (i < sorted.size()) {
    size_t j = i;
    while (j < sorted.size() && sorted[j].score == sorted[i].score) ++j;
    for (size_t k = i; k < j; ++k) (sorted[k].positive ? tp : fp)++;
    pts.emplace_back(neg ? static_cast<double>(fp) / neg : 0.0,
                     pos ? static_cast<double>(tp) / pos : 0.0);
    i = j;
  }
  return pts;
}

std::vector<std::pair<double, double>> pr_curve_points(const std::vector<ScoredUnit>& units) {
  size_t pos = 0;
  for (const auto& u : units) pos += u.positive;
  std::vector<ScoredUnit> sorted = units;
  std::sort(sorted.begin(), sorted.end(), [](const ScoredUnit& a, const ScoredUnit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.positive < b.positive;
  });
  std::vector<std::pair<double, double>> pts;
  size_t tp = 0;
  for (size_t r = 0; r < sorted.size(); ++r) {
    if (sorted[r].positive) {
      ++tp;
      pts.emplace_back(pos ? static_cast<double>(tp) / pos : 0.0,
                       static_cast<double>(tp) / static_cast<double>(r + 1));
    }
  }
  return pts;
}

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    fail(Err::TooFewSamples, "welch_t: both samples need >= 2 values");
  auto stats = [](const std::vector<double>& xs) {
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
    return std::pair<double, double>{mean, var};
  };
  auto [ma, va] = stats(a);
  auto [mb, vb] = stats(b);
  double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double se2 = va / na + vb / nb;
  WelchResult r;
  if (se2 <= 0) {
    r.t = 0;
    r.dof = na + nb - 2;
    r.p = 1.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.dof = se2 * se2 /
          (va * va / (na * na * (na - 1)) + vb * vb / (nb * nb * (nb - 1)));
  double x = r.dof / (r.dof + r.t * r.t);
  r.p = betai(r.dof / 2.0, 0.5, x);  // two-sided
  return r;
}

BootstrapCI bootstrap_median_ci(const std::vector<double>& xs, int resamples,
                                double confidence, uint64_t seed) {
  BootstrapCI ci;
  if (xs.empty()) return ci;
  if (xs.size() == 1) {
    ci.lo = ci.hi = xs[0];
    return ci;
  }
  Rng rng(seed);
  std::vector<double> medians(static_cast<size_t>(resamples));
  std::vector<double> sample(xs.size());
  for (int r = 0; r < resamples; ++r) {
    for (size_t i = 0; i < xs.size(); ++i)
      sample[i] = xs[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(xs.size()) - 1))];
    medians[static_cast<size_t>(r)] = median_of(sample);
  }
  std::sort(medians.begin(), medians.end());
  double alpha = (1.0 - confidence) / 2.0;
  auto quantile = [&medians](double q) {
    double pos = q * static_cast<double>(medians.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, medians.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return medians[lo] * (1 - frac) + medians[hi] * frac;
  };
  ci.lo = quantile(alpha);
  ci.hi = quantile(1.0 - alpha);
  return ci;
}

CohortReport aggregate_report(const std::vector<CaseMetrics>& cases, uint64_t bootstrap_seed) {
  if (cases.empty()) fail(Err::EmptyCohort, "aggregate_report: no cases");
  CohortReport rep;
  rep.n_cases = static_cast<int>(cases.size());
  rep.cases = cases;

  double od_sum = 0, ld_sum = 0;
  for (const auto& c : cases) {
    rep.tp += c.tp;
    rep.fn += c.fn;
    rep.fp += c.fp;
    rep.sextant_tn += c.sextant_tn;
    rep.sextant_fp += c.sextant_fp;
    rep.sextant_fn += c.sextant_fn;
    rep.units.insert(rep.units.end(), c.units.begin(), c.units.end());
    rep.lesion_rows.insert(rep.lesion_rows.end(), c.gt_rows.begin(), c.gt_rows.end());
    if (c.overall_dice) {
      od_sum += *c.overall_dice;
      ++rep.overall_dice_cases;
    }
    if (c.lesion_dice) {
      ld_sum += *c.lesion_dice;
      ++rep.lesion_dice_cases;
    }
  }
  if (rep.tp + rep.fn > 0) rep.sensitivity = static_cast<double>(rep.tp) / (rep.tp + rep.fn);
  if (rep.sextant_tn + rep.sextant_fp > 0)
    rep.specificity = static_cast<double>(rep.sextant_tn) / (rep.sextant_tn + rep.sextant_fp);
  if (rep.sextant_tn + rep.sextant_fn > 0)
    rep.npv = static_cast<double>(rep.sextant_tn) / (rep.sextant_tn + rep.sextant_fn);
  if (rep.overall_dice_cases > 0) rep.overall_dice = od_sum / rep.overall_dice_cases;
  if (rep.lesion_dice_cases > 0) rep.lesion_dice = ld_sum / rep.lesion_dice_cases;

  bool has_pos = false, has_neg = false;
  for (const auto& u : rep.units) (u.positive ? has_pos : has_neg) = true;
  if (has_pos && has_neg) rep.roc = roc_auc(rep.units);
  if (has_pos) rep.pr = pr_auc(rep.units);

  // Failure analysis: TP vs FN lesion volumes and grade groups.
  std::vector<double> tp_vol, fn_vol, tp_log, fn_log;
  for (const auto& row : rep.lesion_rows) {
    auto& vol = row.tp ? tp_vol : fn_vol;
    auto& lg = row.tp ? tp_log : fn_log;
    vol.push_back(row.volume_mm3);
    lg.push_back(std::log(std::max(row.volume_mm3, 1e-9)));
    auto& hist = row.tp ? rep.failure.tp_gg_hist : rep.failure.fn_gg_hist;
    if (row.gg >= 1 && row.gg <= 5) ++hist[static_cast<size_t>(row.gg - 1)];
  }
  rep.failure.n_tp = static_cast<int>(tp_vol.size());
  rep.failure.n_fn = static_cast<int>(fn_vol.size());
  if (!tp_vol.empty()) {
    rep.failure.tp_median_volume = median_of(tp_vol);
    rep.failure.tp_volume_ci = bootstrap_median_ci(tp_vol, 2000, 0.90, bootstrap_seed);
  }
  if (!fn_vol.empty()) {
    rep.failure.fn_median_volume = median_of(fn_vol);
    rep.failure.fn_volume_ci = bootstrap_median_ci(fn_vol, 2000, 0.90, bootstrap_seed + 1);
  }
  if (tp_log.size() >= 2 && fn_log.size() >= 2)
    rep.failure.welch_log_volume = welch_t(fn_log, tp_log);
  return rep;
}

}  // namespace fuseseg
