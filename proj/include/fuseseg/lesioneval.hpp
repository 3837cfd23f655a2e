#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fuseseg/volume.hpp"

namespace fuseseg {

struct Lesion {
  int id = 0;
  std::vector<int64_t> voxels;  // flat grid indices
  double volume_mm3 = 0;
  Vec3 centroid_mm;
  int gg = 0;        // ground-truth lesions
  double score = 0;  // predicted lesions
};

struct LesionSet {
  int nx = 0, ny = 0, nz = 0;
  Vec3 spacing, origin;
  std::vector<Lesion> lesions;

  bool grid_matches(const LesionSet& o) const;
};

Volume binarize(const Volume& prob, float threshold);

// Deterministic labeling: component ids ordered by the (z,y,x) scan
// position of their first voxel. Connectivity 6 or 26.
LesionSet connected_components(const Volume& mask, int connectivity = 26);

// Ground-truth lesions straight from a label map, keeping ids with
// gg >= min_gg.
LesionSet lesions_from_labels(const Volume& labels, const std::map<int, int>& lesion_gg,
                              int min_gg);

// Lesion confidence: maximum probability over the lesion's voxels.
double lesion_score(const Lesion& lesion, const Volume& prob);

// Equivalent-sphere diameter (6V/pi)^(1/3). Errors: NonPositiveVolume.
double volume_to_diameter(double v_mm3);

struct MatchResult {
  struct Pair {
    int gt_id, pred_id;
    double dice;
  };
  std::vector<Pair> pairs;
  std::vector<int> fn_gt_ids;
  std::vector<int> fp_pred_ids;
};

// Greedy one-to-one matching in descending pairwise-Dice order; a pair
// counts iff Dice >= min_dice.
MatchResult match_lesions(const LesionSet& gt, const LesionSet& pred, double min_dice = 0.1);

// Three equal-thickness z bands over the gland extent, each split
// left/right at the whole-gland centroid x. Disjoint, union = gland;
// regions may be empty for tiny glands. Order: (base|mid|apex) x
// (left|right). Errors: EmptyGland.
std::array<Volume, 6> sextant_partition(const Volume& gland_mask);

struct ScoredUnit {
  double score = 0;
  bool positive = false;
};

struct LesionRow {
  std::string case_id;
  int id = 0;
  double volume_mm3 = 0, diameter_mm = 0;
  int gg = 0;
  double score = 0;
  bool tp = false;
};

struct CaseMetrics {
  std::string case_id;
  int tp = 0, fn = 0, fp = 0;
  int sextant_tn = 0, sextant_fp = 0, sextant_fn = 0, sextant_pos = 0;
  std::optional<double> sensitivity, specificity, npv;
  std::optional<double> overall_dice;  // defined when the case has gt lesions
  std::optional<double> lesion_dice;   // defined when the case has >= 1 TP
  std::vector<ScoredUnit> units;       // gt lesions + negative sextants
  std::vector<LesionRow> gt_rows;
};

// Lesion-level evaluation of one case against the CsPCa (GG >= 2) ground
// truth. Sextants provide the negative units; negative-sextant scores are
// the max probability inside.
CaseMetrics evaluate_case(const std::string& case_id, const Volume& lesion_labels,
                          const std::map<int, int>& lesion_gg, const Volume& gland_mask,
                          const Volume& prob_cspca, float threshold, double min_dice = 0.1,
                          int connectivity = 26);

// Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie). Errors:
// DegenerateClasses.
double roc_auc(const std::vector<ScoredUnit>& units);

// Average precision with pessimistic tie handling (negatives rank before
// positives at equal score). Errors: DegenerateClasses.
double pr_auc(const std::vector<ScoredUnit>& units);

// Step-curve points for plotting/integration: ROC as (fpr, tpr), PR as
// (recall, precision).
std::vector<std::pair<double, double>> roc_curve_points(const std::vector<ScoredUnit>& units);
std::vector<std::pair<double, double>> pr_curve_points(const std::vector<ScoredUnit>& units);

struct WelchResult {
  double t = 0, dof = 0, p = 1;
};

// Welch's two-sample t test; p two-sided via the regularized incomplete
// beta function (|error| < 1e-6). Errors: TooFewSamples.
WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b);

struct BootstrapCI {
  double lo = 0, hi = 0;
};

// Seeded percentile bootstrap of the median.
BootstrapCI bootstrap_median_ci(const std::vector<double>& xs, int resamples = 2000,
                                double confidence = 0.90, uint64_t seed = 811);

struct FailureStats {
  int n_tp = 0, n_fn = 0;
  std::optional<double> tp_median_volume, fn_median_volume;
  BootstrapCI tp_volume_ci, fn_volume_ci;
  std::array<int, 5> tp_gg_hist{}, fn_gg_hist{};
  std::optional<WelchResult> welch_log_volume;
};

struct CohortReport {
  int n_cases = 0;
  int tp = 0, fn = 0, fp = 0;
  int sextant_tn = 0, sextant_fp = 0, sextant_fn = 0;
  std::optional<double> sensitivity, specificity, npv;
  std::optional<double> roc, pr;
  std::optional<double> overall_dice;  // mean over eligible cases
  int overall_dice_cases = 0;
  std::optional<double> lesion_dice;
  int lesion_dice_cases = 0;
  FailureStats failure;
  std::vector<ScoredUnit> units;  // pooled
  std::vector<LesionRow> lesion_rows;
  std::vector<CaseMetrics> cases;
};

// Pools units and counts over cases; Dice variants averaged over eligible
// cases; failure stats per the TP/FN lesion tables. Errors: EmptyCohort.
CohortReport aggregate_report(const std::vector<CaseMetrics>& cases,
                              uint64_t bootstrap_seed = 811);

}  // namespace fuseseg
