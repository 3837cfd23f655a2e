#pragma once

#include <string>
#include <vector>

#include "fuseseg/lesioneval.hpp"
#include "fuseseg/pipeline.hpp"

namespace fuseseg {

void write_loss_history_csv(const std::string& path, const TrainResult& result);

void write_case_csv(const std::string& path, const std::vector<CaseMetrics>& cases);

void write_lesion_table_csv(const std::string& path, const std::vector<LesionRow>& rows);

void write_curve_csv(const std::string& path, const char* xname, const char* yname,
                     const std::vector<std::pair<double, double>>& pts);

struct CurveSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

// Self-contained polyline plot, fixed 640x480 viewBox, unit axes.
void write_curve_svg(const std::string& path, const std::string& title, const char* xlabel,
                     const char* ylabel, const std::vector<CurveSeries>& series);

void write_report_json(const std::string& path, const CohortReport& rep,
                       const std::string& setup_label, float threshold);

struct LoadedReport {
  std::string setup;
  double roc, pr, sensitivity, specificity, npv, overall_dice, lesion_dice;  // NaN = absent
  std::vector<std::pair<double, double>> roc_points, pr_points;
};

LoadedReport load_report_json(const std::string& path);

// Table with one row per model and the standard metric columns.
void write_comparison_csv(const std::string& path, const std::vector<LoadedReport>& reports);

}  // namespace fuseseg
