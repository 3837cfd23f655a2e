#include "fuseseg/reportio.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

using nlohmann::json;

namespace fuseseg {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(Err::IoError, "cannot open for write: " + path);
  return f;
}

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

json opt_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

double json_opt(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j[key].get<double>();
}

}  // namespace

void write_loss_history_csv(const std::string& path, const TrainResult& result) {
  auto f = open_out(path);
  f << "step,total,bce_gland,bce_any_cancer,bce_cspca,dice_gland,dice_any_cancer,dice_cspca\n";
  for (const auto& r : result.history) {
    f << r.step << "," << r.total;
    for (double v : r.bce) f << "," << v;
    for (double v : r.dice) f << "," << v;
    f << "\n";
  }
}

void write_case_csv(const std::string& path, const std::vector<CaseMetrics>& cases) {
  auto f = open_out(path);
  f << "case_id,tp,fn,fp,sextant_tn,sextant_fp,sextant_fn,sensitivity,specificity,npv,"
       "overall_dice,lesion_dice\n";
  for (const auto& c : cases) {
    f << c.case_id << "," << c.tp << "," << c.fn << "," << c.fp << "," << c.sextant_tn << ","
      << c.sextant_fp << "," << c.sextant_fn << "," << opt_str(c.sensitivity) << ","
      << opt_str(c.specificity) << "," << opt_str(c.npv) << "," << opt_str(c.overall_dice)
      << "," << opt_str(c.lesion_dice) << "\n";
  }
}

void write_lesion_table_csv(const std::string& path, const std::vector<LesionRow>& rows) {
  auto f = open_out(path);
  f << "case_id,lesion_id,volume_mm3,diameter_mm,gg,score,status\n";
  for (const auto& r : rows) {
    f << r.case_id << "," << r.id << "," << r.volume_mm3 << "," << r.diameter_mm << ","
      << r.gg << "," << r.score << "," << (r.tp ? "TP" : "FN") << "\n";
  }
}

void write_curve_csv(const std::string& path, const char* xname, const char* yname,
                     const std::vector<std::pair<double, double>>& pts) {
  auto f = open_out(path);
  f << xname << "," << yname << "\n";
  for (const auto& [x, y] : pts) f << x << "," << y << "\n";
}

void write_curve_svg(const std::string& path, const std::string& title, const char* xlabel,
                     const char* ylabel, const std::vector<CurveSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
  const double W = 640, H = 480, L = 64, R = 20, T = 36, B = 48;
  auto px = [&](double x) { return L + x * (W - L - R); };
  auto py = [&](double y) { return H - B - y * (H - T - B); };

  auto f = open_out(path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 480\" "
       "font-family=\"sans-serif\" font-size=\"13\">\n";
  f << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  f << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
    << title << "</text>\n";
  // axes + ticks
  f << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
    << py(0) << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\""
    << py(1) << "\" stroke=\"black\"/>\n";
  for (double t = 0.0; t <= 1.001; t += 0.25) {
    f << "<text x=\"" << px(t) << "\" y=\"" << py(0) + 18
      << "\" text-anchor=\"middle\">" << t << "</text>\n";
    f << "<text x=\"" << px(0) - 8 << "\" y=\"" << py(t) + 4
      << "\" text-anchor=\"end\">" << t << "</text>\n";
    f << "<line x1=\"" << px(t) << "\" y1=\"" << py(0) << "\" x2=\"" << px(t) << "\" y2=\""
      << py(0) + 4 << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << px(0) - 4 << "\" y1=\"" << py(t) << "\" x2=\"" << px(0)
      << "\" y2=\"" << py(t) << "\" stroke=\"black\"/>\n";
  }
  f << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"" << H - 10
    << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  f << "<text x=\"16\" y=\"" << (T + (H - T - B) / 2)
    << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + (H - T - B) / 2)
    << ")\">" << ylabel << "</text>\n";

  for (size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % 5];
    f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : series[s].points) f << px(x) << "," << py(y) << " ";
    f << "\"/>\n";
    double ly = T + 16 + 18 * static_cast<double>(s);
    f << "<line x1=\"" << W - 150 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - 126
      << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    f << "<text x=\"" << W - 120 << "\" y=\"" << ly << "\">" << series[s].label
      << "</text>\n";
  }
  f << "</svg>\n";
}

void write_report_json(const std::string& path, const CohortReport& rep,
                       const std::string& setup_label, float threshold) {
  json j;
  j["setup"] = setup_label;
  j["threshold"] = threshold;
  j["n_cases"] = rep.n_cases;
  j["counts"] = {{"tp", rep.tp},
                 {"fn", rep.fn},
                 {"fp", rep.fp},
                 {"sextant_tn", rep.sextant_tn},
                 {"sextant_fp", rep.sextant_fp},
                 {"sextant_fn", rep.sextant_fn}};
  j["metrics"] = {{"roc", opt_json(rep.roc)},
                  {"pr", opt_json(rep.pr)},
                  {"sensitivity", opt_json(rep.sensitivity)},
                  {"specificity", opt_json(rep.specificity)},
                  {"npv", opt_json(rep.npv)},
                  {"overall_dice", opt_json(rep.overall_dice)},
                  {"lesion_dice", opt_json(rep.lesion_dice)}};
  json fa;
  fa["n_tp"] = rep.failure.n_tp;
  fa["n_fn"] = rep.failure.n_fn;
  fa["tp_median_volume_mm3"] = opt_json(rep.failure.tp_median_volume);
  fa["fn_median_volume_mm3"] = opt_json(rep.failure.fn_median_volume);
  fa["tp_volume_ci90"] = {rep.failure.tp_volume_ci.lo, rep.failure.tp_volume_ci.hi};
  fa["fn_volume_ci90"] = {rep.failure.fn_volume_ci.lo, rep.failure.fn_volume_ci.hi};
  fa["tp_gg_hist"] = rep.failure.tp_gg_hist;
  fa["fn_gg_hist"] = rep.failure.fn_gg_hist;
  if (rep.failure.welch_log_volume) {
    fa["welch_log_volume"] = {{"t", rep.failure.welch_log_volume->t},
                              {"dof", rep.failure.welch_log_volume->dof},
                              {"p", rep.failure.welch_log_volume->p}};
  } else {
    fa["welch_log_volume"] = nullptr;
  }
  j["failure"] = fa;

  auto pts_json = [](const std::vector<std::pair<double, double>>& pts) {
    json a = json::array();
    for (const auto& [x, y] : pts) a.push_back({x, y});
    return a;
  };
  j["roc_curve"] = pts_json(roc_curve_points(rep.units));
  j["pr_curve"] = pts_json(pr_curve_points(rep.units));

  auto f = open_out(path);
  f << j.dump(2) << "\n";
}

LoadedReport load_report_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::MissingFile, "report not found: " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(Err::SchemaError, "bad report json " + path + ": " + e.what());
  }
  LoadedReport r;
  r.setup = j.value("setup", std::string("?"));
  const json& m = j.at("metrics");
  r.roc = json_opt(m, "roc");
  r.pr = json_opt(m, "pr");
  r.sensitivity = json_opt(m, "sensitivity");
  r.specificity = json_opt(m, "specificity");
  r.npv = json_opt(m, "npv");
  r.overall_dice = json_opt(m, "overall_dice");
  r.lesion_dice = json_opt(m, "lesion_dice");
  for (const auto& p : j.value("roc_curve", json::array()))
    r.roc_points.emplace_back(p[0].get<double>(), p[1].get<double>());
  for (const auto& p : j.value("pr_curve", json::array()))
    r.pr_points.emplace_back(p[0].get<double>(), p[1].get<double>());
  return r;
}

void write_comparison_csv(const std::string& path, const std::vector<LoadedReport>& reports) {
  auto f = open_out(path);
  f << "model,roc,pr,sensitivity,specificity,npv,overall_dice,lesion_dice\n";
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return std::string(buf);
  };
  for (const auto& r : reports) {
    f << r.setup << "," << cell(r.roc) << "," << cell(r.pr) << "," << cell(r.sensitivity)
      << "," << cell(r.specificity) << "," << cell(r.npv) << "," << cell(r.overall_dice)
      << "," << cell(r.lesion_dice) << "\n";
  }
}

}  // namespace fuseseg
