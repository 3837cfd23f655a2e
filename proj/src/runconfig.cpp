#include "fuseseg/runconfig.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <thread>

#include <json.hpp>

using nlohmann::json;

namespace fuseseg {

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) fail(Err::InvalidConfig, "config section " + section + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      fail(Err::InvalidConfig, "unknown config key \"" + section + "." + it.key() + "\"");
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j[key].get<T>();
}

void get_vec3(const json& j, const char* key, Vec3& out) {
  if (!j.contains(key)) return;
  const auto& a = j[key];
  if (!a.is_array() || a.size() != 3)
    fail(Err::InvalidConfig, std::string("config key ") + key + " must be [x, y, z]");
  out = {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

template <typename T, size_t N>
void get_arr(const json& j, const char* key, T (&out)[N]) {
  if (!j.contains(key)) return;
  const auto& a = j[key];
  if (!a.is_array() || a.size() != N)
    fail(Err::InvalidConfig, std::string("config key ") + key + " must have " +
                                 std::to_string(N) + " entries");
  for (size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const std::exception& e) {
    fail(Err::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, {"jobs", "phantom", "preprocess", "register", "unet", "train", "infer",
                   "evaluate"},
             "(top level)");

  RunConfig cfg;
  get(doc, "jobs", cfg.jobs);

  if (doc.contains("phantom")) {
    const json& p = doc["phantom"];
    check_keys(p,
               {"seed", "n_studies", "n_train", "n_val", "n_test", "trus_dims",
                "trus_spacing", "mri_spacing", "gland_semiaxes_min", "gland_semiaxes_max",
                "gland_wobble", "lesions_min", "lesions_max", "lesion_radius_min_mm",
                "lesion_radius_max_mm", "vis_mri_only", "vis_trus_only", "vis_both",
                "contrast_t2w", "contrast_adc", "contrast_dwi", "contrast_trus",
                "contrast_floor", "contrast_full_radius_mm", "noise_sd", "speckle_sd",
                "max_rotation_deg", "max_translation_mm"},
               "phantom");
    auto& c = cfg.phantom;
    get(p, "seed", c.seed);
    get(p, "n_studies", c.n_studies);
    get(p, "n_train", c.n_train);
    get(p, "n_val", c.n_val);
    get(p, "n_test", c.n_test);
    get_arr(p, "trus_dims", c.trus_dims);
    get_vec3(p, "trus_spacing", c.trus_spacing);
    get_vec3(p, "mri_spacing", c.mri_spacing);
    get_arr(p, "gland_semiaxes_min", c.gland_semiaxes_min);
    get_arr(p, "gland_semiaxes_max", c.gland_semiaxes_max);
    get(p, "gland_wobble", c.gland_wobble);
    get(p, "lesions_min", c.lesions_min);
    get(p, "lesions_max", c.lesions_max);
    get(p, "lesion_radius_min_mm", c.lesion_radius_min_mm);
    get(p, "lesion_radius_max_mm", c.lesion_radius_max_mm);
    get(p, "vis_mri_only", c.vis_mri_only);
    get(p, "vis_trus_only", c.vis_trus_only);
    get(p, "vis_both", c.vis_both);
    get(p, "contrast_t2w", c.contrast_t2w);
    get(p, "contrast_adc", c.contrast_adc);
    get(p, "contrast_dwi", c.contrast_dwi);
    get(p, "contrast_trus", c.contrast_trus);
    get(p, "contrast_floor", c.contrast_floor);
    get(p, "contrast_full_radius_mm", c.contrast_full_radius_mm);
    get(p, "noise_sd", c.noise_sd);
    get(p, "speckle_sd", c.speckle_sd);
    get(p, "max_rotation_deg", c.max_rotation_deg);
    get(p, "max_translation_mm", c.max_translation_mm);
  }

  if (doc.contains("preprocess")) {
    const json& p = doc["preprocess"];
    check_keys(p, {"mri_spacing", "trus_spacing", "crop_extent_mm", "pad_value"}, "preprocess");
    get_vec3(p, "mri_spacing", cfg.preprocess.mri_spacing);
    get_vec3(p, "trus_spacing", cfg.preprocess.trus_spacing);
    get_arr(p, "crop_extent_mm", cfg.preprocess.crop_extent_mm);
    get(p, "pad_value", cfg.preprocess.pad_value);
  }

  if (doc.contains("register")) {
    const json& p = doc["register"];
    check_keys(p,
               {"pyramid_levels", "metric", "max_iters", "step_rotation", "step_translation",
                "step_scale", "step_shear", "convergence_tol"},
               "register");
    auto& c = cfg.registration;
    get(p, "pyramid_levels", c.pyramid_levels);
    if (p.contains("metric")) {
      std::string m = p["metric"].get<std::string>();
      if (m == "ncc")
        c.metric = RegMetric::NCC;
      else if (m == "mse")
        c.metric = RegMetric::MSE;
      else
        fail(Err::InvalidConfig, "register.metric must be \"ncc\" or \"mse\"");
    }
    get(p, "max_iters", c.max_iters);
    get(p, "step_rotation", c.step_rotation);
    get(p, "step_translation", c.step_translation);
    get(p, "step_scale", c.step_scale);
    get(p, "step_shear", c.step_shear);
    get(p, "convergence_tol", c.convergence_tol);
  }

  if (doc.contains("unet")) {
    const json& p = doc["unet"];
    check_keys(p, {"stages", "base_channels", "max_channels", "leaky_slope"}, "unet");
    get(p, "stages", cfg.unet.stages);
    get(p, "base_channels", cfg.unet.base_channels);
    get(p, "max_channels", cfg.unet.max_channels);
    get(p, "leaky_slope", cfg.unet.leaky_slope);
  }

  if (doc.contains("train")) {
    const json& p = doc["train"];
    check_keys(p,
               {"setup", "patch", "batch_size", "fg_oversample", "epochs", "steps_per_epoch",
                "seed", "flip_x", "flip_y", "flip_z", "lr", "dice_smooth"},
               "train");
    auto& c = cfg.train;
    if (p.contains("setup")) c.setup = setup_from_name(p["setup"].get<std::string>());
    get_arr(p, "patch", c.patch);
    get(p, "batch_size", c.batch_size);
    get(p, "fg_oversample", c.fg_oversample);
    get(p, "epochs", c.epochs);
    get(p, "steps_per_epoch", c.steps_per_epoch);
    get(p, "seed", c.seed);
    get(p, "flip_x", c.flip_x);
    get(p, "flip_y", c.flip_y);
    get(p, "flip_z", c.flip_z);
    get(p, "lr", c.adam.lr);
    get(p, "dice_smooth", c.dice_smooth);
  }

  if (doc.contains("infer")) {
    const json& p = doc["infer"];
    check_keys(p, {"patch", "overlap", "sigma_divisor", "thresholds"}, "infer");
    get_arr(p, "patch", cfg.infer.patch);
    get(p, "overlap", cfg.infer.overlap);
    get(p, "sigma_divisor", cfg.infer.sigma_divisor);
    get_arr(p, "thresholds", cfg.infer.thresholds);
  }

  if (doc.contains("evaluate")) {
    const json& p = doc["evaluate"];
    check_keys(p, {"threshold", "min_dice", "connectivity", "bootstrap_seed"}, "evaluate");
    get(p, "threshold", cfg.evaluate.threshold);
    get(p, "min_dice", cfg.evaluate.min_dice);
    get(p, "connectivity", cfg.evaluate.connectivity);
    get(p, "bootstrap_seed", cfg.evaluate.bootstrap_seed);
  }

  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::MissingFile, "config not found: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

std::string RunConfig::to_json(int indent) const {
  json doc;
  doc["jobs"] = jobs;
  doc["phantom"] = {
      {"seed", phantom.seed},
      {"n_studies", phantom.n_studies},
      {"n_train", phantom.n_train},
      {"n_val", phantom.n_val},
      {"n_test", phantom.n_test},
      {"trus_dims", phantom.trus_dims},
      {"trus_spacing", {phantom.trus_spacing.x, phantom.trus_spacing.y, phantom.trus_spacing.z}},
      {"mri_spacing", {phantom.mri_spacing.x, phantom.mri_spacing.y, phantom.mri_spacing.z}},
      {"gland_semiaxes_min", phantom.gland_semiaxes_min},
      {"gland_semiaxes_max", phantom.gland_semiaxes_max},
      {"gland_wobble", phantom.gland_wobble},
      {"lesions_min", phantom.lesions_min},
      {"lesions_max", phantom.lesions_max},
      {"lesion_radius_min_mm", phantom.lesion_radius_min_mm},
      {"lesion_radius_max_mm", phantom.lesion_radius_max_mm},
      {"vis_mri_only", phantom.vis_mri_only},
      {"vis_trus_only", phantom.vis_trus_only},
      {"vis_both", phantom.vis_both},
      {"contrast_t2w", phantom.contrast_t2w},
      {"contrast_adc", phantom.contrast_adc},
      {"contrast_dwi", phantom.contrast_dwi},
      {"contrast_trus", phantom.contrast_trus},
      {"contrast_floor", phantom.contrast_floor},
      {"contrast_full_radius_mm", phantom.contrast_full_radius_mm},
      {"noise_sd", phantom.noise_sd},
      {"speckle_sd", phantom.speckle_sd},
      {"max_rotation_deg", phantom.max_rotation_deg},
      {"max_translation_mm", phantom.max_translation_mm}};
  doc["preprocess"] = {
      {"mri_spacing",
       {preprocess.mri_spacing.x, preprocess.mri_spacing.y, preprocess.mri_spacing.z}},
      {"trus_spacing",
       {preprocess.trus_spacing.x, preprocess.trus_spacing.y, preprocess.trus_spacing.z}},
      {"crop_extent_mm", preprocess.crop_extent_mm},
      {"pad_value", preprocess.pad_value}};
  doc["register"] = {{"pyramid_levels", registration.pyramid_levels},
                     {"metric", registration.metric == RegMetric::NCC ? "ncc" : "mse"},
                     {"max_iters", registration.max_iters},
                     {"step_rotation", registration.step_rotation},
                     {"step_translation", registration.step_translation},
                     {"step_scale", registration.step_scale},
                     {"step_shear", registration.step_shear},
                     {"convergence_tol", registration.convergence_tol}};
  doc["unet"] = {{"stages", unet.stages},
                 {"base_channels", unet.base_channels},
                 {"max_channels", unet.max_channels},
                 {"leaky_slope", unet.leaky_slope}};
  doc["train"] = {{"setup", setup_name(train.setup)},
                  {"patch", train.patch},
                  {"batch_size", train.batch_size},
                  {"fg_oversample", train.fg_oversample},
                  {"epochs", train.epochs},
                  {"steps_per_epoch", train.steps_per_epoch},
                  {"seed", train.seed},
                  {"flip_x", train.flip_x},
                  {"flip_y", train.flip_y},
                  {"flip_z", train.flip_z},
                  {"lr", train.adam.lr},
                  {"dice_smooth", train.dice_smooth}};
  doc["infer"] = {{"patch", infer.patch},
                  {"overlap", infer.overlap},
                  {"sigma_divisor", infer.sigma_divisor},
                  {"thresholds", infer.thresholds}};
  doc["evaluate"] = {{"threshold", evaluate.threshold},
                     {"min_dice", evaluate.min_dice},
                     {"connectivity", evaluate.connectivity},
                     {"bootstrap_seed", evaluate.bootstrap_seed}};
  return doc.dump(indent);
}

int RunConfig::effective_jobs() const {
  if (jobs > 0) return jobs;
  unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 8u));
}

}  // namespace fuseseg
