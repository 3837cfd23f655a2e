#include "fuseseg/commands.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "fuseseg/nifti.hpp"
#include "fuseseg/phantom.hpp"
#include "fuseseg/pipeline.hpp"
#include "fuseseg/registration.hpp"
#include "fuseseg/reportio.hpp"
#include "fuseseg/runconfig.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fuseseg {

namespace {

void prepare_out(const std::string& dir, bool force) {
  fs::path p(dir);
  if (fs::exists(p) && !fs::is_empty(p) && !force)
    fail(Err::InvalidConfig, "output directory not empty: " + dir + " (use --force)");
  fs::create_directories(p);
}

void write_lock(const RunConfig& cfg, const std::string& out_dir, const std::string& command,
                const json& extra = json::object()) {
  json j = json::parse(cfg.to_json());
  j["command"] = command;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream f(fs::path(out_dir) / "config.lock.json");
  if (!f) fail(Err::IoError, "cannot write config.lock.json under " + out_dir);
  f << j.dump(2) << "\n";
}

void parallel_for_n(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mtx;
  std::exception_ptr first_err;
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mtx);
          if (!first_err) first_err = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_err) std::rethrow_exception(first_err);
}

std::vector<StudyManifest> manifest_split(const std::vector<StudyManifest>& all,
                                          const std::string& split) {
  if (split == "all") return all;
  std::vector<StudyManifest> out;
  for (const auto& m : all)
    if (m.split == split) out.push_back(m);
  if (out.empty()) fail(Err::SchemaError, "no studies with split \"" + split + "\"");
  return out;
}

Setup setup_for_model(const UNetModel& model) {
  switch (model.config.in_channels) {
    case 1: return Setup::TrusOnly;
    case 3: return Setup::MriOnly;
    case 4: return Setup::Multimodal;
  }
  fail(Err::InvalidConfig, "checkpoint has unsupported in_channels " +
                               std::to_string(model.config.in_channels));
}

int run_phantom(RunConfig cfg, const std::string& out, bool force) {
  prepare_out(out, force);
  auto cohort = generate_cohort(cfg.phantom);
  write_cohort(cohort, out);
  write_lock(cfg, out, "phantom");
  int lesions = 0;
  for (const auto& s : cohort) lesions += static_cast<int>(s.lesions.size());
  std::cout << "phantom: wrote " << cohort.size() << " studies (" << lesions << " lesions) to "
            << out << "\n";
  return 0;
}

int run_register(RunConfig cfg, const std::string& manifest_path, const std::string& out,
                 bool force) {
  prepare_out(out, force);
  auto manifest = load_manifest(manifest_path);
  fs::create_directories(fs::path(out) / "transforms");

  std::vector<StudyManifest> updated = manifest;
  parallel_for_n(static_cast<int>(manifest.size()), cfg.effective_jobs(), [&](int i) {
    const auto& m = manifest[static_cast<size_t>(i)];
    Volume moving = nifti_read(m.t2w);
    Volume fixed = nifti_read(m.trus);
    Affine3 t = register_affine(moving, fixed, cfg.registration);
    std::string tpath = (fs::path(out) / "transforms" / (m.study_id + ".json")).string();
    t.save_json(tpath);
    updated[static_cast<size_t>(i)].mri_to_trus = tpath;
  });
  save_manifest(updated, (fs::path(out) / "manifest.json").string());
  write_lock(cfg, out, "register");
  std::cout << "register: " << manifest.size() << " transforms under " << out << "\n";
  return 0;
}

struct PreprocessedPaths {
  StudyManifest trus_space;  // channels on the TRUS grid
  StudyManifest mri_space;   // channels on the MRI grid
};

int run_preprocess(RunConfig cfg, const std::string& manifest_path, const std::string& out,
                   const std::string& transforms_dir, bool use_gt, bool force) {
  prepare_out(out, force);
  auto manifest = load_manifest(manifest_path);
  std::vector<PreprocessedPaths> results(manifest.size());

  parallel_for_n(static_cast<int>(manifest.size()), cfg.effective_jobs(), [&](int i) {
    const auto& m = manifest[static_cast<size_t>(i)];
    MultimodalStudy s = load_study(m);

    Affine3 t;
    if (!transforms_dir.empty()) {
      fs::path tp = fs::path(transforms_dir) / (m.study_id + ".json");
      if (!fs::exists(tp)) tp = fs::path(transforms_dir) / "transforms" / (m.study_id + ".json");
      t = Affine3::load_json(tp.string());
    } else if (s.mri_to_trus) {
      t = *s.mri_to_trus;
    } else if (use_gt) {
      fs::path gp = fs::path(m.trus).parent_path() / "gt_transform.json";
      if (!fs::exists(gp)) fail(Err::NotAPhantom, "no gt_transform.json for " + m.study_id);
      t = Affine3::load_json(gp.string());
    } else {
      fail(Err::InvalidConfig,
           "no MRI->TRUS transform for " + m.study_id +
               ": pass --transforms DIR (from the register step), set mri_to_trus in the "
               "manifest, or use --use-gt-transforms on phantom data");
    }

    const auto& pc = cfg.preprocess;
    Volume trus_c = center_crop_pad(resample_volume(s.trus, pc.trus_spacing,
                                                    InterpKind::CubicBSpline),
                                    pc.crop_extent_mm[0], pc.crop_extent_mm[1], pc.pad_value);
    Volume gland_c = center_crop_pad(
        resample_volume(s.gland_mask, pc.trus_spacing, InterpKind::Nearest),
        pc.crop_extent_mm[0], pc.crop_extent_mm[1], 0.0f);
    Volume labels_c = center_crop_pad(
        resample_volume(s.lesion_labels, pc.trus_spacing, InterpKind::Nearest),
        pc.crop_extent_mm[0], pc.crop_extent_mm[1], 0.0f);

    auto prep_mri = [&](const Volume& v) {
      return center_crop_pad(resample_volume(v, pc.mri_spacing, InterpKind::CubicBSpline),
                             pc.crop_extent_mm[0], pc.crop_extent_mm[1], pc.pad_value);
    };
    Volume t2w_c = prep_mri(s.t2w), adc_c = prep_mri(s.adc), dwi_c = prep_mri(s.dwi);

    // Gland carried into MRI space for the MRI-route normalization.
    Volume gland_mri = apply_transform(gland_c, t.inverse(), t2w_c, InterpKind::Nearest);

    auto to_trus = [&](const Volume& v) {
      return apply_transform(v, t, trus_c, InterpKind::CubicBSpline);
    };

    fs::path sdir = fs::path(out) / m.study_id;
    fs::create_directories(sdir / "mri");
    auto put = [](const Volume& v, const fs::path& p) {
      nifti_write(v, p.string());
      return p.string();
    };

    PreprocessedPaths& r = results[static_cast<size_t>(i)];
    StudyManifest base;
    base.study_id = m.study_id;
    base.split = m.split;
    base.lesion_gg = m.lesion_gg;
    base.trus = put(zscore_normalize(trus_c, gland_c), sdir / "trus.nii");
    base.gland = put(gland_c, sdir / "gland.nii");
    base.lesions = put(labels_c, sdir / "lesions.nii");
    t.save_json((sdir / "transform.json").string());
    base.mri_to_trus = (sdir / "transform.json").string();

    r.trus_space = base;
    r.trus_space.t2w = put(zscore_normalize(to_trus(t2w_c), gland_c), sdir / "t2w.nii");
    r.trus_space.adc = put(zscore_normalize(to_trus(adc_c), gland_c), sdir / "adc.nii");
    r.trus_space.dwi = put(zscore_normalize(to_trus(dwi_c), gland_c), sdir / "dwi.nii");

    r.mri_space = base;
    r.mri_space.t2w = put(zscore_normalize(t2w_c, gland_mri), sdir / "mri" / "t2w.nii");
    r.mri_space.adc = put(zscore_normalize(adc_c, gland_mri), sdir / "mri" / "adc.nii");
    r.mri_space.dwi = put(zscore_normalize(dwi_c, gland_mri), sdir / "mri" / "dwi.nii");
  });

  std::vector<StudyManifest> trus_manifest, mri_manifest;
  for (auto& r : results) {
    trus_manifest.push_back(r.trus_space);
    mri_manifest.push_back(r.mri_space);
  }
  save_manifest(trus_manifest, (fs::path(out) / "manifest.json").string());
  save_manifest(mri_manifest, (fs::path(out) / "manifest_mri.json").string());
  write_lock(cfg, out, "preprocess");
  std::cout << "preprocess: " << manifest.size() << " studies under " << out << "\n";
  return 0;
}

int run_train(RunConfig cfg, const std::string& manifest_path, const std::string& out,
              bool force) {
  prepare_out(out, force);
  auto manifest = manifest_split(load_manifest(manifest_path), "train");

  std::vector<PreparedStudy> prepared(manifest.size());
  parallel_for_n(static_cast<int>(manifest.size()), cfg.effective_jobs(), [&](int i) {
    prepared[static_cast<size_t>(i)] =
        prepare_study(load_study(manifest[static_cast<size_t>(i)]), cfg.train.setup);
  });

  UNetConfig ucfg = cfg.unet;
  ucfg.in_channels = setup_channels(cfg.train.setup);
  UNetModel model = build_unet(ucfg, cfg.train.seed);

  TrainResult result = train(prepared, model, cfg.train, (fs::path(out) / "checkpoints").string());
  write_loss_history_csv((fs::path(out) / "loss.csv").string(), result);
  write_lock(cfg, out, "train",
             {{"setup", setup_name(cfg.train.setup)}, {"manifest", manifest_path}});
  std::cout << "train[" << setup_name(cfg.train.setup) << "]: " << result.history.size()
            << " steps, final loss "
            << (result.history.empty() ? 0.0 : result.history.back().total) << ", model in "
            << out << "/checkpoints/final.ckpt\n";
  return 0;
}

int run_infer(RunConfig cfg, const std::string& manifest_path, const std::string& ckpt,
              const std::string& split, const std::string& out, bool force) {
  prepare_out(out, force);
  UNetModel model = load_checkpoint(ckpt);
  Setup setup = setup_for_model(model);
  auto manifest = manifest_split(load_manifest(manifest_path), split);

  parallel_for_n(static_cast<int>(manifest.size()), cfg.effective_jobs(), [&](int i) {
    const auto& m = manifest[static_cast<size_t>(i)];
    MultimodalStudy s = load_study(m);
    auto channels = assemble_input(s, setup);
    auto probs = sliding_window_infer(model, channels, cfg.infer);

    fs::path sdir = fs::path(out) / m.study_id;
    fs::create_directories(sdir);
    const char* names[3] = {"prob_gland.nii", "prob_any_cancer.nii", "prob_cspca.nii"};
    for (int h = 0; h < 3; ++h) nifti_write(probs[static_cast<size_t>(h)],
                                            (sdir / names[h]).string());

    if (!channels[0].same_grid(s.trus)) {
      if (!s.mri_to_trus)
        fail(Err::GridMismatch,
             "infer: study " + m.study_id + " needs mri_to_trus to project predictions");
      const char* tnames[3] = {"prob_gland_trus.nii", "prob_any_cancer_trus.nii",
                               "prob_cspca_trus.nii"};
      for (int h = 0; h < 3; ++h) {
        Volume proj = project_prediction(probs[static_cast<size_t>(h)], *s.mri_to_trus, s.trus);
        nifti_write(proj, (sdir / tnames[h]).string());
      }
    }
  });
  write_lock(cfg, out, "infer",
             {{"checkpoint", ckpt}, {"split", split}, {"setup", setup_name(setup)}});
  std::cout << "infer[" << setup_name(setup) << "]: " << manifest.size() << " studies under "
            << out << "\n";
  return 0;
}

int run_evaluate(RunConfig cfg, const std::string& manifest_path, const std::string& pred_dir,
                 const std::string& split, const std::string& out, bool force,
                 const std::string& setup_label) {
  prepare_out(out, force);
  auto manifest = manifest_split(load_manifest(manifest_path), split);

  std::vector<CaseMetrics> cases(manifest.size());
  parallel_for_n(static_cast<int>(manifest.size()), cfg.effective_jobs(), [&](int i) {
    const auto& m = manifest[static_cast<size_t>(i)];
    MultimodalStudy s = load_study(m);
    fs::path sdir = fs::path(pred_dir) / m.study_id;
    fs::path prob_path = sdir / "prob_cspca_trus.nii";
    if (!fs::exists(prob_path)) prob_path = sdir / "prob_cspca.nii";
    if (!fs::exists(prob_path))
      fail(Err::MissingFile, "no prob_cspca prediction for " + m.study_id + " under " +
                                 pred_dir);
    Volume prob = nifti_read(prob_path.string());
    if (!prob.same_grid(s.trus))
      fail(Err::GridMismatch, "evaluate: prediction for " + m.study_id +
                                  " is not on the TRUS grid (missing projection?)");
    cases[static_cast<size_t>(i)] =
        evaluate_case(m.study_id, s.lesion_labels, s.lesion_gg, s.gland_mask, prob,
                      cfg.evaluate.threshold, cfg.evaluate.min_dice,
                      cfg.evaluate.connectivity);
  });

  CohortReport rep = aggregate_report(cases, cfg.evaluate.bootstrap_seed);
  write_report_json((fs::path(out) / "report.json").string(), rep, setup_label,
                    cfg.evaluate.threshold);
  write_case_csv((fs::path(out) / "per_case.csv").string(), rep.cases);
  write_lesion_table_csv((fs::path(out) / "lesions.csv").string(), rep.lesion_rows);
  auto roc_pts = roc_curve_points(rep.units);
  auto pr_pts = pr_curve_points(rep.units);
  write_curve_csv((fs::path(out) / "roc.csv").string(), "fpr", "tpr", roc_pts);
  write_curve_csv((fs::path(out) / "pr.csv").string(), "recall", "precision", pr_pts);
  write_curve_svg((fs::path(out) / "roc.svg").string(), "ROC (lesion/sextant level)",
                  "false positive rate", "true positive rate", {{setup_label, roc_pts}});
  write_curve_svg((fs::path(out) / "pr.svg").string(), "Precision-Recall", "recall",
                  "precision", {{setup_label, pr_pts}});
  write_lock(cfg, out, "evaluate",
             {{"pred", pred_dir}, {"split", split}, {"setup", setup_label}});

  auto show = [](const std::optional<double>& v) { return v ? *v : -1.0; };
  std::cout << "evaluate[" << setup_label << "]: cases=" << rep.n_cases
            << " sens=" << show(rep.sensitivity) << " spec=" << show(rep.specificity)
            << " npv=" << show(rep.npv) << " roc=" << show(rep.roc) << " pr=" << show(rep.pr)
            << " overall_dice=" << show(rep.overall_dice)
            << " lesion_dice=" << show(rep.lesion_dice) << "\n";
  return 0;
}

int run_report(const RunConfig& cfg, const std::vector<std::string>& inputs,
               const std::string& out, bool force) {
  prepare_out(out, force);
  std::vector<LoadedReport> reports;
  for (const auto& spec : inputs) {
    auto eq = spec.find('=');
    LoadedReport r = load_report_json(eq == std::string::npos ? spec : spec.substr(eq + 1));
    if (eq != std::string::npos) r.setup = spec.substr(0, eq);
    reports.push_back(std::move(r));
  }
  write_comparison_csv((fs::path(out) / "comparison.csv").string(), reports);
  std::vector<CurveSeries> roc_series, pr_series;
  for (const auto& r : reports) {
    roc_series.push_back({r.setup, r.roc_points});
    pr_series.push_back({r.setup, r.pr_points});
  }
  write_curve_svg((fs::path(out) / "roc_overlay.svg").string(), "ROC by model",
                  "false positive rate", "true positive rate", roc_series);
  write_curve_svg((fs::path(out) / "pr_overlay.svg").string(), "Precision-Recall by model",
                  "recall", "precision", pr_series);
  json extra;
  extra["inputs"] = inputs;
  write_lock(cfg, out, "report", extra);
  std::cout << "report: " << reports.size() << " models compared under " << out << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  init_compute_env();
  set_blas_threads(1);

  CLI::App app{"fuseseg: multimodal MRI/TRUS prostate lesion segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir, transforms_dir, checkpoint, pred_dir;
  std::string split = "test", setup_str, setup_label = "model";
  std::vector<std::string> report_inputs;
  bool force = false, use_gt = false;
  int jobs = 0;
  std::optional<uint64_t> seed;
  std::optional<double> threshold;

  auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
    cmd->add_option("--config", config_path, "JSON config file (defaults when omitted)");
    if (needs_out) cmd->add_option("--out", out_dir, "output directory")->required();
    cmd->add_flag("--force", force, "allow writing into a non-empty output directory");
    cmd->add_option("--jobs", jobs, "worker threads across studies (0 = auto)");
    cmd->add_option("--seed", seed, "override phantom/train seed");
  };

  CLI::App* c_phantom = app.add_subcommand("phantom", "generate a synthetic cohort");
  add_common(c_phantom);

  CLI::App* c_register = app.add_subcommand("register", "affine-register MRI to TRUS space");
  add_common(c_register);
  c_register->add_option("--manifest", manifest_path, "cohort manifest")->required();

  CLI::App* c_pre = app.add_subcommand("preprocess", "resample, crop, project, normalize");
  add_common(c_pre);
  c_pre->add_option("--manifest", manifest_path, "cohort manifest")->required();
  c_pre->add_option("--transforms", transforms_dir, "directory from the register step");
  c_pre->add_flag("--use-gt-transforms", use_gt, "use phantom ground-truth transforms");

  CLI::App* c_train = app.add_subcommand("train", "train a segmentation model");
  add_common(c_train);
  c_train->add_option("--manifest", manifest_path, "preprocessed manifest")->required();
  c_train->add_option("--setup", setup_str, "trus | mri | multimodal");

  CLI::App* c_infer = app.add_subcommand("infer", "sliding-window whole-volume inference");
  add_common(c_infer);
  c_infer->add_option("--manifest", manifest_path, "preprocessed manifest")->required();
  c_infer->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  c_infer->add_option("--split", split, "train | val | test | all");

  CLI::App* c_eval = app.add_subcommand("evaluate", "lesion-level evaluation");
  add_common(c_eval);
  c_eval->add_option("--manifest", manifest_path, "preprocessed manifest")->required();
  c_eval->add_option("--pred", pred_dir, "directory from the infer step")->required();
  c_eval->add_option("--split", split, "train | val | test | all");
  c_eval->add_option("--threshold", threshold, "binarization threshold");
  c_eval->add_option("--label", setup_label, "model label written into the report");

  CLI::App* c_report = app.add_subcommand("report", "compare evaluation reports");
  add_common(c_report);
  c_report->add_option("--in", report_inputs, "label=report.json (repeatable)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (jobs > 0) cfg.jobs = jobs;
    if (seed) {
      cfg.phantom.seed = *seed;
      cfg.train.seed = *seed;
    }
    if (threshold) cfg.evaluate.threshold = static_cast<float>(*threshold);
    if (!setup_str.empty()) cfg.train.setup = setup_from_name(setup_str);

    if (c_phantom->parsed()) return run_phantom(cfg, out_dir, force);
    if (c_register->parsed()) return run_register(cfg, manifest_path, out_dir, force);
    if (c_pre->parsed())
      return run_preprocess(cfg, manifest_path, out_dir, transforms_dir, use_gt, force);
    if (c_train->parsed()) return run_train(cfg, manifest_path, out_dir, force);
    if (c_infer->parsed())
      return run_infer(cfg, manifest_path, checkpoint, split, out_dir, force);
    if (c_eval->parsed())
      return run_evaluate(cfg, manifest_path, pred_dir, split, out_dir, force, setup_label);
    if (c_report->parsed()) return run_report(cfg, report_inputs, out_dir, force);
    return 1;
  } catch (const Error& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << "\n";
    return is_validation_error(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace fuseseg
