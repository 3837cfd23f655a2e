#include "fuseseg/study.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "fuseseg/nifti.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fuseseg {

namespace {

const std::set<std::string> kManifestKeys = {"study_id", "t2w",       "adc",
                                             "dwi",      "trus",      "gland",
                                             "lesions",  "lesion_gg", "mri_to_trus",
                                             "split"};

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  fs::path q(p);
  if (q.is_absolute()) return q.lexically_normal().string();
  return (base / q).lexically_normal().string();
}

std::string require_string(const json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_string())
    fail(Err::SchemaError, ctx + ": missing or non-string key \"" + key + "\"");
  return j[key].get<std::string>();
}

void check_exists(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) fail(Err::MissingFile, what + " not found: " + path);
}

}  // namespace

std::vector<StudyManifest> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::MissingFile, "manifest not found: " + path);
  json doc;
  try {
    f >> doc;
  } catch (const std::exception& e) {
    fail(Err::SchemaError, "manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!doc.is_array()) fail(Err::SchemaError, "manifest must be a JSON array of studies");

  fs::path base = fs::absolute(fs::path(path)).parent_path();
  std::vector<StudyManifest> out;
  for (const auto& entry : doc) {
    if (!entry.is_object()) fail(Err::SchemaError, "manifest entries must be objects");
    for (auto it = entry.begin(); it != entry.end(); ++it)
      if (!kManifestKeys.count(it.key()))
        fail(Err::SchemaError, "unknown manifest key \"" + it.key() + "\"");

    StudyManifest m;
    m.study_id = require_string(entry, "study_id", "manifest");
    const std::string ctx = "study " + m.study_id;
    m.t2w = resolve(base, require_string(entry, "t2w", ctx));
    m.adc = resolve(base, require_string(entry, "adc", ctx));
    m.dwi = resolve(base, require_string(entry, "dwi", ctx));
    m.trus = resolve(base, require_string(entry, "trus", ctx));
    m.gland = resolve(base, require_string(entry, "gland", ctx));
    m.lesions = resolve(base, require_string(entry, "lesions", ctx));
    m.split = require_string(entry, "split", ctx);
    if (m.split != "train" && m.split != "val" && m.split != "test")
      fail(Err::SchemaError, ctx + ": split must be train|val|test, got \"" + m.split + "\"");

    if (!entry.contains("lesion_gg") || !entry["lesion_gg"].is_object())
      fail(Err::SchemaError, ctx + ": missing lesion_gg object");
    for (auto it = entry["lesion_gg"].begin(); it != entry["lesion_gg"].end(); ++it) {
      int id = 0;
      try {
        id = std::stoi(it.key());
      } catch (...) {
        fail(Err::SchemaError, ctx + ": lesion_gg key is not an integer: " + it.key());
      }
      if (!it.value().is_number_integer())
        fail(Err::SchemaError, ctx + ": lesion_gg values must be integers");
      int gg = it.value().get<int>();
      if (gg < 1 || gg > 5)
        fail(Err::SchemaError, ctx + ": grade group out of range [1,5]: " + std::to_string(gg));
      m.lesion_gg[id] = gg;
    }

    if (entry.contains("mri_to_trus") && !entry["mri_to_trus"].is_null()) {
      if (!entry["mri_to_trus"].is_string())
        fail(Err::SchemaError, ctx + ": mri_to_trus must be a path or null");
      m.mri_to_trus = resolve(base, entry["mri_to_trus"].get<std::string>());
    }

    for (const auto& [p, what] :
         {std::pair{m.t2w, "t2w"}, {m.adc, "adc"}, {m.dwi, "dwi"}, {m.trus, "trus"},
          {m.gland, "gland mask"}, {m.lesions, "lesion labels"}})
      check_exists(p, ctx + " " + what);
    if (!m.mri_to_trus.empty()) check_exists(m.mri_to_trus, ctx + " transform");

    out.push_back(std::move(m));
  }
  return out;
}

void save_manifest(const std::vector<StudyManifest>& studies, const std::string& path) {
  fs::path base = fs::absolute(fs::path(path)).parent_path();
  auto rel = [&base](const std::string& p) -> std::string {
    if (p.empty()) return p;
    std::error_code ec;
    fs::path r = fs::relative(p, base, ec);
    if (ec || r.empty() || r.string().rfind("..", 0) == 0) return p;
    return r.string();
  };

  json doc = json::array();
  for (const auto& m : studies) {
    json e;
    e["study_id"] = m.study_id;
    e["t2w"] = rel(m.t2w);
    e["adc"] = rel(m.adc);
    e["dwi"] = rel(m.dwi);
    e["trus"] = rel(m.trus);
    e["gland"] = rel(m.gland);
    e["lesions"] = rel(m.lesions);
    json gg = json::object();
    for (const auto& [id, g] : m.lesion_gg) gg[std::to_string(id)] = g;
    e["lesion_gg"] = gg;
    if (m.mri_to_trus.empty())
      e["mri_to_trus"] = nullptr;
    else
      e["mri_to_trus"] = rel(m.mri_to_trus);
    e["split"] = m.split;
    doc.push_back(e);
  }
  std::ofstream f(path);
  if (!f) fail(Err::IoError, "cannot open for write: " + path);
  f << doc.dump(2) << "\n";
  if (!f) fail(Err::IoError, "write failed: " + path);
}

MultimodalStudy load_study(const StudyManifest& manifest) {
  MultimodalStudy s;
  s.study_id = manifest.study_id;
  s.split = manifest.split;
  s.lesion_gg = manifest.lesion_gg;

  s.t2w = nifti_read(manifest.t2w);
  s.adc = nifti_read(manifest.adc);
  s.dwi = nifti_read(manifest.dwi);
  s.trus = nifti_read(manifest.trus);
  s.gland_mask = nifti_read(manifest.gland);
  s.lesion_labels = nifti_read(manifest.lesions);
  s.trus.space = SpaceTag::TRUS;
  s.gland_mask.space = SpaceTag::TRUS;
  s.lesion_labels.space = SpaceTag::TRUS;

  if (!manifest.mri_to_trus.empty())
    s.mri_to_trus = Affine3::load_json(manifest.mri_to_trus);

  const std::string ctx = "study " + s.study_id;
  if (!s.gland_mask.same_grid(s.trus) || !s.lesion_labels.same_grid(s.trus))
    fail(Err::GridMismatch, ctx + ": gland mask / lesion labels must share the TRUS grid");

  // MRI sequences are assumed co-registered on one grid per study.
  if (!s.adc.same_grid(s.t2w) || !s.dwi.same_grid(s.t2w))
    fail(Err::GridMismatch, ctx + ": t2w/adc/dwi must share one grid");
  SpaceTag mri_space = s.t2w.same_grid(s.trus) ? SpaceTag::TRUS : SpaceTag::MRI;
  s.t2w.space = s.adc.space = s.dwi.space = mri_space;

  size_t outside = 0;
  for (size_t i = 0; i < s.lesion_labels.data.size(); ++i) {
    float v = s.lesion_labels.data[i];
    if (v < 0 || v != std::floor(v))
      fail(Err::SchemaError, ctx + ": lesion labels must be non-negative integers");
    int id = static_cast<int>(v);
    if (id == 0) continue;
    if (!s.lesion_gg.count(id))
      fail(Err::SchemaError,
           ctx + ": lesion id " + std::to_string(id) + " has no lesion_gg entry");
    if (s.gland_mask.data[i] < 0.5f) ++outside;
  }
  if (outside > 0)
    std::cerr << "warning: " << ctx << ": " << outside
              << " lesion voxel(s) outside the gland mask\n";

  return s;
}

}  // namespace fuseseg
