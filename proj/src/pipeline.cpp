#include "fuseseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fuseseg/registration.hpp"

namespace fs = std::filesystem;

namespace fuseseg {

int setup_channels(Setup s) {
  switch (s) {
    case Setup::TrusOnly: return 1;
    case Setup::MriOnly: return 3;
    case Setup::Multimodal: return 4;
  }
  return 0;
}

const char* setup_name(Setup s) {
  switch (s) {
    case Setup::TrusOnly: return "trus";
    case Setup::MriOnly: return "mri";
    case Setup::Multimodal: return "multimodal";
  }
  return "?";
}

Setup setup_from_name(const std::string& name) {
  if (name == "trus") return Setup::TrusOnly;
  if (name == "mri") return Setup::MriOnly;
  if (name == "multimodal") return Setup::Multimodal;
  fail(Err::InvalidConfig, "unknown setup \"" + name + "\" (trus|mri|multimodal)");
}

void TrainConfig::validate(int downsample_factor) const {
  for (int i = 0; i < 3; ++i) {
    if (patch[i] < downsample_factor || patch[i] % downsample_factor)
      fail(Err::InvalidConfig, "train: patch dims must be divisible by " +
                                   std::to_string(downsample_factor));
  }
  if (batch_size < 1 || epochs < 1 || steps_per_epoch < 1)
    fail(Err::InvalidConfig, "train: counts must be positive");
  if (fg_oversample < 0.0 || fg_oversample > 1.0)
    fail(Err::InvalidConfig, "train: fg_oversample must be in [0,1]");
}

void InferenceConfig::validate() const {
  if (overlap < 0.0 || overlap > 0.9)
    fail(Err::InvalidConfig, "infer: overlap must be in [0, 0.9]");
  for (int i = 0; i < 3; ++i)
    if (patch[i] < 1) fail(Err::InvalidConfig, "infer: bad patch");
}

std::vector<Volume> assemble_input(const MultimodalStudy& study, Setup setup) {
  std::vector<Volume> channels;
  switch (setup) {
    case Setup::TrusOnly:
      channels = {study.trus};
      break;
    case Setup::MriOnly:
      channels = {study.t2w, study.adc, study.dwi};
      break;
    case Setup::Multimodal:
      channels = {study.trus, study.t2w, study.adc, study.dwi};
      break;
  }
  for (size_t i = 1; i < channels.size(); ++i)
    if (!channels[i].same_grid(channels[0]))
      fail(Err::GridMismatch, "assemble_input(" + std::string(setup_name(setup)) +
                                  "): channel grids differ for study " + study.study_id);
  return channels;
}

PreparedStudy prepare_study(const MultimodalStudy& study, Setup setup) {
  PreparedStudy ps;
  ps.study_id = study.study_id;
  ps.split = study.split;
  ps.channels = assemble_input(study, setup);

  Volume gland = study.gland_mask;
  Volume labels = study.lesion_labels;
  if (setup == Setup::MriOnly && !ps.channels[0].same_grid(study.trus)) {
    if (!study.mri_to_trus)
      fail(Err::GridMismatch,
           "prepare_study: MriOnly needs mri_to_trus to project targets for study " +
               study.study_id);
    Affine3 trus_to_mri = study.mri_to_trus->inverse();
    gland = apply_transform(study.gland_mask, trus_to_mri, ps.channels[0], InterpKind::Nearest);
    labels = apply_transform(study.lesion_labels, trus_to_mri, ps.channels[0],
                             InterpKind::Nearest);
  }
  if (!gland.same_grid(ps.channels[0]))
    fail(Err::GridMismatch, "prepare_study: targets not on the channel grid");

  const Volume& grid = ps.channels[0];
  for (auto& t : ps.targets)
    t = Volume::create(grid.nx, grid.ny, grid.nz, grid.spacing, grid.origin, grid.space);
  for (size_t i = 0; i < gland.data.size(); ++i) {
    int id = static_cast<int>(labels.data[i]);
    bool is_gland = gland.data[i] >= 0.5f;
    int gg = 0;
    if (id > 0) {
      auto it = study.lesion_gg.find(id);
      gg = it == study.lesion_gg.end() ? 1 : it->second;
    }
    if (is_gland) {
      ps.targets[0].data[i] = 1.0f;
      ps.fg_gland.push_back(static_cast<int64_t>(i));
    }
    if (gg >= 1) {
      ps.targets[1].data[i] = 1.0f;
      ps.fg_any.push_back(static_cast<int64_t>(i));
    }
    if (gg >= 2) {
      ps.targets[2].data[i] = 1.0f;
      ps.fg_cspca.push_back(static_cast<int64_t>(i));
    }
  }
  return ps;
}

namespace {

// Copies a patch window (zero-padded outside the volume) into sample b,
// channel c of a channels-last tensor.
void fill_patch(nn::Tensor5& t, int b, int c, const Volume& vol, int sx, int sy, int sz) {
  const int pd = t.shape.d, ph = t.shape.h, pw = t.shape.w, C = t.shape.c;
  for (int dz = 0; dz < pd; ++dz) {
    int vz = sz + dz;
    for (int dy = 0; dy < ph; ++dy) {
      int vy = sy + dy;
      float* dst = &t.data[t.idx(b, c, dz, dy, 0)];
      if (vz < 0 || vz >= vol.nz || vy < 0 || vy >= vol.ny) {
        for (int dx = 0; dx < pw; ++dx) dst[static_cast<size_t>(dx) * C] = 0.0f;
        continue;
      }
      const float* src = &vol.data[vol.index(0, vy, vz)];
      for (int dx = 0; dx < pw; ++dx) {
        int vx = sx + dx;
        dst[static_cast<size_t>(dx) * C] =
            (vx >= 0 && vx < vol.nx) ? src[vx] : 0.0f;
      }
    }
  }
}

}  // namespace

PatchBatch sample_patches(const PreparedStudy& study, const TrainConfig& cfg, Rng& rng) {
  const Volume& grid = study.grid();
  if (grid.size() == 0) fail(Err::EmptyVolume, "sample_patches: empty study volume");
  const int pd = cfg.patch[0], ph = cfg.patch[1], pw = cfg.patch[2];
  const int C = static_cast<int>(study.channels.size());

  PatchBatch batch;
  batch.input = nn::Tensor5::zeros({cfg.batch_size, C, pd, ph, pw});
  for (auto& t : batch.targets) t = nn::Tensor5::zeros({cfg.batch_size, 1, pd, ph, pw});

  for (int b = 0; b < cfg.batch_size; ++b) {
    int cx, cy, cz;
    bool fg = rng.uniform() < cfg.fg_oversample;
    const std::vector<int64_t>* pool = nullptr;
    if (fg) {
      pool = !study.fg_cspca.empty()  ? &study.fg_cspca
             : !study.fg_any.empty()  ? &study.fg_any
             : !study.fg_gland.empty() ? &study.fg_gland
                                        : nullptr;
    }
    if (pool) {
      int64_t flat = (*pool)[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(pool->size()) - 1))];
      cx = static_cast<int>(flat % grid.nx);
      cy = static_cast<int>((flat / grid.nx) % grid.ny);
      cz = static_cast<int>(flat / (static_cast<int64_t>(grid.nx) * grid.ny));
    } else {
      cx = static_cast<int>(rng.uniform_int(0, grid.nx - 1));
      cy = static_cast<int>(rng.uniform_int(0, grid.ny - 1));
      cz = static_cast<int>(rng.uniform_int(0, grid.nz - 1));
    }
    batch.centers.push_back({cx, cy, cz});

    int sx = std::clamp(cx - pw / 2, 0, std::max(grid.nx - pw, 0));
    int sy = std::clamp(cy - ph / 2, 0, std::max(grid.ny - ph, 0));
    int sz = std::clamp(cz - pd / 2, 0, std::max(grid.nz - pd, 0));

    for (int c = 0; c < C; ++c) fill_patch(batch.input, b, c, study.channels[c], sx, sy, sz);
    for (int t = 0; t < 3; ++t) fill_patch(batch.targets[t], b, 0, study.targets[t], sx, sy, sz);
  }
  return batch;
}

void flip_sample(nn::Tensor5& t, int b, int axis) {
  const int D = t.shape.d, H = t.shape.h, W = t.shape.w, C = t.shape.c;
  auto swap_vox = [&](int d0, int h0, int w0, int d1, int h1, int w1) {
    float* a = &t.data[t.idx(b, 0, d0, h0, w0)];
    float* c = &t.data[t.idx(b, 0, d1, h1, w1)];
    for (int i = 0; i < C; ++i) std::swap(a[i], c[i]);
  };
  if (axis == 0) {
    for (int d = 0; d < D / 2; ++d)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) swap_vox(d, h, w, D - 1 - d, h, w);
  } else if (axis == 1) {
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H / 2; ++h)
        for (int w = 0; w < W; ++w) swap_vox(d, h, w, d, H - 1 - h, w);
  } else {
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W / 2; ++w) swap_vox(d, h, w, d, h, W - 1 - w);
  }
}

void augment_flip(PatchBatch& batch, bool flip_x, bool flip_y, bool flip_z, Rng& rng) {
  const bool enabled[3] = {flip_z, flip_y, flip_x};  // axis 0=d(z), 1=h(y), 2=w(x)
  for (int b = 0; b < batch.input.shape.n; ++b)
    for (int axis = 0; axis < 3; ++axis) {
      if (!enabled[axis]) continue;
      if (!rng.bernoulli(0.5)) continue;
      flip_sample(batch.input, b, axis);
      for (auto& t : batch.targets) flip_sample(t, b, axis);
    }
}

TrainResult train(const std::vector<PreparedStudy>& studies, UNetModel& model,
                  const TrainConfig& cfg, const std::string& checkpoint_dir) {
  if (studies.empty()) fail(Err::EmptyVolume, "train: no training studies");
  cfg.validate(model.config.downsample_factor());
  if (model.config.in_channels != setup_channels(cfg.setup))
    fail(Err::ShapeMismatch,
         std::string("train: model in_channels does not match setup ") + setup_name(cfg.setup));
  for (const auto& s : studies)
    if (static_cast<int>(s.channels.size()) != model.config.in_channels)
      fail(Err::ShapeMismatch, "train: study " + s.study_id + " channel count mismatch");

  Rng rng(cfg.seed);
  std::vector<int64_t> sizes;
  for (const auto& p : model.params) sizes.push_back(p.value.numel());
  nn::AdamState adam(sizes, cfg.adam);

  if (!checkpoint_dir.empty()) fs::create_directories(checkpoint_dir);

  TrainResult result;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      const PreparedStudy& study =
          studies[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(studies.size()) - 1))];
      PatchBatch batch = sample_patches(study, cfg, rng);
      augment_flip(batch, cfg.flip_x, cfg.flip_y, cfg.flip_z, rng);

      nn::Tape tape;
      auto fw = model.forward(tape, batch.input, true);
      std::vector<nn::Tensor5> targets(batch.targets.begin(), batch.targets.end());
      auto loss = nn::combined_loss(tape, fw.heads, targets,
                                    static_cast<float>(cfg.dice_smooth));
      double total = loss.total->value.data[0];
      if (!std::isfinite(total))
        fail(Err::NonFiniteLoss, "train: non-finite loss at step " + std::to_string(step));

      TrainResult::StepRow row;
      row.step = step;
      row.total = total;
      for (int i = 0; i < 3; ++i) {
        row.bce[i] = loss.bce[static_cast<size_t>(i)]->value.data[0];
        row.dice[i] = loss.dice[static_cast<size_t>(i)]->value.data[0];
      }
      result.history.push_back(row);

      tape.backward(loss.total);
      std::vector<nn::Tensor5*> params;
      std::vector<const float*> grads;
      for (size_t p = 0; p < model.params.size(); ++p) {
        params.push_back(&model.params[p].value);
        grads.push_back(fw.param_nodes[p]->grad.data());
      }
      adam.step(params, grads);
    }
    if (!checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch + 1);
      save_checkpoint(model, (fs::path(checkpoint_dir) / name).string());
    }
  }
  if (!checkpoint_dir.empty())
    save_checkpoint(model, (fs::path(checkpoint_dir) / "final.ckpt").string());
  return result;
}

std::array<Volume, 3> sliding_window_infer(const UNetModel& model,
                                           const std::vector<Volume>& channels,
                                           const InferenceConfig& cfg) {
  cfg.validate();
  if (channels.empty()) fail(Err::EmptyVolume, "infer: no channels");
  for (size_t i = 1; i < channels.size(); ++i)
    if (!channels[i].same_grid(channels[0]))
      fail(Err::GridMismatch, "infer: channel grids differ");
  if (static_cast<int>(channels.size()) != model.config.in_channels)
    fail(Err::ShapeMismatch, "infer: channel count does not match the model");

  const Volume& grid = channels[0];
  const int pd = cfg.patch[0], ph = cfg.patch[1], pw = cfg.patch[2];
  const int D = grid.nz, H = grid.ny, W = grid.nx;

  auto tile_starts = [&](int dim, int patch, double overlap) {
    std::vector<int> starts;
    if (dim <= patch) {
      starts.push_back(0);
      return starts;
    }
    int step = std::max(1, static_cast<int>(std::llround(patch * (1.0 - overlap))));
    for (int s = 0;; s += step) {
      if (s + patch >= dim) {
        starts.push_back(dim - patch);
        break;
      }
      starts.push_back(s);
    }
    return starts;
  };
  auto sd = tile_starts(D, pd, cfg.overlap);
  auto sh = tile_starts(H, ph, cfg.overlap);
  auto sw = tile_starts(W, pw, cfg.overlap);

  // Gaussian importance map, shared by every tile.
  std::vector<double> weight(static_cast<size_t>(pd) * ph * pw);
  {
    double cz = (pd - 1) / 2.0, cy = (ph - 1) / 2.0, cx = (pw - 1) / 2.0;
    double sz = std::max(pd / cfg.sigma_divisor, 0.5);
    double sy = std::max(ph / cfg.sigma_divisor, 0.5);
    double sx = std::max(pw / cfg.sigma_divisor, 0.5);
    size_t i = 0;
    for (int z = 0; z < pd; ++z)
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x, ++i) {
          double e = (z - cz) * (z - cz) / (2 * sz * sz) +
                     (y - cy) * (y - cy) / (2 * sy * sy) +
                     (x - cx) * (x - cx) / (2 * sx * sx);
          weight[i] = std::exp(-e);
        }
  }

  const size_t nvox = grid.size();
  std::array<std::vector<double>, 3> acc;
  for (auto& a : acc) a.assign(nvox, 0.0);
  std::vector<double> wsum(nvox, 0.0);

  nn::Tensor5 input = nn::Tensor5::zeros(
      {1, static_cast<int>(channels.size()), pd, ph, pw});
  for (int tz : sd)
    for (int ty : sh)
      for (int tx : sw) {
        for (size_t c = 0; c < channels.size(); ++c)
          fill_patch(input, 0, static_cast<int>(c), channels[c], tx, ty, tz);
        nn::Tape tape;
        auto fw = model.forward(tape, input, false);
        for (int head = 0; head < 3; ++head) {
          const auto& p = fw.heads[static_cast<size_t>(head)]->value;
          size_t i = 0;
          for (int z = 0; z < pd; ++z) {
            int vz = tz + z;
            if (vz >= D) break;
            for (int y = 0; y < ph; ++y) {
              int vy = ty + y;
              if (vy >= H) continue;
              for (int x = 0; x < pw; ++x) {
                int vx = tx + x;
                if (vx >= W) continue;
                i = grid.index(vx, vy, vz);
                size_t pi = (static_cast<size_t>(z) * ph + y) * pw + x;
                acc[static_cast<size_t>(head)][i] += weight[pi] * p.data[pi];
                if (head == 0) wsum[i] += weight[pi];
              }
            }
          }
        }
      }

  std::array<Volume, 3> out;
  for (int head = 0; head < 3; ++head) {
    out[static_cast<size_t>(head)] = Volume::create(grid.nx, grid.ny, grid.nz, grid.spacing,
                                                    grid.origin, grid.space);
    auto& v = out[static_cast<size_t>(head)];
    for (size_t i = 0; i < nvox; ++i) {
      double p = wsum[i] > 0 ? acc[static_cast<size_t>(head)][i] / wsum[i] : 0.0;
      v.data[i] = static_cast<float>(std::clamp(p, 0.0, 1.0));
    }
  }
  return out;
}

Volume project_prediction(const Volume& prob, const Affine3& mri_to_trus,
                          const Volume& trus_grid) {
  Volume out = apply_transform(prob, mri_to_trus, trus_grid, InterpKind::Trilinear);
  for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  out.space = SpaceTag::TRUS;
  return out;
}

}  // namespace fuseseg
