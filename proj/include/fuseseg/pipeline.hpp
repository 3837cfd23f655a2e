#pragma once

#include <array>
#include <string>
#include <vector>

#include "fuseseg/rng.hpp"
#include "fuseseg/study.hpp"
#include "fuseseg/unet.hpp"

namespace fuseseg {

enum class Setup { TrusOnly, MriOnly, Multimodal };

int setup_channels(Setup s);
const char* setup_name(Setup s);
Setup setup_from_name(const std::string& name);

struct TrainConfig {
  Setup setup = Setup::Multimodal;
  int patch[3] = {16, 64, 64};  // d (z), h (y), w (x) voxels
  int batch_size = 2;
  double fg_oversample = 0.33;
  int epochs = 8;
  int steps_per_epoch = 50;
  uint64_t seed = 0;
  bool flip_x = true, flip_y = false, flip_z = false;
  nn::AdamConfig adam;
  double dice_smooth = 1.0;

  void validate(int downsample_factor) const;
};

struct InferenceConfig {
  int patch[3] = {16, 64, 64};
  double overlap = 0.5;         // fraction of patch shared by neighbors
  double sigma_divisor = 8.0;   // gaussian sigma = patch / sigma_divisor
  float thresholds[3] = {0.5f, 0.5f, 0.5f};  // per label

  void validate() const;
};

// Channel order per setup: [TRUS] | [T2w, ADC, DWI] | [TRUS, T2w, ADC, DWI].
// All channels must share one grid (GridMismatch otherwise). For MriOnly
// the channels live on the MRI grid.
std::vector<Volume> assemble_input(const MultimodalStudy& study, Setup setup);

// Channels plus the three binary targets (gland, any cancer GG>=1, CsPCa
// GG>=2) on the channel grid, with cached foreground voxel lists for patch
// sampling. For MriOnly the targets are projected to the MRI grid through
// the study transform (required).
struct PreparedStudy {
  std::string study_id;
  std::string split;
  std::vector<Volume> channels;
  std::array<Volume, 3> targets;
  std::vector<int64_t> fg_cspca, fg_any, fg_gland;

  const Volume& grid() const { return channels.front(); }
};

PreparedStudy prepare_study(const MultimodalStudy& study, Setup setup);

struct PatchBatch {
  nn::Tensor5 input;                        // (B, C, pd, ph, pw)
  std::array<nn::Tensor5, 3> targets;       // (B, 1, pd, ph, pw)
  std::vector<std::array<int, 3>> centers;  // sampled centers (x, y, z), pre-clamp
};

// With probability fg_oversample the patch centers on a uniformly chosen
// CsPCa voxel (falling back to any-cancer, then gland); otherwise uniform
// over the volume. Patch starts clamp to the valid range; volumes smaller
// than the patch are zero-padded.
PatchBatch sample_patches(const PreparedStudy& study, const TrainConfig& cfg, Rng& rng);

// In-place spatial flip of one batch sample; axis 0 = d, 1 = h, 2 = w.
void flip_sample(nn::Tensor5& t, int b, int axis);

// Flips input and targets consistently, one coin per sample per enabled
// axis.
void augment_flip(PatchBatch& batch, bool flip_x, bool flip_y, bool flip_z, Rng& rng);

struct TrainResult {
  struct StepRow {
    int step;
    double total;
    std::array<double, 3> bce;
    std::array<double, 3> dice;
  };
  std::vector<StepRow> history;
};

// Adam on the combined BCE + soft-Dice loss across the three heads.
// Deterministic given the seed (single-threaded). When checkpoint_dir is
// non-empty, saves epoch_NNN.ckpt per epoch plus final.ckpt. Errors:
// ShapeMismatch (setup/channel disagreement), NonFiniteLoss.
TrainResult train(const std::vector<PreparedStudy>& studies, UNetModel& model,
                  const TrainConfig& cfg, const std::string& checkpoint_dir = "");

// Gaussian-blended overlapping tiles over the whole channel grid; returns
// one probability volume per head label on the input grid.
std::array<Volume, 3> sliding_window_infer(const UNetModel& model,
                                           const std::vector<Volume>& channels,
                                           const InferenceConfig& cfg);

// MRI-space probabilities projected onto the TRUS grid (trilinear, clamped
// to [0,1]).
Volume project_prediction(const Volume& prob, const Affine3& mri_to_trus,
                          const Volume& trus_grid);

}  // namespace fuseseg
