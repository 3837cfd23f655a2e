#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fuseseg/nngraph.hpp"

namespace fuseseg {

struct UNetConfig {
  int in_channels = 4;  // 1 TRUS-only, 3 MRI-only, 4 multimodal
  int stages = 4;
  int base_channels = 16;  // doubles per stage
  int max_channels = 256;
  float leaky_slope = 0.01f;
  std::vector<std::string> head_labels = {"gland", "any_cancer", "cspca"};

  int channels_at(int stage) const {  // stage 1..stages
    int64_t c = static_cast<int64_t>(base_channels) << (stage - 1);
    return static_cast<int>(std::min<int64_t>(c, max_channels));
  }
  int downsample_factor() const { return 1 << (stages - 1); }

  void validate() const;
  std::string to_json() const;
  static UNetConfig from_json(const std::string& text);
};

// Ordered, named parameter list; shapes are derivable from the config
// alone. Encoder stages have two 3x3x3 convs (the first strided 2 except at
// stage 1), each followed by instance norm + leaky ReLU; decoder stages
// upsample with a 2x2x2 stride-2 transposed conv, concatenate the skip, and
// apply the same double conv block; each head is an independent 2-channel
// 1x1x1 conv + channel softmax.
struct UNetModel {
  UNetConfig config;
  struct Param {
    std::string name;
    nn::Tensor5 value;
  };
  std::vector<Param> params;

  int64_t parameter_count() const;
  const Param* find(const std::string& name) const;

  struct Forward {
    std::vector<nn::NodeT<float>*> heads;        // per label: (N,1,D,H,W) probabilities
    std::vector<nn::NodeT<float>*> param_nodes;  // aligned with params
  };
  // Spatial dims of x must be divisible by 2^(stages-1); channels must
  // equal in_channels. `train` marks parameters as requiring gradients.
  Forward forward(nn::Tape& tape, const nn::Tensor5& x, bool train) const;
};

// He-style initialization scaled for leaky ReLU from a seeded generator;
// identical seed gives identical parameters.
UNetModel build_unet(const UNetConfig& cfg, uint64_t seed);

// Binary checkpoint: format version + config JSON + named little-endian
// float32 parameter blocks in order. Roundtrip is bitwise lossless.
void save_checkpoint(const UNetModel& model, const std::string& path);
UNetModel load_checkpoint(const std::string& path);

}  // namespace fuseseg
