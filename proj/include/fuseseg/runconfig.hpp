#pragma once

#include <string>

#include "fuseseg/phantom.hpp"
#include "fuseseg/pipeline.hpp"
#include "fuseseg/preprocess.hpp"
#include "fuseseg/registration.hpp"
#include "fuseseg/unet.hpp"

namespace fuseseg {

struct EvalConfig {
  float threshold = 0.5f;
  double min_dice = 0.1;
  int connectivity = 26;
  uint64_t bootstrap_seed = 811;
};

// Merged view of every module config, loaded from one JSON file with
// command-line overrides on top. Unknown keys are rejected. The effective
// config is echoed into every output directory as config.lock.json.
struct RunConfig {
  int jobs = 0;  // 0 = one worker per hardware thread (capped at 8)
  PhantomConfig phantom;
  PreprocessConfig preprocess;
  RegistrationConfig registration;
  UNetConfig unet;  // in_channels is derived from the setup at build time
  TrainConfig train;
  InferenceConfig infer;
  EvalConfig evaluate;

  static RunConfig load(const std::string& path);  // strict parse
  static RunConfig from_json_text(const std::string& text);
  std::string to_json(int indent = 2) const;

  int effective_jobs() const;
};

}  // namespace fuseseg
