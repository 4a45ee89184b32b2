#pragma once

#include <cstdint>
#include <string>

#include "revcs/common.hpp"
#include "revcs/sampler.hpp"

namespace revcs {

// Mirrors the plain-text key = value config files. Unknown keys are rejected;
// emit() writes the canonical form, so parse -> emit -> parse is a fixpoint.
struct TrainConfig {
  std::string precision = "f32";  // f32 | f64
  int64_t steps = 3;              // key: T
  int64_t batch_size = 1;
  int64_t patch_size = 64;
  int64_t block_size = 8;
  double ratio = 0.25;
  uint64_t seed = 0;
  double lr = 1e-4;
  int64_t lr_halve_every = 10000;
  int64_t iters = 2000;
  bool e2e = true;
  bool invertible = true;
  bool injectors = true;
  std::string init = "backproj";  // backproj | noise
  bool reuse = false;             // out of scope at desk scale; rejected when set
  bool pruning = false;           // out of scope at desk scale; rejected when set
  int64_t channels0 = 16;         // key: channels = c0,c1
  int64_t channels1 = 32;
  int64_t blocks_per_group = 2;
  bool attention = false;
  int64_t eval_interval = 200;
  int64_t val_patches = 8;
  std::string data_dir;  // optional user-supplied PGM corpus
  std::string out_dir = ".";

  static TrainConfig parse(const std::string& text, const std::string& origin = "<config>");
  static TrainConfig from_file(const std::string& path);
  std::string emit() const;
  void save(const std::string& path) const;
  void validate() const;
  uint64_t hash() const;  // of the canonical form

  IdmConfig idm_config(int64_t img_channels) const {
    IdmConfig c;
    c.steps = steps;
    c.wired = invertible;
    c.init = init == "noise" ? InitMode::noise : InitMode::backproj;
    c.est.img_channels = img_channels;
    c.est.c0 = channels0;
    c.est.c1 = channels1;
    c.est.blocks_per_group = blocks_per_group;
    c.est.injectors = injectors;
    c.est.attention = attention;
    c.est.wired = invertible;
    return c;
  }
};

}  // namespace revcs
