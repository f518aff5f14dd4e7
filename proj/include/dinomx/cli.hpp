#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dinomx/config.hpp"
#include "dinomx/dataset.hpp"
#include "dinomx/vit.hpp"

namespace dinomx {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRuntime = 3 };

/// Parses `args` (without the program name) and runs one subcommand:
/// train, evaluate, analyze, distill, info or synth.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Encoder weights taken from a checkpoint bundle with adapters folded in.
/// Self-distillation runs yield the EMA teacher; distillation runs the EMA student.
struct CheckpointBackbone {
  TrainConfig config;
  BackboneSpec spec;
  ParameterSet params;
  std::int64_t iteration = 0;
};

CheckpointBackbone load_checkpoint_backbone(const std::filesystem::path& bundle, int in_channels);

/// Deterministic held-out split: every fifth position of a seeded permutation.
void split_indices(std::size_t n, std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& test);

}  // namespace dinomx
