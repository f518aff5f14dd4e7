#pragma once

#include <cstdint>
#include <string>

#include "dinomx/config.hpp"
#include "dinomx/vit.hpp"

namespace dinomx {

/// Frozen teacher backbone for cross-architecture distillation.
struct TeacherSpec {
  std::string preset;
  BackboneSpec spec;
  ParameterSet params;  // backbone.* only
  std::uint64_t hash = 0;
  std::string source;   // "synthetic" or the file it came from
};

/// Hash over the `backbone.*` tensors of a parameter set.
std::uint64_t backbone_hash(const ParameterSet& params);

/// Resolves the preset and either loads weights (load_from_disk) or draws a
/// seeded random backbone. `in_channels` fills a preset that leaves it open.
/// Accepts a DMXT file of backbone.* tensors or a checkpoint directory (its
/// teacher weights are used, adapters folded in).
TeacherSpec load_teacher(const DistillationSection& cfg, int in_channels, std::uint64_t seed);

/// Copies every `head.*` tensor of `shadow` into `teacher` when the teacher has
/// the same name with the same shape. Returns the number of tensors copied.
int sync_teacher_head(ParameterSet& teacher, const ParameterSet& shadow);

/// Throws if the teacher backbone no longer matches `expected`.
void verify_teacher(const ParameterSet& teacher, std::uint64_t expected);

}  // namespace dinomx
