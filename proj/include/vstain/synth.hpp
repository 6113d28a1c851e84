// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vstain/nn.hpp"

namespace vstain {

/// Procedural H&E/IHC pair. Nuclei are shared; DAB marks a stain-specific
/// subset chosen from nuclear size, so it is predictable from the H&E.
/// The IHC is shifted by up to `max_shift` pixels to mimic misregistration.
struct SynthPair {
  Tensor hne, ihc;  // [3,side,side] in [0,1]
  std::string stain;
};
SynthPair synth_pair(int64_t side, const std::string& stain, Rng& rng, int64_t max_shift = 2);

struct SynthOptions {
  int64_t count = 8;
  int64_t side = 128;
  uint64_t seed = 0;
  std::vector<std::string> stains{"HER2", "Ki67", "ER", "PR"};
  int64_t test_count = 0;  // last items go to the test split
  int64_t max_shift = 2;
};

/// Writes PNG pairs plus manifest.jsonl into `dir`; returns the manifest path.
/// Item i uses stains[i % stains.size()].
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, const SynthOptions& opt);

}  // namespace vstain
