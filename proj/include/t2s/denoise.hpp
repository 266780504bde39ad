/*
 * fetal-t2s : quantitative T2* fetal body reconstruction toolkit
 *
 * Copyright 2026 The fetal-t2s Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "t2s/series.hpp"
#include "t2s/volume.hpp"

#include <span>
#include <string>
#include <vector>

namespace t2s {

// M co-registered measurements of the same field of view.
struct MeasurementStack {
  std::vector<VoxelGrid> volumes;

  std::size_t measurements() const { return volumes.size(); }
  GridGeometry const &geometry() const { return volumes.front().geometry(); }
  void validate() const;

  // Flattens (dynamic, echo) pairs, dynamic-major.
  static MeasurementStack from_series(std::vector<MultiEchoDynamic> const &series);
  // Inverse of from_series, reusing the echo times and indices of the template.
  std::vector<MultiEchoDynamic> to_series(std::vector<MultiEchoDynamic> const &layout) const;
};

struct NoiseMap {
  VoxelGrid sigma;
  VoxelGrid rank;
};

enum class Aggregation { Uniform, CentreOnly };

struct DenoiseOptions {
  int patch_radius = 2;
  Aggregation aggregation = Aggregation::Uniform;
};

struct DenoiseResult {
  MeasurementStack stack;
  NoiseMap noise;
  std::vector<std::string> warnings;
};

DenoiseResult mppca_denoise(MeasurementStack const &stack, DenoiseOptions const &options = {});

// Per-echo variant: denoises each echo's dynamics as a separate stack.
std::vector<MultiEchoDynamic> mppca_denoise_per_echo(std::vector<MultiEchoDynamic> const &series,
                                                     DenoiseOptions const &options, NoiseMap *noise = nullptr);

struct MpThreshold {
  double sigma2 = 0.0;
  // Number of eigenvalues (from the bottom) attributed to noise.
  int noise_components = 0;
};

// Marchenko-Pastur partition of ascending Gram eigenvalues. `eigenvalues`
// are the r = min(m, n) nonzero-capable eigenvalues of X X^T for an m x n
// (centred) data matrix.
MpThreshold mp_threshold(std::span<double const> eigenvalues, int m, int n);

} // namespace t2s
