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

#include <filesystem>
#include <string>
#include <vector>

namespace t2s {

struct DynamicScore {
  int dynamic = 0;
  double ncc_to_reference = 0.0;
  double slice_consistency = 0.0;
  bool kept = false;
  std::string reason;
};

struct QcThresholds {
  double ncc = 0.5;
  double slice_consistency = 0.4;

  void validate() const;
};

struct QcOverrides {
  std::vector<int> keep;
  std::vector<int> drop;
};

// Median reference volume across dynamics at one echo.
VoxelGrid median_reference(std::vector<MultiEchoDynamic> const &dynamics, std::size_t echo_index);

// Mean NCC between neighbouring z-slices, skipping constant slices.
double slice_consistency(VoxelGrid const &volume);

// Scores every dynamic and marks `kept` by the thresholds (no overrides).
std::vector<DynamicScore> score_dynamics(std::vector<MultiEchoDynamic> const &dynamics, std::size_t echo_index = 1,
                                         QcThresholds const &thresholds = {});

// Applies thresholds then overrides (drop wins over keep); updates kept and
// reason in place and returns the kept dynamic indices in input order.
std::vector<int> apply_qc(std::vector<DynamicScore> &scores, QcThresholds const &thresholds,
                          QcOverrides const &overrides = {});

void write_qc_report(std::filesystem::path const &path, std::vector<DynamicScore> const &scores);

} // namespace t2s
