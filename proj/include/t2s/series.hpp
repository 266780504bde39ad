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

#include "t2s/volume.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace t2s {

// One time point: a volume per echo on a shared geometry.
struct MultiEchoDynamic {
  std::vector<VoxelGrid> echoes;
  std::vector<double> tes_ms;
  int index = 0;

  GridGeometry const &geometry() const { return echoes.front().geometry(); }
  // Throws ContractViolation when echoes/TEs disagree or geometry differs.
  void validate() const;
};

// Filename convention: dyn{d:03}_echo{e}.nii.gz (e counted from 0).
std::string echo_filename(int dynamic, int echo);

void write_series(std::vector<MultiEchoDynamic> const &series, std::filesystem::path const &dir);

// Reads dynamics 0..n-1 with the given echo count; a missing file raises
// IntegrityError naming it. dynamics < 0 means "discover from the directory".
std::vector<MultiEchoDynamic> read_series(std::filesystem::path const &dir, std::vector<double> const &tes_ms,
                                          int dynamics = -1);

} // namespace t2s
