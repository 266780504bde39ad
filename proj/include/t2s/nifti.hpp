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

namespace t2s {

// NIfTI-1 single-file (.nii / .nii.gz). Signal and millisecond grids are
// stored as float32, label maps as uint8. Reading accepts uint8, int16,
// uint16, float32 and float64 payloads; uint8 payloads and label intents
// come back tagged as label maps.
VoxelGrid read_volume(std::filesystem::path const &path);
void write_volume(VoxelGrid const &grid, std::filesystem::path const &path);

// Writes a 0/1 mask on the given geometry as a uint8 label-coded volume.
void write_mask(Mask const &mask, GridGeometry const &geometry, std::filesystem::path const &path);
Mask read_mask(std::filesystem::path const &path, GridGeometry const *expected = nullptr);

} // namespace t2s
