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

#include <optional>
#include <span>

namespace t2s {

struct FitOptions {
  double t2star_cap_ms = 2000.0;
  // Optional quality gate on the log-domain r^2; off by default.
  std::optional<double> min_r2;
  // Levenberg-Marquardt polish in the signal domain after the log-linear fit.
  bool nonlinear_refine = false;
};

struct VoxelFit {
  double s0 = 0.0;
  double t2star_ms = 0.0;
  double r2 = 0.0;
  bool failed = true;
};

// Ordinary least squares on (TE, ln S). Fails on any non-positive or
// non-finite sample, a non-decaying slope, or T2* above the cap.
VoxelFit fit_voxel(std::span<double const> signals, std::span<double const> tes_ms, FitOptions const &options);
VoxelFit fit_voxel(std::span<double const> signals, std::span<double const> tes_ms, double t2star_cap_ms = 2000.0);

struct T2StarMap {
  VoxelGrid t2star; // ms, 0 where failed
  VoxelGrid s0;
  Mask failed;
  VoxelGrid fit_r2;
};

struct MapSummary {
  double failed_fraction = 1.0;
  // Median over non-failed voxels (0 when every voxel failed).
  double median_t2star_ms = 0.0;
  std::size_t fitted = 0;
};

struct DynamicFit {
  T2StarMap map;
  MapSummary summary;
};

DynamicFit map_dynamic(MultiEchoDynamic const &dynamic, FitOptions const &options = {});

} // namespace t2s
