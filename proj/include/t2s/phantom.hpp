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
#include "t2s/transform.hpp"
#include "t2s/volume.hpp"

#include <cstdint>
#include <map>
#include <vector>

namespace t2s {

struct OrganProperties {
  double s0 = 0;
  double t2star_ms = 0;
};

using OrganTable = std::map<int, OrganProperties>;

// Simulator defaults: per-organ S0 and a T2* that ramps linearly with GA.
// Only the lung value at 28 weeks and the direction of each trend carry any
// meaning; the rest are placeholders.
OrganTable default_organ_table(double ga_weeks);

struct DigitalPhantom {
  VoxelGrid labels;
  OrganTable organs;
  double ga_weeks = 28.0;
  // Width of the partial-volume transition applied to signal images.
  double edge_sigma_mm = 0.0;

  void validate() const;

  VoxelGrid s0_map() const;
  VoxelGrid t2star_map() const;
  // S0 exp(-TE/T2*) per voxel, then edge smoothing.
  VoxelGrid signal_at(double te_ms) const;
};

struct PhantomOptions {
  double ga_weeks = 28.0;
  Dims dims{84, 84, 72};
  Vec3 spacing_mm{1.2, 1.2, 1.2};
  std::uint64_t seed = 1;
  double edge_sigma_mm = 1.0;
  // Replaces entries of the default table.
  OrganTable organ_overrides;
};

// Deterministic for a given seed. Throws ConfigError when the grid is too
// small to hold every organ.
DigitalPhantom make_phantom(PhantomOptions const &options);
DigitalPhantom make_phantom(double ga_weeks, Dims dims, Vec3 const &spacing_mm, std::uint64_t seed);

struct SinusoidalDeformation {
  double amplitude_mm = 0.0;
  double wavelength_mm = 40.0;
  double phase_rad = 0.0;
  Vec3 direction = Vec3::UnitX();
  Vec3 wave_axis = Vec3::UnitZ();

  bool active() const { return amplitude_mm != 0.0; }
  Vec3 displacement(Vec3 const &p) const;
};

struct DynamicMotion {
  RigidTransform pose;
  SinusoidalDeformation deformation;
};

enum class NoiseModel { Gaussian, Rician };
enum class SliceOrder { Sequential, Interleaved };

struct MotionScript {
  // Motion applied to the phantom for each dynamic.
  std::vector<DynamicMotion> dynamics;
  double slice_jitter_deg = 0.0;
  double slice_jitter_mm = 0.0;
  double noise_sigma = 0.0;
  NoiseModel noise = NoiseModel::Gaussian;
  SliceOrder order = SliceOrder::Sequential;
  // Fraction of the way towards the next dynamic's pose reached by the last
  // acquired slice of a dynamic. 0 keeps the pose fixed within a dynamic.
  double intra_dynamic_drift = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  static MotionScript still(int dynamics);
};

struct AcquisitionGeometry {
  Dims dims{32, 32, 24};
  Vec3 voxel_mm{3.125, 3.125, 3.0};
  // Columns: row direction, column direction, slice normal.
  Mat3 orientation = Mat3::Identity();
  Vec3 centre_mm = Vec3::Zero();

  GridGeometry geometry() const;
  // Smallest grid of the given voxel size covering the phantom field of view.
  static AcquisitionGeometry covering(DigitalPhantom const &phantom, Vec3 const &voxel_mm = Vec3(3.125, 3.125, 3.0));
};

struct SimulationTruth {
  // Scanner -> phantom frame, per dynamic (inverse of the applied pose).
  std::vector<RigidTransform> dynamic_transforms;
  // Same, per dynamic and slice, including jitter and drift.
  std::vector<std::vector<RigidTransform>> slice_transforms;
  std::vector<SinusoidalDeformation> deformations;
  // [dynamic][echo] signals before noise.
  std::vector<std::vector<VoxelGrid>> noiseless;
};

struct SimulatedSeries {
  std::vector<MultiEchoDynamic> dynamics;
  SimulationTruth truth;
};

struct SimulationOptions {
  // Disables the PSF (a single sample at the voxel centre) when false.
  bool psf = true;
  double psf_support_sigmas = 2.0;
  bool keep_noiseless = true;
};

SimulatedSeries simulate_acquisition(DigitalPhantom const &phantom, MotionScript const &motion,
                                     std::vector<double> const &tes_ms, AcquisitionGeometry const &acquisition,
                                     SimulationOptions const &options = {});

inline std::vector<double> default_echo_times() { return {46.0, 120.0, 194.0}; }

} // namespace t2s
