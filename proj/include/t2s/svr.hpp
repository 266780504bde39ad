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

#include "t2s/relaxometry.hpp"
#include "t2s/series.hpp"
#include "t2s/transform.hpp"
#include "t2s/volume.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace t2s {

// Hierarchical B-spline deformation: displacement is the sum over levels.
struct Deformation {
  std::vector<FFDTransform> levels;

  Vec3 displacement(Vec3 const &p) const;
  // Upper bound: sum of the per-level control-point maxima.
  double max_displacement() const;
};

struct SliceModel {
  // Single-slice raster (dims.z == 1) in scanner coordinates.
  VoxelGrid pixels;
  int stack = 0;
  int dynamic = 0;
  int slice = 0;
  // Scanner -> reconstruction frame.
  RigidTransform pose;
  std::shared_ptr<Deformation const> deformation;
  double weight = 1.0;
  bool excluded = false;
  std::string exclusion_reason;
  double ncc = 0.0;

  // Reconstruction-frame position of pixel (i, j), deformation included.
  Vec3 position(int i, int j) const;
  Vec3 normal() const;
  Vec3 centre() const;
};

// Splits every dynamic's chosen echo into slices along the third axis.
std::vector<SliceModel> extract_slices(std::vector<MultiEchoDynamic> const &dynamics, std::size_t echo_index);
// Same layout for an arbitrary per-dynamic channel.
std::vector<SliceModel> extract_slices(std::vector<VoxelGrid> const &volumes, std::vector<int> const &dynamic_indices);

struct ReconConfig {
  double resolution_mm = 1.2;
  bool intensity_matching = false;
  bool robust_stats = false;
  std::vector<double> cp_schedule_mm{12.0, 5.0};
  // Regularisation weight for the interleaved passes and for the last pass.
  double delta = 0.15;
  double final_delta = 0.015;
  int outer_iterations = 3;
  int sr_iterations = 5;
  int deformable_iterations = 8;
  double bending_weight = 10.0;
  // Edge scale of the edge-preserving weights, relative to the 99th
  // percentile of the volume.
  double edge_scale = 0.1;
  PsfSpec psf;
  double margin_mm = 4.0;
  double min_overlap = 0.25;
  double min_slice_ncc = 0.3;
  int pyramid_levels = 3;
  double initial_step = 2.0;
  double final_step = 0.125;
  int max_sweeps = 40;
  // Grid of extra starts for single-slice registration: tilts about the
  // in-plane axes and offsets along the slice normal. Both 0 disables them;
  // reconstruct() does so because its slices start from the stack pose.
  double restart_tilt_deg = 8.0;
  double restart_offset_mm = 4.0;
  // Slices with fewer pixels above 10% of their stack's maximum than this
  // fraction keep their current pose (too little structure to register).
  double min_content = 0.05;
  bool stack_registration = true;
  // With several dynamics, the first slice-registration round and the
  // deformable stage target a volume built from the template dynamic alone.
  bool template_anchor = true;
  bool slice_registration = true;
  // Voxels whose back-projected weight is below this fraction of the
  // maximum are flagged empty.
  double weight_floor = 0.05;
  // Fixes the output grid instead of covering the slice footprints.
  std::optional<GridGeometry> grid;

  void validate() const;
};

// Isotropic grid aligned with the first slice's frame, covering all slice
// footprints at their current poses plus the margin.
GridGeometry covering_grid(std::vector<SliceModel> const &slices, ReconConfig const &config);

// PSF-blur-then-sample forward model on a fixed reconstruction grid.
class ForwardModel {
public:
  ForwardModel(GridGeometry grid, PsfSpec const &psf);

  GridGeometry const &grid() const { return grid_; }
  // Index of the grid axis closest to the slice normal.
  int psf_axis(SliceModel const &slice) const;
  // Separable truncated Gaussian with zero padding; self-adjoint.
  VoxelGrid blur(VoxelGrid const &volume, int axis) const;
  std::vector<double> const &kernel(int axis, int dim) const { return kernels_[std::size_t(axis)][std::size_t(dim)]; }

private:
  GridGeometry grid_;
  std::vector<std::vector<std::vector<double>>> kernels_; // [psf axis][grid dim]
};

struct VolumeEstimate {
  VoxelGrid volume;
  Mask valid;
};

// PSF-weighted scatter average of the included slices at their poses.
VolumeEstimate initialize_volume(std::vector<SliceModel> const &slices, ReconConfig const &config);
VolumeEstimate initialize_volume(std::vector<SliceModel> const &slices, ReconConfig const &config,
                                 GridGeometry const &grid);

struct RegistrationResult {
  RigidTransform pose;
  double ncc = 0.0;
  double initial_ncc = 0.0;
  double overlap = 0.0;
  bool excluded = false;
  std::string reason;
  int evaluations = 0;
};

RegistrationResult register_slice(SliceModel const &slice, VoxelGrid const &volume, ReconConfig const &config);
// Fraction of a slice's pixels above 10% of `reference_max`.
double slice_content(SliceModel const &slice, double reference_max);

// One rigid transform for a group of slices (a whole dynamic).
RegistrationResult register_stack(std::vector<SliceModel const *> const &slices, VoxelGrid const &volume,
                                  ReconConfig const &config);

struct SrDiagnostics {
  std::vector<double> data_term;
  bool diverged = false;
};

// `sr_iterations` inner iterations of the regularised SIRT update.
VoxelGrid superresolution_update(VoxelGrid const &volume, std::vector<SliceModel> const &slices,
                                 ReconConfig const &config, double delta, SrDiagnostics *diagnostics = nullptr);

double data_term(VoxelGrid const &volume, std::vector<SliceModel> const &slices, ReconConfig const &config);

struct DeformableReport {
  std::vector<double> ncc_before;
  std::vector<double> ncc_after;
  // Largest displacement at the stack's pixel positions.
  std::vector<double> max_displacement_mm;
};

// Per-stack B-spline refinement at each control spacing of the schedule.
void deformable_stage(VoxelGrid const &volume, std::vector<SliceModel> &slices, ReconConfig const &config,
                      DeformableReport *report = nullptr);

struct ChannelVolume {
  VoxelGrid values;
  Mask valid;
};

struct ChannelSlices {
  std::vector<VoxelGrid> values;
  std::vector<Mask> failed;
};

// T2* raster and failure mask of each slice, cut from its stack's map.
ChannelSlices t2star_slices(std::vector<SliceModel> const &slices, std::vector<T2StarMap> const &maps);

// Scatter-average of a channel through the structural slices' geometry.
// `channel` and `failed` follow the slice order of `slices`; failed is
// optional (empty = no failures).
ChannelVolume propagate_channel(std::vector<SliceModel> const &slices, std::vector<VoxelGrid> const &channel,
                                std::vector<Mask> const &failed, GridGeometry const &grid, ReconConfig const &config);

struct ReconReport {
  std::vector<double> mean_ncc;
  std::vector<int> excluded_slices;
  std::vector<double> data_term;
  bool sr_diverged = false;
  DeformableReport deformable;
  int template_dynamic = 0;
  std::vector<std::string> warnings;
};

struct ReconResult {
  VoxelGrid structural;
  VoxelGrid t2star;
  Mask valid;
  std::vector<SliceModel> slices;
  ReconReport report;
};

// `maps` pairs with `dynamics`; `template_position` indexes into both.
ReconResult reconstruct(std::vector<MultiEchoDynamic> const &dynamics, std::vector<T2StarMap> const &maps,
                        ReconConfig const &config, std::size_t template_position = 0, std::size_t echo_index = 1);

std::string report_json(ReconResult const &result);
void write_slice_transforms(std::vector<SliceModel> const &slices, std::filesystem::path const &dir);

} // namespace t2s
