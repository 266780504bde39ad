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

#include "t2s/anatomy_stats.hpp"
#include "t2s/denoise.hpp"
#include "t2s/error.hpp"
#include "t2s/motion_qc.hpp"
#include "t2s/phantom.hpp"
#include "t2s/relaxometry.hpp"
#include "t2s/svr.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace t2s {

// Phantom dataset written by `t2s simulate`.
struct SimulateSettings {
  double ga_weeks = 28.0;
  Dims dims{84, 84, 72};
  Vec3 spacing_mm{1.2, 1.2, 1.2};
  std::uint64_t geometry_seed = 1;
  int dynamics = 20;
  Vec3 acquisition_voxel_mm{3.125, 3.125, 3.0};
  // Per-dynamic rigid motion drawn uniformly in [-max, max] per axis, scaled
  // so the rotation angle and translation length stay below the maxima.
  // Dynamic 0 is never moved.
  double max_rotation_deg = 5.0;
  double max_translation_mm = 5.0;
  // Dynamics given a fixed large displacement (QC outliers).
  std::vector<int> outliers;
  double outlier_rotation_deg = 30.0;
  double outlier_translation_mm = 25.0;
  // Explicit poses replace the random draw when non-empty (one per dynamic).
  std::vector<RigidTransform> motion;
  double slice_jitter_deg = 0.0;
  double slice_jitter_mm = 0.0;
  double noise_sigma = 20.0;
  NoiseModel noise = NoiseModel::Gaussian;
  OrganTable organ_overrides;
};

struct PipelineConfig {
  // Echo series directory (dyn{d:03}_echo{e}.nii.gz).
  std::filesystem::path input;
  std::filesystem::path output = "t2s_out";
  // Optional uint8 label map. When given it also fixes the reconstruction grid.
  std::filesystem::path labels;
  // Optional second label map; the report then includes Dice per organ.
  std::filesystem::path reference_labels;
  std::string case_id = "case";
  double ga_weeks = 28.0;
  std::vector<double> tes_ms = default_echo_times();
  // -1 reads every dynamic found.
  int dynamics = -1;
  std::size_t structural_echo = 1;
  bool denoise = true;
  DenoiseOptions denoise_options;
  FitOptions fit;
  QcThresholds qc;
  QcOverrides overrides;
  ReconConfig recon;
  // PSF from the input voxel size unless set explicitly.
  bool psf_from_input = true;
  // organ_stats.csv files pooled by the growth stage; empty uses this case.
  std::vector<std::filesystem::path> cohort;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  SimulateSettings simulate;

  void validate() const;
};

// Relative paths resolve against base_dir. Unknown keys are rejected.
PipelineConfig parse_config(std::string_view json_text, std::filesystem::path const &base_dir = {});
PipelineConfig load_config(std::filesystem::path const &path);
std::string config_json(PipelineConfig const &config);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

enum class Stage { Denoise, Fit, Qc, Recon, Stats, Growth, Report };
std::string_view stage_name(Stage stage);

// Failure inside a pipeline stage, tagged with the stage and the exit code
// the original error maps to.
class StageFailure : public Error {
public:
  StageFailure(Stage stage, int exit_code, std::string const &message);
  Stage stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return exit_code_; }

private:
  Stage stage_;
  int exit_code_;
};

// 2 for configuration and contract errors, 1 otherwise.
int exit_code_for(std::exception const &error);

struct StageOutcome {
  Stage stage;
  bool skipped = false;
  std::string note;
};

using StageLog = std::function<void(StageOutcome const &)>;

std::filesystem::path stage_dir(PipelineConfig const &config, Stage stage);

// Runs one stage unless its stamp matches the current inputs and settings.
StageOutcome run_stage(PipelineConfig const &config, Stage stage, bool force = false);

// denoise (unless disabled), fit, qc, recon, then stats/growth/report when
// their inputs exist.
std::vector<StageOutcome> run_pipeline(PipelineConfig const &config, StageLog const &log = {});

// Writes the echo series, truth/ and phantom.json into `dir`.
SimulatedSeries simulate_dataset(PipelineConfig const &config, std::filesystem::path const &dir);
MotionScript motion_script(SimulateSettings const &settings, std::uint64_t seed);

// Mean T2* per organ of each dynamic's map, carried through that
// dynamic's slice poses onto `labels`; [stack position][organ code - 1].
std::vector<std::vector<std::optional<double>>> dynamic_organ_means(ReconResult const &result,
                                                                    std::vector<T2StarMap> const &maps,
                                                                    LabelMap const &labels,
                                                                    ReconConfig const &config);

// Scatter plot of (x, y) points with the fitted line, as standalone SVG.
std::string growth_svg(std::string_view title, std::string_view y_label,
                       std::vector<std::pair<double, double>> const &points, GrowthCurve const *curve);

} // namespace t2s
