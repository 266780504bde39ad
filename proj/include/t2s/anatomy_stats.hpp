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

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace t2s {

struct LabelMap {
  VoxelGrid grid;

  // Codes must be integers in 0..10.
  void validate() const;
  std::size_t count(int label) const;
};

double dice(LabelMap const &a, LabelMap const &b, int label);

struct OrganStats {
  int label = 0;
  std::size_t voxel_count = 0;
  std::size_t n = 0; // voxels used for the T2* statistics
  double volume_ml = 0.0;
  std::optional<double> t2s_mean;
  std::optional<double> t2s_sd;
  std::size_t excluded_failed = 0;
};

// One entry per organ code 1..10, in code order.
// An empty failure mask means no voxel failed.
std::vector<OrganStats> organ_stats(VoxelGrid const &t2s, Mask const &failed, LabelMap const &labels);

struct ConsistencyResult {
  std::vector<double> dynamic_means;
  double mean = 0.0;
  double sigma = 0.0;
  double band_lo = 0.0;
  double band_hi = 0.0;
  double recon_mean = 0.0;
  bool pass = false;
};

ConsistencyResult consistency_check(std::span<double const> dynamic_means, double recon_mean);
// Same decision from an already summarised mean and band.
ConsistencyResult consistency_from_band(double mean, double band_lo, double band_hi, double recon_mean);

struct GrowthCurve {
  int organ = 0;
  // Regressed quantity, written as the CSV metric column.
  std::string metric = "t2s_mean";
  std::size_t n = 0;
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double pearson_r = 0.0;
};

GrowthCurve fit_growth_curve(std::vector<std::pair<double, double>> const &points, int organ = 0);

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  double p = 1.0;
};

WelchResult welch_t_test(std::span<double const> a, std::span<double const> b);

struct OrganStatsRow {
  std::string case_id;
  double ga_weeks = 0.0;
  OrganStats stats;
};

void write_organ_stats_csv(std::ostream &out, std::vector<OrganStatsRow> const &rows);
void write_growth_curves_csv(std::ostream &out, std::vector<GrowthCurve> const &curves);

struct ConsistencyRow {
  std::string case_id;
  int organ = 0;
  ConsistencyResult result;
};

void write_consistency_csv(std::ostream &out, std::vector<ConsistencyRow> const &rows);

} // namespace t2s
