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

#include "t2s/motion_qc.hpp"

#include "t2s/error.hpp"
#include "t2s/numeric.hpp"
#include "t2s/parallel.hpp"

#include <fmt/format.h>
#include <fmt/os.h>

#include <algorithm>

namespace t2s {

void QcThresholds::validate() const
{
  auto ok = [](double t) { return t >= -1.0 && t <= 1.0; };
  if (!ok(ncc) || !ok(slice_consistency)) {
    throw ConfigError(fmt::format("QC thresholds must lie in [-1, 1], got ncc={} slice_consistency={}", ncc,
                                  slice_consistency));
  }
}

VoxelGrid median_reference(std::vector<MultiEchoDynamic> const &dynamics, std::size_t echo_index)
{
  GridGeometry const &geom = dynamics.front().echoes.at(echo_index).geometry();
  std::size_t const n = geom.voxel_count();
  std::vector<double> out(n);
  std::vector<double> column(dynamics.size());
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t d = 0; d < dynamics.size(); ++d) {
      column[d] = dynamics[d].echoes[echo_index][v];
    }
    out[v] = median(column);
  }
  return VoxelGrid(geom, std::move(out));
}

double slice_consistency(VoxelGrid const &volume)
{
  Dims const d = volume.dims();
  std::size_t const plane = std::size_t(d.x) * std::size_t(d.y);
  auto data = volume.data();
  double sum = 0.0;
  int pairs = 0;
  for (int z = 0; z + 1 < d.z; ++z) {
    auto a = data.subspan(std::size_t(z) * plane, plane);
    auto b = data.subspan(std::size_t(z + 1) * plane, plane);
    auto constant = [](std::span<double const> s) {
      return std::all_of(s.begin(), s.end(), [&](double x) { return x == s.front(); });
    };
    if (constant(a) || constant(b)) {
      continue;
    }
    sum += ncc(a, b);
    ++pairs;
  }
  return pairs > 0 ? sum / pairs : 0.0;
}

std::vector<DynamicScore> score_dynamics(std::vector<MultiEchoDynamic> const &dynamics, std::size_t echo_index,
                                         QcThresholds const &thresholds)
{
  if (dynamics.size() < 3) {
    throw ConfigError(fmt::format("motion QC needs at least 3 dynamics, got {}", dynamics.size()));
  }
  thresholds.validate();
  for (auto const &d : dynamics) {
    if (echo_index >= d.echoes.size()) {
      throw ConfigError(fmt::format("echo index {} out of range for {} echoes", echo_index, d.echoes.size()));
    }
    if (!d.echoes[echo_index].geometry().same_as(dynamics.front().echoes[echo_index].geometry())) {
      throw ContractViolation("dynamics must share one geometry for motion QC");
    }
  }
  VoxelGrid const ref = median_reference(dynamics, echo_index);
  std::vector<DynamicScore> scores(dynamics.size());
  parallel_for(dynamics.size(), [&](std::size_t i) {
    VoxelGrid const &vol = dynamics[i].echoes[echo_index];
    DynamicScore &s = scores[i];
    s.dynamic = dynamics[i].index;
    s.ncc_to_reference = ncc(vol.data(), ref.data());
    s.slice_consistency = slice_consistency(vol);
  });
  apply_qc(scores, thresholds);
  return scores;
}

std::vector<int> apply_qc(std::vector<DynamicScore> &scores, QcThresholds const &thresholds,
                          QcOverrides const &overrides)
{
  thresholds.validate();
  auto check = [&](std::vector<int> const &list, char const *what) {
    for (int idx : list) {
      bool const found =
          std::any_of(scores.begin(), scores.end(), [&](DynamicScore const &s) { return s.dynamic == idx; });
      if (!found) {
        throw ConfigError(fmt::format("{} override names dynamic {} which is not in the series", what, idx));
      }
    }
  };
  check(overrides.keep, "keep");
  check(overrides.drop, "drop");

  auto listed = [](std::vector<int> const &list, int idx) {
    return std::find(list.begin(), list.end(), idx) != list.end();
  };
  std::vector<int> kept;
  for (auto &s : scores) {
    bool const ncc_ok = s.ncc_to_reference >= thresholds.ncc;
    bool const slice_ok = s.slice_consistency >= thresholds.slice_consistency;
    s.kept = ncc_ok && slice_ok;
    if (s.kept) {
      s.reason = "pass";
    } else if (!ncc_ok && !slice_ok) {
      s.reason = "ncc+slice_consistency";
    } else {
      s.reason = ncc_ok ? "slice_consistency" : "ncc";
    }
    if (listed(overrides.keep, s.dynamic)) {
      s.kept = true;
      s.reason = "forced_keep";
    }
    if (listed(overrides.drop, s.dynamic)) {
      s.kept = false;
      s.reason = "forced_drop";
    }
    if (s.kept) {
      kept.push_back(s.dynamic);
    }
  }
  return kept;
}

void write_qc_report(std::filesystem::path const &path, std::vector<DynamicScore> const &scores)
{
  auto out = fmt::output_file(path.string());
  out.print("dynamic,ncc,slice_consistency,kept,reason\n");
  for (auto const &s : scores) {
    out.print("{},{:.6f},{:.6f},{},{}\n", s.dynamic, s.ncc_to_reference, s.slice_consistency, s.kept ? 1 : 0,
              s.reason);
  }
}

} // namespace t2s
