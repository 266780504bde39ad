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

#include "t2s/series.hpp"

#include "t2s/error.hpp"
#include "t2s/nifti.hpp"

#include <fmt/format.h>

namespace t2s {

void MultiEchoDynamic::validate() const
{
  if (echoes.size() < 2) {
    throw ContractViolation(fmt::format("dynamic {}: at least 2 echoes required, got {}", index, echoes.size()));
  }
  if (echoes.size() != tes_ms.size()) {
    throw ContractViolation(
        fmt::format("dynamic {}: {} echoes but {} echo times", index, echoes.size(), tes_ms.size()));
  }
  for (std::size_t e = 0; e < tes_ms.size(); ++e) {
    if (!(tes_ms[e] > 0) || (e > 0 && !(tes_ms[e] > tes_ms[e - 1]))) {
      throw ContractViolation(fmt::format("dynamic {}: echo times must be positive and strictly increasing", index));
    }
    if (!echoes[e].geometry().same_as(echoes.front().geometry())) {
      throw ContractViolation(fmt::format("dynamic {}: echo {} geometry differs from echo 0", index, e));
    }
  }
}

std::string echo_filename(int dynamic, int echo) { return fmt::format("dyn{:03}_echo{}.nii.gz", dynamic, echo); }

void write_series(std::vector<MultiEchoDynamic> const &series, std::filesystem::path const &dir)
{
  std::filesystem::create_directories(dir);
  for (auto const &dyn : series) {
    for (std::size_t e = 0; e < dyn.echoes.size(); ++e) {
      write_volume(dyn.echoes[e], dir / echo_filename(dyn.index, int(e)));
    }
  }
}

std::vector<MultiEchoDynamic> read_series(std::filesystem::path const &dir, std::vector<double> const &tes_ms,
                                          int dynamics)
{
  if (dynamics < 0) {
    dynamics = 0;
    while (std::filesystem::exists(dir / echo_filename(dynamics, 0))) {
      ++dynamics;
    }
    if (dynamics == 0) {
      throw IntegrityError(fmt::format("missing echo file '{}'", (dir / echo_filename(0, 0)).string()));
    }
  }
  std::vector<MultiEchoDynamic> out;
  for (int d = 0; d < dynamics; ++d) {
    MultiEchoDynamic dyn;
    dyn.index = d;
    dyn.tes_ms = tes_ms;
    for (std::size_t e = 0; e < tes_ms.size(); ++e) {
      auto const path = dir / echo_filename(d, int(e));
      if (!std::filesystem::exists(path)) {
        throw IntegrityError(fmt::format("missing echo file '{}'", path.string()));
      }
      dyn.echoes.push_back(read_volume(path));
    }
    dyn.validate();
    out.push_back(std::move(dyn));
  }
  return out;
}

} // namespace t2s
