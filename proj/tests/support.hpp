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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace t2s::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(std::string const &tag)
  {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("t2s_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir()
  {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(TempDir const &) = delete;
  TempDir &operator=(TempDir const &) = delete;

  std::filesystem::path const &path() const { return path_; }
  std::filesystem::path operator/(std::string const &name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

// Voxels of `label` whose whole (2r+1)^3 neighbourhood carries the same label.
inline Mask interior(VoxelGrid const &labels, int label, int r)
{
  Dims const d = labels.dims();
  Mask m(labels.size(), 0);
  for (int k = r; k < d.z - r; ++k) {
    for (int j = r; j < d.y - r; ++j) {
      for (int i = r; i < d.x - r; ++i) {
        bool ok = true;
        for (int c = -r; c <= r && ok; ++c) {
          for (int b = -r; b <= r && ok; ++b) {
            for (int a = -r; a <= r && ok; ++a) {
              ok = int(labels.at(i + a, j + b, k + c)) == label;
            }
          }
        }
        m[labels.geometry().linear_index(i, j, k)] = ok ? 1 : 0;
      }
    }
  }
  return m;
}

inline double psnr(VoxelGrid const &x, VoxelGrid const &truth, Mask const &valid)
{
  double peak = 0.0, se = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < truth.size(); ++v) {
    peak = std::max(peak, truth[v]);
    if (valid[v]) {
      se += (x[v] - truth[v]) * (x[v] - truth[v]);
      ++n;
    }
  }
  return 10.0 * std::log10(peak * peak / (se / double(n)));
}

inline double rmse(VoxelGrid const &x, VoxelGrid const &truth, Mask const &valid)
{
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < truth.size(); ++v) {
    if (valid.empty() || valid[v]) {
      se += (x[v] - truth[v]) * (x[v] - truth[v]);
      ++n;
    }
  }
  return std::sqrt(se / double(n));
}

} // namespace t2s::testing
