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

#include "t2s/denoise.hpp"

#include "t2s/error.hpp"
#include "t2s/parallel.hpp"

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace t2s {

void MeasurementStack::validate() const
{
  if (volumes.size() < 2) {
    throw ConfigError(fmt::format("denoising needs at least 2 measurements, got {}", volumes.size()));
  }
  for (auto const &v : volumes) {
    if (!v.geometry().same_as(volumes.front().geometry())) {
      throw ContractViolation("measurement volumes must share one geometry");
    }
  }
}

MeasurementStack MeasurementStack::from_series(std::vector<MultiEchoDynamic> const &series)
{
  MeasurementStack s;
  for (auto const &d : series) {
    for (auto const &e : d.echoes) {
      s.volumes.push_back(e);
    }
  }
  return s;
}

std::vector<MultiEchoDynamic> MeasurementStack::to_series(std::vector<MultiEchoDynamic> const &layout) const
{
  std::vector<MultiEchoDynamic> out;
  std::size_t m = 0;
  for (auto const &d : layout) {
    MultiEchoDynamic nd;
    nd.index = d.index;
    nd.tes_ms = d.tes_ms;
    for (std::size_t e = 0; e < d.echoes.size(); ++e) {
      if (m >= volumes.size()) {
        throw ContractViolation("measurement stack smaller than the series layout");
      }
      nd.echoes.push_back(volumes[m++]);
    }
    out.push_back(std::move(nd));
  }
  return out;
}

MpThreshold mp_threshold(std::span<double const> eigenvalues, int m, int n)
{
  int const r = int(eigenvalues.size());
  double const q = double(std::max(m, n));
  MpThreshold out;
  if (r == 0) {
    return out;
  }
  double const lam_r = std::max(eigenvalues[0], 0.0) / q;
  double clam = 0.0;
  for (int p = 0; p < r; ++p) {
    double const lam = std::max(eigenvalues[std::size_t(p)], 0.0) / q;
    clam += lam;
    double const gam = double(p + 1) / (q - double(r - p - 1));
    double const sigsq1 = clam / double(p + 1);
    double const sigsq2 = (lam - lam_r) / (4.0 * std::sqrt(gam));
    if (sigsq2 <= sigsq1) {
      out.sigma2 = sigsq1;
      out.noise_components = p + 1;
    }
  }
  return out;
}

namespace {

struct PatchResult {
  double sigma2;
  int rank;
};

// Denoises one patch in place. X holds measurements in rows, voxels in columns.
PatchResult denoise_patch(Eigen::MatrixXd &x)
{
  int const m = int(x.rows());
  int const n = int(x.cols());
  Eigen::VectorXd const mean = x.rowwise().mean();
  x.colwise() -= mean;

  // Centring removes one degree of freedom along the voxel axis.
  int const samples = n - 1;
  int const r = std::min(m, samples);
  if (r <= 0) {
    x.colwise() += mean;
    return {0.0, 0};
  }

  bool const small_m = m <= n;
  Eigen::MatrixXd const gram = small_m ? Eigen::MatrixXd(x * x.transpose()) : Eigen::MatrixXd(x.transpose() * x);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  Eigen::VectorXd const vals = eig.eigenvalues();
  int const dim = int(vals.size());
  int const skip = dim - r;
  double const top = std::max(vals[dim - 1], 0.0);
  std::vector<double> s(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    double const v = vals[skip + i];
    s[std::size_t(i)] = v <= 1e-12 * top ? 0.0 : v;
  }

  MpThreshold const th = mp_threshold(s, m, samples);
  int const rank = top > 0 ? r - th.noise_components : 0;
  if (rank <= 0) {
    x.setZero();
  } else if (rank < dim) {
    Eigen::MatrixXd const basis = eig.eigenvectors().rightCols(rank);
    if (small_m) {
      x = basis * (basis.transpose() * x);
    } else {
      x = (x * basis) * basis.transpose();
    }
  }
  x.colwise() += mean;
  return {th.sigma2, std::max(rank, 0)};
}

} // namespace

DenoiseResult mppca_denoise(MeasurementStack const &stack, DenoiseOptions const &options)
{
  stack.validate();
  if (options.patch_radius < 1) {
    throw ConfigError("patch radius must be >= 1");
  }
  GridGeometry const &geom = stack.geometry();
  Dims const d = geom.dims;
  int const m = int(stack.measurements());
  int const r = options.patch_radius;
  std::size_t const nvox = geom.voxel_count();
  std::size_t const plane = std::size_t(d.x) * std::size_t(d.y);

  DenoiseResult out;
  int const side = 2 * r + 1;
  if (side * side * side < m) {
    out.warnings.push_back(fmt::format("patch of {} voxels is smaller than the {} measurements", side * side * side, m));
  }

  std::vector<double> acc(nvox * std::size_t(m), 0.0);
  std::vector<double> sigma_acc(nvox, 0.0);
  std::vector<double> count(nvox, 0.0);
  std::vector<double> rank(nvox, 0.0);
  bool const centre_only = options.aggregation == Aggregation::CentreOnly;

  // Each z-plane of patch centres accumulates into a private slab of 2r+1
  // planes; slabs are merged in plane order so results do not depend on
  // the worker count.
  struct Slab {
    int z0 = 0;
    int planes = 0;
    std::vector<double> values; // [plane-local voxel][measurement]
    std::vector<double> sigma;
    std::vector<double> count;
  };
  std::size_t const batch = std::max<std::size_t>(1, thread_count());

  for (int zb = 0; zb < d.z; zb += int(batch)) {
    int const nb = std::min<int>(int(batch), d.z - zb);
    std::vector<Slab> slabs(static_cast<std::size_t>(nb));
    parallel_for(std::size_t(nb), [&](std::size_t b) {
      int const cz = zb + int(b);
      Slab &slab = slabs[b];
      slab.z0 = std::max(0, cz - r);
      int const z1 = std::min(d.z - 1, cz + r);
      slab.planes = z1 - slab.z0 + 1;
      std::size_t const slab_vox = std::size_t(slab.planes) * plane;
      slab.values.assign(slab_vox * std::size_t(m), 0.0);
      slab.sigma.assign(slab_vox, 0.0);
      slab.count.assign(slab_vox, 0.0);

      std::vector<std::size_t> idx;
      Eigen::MatrixXd x;
      for (int cy = 0; cy < d.y; ++cy) {
        for (int cx = 0; cx < d.x; ++cx) {
          idx.clear();
          std::size_t centre_col = 0;
          for (int z = slab.z0; z <= z1; ++z) {
            for (int y = std::max(0, cy - r); y <= std::min(d.y - 1, cy + r); ++y) {
              for (int xx = std::max(0, cx - r); xx <= std::min(d.x - 1, cx + r); ++xx) {
                if (z == cz && y == cy && xx == cx) {
                  centre_col = idx.size();
                }
                idx.push_back(geom.linear_index(xx, y, z));
              }
            }
          }
          x.resize(m, Eigen::Index(idx.size()));
          for (std::size_t c = 0; c < idx.size(); ++c) {
            for (int mm = 0; mm < m; ++mm) {
              x(mm, Eigen::Index(c)) = stack.volumes[std::size_t(mm)][idx[c]];
            }
          }
          PatchResult const pr = denoise_patch(x);
          std::size_t const centre = geom.linear_index(cx, cy, cz);
          rank[centre] = pr.rank;
          std::size_t const offset = std::size_t(slab.z0) * plane;
          for (std::size_t c = 0; c < idx.size(); ++c) {
            if (centre_only && c != centre_col) {
              continue;
            }
            std::size_t const local = idx[c] - offset;
            for (int mm = 0; mm < m; ++mm) {
              slab.values[local * std::size_t(m) + std::size_t(mm)] += x(mm, Eigen::Index(c));
            }
            slab.sigma[local] += std::sqrt(std::max(pr.sigma2, 0.0));
            slab.count[local] += 1.0;
          }
        }
      }
    });
    for (auto const &slab : slabs) {
      std::size_t const offset = std::size_t(slab.z0) * plane;
      std::size_t const slab_vox = std::size_t(slab.planes) * plane;
      for (std::size_t v = 0; v < slab_vox; ++v) {
        std::size_t const g = offset + v;
        for (int mm = 0; mm < m; ++mm) {
          acc[g * std::size_t(m) + std::size_t(mm)] += slab.values[v * std::size_t(m) + std::size_t(mm)];
        }
        sigma_acc[g] += slab.sigma[v];
        count[g] += slab.count[v];
      }
    }
  }

  out.stack.volumes.reserve(std::size_t(m));
  for (int mm = 0; mm < m; ++mm) {
    std::vector<double> data(nvox);
    for (std::size_t v = 0; v < nvox; ++v) {
      data[v] = acc[v * std::size_t(m) + std::size_t(mm)] / count[v];
    }
    out.stack.volumes.emplace_back(geom, std::move(data), stack.volumes[std::size_t(mm)].unit());
  }
  std::vector<double> sigma(nvox);
  for (std::size_t v = 0; v < nvox; ++v) {
    sigma[v] = sigma_acc[v] / count[v];
  }
  out.noise.sigma = VoxelGrid(geom, std::move(sigma), UnitTag::Signal);
  out.noise.rank = VoxelGrid(geom, std::move(rank), UnitTag::Signal);
  return out;
}

std::vector<MultiEchoDynamic> mppca_denoise_per_echo(std::vector<MultiEchoDynamic> const &series,
                                                     DenoiseOptions const &options, NoiseMap *noise)
{
  if (series.empty()) {
    throw ConfigError("no dynamics to denoise");
  }
  std::vector<MultiEchoDynamic> out = series;
  std::size_t const echoes = series.front().echoes.size();
  std::vector<double> sigma_sum;
  for (std::size_t e = 0; e < echoes; ++e) {
    MeasurementStack s;
    for (auto const &d : series) {
      s.volumes.push_back(d.echoes.at(e));
    }
    DenoiseResult r = mppca_denoise(s, options);
    for (std::size_t i = 0; i < series.size(); ++i) {
      out[i].echoes[e] = std::move(r.stack.volumes[i]);
    }
    if (noise) {
      if (e == 0) {
        *noise = r.noise;
      } else {
        for (std::size_t v = 0; v < noise->sigma.size(); ++v) {
          noise->sigma[v] += r.noise.sigma[v];
        }
      }
    }
  }
  if (noise) {
    for (std::size_t v = 0; v < noise->sigma.size(); ++v) {
      noise->sigma[v] /= double(echoes);
    }
  }
  return out;
}

} // namespace t2s
