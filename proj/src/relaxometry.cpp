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

#include "t2s/relaxometry.hpp"

#include "t2s/error.hpp"
#include "t2s/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace t2s {

namespace {

// Gauss-Newton with Levenberg damping on S0 exp(-TE R).
void refine(std::span<double const> signals, std::span<double const> tes, double &s0, double &rate)
{
  double lambda = 1e-3;
  auto cost = [&](double a, double r) {
    double c = 0;
    for (std::size_t i = 0; i < tes.size(); ++i) {
      double const e = signals[i] - a * std::exp(-tes[i] * r);
      c += e * e;
    }
    return c;
  };
  double current = cost(s0, rate);
  for (int it = 0; it < 50; ++it) {
    double jtj00 = 0, jtj01 = 0, jtj11 = 0, g0 = 0, g1 = 0;
    for (std::size_t i = 0; i < tes.size(); ++i) {
      double const ex = std::exp(-tes[i] * rate);
      double const model = s0 * ex;
      double const d0 = ex, d1 = -tes[i] * model;
      double const res = signals[i] - model;
      jtj00 += d0 * d0;
      jtj01 += d0 * d1;
      jtj11 += d1 * d1;
      g0 += d0 * res;
      g1 += d1 * res;
    }
    double const a00 = jtj00 * (1 + lambda), a11 = jtj11 * (1 + lambda);
    double const det = a00 * a11 - jtj01 * jtj01;
    if (!(std::abs(det) > 0)) {
      return;
    }
    double const ds = (a11 * g0 - jtj01 * g1) / det;
    double const dr = (a00 * g1 - jtj01 * g0) / det;
    double const trial = cost(s0 + ds, rate + dr);
    if (trial < current) {
      s0 += ds;
      rate += dr;
      bool const done = current - trial < 1e-12 * (current + 1e-300);
      current = trial;
      lambda *= 0.3;
      if (done) {
        return;
      }
    } else {
      lambda *= 10;
      if (lambda > 1e8) {
        return;
      }
    }
  }
}

} // namespace

VoxelFit fit_voxel(std::span<double const> signals, std::span<double const> tes_ms, FitOptions const &options)
{
  if (signals.size() != tes_ms.size()) {
    throw ContractViolation(
        fmt::format("fit_voxel: {} signals but {} echo times", signals.size(), tes_ms.size()));
  }
  if (signals.size() < 2) {
    throw ContractViolation("fit_voxel: at least 2 echoes required");
  }
  VoxelFit out;
  std::size_t const n = signals.size();
  for (double s : signals) {
    if (!std::isfinite(s) || s <= 0.0) {
      return out;
    }
  }

  double xm = 0, ym = 0;
  for (std::size_t i = 0; i < n; ++i) {
    xm += tes_ms[i];
    ym += std::log(signals[i]);
  }
  xm /= double(n);
  ym /= double(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double const dx = tes_ms[i] - xm, dy = std::log(signals[i]) - ym;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0)) {
    throw ContractViolation("fit_voxel: echo times must not all be equal");
  }
  double const slope = sxy / sxx;
  double const intercept = ym - slope * xm;
  if (!(slope < 0.0)) {
    return out;
  }
  double t2s = -1.0 / slope;
  double s0 = std::exp(intercept);
  double const r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  if (!(t2s <= options.t2star_cap_ms) || !std::isfinite(s0)) {
    return out;
  }
  if (options.min_r2 && r2 < *options.min_r2) {
    return out;
  }
  if (options.nonlinear_refine) {
    double rate = 1.0 / t2s;
    double a = s0;
    refine(signals, tes_ms, a, rate);
    if (rate > 0 && a > 0 && 1.0 / rate <= options.t2star_cap_ms) {
      t2s = 1.0 / rate;
      s0 = a;
    }
  }
  out.s0 = s0;
  out.t2star_ms = t2s;
  out.r2 = r2;
  out.failed = false;
  return out;
}

VoxelFit fit_voxel(std::span<double const> signals, std::span<double const> tes_ms, double t2star_cap_ms)
{
  FitOptions o;
  o.t2star_cap_ms = t2star_cap_ms;
  return fit_voxel(signals, tes_ms, o);
}

DynamicFit map_dynamic(MultiEchoDynamic const &dynamic, FitOptions const &options)
{
  dynamic.validate();
  GridGeometry const &geom = dynamic.geometry();
  std::size_t const n = geom.voxel_count();
  std::size_t const n_echo = dynamic.echoes.size();

  DynamicFit out;
  out.map.t2star = VoxelGrid(geom, UnitTag::Milliseconds);
  out.map.s0 = VoxelGrid(geom, UnitTag::Signal);
  out.map.fit_r2 = VoxelGrid(geom, UnitTag::Signal);
  out.map.failed.assign(n, 1);

  std::size_t const plane = std::size_t(geom.dims.x) * std::size_t(geom.dims.y);
  parallel_for(std::size_t(geom.dims.z), [&](std::size_t k) {
    std::vector<double> sig(n_echo);
    for (std::size_t v = k * plane; v < (k + 1) * plane; ++v) {
      for (std::size_t e = 0; e < n_echo; ++e) {
        sig[e] = dynamic.echoes[e][v];
      }
      VoxelFit const f = fit_voxel(sig, dynamic.tes_ms, options);
      if (!f.failed) {
        out.map.t2star[v] = f.t2star_ms;
        out.map.s0[v] = f.s0;
        out.map.fit_r2[v] = f.r2;
        out.map.failed[v] = 0;
      }
    }
  });

  std::vector<double> ok;
  for (std::size_t v = 0; v < n; ++v) {
    if (!out.map.failed[v]) {
      ok.push_back(out.map.t2star[v]);
    }
  }
  out.summary.fitted = ok.size();
  out.summary.failed_fraction = 1.0 - double(ok.size()) / double(n);
  if (!ok.empty()) {
    std::size_t const mid = ok.size() / 2;
    std::nth_element(ok.begin(), ok.begin() + std::ptrdiff_t(mid), ok.end());
    double med = ok[mid];
    if (ok.size() % 2 == 0) {
      med = 0.5 * (med + *std::max_element(ok.begin(), ok.begin() + std::ptrdiff_t(mid)));
    }
    out.summary.median_t2star_ms = med;
  }
  return out;
}

} // namespace t2s
