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

#include "support.hpp"

#include "t2s/denoise.hpp"
#include "t2s/error.hpp"
#include "t2s/parallel.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace t2s;

namespace {

GridGeometry small_grid(int n) { return centred_geometry(Dims{n, n, n}, Vec3(2.0, 2.0, 2.0)); }

// Smooth positive image with some structure.
VoxelGrid pattern(GridGeometry const &g, double phase)
{
  VoxelGrid out(g);
  Dims const d = g.dims;
  for (int k = 0; k < d.z; ++k) {
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        out.at(i, j, k) = 300.0 + 120.0 * std::sin(0.7 * i + phase) * std::cos(0.5 * j - phase) + 40.0 * k;
      }
    }
  }
  return out;
}

MeasurementStack rank2_stack(GridGeometry const &g, int m)
{
  VoxelGrid const a = pattern(g, 0.0);
  VoxelGrid const b = pattern(g, 1.3);
  MeasurementStack s;
  for (int t = 0; t < m; ++t) {
    double const u = std::exp(-0.05 * t);
    double const w = 0.5 + 0.4 * std::cos(0.3 * t);
    VoxelGrid v(g);
    for (std::size_t n = 0; n < v.size(); ++n) {
      v[n] = u * a[n] + w * b[n];
    }
    s.volumes.push_back(std::move(v));
  }
  return s;
}

MeasurementStack add_noise(MeasurementStack s, double sigma, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto &v : s.volumes) {
    for (double &x : v.data()) {
      x += nd(rng);
    }
  }
  return s;
}

double frobenius(MeasurementStack const &a, MeasurementStack const &b)
{
  double s = 0.0;
  for (std::size_t m = 0; m < a.measurements(); ++m) {
    for (std::size_t n = 0; n < a.volumes[m].size(); ++n) {
      double const d = a.volumes[m][n] - b.volumes[m][n];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

double variance(std::span<double const> x)
{
  double m = 0.0;
  for (double v : x) {
    m += v;
  }
  m /= double(x.size());
  double s = 0.0;
  for (double v : x) {
    s += (v - m) * (v - m);
  }
  return s / double(x.size() - 1);
}

} // namespace

TEST_CASE("mp_threshold partitions a known spectrum")
{
  // Equal eigenvalues are all noise with sigma^2 = lambda / max(m, n).
  std::vector<double> const flat(8, 400.0);
  MpThreshold const f = mp_threshold(flat, 8, 100);
  CHECK(f.noise_components == 8);
  CHECK(f.sigma2 == doctest::Approx(4.0));

  // A single large spike is signal.
  std::vector<double> const spike{100.0, 100.0, 100.0, 100000.0};
  MpThreshold const s = mp_threshold(spike, 4, 100);
  CHECK(s.noise_components == 3);
  CHECK(s.sigma2 == doctest::Approx(1.0));

  // Noiseless rank-1: zeros below one component.
  std::vector<double> const r1{0.0, 0.0, 0.0, 5000.0};
  MpThreshold const z = mp_threshold(r1, 4, 100);
  CHECK(z.noise_components == 3);
  CHECK(z.sigma2 == 0.0);

  CHECK(mp_threshold(std::span<double const>{}, 0, 0).noise_components == 0);
}

TEST_CASE("noiseless rank-1 stack is a fixed point")
{
  GridGeometry const g = small_grid(7);
  VoxelGrid const base = pattern(g, 0.4);
  MeasurementStack s;
  for (int t = 0; t < 6; ++t) {
    VoxelGrid v(g);
    for (std::size_t n = 0; n < v.size(); ++n) {
      v[n] = (1.0 + 0.3 * t) * base[n];
    }
    s.volumes.push_back(std::move(v));
  }
  DenoiseResult const r = mppca_denoise(s);
  CHECK(frobenius(r.stack, s) / std::sqrt(double(6 * base.size())) < 1e-6);
  for (std::size_t n = 0; n < base.size(); ++n) {
    REQUIRE(std::abs(r.stack.volumes[3][n] - s.volumes[3][n]) < 1e-6);
    REQUIRE(r.noise.rank[n] == 1.0);
    REQUIRE(r.noise.sigma[n] < 1e-6);
  }
}

TEST_CASE("noiseless low-rank stack is a fixed point")
{
  MeasurementStack const s = rank2_stack(small_grid(7), 8);
  DenoiseResult const r = mppca_denoise(s);
  for (std::size_t m = 0; m < s.measurements(); ++m) {
    for (std::size_t n = 0; n < s.volumes[m].size(); ++n) {
      REQUIRE(std::abs(r.stack.volumes[m][n] - s.volumes[m][n]) < 1e-6);
    }
  }
}

TEST_CASE("pure noise: sigma estimate and variance reduction")
{
  GridGeometry const g = small_grid(8);
  double sigma_sum = 0.0, ratio_max = 0.0;
  int const reps = 20;
  for (int rep = 0; rep < reps; ++rep) {
    MeasurementStack zero;
    for (int t = 0; t < 45; ++t) {
      zero.volumes.emplace_back(g);
    }
    MeasurementStack const noisy = add_noise(zero, 50.0, 1000 + std::uint64_t(rep));
    DenoiseResult const r = mppca_denoise(noisy);
    double s = 0.0;
    for (double v : r.noise.sigma.data()) {
      s += v;
    }
    sigma_sum += s / double(r.noise.sigma.size());
    double vin = 0.0, vout = 0.0;
    for (std::size_t m = 0; m < noisy.measurements(); ++m) {
      vin += variance(noisy.volumes[m].data());
      vout += variance(r.stack.volumes[m].data());
    }
    ratio_max = std::max(ratio_max, vout / vin);
  }
  double const sigma = sigma_sum / reps;
  CHECK(std::abs(sigma / 50.0 - 1.0) < 0.10);
  CHECK(ratio_max < 0.20);
}

TEST_CASE("rank-2 signal plus noise moves towards the noiseless stack")
{
  GridGeometry const g = small_grid(8);
  MeasurementStack const clean = rank2_stack(g, 12);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MeasurementStack const noisy = add_noise(clean, 5.0, seed);
    DenoiseResult const r = mppca_denoise(noisy);
    CHECK(frobenius(r.stack, clean) < frobenius(noisy, clean));
  }
}

TEST_CASE("sigma is invariant to a global offset")
{
  GridGeometry const g = small_grid(7);
  MeasurementStack const noisy = add_noise(rank2_stack(g, 10), 5.0, 3);
  MeasurementStack shifted = noisy;
  for (auto &v : shifted.volumes) {
    for (double &x : v.data()) {
      x += 1000.0;
    }
  }
  DenoiseResult const a = mppca_denoise(noisy);
  DenoiseResult const b = mppca_denoise(shifted);
  for (std::size_t n = 0; n < a.noise.sigma.size(); ++n) {
    REQUIRE(std::abs(a.noise.sigma[n] - b.noise.sigma[n]) < 1e-9);
    REQUIRE(a.noise.rank[n] == b.noise.rank[n]);
  }
}

TEST_CASE("result does not depend on the worker count")
{
  GridGeometry const g = small_grid(7);
  MeasurementStack const noisy = add_noise(rank2_stack(g, 10), 5.0, 4);
  unsigned const saved = thread_count();
  set_thread_count(1);
  DenoiseResult const a = mppca_denoise(noisy);
  set_thread_count(4);
  DenoiseResult const b = mppca_denoise(noisy);
  set_thread_count(saved);
  CHECK(frobenius(a.stack, b.stack) < 1e-6);
}

TEST_CASE("centre-only aggregation and edge truncation")
{
  GridGeometry const g = centred_geometry(Dims{3, 4, 2}, Vec3(2, 2, 2));
  MeasurementStack const noisy = add_noise(rank2_stack(g, 5), 5.0, 8);
  DenoiseOptions o;
  o.aggregation = Aggregation::CentreOnly;
  DenoiseResult const r = mppca_denoise(noisy, o);
  CHECK(r.stack.geometry().same_as(g));
  for (double v : r.noise.sigma.data()) {
    CHECK(v >= 0.0);
  }
  for (double v : r.noise.rank.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 5.0);
  }
}

TEST_CASE("denoise argument errors")
{
  GridGeometry const g = small_grid(5);
  MeasurementStack one;
  one.volumes.emplace_back(g);
  CHECK_THROWS_AS(mppca_denoise(one), ConfigError);
  MeasurementStack mixed;
  mixed.volumes.emplace_back(g);
  mixed.volumes.emplace_back(small_grid(6));
  CHECK_THROWS_AS(mppca_denoise(mixed), ContractViolation);
}

TEST_CASE("series flattening round trip and per-echo mode")
{
  GridGeometry const g = small_grid(6);
  std::vector<MultiEchoDynamic> series;
  for (int d = 0; d < 4; ++d) {
    MultiEchoDynamic dyn;
    dyn.index = d;
    dyn.tes_ms = {46, 120, 194};
    for (int e = 0; e < 3; ++e) {
      dyn.echoes.push_back(pattern(g, 0.1 * d + e));
    }
    series.push_back(std::move(dyn));
  }
  MeasurementStack const flat = MeasurementStack::from_series(series);
  REQUIRE(flat.measurements() == 12);
  CHECK(flat.volumes[5][7] == series[1].echoes[2][7]);
  std::vector<MultiEchoDynamic> const back = flat.to_series(series);
  CHECK(back[3].echoes[1][11] == series[3].echoes[1][11]);
  CHECK(back[2].index == 2);

  NoiseMap noise;
  std::vector<MultiEchoDynamic> const per = mppca_denoise_per_echo(series, DenoiseOptions{}, &noise);
  REQUIRE(per.size() == 4);
  CHECK(per[0].echoes.size() == 3);
  CHECK(noise.sigma.geometry().same_as(g));
}
