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

#include "t2s/error.hpp"
#include "t2s/motion_qc.hpp"
#include "t2s/phantom.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

using namespace t2s;

namespace {

DigitalPhantom const &small_phantom()
{
  static DigitalPhantom const p = make_phantom(28.0, Dims{56, 56, 48}, Vec3(1.8, 1.8, 1.8), 5);
  return p;
}

std::vector<MultiEchoDynamic> simulate(std::vector<DynamicMotion> const &motion, double noise = 0.0)
{
  DigitalPhantom const &p = small_phantom();
  MotionScript script;
  script.dynamics = motion;
  script.noise_sigma = noise;
  script.seed = 11;
  SimulationOptions so;
  so.keep_noiseless = false;
  return simulate_acquisition(p, script, default_echo_times(), AcquisitionGeometry::covering(p), so).dynamics;
}

DynamicMotion shifted(double mm, double deg = 0.0)
{
  DynamicMotion m;
  m.pose = RigidTransform{Vec3(0.0, 0.0, deg), Vec3(mm, 0.0, 0.0)};
  return m;
}

} // namespace

TEST_CASE("identical dynamics score 1 and are all kept")
{
  std::vector<MultiEchoDynamic> dyn = simulate(std::vector<DynamicMotion>(1));
  dyn.resize(4, dyn.front());
  for (int d = 0; d < 4; ++d) {
    dyn[std::size_t(d)].index = d;
  }
  auto const scores = score_dynamics(dyn);
  REQUIRE(scores.size() == 4);
  for (auto const &s : scores) {
    CHECK(s.ncc_to_reference == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.kept);
    CHECK(s.reason == "pass");
  }
}

TEST_CASE("a pure-noise dynamic is the lowest and excluded")
{
  std::vector<MultiEchoDynamic> dyn = simulate(std::vector<DynamicMotion>(1));
  dyn.resize(10, dyn.front());
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(100.0, 50.0);
  for (auto &e : dyn[6].echoes) {
    for (double &v : e.data()) {
      v = nd(rng);
    }
  }
  for (int d = 0; d < 10; ++d) {
    dyn[std::size_t(d)].index = d;
  }
  auto const scores = score_dynamics(dyn);
  for (auto const &s : scores) {
    if (s.dynamic != 6) {
      CHECK(s.ncc_to_reference > scores[6].ncc_to_reference);
      CHECK(s.kept);
    }
  }
  CHECK(scores[6].ncc_to_reference < 0.5);
  CHECK_FALSE(scores[6].kept);
}

TEST_CASE("a 20 mm shifted dynamic scores below its unmoved peers")
{
  std::vector<DynamicMotion> motion(6);
  motion[2] = shifted(20.0);
  auto const scores = score_dynamics(simulate(motion));
  for (auto const &s : scores) {
    if (s.dynamic != 2) {
      CHECK(s.ncc_to_reference > scores[2].ncc_to_reference);
    }
  }
}

TEST_CASE("five large-motion outliers among twenty are excluded exactly")
{
  std::vector<DynamicMotion> motion(20);
  std::vector<int> const outliers{3, 7, 8, 13, 19};
  for (std::size_t n = 0; n < outliers.size(); ++n) {
    double const sign = n % 2 ? -1.0 : 1.0;
    motion[std::size_t(outliers[n])] = shifted(sign * 25.0, sign * 30.0);
  }
  std::vector<DynamicScore> scores = score_dynamics(simulate(motion, 10.0));
  std::vector<int> const kept = apply_qc(scores, QcThresholds{});
  std::vector<int> expect;
  for (int d = 0; d < 20; ++d) {
    if (std::find(outliers.begin(), outliers.end(), d) == outliers.end()) {
      expect.push_back(d);
    }
  }
  CHECK(kept == expect);
}

TEST_CASE("scores are invariant to global intensity scaling and equivariant to permutation")
{
  std::vector<DynamicMotion> motion(5);
  motion[1] = shifted(6.0, 4.0);
  motion[4] = shifted(-9.0);
  std::vector<MultiEchoDynamic> const dyn = simulate(motion, 5.0);
  auto const base = score_dynamics(dyn);

  std::vector<MultiEchoDynamic> scaled = dyn;
  for (auto &d : scaled) {
    for (auto &e : d.echoes) {
      for (double &v : e.data()) {
        v *= 7.5;
      }
    }
  }
  auto const s = score_dynamics(scaled);
  for (std::size_t d = 0; d < base.size(); ++d) {
    CHECK(s[d].ncc_to_reference == doctest::Approx(base[d].ncc_to_reference).epsilon(1e-12));
    CHECK(s[d].slice_consistency == doctest::Approx(base[d].slice_consistency).epsilon(1e-12));
  }

  std::vector<std::size_t> const perm{3, 0, 4, 2, 1};
  std::vector<MultiEchoDynamic> permuted;
  for (std::size_t p : perm) {
    permuted.push_back(dyn[p]);
  }
  auto const ps = score_dynamics(permuted);
  for (std::size_t n = 0; n < perm.size(); ++n) {
    CHECK(ps[n].dynamic == base[perm[n]].dynamic);
    CHECK(ps[n].ncc_to_reference == doctest::Approx(base[perm[n]].ncc_to_reference).epsilon(1e-12));
    CHECK(ps[n].slice_consistency == base[perm[n]].slice_consistency);
  }
}

TEST_CASE("apply_qc thresholds, overrides and idempotence")
{
  std::vector<DynamicScore> scores(4);
  double const ncc[] = {0.9, 0.2, 0.8, 0.7};
  double const sc[] = {0.9, 0.9, 0.1, 0.6};
  for (int d = 0; d < 4; ++d) {
    scores[std::size_t(d)].dynamic = d;
    scores[std::size_t(d)].ncc_to_reference = ncc[d];
    scores[std::size_t(d)].slice_consistency = sc[d];
  }
  CHECK(apply_qc(scores, QcThresholds{}) == std::vector<int>{0, 3});
  CHECK(scores[1].reason == "ncc");
  CHECK(scores[2].reason == "slice_consistency");

  CHECK(apply_qc(scores, QcThresholds{-1.0, -1.0}) == std::vector<int>{0, 1, 2, 3});

  QcOverrides o;
  o.drop = {0};
  o.keep = {1, 0};
  CHECK(apply_qc(scores, QcThresholds{}, o) == std::vector<int>{1, 3});
  CHECK(scores[0].reason == "forced_drop");
  CHECK(scores[1].reason == "forced_keep");

  // Re-applying to the kept subset keeps all of it.
  std::vector<DynamicScore> sub;
  for (int d : apply_qc(scores, QcThresholds{})) {
    sub.push_back(scores[std::size_t(d)]);
  }
  std::vector<int> const again = apply_qc(sub, QcThresholds{});
  CHECK(again.size() == sub.size());

  QcOverrides bad;
  bad.drop = {9};
  CHECK_THROWS_AS(apply_qc(scores, QcThresholds{}, bad), ConfigError);
  CHECK_THROWS_AS(apply_qc(scores, QcThresholds{1.5, 0.0}), ConfigError);
}

TEST_CASE("score_dynamics preconditions")
{
  std::vector<MultiEchoDynamic> dyn = simulate(std::vector<DynamicMotion>(2));
  CHECK_THROWS_AS(score_dynamics(dyn), ConfigError);
  dyn.push_back(dyn.front());
  CHECK_THROWS_AS(score_dynamics(dyn, 7), ConfigError);
}

TEST_CASE("slice consistency of simple volumes")
{
  GridGeometry const g = centred_geometry(Dims{8, 8, 5}, Vec3(1, 1, 1));
  VoxelGrid same(g);
  for (int k = 0; k < 5; ++k) {
    for (int j = 0; j < 8; ++j) {
      for (int i = 0; i < 8; ++i) {
        same.at(i, j, k) = double(i * j) + 10.0 * k;
      }
    }
  }
  CHECK(slice_consistency(same) == doctest::Approx(1.0));
  VoxelGrid flip = same;
  for (int j = 0; j < 8; ++j) {
    for (int i = 0; i < 8; ++i) {
      flip.at(i, j, 2) = -double(i * j);
    }
  }
  CHECK(slice_consistency(flip) == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
}

TEST_CASE("qc report csv")
{
  t2s::testing::TempDir tmp("qc");
  std::vector<DynamicScore> scores(2);
  scores[0] = {0, 0.91, 0.8, true, "pass"};
  scores[1] = {1, 0.2, 0.75, false, "ncc"};
  write_qc_report(tmp / "qc_report.csv", scores);
  std::ifstream in(tmp / "qc_report.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "dynamic,ncc,slice_consistency,kept,reason\n0,0.910000,0.800000,1,pass\n1,0.200000,0.750000,0,ncc\n");
}
