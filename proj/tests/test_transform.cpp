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

#include "t2s/transform.hpp"

#include <doctest.h>

#include <random>

using namespace t2s;

namespace {

RigidTransform random_rigid(std::mt19937_64 &rng, double deg, double mm)
{
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RigidTransform t;
  for (int a = 0; a < 3; ++a) {
    t.rotation_deg[a] = deg * u(rng);
    t.translation_mm[a] = mm * u(rng);
  }
  return t;
}

FFDTransform lattice() { return FFDTransform::covering(Vec3(-20, -20, -20), Vec3(20, 20, 20), 10.0); }

} // namespace

TEST_CASE("rigid identity, inverse and composition")
{
  std::mt19937_64 rng(1);
  Vec3 const p(3, -7, 11);
  CHECK((RigidTransform::identity().apply(p) - p).norm() == 0.0);
  for (int t = 0; t < 20; ++t) {
    RigidTransform const a = random_rigid(rng, 30, 20), b = random_rigid(rng, 30, 20);
    CHECK((a.inverse().apply(a.apply(p)) - p).norm() < 1e-9);
    CHECK((compose(a, b).apply(p) - a.apply(b.apply(p))).norm() < 1e-9);
    CHECK(compose(a, a.inverse()).to_affine().approx_equal(Affine4(), 1e-9));
    RigidTransform const r = RigidTransform::from_affine(a.to_affine());
    CHECK(r.to_affine().approx_equal(a.to_affine(), 1e-9));
    CHECK((a.rotation().transpose() * a.rotation() - Mat3::Identity()).norm() < 1e-12);
  }
}

TEST_CASE("rotation distance")
{
  RigidTransform a;
  RigidTransform b;
  b.rotation_deg = Vec3(0, 0, 7.5);
  CHECK(RigidTransform::rotation_distance_deg(a, b) == doctest::Approx(7.5));
  CHECK(RigidTransform::rotation_distance_deg(b, b) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("FFD with zero control displacements is the identity")
{
  FFDTransform const f = lattice();
  CHECK(f.is_identity());
  CHECK(f.displacement(Vec3(1.3, -4.2, 7.7)).norm() == 0.0);
  CHECK(f.bending_energy() == 0.0);
}

TEST_CASE("FFD reproduces constant and linear displacement fields")
{
  FFDTransform f = lattice();
  auto const &c = f.counts();
  for (int k = 0; k < c[2]; ++k) {
    for (int j = 0; j < c[1]; ++j) {
      for (int i = 0; i < c[0]; ++i) {
        Vec3 const cp = f.origin() + f.spacing() * Vec3(i, j, k);
        std::size_t const n = (std::size_t(k) * std::size_t(c[1]) + std::size_t(j)) * std::size_t(c[0]) + std::size_t(i);
        f.displacements()[n] = Vec3(1.5, -0.5, 0.25) + 0.01 * Vec3(cp[1], cp[2], cp[0]);
      }
    }
  }
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-20, 20);
  for (int t = 0; t < 50; ++t) {
    Vec3 const p(u(rng), u(rng), u(rng));
    Vec3 const expect = Vec3(1.5, -0.5, 0.25) + 0.01 * Vec3(p[1], p[2], p[0]);
    CHECK((f.displacement(p) - expect).norm() < 1e-9);
  }
  // Linear fields carry no bending energy.
  CHECK(f.bending_energy() < 1e-20);
}

TEST_CASE("FFD basis weights form a partition of unity")
{
  FFDTransform const f = lattice();
  std::array<std::size_t, 64> idx{};
  std::array<double, 64> w{};
  int const n = f.basis(Vec3(3.3, -12.1, 18.9), idx, w);
  CHECK(n == 64);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    CHECK(w[std::size_t(i)] >= 0.0);
    sum += w[std::size_t(i)];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("FFD displacement is twice continuously differentiable across knots")
{
  FFDTransform f = lattice();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  for (auto &d : f.displacements()) {
    d = Vec3(n(rng), n(rng), n(rng));
  }
  // A knot plane sits at x = origin + k * spacing; compare one-sided second differences.
  double const knot = f.origin()[0] + 3 * f.spacing();
  double const h = 1e-3;
  auto u = [&](double x) { return f.displacement(Vec3(x, 1.7, -2.3)); };
  Vec3 const left = (u(knot) - 2 * u(knot - h) + u(knot - 2 * h)) / (h * h);
  Vec3 const right = (u(knot + 2 * h) - 2 * u(knot + h) + u(knot)) / (h * h);
  CHECK((left - right).norm() < 1e-2 * std::max(1.0, left.norm()));
  Vec3 const d_left = (u(knot) - u(knot - h)) / h;
  Vec3 const d_right = (u(knot + h) - u(knot)) / h;
  CHECK((d_left - d_right).norm() < 1e-2 * std::max(1.0, d_left.norm()));
}

TEST_CASE("bending energy gradient matches finite differences")
{
  FFDTransform f = lattice();
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0, 1);
  for (auto &d : f.displacements()) {
    d = Vec3(n(rng), n(rng), n(rng));
  }
  std::vector<Vec3> grad;
  double const e0 = f.bending_energy(&grad);
  CHECK(e0 > 0.0);
  for (std::size_t c : {std::size_t(0), std::size_t(17), f.control_count() / 2}) {
    for (int a = 0; a < 3; ++a) {
      double const h = 1e-5;
      FFDTransform g = f;
      g.displacements()[c][a] += h;
      double const ep = g.bending_energy();
      g.displacements()[c][a] -= 2 * h;
      double const em = g.bending_energy();
      CHECK(grad[c][a] == doctest::Approx((ep - em) / (2 * h)).epsilon(1e-5));
    }
  }
}
