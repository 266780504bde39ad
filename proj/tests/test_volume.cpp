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
#include "t2s/volume.hpp"

#include <doctest.h>

#include <random>

using namespace t2s;

namespace {

Affine4 random_affine(std::mt19937_64 &rng)
{
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Mat3 m;
  do {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        m(r, c) = u(rng);
      }
    }
  } while (std::abs(m.determinant()) < 0.5);
  return Affine4(m, Vec3(u(rng) * 50, u(rng) * 50, u(rng) * 50));
}

VoxelGrid ramp(GridGeometry const &g, Vec3 const &coef, double offset)
{
  VoxelGrid out(g);
  for (int k = 0; k < g.dims.z; ++k) {
    for (int j = 0; j < g.dims.y; ++j) {
      for (int i = 0; i < g.dims.x; ++i) {
        out.at(i, j, k) = coef.dot(index_to_world(g, Vec3(i, j, k))) + offset;
      }
    }
  }
  return out;
}

} // namespace

TEST_CASE("index_to_world on identity and diagonal affines")
{
  GridGeometry g{Dims{4, 4, 4}, Affine4()};
  CHECK((index_to_world(g, Vec3::Zero()) - Vec3::Zero()).norm() == 0.0);
  g.affine = Affine4::scaling(Vec3(3.125, 3.125, 3.0));
  Vec3 const w = index_to_world(g, Vec3(1, 1, 1));
  CHECK(w[0] == doctest::Approx(3.125));
  CHECK(w[1] == doctest::Approx(3.125));
  CHECK(w[2] == doctest::Approx(3.0));
}

TEST_CASE("world_to_index inverts index_to_world for random affines")
{
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 20.0);
  for (int t = 0; t < 50; ++t) {
    GridGeometry g{Dims{20, 20, 20}, random_affine(rng)};
    Vec3 const p(u(rng), u(rng), u(rng));
    Vec3 const back = world_to_index(g, index_to_world(g, p));
    CHECK((back - p).norm() < 1e-9);
    // Oracle: explicit 4x4 inverse.
    Mat4 const inv = g.affine.matrix().inverse();
    Vec3 const w = index_to_world(g, p);
    Eigen::Vector4d const h = inv * Eigen::Vector4d(w[0], w[1], w[2], 1.0);
    CHECK((h.head<3>() - p).norm() < 1e-9);
  }
}

TEST_CASE("affine validation and composition")
{
  Mat4 bad = Mat4::Identity();
  bad(3, 0) = 1.0;
  CHECK_THROWS_AS(Affine4{bad}, GeometryError);
  Mat4 singular = Mat4::Identity();
  singular(2, 2) = 0.0;
  CHECK_THROWS_AS(Affine4{singular}, GeometryError);

  std::mt19937_64 rng(3);
  Affine4 const a = random_affine(rng), b = random_affine(rng), c = random_affine(rng);
  CHECK(((a * b) * c).approx_equal(a * (b * c), 1e-9));
  CHECK((a * a.inverse()).approx_equal(Affine4(), 1e-9));
}

TEST_CASE("grid invariants")
{
  GridGeometry g{Dims{0, 2, 2}, Affine4()};
  CHECK_THROWS_AS(g.validate(), GeometryError);
  GridGeometry ok{Dims{2, 2, 2}, Affine4()};
  CHECK_THROWS_AS(VoxelGrid(ok, std::vector<double>(7)), ContractViolation);
}

TEST_CASE("resample onto itself is the identity")
{
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  GridGeometry g{Dims{7, 6, 5}, random_affine(rng)};
  VoxelGrid src(g);
  for (double &v : src.data()) {
    v = n(rng);
  }
  for (Interp mode : {Interp::Trilinear, Interp::Nearest}) {
    Resampled r = resample(src, g, mode);
    for (std::size_t i = 0; i < src.size(); ++i) {
      CHECK(std::abs(r.grid[i] - src[i]) < 1e-12);
      CHECK(r.valid[i] == 1);
    }
  }
}

TEST_CASE("resample preserves constants and flags out-of-field voxels")
{
  GridGeometry const coarse = centred_geometry(Dims{6, 6, 6}, Vec3(2, 2, 2));
  VoxelGrid src(coarse);
  std::fill(src.data().begin(), src.data().end(), 42.0);
  GridGeometry const fine = centred_geometry(Dims{20, 20, 20}, Vec3(1, 1, 1));
  Resampled r = resample(src, fine, Interp::Trilinear);
  std::size_t inside = 0, outside = 0;
  for (std::size_t i = 0; i < r.grid.size(); ++i) {
    if (r.valid[i]) {
      CHECK(r.grid[i] == doctest::Approx(42.0).epsilon(1e-12));
      ++inside;
    } else {
      CHECK(r.grid[i] == 0.0);
      ++outside;
    }
  }
  CHECK(inside > 0);
  CHECK(outside > 0);
}

TEST_CASE("trilinear resampling reproduces affine intensity functions")
{
  std::mt19937_64 rng(8);
  GridGeometry const src_g{Dims{10, 9, 8}, Affine4::scaling(Vec3(2.0, 2.0, 3.0), Vec3(-5, 3, 1))};
  Vec3 const coef(0.7, -1.3, 2.1);
  VoxelGrid const src = ramp(src_g, coef, 4.0);
  // Half spacing grid over the same field of view.
  GridGeometry const half{Dims{19, 17, 15}, Affine4::scaling(Vec3(1.0, 1.0, 1.5), Vec3(-5, 3, 1))};
  Resampled r = resample(src, half, Interp::Trilinear);
  for (int k = 0; k < half.dims.z; ++k) {
    for (int j = 0; j < half.dims.y; ++j) {
      for (int i = 0; i < half.dims.x; ++i) {
        std::size_t const n = half.linear_index(i, j, k);
        REQUIRE(r.valid[n]);
        double const expect = coef.dot(index_to_world(half, Vec3(i, j, k))) + 4.0;
        CHECK(std::abs(r.grid[n] - expect) < 1e-9);
      }
    }
  }
  // Rotated target inside the field.
  Mat3 rot = Eigen::AngleAxisd(0.3, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  GridGeometry const oblique{Dims{5, 5, 5}, Affine4(rot, Vec3(4, 10, 9))};
  Resampled ro = resample(src, oblique, Interp::Trilinear);
  for (std::size_t n = 0; n < ro.grid.size(); ++n) {
    if (ro.valid[n]) {
      int const i = int(n % 5), j = int((n / 5) % 5), k = int(n / 25);
      CHECK(std::abs(ro.grid[n] - (coef.dot(index_to_world(oblique, Vec3(i, j, k))) + 4.0)) < 1e-9);
    }
  }
}

TEST_CASE("trilinear sampler gradient and scatter are consistent")
{
  GridGeometry const g = centred_geometry(Dims{6, 6, 6}, Vec3(1, 1, 1));
  VoxelGrid const f = ramp(g, Vec3(1, 2, 3), 0.0);
  TrilinearSampler const s(f);
  double v;
  Vec3 grad;
  REQUIRE(s.sample_gradient(Vec3(2.3, 1.7, 3.1), v, grad));
  CHECK((grad - Vec3(1, 2, 3)).norm() < 1e-9);
  CHECK_FALSE(s.sample(Vec3(-0.5, 0, 0), v));

  // <scatter(e), f> == sample(f)
  std::vector<double> dst(g.voxel_count(), 0.0);
  Vec3 const p(1.25, 3.5, 2.75);
  REQUIRE(s.scatter(p, 1.0, dst));
  double dot = 0.0;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dot += dst[i] * f[i];
  }
  REQUIRE(s.sample(p, v));
  CHECK(dot == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("gaussian smoothing keeps constants")
{
  GridGeometry const g = centred_geometry(Dims{9, 8, 7}, Vec3(1.2, 1.2, 1.2));
  VoxelGrid c(g);
  std::fill(c.data().begin(), c.data().end(), 3.0);
  VoxelGrid const s = gaussian_smooth(c, 2.0);
  for (double v : s.data()) {
    CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
  }
}

TEST_CASE("PSF kernel properties")
{
  PsfSpec const psf{3.0, 3.75, 2.0};
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 10; ++t) {
    Vec3 const normal = Vec3(n(rng), n(rng), n(rng)).normalized();
    PsfKernel const k = psf_weights(psf, normal, 1.2);
    double sum = 0.0;
    for (double w : k.weights) {
      CHECK(w >= 0.0);
      sum += w;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
    // Point symmetry: every offset has a mirrored partner of equal weight.
    for (std::size_t a = 0; a < k.size(); ++a) {
      bool found = false;
      for (std::size_t b = 0; b < k.size() && !found; ++b) {
        if ((k.offsets_mm[a] + k.offsets_mm[b]).norm() < 1e-9) {
          found = std::abs(k.weights[a] - k.weights[b]) < 1e-12;
        }
      }
      CHECK(found);
    }
  }
}

TEST_CASE("PSF delta limit")
{
  PsfKernel const k = psf_weights(PsfSpec{1e-6, 1e-6, 2.0}, Vec3(0, 0, 1), 1.2);
  REQUIRE(k.size() == 1);
  CHECK(k.weights[0] == doctest::Approx(1.0));
  CHECK(k.offsets_mm[0].norm() == 0.0);
}

TEST_CASE("PSF weights match direct Gaussian evaluation")
{
  PsfSpec const psf{3.0, 3.75, 2.0};
  double const h = 1.2;
  PsfKernel const k = psf_weights(psf, Vec3(0, 0, 1), h);
  double const si = 3.75 / 2.355, st = 3.0 / 2.355;
  // Oracle: enumerate the lattice independently, keep points inside the 2-sigma ellipsoid.
  std::vector<std::pair<Vec3, double>> ref;
  double total = 0.0;
  for (int c = -5; c <= 5; ++c) {
    for (int b = -5; b <= 5; ++b) {
      for (int a = -5; a <= 5; ++a) {
        Vec3 const o(a * h, b * h, c * h);
        double const q = (o[0] * o[0] + o[1] * o[1]) / (si * si) + o[2] * o[2] / (st * st);
        if (q <= 4.0 + 1e-12) {
          ref.emplace_back(o, std::exp(-0.5 * q));
          total += std::exp(-0.5 * q);
        }
      }
    }
  }
  REQUIRE(ref.size() == k.size());
  for (auto const &[o, w] : ref) {
    bool matched = false;
    for (std::size_t i = 0; i < k.size(); ++i) {
      if ((k.offsets_mm[i] - o).norm() < 1e-9) {
        CHECK(k.weights[i] == doctest::Approx(w / total).epsilon(1e-12));
        matched = true;
      }
    }
    CHECK(matched);
  }
}

TEST_CASE("PSF errors")
{
  PsfSpec const psf{3.0, 3.75, 2.0};
  CHECK_THROWS_AS(psf_weights(psf, Vec3(Vec3::Zero()), 1.2), GeometryError);
  CHECK_THROWS_AS(psf_weights(psf, Vec3(0, 0, 2), 1.2), ContractViolation);
  CHECK_THROWS_AS(psf_weights(PsfSpec{3.0, 3.75, 1.5}, Vec3(0, 0, 1), 1.2), ContractViolation);
  CHECK_THROWS_AS(psf_weights(PsfSpec{0.0, 3.75, 2.0}, Vec3(0, 0, 1), 1.2), ContractViolation);
  PsfSpec const acq = PsfSpec::for_acquisition(Vec3(3.125, 3.125, 3.0));
  CHECK(acq.through_plane_fwhm_mm == doctest::Approx(3.0));
  CHECK(acq.in_plane_fwhm_mm == doctest::Approx(3.75));
}
