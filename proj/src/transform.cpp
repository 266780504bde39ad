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

#include "t2s/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace t2s {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

inline void bspline(double t, double w[4])
{
  double const t2 = t * t, t3 = t2 * t, s = 1.0 - t;
  w[0] = s * s * s / 6.0;
  w[1] = (3 * t3 - 6 * t2 + 4) / 6.0;
  w[2] = (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0;
  w[3] = t3 / 6.0;
}

} // namespace

Mat3 RigidTransform::rotation() const
{
  double const a = rotation_deg[0] * kDeg, b = rotation_deg[1] * kDeg, g = rotation_deg[2] * kDeg;
  Mat3 const rx = Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix();
  Mat3 const ry = Eigen::AngleAxisd(b, Vec3::UnitY()).toRotationMatrix();
  Mat3 const rz = Eigen::AngleAxisd(g, Vec3::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

Affine4 RigidTransform::to_affine() const { return Affine4(rotation(), translation_mm); }

RigidTransform RigidTransform::from_affine(Affine4 const &a)
{
  Mat3 const r = a.linear();
  RigidTransform t;
  double const sb = std::clamp(-r(2, 0), -1.0, 1.0);
  t.rotation_deg[1] = std::asin(sb) / kDeg;
  t.rotation_deg[0] = std::atan2(r(2, 1), r(2, 2)) / kDeg;
  t.rotation_deg[2] = std::atan2(r(1, 0), r(0, 0)) / kDeg;
  t.translation_mm = a.translation();
  return t;
}

RigidTransform RigidTransform::inverse() const { return from_affine(to_affine().inverse()); }

double RigidTransform::rotation_distance_deg(RigidTransform const &a, RigidTransform const &b)
{
  Mat3 const r = a.rotation() * b.rotation().transpose();
  double const c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c) / kDeg;
}

RigidTransform compose(RigidTransform const &outer, RigidTransform const &inner)
{
  return RigidTransform::from_affine(outer.to_affine() * inner.to_affine());
}

FFDTransform::FFDTransform(Vec3 const &origin, double spacing_mm, std::array<int, 3> counts)
    : origin_(origin), spacing_(spacing_mm), counts_(counts)
{
  if (!(spacing_mm > 0)) {
    throw ContractViolation("FFD control spacing must be > 0");
  }
  if (counts[0] < 1 || counts[1] < 1 || counts[2] < 1) {
    throw ContractViolation("FFD lattice must be non-empty");
  }
  disp_.assign(std::size_t(counts[0]) * std::size_t(counts[1]) * std::size_t(counts[2]), Vec3::Zero());
}

FFDTransform FFDTransform::covering(Vec3 const &lo, Vec3 const &hi, double spacing_mm)
{
  std::array<int, 3> counts{};
  for (int a = 0; a < 3; ++a) {
    counts[a] = int(std::ceil((hi[a] - lo[a]) / spacing_mm)) + 3;
  }
  return FFDTransform(lo - Vec3::Constant(spacing_mm), spacing_mm, counts);
}

int FFDTransform::basis(Vec3 const &p, std::array<std::size_t, 64> &index, std::array<double, 64> &weight) const
{
  double w[3][4];
  int base[3];
  for (int a = 0; a < 3; ++a) {
    double const u = (p[a] - origin_[a]) / spacing_;
    double const fl = std::floor(u);
    base[a] = int(fl) - 1;
    bspline(u - fl, w[a]);
  }
  int n = 0;
  for (int c = 0; c < 4; ++c) {
    int const k = base[2] + c;
    if (k < 0 || k >= counts_[2]) {
      continue;
    }
    for (int b = 0; b < 4; ++b) {
      int const j = base[1] + b;
      if (j < 0 || j >= counts_[1]) {
        continue;
      }
      for (int a = 0; a < 4; ++a) {
        int const i = base[0] + a;
        if (i < 0 || i >= counts_[0]) {
          continue;
        }
        index[n] = flat(i, j, k);
        weight[n] = w[0][a] * w[1][b] * w[2][c];
        ++n;
      }
    }
  }
  return n;
}

Vec3 FFDTransform::displacement(Vec3 const &p) const
{
  if (disp_.empty()) {
    return Vec3::Zero();
  }
  std::array<std::size_t, 64> idx;
  std::array<double, 64> w;
  int const n = basis(p, idx, w);
  Vec3 d = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    d += w[i] * disp_[idx[i]];
  }
  return d;
}

double FFDTransform::bending_energy(std::vector<Vec3> *grad) const
{
  if (grad) {
    grad->assign(disp_.size(), Vec3::Zero());
  }
  if (disp_.empty()) {
    return 0.0;
  }
  double const norm = 1.0 / (double(disp_.size()) * std::pow(spacing_, 4));
  double energy = 0;
  for (int k = 0; k < counts_[2]; ++k) {
    for (int j = 0; j < counts_[1]; ++j) {
      for (int i = 0; i < counts_[0]; ++i) {
        int const idx[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          if (idx[a] == 0 || idx[a] == counts_[a] - 1) {
            continue;
          }
          int lo[3] = {i, j, k}, hi[3] = {i, j, k};
          lo[a] -= 1;
          hi[a] += 1;
          std::size_t const c = flat(i, j, k), l = flat(lo[0], lo[1], lo[2]), h = flat(hi[0], hi[1], hi[2]);
          Vec3 const e = disp_[h] - 2.0 * disp_[c] + disp_[l];
          energy += e.squaredNorm() * norm;
          if (grad) {
            (*grad)[h] += 2.0 * norm * e;
            (*grad)[l] += 2.0 * norm * e;
            (*grad)[c] -= 4.0 * norm * e;
          }
        }
      }
    }
  }
  return energy;
}

double FFDTransform::max_displacement() const
{
  double m = 0;
  for (auto const &d : disp_) {
    m = std::max(m, d.norm());
  }
  return m;
}

} // namespace t2s
