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

#include <array>
#include <vector>

namespace t2s {

// 6-DOF pose. Maps p -> R p + t with R = Rz * Ry * Rx, angles in degrees,
// rotation about the world origin.
struct RigidTransform {
  Vec3 rotation_deg = Vec3::Zero();
  Vec3 translation_mm = Vec3::Zero();

  Mat3 rotation() const;
  Affine4 to_affine() const;
  Vec3 apply(Vec3 const &p) const { return rotation() * p + translation_mm; }
  RigidTransform inverse() const;

  static RigidTransform from_affine(Affine4 const &a);
  static RigidTransform identity() { return {}; }

  // Angle (degrees) of the residual rotation between two poses.
  static double rotation_distance_deg(RigidTransform const &a, RigidTransform const &b);
};

// this o rhs: rhs applied first.
RigidTransform compose(RigidTransform const &outer, RigidTransform const &inner);

// Uniform cubic B-spline displacement field on a regular control lattice.
class FFDTransform {
public:
  FFDTransform() = default;
  FFDTransform(Vec3 const &origin, double spacing_mm, std::array<int, 3> counts);

  // Lattice with a one-control-point margin around the box [lo, hi].
  static FFDTransform covering(Vec3 const &lo, Vec3 const &hi, double spacing_mm);

  double spacing() const { return spacing_; }
  Vec3 const &origin() const { return origin_; }
  std::array<int, 3> const &counts() const { return counts_; }
  std::size_t control_count() const { return disp_.size(); }

  std::vector<Vec3> &displacements() { return disp_; }
  std::vector<Vec3> const &displacements() const { return disp_; }

  Vec3 displacement(Vec3 const &p) const;

  // Nonzero basis weights at p: fills index/weight pairs, returns the count (<= 64).
  int basis(Vec3 const &p, std::array<std::size_t, 64> &index, std::array<double, 64> &weight) const;

  // Discrete bending energy (squared second differences along each axis,
  // averaged over the lattice, mm^-2). grad, if given, receives d/d(displacement).
  double bending_energy(std::vector<Vec3> *grad = nullptr) const;

  double max_displacement() const;
  bool is_identity() const { return max_displacement() == 0.0; }

private:
  std::size_t flat(int i, int j, int k) const
  {
    return (std::size_t(k) * std::size_t(counts_[1]) + std::size_t(j)) * std::size_t(counts_[0]) + std::size_t(i);
  }

  Vec3 origin_ = Vec3::Zero();
  double spacing_ = 1.0;
  std::array<int, 3> counts_{0, 0, 0};
  std::vector<Vec3> disp_;
};

} // namespace t2s
