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

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace t2s {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Per-voxel boolean flags, same linear layout as the grid they accompany.
using Mask = std::vector<std::uint8_t>;

struct Dims {
  int x = 1;
  int y = 1;
  int z = 1;

  std::size_t count() const { return std::size_t(x) * std::size_t(y) * std::size_t(z); }
  bool operator==(Dims const &) const = default;
};

// Index -> world (mm) homogeneous transform. The last row is always (0,0,0,1).
class Affine4 {
public:
  Affine4();
  explicit Affine4(Mat4 const &m);
  Affine4(Mat3 const &linear, Vec3 const &translation);

  static Affine4 scaling(Vec3 const &spacing, Vec3 const &origin = Vec3::Zero());

  Mat4 const &matrix() const { return m_; }
  Mat3 linear() const { return m_.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return m_.topRightCorner<3, 1>(); }

  Vec3 apply(Vec3 const &p) const { return m_.topLeftCorner<3, 3>() * p + m_.topRightCorner<3, 1>(); }
  Vec3 apply_vector(Vec3 const &v) const { return m_.topLeftCorner<3, 3>() * v; }

  Affine4 inverse() const;
  Affine4 operator*(Affine4 const &rhs) const;

  bool approx_equal(Affine4 const &other, double tol) const;

private:
  Mat4 m_;
};

enum class UnitTag { Signal, Milliseconds, LabelCode };

struct GridGeometry {
  Dims dims;
  Affine4 affine;

  // Column norms of the affine's linear part.
  Vec3 spacing() const;
  std::size_t voxel_count() const { return dims.count(); }
  std::size_t linear_index(int i, int j, int k) const
  {
    return (std::size_t(k) * std::size_t(dims.y) + std::size_t(j)) * std::size_t(dims.x) + std::size_t(i);
  }
  double voxel_volume_mm3() const { return std::abs(affine.linear().determinant()); }
  bool same_as(GridGeometry const &other, double tol = 1e-6) const;
  void validate() const;
};

// Scalar 3D raster, x-fastest. Values are held in double precision and
// written as float32 (or uint8 for label maps).
class VoxelGrid {
public:
  VoxelGrid();
  explicit VoxelGrid(GridGeometry geometry, UnitTag unit = UnitTag::Signal);
  VoxelGrid(GridGeometry geometry, std::vector<double> data, UnitTag unit = UnitTag::Signal);

  GridGeometry const &geometry() const { return geom_; }
  Dims const &dims() const { return geom_.dims; }
  Affine4 const &affine() const { return geom_.affine; }
  Vec3 spacing() const { return geom_.spacing(); }
  UnitTag unit() const { return unit_; }
  void set_unit(UnitTag u) { unit_ = u; }

  std::size_t size() const { return data_.size(); }
  std::span<double> data() { return data_; }
  std::span<double const> data() const { return data_; }
  std::vector<double> const &values() const { return data_; }

  double &at(int i, int j, int k) { return data_[geom_.linear_index(i, j, k)]; }
  double at(int i, int j, int k) const { return data_[geom_.linear_index(i, j, k)]; }
  double &operator[](std::size_t n) { return data_[n]; }
  double operator[](std::size_t n) const { return data_[n]; }

private:
  GridGeometry geom_;
  std::vector<double> data_;
  UnitTag unit_ = UnitTag::Signal;
};

Vec3 index_to_world(GridGeometry const &geometry, Vec3 const &ijk);
Vec3 world_to_index(GridGeometry const &geometry, Vec3 const &world);
inline Vec3 index_to_world(VoxelGrid const &grid, Vec3 const &ijk) { return index_to_world(grid.geometry(), ijk); }
inline Vec3 world_to_index(VoxelGrid const &grid, Vec3 const &world) { return world_to_index(grid.geometry(), world); }

// Axis-aligned grid centred on the world origin.
GridGeometry centred_geometry(Dims dims, Vec3 const &spacing);

// Fast trilinear lookups in continuous index space. Points outside
// [0, n-1] (per axis, small tolerance) are out of field.
class TrilinearSampler {
public:
  explicit TrilinearSampler(VoxelGrid const &grid);

  bool sample(Vec3 const &ijk, double &value) const;
  // Value plus gradient with respect to the continuous index.
  bool sample_gradient(Vec3 const &ijk, double &value, Vec3 &gradient) const;
  // Adds weight * trilinear weights into dst (same layout as the sampled grid).
  bool scatter(Vec3 const &ijk, double weight, std::span<double> dst) const;

  Affine4 const &world_to_index() const { return w2i_; }
  Dims const &dims() const { return dims_; }

private:
  struct Cell {
    std::size_t base;
    std::size_t dx, dy, dz;
    double fx, fy, fz;
  };
  bool locate(Vec3 const &ijk, Cell &cell) const;

  double const *data_;
  Dims dims_;
  Affine4 w2i_;
};

enum class Interp { Nearest, Trilinear };

struct Resampled {
  VoxelGrid grid;
  Mask valid;
};

// Samples src at the world position of every target voxel.
Resampled resample(VoxelGrid const &src, GridGeometry const &target, Interp interp);

// Separable Gaussian smoothing (sigma in mm), weights renormalised at the borders.
VoxelGrid gaussian_smooth(VoxelGrid const &grid, double sigma_mm);

struct PsfSpec {
  double through_plane_fwhm_mm = 3.0;
  double in_plane_fwhm_mm = 3.75;
  double support_sigmas = 2.0;

  void validate() const;
  // Through-plane FWHM = slice thickness, in-plane FWHM = 1.2 x in-plane voxel size.
  static PsfSpec for_acquisition(Vec3 const &voxel_size_mm, double support_sigmas = 2.0);
};

struct PsfKernel {
  std::vector<Vec3> offsets_mm;
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
};

inline constexpr double kFwhmToSigma = 1.0 / 2.355;

// Gaussian kernel on a lattice of step target_spacing aligned with the slice
// frame. frame columns are (row dir, column dir, normal), orthonormal.
PsfKernel psf_weights(PsfSpec const &psf, Mat3 const &frame, double target_spacing_mm);
PsfKernel psf_weights(PsfSpec const &psf, Vec3 const &normal, double target_spacing_mm);

// Orthonormal frame whose third column is the given unit normal.
Mat3 frame_from_normal(Vec3 const &normal);

} // namespace t2s
