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

#include "t2s/volume.hpp"

#include "t2s/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace t2s {

namespace {
constexpr double kEdgeTol = 1e-6;
}

Affine4::Affine4()
    : m_(Mat4::Identity())
{
}

Affine4::Affine4(Mat4 const &m)
    : m_(m)
{
  if (std::abs(m(3, 0)) > 1e-12 || std::abs(m(3, 1)) > 1e-12 || std::abs(m(3, 2)) > 1e-12 ||
      std::abs(m(3, 3) - 1.0) > 1e-12) {
    throw GeometryError("affine last row must be (0,0,0,1)");
  }
  m_.row(3) << 0, 0, 0, 1;
  double const det = m_.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw GeometryError("affine linear part is singular");
  }
}

Affine4::Affine4(Mat3 const &linear, Vec3 const &translation)
{
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = linear;
  m.topRightCorner<3, 1>() = translation;
  *this = Affine4(m);
}

Affine4 Affine4::scaling(Vec3 const &spacing, Vec3 const &origin)
{
  return Affine4(spacing.asDiagonal().toDenseMatrix(), origin);
}

Affine4 Affine4::inverse() const
{
  Mat3 const inv = linear().inverse();
  return Affine4(inv, -inv * translation());
}

Affine4 Affine4::operator*(Affine4 const &rhs) const
{
  return Affine4(Mat4(m_ * rhs.m_));
}

bool Affine4::approx_equal(Affine4 const &other, double tol) const
{
  return (m_ - other.m_).cwiseAbs().maxCoeff() <= tol;
}

Vec3 GridGeometry::spacing() const
{
  Mat3 const l = affine.linear();
  return Vec3(l.col(0).norm(), l.col(1).norm(), l.col(2).norm());
}

bool GridGeometry::same_as(GridGeometry const &other, double tol) const
{
  return dims == other.dims && affine.approx_equal(other.affine, tol);
}

void GridGeometry::validate() const
{
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) {
    throw GeometryError(fmt::format("grid dims must be >= 1, got {}x{}x{}", dims.x, dims.y, dims.z));
  }
}

VoxelGrid::VoxelGrid()
    : data_(1, 0.0)
{
}

VoxelGrid::VoxelGrid(GridGeometry geometry, UnitTag unit)
    : geom_(std::move(geometry)), unit_(unit)
{
  geom_.validate();
  data_.assign(geom_.voxel_count(), 0.0);
}

VoxelGrid::VoxelGrid(GridGeometry geometry, std::vector<double> data, UnitTag unit)
    : geom_(std::move(geometry)), data_(std::move(data)), unit_(unit)
{
  geom_.validate();
  if (data_.size() != geom_.voxel_count()) {
    throw ContractViolation(
        fmt::format("grid data length {} does not match dims ({})", data_.size(), geom_.voxel_count()));
  }
}

Vec3 index_to_world(GridGeometry const &geometry, Vec3 const &ijk) { return geometry.affine.apply(ijk); }

Vec3 world_to_index(GridGeometry const &geometry, Vec3 const &world)
{
  return geometry.affine.inverse().apply(world);
}

GridGeometry centred_geometry(Dims dims, Vec3 const &spacing)
{
  Vec3 const half((dims.x - 1) * 0.5, (dims.y - 1) * 0.5, (dims.z - 1) * 0.5);
  Vec3 const origin = -spacing.cwiseProduct(half);
  GridGeometry g{dims, Affine4::scaling(spacing, origin)};
  g.validate();
  return g;
}

TrilinearSampler::TrilinearSampler(VoxelGrid const &grid)
    : data_(grid.data().data()), dims_(grid.dims()), w2i_(grid.affine().inverse())
{
}

bool TrilinearSampler::locate(Vec3 const &ijk, Cell &cell) const
{
  int const n[3] = {dims_.x, dims_.y, dims_.z};
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    double x = ijk[a];
    if (!(x >= -kEdgeTol && x <= n[a] - 1 + kEdgeTol)) {
      return false;
    }
    if (n[a] == 1) {
      i0[a] = 0;
      f[a] = 0.0;
      continue;
    }
    x = std::clamp(x, 0.0, double(n[a] - 1));
    int i = int(std::floor(x));
    if (i >= n[a] - 1) {
      i = n[a] - 2;
    }
    i0[a] = i;
    f[a] = x - i;
  }
  std::size_t const sx = 1, sy = std::size_t(n[0]), sz = std::size_t(n[0]) * std::size_t(n[1]);
  cell.base = std::size_t(i0[2]) * sz + std::size_t(i0[1]) * sy + std::size_t(i0[0]);
  cell.dx = n[0] > 1 ? sx : 0;
  cell.dy = n[1] > 1 ? sy : 0;
  cell.dz = n[2] > 1 ? sz : 0;
  cell.fx = f[0];
  cell.fy = f[1];
  cell.fz = f[2];
  return true;
}

bool TrilinearSampler::sample(Vec3 const &ijk, double &value) const
{
  Cell c;
  if (!locate(ijk, c)) {
    return false;
  }
  double const *p = data_ + c.base;
  double const c00 = p[0] * (1 - c.fx) + p[c.dx] * c.fx;
  double const c10 = p[c.dy] * (1 - c.fx) + p[c.dy + c.dx] * c.fx;
  double const c01 = p[c.dz] * (1 - c.fx) + p[c.dz + c.dx] * c.fx;
  double const c11 = p[c.dz + c.dy] * (1 - c.fx) + p[c.dz + c.dy + c.dx] * c.fx;
  double const c0 = c00 * (1 - c.fy) + c10 * c.fy;
  double const c1 = c01 * (1 - c.fy) + c11 * c.fy;
  value = c0 * (1 - c.fz) + c1 * c.fz;
  return true;
}

bool TrilinearSampler::sample_gradient(Vec3 const &ijk, double &value, Vec3 &gradient) const
{
  Cell c;
  if (!locate(ijk, c)) {
    return false;
  }
  double const *p = data_ + c.base;
  double const v000 = p[0], v100 = p[c.dx], v010 = p[c.dy], v110 = p[c.dy + c.dx];
  double const v001 = p[c.dz], v101 = p[c.dz + c.dx], v011 = p[c.dz + c.dy], v111 = p[c.dz + c.dy + c.dx];
  double const fx = c.fx, fy = c.fy, fz = c.fz;
  double const gx = fx, hx = 1 - fx, gy = fy, hy = 1 - fy, gz = fz, hz = 1 - fz;

  value = hz * (hy * (hx * v000 + gx * v100) + gy * (hx * v010 + gx * v110)) +
          gz * (hy * (hx * v001 + gx * v101) + gy * (hx * v011 + gx * v111));
  gradient[0] = c.dx ? hz * (hy * (v100 - v000) + gy * (v110 - v010)) + gz * (hy * (v101 - v001) + gy * (v111 - v011))
                     : 0.0;
  gradient[1] = c.dy ? hz * (hx * (v010 - v000) + gx * (v110 - v100)) + gz * (hx * (v011 - v001) + gx * (v111 - v101))
                     : 0.0;
  gradient[2] = c.dz ? hy * (hx * (v001 - v000) + gx * (v101 - v100)) + gy * (hx * (v011 - v010) + gx * (v111 - v110))
                     : 0.0;
  return true;
}

bool TrilinearSampler::scatter(Vec3 const &ijk, double weight, std::span<double> dst) const
{
  Cell c;
  if (!locate(ijk, c)) {
    return false;
  }
  double *p = dst.data() + c.base;
  double const hx = 1 - c.fx, hy = 1 - c.fy, hz = 1 - c.fz;
  // Degenerate axes have zero stride and zero fraction, so the weights of
  // coincident corners add up to the full weight.
  p[0] += weight * hx * hy * hz;
  p[c.dx] += weight * c.fx * hy * hz;
  p[c.dy] += weight * hx * c.fy * hz;
  p[c.dy + c.dx] += weight * c.fx * c.fy * hz;
  p[c.dz] += weight * hx * hy * c.fz;
  p[c.dz + c.dx] += weight * c.fx * hy * c.fz;
  p[c.dz + c.dy] += weight * hx * c.fy * c.fz;
  p[c.dz + c.dy + c.dx] += weight * c.fx * c.fy * c.fz;
  return true;
}

Resampled resample(VoxelGrid const &src, GridGeometry const &target, Interp interp)
{
  target.validate();
  Affine4 const map = src.affine().inverse() * target.affine;
  VoxelGrid out(target, src.unit());
  Mask valid(target.voxel_count(), 0);
  TrilinearSampler const sampler(src);
  Dims const sd = src.dims();
  Dims const td = target.dims;

  for (int k = 0; k < td.z; ++k) {
    for (int j = 0; j < td.y; ++j) {
      for (int i = 0; i < td.x; ++i) {
        std::size_t const n = target.linear_index(i, j, k);
        Vec3 const ijk = map.apply(Vec3(i, j, k));
        if (interp == Interp::Trilinear) {
          double v;
          if (sampler.sample(ijk, v)) {
            out[n] = v;
            valid[n] = 1;
          }
        } else {
          long const si = std::lround(ijk[0]), sj = std::lround(ijk[1]), sk = std::lround(ijk[2]);
          if (ijk[0] > -0.5 && ijk[1] > -0.5 && ijk[2] > -0.5 && si < sd.x && sj < sd.y && sk < sd.z) {
            out[n] = src.at(int(si), int(sj), int(sk));
            valid[n] = 1;
          }
        }
      }
    }
  }
  return {std::move(out), std::move(valid)};
}

namespace {

std::vector<double> gaussian_taps(double sigma_vox)
{
  if (sigma_vox <= 1e-9) {
    return {1.0};
  }
  int const radius = std::max(1, int(std::ceil(3.0 * sigma_vox)));
  std::vector<double> taps(2 * radius + 1);
  for (int t = -radius; t <= radius; ++t) {
    taps[t + radius] = std::exp(-0.5 * (t * t) / (sigma_vox * sigma_vox));
  }
  return taps;
}

void smooth_axis(std::vector<double> &data, Dims const &d, int axis, std::vector<double> const &taps)
{
  if (taps.size() == 1) {
    return;
  }
  int const radius = int(taps.size() / 2);
  int const n[3] = {d.x, d.y, d.z};
  std::size_t const stride[3] = {1, std::size_t(d.x), std::size_t(d.x) * std::size_t(d.y)};
  int const len = n[axis];
  std::vector<double> line(len);
  std::vector<double> const src = data;

  int const a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
  for (int u = 0; u < n[a1]; ++u) {
    for (int v = 0; v < n[a2]; ++v) {
      std::size_t const base = std::size_t(u) * stride[a1] + std::size_t(v) * stride[a2];
      for (int x = 0; x < len; ++x) {
        double acc = 0, wsum = 0;
        int const lo = std::max(0, x - radius), hi = std::min(len - 1, x + radius);
        for (int y = lo; y <= hi; ++y) {
          double const w = taps[y - x + radius];
          acc += w * src[base + std::size_t(y) * stride[axis]];
          wsum += w;
        }
        data[base + std::size_t(x) * stride[axis]] = acc / wsum;
      }
    }
  }
}

} // namespace

VoxelGrid gaussian_smooth(VoxelGrid const &grid, double sigma_mm)
{
  if (sigma_mm <= 0) {
    return grid;
  }
  Vec3 const sp = grid.spacing();
  std::vector<double> data(grid.data().begin(), grid.data().end());
  for (int a = 0; a < 3; ++a) {
    smooth_axis(data, grid.dims(), a, gaussian_taps(sigma_mm / sp[a]));
  }
  return VoxelGrid(grid.geometry(), std::move(data), grid.unit());
}

void PsfSpec::validate() const
{
  if (!(through_plane_fwhm_mm > 0) || !(in_plane_fwhm_mm > 0)) {
    throw ContractViolation("PSF FWHM values must be > 0");
  }
  if (!(support_sigmas >= 2.0)) {
    throw ContractViolation("PSF support radius must be >= 2 sigma");
  }
}

PsfSpec PsfSpec::for_acquisition(Vec3 const &voxel_size_mm, double support_sigmas)
{
  return PsfSpec{voxel_size_mm[2], 1.2 * std::max(voxel_size_mm[0], voxel_size_mm[1]), support_sigmas};
}

Mat3 frame_from_normal(Vec3 const &normal)
{
  double const len = normal.norm();
  if (!(len > 1e-12)) {
    throw GeometryError("slice normal must be nonzero");
  }
  Vec3 const n = normal / len;
  int axis = 0;
  for (int a = 1; a < 3; ++a) {
    if (std::abs(n[a]) < std::abs(n[axis])) {
      axis = a;
    }
  }
  Vec3 e = Vec3::Zero();
  e[axis] = 1.0;
  Vec3 const u = n.cross(e).normalized();
  Vec3 const v = n.cross(u);
  Mat3 f;
  f.col(0) = u;
  f.col(1) = v;
  f.col(2) = n;
  return f;
}

PsfKernel psf_weights(PsfSpec const &psf, Mat3 const &frame, double target_spacing_mm)
{
  psf.validate();
  if (!(target_spacing_mm > 0)) {
    throw ContractViolation("PSF target spacing must be > 0");
  }
  double const s_in = psf.in_plane_fwhm_mm * kFwhmToSigma;
  double const s_th = psf.through_plane_fwhm_mm * kFwhmToSigma;
  double const r = psf.support_sigmas;
  int const n_in = int(std::floor(r * s_in / target_spacing_mm + 1e-9));
  int const n_th = int(std::floor(r * s_th / target_spacing_mm + 1e-9));

  PsfKernel k;
  double total = 0;
  for (int c = -n_th; c <= n_th; ++c) {
    for (int b = -n_in; b <= n_in; ++b) {
      for (int a = -n_in; a <= n_in; ++a) {
        double const du = a * target_spacing_mm, dv = b * target_spacing_mm, dn = c * target_spacing_mm;
        double const q = (du * du + dv * dv) / (s_in * s_in) + (dn * dn) / (s_th * s_th);
        if (q > r * r + 1e-12) {
          continue;
        }
        double const w = std::exp(-0.5 * q);
        k.offsets_mm.push_back(frame.col(0) * du + frame.col(1) * dv + frame.col(2) * dn);
        k.weights.push_back(w);
        total += w;
      }
    }
  }
  for (auto &w : k.weights) {
    w /= total;
  }
  return k;
}

PsfKernel psf_weights(PsfSpec const &psf, Vec3 const &normal, double target_spacing_mm)
{
  double const len = normal.norm();
  if (!(len > 1e-12)) {
    throw GeometryError("slice normal must be nonzero");
  }
  if (std::abs(len - 1.0) > 1e-6) {
    throw ContractViolation("slice normal must be unit length");
  }
  return psf_weights(psf, frame_from_normal(normal), target_spacing_mm);
}

} // namespace t2s
