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

#include "t2s/nifti.hpp"

#include "t2s/error.hpp"

#include <fmt/format.h>
#include <zlib.h>

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

namespace t2s {

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348);

constexpr std::int16_t kUint8 = 2;
constexpr std::int16_t kInt16 = 4;
constexpr std::int16_t kFloat32 = 16;
constexpr std::int16_t kFloat64 = 64;
constexpr std::int16_t kUint16 = 512;
constexpr std::int16_t kIntentLabel = 1002;
constexpr std::size_t kVoxOffset = 352;

std::size_t bytes_per_voxel(std::int16_t datatype)
{
  switch (datatype) {
  case kUint8:
    return 1;
  case kInt16:
  case kUint16:
    return 2;
  case kFloat32:
    return 4;
  case kFloat64:
    return 8;
  default:
    return 0;
  }
}

std::vector<unsigned char> slurp(std::filesystem::path const &path)
{
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) {
    throw IntegrityError(fmt::format("cannot open '{}'", path.string()));
  }
  std::vector<unsigned char> buf;
  std::array<unsigned char, 1 << 16> chunk;
  for (;;) {
    int const n = gzread(f, chunk.data(), unsigned(chunk.size()));
    if (n < 0) {
      int err = 0;
      std::string const msg = gzerror(f, &err);
      std::size_t const at = buf.size();
      gzclose(f);
      throw ParseError(fmt::format("'{}': compressed stream error: {}", path.string(), msg), at);
    }
    if (n == 0) {
      break;
    }
    buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return buf;
}

std::string unit_name(UnitTag u)
{
  switch (u) {
  case UnitTag::Milliseconds:
    return "t2s:ms";
  case UnitTag::LabelCode:
    return "t2s:label";
  case UnitTag::Signal:
  default:
    return "t2s:signal";
  }
}

Mat3 quatern_to_rotation(double b, double c, double d)
{
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    double const s = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= s;
    c *= s;
    d *= s;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  Mat3 r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c), //
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),   //
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  return r;
}

// Proper-rotation part of a linear map, as (quaternion b,c,d, qfac).
std::array<double, 4> rotation_to_quatern(Mat3 const &linear)
{
  Mat3 r = linear;
  for (int a = 0; a < 3; ++a) {
    r.col(a).normalize();
  }
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  r = svd.matrixU() * svd.matrixV().transpose();
  double qfac = 1.0;
  if (r.determinant() < 0) {
    qfac = -1.0;
    r.col(2) = -r.col(2);
  }
  double a = r(0, 0) + r(1, 1) + r(2, 2) + 1.0;
  double b, c, d;
  if (a > 0.5) {
    a = 0.5 * std::sqrt(a);
    b = 0.25 * (r(2, 1) - r(1, 2)) / a;
    c = 0.25 * (r(0, 2) - r(2, 0)) / a;
    d = 0.25 * (r(1, 0) - r(0, 1)) / a;
  } else {
    double const xd = 1.0 + r(0, 0) - (r(1, 1) + r(2, 2));
    double const yd = 1.0 + r(1, 1) - (r(0, 0) + r(2, 2));
    double const zd = 1.0 + r(2, 2) - (r(0, 0) + r(1, 1));
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (r(0, 1) + r(1, 0)) / b;
      d = 0.25 * (r(0, 2) + r(2, 0)) / b;
      a = 0.25 * (r(2, 1) - r(1, 2)) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (r(0, 1) + r(1, 0)) / c;
      d = 0.25 * (r(1, 2) + r(2, 1)) / c;
      a = 0.25 * (r(0, 2) - r(2, 0)) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (r(0, 2) + r(2, 0)) / d;
      c = 0.25 * (r(1, 2) + r(2, 1)) / d;
      a = 0.25 * (r(1, 0) - r(0, 1)) / d;
    }
    if (a < 0.0) {
      b = -b;
      c = -c;
      d = -d;
    }
  }
  return {b, c, d, qfac};
}

template <typename T>
T read_scalar(unsigned char const *p)
{
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

} // namespace

VoxelGrid read_volume(std::filesystem::path const &path)
{
  std::vector<unsigned char> const buf = slurp(path);
  if (buf.size() < sizeof(NiftiHeader)) {
    throw ParseError(fmt::format("'{}': truncated NIfTI header", path.string()), buf.size());
  }
  NiftiHeader h;
  std::memcpy(&h, buf.data(), sizeof h);
  if (h.sizeof_hdr != 348) {
    throw ParseError(fmt::format("'{}': sizeof_hdr is {}, expected 348 (little-endian NIfTI-1)", path.string(),
                                 h.sizeof_hdr),
                     0);
  }
  if (std::memcmp(h.magic, "n+1\0", 4) != 0) {
    throw ParseError(fmt::format("'{}': not a single-file NIfTI-1 (bad magic)", path.string()),
                     offsetof(NiftiHeader, magic));
  }
  if (h.dim[0] < 1 || h.dim[0] > 7) {
    throw ParseError(fmt::format("'{}': invalid dim[0] = {}", path.string(), h.dim[0]),
                     offsetof(NiftiHeader, dim));
  }
  Dims dims{h.dim[1], h.dim[0] >= 2 ? h.dim[2] : 1, h.dim[0] >= 3 ? h.dim[3] : 1};
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) {
    throw ParseError(fmt::format("'{}': nonpositive dimension", path.string()), offsetof(NiftiHeader, dim));
  }
  for (int a = 4; a <= h.dim[0]; ++a) {
    if (h.dim[a] > 1) {
      throw IntegrityError(fmt::format("'{}': only 3D volumes are supported (dim[{}] = {})", path.string(), a,
                                       h.dim[a]));
    }
  }
  std::size_t const bpv = bytes_per_voxel(h.datatype);
  if (bpv == 0) {
    throw ParseError(fmt::format("'{}': unsupported datatype {}", path.string(), h.datatype),
                     offsetof(NiftiHeader, datatype));
  }
  if (std::size_t(h.bitpix) != bpv * 8) {
    throw IntegrityError(
        fmt::format("'{}': bitpix {} inconsistent with datatype {}", path.string(), h.bitpix, h.datatype));
  }
  if (!(h.vox_offset >= 348.0f)) {
    throw ParseError(fmt::format("'{}': invalid vox_offset {}", path.string(), h.vox_offset),
                     offsetof(NiftiHeader, vox_offset));
  }
  std::size_t const offset = std::size_t(h.vox_offset);
  std::size_t const n = dims.count();
  if (buf.size() < offset + n * bpv) {
    throw ParseError(fmt::format("'{}': truncated voxel data (need {} bytes, have {})", path.string(),
                                 offset + n * bpv, buf.size()),
                     buf.size());
  }

  Mat4 m = Mat4::Identity();
  if (h.sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      m(0, c) = h.srow_x[c];
      m(1, c) = h.srow_y[c];
      m(2, c) = h.srow_z[c];
    }
  } else if (h.qform_code > 0) {
    double const qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    Mat3 const r = quatern_to_rotation(h.quatern_b, h.quatern_c, h.quatern_d);
    Vec3 const sp(h.pixdim[1], h.pixdim[2], qfac * h.pixdim[3]);
    m.topLeftCorner<3, 3>() = r * sp.asDiagonal();
    m.topRightCorner<3, 1>() = Vec3(h.qoffset_x, h.qoffset_y, h.qoffset_z);
  } else {
    for (int a = 0; a < 3; ++a) {
      m(a, a) = h.pixdim[a + 1] > 0 ? h.pixdim[a + 1] : 1.0;
    }
  }
  Affine4 affine;
  try {
    affine = Affine4(m);
  } catch (GeometryError const &) {
    throw ParseError(fmt::format("'{}': singular orientation matrix", path.string()),
                     h.sform_code > 0 ? offsetof(NiftiHeader, srow_x) : offsetof(NiftiHeader, pixdim));
  }

  bool const scaled = h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
  std::vector<double> data(n);
  unsigned char const *p = buf.data() + offset;
  for (std::size_t i = 0; i < n; ++i, p += bpv) {
    double v = 0;
    switch (h.datatype) {
    case kUint8:
      v = *p;
      break;
    case kInt16:
      v = read_scalar<std::int16_t>(p);
      break;
    case kUint16:
      v = read_scalar<std::uint16_t>(p);
      break;
    case kFloat32:
      v = read_scalar<float>(p);
      break;
    case kFloat64:
      v = read_scalar<double>(p);
      break;
    }
    data[i] = scaled ? v * h.scl_slope + h.scl_inter : v;
  }

  std::string const intent(h.intent_name, strnlen(h.intent_name, sizeof h.intent_name));
  UnitTag unit = UnitTag::Signal;
  if (h.intent_code == kIntentLabel || intent == "t2s:label" || (h.datatype == kUint8 && !scaled)) {
    unit = UnitTag::LabelCode;
  } else if (intent == "t2s:ms") {
    unit = UnitTag::Milliseconds;
  }
  return VoxelGrid(GridGeometry{dims, affine}, std::move(data), unit);
}

void write_volume(VoxelGrid const &grid, std::filesystem::path const &path)
{
  bool const label = grid.unit() == UnitTag::LabelCode;
  NiftiHeader h;
  std::memset(&h, 0, sizeof h);
  h.sizeof_hdr = 348;
  h.regular = 'r';
  Dims const d = grid.dims();
  h.dim[0] = 3;
  h.dim[1] = std::int16_t(d.x);
  h.dim[2] = std::int16_t(d.y);
  h.dim[3] = std::int16_t(d.z);
  for (int a = 4; a < 8; ++a) {
    h.dim[a] = 1;
  }
  if (d.x > std::numeric_limits<std::int16_t>::max() || d.y > std::numeric_limits<std::int16_t>::max() ||
      d.z > std::numeric_limits<std::int16_t>::max()) {
    throw IntegrityError("grid too large for NIfTI-1");
  }
  h.datatype = label ? kUint8 : kFloat32;
  h.bitpix = label ? 8 : 32;
  h.intent_code = label ? kIntentLabel : 0;

  Mat4 const &m = grid.affine().matrix();
  Vec3 const sp = grid.spacing();
  auto const q = rotation_to_quatern(grid.affine().linear());
  h.pixdim[0] = float(q[3]);
  for (int a = 0; a < 3; ++a) {
    h.pixdim[a + 1] = float(sp[a]);
  }
  for (int a = 4; a < 8; ++a) {
    h.pixdim[a] = 1.0f;
  }
  h.vox_offset = float(kVoxOffset);
  h.xyzt_units = 2 | 8;
  std::snprintf(h.descrip, sizeof h.descrip, "fetal-t2s");
  h.qform_code = 1;
  h.sform_code = 1;
  h.quatern_b = float(q[0]);
  h.quatern_c = float(q[1]);
  h.quatern_d = float(q[2]);
  h.qoffset_x = float(m(0, 3));
  h.qoffset_y = float(m(1, 3));
  h.qoffset_z = float(m(2, 3));
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = float(m(0, c));
    h.srow_y[c] = float(m(1, c));
    h.srow_z[c] = float(m(2, c));
  }
  std::string const intent = unit_name(grid.unit());
  std::memcpy(h.intent_name, intent.data(), std::min(intent.size(), sizeof h.intent_name));
  std::memcpy(h.magic, "n+1\0", 4);

  std::vector<unsigned char> out(kVoxOffset + grid.size() * (label ? 1 : 4), 0);
  std::memcpy(out.data(), &h, sizeof h);
  unsigned char *p = out.data() + kVoxOffset;
  for (double v : grid.data()) {
    if (label) {
      *p++ = static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
    } else {
      float const f = static_cast<float>(v);
      std::memcpy(p, &f, 4);
      p += 4;
    }
  }

  std::string const ext = path.extension().string();
  bool const gz = ext == ".gz";
  gzFile f = gzopen(path.c_str(), gz ? "wb6" : "wbT");
  if (!f) {
    throw IntegrityError(fmt::format("cannot write '{}'", path.string()));
  }
  std::size_t written = 0;
  while (written < out.size()) {
    unsigned const chunk = unsigned(std::min<std::size_t>(out.size() - written, 1u << 30));
    int const n = gzwrite(f, out.data() + written, chunk);
    if (n <= 0) {
      gzclose(f);
      throw IntegrityError(fmt::format("write failed for '{}'", path.string()));
    }
    written += std::size_t(n);
  }
  if (gzclose(f) != Z_OK) {
    throw IntegrityError(fmt::format("close failed for '{}'", path.string()));
  }
}

void write_mask(Mask const &mask, GridGeometry const &geometry, std::filesystem::path const &path)
{
  if (mask.size() != geometry.voxel_count()) {
    throw ContractViolation("mask size does not match geometry");
  }
  std::vector<double> data(mask.begin(), mask.end());
  write_volume(VoxelGrid(geometry, std::move(data), UnitTag::LabelCode), path);
}

Mask read_mask(std::filesystem::path const &path, GridGeometry const *expected)
{
  VoxelGrid const g = read_volume(path);
  if (expected && !g.geometry().same_as(*expected)) {
    throw IntegrityError(fmt::format("'{}': mask geometry does not match", path.string()));
  }
  Mask m(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    m[i] = g[i] != 0.0 ? 1 : 0;
  }
  return m;
}

} // namespace t2s
