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

#include "t2s/phantom.hpp"

#include "t2s/error.hpp"
#include "t2s/labels.hpp"
#include "t2s/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace t2s {

namespace {

struct OrganDefault {
  Organ organ;
  double s0;
  double t2s_at_28;
  double slope_per_week;
};

// Lungs and liver rise with GA, kidney tissue falls, the rest are nearly flat.
constexpr OrganDefault kDefaults[] = {
    {Organ::Lungs, 800, 240, 6.0},           {Organ::Liver, 700, 90, 2.5},
    {Organ::Stomach, 1000, 380, -0.5},       {Organ::Spleen, 750, 110, 1.5},
    {Organ::KidneyPelvis, 1000, 330, -5.0},  {Organ::KidneyParenchyma, 850, 160, -3.0},
    {Organ::Bladder, 1000, 420, -0.5},       {Organ::Thymus, 750, 130, 0.5},
    {Organ::Gallbladder, 950, 280, -3.0},    {Organ::AdrenalGlands, 800, 120, -1.5},
};

struct Shape {
  Organ organ;
  Vec3 centre; // normalised to the grid half-extent
  Vec3 semi;   // normalised semi-axes
};

// Body layout in normalised coordinates: x left-right, y anterior-posterior,
// z inferior-superior. The kidney pelvis is derived from the parenchyma.
constexpr double kLayout[][7] = {
    {1, 0.00, 0.12, 0.50, 0.58, 0.42, 0.30},    // lungs
    {8, 0.00, -0.58, 0.55, 0.22, 0.16, 0.24},   // thymus
    {2, -0.25, -0.02, 0.00, 0.42, 0.40, 0.22},  // liver
    {3, 0.45, -0.22, 0.04, 0.20, 0.20, 0.22},   // stomach
    {4, 0.47, 0.42, 0.02, 0.18, 0.17, 0.22},    // spleen
    {9, -0.22, -0.66, -0.06, 0.16, 0.15, 0.20}, // gallbladder
    {6, -0.30, 0.42, -0.55, 0.36, 0.34, 0.28},  // kidney parenchyma
    {10, 0.40, 0.40, -0.46, 0.17, 0.17, 0.20},  // adrenal glands
    {7, 0.20, -0.40, -0.60, 0.22, 0.22, 0.24},  // bladder
};

constexpr double kPelvisScale = 0.5;
constexpr double kPelvisShift = 0.35;
constexpr double kMinSemiVoxels = 1.5;
constexpr int kPlacementAttempts = 64;

struct Ellipsoid {
  int label;
  Vec3 centre_mm;
  Vec3 semi_mm;
  double angle_rad;
};

double ga_scale(double ga_weeks) { return 0.85 + 0.15 * std::clamp((ga_weeks - 17.0) / 23.0, 0.0, 1.0); }

bool rasterize(std::vector<Ellipsoid> const &shapes, GridGeometry const &geom, std::vector<double> &labels)
{
  labels.assign(geom.voxel_count(), 0.0);
  Affine4 const w2i = geom.affine.inverse();
  Dims const d = geom.dims;
  for (auto const &e : shapes) {
    // Bounding box in index space; must stay one voxel clear of the border.
    double const r = e.semi_mm.maxCoeff();
    Vec3 const lo = w2i.apply(e.centre_mm - Vec3::Constant(r));
    Vec3 const hi = w2i.apply(e.centre_mm + Vec3::Constant(r));
    int bl[3], bh[3];
    int const n[3] = {d.x, d.y, d.z};
    for (int a = 0; a < 3; ++a) {
      bl[a] = int(std::floor(std::min(lo[a], hi[a])));
      bh[a] = int(std::ceil(std::max(lo[a], hi[a])));
      bl[a] = std::max(bl[a], 0);
      bh[a] = std::min(bh[a], n[a] - 1);
    }
    double const c = std::cos(e.angle_rad), s = std::sin(e.angle_rad);
    int count = 0;
    for (int k = bl[2]; k <= bh[2]; ++k) {
      for (int j = bl[1]; j <= bh[1]; ++j) {
        for (int i = bl[0]; i <= bh[0]; ++i) {
          Vec3 const p = geom.affine.apply(Vec3(i, j, k)) - e.centre_mm;
          double const lx = c * p[0] + s * p[1], ly = -s * p[0] + c * p[1], lz = p[2];
          double const q = (lx * lx) / (e.semi_mm[0] * e.semi_mm[0]) + (ly * ly) / (e.semi_mm[1] * e.semi_mm[1]) +
                           (lz * lz) / (e.semi_mm[2] * e.semi_mm[2]);
          if (q > 1.0) {
            continue;
          }
          if (i == 0 || j == 0 || k == 0 || i == d.x - 1 || j == d.y - 1 || k == d.z - 1) {
            return false;
          }
          double &dst = labels[geom.linear_index(i, j, k)];
          bool const nested = e.label == code(Organ::KidneyPelvis) && dst == code(Organ::KidneyParenchyma);
          if (dst != 0.0 && !nested) {
            return false;
          }
          dst = e.label;
          ++count;
        }
      }
    }
    if (count == 0) {
      return false;
    }
  }

  // Distinct organs may not touch, except the pelvis inside the parenchyma.
  for (int k = 1; k < d.z - 1; ++k) {
    for (int j = 1; j < d.y - 1; ++j) {
      for (int i = 1; i < d.x - 1; ++i) {
        int const a = int(labels[geom.linear_index(i, j, k)]);
        if (a == 0) {
          continue;
        }
        for (int dk = -1; dk <= 1; ++dk) {
          for (int dj = -1; dj <= 1; ++dj) {
            for (int di = -1; di <= 1; ++di) {
              int const b = int(labels[geom.linear_index(i + di, j + dj, k + dk)]);
              if (b == 0 || b == a) {
                continue;
              }
              bool const kidney = (a == 5 && b == 6) || (a == 6 && b == 5);
              if (!kidney) {
                return false;
              }
            }
          }
        }
      }
    }
  }
  return true;
}

} // namespace

OrganTable default_organ_table(double ga_weeks)
{
  OrganTable t;
  for (auto const &d : kDefaults) {
    t[code(d.organ)] = OrganProperties{d.s0, d.t2s_at_28 + d.slope_per_week * (ga_weeks - 28.0)};
  }
  return t;
}

void DigitalPhantom::validate() const
{
  if (labels.unit() != UnitTag::LabelCode) {
    throw ContractViolation("phantom label grid must be label-coded");
  }
  for (double v : labels.data()) {
    int const l = int(v);
    if (double(l) != v || !is_valid_label(l)) {
      throw ContractViolation(fmt::format("phantom label {} outside the organ scheme", v));
    }
    if (l == 0) {
      continue;
    }
    auto const it = organs.find(l);
    if (it == organs.end() || !(it->second.s0 > 0) || !(it->second.t2star_ms > 0)) {
      throw ContractViolation(fmt::format("phantom label {} lacks a valid organ-table entry", l));
    }
  }
}

namespace {
VoxelGrid map_labels(DigitalPhantom const &p, UnitTag unit, auto &&value)
{
  VoxelGrid out(p.labels.geometry(), unit);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int const l = int(p.labels[i]);
    if (l != 0) {
      out[i] = value(p.organs.at(l));
    }
  }
  return out;
}
} // namespace

VoxelGrid DigitalPhantom::s0_map() const
{
  return map_labels(*this, UnitTag::Signal, [](OrganProperties const &o) { return o.s0; });
}

VoxelGrid DigitalPhantom::t2star_map() const
{
  return map_labels(*this, UnitTag::Milliseconds, [](OrganProperties const &o) { return o.t2star_ms; });
}

VoxelGrid DigitalPhantom::signal_at(double te_ms) const
{
  VoxelGrid const s = map_labels(
      *this, UnitTag::Signal, [te_ms](OrganProperties const &o) { return o.s0 * std::exp(-te_ms / o.t2star_ms); });
  return gaussian_smooth(s, edge_sigma_mm);
}

DigitalPhantom make_phantom(PhantomOptions const &options)
{
  if (!(options.ga_weeks >= 17.0 && options.ga_weeks <= 40.0)) {
    throw ConfigError(fmt::format("gestational age {} outside [17, 40] weeks", options.ga_weeks));
  }
  if (!(options.spacing_mm.minCoeff() > 0)) {
    throw ConfigError("phantom spacing must be > 0");
  }
  GridGeometry const geom = centred_geometry(options.dims, options.spacing_mm);
  Vec3 const half(options.dims.x * options.spacing_mm[0] * 0.5, options.dims.y * options.spacing_mm[1] * 0.5,
                  options.dims.z * options.spacing_mm[2] * 0.5);
  double const g = ga_scale(options.ga_weeks);

  std::vector<Shape> shapes;
  for (auto const &row : kLayout) {
    shapes.push_back(Shape{Organ(int(row[0])), Vec3(row[1], row[2], row[3]), Vec3(row[4], row[5], row[6])});
  }
  for (auto const &s : shapes) {
    Vec3 semi_vox = s.semi.cwiseProduct(half) * g;
    if (s.organ == Organ::KidneyParenchyma) {
      semi_vox *= kPelvisScale;
    }
    semi_vox = semi_vox.cwiseQuotient(options.spacing_mm);
    if (semi_vox.minCoeff() < kMinSemiVoxels) {
      throw ConfigError(fmt::format("cannot place organs: {}x{}x{} grid is too small for the {}", options.dims.x,
                                    options.dims.y, options.dims.z,
                                    s.organ == Organ::KidneyParenchyma ? "kidney pelvis"
                                                                       : std::string(organ_name(code(s.organ)))));
    }
  }

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> labels;
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    std::vector<Ellipsoid> ellipsoids;
    for (auto const &s : shapes) {
      Vec3 const jitter_c(unit(rng), unit(rng), unit(rng));
      Vec3 const jitter_r(unit(rng), unit(rng), unit(rng));
      double const angle = unit(rng) * 12.0 * std::numbers::pi / 180.0;
      Vec3 const centre = (s.centre + 0.03 * jitter_c).cwiseProduct(half);
      Vec3 const semi = s.semi.cwiseProduct(half).cwiseProduct(Vec3::Ones() + 0.06 * jitter_r) * g;
      ellipsoids.push_back(Ellipsoid{code(s.organ), centre, semi, angle});
      if (s.organ == Organ::KidneyParenchyma) {
        // Pelvis sits on the medial side of the parenchyma.
        double const medial = centre[0] < 0 ? 1.0 : -1.0;
        Vec3 const local(medial * kPelvisShift * semi[0], 0.0, 0.0);
        Vec3 const shift(std::cos(angle) * local[0], std::sin(angle) * local[0], 0.0);
        ellipsoids.push_back(Ellipsoid{code(Organ::KidneyPelvis), centre + shift, semi * kPelvisScale, angle});
      }
    }
    if (rasterize(ellipsoids, geom, labels)) {
      DigitalPhantom p;
      p.labels = VoxelGrid(geom, std::move(labels), UnitTag::LabelCode);
      p.organs = default_organ_table(options.ga_weeks);
      for (auto const &[l, props] : options.organ_overrides) {
        p.organs[l] = props;
      }
      p.ga_weeks = options.ga_weeks;
      p.edge_sigma_mm = options.edge_sigma_mm;
      p.validate();
      return p;
    }
  }
  throw ConfigError(fmt::format("cannot place organs without overlap on a {}x{}x{} grid", options.dims.x,
                                options.dims.y, options.dims.z));
}

DigitalPhantom make_phantom(double ga_weeks, Dims dims, Vec3 const &spacing_mm, std::uint64_t seed)
{
  PhantomOptions o;
  o.ga_weeks = ga_weeks;
  o.dims = dims;
  o.spacing_mm = spacing_mm;
  o.seed = seed;
  return make_phantom(o);
}

Vec3 SinusoidalDeformation::displacement(Vec3 const &p) const
{
  if (!active()) {
    return Vec3::Zero();
  }
  double const phase = 2.0 * std::numbers::pi * wave_axis.dot(p) / wavelength_mm + phase_rad;
  return amplitude_mm * std::sin(phase) * direction;
}

void MotionScript::validate() const
{
  if (slice_jitter_deg < 0 || slice_jitter_mm < 0) {
    throw ConfigError("slice jitter amplitude must be >= 0");
  }
  if (noise_sigma < 0) {
    throw ConfigError("noise sigma must be >= 0");
  }
  if (dynamics.empty()) {
    throw ConfigError("motion script must list at least one dynamic");
  }
  for (auto const &d : dynamics) {
    if (d.deformation.active() && !(d.deformation.wavelength_mm > 0)) {
      throw ConfigError("deformation wavelength must be > 0");
    }
  }
}

MotionScript MotionScript::still(int dynamics)
{
  MotionScript m;
  m.dynamics.resize(std::size_t(std::max(dynamics, 0)));
  return m;
}

GridGeometry AcquisitionGeometry::geometry() const
{
  Vec3 const half((dims.x - 1) * 0.5, (dims.y - 1) * 0.5, (dims.z - 1) * 0.5);
  Mat3 const lin = orientation * voxel_mm.asDiagonal();
  GridGeometry g{dims, Affine4(lin, centre_mm - lin * half)};
  g.validate();
  return g;
}

AcquisitionGeometry AcquisitionGeometry::covering(DigitalPhantom const &phantom, Vec3 const &voxel_mm)
{
  Dims const d = phantom.labels.dims();
  Vec3 const sp = phantom.labels.spacing();
  Vec3 const fov(d.x * sp[0], d.y * sp[1], d.z * sp[2]);
  AcquisitionGeometry a;
  a.voxel_mm = voxel_mm;
  a.dims = Dims{int(std::ceil(fov[0] / voxel_mm[0] - 1e-9)), int(std::ceil(fov[1] / voxel_mm[1] - 1e-9)),
                int(std::ceil(fov[2] / voxel_mm[2] - 1e-9))};
  a.centre_mm = phantom.labels.affine().apply(Vec3((d.x - 1) * 0.5, (d.y - 1) * 0.5, (d.z - 1) * 0.5));
  return a;
}

namespace {

RigidTransform lerp(RigidTransform const &a, RigidTransform const &b, double t)
{
  return RigidTransform{a.rotation_deg + t * (b.rotation_deg - a.rotation_deg),
                        a.translation_mm + t * (b.translation_mm - a.translation_mm)};
}

std::vector<double> acquisition_times(int slices, SliceOrder order)
{
  std::vector<double> t(std::size_t(slices), 0.0);
  if (slices <= 1) {
    return t;
  }
  int pos = 0;
  auto stamp = [&](int s) { t[std::size_t(s)] = double(pos++) / double(slices - 1); };
  if (order == SliceOrder::Sequential) {
    for (int s = 0; s < slices; ++s) {
      stamp(s);
    }
  } else {
    for (int s = 0; s < slices; s += 2) {
      stamp(s);
    }
    for (int s = 1; s < slices; s += 2) {
      stamp(s);
    }
  }
  return t;
}

} // namespace

SimulatedSeries simulate_acquisition(DigitalPhantom const &phantom, MotionScript const &motion,
                                     std::vector<double> const &tes_ms, AcquisitionGeometry const &acquisition,
                                     SimulationOptions const &options)
{
  if (tes_ms.empty()) {
    throw ConfigError("echo time list is empty");
  }
  for (std::size_t e = 0; e < tes_ms.size(); ++e) {
    if (!(tes_ms[e] > 0) || (e > 0 && !(tes_ms[e] > tes_ms[e - 1]))) {
      throw ConfigError("echo times must be positive and strictly increasing");
    }
  }
  motion.validate();
  if (!(acquisition.voxel_mm.minCoeff() > 0)) {
    throw ConfigError("acquisition voxel sizes must be > 0");
  }

  GridGeometry const acq = acquisition.geometry();
  int const n_dyn = int(motion.dynamics.size());
  int const n_slices = acq.dims.z;

  std::vector<VoxelGrid> signals;
  for (double te : tes_ms) {
    signals.push_back(phantom.signal_at(te));
  }
  std::vector<TrilinearSampler> samplers;
  for (auto const &s : signals) {
    samplers.emplace_back(s);
  }
  Affine4 const phantom_w2i = phantom.labels.affine().inverse();

  PsfKernel kernel;
  if (options.psf) {
    PsfSpec const psf = PsfSpec::for_acquisition(acquisition.voxel_mm, options.psf_support_sigmas);
    kernel = psf_weights(psf, acquisition.orientation, phantom.labels.spacing().minCoeff());
  } else {
    kernel.offsets_mm = {Vec3::Zero()};
    kernel.weights = {1.0};
  }

  SimulatedSeries out;
  out.truth.dynamic_transforms.resize(std::size_t(n_dyn));
  out.truth.slice_transforms.resize(std::size_t(n_dyn));
  out.truth.deformations.resize(std::size_t(n_dyn));
  out.truth.noiseless.resize(std::size_t(n_dyn));
  out.dynamics.resize(std::size_t(n_dyn));
  std::vector<double> const times = acquisition_times(n_slices, motion.order);

  parallel_for(std::size_t(n_dyn), [&](std::size_t d) {
    DynamicMotion const &dm = motion.dynamics[d];
    RigidTransform const &next_pose = d + 1 < motion.dynamics.size() ? motion.dynamics[d + 1].pose : dm.pose;
    out.truth.dynamic_transforms[d] = dm.pose.inverse();
    out.truth.deformations[d] = dm.deformation;

    std::mt19937_64 jitter_rng(motion.seed * 6364136223846793005ULL + 1442695040888963407ULL + d);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    std::vector<std::vector<double>> clean(tes_ms.size(), std::vector<double>(acq.voxel_count(), 0.0));
    auto &slice_truth = out.truth.slice_transforms[d];
    slice_truth.resize(std::size_t(n_slices));

    for (int s = 0; s < n_slices; ++s) {
      RigidTransform applied = lerp(dm.pose, next_pose, motion.intra_dynamic_drift * times[std::size_t(s)]);
      if (motion.slice_jitter_deg > 0 || motion.slice_jitter_mm > 0) {
        RigidTransform j;
        for (int a = 0; a < 3; ++a) {
          j.rotation_deg[a] = motion.slice_jitter_deg * unit(jitter_rng);
        }
        for (int a = 0; a < 3; ++a) {
          j.translation_mm[a] = motion.slice_jitter_mm * unit(jitter_rng);
        }
        applied = compose(j, applied);
      }
      RigidTransform const to_phantom = applied.inverse();
      slice_truth[std::size_t(s)] = to_phantom;
      Affine4 const scanner_to_phantom = to_phantom.to_affine();
      Mat3 const rot = scanner_to_phantom.linear();

      std::vector<Vec3> rotated(kernel.size());
      for (std::size_t k = 0; k < kernel.size(); ++k) {
        rotated[k] = rot * kernel.offsets_mm[k];
      }

      for (int j = 0; j < acq.dims.y; ++j) {
        for (int i = 0; i < acq.dims.x; ++i) {
          Vec3 const centre = scanner_to_phantom.apply(acq.affine.apply(Vec3(i, j, s)));
          std::size_t const n = acq.linear_index(i, j, s);
          for (std::size_t k = 0; k < kernel.size(); ++k) {
            Vec3 q = centre + rotated[k];
            q += dm.deformation.displacement(q);
            Vec3 const idx = phantom_w2i.apply(q);
            for (std::size_t e = 0; e < tes_ms.size(); ++e) {
              double v;
              if (samplers[e].sample(idx, v)) {
                clean[e][n] += kernel.weights[k] * v;
              }
            }
          }
        }
      }
    }

    std::mt19937_64 noise_rng(motion.seed + d);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MultiEchoDynamic dyn;
    dyn.index = int(d);
    dyn.tes_ms = tes_ms;
    for (std::size_t e = 0; e < tes_ms.size(); ++e) {
      std::vector<double> noisy = clean[e];
      if (motion.noise_sigma > 0) {
        for (double &v : noisy) {
          double const n1 = motion.noise_sigma * gauss(noise_rng);
          if (motion.noise == NoiseModel::Rician) {
            double const n2 = motion.noise_sigma * gauss(noise_rng);
            v = std::hypot(v + n1, n2);
          } else {
            v += n1;
          }
        }
      }
      dyn.echoes.emplace_back(acq, std::move(noisy), UnitTag::Signal);
      if (options.keep_noiseless) {
        out.truth.noiseless[d].emplace_back(acq, std::move(clean[e]), UnitTag::Signal);
      }
    }
    out.dynamics[d] = std::move(dyn);
  });
  return out;
}

} // namespace t2s
