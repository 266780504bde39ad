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

#include "t2s/svr.hpp"

#include "t2s/error.hpp"
#include "t2s/numeric.hpp"
#include "t2s/parallel.hpp"

#include <fmt/format.h>
#include <fmt/os.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace t2s {

Vec3 Deformation::displacement(Vec3 const &p) const
{
  Vec3 u = Vec3::Zero();
  for (auto const &l : levels) {
    u += l.displacement(p);
  }
  return u;
}

double Deformation::max_displacement() const
{
  double m = 0.0;
  for (auto const &l : levels) {
    m += l.max_displacement();
  }
  return m;
}

Vec3 SliceModel::position(int i, int j) const
{
  Vec3 x = pose.apply(pixels.affine().apply(Vec3(i, j, 0)));
  if (deformation) {
    x += deformation->displacement(x);
  }
  return x;
}

Vec3 SliceModel::normal() const { return pose.rotation() * pixels.affine().linear().col(2).normalized(); }

Vec3 SliceModel::centre() const
{
  Dims const d = pixels.dims();
  return pose.apply(pixels.affine().apply(Vec3(0.5 * (d.x - 1), 0.5 * (d.y - 1), 0.0)));
}

namespace {

VoxelGrid slice_of(VoxelGrid const &vol, int k)
{
  GridGeometry g = vol.geometry();
  Dims const d = g.dims;
  g.dims.z = 1;
  g.affine = Affine4(vol.affine().linear(), vol.affine().apply(Vec3(0, 0, k)));
  std::size_t const plane = std::size_t(d.x) * std::size_t(d.y);
  auto src = vol.data().subspan(std::size_t(k) * plane, plane);
  return VoxelGrid(g, std::vector<double>(src.begin(), src.end()), vol.unit());
}

Mask mask_slice(Mask const &m, Dims d, int k)
{
  std::size_t const plane = std::size_t(d.x) * std::size_t(d.y);
  return Mask(m.begin() + std::ptrdiff_t(std::size_t(k) * plane), m.begin() + std::ptrdiff_t(std::size_t(k + 1) * plane));
}

} // namespace

std::vector<SliceModel> extract_slices(std::vector<VoxelGrid> const &volumes, std::vector<int> const &dynamic_indices)
{
  if (volumes.size() != dynamic_indices.size()) {
    throw ContractViolation("one dynamic index per volume required");
  }
  std::vector<SliceModel> out;
  for (std::size_t s = 0; s < volumes.size(); ++s) {
    for (int k = 0; k < volumes[s].dims().z; ++k) {
      SliceModel m;
      m.pixels = slice_of(volumes[s], k);
      m.stack = int(s);
      m.dynamic = dynamic_indices[s];
      m.slice = k;
      out.push_back(std::move(m));
    }
  }
  return out;
}

std::vector<SliceModel> extract_slices(std::vector<MultiEchoDynamic> const &dynamics, std::size_t echo_index)
{
  std::vector<VoxelGrid> vols;
  std::vector<int> idx;
  for (auto const &d : dynamics) {
    if (echo_index >= d.echoes.size()) {
      throw ConfigError(fmt::format("echo index {} out of range for {} echoes", echo_index, d.echoes.size()));
    }
    vols.push_back(d.echoes[echo_index]);
    idx.push_back(d.index);
  }
  return extract_slices(vols, idx);
}

void ReconConfig::validate() const
{
  if (!(resolution_mm > 0)) {
    throw ConfigError("reconstruction resolution must be > 0");
  }
  for (std::size_t i = 0; i < cp_schedule_mm.size(); ++i) {
    if (!(cp_schedule_mm[i] > 0) || (i > 0 && !(cp_schedule_mm[i] < cp_schedule_mm[i - 1]))) {
      throw ConfigError("control-point schedule must be positive and strictly decreasing");
    }
  }
  if (intensity_matching) {
    throw ConfigError("intensity matching is not supported");
  }
  if (robust_stats) {
    throw ConfigError("robust statistics are not supported");
  }
  if (delta < 0 || final_delta < 0 || outer_iterations < 0 || sr_iterations < 0 || deformable_iterations < 0) {
    throw ConfigError("iteration counts and regularisation weights must be >= 0");
  }
  if (pyramid_levels < 1 || !(initial_step >= final_step) || !(final_step > 0)) {
    throw ConfigError("registration pyramid needs >= 1 level and initial step >= final step > 0");
  }
  psf.validate();
}

GridGeometry covering_grid(std::vector<SliceModel> const &slices, ReconConfig const &config)
{
  if (slices.empty()) {
    throw ContractViolation("cannot build a grid without slices");
  }
  Mat3 frame = slices.front().pixels.affine().linear();
  for (int c = 0; c < 3; ++c) {
    frame.col(c).normalize();
  }
  frame = slices.front().pose.rotation() * frame;
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (auto const &s : slices) {
    Dims const d = s.pixels.dims();
    for (int corner = 0; corner < 8; ++corner) {
      Vec3 const ijk((corner & 1) ? d.x - 0.5 : -0.5, (corner & 2) ? d.y - 0.5 : -0.5, (corner & 4) ? 0.5 : -0.5);
      Vec3 const local = frame.transpose() * s.pose.apply(s.pixels.affine().apply(ijk));
      lo = lo.cwiseMin(local);
      hi = hi.cwiseMax(local);
    }
  }
  lo.array() -= config.margin_mm;
  hi.array() += config.margin_mm;
  GridGeometry g;
  double const res = config.resolution_mm;
  Vec3 const extent = hi - lo;
  g.dims = Dims{int(std::ceil(extent[0] / res)) + 1, int(std::ceil(extent[1] / res)) + 1,
                int(std::ceil(extent[2] / res)) + 1};
  Vec3 const used(double(g.dims.x - 1) * res, double(g.dims.y - 1) * res, double(g.dims.z - 1) * res);
  Vec3 const start = 0.5 * (lo + hi) - 0.5 * used;
  g.affine = Affine4(frame * res, frame * start);
  return g;
}

ForwardModel::ForwardModel(GridGeometry grid, PsfSpec const &psf) : grid_(std::move(grid))
{
  psf.validate();
  Vec3 const sp = grid_.spacing();
  kernels_.resize(3);
  for (int axis = 0; axis < 3; ++axis) {
    for (int d = 0; d < 3; ++d) {
      double const fwhm = d == axis ? psf.through_plane_fwhm_mm : psf.in_plane_fwhm_mm;
      double const sigma = fwhm * kFwhmToSigma / sp[d];
      int const radius = int(std::floor(psf.support_sigmas * sigma + 1e-9));
      std::vector<double> k(std::size_t(2 * radius + 1));
      double sum = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        k[std::size_t(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
        sum += k[std::size_t(i + radius)];
      }
      for (double &w : k) {
        w /= sum;
      }
      kernels_[std::size_t(axis)].push_back(std::move(k));
    }
  }
}

int ForwardModel::psf_axis(SliceModel const &slice) const
{
  Mat3 lin = grid_.affine.linear();
  for (int c = 0; c < 3; ++c) {
    lin.col(c).normalize();
  }
  Vec3 const n = lin.transpose() * slice.normal();
  int axis = 0;
  n.cwiseAbs().maxCoeff(&axis);
  return axis;
}

namespace {

// Zero-padded 1D convolution along one grid dimension.
void convolve_axis(std::vector<double> &data, Dims d, int dim, std::vector<double> const &k)
{
  int const r = int(k.size() / 2);
  if (r == 0) {
    return;
  }
  int const n[3] = {d.x, d.y, d.z};
  std::size_t const stride[3] = {1, std::size_t(d.x), std::size_t(d.x) * std::size_t(d.y)};
  int const len = n[dim];
  std::vector<double> line(static_cast<std::size_t>(len));
  int const o1 = (dim + 1) % 3, o2 = (dim + 2) % 3;
  for (int b = 0; b < n[o2]; ++b) {
    for (int a = 0; a < n[o1]; ++a) {
      std::size_t const base = std::size_t(a) * stride[o1] + std::size_t(b) * stride[o2];
      for (int i = 0; i < len; ++i) {
        line[std::size_t(i)] = data[base + std::size_t(i) * stride[dim]];
      }
      for (int i = 0; i < len; ++i) {
        double acc = 0.0;
        int const lo = std::max(-r, -i), hi = std::min(r, len - 1 - i);
        for (int t = lo; t <= hi; ++t) {
          acc += k[std::size_t(t + r)] * line[std::size_t(i + t)];
        }
        data[base + std::size_t(i) * stride[dim]] = acc;
      }
    }
  }
}

} // namespace

VoxelGrid ForwardModel::blur(VoxelGrid const &volume, int axis) const
{
  std::vector<double> data(volume.data().begin(), volume.data().end());
  for (int d = 0; d < 3; ++d) {
    convolve_axis(data, grid_.dims, d, kernels_[std::size_t(axis)][std::size_t(d)]);
  }
  return VoxelGrid(grid_, std::move(data), volume.unit());
}

namespace {

// Continuous grid indices of every pixel of every slice, fixed for one
// projection pass.
struct SliceSamples {
  std::vector<Vec3> idx;
  Mask inside;
  int axis = 2;
};

std::vector<SliceSamples> sample_positions(std::vector<SliceModel> const &slices, ForwardModel const &model)
{
  std::vector<SliceSamples> out(slices.size());
  Affine4 const w2i = model.grid().affine.inverse();
  Dims const gd = model.grid().dims;
  double const tol = 1e-6;
  parallel_for(slices.size(), [&](std::size_t s) {
    SliceModel const &sl = slices[s];
    SliceSamples &ss = out[s];
    ss.axis = model.psf_axis(sl);
    Dims const d = sl.pixels.dims();
    ss.idx.resize(std::size_t(d.x) * std::size_t(d.y));
    ss.inside.assign(ss.idx.size(), 0);
    Affine4 const rigid = sl.pose.to_affine() * sl.pixels.affine();
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        Vec3 x = rigid.apply(Vec3(i, j, 0));
        if (sl.deformation) {
          x += sl.deformation->displacement(x);
        }
        Vec3 const q = w2i.apply(x);
        std::size_t const p = std::size_t(j) * std::size_t(d.x) + std::size_t(i);
        ss.idx[p] = q;
        ss.inside[p] = q[0] >= -tol && q[1] >= -tol && q[2] >= -tol && q[0] <= gd.x - 1 + tol &&
                       q[1] <= gd.y - 1 + tol && q[2] <= gd.z - 1 + tol;
      }
    }
  });
  return out;
}

std::set<int> axes_used(std::vector<SliceSamples> const &ss)
{
  std::set<int> a;
  for (auto const &s : ss) {
    a.insert(s.axis);
  }
  return a;
}

struct Projector {
  ForwardModel const &model;
  std::vector<SliceModel> const &slices;
  std::vector<SliceSamples> const &samples;

  bool used(std::size_t s) const { return !slices[s].excluded && slices[s].weight > 0; }

  // Simulated pixel values; NaN where the pixel falls outside the grid.
  std::vector<std::vector<double>> forward(VoxelGrid const &x) const
  {
    std::map<int, VoxelGrid> blurred;
    for (int a : axes_used(samples)) {
      blurred.emplace(a, model.blur(x, a));
    }
    std::vector<std::vector<double>> out(slices.size());
    parallel_for(slices.size(), [&](std::size_t s) {
      TrilinearSampler const sampler(blurred.at(samples[s].axis));
      auto const &ss = samples[s];
      out[s].assign(ss.idx.size(), std::nan(""));
      for (std::size_t p = 0; p < ss.idx.size(); ++p) {
        double v;
        if (ss.inside[p] && sampler.sample(ss.idx[p], v)) {
          out[s][p] = v;
        }
      }
    });
    return out;
  }

  // A^T applied to per-pixel values (NaN / unused slices contribute nothing).
  VoxelGrid adjoint(std::vector<std::vector<double>> const &values) const
  {
    GridGeometry const &g = model.grid();
    std::map<int, VoxelGrid> acc;
    for (int a : axes_used(samples)) {
      acc.emplace(a, VoxelGrid(g));
    }
    VoxelGrid const zero(g);
    TrilinearSampler const scatter(zero);
    // Sequential in slice order so sums do not depend on the worker count.
    for (std::size_t s = 0; s < slices.size(); ++s) {
      if (!used(s)) {
        continue;
      }
      auto const &ss = samples[s];
      auto dst = acc.at(ss.axis).data();
      double const w = slices[s].weight;
      for (std::size_t p = 0; p < ss.idx.size(); ++p) {
        double const v = values[s][p];
        if (ss.inside[p] && !std::isnan(v)) {
          scatter.scatter(ss.idx[p], w * v, dst);
        }
      }
    }
    VoxelGrid out(g);
    for (auto const &[a, grid] : acc) {
      VoxelGrid const b = model.blur(grid, a);
      for (std::size_t v = 0; v < out.size(); ++v) {
        out[v] += b[v];
      }
    }
    return out;
  }

  std::vector<std::vector<double>> ones() const
  {
    std::vector<std::vector<double>> o(slices.size());
    for (std::size_t s = 0; s < slices.size(); ++s) {
      o[s].assign(samples[s].idx.size(), 1.0);
    }
    return o;
  }

  double residual_energy(std::vector<std::vector<double>> const &sim) const
  {
    double e = 0.0;
    for (std::size_t s = 0; s < slices.size(); ++s) {
      if (!used(s)) {
        continue;
      }
      auto const px = slices[s].pixels.data();
      for (std::size_t p = 0; p < px.size(); ++p) {
        if (!std::isnan(sim[s][p])) {
          double const r = px[p] - sim[s][p];
          e += slices[s].weight * r * r;
        }
      }
    }
    return e;
  }
};

GridGeometry resolve_grid(std::vector<SliceModel> const &slices, ReconConfig const &config)
{
  return config.grid ? *config.grid : covering_grid(slices, config);
}

Mask weight_mask(VoxelGrid const &w, double floor)
{
  double const wmax = w.size() ? *std::max_element(w.data().begin(), w.data().end()) : 0.0;
  Mask m(w.size(), 0);
  if (wmax <= 0) {
    return m;
  }
  for (std::size_t v = 0; v < w.size(); ++v) {
    m[v] = w[v] > floor * wmax ? 1 : 0;
  }
  return m;
}

} // namespace

VolumeEstimate initialize_volume(std::vector<SliceModel> const &slices, ReconConfig const &config)
{
  if (slices.empty()) {
    throw ContractViolation("initialisation needs at least one slice");
  }
  return initialize_volume(slices, config, resolve_grid(slices, config));
}

VolumeEstimate initialize_volume(std::vector<SliceModel> const &slices, ReconConfig const &config,
                                 GridGeometry const &grid)
{
  if (slices.empty()) {
    throw ContractViolation("initialisation needs at least one slice");
  }
  ForwardModel const model(grid, config.psf);
  auto const samples = sample_positions(slices, model);
  Projector const proj{model, slices, samples};
  std::vector<std::vector<double>> values(slices.size());
  for (std::size_t s = 0; s < slices.size(); ++s) {
    values[s].assign(slices[s].pixels.data().begin(), slices[s].pixels.data().end());
  }
  VoxelGrid num = proj.adjoint(values);
  VoxelGrid const den = proj.adjoint(proj.ones());
  VolumeEstimate est;
  est.valid = weight_mask(den, config.weight_floor);
  for (std::size_t v = 0; v < num.size(); ++v) {
    num[v] = den[v] > 0 ? num[v] / den[v] : 0.0;
  }
  est.volume = std::move(num);
  return est;
}

double data_term(VoxelGrid const &volume, std::vector<SliceModel> const &slices, ReconConfig const &config)
{
  ForwardModel const model(volume.geometry(), config.psf);
  auto const samples = sample_positions(slices, model);
  Projector const proj{model, slices, samples};
  return proj.residual_energy(proj.forward(volume));
}

namespace {

double percentile(std::vector<double> v, double q)
{
  if (v.empty()) {
    return 0.0;
  }
  std::size_t const k = std::min(v.size() - 1, std::size_t(q * double(v.size() - 1)));
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(k), v.end());
  return v[k];
}

// Edge-preserving weighted average of an update field: neighbours across
// large intensity steps of the current volume contribute less.
VoxelGrid smooth_update(VoxelGrid const &update, VoxelGrid const &x, double lambda, double kappa)
{
  if (lambda <= 0) {
    return update;
  }
  Dims const d = x.dims();
  VoxelGrid out(update.geometry());
  int const off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  parallel_for(std::size_t(d.z), [&](std::size_t zz) {
    int const k = int(zz);
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        std::size_t const v = x.geometry().linear_index(i, j, k);
        double num = update[v];
        double den = 1.0;
        for (auto const &o : off) {
          int const a = i + o[0], b = j + o[1], c = k + o[2];
          if (a < 0 || b < 0 || c < 0 || a >= d.x || b >= d.y || c >= d.z) {
            continue;
          }
          std::size_t const n = x.geometry().linear_index(a, b, c);
          double const diff = kappa > 0 ? (x[n] - x[v]) / kappa : 0.0;
          double const w = lambda / std::sqrt(1.0 + diff * diff);
          num += w * update[n];
          den += w;
        }
        out[v] = num / den;
      }
    }
  });
  return out;
}

} // namespace

VoxelGrid superresolution_update(VoxelGrid const &volume, std::vector<SliceModel> const &slices,
                                 ReconConfig const &config, double delta, SrDiagnostics *diagnostics)
{
  ForwardModel const model(volume.geometry(), config.psf);
  auto const samples = sample_positions(slices, model);
  Projector const proj{model, slices, samples};

  VoxelGrid const col = proj.adjoint(proj.ones());
  double const cmax = col.size() ? *std::max_element(col.data().begin(), col.data().end()) : 0.0;
  auto const row = proj.forward([&] {
    VoxelGrid one(volume.geometry());
    std::fill(one.data().begin(), one.data().end(), 1.0);
    return one;
  }());

  VoxelGrid x = volume;
  auto sim = proj.forward(x);
  double energy = proj.residual_energy(sim);
  if (diagnostics) {
    diagnostics->data_term.push_back(energy);
  }
  double const first = energy;
  for (int it = 0; it < config.sr_iterations; ++it) {
    std::vector<std::vector<double>> res(slices.size());
    for (std::size_t s = 0; s < slices.size(); ++s) {
      auto const px = slices[s].pixels.data();
      res[s].assign(px.size(), std::nan(""));
      for (std::size_t p = 0; p < px.size(); ++p) {
        if (!std::isnan(sim[s][p]) && row[s][p] > 1e-9) {
          res[s][p] = (px[p] - sim[s][p]) / row[s][p];
        }
      }
    }
    VoxelGrid g = proj.adjoint(res);
    for (std::size_t v = 0; v < g.size(); ++v) {
      g[v] = col[v] > 1e-12 * cmax ? g[v] / col[v] : 0.0;
    }
    std::vector<double> positive;
    for (double v : x.data()) {
      if (v > 0) {
        positive.push_back(v);
      }
    }
    double const kappa = config.edge_scale * percentile(positive, 0.99);
    VoxelGrid const step = smooth_update(g, x, delta, kappa);

    bool accepted = false;
    double alpha = 1.0;
    for (int tries = 0; tries < 6 && !accepted; ++tries, alpha *= 0.5) {
      VoxelGrid cand = x;
      for (std::size_t v = 0; v < cand.size(); ++v) {
        cand[v] = std::max(0.0, x[v] + alpha * step[v]);
      }
      auto cand_sim = proj.forward(cand);
      double const e = proj.residual_energy(cand_sim);
      if (e <= energy) {
        x = std::move(cand);
        sim = std::move(cand_sim);
        energy = e;
        accepted = true;
      }
    }
    if (diagnostics) {
      diagnostics->data_term.push_back(energy);
    }
    if (!accepted) {
      break;
    }
  }
  if (diagnostics && energy > 1.1 * first) {
    diagnostics->diverged = true;
  }
  return x;
}

namespace {

std::vector<double> step_schedule(ReconConfig const &config)
{
  std::vector<double> steps;
  for (double h = config.initial_step; h >= config.final_step * (1 - 1e-9); h *= 0.5) {
    steps.push_back(h);
  }
  return steps;
}

// Blurred copies of the PSF-projected volume, finest first.
struct Pyramid {
  std::vector<double> sigma_mm;
  std::map<int, std::vector<VoxelGrid>> levels;
};

Pyramid build_pyramid(VoxelGrid const &volume, ForwardModel const &model, std::set<int> const &axes,
                      ReconConfig const &config)
{
  Pyramid p;
  for (int l = 0; l < config.pyramid_levels; ++l) {
    p.sigma_mm.push_back(l == 0 ? 0.0 : config.resolution_mm * double(1 << (l - 1)));
  }
  for (int a : axes) {
    VoxelGrid const base = model.blur(volume, a);
    std::vector<VoxelGrid> lv;
    for (double s : p.sigma_mm) {
      lv.push_back(s > 0 ? gaussian_smooth(base, s) : base);
    }
    p.levels.emplace(a, std::move(lv));
  }
  return p;
}

struct RegTarget {
  std::vector<Vec3> world;                 // scanner coordinates
  std::vector<std::vector<double>> values; // per level
  std::vector<Deformation const *> deformation;
  int axis = 2;
  Vec3 centre = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  bool single = true;
  RigidTransform start;
};

RegTarget make_target(std::vector<SliceModel const *> const &slices, Pyramid const &pyr, int axis)
{
  RegTarget t;
  t.axis = axis;
  t.start = slices.front()->pose;
  t.values.resize(pyr.sigma_mm.size());
  Vec3 c = Vec3::Zero();
  for (auto const *s : slices) {
    c += s->centre();
    std::vector<VoxelGrid> smoothed;
    for (double sg : pyr.sigma_mm) {
      smoothed.push_back(sg > 0 ? gaussian_smooth(s->pixels, sg) : s->pixels);
    }
    Dims const d = s->pixels.dims();
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        t.world.push_back(s->pixels.affine().apply(Vec3(i, j, 0)));
        t.deformation.push_back(s->deformation.get());
        std::size_t const p = std::size_t(j) * std::size_t(d.x) + std::size_t(i);
        for (std::size_t l = 0; l < smoothed.size(); ++l) {
          t.values[l].push_back(smoothed[l][p]);
        }
      }
    }
  }
  t.centre = c / double(slices.size());
  t.normal = slices.front()->normal();
  t.single = slices.size() == 1;
  return t;
}

Affine4 pose_from(RegTarget const &t, std::array<double, 6> const &p)
{
  RigidTransform d;
  d.rotation_deg = Vec3(p[0], p[1], p[2]);
  Mat3 const r = d.rotation();
  Vec3 const tr = t.centre + Vec3(p[3], p[4], p[5]) - r * t.centre;
  return Affine4(r, tr) * t.start.to_affine();
}

struct Eval {
  double ncc = -2.0;
  double overlap = 0.0;
};

Eval evaluate(RegTarget const &t, VoxelGrid const &vol, std::size_t level, Affine4 const &pose)
{
  TrilinearSampler const sampler(vol);
  Affine4 const w2i = vol.affine().inverse();
  Affine4 const direct = w2i * pose;
  auto const &vals = t.values[level];
  std::vector<double> a, b;
  a.reserve(vals.size());
  b.reserve(vals.size());
  for (std::size_t p = 0; p < t.world.size(); ++p) {
    Vec3 idx;
    if (t.deformation[p]) {
      Vec3 x = pose.apply(t.world[p]);
      x += t.deformation[p]->displacement(x);
      idx = w2i.apply(x);
    } else {
      idx = direct.apply(t.world[p]);
    }
    double m;
    if (sampler.sample(idx, m)) {
      a.push_back(vals[p]);
      b.push_back(m);
    }
  }
  Eval e;
  e.overlap = t.world.empty() ? 0.0 : double(a.size()) / double(t.world.size());
  if (a.size() >= 2) {
    e.ncc = ncc(a, b);
  }
  return e;
}

// Levenberg-Marquardt on sum_p (s_p - a m_p(p) - b)^2 over the six pose
// parameters and the gain/offset pair, which has the same optimum as NCC.
// Steps are kept only when NCC improves.
std::array<double, 6> refine_pose(RegTarget const &t, VoxelGrid const &vol, std::size_t level,
                                  std::array<double, 6> p, double &best, double min_overlap)
{
  TrilinearSampler const sampler(vol);
  Affine4 const w2i = vol.affine().inverse();
  Mat3 const jac_w = w2i.linear().transpose();
  auto const &vals = t.values[level];
  Mat4 const start = t.start.to_affine().matrix();
  double const h = 1e-4;
  double lambda = 1e-3;
  for (int it = 0; it < 30; ++it) {
    std::array<Mat3, 3> dr;
    for (int a = 0; a < 3; ++a) {
      Vec3 lo(p[0], p[1], p[2]), hi = lo;
      lo[a] -= h;
      hi[a] += h;
      dr[std::size_t(a)] = (RigidTransform{hi, Vec3::Zero()}.rotation() - RigidTransform{lo, Vec3::Zero()}.rotation()) /
                           (2.0 * h);
    }
    Affine4 const pose = pose_from(t, p);
    std::vector<double> s, m;
    std::vector<Eigen::Matrix<double, 6, 1>> dm;
    for (std::size_t q = 0; q < t.world.size(); ++q) {
      Vec3 const xs = (start * t.world[q].homogeneous()).head<3>() - t.centre;
      Vec3 x = pose.apply(t.world[q]);
      if (t.deformation[q]) {
        x += t.deformation[q]->displacement(x);
      }
      double v;
      Vec3 gi;
      if (!sampler.sample_gradient(w2i.apply(x), v, gi)) {
        continue;
      }
      Vec3 const g = jac_w * gi;
      Eigen::Matrix<double, 6, 1> row;
      for (int a = 0; a < 3; ++a) {
        row[a] = g.dot(dr[std::size_t(a)] * xs);
        row[a + 3] = g[a];
      }
      s.push_back(vals[q]);
      m.push_back(v);
      dm.push_back(row);
    }
    if (m.size() < 8) {
      break;
    }
    double const ms = mean(m), ss = mean(s);
    double smm = 0.0, sms = 0.0;
    for (std::size_t q = 0; q < m.size(); ++q) {
      smm += (m[q] - ms) * (m[q] - ms);
      sms += (m[q] - ms) * (s[q] - ss);
    }
    if (!(smm > 0)) {
      break;
    }
    double const gain = sms / smm, offset = ss - gain * ms;
    Eigen::Matrix<double, 8, 8> jtj = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> jtr = Eigen::Matrix<double, 8, 1>::Zero();
    for (std::size_t q = 0; q < m.size(); ++q) {
      Eigen::Matrix<double, 8, 1> j;
      j.head<6>() = gain * dm[q];
      j[6] = m[q];
      j[7] = 1.0;
      double const res = s[q] - gain * m[q] - offset;
      jtj += j * j.transpose();
      jtr += j * res;
    }
    bool accepted = false;
    for (int tries = 0; tries < 8 && !accepted; ++tries) {
      Eigen::Matrix<double, 8, 8> a = jtj;
      a.diagonal() *= 1.0 + lambda;
      Eigen::Matrix<double, 8, 1> const d = a.ldlt().solve(jtr);
      if (!d.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      std::array<double, 6> trial = p;
      for (int k = 0; k < 6; ++k) {
        trial[std::size_t(k)] += d[k];
      }
      Eval const e = evaluate(t, vol, level, pose_from(t, trial));
      if (e.overlap >= min_overlap && e.ncc > best) {
        double const gainv = e.ncc - best;
        p = trial;
        best = e.ncc;
        accepted = true;
        lambda = std::max(lambda * 0.3, 1e-7);
        if (gainv < 1e-12) {
          return p;
        }
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) {
      break;
    }
  }
  return p;
}

// Coarse-to-fine pattern search from p0 with a Levenberg-Marquardt polish
// at the finest level. `score` receives the finest-level NCC.
std::array<double, 6> search_from(RegTarget const &t, Pyramid const &pyr, ReconConfig const &config,
                                  std::array<double, 6> const &p0, double &score, int &evaluations)
{
  auto const &lv = pyr.levels.at(t.axis);
  std::vector<double> const steps = step_schedule(config);
  int const levels = int(lv.size());
  std::array<double, 6> p = p0;
  int current_level = -1;
  double best = -2.0;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    int const coarse = std::min(levels - 1, int(k * std::size_t(levels) / steps.size()));
    int const level = levels - 1 - coarse;
    if (level != current_level) {
      current_level = level;
      best = evaluate(t, lv[std::size_t(level)], std::size_t(level), pose_from(t, p)).ncc;
      ++evaluations;
    }
    double const h = steps[k];
    for (int sweep = 0; sweep < config.max_sweeps; ++sweep) {
      bool improved = false;
      for (int dim = 0; dim < 6; ++dim) {
        for (double sign : {1.0, -1.0}) {
          std::array<double, 6> trial = p;
          trial[std::size_t(dim)] += sign * h;
          Eval const e = evaluate(t, lv[std::size_t(level)], std::size_t(level), pose_from(t, trial));
          ++evaluations;
          if (e.overlap >= config.min_overlap && e.ncc > best + 1e-12) {
            best = e.ncc;
            p = trial;
            improved = true;
            break;
          }
        }
      }
      if (!improved) {
        break;
      }
    }
  }
  best = evaluate(t, lv[0], 0, pose_from(t, p)).ncc;
  ++evaluations;
  p = refine_pose(t, lv[0], 0, p, best, config.min_overlap);
  score = best;
  return p;
}

RegistrationResult run_registration(RegTarget const &t, Pyramid const &pyr, ReconConfig const &config)
{
  RegistrationResult r;
  r.pose = t.start;
  auto const &lv = pyr.levels.at(t.axis);
  std::array<double, 6> const zero{};
  Eval const initial = evaluate(t, lv[0], 0, pose_from(t, zero));
  r.initial_ncc = initial.ncc;
  r.ncc = initial.ncc;
  r.overlap = initial.overlap;
  r.evaluations = 1;
  if (initial.overlap < config.min_overlap) {
    r.excluded = true;
    r.reason = "overlap";
    return r;
  }
  auto const &v0 = t.values[0];
  bool const constant = std::all_of(v0.begin(), v0.end(), [&](double x) { return x == v0.front(); });
  if (constant) {
    r.reason = "constant";
    return r;
  }

  // Near-symmetric anatomy leaves out-of-plane tilt and through-plane
  // offset weakly determined for a single slice. Candidate starts on a
  // tilt/offset grid are screened at the coarsest level and the best few
  // searched in full.
  std::vector<std::array<double, 6>> starts{std::array<double, 6>{}};
  if (t.single && (config.restart_tilt_deg > 0 || config.restart_offset_mm > 0)) {
    Mat3 const frame = frame_from_normal(t.normal);
    double const step = config.restart_tilt_deg * std::numbers::pi / 180.0;
    for (int a = -1; a <= 1; ++a) {
      for (int b = -1; b <= 1; ++b) {
        Mat3 const rot = (Eigen::AngleAxisd(a * step, frame.col(0)) * Eigen::AngleAxisd(b * step, frame.col(1)))
                             .toRotationMatrix();
        Vec3 const euler = RigidTransform::from_affine(Affine4(rot, Vec3::Zero())).rotation_deg;
        for (int c = -1; c <= 1; ++c) {
          if (a == 0 && b == 0 && c == 0) {
            continue;
          }
          Vec3 const shift = c * config.restart_offset_mm * t.normal;
          starts.push_back({euler[0], euler[1], euler[2], shift[0], shift[1], shift[2]});
        }
      }
    }
  }
  std::size_t const coarsest = lv.size() - 1;
  std::vector<std::pair<double, std::size_t>> screened;
  std::vector<std::array<double, 6>> polished;
  for (std::size_t n = 0; n < starts.size(); ++n) {
    double score = evaluate(t, lv[coarsest], coarsest, pose_from(t, starts[n])).ncc;
    ++r.evaluations;
    polished.push_back(starts.size() > 1 ? refine_pose(t, lv[coarsest], coarsest, starts[n], score, config.min_overlap)
                                         : starts[n]);
    screened.emplace_back(-score, n);
  }
  // The unperturbed start is always searched.
  std::stable_sort(screened.begin() + 1, screened.end());
  std::size_t const keep = std::min<std::size_t>(screened.size(), 4);
  std::array<double, 6> p{};
  double best = -2.0;
  for (std::size_t n = 0; n < keep; ++n) {
    std::size_t const idx = screened[n].second;
    double score = -2.0;
    std::array<double, 6> const q = search_from(t, pyr, config, idx == 0 ? starts[0] : polished[idx], score,
                                                r.evaluations);
    if (score > best) {
      best = score;
      p = q;
    }
  }
  Eval const fin = evaluate(t, lv[0], 0, pose_from(t, p));
  ++r.evaluations;
  if (fin.ncc > initial.ncc) {
    r.pose = RigidTransform::from_affine(pose_from(t, p));
    r.ncc = fin.ncc;
    r.overlap = fin.overlap;
  }
  if (r.ncc < config.min_slice_ncc) {
    r.excluded = true;
    r.reason = "low_ncc";
  }
  return r;
}

} // namespace

double slice_content(SliceModel const &slice, double reference_max)
{
  auto px = slice.pixels.data();
  if (px.empty() || !(reference_max > 0)) {
    return 0.0;
  }
  std::size_t n = 0;
  for (double v : px) {
    n += v > 0.1 * reference_max ? 1 : 0;
  }
  return double(n) / double(px.size());
}

RegistrationResult register_slice(SliceModel const &slice, VoxelGrid const &volume, ReconConfig const &config)
{
  return register_stack({&slice}, volume, config);
}

RegistrationResult register_stack(std::vector<SliceModel const *> const &slices, VoxelGrid const &volume,
                                  ReconConfig const &config)
{
  if (slices.empty()) {
    throw ContractViolation("registration needs at least one slice");
  }
  ForwardModel const model(volume.geometry(), config.psf);
  int const axis = model.psf_axis(*slices.front());
  Pyramid const pyr = build_pyramid(volume, model, {axis}, config);
  return run_registration(make_target(slices, pyr, axis), pyr, config);
}

namespace {

void register_all(std::vector<SliceModel> &slices, VoxelGrid const &volume, ReconConfig const &config)
{
  ForwardModel const model(volume.geometry(), config.psf);
  std::set<int> axes;
  std::vector<int> axis(slices.size());
  for (std::size_t s = 0; s < slices.size(); ++s) {
    axis[s] = model.psf_axis(slices[s]);
    axes.insert(axis[s]);
  }
  Pyramid const pyr = build_pyramid(volume, model, axes, config);
  std::map<int, double> stack_max;
  for (auto const &s : slices) {
    double &m = stack_max[s.stack];
    for (double v : s.pixels.data()) {
      m = std::max(m, v);
    }
  }
  std::vector<RegistrationResult> res(slices.size());
  parallel_for(slices.size(), [&](std::size_t s) {
    RegTarget const target = make_target({&slices[s]}, pyr, axis[s]);
    if (slice_content(slices[s], stack_max[slices[s].stack]) < config.min_content) {
      RegistrationResult r;
      r.pose = slices[s].pose;
      Eval const e = evaluate(target, pyr.levels.at(axis[s])[0], 0, slices[s].pose.to_affine());
      r.ncc = r.initial_ncc = e.ncc;
      r.overlap = e.overlap;
      r.reason = "low_content";
      r.excluded = e.overlap < config.min_overlap;
      res[s] = r;
      return;
    }
    res[s] = run_registration(target, pyr, config);
  });
  for (std::size_t s = 0; s < slices.size(); ++s) {
    slices[s].pose = res[s].pose;
    slices[s].ncc = res[s].ncc;
    slices[s].excluded = res[s].excluded;
    slices[s].exclusion_reason = res[s].excluded ? res[s].reason : std::string();
  }
}

// NCC of one stack against the blurred volume with a candidate top-level
// deformation, plus its gradient with respect to the control displacements.
struct DeformTarget {
  std::vector<Vec3> x;     // rigidly mapped positions
  std::vector<Vec3> prior; // displacement of earlier levels
  std::vector<double> s;
  std::vector<int> axis;
  std::vector<std::array<std::size_t, 64>> bidx;
  std::vector<std::array<double, 64>> bw;
  std::vector<int> bn;
};

double deform_objective(DeformTarget const &t, FFDTransform const &ffd, std::map<int, VoxelGrid> const &vols,
                        double bending_weight, std::vector<Vec3> *grad)
{
  Affine4 const w2i = vols.begin()->second.affine().inverse();
  Mat3 const jac = w2i.linear();
  std::map<int, TrilinearSampler> samplers;
  for (auto const &[a, v] : vols) {
    samplers.emplace(a, TrilinearSampler(v));
  }
  auto const &disp = ffd.displacements();
  std::size_t const n = t.x.size();
  std::vector<double> m(n, 0.0);
  std::vector<Vec3> gm(n, Vec3::Zero());
  std::vector<std::uint8_t> ok(n, 0);
  std::vector<double> sa, sb;
  for (std::size_t p = 0; p < n; ++p) {
    Vec3 u = t.prior[p];
    for (int k = 0; k < t.bn[p]; ++k) {
      u += t.bw[p][std::size_t(k)] * disp[t.bidx[p][std::size_t(k)]];
    }
    Vec3 const idx = w2i.apply(t.x[p] + u);
    double v;
    Vec3 gi;
    if (samplers.at(t.axis[p]).sample_gradient(idx, v, gi)) {
      ok[p] = 1;
      m[p] = v;
      gm[p] = jac.transpose() * gi;
      sa.push_back(t.s[p]);
      sb.push_back(v);
    }
  }
  if (sa.size() < 2) {
    return -2.0;
  }
  double const ma = mean(sa), mb = mean(sb);
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    saa += (sa[i] - ma) * (sa[i] - ma);
    sbb += (sb[i] - mb) * (sb[i] - mb);
    sab += (sa[i] - ma) * (sb[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) {
    return -2.0;
  }
  double const r = sab / std::sqrt(saa * sbb);
  std::vector<Vec3> bgrad;
  double const bend = ffd.bending_energy(grad ? &bgrad : nullptr);
  if (grad) {
    grad->assign(ffd.control_count(), Vec3::Zero());
    double const inv = 1.0 / std::sqrt(saa * sbb);
    for (std::size_t p = 0; p < n; ++p) {
      if (!ok[p]) {
        continue;
      }
      double const dm = (t.s[p] - ma) * inv - r * (m[p] - mb) / sbb;
      Vec3 const g = dm * gm[p];
      for (int k = 0; k < t.bn[p]; ++k) {
        (*grad)[t.bidx[p][std::size_t(k)]] += t.bw[p][std::size_t(k)] * g;
      }
    }
    for (std::size_t c = 0; c < grad->size(); ++c) {
      (*grad)[c] -= bending_weight * bgrad[c];
    }
  }
  return r - bending_weight * bend;
}

void clamp_controls(FFDTransform &ffd)
{
  double const cap = 0.5 * ffd.spacing();
  for (Vec3 &d : ffd.displacements()) {
    double const n = d.norm();
    if (n > cap) {
      d *= cap / n;
    }
  }
}

} // namespace

void deformable_stage(VoxelGrid const &volume, std::vector<SliceModel> &slices, ReconConfig const &config,
                      DeformableReport *report)
{
  if (config.deformable_iterations == 0 || config.cp_schedule_mm.empty() || slices.empty()) {
    return;
  }
  ForwardModel const model(volume.geometry(), config.psf);
  std::map<int, VoxelGrid> vols;
  for (auto const &s : slices) {
    int const a = model.psf_axis(s);
    if (!vols.count(a)) {
      vols.emplace(a, model.blur(volume, a));
    }
  }
  GridGeometry const &g = volume.geometry();
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (int c = 0; c < 8; ++c) {
    Vec3 const w = g.affine.apply(Vec3((c & 1) ? g.dims.x - 1 : 0, (c & 2) ? g.dims.y - 1 : 0, (c & 4) ? g.dims.z - 1 : 0));
    lo = lo.cwiseMin(w);
    hi = hi.cwiseMax(w);
  }

  std::map<int, std::vector<std::size_t>> stacks;
  for (std::size_t s = 0; s < slices.size(); ++s) {
    stacks[slices[s].stack].push_back(s);
  }
  for (auto const &[stack, members] : stacks) {
    auto def = std::make_shared<Deformation>();
    if (slices[members.front()].deformation) {
      *def = *slices[members.front()].deformation;
    }
    double before = 0.0, after = 0.0;
    for (std::size_t level = 0; level < config.cp_schedule_mm.size(); ++level) {
      FFDTransform ffd = FFDTransform::covering(lo, hi, config.cp_schedule_mm[level]);
      DeformTarget t;
      for (std::size_t s : members) {
        SliceModel const &sl = slices[s];
        if (sl.excluded) {
          continue;
        }
        int const a = model.psf_axis(sl);
        Affine4 const rigid = sl.pose.to_affine() * sl.pixels.affine();
        Dims const d = sl.pixels.dims();
        for (int j = 0; j < d.y; ++j) {
          for (int i = 0; i < d.x; ++i) {
            Vec3 const x = rigid.apply(Vec3(i, j, 0));
            t.x.push_back(x);
            t.prior.push_back(def->displacement(x));
            t.s.push_back(sl.pixels[std::size_t(j) * std::size_t(d.x) + std::size_t(i)]);
            t.axis.push_back(a);
            t.bidx.emplace_back();
            t.bw.emplace_back();
            t.bn.push_back(ffd.basis(x, t.bidx.back(), t.bw.back()));
          }
        }
      }
      if (t.x.empty()) {
        break;
      }
      std::vector<Vec3> grad;
      double f = deform_objective(t, ffd, vols, config.bending_weight, &grad);
      if (level == 0) {
        before = f;
      }
      double eta = -1.0;
      for (int it = 0; it < config.deformable_iterations; ++it) {
        double gmax = 0.0;
        for (auto const &gv : grad) {
          gmax = std::max(gmax, gv.norm());
        }
        if (!(gmax > 0)) {
          break;
        }
        if (eta < 0) {
          eta = 0.125 * ffd.spacing() / gmax;
        }
        bool accepted = false;
        for (int tries = 0; tries < 8 && !accepted; ++tries) {
          FFDTransform cand = ffd;
          for (std::size_t c = 0; c < grad.size(); ++c) {
            cand.displacements()[c] += eta * grad[c];
          }
          clamp_controls(cand);
          std::vector<Vec3> cgrad;
          double const fc = deform_objective(t, cand, vols, config.bending_weight, &cgrad);
          if (fc > f) {
            ffd = std::move(cand);
            f = fc;
            grad = std::move(cgrad);
            accepted = true;
            eta *= 1.5;
          } else {
            eta *= 0.5;
          }
        }
        if (!accepted) {
          break;
        }
      }
      after = f;
      def->levels.push_back(std::move(ffd));
    }
    for (std::size_t s : members) {
      slices[s].deformation = def;
    }
    if (report) {
      report->ncc_before.push_back(before);
      report->ncc_after.push_back(after);
      double m = 0.0;
      for (std::size_t s : members) {
        Dims const d = slices[s].pixels.dims();
        for (int j = 0; j < d.y; ++j) {
          for (int i = 0; i < d.x; ++i) {
            Vec3 const x = slices[s].pose.apply(slices[s].pixels.affine().apply(Vec3(i, j, 0)));
            m = std::max(m, def->displacement(x).norm());
          }
        }
      }
      report->max_displacement_mm.push_back(m);
    }
  }
}

ChannelSlices t2star_slices(std::vector<SliceModel> const &slices, std::vector<T2StarMap> const &maps)
{
  ChannelSlices out;
  for (auto const &sl : slices) {
    if (sl.stack < 0 || std::size_t(sl.stack) >= maps.size()) {
      throw ContractViolation("slice stack has no T2* map");
    }
    T2StarMap const &m = maps[std::size_t(sl.stack)];
    out.values.push_back(slice_of(m.t2star, sl.slice));
    out.failed.push_back(mask_slice(m.failed, m.t2star.dims(), sl.slice));
  }
  return out;
}

ChannelVolume propagate_channel(std::vector<SliceModel> const &slices, std::vector<VoxelGrid> const &channel,
                                std::vector<Mask> const &failed, GridGeometry const &grid, ReconConfig const &config)
{
  if (channel.size() != slices.size() || (!failed.empty() && failed.size() != slices.size())) {
    throw ContractViolation("channel slices must correspond one-to-one with structural slices");
  }
  for (std::size_t s = 0; s < slices.size(); ++s) {
    if (!(channel[s].dims() == slices[s].pixels.dims()) ||
        (!failed.empty() && failed[s].size() != channel[s].size())) {
      throw ContractViolation(fmt::format("channel slice {} does not match its structural slice", s));
    }
  }
  ForwardModel const model(grid, config.psf);
  auto const samples = sample_positions(slices, model);
  Projector const proj{model, slices, samples};
  std::vector<std::vector<double>> values(slices.size()), weights(slices.size());
  for (std::size_t s = 0; s < slices.size(); ++s) {
    values[s].assign(channel[s].data().begin(), channel[s].data().end());
    weights[s].assign(values[s].size(), 1.0);
    if (!failed.empty()) {
      for (std::size_t p = 0; p < values[s].size(); ++p) {
        if (failed[s][p]) {
          values[s][p] = 0.0;
          weights[s][p] = 0.0;
        }
      }
    }
  }
  VoxelGrid num = proj.adjoint(values);
  VoxelGrid const den = proj.adjoint(weights);
  ChannelVolume out;
  out.valid = weight_mask(den, config.weight_floor);
  for (std::size_t v = 0; v < num.size(); ++v) {
    num[v] = out.valid[v] ? num[v] / den[v] : 0.0;
  }
  num.set_unit(channel.empty() ? UnitTag::Signal : channel.front().unit());
  out.values = std::move(num);
  return out;
}

ReconResult reconstruct(std::vector<MultiEchoDynamic> const &dynamics, std::vector<T2StarMap> const &maps,
                        ReconConfig const &config, std::size_t template_position, std::size_t echo_index)
{
  config.validate();
  if (dynamics.empty()) {
    throw ReconstructionError("no dynamics to reconstruct");
  }
  if (maps.size() != dynamics.size()) {
    throw ContractViolation("one T2* map per dynamic required");
  }
  if (template_position >= dynamics.size()) {
    throw ConfigError("template dynamic out of range");
  }
  ReconResult out;
  if (dynamics.size() < 3) {
    out.report.warnings.push_back(fmt::format("only {} dynamics kept; 3 or more recommended", dynamics.size()));
  }
  out.report.template_dynamic = dynamics[template_position].index;
  std::vector<SliceModel> slices = extract_slices(dynamics, echo_index);
  GridGeometry const grid = resolve_grid(slices, config);

  // Slices start from their stack pose, so the search stays local.
  ReconConfig local = config;
  local.restart_tilt_deg = 0.0;
  local.restart_offset_mm = 0.0;
  std::optional<VoxelGrid> anchor;
  if (dynamics.size() > 1) {
    std::vector<SliceModel> templ;
    for (auto const &s : slices) {
      if (s.stack == int(template_position)) {
        templ.push_back(s);
      }
    }
    VolumeEstimate const ref = initialize_volume(templ, config, grid);
    if (config.template_anchor) {
      anchor = superresolution_update(ref.volume, templ, config, config.delta);
    }
    if (config.stack_registration) {
      std::map<int, std::vector<SliceModel const *>> groups;
      for (auto const &s : slices) {
        if (s.stack != int(template_position)) {
          groups[s.stack].push_back(&s);
        }
      }
      std::vector<std::pair<int, std::vector<SliceModel const *>>> list(groups.begin(), groups.end());
      std::vector<RegistrationResult> res(list.size());
      parallel_for(list.size(), [&](std::size_t i) { res[i] = register_stack(list[i].second, ref.volume, config); });
      for (std::size_t i = 0; i < list.size(); ++i) {
        for (auto &s : slices) {
          if (s.stack == list[i].first) {
            s.pose = res[i].pose;
          }
        }
      }
    }
  }

  VoxelGrid x = initialize_volume(slices, config, grid).volume;
  // The scatter average is blurred by the PSF twice; sharpen it once so
  // the first registration sees a volume consistent with the slices.
  x = superresolution_update(x, slices, config, config.delta);
  for (int it = 0; it < config.outer_iterations; ++it) {
    if (config.slice_registration) {
      register_all(slices, (it == 0 && anchor) ? *anchor : x, local);
    }
    double sum = 0.0;
    int kept = 0, excluded = 0;
    for (auto const &s : slices) {
      if (s.excluded) {
        ++excluded;
      } else {
        sum += s.ncc;
        ++kept;
      }
    }
    if (kept == 0) {
      throw ReconstructionError("every slice was excluded during registration");
    }
    out.report.mean_ncc.push_back(sum / kept);
    out.report.excluded_slices.push_back(excluded);
    SrDiagnostics diag;
    x = superresolution_update(x, slices, config, config.delta, &diag);
    out.report.data_term.insert(out.report.data_term.end(), diag.data_term.begin(), diag.data_term.end());
    out.report.sr_diverged = out.report.sr_diverged || diag.diverged;
  }
  if (std::all_of(slices.begin(), slices.end(), [](SliceModel const &s) { return s.excluded; })) {
    throw ReconstructionError("every slice was excluded during registration");
  }
  if (anchor) {
    // The template stack defines the frame and stays undeformed.
    std::vector<SliceModel> moving;
    std::vector<std::size_t> where;
    for (std::size_t s = 0; s < slices.size(); ++s) {
      if (slices[s].stack != int(template_position)) {
        moving.push_back(slices[s]);
        where.push_back(s);
      }
    }
    deformable_stage(*anchor, moving, config, &out.report.deformable);
    for (std::size_t n = 0; n < where.size(); ++n) {
      slices[where[n]] = std::move(moving[n]);
    }
  } else {
    deformable_stage(x, slices, config, &out.report.deformable);
  }
  SrDiagnostics diag;
  x = superresolution_update(x, slices, config, config.final_delta, &diag);
  out.report.data_term.insert(out.report.data_term.end(), diag.data_term.begin(), diag.data_term.end());
  out.report.sr_diverged = out.report.sr_diverged || diag.diverged;

  {
    ForwardModel const model(grid, config.psf);
    auto const samples = sample_positions(slices, model);
    Projector const proj{model, slices, samples};
    out.valid = weight_mask(proj.adjoint(proj.ones()), config.weight_floor);
  }
  for (std::size_t v = 0; v < x.size(); ++v) {
    if (!out.valid[v]) {
      x[v] = 0.0;
    }
  }

  ChannelSlices const cs = t2star_slices(slices, maps);
  ChannelVolume ch = propagate_channel(slices, cs.values, cs.failed, grid, config);
  ch.values.set_unit(UnitTag::Milliseconds);
  out.structural = std::move(x);
  out.t2star = std::move(ch.values);
  for (std::size_t v = 0; v < out.valid.size(); ++v) {
    out.valid[v] = out.valid[v] && ch.valid[v];
  }
  out.slices = std::move(slices);
  return out;
}

std::string report_json(ReconResult const &result)
{
  using nlohmann::json;
  json j;
  ReconReport const &r = result.report;
  j["template_dynamic"] = r.template_dynamic;
  j["mean_ncc_per_iteration"] = r.mean_ncc;
  j["excluded_slices_per_iteration"] = r.excluded_slices;
  j["data_term"] = r.data_term;
  j["sr_diverged"] = r.sr_diverged;
  j["warnings"] = r.warnings;
  j["deformable"] = {{"ncc_before", r.deformable.ncc_before},
                     {"ncc_after", r.deformable.ncc_after},
                     {"max_displacement_mm", r.deformable.max_displacement_mm}};
  json poses = json::array();
  json excluded = json::array();
  for (auto const &s : result.slices) {
    poses.push_back({{"dynamic", s.dynamic},
                     {"slice", s.slice},
                     {"rotation_deg", {s.pose.rotation_deg[0], s.pose.rotation_deg[1], s.pose.rotation_deg[2]}},
                     {"translation_mm", {s.pose.translation_mm[0], s.pose.translation_mm[1], s.pose.translation_mm[2]}},
                     {"ncc", s.ncc},
                     {"excluded", s.excluded}});
    if (s.excluded) {
      excluded.push_back({{"dynamic", s.dynamic}, {"slice", s.slice}, {"reason", s.exclusion_reason}});
    }
  }
  j["poses"] = std::move(poses);
  j["excluded"] = std::move(excluded);
  return j.dump(2) + "\n";
}

void write_slice_transforms(std::vector<SliceModel> const &slices, std::filesystem::path const &dir)
{
  std::filesystem::create_directories(dir);
  for (auto const &s : slices) {
    auto out = fmt::output_file((dir / fmt::format("dyn{:03}_slice{:03}.txt", s.dynamic, s.slice)).string());
    Mat4 const m = s.pose.to_affine().matrix();
    for (int r = 0; r < 4; ++r) {
      out.print("{:.9f} {:.9f} {:.9f} {:.9f}\n", m(r, 0), m(r, 1), m(r, 2), m(r, 3));
    }
  }
}

} // namespace t2s
