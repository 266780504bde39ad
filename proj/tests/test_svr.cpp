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
#include "t2s/labels.hpp"
#include "t2s/numeric.hpp"
#include "t2s/phantom.hpp"
#include "t2s/relaxometry.hpp"
#include "t2s/svr.hpp"

#include <json.hpp>

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

using namespace t2s;
using t2s::testing::interior;
using t2s::testing::psnr;
using t2s::testing::rmse;

namespace {

struct Scene {
  DigitalPhantom phantom;
  AcquisitionGeometry acq;
  ReconConfig cfg;
  VoxelGrid truth; // second-echo signal on the phantom grid
};

Scene const &scene()
{
  static Scene const s = [] {
    Scene out;
    out.phantom = make_phantom(PhantomOptions{});
    out.acq = AcquisitionGeometry::covering(out.phantom);
    out.cfg.grid = out.phantom.labels.geometry();
    out.cfg.psf = PsfSpec::for_acquisition(out.acq.voxel_mm);
    out.truth = out.phantom.signal_at(default_echo_times()[1]);
    return out;
  }();
  return s;
}

// Replaces slice pixels by the forward model of `volume` at the current poses.
void project_into(std::vector<SliceModel> &slices, VoxelGrid const &volume, PsfSpec const &psf)
{
  ForwardModel const model(volume.geometry(), psf);
  std::map<int, VoxelGrid> blurred;
  for (auto &s : slices) {
    int const a = model.psf_axis(s);
    if (!blurred.count(a)) {
      blurred.emplace(a, model.blur(volume, a));
    }
    TrilinearSampler const sampler(blurred.at(a));
    Dims const d = s.pixels.dims();
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        double v = 0.0;
        if (!sampler.sample(world_to_index(volume, s.position(i, j)), v)) {
          v = 0.0;
        }
        s.pixels.at(i, j, 0) = v;
      }
    }
  }
}

std::vector<SliceModel> acquisition_slices(int stacks)
{
  Scene const &sc = scene();
  std::vector<VoxelGrid> vols(std::size_t(stacks), VoxelGrid(sc.acq.geometry()));
  std::vector<int> idx;
  for (int s = 0; s < stacks; ++s) {
    idx.push_back(s);
  }
  return extract_slices(vols, idx);
}

Vec3 raw_centre(SliceModel const &s)
{
  Dims const d = s.pixels.dims();
  return s.pixels.affine().apply(Vec3(0.5 * (d.x - 1), 0.5 * (d.y - 1), 0.0));
}

double centre_error_mm(SliceModel const &s, RigidTransform const &est, RigidTransform const &truth)
{
  Vec3 const c = raw_centre(s);
  return (est.apply(c) - truth.apply(c)).norm();
}

std::vector<T2StarMap> fit_all(std::vector<MultiEchoDynamic> const &dyn)
{
  std::vector<T2StarMap> maps;
  for (auto const &d : dyn) {
    maps.push_back(map_dynamic(d).map);
  }
  return maps;
}

// Normalised truncated Gaussian taps, built from the PSF definition.
std::vector<double> taps(double fwhm_mm, double spacing_mm, double support)
{
  double const sigma = fwhm_mm / 2.355 / spacing_mm;
  int const r = int(std::floor(support * sigma + 1e-9));
  std::vector<double> k;
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k.push_back(std::exp(-0.5 * i * i / (sigma * sigma)));
    sum += k.back();
  }
  for (double &w : k) {
    w /= sum;
  }
  return k;
}

} // namespace

TEST_CASE("initialisation equals a brute-force PSF scatter average")
{
  GridGeometry const grid = centred_geometry(Dims{14, 14, 12}, Vec3(2.0, 2.0, 2.0));
  GridGeometry sg = centred_geometry(Dims{6, 6, 4}, Vec3(3.0, 3.0, 4.0));
  sg.affine = Affine4(sg.affine.linear(), sg.affine.translation() + Vec3(0.3, -0.7, 0.45));
  VoxelGrid stack(sg);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(10.0, 100.0);
  for (double &v : stack.data()) {
    v = u(rng);
  }
  ReconConfig cfg;
  cfg.psf = PsfSpec::for_acquisition(Vec3(3.0, 3.0, 4.0));
  std::vector<SliceModel> const slices = extract_slices(std::vector<VoxelGrid>{stack}, std::vector<int>{0});
  VolumeEstimate const est = initialize_volume(slices, cfg, grid);

  // Trilinear scatter of values and of ones.
  Dims const d = grid.dims;
  std::vector<double> num(grid.voxel_count(), 0.0), den(grid.voxel_count(), 0.0);
  for (auto const &s : slices) {
    for (int j = 0; j < 6; ++j) {
      for (int i = 0; i < 6; ++i) {
        Vec3 const q = world_to_index(grid, s.position(i, j));
        Vec3 const f = q.array().floor();
        for (int c = 0; c < 8; ++c) {
          int const x = int(f[0]) + (c & 1), y = int(f[1]) + ((c >> 1) & 1), z = int(f[2]) + ((c >> 2) & 1);
          double const w = (1 - std::abs(q[0] - x)) * (1 - std::abs(q[1] - y)) * (1 - std::abs(q[2] - z));
          num[grid.linear_index(x, y, z)] += w * s.pixels.at(i, j, 0);
          den[grid.linear_index(x, y, z)] += w;
        }
      }
    }
  }
  // Direct 3D convolution with the separable kernel (through-plane along z).
  std::vector<double> const kx = taps(cfg.psf.in_plane_fwhm_mm, 2.0, cfg.psf.support_sigmas);
  std::vector<double> const kz = taps(cfg.psf.through_plane_fwhm_mm, 2.0, cfg.psf.support_sigmas);
  int const rx = int(kx.size() / 2), rz = int(kz.size() / 2);
  double max_err = 0.0;
  for (int k = 0; k < d.z; ++k) {
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        double bn = 0.0, bd = 0.0;
        for (int c = -rz; c <= rz; ++c) {
          for (int b = -rx; b <= rx; ++b) {
            for (int a = -rx; a <= rx; ++a) {
              int const x = i + a, y = j + b, z = k + c;
              if (x < 0 || y < 0 || z < 0 || x >= d.x || y >= d.y || z >= d.z) {
                continue;
              }
              double const w = kx[std::size_t(a + rx)] * kx[std::size_t(b + rx)] * kz[std::size_t(c + rz)];
              bn += w * num[grid.linear_index(x, y, z)];
              bd += w * den[grid.linear_index(x, y, z)];
            }
          }
        }
        double const expect = bd > 0 ? bn / bd : 0.0;
        max_err = std::max(max_err, std::abs(est.volume.at(i, j, k) - expect));
      }
    }
  }
  CHECK(max_err < 1e-6);

  // Duplicated stacks give the same average.
  std::vector<SliceModel> twice = slices;
  twice.insert(twice.end(), slices.begin(), slices.end());
  VolumeEstimate const dup = initialize_volume(twice, cfg, grid);
  for (std::size_t v = 0; v < dup.volume.size(); ++v) {
    REQUIRE(std::abs(dup.volume[v] - est.volume[v]) < 1e-9);
    REQUIRE(dup.valid[v] == est.valid[v]);
  }

  CHECK_THROWS_AS(initialize_volume(std::vector<SliceModel>{}, cfg), ContractViolation);
}

TEST_CASE("zero-motion initialisation and super-resolution on the phantom")
{
  Scene const &sc = scene();
  SimulationOptions so;
  so.keep_noiseless = false;
  SimulatedSeries const sim =
      simulate_acquisition(sc.phantom, MotionScript::still(3), default_echo_times(), sc.acq, so);
  std::vector<SliceModel> const slices = extract_slices(sim.dynamics, 1);
  VolumeEstimate const init = initialize_volume(slices, sc.cfg);
  CHECK(psnr(init.volume, sc.truth, init.valid) > 25.0);

  SrDiagnostics diag;
  ReconConfig cfg = sc.cfg;
  cfg.sr_iterations = 5;
  VoxelGrid const x = superresolution_update(init.volume, slices, cfg, cfg.final_delta, &diag);
  REQUIRE(diag.data_term.size() >= 2);
  for (std::size_t i = 1; i < diag.data_term.size(); ++i) {
    CHECK(diag.data_term[i] <= diag.data_term[i - 1]);
  }
  CHECK_FALSE(diag.diverged);
  CHECK(rmse(x, sc.truth, init.valid) < rmse(init.volume, sc.truth, init.valid));
  CHECK(data_term(x, slices, cfg) == doctest::Approx(diag.data_term.back()).epsilon(1e-9));
}

TEST_CASE("slices generated from the volume are a fixed point")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(2);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto &s : slices) {
    if (s.stack == 1) {
      s.pose.rotation_deg = Vec3(4.0, -3.0, 6.0);
      s.pose.translation_mm = Vec3(2.0, -1.5, 1.0);
    }
  }
  project_into(slices, sc.truth, sc.cfg.psf);
  ReconConfig cfg = sc.cfg;
  for (int iters : {1, 3}) {
    cfg.sr_iterations = iters;
    VoxelGrid const x = superresolution_update(sc.truth, slices, cfg, cfg.delta);
    double m = 0.0;
    for (std::size_t v = 0; v < x.size(); ++v) {
      m = std::max(m, std::abs(x[v] - sc.truth[v]));
    }
    CHECK(m < 1e-9);
  }
  CHECK(data_term(sc.truth, slices, cfg) < 1e-12);
}

TEST_CASE("oracle poses reconstruct as well as zero motion")
{
  Scene const &sc = scene();
  SimulationOptions so;
  so.keep_noiseless = false;
  SimulatedSeries const still =
      simulate_acquisition(sc.phantom, MotionScript::still(3), default_echo_times(), sc.acq, so);
  MotionScript moving = MotionScript::still(3);
  moving.dynamics[1].pose = RigidTransform{Vec3(6.0, -4.0, 8.0), Vec3(5.0, -7.0, 3.0)};
  moving.dynamics[2].pose = RigidTransform{Vec3(-9.0, 5.0, -3.0), Vec3(-4.0, 6.0, -8.0)};
  SimulatedSeries const sim = simulate_acquisition(sc.phantom, moving, default_echo_times(), sc.acq, so);

  auto recon = [&](std::vector<SliceModel> const &slices) {
    VolumeEstimate const init = initialize_volume(slices, sc.cfg);
    VoxelGrid x = superresolution_update(init.volume, slices, sc.cfg, sc.cfg.delta);
    x = superresolution_update(x, slices, sc.cfg, sc.cfg.final_delta);
    return std::pair{x, init.valid};
  };
  auto const [x0, v0] = recon(extract_slices(still.dynamics, 1));
  std::vector<SliceModel> slices = extract_slices(sim.dynamics, 1);
  for (auto &s : slices) {
    s.pose = sim.truth.slice_transforms[std::size_t(s.stack)][std::size_t(s.slice)];
  }
  auto const [x1, v1] = recon(slices);
  double const e0 = rmse(x0, sc.truth, v0);
  double const e1 = rmse(x1, sc.truth, v0);
  CHECK(e1 <= 1.1 * e0);
}

TEST_CASE("reconstruction is equivariant to a global rigid motion")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(2);
  project_into(slices, sc.truth, sc.cfg.psf);
  GridGeometry const g1 = *sc.cfg.grid;
  RigidTransform const motion{Vec3(7.0, -5.0, 12.0), Vec3(4.0, 9.0, -6.0)};
  std::vector<SliceModel> moved = slices;
  for (auto &s : moved) {
    s.pose = compose(motion, s.pose);
  }
  GridGeometry g2 = g1;
  g2.affine = motion.to_affine() * g1.affine;

  ReconConfig cfg = sc.cfg;
  auto run = [&](std::vector<SliceModel> const &sl, GridGeometry const &g) {
    cfg.grid = g;
    VolumeEstimate const init = initialize_volume(sl, cfg);
    return superresolution_update(init.volume, sl, cfg, cfg.delta);
  };
  VoxelGrid const a = run(slices, g1);
  VoxelGrid const b = run(moved, g2);
  auto const [lo, hi] = std::minmax_element(a.data().begin(), a.data().end());
  CHECK(rmse(a, VoxelGrid(a.geometry(), b.values()), Mask{}) < 0.02 * (*hi - *lo));
}

TEST_CASE("self-registration stays at identity")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(1);
  project_into(slices, sc.truth, sc.cfg.psf);
  for (int k : {8, 12, 16}) {
    RegistrationResult const r = register_slice(slices[std::size_t(k)], sc.truth, sc.cfg);
    CHECK_FALSE(r.excluded);
    CHECK(RigidTransform::rotation_distance_deg(r.pose, RigidTransform{}) < 0.1);
    CHECK(centre_error_mm(slices[std::size_t(k)], r.pose, RigidTransform{}) < 0.1);
    CHECK(r.ncc >= r.initial_ncc);
  }
}

TEST_CASE("registration recovers a 5 degree / 3 mm displacement")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(1);
  RigidTransform const truth{Vec3(3.0, -2.5, 3.0), Vec3(1.5, -2.0, 1.5)};
  REQUIRE(RigidTransform::rotation_distance_deg(truth, RigidTransform{}) > 4.0);
  for (int k : {9, 13}) {
    SliceModel s = slices[std::size_t(k)];
    s.pose = truth;
    std::vector<SliceModel> one{s};
    project_into(one, sc.truth, sc.cfg.psf);
    one[0].pose = RigidTransform{};
    RegistrationResult const r = register_slice(one[0], sc.truth, sc.cfg);
    CHECK_FALSE(r.excluded);
    CHECK(RigidTransform::rotation_distance_deg(r.pose, truth) < 1.0);
    CHECK(centre_error_mm(one[0], r.pose, truth) < 0.5);
    CHECK(r.ncc > r.initial_ncc);
  }
}

TEST_CASE("degenerate slices are flagged")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(1);
  SliceModel noise = slices[12];
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(300.0, 100.0);
  for (double &v : noise.pixels.data()) {
    v = nd(rng);
  }
  RegistrationResult const r = register_slice(noise, sc.truth, sc.cfg);
  CHECK(r.excluded);
  CHECK(r.reason == "low_ncc");

  SliceModel far = slices[12];
  far.pose.translation_mm = Vec3(0.0, 0.0, 500.0);
  project_into(slices, sc.truth, sc.cfg.psf);
  RegistrationResult const o = register_slice(far, sc.truth, sc.cfg);
  CHECK(o.excluded);
  CHECK(o.reason == "overlap");
  CHECK(o.pose.translation_mm[2] == 500.0);
}

TEST_CASE("propagate_channel: constancy, linearity and failure masking")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(3);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto &s : slices) {
    s.pose = RigidTransform{Vec3(10 * u(rng), 10 * u(rng), 10 * u(rng)), Vec3(10 * u(rng), 10 * u(rng), 10 * u(rng))};
  }
  GridGeometry const &grid = *sc.cfg.grid;
  std::vector<VoxelGrid> c200, c1, c2, mix;
  std::uniform_real_distribution<double> val(20.0, 400.0);
  for (auto const &s : slices) {
    VoxelGrid a(s.pixels.geometry()), b(s.pixels.geometry()), m(s.pixels.geometry()), k(s.pixels.geometry());
    for (std::size_t p = 0; p < a.size(); ++p) {
      k[p] = 200.0;
      a[p] = val(rng);
      b[p] = val(rng);
      m[p] = 2.5 * a[p] - 0.75 * b[p];
    }
    c200.push_back(k);
    c1.push_back(a);
    c2.push_back(b);
    mix.push_back(m);
  }
  ChannelVolume const k = propagate_channel(slices, c200, {}, grid, sc.cfg);
  std::size_t nvalid = 0;
  for (std::size_t v = 0; v < k.values.size(); ++v) {
    if (k.valid[v]) {
      ++nvalid;
      REQUIRE(std::abs(k.values[v] - 200.0) < 1e-6);
    }
  }
  CHECK(nvalid > 1000);

  ChannelVolume const p1 = propagate_channel(slices, c1, {}, grid, sc.cfg);
  ChannelVolume const p2 = propagate_channel(slices, c2, {}, grid, sc.cfg);
  ChannelVolume const pm = propagate_channel(slices, mix, {}, grid, sc.cfg);
  for (std::size_t v = 0; v < pm.values.size(); ++v) {
    if (pm.valid[v]) {
      REQUIRE(std::abs(pm.values[v] - (2.5 * p1.values[v] - 0.75 * p2.values[v])) < 1e-6);
    }
  }

  std::vector<Mask> wrong(2);
  CHECK_THROWS_AS(propagate_channel(slices, c1, wrong, grid, sc.cfg), ContractViolation);
  std::vector<VoxelGrid> fewer(c1.begin(), c1.end() - 1);
  CHECK_THROWS_AS(propagate_channel(slices, fewer, {}, grid, sc.cfg), ContractViolation);
}

TEST_CASE("propagated phantom T2* and random failures")
{
  Scene const &sc = scene();
  SimulationOptions so;
  so.keep_noiseless = false;
  SimulatedSeries const sim =
      simulate_acquisition(sc.phantom, MotionScript::still(2), default_echo_times(), sc.acq, so);
  std::vector<SliceModel> const slices = extract_slices(sim.dynamics, 1);
  std::vector<T2StarMap> const maps = fit_all(sim.dynamics);
  std::vector<VoxelGrid> t2;
  std::vector<Mask> failed, half;
  std::vector<VoxelGrid> t2_volumes;
  std::vector<int> idx;
  for (std::size_t d = 0; d < maps.size(); ++d) {
    t2_volumes.push_back(maps[d].t2star);
    idx.push_back(int(d));
  }
  std::vector<SliceModel> const channel_slices = extract_slices(t2_volumes, idx);
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t s = 0; s < slices.size(); ++s) {
    t2.push_back(channel_slices[s].pixels);
    Mask const &fm = maps[std::size_t(slices[s].stack)].failed;
    std::size_t const plane = t2.back().size();
    Mask f(fm.begin() + std::ptrdiff_t(std::size_t(slices[s].slice) * plane),
           fm.begin() + std::ptrdiff_t(std::size_t(slices[s].slice + 1) * plane));
    Mask h = f;
    for (auto &x : h) {
      x = x || coin(rng);
    }
    failed.push_back(f);
    half.push_back(h);
  }
  GridGeometry const &grid = *sc.cfg.grid;
  ChannelVolume const full = propagate_channel(slices, t2, failed, grid, sc.cfg);
  ChannelVolume const masked = propagate_channel(slices, t2, half, grid, sc.cfg);
  for (Organ o : kAllOrgans) {
    // One acquisition voxel plus its PSF reaches three phantom voxels.
    Mask const in = interior(sc.phantom.labels, code(o), 3);
    double const expect = sc.phantom.organs.at(code(o)).t2star_ms;
    std::vector<double> vals;
    for (std::size_t v = 0; v < in.size(); ++v) {
      if (in[v] && full.valid[v]) {
        vals.push_back(full.values[v]);
      }
      if (in[v] && masked.valid[v]) {
        CHECK(std::abs(masked.values[v] / expect - 1.0) < 0.05);
      }
    }
    REQUIRE(!vals.empty());
    CHECK(std::abs(median(vals) / expect - 1.0) < 0.02);
  }
}

TEST_CASE("deformable stage with no budget is a no-op")
{
  Scene const &sc = scene();
  std::vector<SliceModel> slices = acquisition_slices(2);
  project_into(slices, sc.truth, sc.cfg.psf);
  std::vector<SliceModel> const before = slices;
  ReconConfig cfg = sc.cfg;
  cfg.deformable_iterations = 0;
  deformable_stage(sc.truth, slices, cfg);
  for (std::size_t s = 0; s < slices.size(); ++s) {
    CHECK(slices[s].deformation == nullptr);
    CHECK(slices[s].pose.translation_mm == before[s].pose.translation_mm);
  }
}

static MotionScript rigid_script(double noise)
{
  MotionScript ms = MotionScript::still(6);
  ms.noise_sigma = noise;
  ms.seed = 21;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t d = 1; d < 6; ++d) {
    for (int a = 0; a < 3; ++a) {
      ms.dynamics[d].pose.rotation_deg[a] = 10.0 / std::sqrt(3.0) * u(rng);
      ms.dynamics[d].pose.translation_mm[a] = 10.0 / std::sqrt(3.0) * u(rng);
    }
  }
  return ms;
}

TEST_CASE("rigid scripted motion: poses and organ T2*")
{
  Scene const &sc = scene();
  MotionScript const ms = rigid_script(0.02 * 1000.0);
  SimulatedSeries const sim = simulate_acquisition(sc.phantom, ms, default_echo_times(), sc.acq);
  ReconResult const res = reconstruct(sim.dynamics, fit_all(sim.dynamics), sc.cfg);
  double rot = 0.0, tr = 0.0;
  int n = 0;
  for (auto const &s : res.slices) {
    RigidTransform const &t = sim.truth.slice_transforms[std::size_t(s.stack)][std::size_t(s.slice)];
    rot += RigidTransform::rotation_distance_deg(s.pose, t);
    tr += centre_error_mm(s, s.pose, t);
    ++n;
  }
  CHECK(rot / n < 1.5);
  CHECK(tr / n < 1.0);
  for (Organ o : kAllOrgans) {
    Mask const in = interior(sc.phantom.labels, code(o), 2);
    std::vector<double> vals;
    for (std::size_t v = 0; v < in.size(); ++v) {
      if (in[v] && res.valid[v]) {
        vals.push_back(res.t2star[v]);
      }
    }
    REQUIRE(!vals.empty());
    CHECK(std::abs(median(vals) / sc.phantom.organs.at(code(o)).t2star_ms - 1.0) < 0.05);
  }
  CHECK(res.report.mean_ncc.size() == std::size_t(sc.cfg.outer_iterations));

  nlohmann::json const j = nlohmann::json::parse(report_json(res));
  CHECK(j.contains("mean_ncc_per_iteration"));
  t2s::testing::TempDir tmp("xf");
  write_slice_transforms(res.slices, tmp.path());
  std::ifstream in(tmp / "dyn003_slice010.txt");
  REQUIRE(in.good());
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      in >> m(r, c);
    }
  }
  CHECK((m - res.slices[3 * std::size_t(sc.acq.dims.z) + 10].pose.to_affine().matrix()).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("rigid-only motion yields near-identity deformations")
{
  Scene const &sc = scene();
  SimulatedSeries const sim = simulate_acquisition(sc.phantom, rigid_script(0.0), default_echo_times(), sc.acq);
  ReconResult const res = reconstruct(sim.dynamics, fit_all(sim.dynamics), sc.cfg);
  REQUIRE(!res.report.deformable.max_displacement_mm.empty());
  for (double m : res.report.deformable.max_displacement_mm) {
    CHECK(m < 0.5);
  }
}

TEST_CASE("deformable refinement improves on rigid-only for smooth in-plane deformation")
{
  Scene const &sc = scene();
  MotionScript ms = MotionScript::still(6);
  for (std::size_t d = 1; d < 6; ++d) {
    SinusoidalDeformation &w = ms.dynamics[d].deformation;
    w.amplitude_mm = 3.0;
    w.wavelength_mm = 40.0;
    w.phase_rad = 2.0 * double(d);
    w.wave_axis = Vec3::UnitX();
    w.direction = Vec3::UnitY();
  }
  SimulationOptions so;
  so.keep_noiseless = false;
  SimulatedSeries const sim = simulate_acquisition(sc.phantom, ms, default_echo_times(), sc.acq, so);
  std::vector<T2StarMap> const maps = fit_all(sim.dynamics);
  ReconConfig rigid = sc.cfg;
  rigid.deformable_iterations = 0;
  ReconResult const a = reconstruct(sim.dynamics, maps, rigid);
  ReconResult const b = reconstruct(sim.dynamics, maps, sc.cfg);
  double const ea = rmse(a.structural, sc.truth, a.valid);
  double const eb = rmse(b.structural, sc.truth, a.valid);
  CHECK(eb <= 0.8 * ea);
}

TEST_CASE("reconstruction errors and configuration checks")
{
  ReconConfig c;
  CHECK_NOTHROW(c.validate());
  c.intensity_matching = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ReconConfig{};
  c.robust_stats = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ReconConfig{};
  c.cp_schedule_mm = {5.0, 12.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ReconConfig{};
  c.resolution_mm = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  // Pure-noise dynamics cannot be registered: every slice is excluded.
  GridGeometry const g = centred_geometry(Dims{12, 12, 6}, Vec3(3.0, 3.0, 3.0));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(100.0, 30.0);
  std::vector<MultiEchoDynamic> dyn(3);
  for (std::size_t d = 0; d < 3; ++d) {
    dyn[d].index = int(d);
    dyn[d].tes_ms = default_echo_times();
    for (int e = 0; e < 3; ++e) {
      VoxelGrid v(g);
      for (double &x : v.data()) {
        x = nd(rng);
      }
      dyn[d].echoes.push_back(v);
    }
  }
  ReconConfig cfg;
  cfg.min_slice_ncc = 0.99;
  cfg.min_content = 0.0;
  CHECK_THROWS_AS(reconstruct(dyn, fit_all(dyn), cfg), ReconstructionError);
  CHECK_THROWS_AS(reconstruct(dyn, {}, cfg), ContractViolation);
}
