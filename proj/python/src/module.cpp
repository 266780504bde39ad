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
#include "t2s/anatomy_stats.hpp"
#include "t2s/denoise.hpp"
#include "t2s/labels.hpp"
#include "t2s/nifti.hpp"
#include "t2s/parallel.hpp"
#include "t2s/phantom.hpp"
#include "t2s/pipeline.hpp"
#include "t2s/relaxometry.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace t2s;

namespace {

// Volumes cross the boundary as (x, y, z) arrays in Fortran order, which is
// the memory layout of VoxelGrid.
using FArray = py::array_t<double, py::array::f_style | py::array::forcecast>;

py::array_t<double> to_numpy(VoxelGrid const &g)
{
  Dims const d = g.dims();
  py::array_t<double, py::array::f_style> out({py::ssize_t(d.x), py::ssize_t(d.y), py::ssize_t(d.z)});
  std::copy(g.data().begin(), g.data().end(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_to_numpy(Mask const &m, Dims d)
{
  py::array_t<bool, py::array::f_style> out({py::ssize_t(d.x), py::ssize_t(d.y), py::ssize_t(d.z)});
  std::transform(m.begin(), m.end(), out.mutable_data(), [](std::uint8_t v) { return v != 0; });
  return out;
}

Dims dims_of(FArray const &a)
{
  if (a.ndim() != 3) {
    throw ContractViolation("volumes must be 3-dimensional (x, y, z) arrays");
  }
  return Dims{int(a.shape(0)), int(a.shape(1)), int(a.shape(2))};
}

GridGeometry geometry_of(Dims d, py::object const &affine, py::object const &spacing)
{
  GridGeometry g;
  g.dims = d;
  if (!affine.is_none()) {
    auto a = py::cast<py::array_t<double, py::array::c_style | py::array::forcecast>>(affine);
    if (a.ndim() != 2 || a.shape(0) != 4 || a.shape(1) != 4) {
      throw ContractViolation("affine must be a 4x4 array");
    }
    Mat4 m;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) {
        m(r, c) = a.at(r, c);
      }
    }
    g.affine = Affine4(m);
  } else {
    Vec3 s(1.0, 1.0, 1.0);
    if (!spacing.is_none()) {
      auto v = py::cast<std::vector<double>>(spacing);
      if (v.size() != 3) {
        throw ContractViolation("spacing needs three values");
      }
      s = Vec3(v[0], v[1], v[2]);
    }
    g = centred_geometry(d, s);
  }
  return g;
}

VoxelGrid from_numpy(FArray const &a, GridGeometry const &g)
{
  return VoxelGrid(g, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> affine_to_numpy(Affine4 const &a)
{
  py::array_t<double> out({4, 4});
  auto m = out.mutable_unchecked<2>();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      m(r, c) = a.matrix()(r, c);
    }
  }
  return out;
}

py::dict curve_dict(GrowthCurve const &g)
{
  py::dict d;
  d["n"] = g.n;
  d["slope"] = g.slope;
  d["intercept"] = g.intercept;
  d["r2"] = g.r2;
  d["pearson_r"] = g.pearson_r;
  return d;
}

} // namespace

PYBIND11_MODULE(_core, m)
{
  m.doc() = "Quantitative fetal-body T2* reconstruction toolkit";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);

  m.def("set_thread_count", &set_thread_count, py::arg("n"));
  m.def("default_echo_times", &default_echo_times);

  m.def(
      "fit_voxel",
      [](std::vector<double> const &signals, std::vector<double> const &tes, double cap) {
        VoxelFit const f = fit_voxel(signals, tes, cap);
        py::dict d;
        d["s0"] = f.s0;
        d["t2star_ms"] = f.t2star_ms;
        d["r2"] = f.r2;
        d["failed"] = f.failed;
        return d;
      },
      py::arg("signals"), py::arg("tes_ms"), py::arg("t2star_cap_ms") = 2000.0);

  m.def(
      "fit_echoes",
      [](std::vector<FArray> const &echoes, std::vector<double> const &tes, double cap) {
        if (echoes.empty()) {
          throw ContractViolation("no echoes given");
        }
        Dims const d = dims_of(echoes.front());
        GridGeometry const g = centred_geometry(d, Vec3(1, 1, 1));
        MultiEchoDynamic dyn;
        dyn.tes_ms = tes;
        for (auto const &e : echoes) {
          if (!(dims_of(e) == d)) {
            throw ContractViolation("echo volumes differ in shape");
          }
          dyn.echoes.push_back(from_numpy(e, g));
        }
        FitOptions o;
        o.t2star_cap_ms = cap;
        DynamicFit const f = map_dynamic(dyn, o);
        return py::make_tuple(to_numpy(f.map.t2star), to_numpy(f.map.s0), mask_to_numpy(f.map.failed, d));
      },
      py::arg("echoes"), py::arg("tes_ms"), py::arg("t2star_cap_ms") = 2000.0,
      "Per-voxel fit of a list of (x, y, z) echo volumes; returns (t2star, s0, failed).");

  m.def(
      "mppca_denoise",
      [](std::vector<FArray> const &volumes, int patch_radius) {
        if (volumes.empty()) {
          throw ContractViolation("no volumes given");
        }
        Dims const d = dims_of(volumes.front());
        GridGeometry const g = centred_geometry(d, Vec3(1, 1, 1));
        MeasurementStack s;
        for (auto const &v : volumes) {
          if (!(dims_of(v) == d)) {
            throw ContractViolation("volumes differ in shape");
          }
          s.volumes.push_back(from_numpy(v, g));
        }
        DenoiseOptions o;
        o.patch_radius = patch_radius;
        DenoiseResult r;
        {
          py::gil_scoped_release release;
          r = mppca_denoise(s, o);
        }
        py::list out;
        for (auto const &v : r.stack.volumes) {
          out.append(to_numpy(v));
        }
        return py::make_tuple(out, to_numpy(r.noise.sigma), to_numpy(r.noise.rank));
      },
      py::arg("volumes"), py::arg("patch_radius") = 2,
      "MP-PCA denoising; returns (denoised volumes, sigma map, signal rank map).");

  m.def(
      "mp_threshold",
      [](std::vector<double> const &eig, int m, int n) {
        MpThreshold const t = mp_threshold(eig, m, n);
        return py::make_tuple(t.sigma2, t.noise_components);
      },
      py::arg("eigenvalues"), py::arg("m"), py::arg("n"));

  m.def(
      "dice",
      [](FArray const &a, FArray const &b, int label) {
        GridGeometry const g = centred_geometry(dims_of(a), Vec3(1, 1, 1));
        if (!(dims_of(b) == g.dims)) {
          throw ContractViolation("label maps differ in shape");
        }
        return dice(LabelMap{from_numpy(a, g)}, LabelMap{from_numpy(b, g)}, label);
      },
      py::arg("a"), py::arg("b"), py::arg("label"));

  m.def(
      "fit_growth_curve",
      [](std::vector<double> const &ga, std::vector<double> const &values) {
        if (ga.size() != values.size()) {
          throw ContractViolation("ga and values differ in length");
        }
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < ga.size(); ++i) {
          pts.emplace_back(ga[i], values[i]);
        }
        return curve_dict(fit_growth_curve(pts));
      },
      py::arg("ga_weeks"), py::arg("values"));

  m.def(
      "welch_t_test",
      [](std::vector<double> const &a, std::vector<double> const &b) {
        WelchResult const w = welch_t_test(a, b);
        return py::make_tuple(w.t, w.dof, w.p);
      },
      py::arg("a"), py::arg("b"), "Returns (t, dof, two-sided p).");

  m.def(
      "consistency_check",
      [](std::vector<double> const &means, double recon) {
        ConsistencyResult const c = consistency_check(means, recon);
        py::dict d;
        d["mean"] = c.mean;
        d["sigma"] = c.sigma;
        d["band"] = py::make_tuple(c.band_lo, c.band_hi);
        d["recon_mean"] = c.recon_mean;
        d["pass"] = c.pass;
        return d;
      },
      py::arg("dynamic_means"), py::arg("recon_mean"));

  m.def(
      "make_phantom",
      [](double ga, std::array<int, 3> dims, std::array<double, 3> spacing, std::uint64_t seed) {
        DigitalPhantom const p =
            make_phantom(ga, Dims{dims[0], dims[1], dims[2]}, Vec3(spacing[0], spacing[1], spacing[2]), seed);
        py::dict organs;
        for (auto const &[label, o] : p.organs) {
          organs[py::str(std::string(organ_key(label)))] = py::make_tuple(o.s0, o.t2star_ms);
        }
        py::dict d;
        d["labels"] = to_numpy(p.labels);
        d["t2star"] = to_numpy(p.t2star_map());
        d["s0"] = to_numpy(p.s0_map());
        d["affine"] = affine_to_numpy(p.labels.affine());
        d["organs"] = organs;
        return d;
      },
      py::arg("ga_weeks") = 28.0, py::arg("dims") = std::array<int, 3>{84, 84, 72},
      py::arg("spacing_mm") = std::array<double, 3>{1.2, 1.2, 1.2}, py::arg("seed") = 1);

  m.def(
      "read_volume",
      [](std::filesystem::path const &path) {
        VoxelGrid const g = read_volume(path);
        return py::make_tuple(to_numpy(g), affine_to_numpy(g.affine()));
      },
      py::arg("path"), "Returns (data, 4x4 affine).");

  m.def(
      "write_volume",
      [](std::filesystem::path const &path, FArray const &data, py::object const &affine, py::object const &spacing) {
        write_volume(from_numpy(data, geometry_of(dims_of(data), affine, spacing)), path);
      },
      py::arg("path"), py::arg("data"), py::arg("affine") = py::none(), py::arg("spacing_mm") = py::none());

  m.def(
      "config_json",
      [](std::string const &text) { return config_json(parse_config(text)); }, py::arg("json_text"),
      "Validated configuration with every default filled in.");

  m.def(
      "simulate",
      [](std::filesystem::path const &config, std::filesystem::path const &out) {
        simulate_dataset(load_config(config), out);
      },
      py::arg("config"), py::arg("out"));

  m.def(
      "run_pipeline",
      [](std::filesystem::path const &config) {
        PipelineConfig const c = load_config(config);
        std::vector<StageOutcome> r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(c);
        }
        py::list out;
        for (auto const &s : r) {
          out.append(py::make_tuple(std::string(stage_name(s.stage)), s.skipped, s.note));
        }
        return out;
      },
      py::arg("config"), "Runs every stage; returns (stage, skipped, note) tuples.");
}
