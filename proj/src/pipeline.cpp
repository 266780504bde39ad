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
#include "t2s/pipeline.hpp"

#include "t2s/labels.hpp"
#include "t2s/nifti.hpp"
#include "t2s/parallel.hpp"
#include "t2s/series.hpp"

#include <fmt/format.h>
#include <fmt/os.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace t2s {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(json const &j, std::initializer_list<std::string_view> allowed, std::string_view where)
{
  if (!j.is_object()) {
    throw ConfigError(fmt::format("'{}' must be a JSON object", where));
  }
  for (auto const &[key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(fmt::format("unknown key '{}' in '{}'", key, where));
    }
  }
}

template <class T>
void read(json const &j, char const *key, T &out)
{
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (json::exception const &e) {
      throw ConfigError(fmt::format("bad value for '{}': {}", key, e.what()));
    }
  }
}

Vec3 read_vec3(json const &j, char const *key, Vec3 v)
{
  if (j.contains(key)) {
    std::vector<double> a;
    read(j, key, a);
    if (a.size() != 3) {
      throw ConfigError(fmt::format("'{}' needs three numbers", key));
    }
    v = Vec3(a[0], a[1], a[2]);
  }
  return v;
}

void read_path(json const &j, char const *key, fs::path const &base, fs::path &out)
{
  std::string s;
  if (j.contains(key)) {
    read(j, key, s);
    fs::path p(s);
    out = (p.is_relative() && !s.empty()) ? base / p : p;
  }
}

json vec_json(Vec3 const &v) { return json::array({v[0], v[1], v[2]}); }

void parse_simulate(json const &j, SimulateSettings &s)
{
  check_keys(j,
             {"ga_weeks", "dims", "spacing_mm", "geometry_seed", "dynamics", "acquisition_voxel_mm",
              "max_rotation_deg", "max_translation_mm", "outliers", "outlier_rotation_deg", "outlier_translation_mm",
              "motion", "slice_jitter_deg", "slice_jitter_mm", "noise_sigma", "noise_model", "organs"},
             "simulate");
  read(j, "ga_weeks", s.ga_weeks);
  if (j.contains("dims")) {
    std::vector<int> d;
    read(j, "dims", d);
    if (d.size() != 3) {
      throw ConfigError("'dims' needs three integers");
    }
    s.dims = Dims{d[0], d[1], d[2]};
  }
  s.spacing_mm = read_vec3(j, "spacing_mm", s.spacing_mm);
  read(j, "geometry_seed", s.geometry_seed);
  read(j, "dynamics", s.dynamics);
  s.acquisition_voxel_mm = read_vec3(j, "acquisition_voxel_mm", s.acquisition_voxel_mm);
  read(j, "max_rotation_deg", s.max_rotation_deg);
  read(j, "max_translation_mm", s.max_translation_mm);
  read(j, "outliers", s.outliers);
  read(j, "outlier_rotation_deg", s.outlier_rotation_deg);
  read(j, "outlier_translation_mm", s.outlier_translation_mm);
  if (j.contains("motion")) {
    s.motion.clear();
    for (auto const &m : j.at("motion")) {
      check_keys(m, {"rotation_deg", "translation_mm"}, "simulate.motion");
      s.motion.push_back(RigidTransform{read_vec3(m, "rotation_deg", Vec3::Zero()),
                                        read_vec3(m, "translation_mm", Vec3::Zero())});
    }
  }
  read(j, "slice_jitter_deg", s.slice_jitter_deg);
  read(j, "slice_jitter_mm", s.slice_jitter_mm);
  read(j, "noise_sigma", s.noise_sigma);
  if (j.contains("noise_model")) {
    std::string m;
    read(j, "noise_model", m);
    if (m == "gaussian") {
      s.noise = NoiseModel::Gaussian;
    } else if (m == "rician") {
      s.noise = NoiseModel::Rician;
    } else {
      throw ConfigError(fmt::format("noise_model must be 'gaussian' or 'rician', got '{}'", m));
    }
  }
  if (j.contains("organs")) {
    json const &o = j.at("organs");
    if (!o.is_object()) {
      throw ConfigError("'simulate.organs' must map organ names to {s0, t2star_ms}");
    }
    for (auto const &[key, value] : o.items()) {
      auto const label = organ_from_key(key);
      if (!label) {
        throw ConfigError(fmt::format("unknown organ '{}'", key));
      }
      check_keys(value, {"s0", "t2star_ms"}, "simulate.organs");
      OrganProperties p = default_organ_table(s.ga_weeks).at(*label);
      read(value, "s0", p.s0);
      read(value, "t2star_ms", p.t2star_ms);
      s.organ_overrides[*label] = p;
    }
  }
}

json simulate_json(SimulateSettings const &s)
{
  json motion = json::array();
  for (auto const &m : s.motion) {
    motion.push_back({{"rotation_deg", vec_json(m.rotation_deg)}, {"translation_mm", vec_json(m.translation_mm)}});
  }
  json organs = json::object();
  for (auto const &[label, p] : s.organ_overrides) {
    organs[std::string(organ_key(label))] = {{"s0", p.s0}, {"t2star_ms", p.t2star_ms}};
  }
  return {{"ga_weeks", s.ga_weeks},
          {"dims", {s.dims.x, s.dims.y, s.dims.z}},
          {"spacing_mm", vec_json(s.spacing_mm)},
          {"geometry_seed", s.geometry_seed},
          {"dynamics", s.dynamics},
          {"acquisition_voxel_mm", vec_json(s.acquisition_voxel_mm)},
          {"max_rotation_deg", s.max_rotation_deg},
          {"max_translation_mm", s.max_translation_mm},
          {"outliers", s.outliers},
          {"outlier_rotation_deg", s.outlier_rotation_deg},
          {"outlier_translation_mm", s.outlier_translation_mm},
          {"motion", motion},
          {"slice_jitter_deg", s.slice_jitter_deg},
          {"slice_jitter_mm", s.slice_jitter_mm},
          {"noise_sigma", s.noise_sigma},
          {"noise_model", s.noise == NoiseModel::Rician ? "rician" : "gaussian"},
          {"organs", organs}};
}

void parse_recon(json const &j, PipelineConfig &c)
{
  ReconConfig &r = c.recon;
  check_keys(j,
             {"resolution_mm", "intensity_matching", "robust_stats", "cp_schedule_mm", "delta", "final_delta",
              "outer_iterations", "sr_iterations", "deformable_iterations", "bending_weight", "psf_fwhm_mm",
              "psf_support_sigmas", "margin_mm", "min_overlap", "min_slice_ncc", "pyramid_levels", "min_content",
              "stack_registration", "slice_registration", "template_anchor", "weight_floor", "edge_scale"},
             "recon");
  read(j, "resolution_mm", r.resolution_mm);
  read(j, "intensity_matching", r.intensity_matching);
  read(j, "robust_stats", r.robust_stats);
  read(j, "cp_schedule_mm", r.cp_schedule_mm);
  read(j, "delta", r.delta);
  read(j, "final_delta", r.final_delta);
  read(j, "outer_iterations", r.outer_iterations);
  read(j, "sr_iterations", r.sr_iterations);
  read(j, "deformable_iterations", r.deformable_iterations);
  read(j, "bending_weight", r.bending_weight);
  if (j.contains("psf_fwhm_mm")) {
    std::vector<double> f;
    read(j, "psf_fwhm_mm", f);
    if (f.size() != 2) {
      throw ConfigError("'psf_fwhm_mm' needs [in-plane, through-plane]");
    }
    r.psf.in_plane_fwhm_mm = f[0];
    r.psf.through_plane_fwhm_mm = f[1];
    c.psf_from_input = false;
  }
  read(j, "psf_support_sigmas", r.psf.support_sigmas);
  read(j, "margin_mm", r.margin_mm);
  read(j, "min_overlap", r.min_overlap);
  read(j, "min_slice_ncc", r.min_slice_ncc);
  read(j, "pyramid_levels", r.pyramid_levels);
  read(j, "min_content", r.min_content);
  read(j, "stack_registration", r.stack_registration);
  read(j, "slice_registration", r.slice_registration);
  read(j, "template_anchor", r.template_anchor);
  read(j, "weight_floor", r.weight_floor);
  read(j, "edge_scale", r.edge_scale);
}

json recon_json(PipelineConfig const &c)
{
  ReconConfig const &r = c.recon;
  json j = {{"resolution_mm", r.resolution_mm},
            {"intensity_matching", r.intensity_matching},
            {"robust_stats", r.robust_stats},
            {"cp_schedule_mm", r.cp_schedule_mm},
            {"delta", r.delta},
            {"final_delta", r.final_delta},
            {"outer_iterations", r.outer_iterations},
            {"sr_iterations", r.sr_iterations},
            {"deformable_iterations", r.deformable_iterations},
            {"bending_weight", r.bending_weight},
            {"psf_support_sigmas", r.psf.support_sigmas},
            {"margin_mm", r.margin_mm},
            {"min_overlap", r.min_overlap},
            {"min_slice_ncc", r.min_slice_ncc},
            {"pyramid_levels", r.pyramid_levels},
            {"min_content", r.min_content},
            {"stack_registration", r.stack_registration},
            {"slice_registration", r.slice_registration},
            {"template_anchor", r.template_anchor},
            {"weight_floor", r.weight_floor},
            {"edge_scale", r.edge_scale}};
  if (!c.psf_from_input) {
    j["psf_fwhm_mm"] = {r.psf.in_plane_fwhm_mm, r.psf.through_plane_fwhm_mm};
  }
  return j;
}

std::string path_string(fs::path const &p) { return p.empty() ? std::string() : p.generic_string(); }

} // namespace

void PipelineConfig::validate() const
{
  if (tes_ms.size() < 2) {
    throw ConfigError("at least two echo times are required");
  }
  for (std::size_t e = 0; e < tes_ms.size(); ++e) {
    if (!(tes_ms[e] > 0) || (e > 0 && !(tes_ms[e] > tes_ms[e - 1]))) {
      throw ConfigError("echo times must be positive and increasing");
    }
  }
  if (structural_echo >= tes_ms.size()) {
    throw ConfigError(fmt::format("structural echo {} out of range for {} echoes", structural_echo, tes_ms.size()));
  }
  if (denoise_options.patch_radius < 1) {
    throw ConfigError("denoise patch radius must be >= 1");
  }
  if (!(fit.t2star_cap_ms > 0)) {
    throw ConfigError("t2star_cap_ms must be > 0");
  }
  if (case_id.empty() || case_id.find_first_of(",\n\"") != std::string::npos) {
    throw ConfigError("case_id must be non-empty and free of commas, quotes and newlines");
  }
  qc.validate();
  recon.validate();
  if (simulate.dynamics < 1) {
    throw ConfigError("simulate.dynamics must be >= 1");
  }
  if (!simulate.motion.empty() && int(simulate.motion.size()) != simulate.dynamics) {
    throw ConfigError(fmt::format("simulate.motion lists {} poses for {} dynamics", simulate.motion.size(),
                                  simulate.dynamics));
  }
  for (int o : simulate.outliers) {
    if (o < 0 || o >= simulate.dynamics) {
      throw ConfigError(fmt::format("outlier dynamic {} out of range", o));
    }
  }
  if (simulate.noise_sigma < 0 || simulate.max_rotation_deg < 0 || simulate.max_translation_mm < 0) {
    throw ConfigError("simulated noise and motion amplitudes must be >= 0");
  }
}

PipelineConfig parse_config(std::string_view json_text, fs::path const &base_dir)
{
  json j;
  try {
    j = json::parse(json_text);
  } catch (json::parse_error const &e) {
    throw ParseError(fmt::format("config is not valid JSON: {}", e.what()), e.byte);
  }
  PipelineConfig c;
  check_keys(j,
             {"input", "output", "labels", "reference_labels", "seed", "threads", "acquisition", "denoise", "fit",
              "qc", "recon", "stats", "simulate"},
             "config");
  read_path(j, "input", base_dir, c.input);
  read_path(j, "output", base_dir, c.output);
  read_path(j, "labels", base_dir, c.labels);
  read_path(j, "reference_labels", base_dir, c.reference_labels);
  read(j, "seed", c.seed);
  read(j, "threads", c.threads);
  if (j.contains("acquisition")) {
    json const &a = j.at("acquisition");
    check_keys(a, {"tes_ms", "structural_echo", "dynamics"}, "acquisition");
    read(a, "tes_ms", c.tes_ms);
    read(a, "structural_echo", c.structural_echo);
    read(a, "dynamics", c.dynamics);
  }
  if (j.contains("denoise")) {
    json const &d = j.at("denoise");
    check_keys(d, {"enabled", "patch_radius", "aggregation"}, "denoise");
    read(d, "enabled", c.denoise);
    read(d, "patch_radius", c.denoise_options.patch_radius);
    if (d.contains("aggregation")) {
      std::string a;
      read(d, "aggregation", a);
      if (a == "uniform") {
        c.denoise_options.aggregation = Aggregation::Uniform;
      } else if (a == "centre") {
        c.denoise_options.aggregation = Aggregation::CentreOnly;
      } else {
        throw ConfigError(fmt::format("aggregation must be 'uniform' or 'centre', got '{}'", a));
      }
    }
  }
  if (j.contains("fit")) {
    json const &f = j.at("fit");
    check_keys(f, {"t2star_cap_ms", "min_r2", "nonlinear_refine"}, "fit");
    read(f, "t2star_cap_ms", c.fit.t2star_cap_ms);
    if (f.contains("min_r2") && !f.at("min_r2").is_null()) {
      double r2 = 0;
      read(f, "min_r2", r2);
      c.fit.min_r2 = r2;
    }
    read(f, "nonlinear_refine", c.fit.nonlinear_refine);
  }
  if (j.contains("qc")) {
    json const &q = j.at("qc");
    check_keys(q, {"ncc", "slice_consistency", "keep", "drop"}, "qc");
    read(q, "ncc", c.qc.ncc);
    read(q, "slice_consistency", c.qc.slice_consistency);
    read(q, "keep", c.overrides.keep);
    read(q, "drop", c.overrides.drop);
  }
  if (j.contains("recon")) {
    parse_recon(j.at("recon"), c);
  }
  if (j.contains("stats")) {
    json const &s = j.at("stats");
    check_keys(s, {"case_id", "ga_weeks", "cohort"}, "stats");
    read(s, "case_id", c.case_id);
    read(s, "ga_weeks", c.ga_weeks);
    if (s.contains("cohort")) {
      std::vector<std::string> files;
      read(s, "cohort", files);
      for (auto const &f : files) {
        fs::path const p(f);
        c.cohort.push_back(p.is_relative() ? base_dir / p : p);
      }
    }
  }
  if (j.contains("simulate")) {
    parse_simulate(j.at("simulate"), c.simulate);
  }
  c.validate();
  return c;
}

PipelineConfig load_config(fs::path const &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string config_json(PipelineConfig const &c)
{
  std::vector<std::string> cohort;
  for (auto const &p : c.cohort) {
    cohort.push_back(path_string(p));
  }
  json j = {{"input", path_string(c.input)},
            {"output", path_string(c.output)},
            {"labels", path_string(c.labels)},
            {"reference_labels", path_string(c.reference_labels)},
            {"seed", c.seed},
            {"threads", c.threads},
            {"acquisition", {{"tes_ms", c.tes_ms}, {"structural_echo", c.structural_echo}, {"dynamics", c.dynamics}}},
            {"denoise",
             {{"enabled", c.denoise},
              {"patch_radius", c.denoise_options.patch_radius},
              {"aggregation", c.denoise_options.aggregation == Aggregation::Uniform ? "uniform" : "centre"}}},
            {"fit",
             {{"t2star_cap_ms", c.fit.t2star_cap_ms},
              {"min_r2", c.fit.min_r2 ? json(*c.fit.min_r2) : json(nullptr)},
              {"nonlinear_refine", c.fit.nonlinear_refine}}},
            {"qc",
             {{"ncc", c.qc.ncc},
              {"slice_consistency", c.qc.slice_consistency},
              {"keep", c.overrides.keep},
              {"drop", c.overrides.drop}}},
            {"recon", recon_json(c)},
            {"stats", {{"case_id", c.case_id}, {"ga_weeks", c.ga_weeks}, {"cohort", cohort}}},
            {"simulate", simulate_json(c.simulate)}};
  return j.dump(2) + "\n";
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed)
{
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string_view stage_name(Stage stage)
{
  switch (stage) {
  case Stage::Denoise:
    return "denoise";
  case Stage::Fit:
    return "fit";
  case Stage::Qc:
    return "qc";
  case Stage::Recon:
    return "recon";
  case Stage::Stats:
    return "stats";
  case Stage::Growth:
    return "growth";
  case Stage::Report:
    return "report";
  }
  return "unknown";
}

StageFailure::StageFailure(Stage stage, int exit_code, std::string const &message)
    : Error(fmt::format("{} stage failed: {}", stage_name(stage), message)), stage_(stage), exit_code_(exit_code)
{
}

int exit_code_for(std::exception const &error)
{
  if (auto const *s = dynamic_cast<StageFailure const *>(&error)) {
    return s->exit_code();
  }
  if (dynamic_cast<ConfigError const *>(&error) || dynamic_cast<ContractViolation const *>(&error) ||
      dynamic_cast<ParseError const *>(&error)) {
    return 2;
  }
  return 1;
}

fs::path stage_dir(PipelineConfig const &config, Stage stage) { return config.output / std::string(stage_name(stage)); }

// ---------------------------------------------------------------------------
// Simulation

MotionScript motion_script(SimulateSettings const &s, std::uint64_t seed)
{
  MotionScript ms = MotionScript::still(s.dynamics);
  ms.noise_sigma = s.noise_sigma;
  ms.noise = s.noise;
  ms.slice_jitter_deg = s.slice_jitter_deg;
  ms.slice_jitter_mm = s.slice_jitter_mm;
  ms.seed = seed;
  if (!s.motion.empty()) {
    if (int(s.motion.size()) != s.dynamics) {
      throw ConfigError("one explicit pose per dynamic required");
    }
    for (std::size_t d = 0; d < s.motion.size(); ++d) {
      ms.dynamics[d].pose = s.motion[d];
    }
  } else {
    std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t d = 1; d < ms.dynamics.size(); ++d) {
      for (int a = 0; a < 3; ++a) {
        ms.dynamics[d].pose.rotation_deg[a] = s.max_rotation_deg / std::sqrt(3.0) * u(rng);
        ms.dynamics[d].pose.translation_mm[a] = s.max_translation_mm / std::sqrt(3.0) * u(rng);
      }
    }
  }
  for (std::size_t n = 0; n < s.outliers.size(); ++n) {
    double const sign = n % 2 ? -1.0 : 1.0;
    ms.dynamics[std::size_t(s.outliers[n])].pose =
        RigidTransform{Vec3(0.0, 0.0, sign * s.outlier_rotation_deg), Vec3(sign * s.outlier_translation_mm, 0.0, 0.0)};
  }
  ms.validate();
  return ms;
}

SimulatedSeries simulate_dataset(PipelineConfig const &config, fs::path const &dir)
{
  config.validate();
  SimulateSettings const &s = config.simulate;
  PhantomOptions po;
  po.ga_weeks = s.ga_weeks;
  po.dims = s.dims;
  po.spacing_mm = s.spacing_mm;
  po.seed = s.geometry_seed;
  po.organ_overrides = s.organ_overrides;
  DigitalPhantom const phantom = make_phantom(po);
  AcquisitionGeometry const acq = AcquisitionGeometry::covering(phantom, s.acquisition_voxel_mm);
  SimulationOptions so;
  so.keep_noiseless = false;
  SimulatedSeries sim = simulate_acquisition(phantom, motion_script(s, config.seed), config.tes_ms, acq, so);

  fs::create_directories(dir / "truth" / "transforms");
  write_series(sim.dynamics, dir);
  write_volume(phantom.labels, dir / "truth" / "labels.nii.gz");
  write_volume(phantom.t2star_map(), dir / "truth" / "t2star.nii.gz");
  write_volume(phantom.s0_map(), dir / "truth" / "s0.nii.gz");
  for (std::size_t d = 0; d < sim.truth.dynamic_transforms.size(); ++d) {
    auto out = fmt::output_file((dir / "truth" / "transforms" / fmt::format("dyn{:03}.txt", d)).string());
    Mat4 const m = sim.truth.dynamic_transforms[d].to_affine().matrix();
    for (int r = 0; r < 4; ++r) {
      out.print("{:.9f} {:.9f} {:.9f} {:.9f}\n", m(r, 0), m(r, 1), m(r, 2), m(r, 3));
    }
  }
  json organs = json::object();
  for (auto const &[label, p] : phantom.organs) {
    organs[std::string(organ_key(label))] = {{"s0", p.s0}, {"t2star_ms", p.t2star_ms}};
  }
  json const spec = {{"seed", config.seed},
                     {"tes_ms", config.tes_ms},
                     {"simulate", simulate_json(s)},
                     {"organ_table", organs}};
  std::ofstream(dir / "phantom.json") << spec.dump(2) << "\n";
  return sim;
}

// ---------------------------------------------------------------------------
// Per-dynamic organ means

std::vector<std::vector<std::optional<double>>> dynamic_organ_means(ReconResult const &result,
                                                                    std::vector<T2StarMap> const &maps,
                                                                    LabelMap const &labels, ReconConfig const &config)
{
  labels.validate();
  if (!labels.grid.geometry().same_as(result.t2star.geometry())) {
    throw ContractViolation("label map geometry differs from the reconstruction grid");
  }
  ChannelSlices const cs = t2star_slices(result.slices, maps);
  std::vector<std::vector<std::optional<double>>> out(maps.size(),
                                                      std::vector<std::optional<double>>(std::size_t(kOrganCount)));
  for (std::size_t stack = 0; stack < maps.size(); ++stack) {
    std::vector<SliceModel> sub;
    std::vector<VoxelGrid> values;
    std::vector<Mask> failed;
    for (std::size_t s = 0; s < result.slices.size(); ++s) {
      if (std::size_t(result.slices[s].stack) == stack) {
        sub.push_back(result.slices[s]);
        values.push_back(cs.values[s]);
        failed.push_back(cs.failed[s]);
      }
    }
    if (sub.empty()) {
      continue;
    }
    ChannelVolume const ch = propagate_channel(sub, values, failed, labels.grid.geometry(), config);
    std::vector<double> sum(std::size_t(kOrganCount), 0.0);
    std::vector<std::size_t> n(std::size_t(kOrganCount), 0);
    for (std::size_t v = 0; v < ch.values.size(); ++v) {
      int const l = int(std::lround(labels.grid[v]));
      if (l >= 1 && l <= kOrganCount && ch.valid[v]) {
        sum[std::size_t(l - 1)] += ch.values[v];
        ++n[std::size_t(l - 1)];
      }
    }
    for (std::size_t o = 0; o < sum.size(); ++o) {
      if (n[o] > 0) {
        out[stack][o] = sum[o] / double(n[o]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string xml_escape(std::string_view s)
{
  std::string out;
  for (char c : s) {
    switch (c) {
    case '&':
      out += "&amp;";
      break;
    case '<':
      out += "&lt;";
      break;
    case '>':
      out += "&gt;";
      break;
    case '"':
      out += "&quot;";
      break;
    default:
      out += c;
    }
  }
  return out;
}

// Range padded by 5% (or by 1 when flat).
std::pair<double, double> padded(double lo, double hi)
{
  double const pad = hi > lo ? 0.05 * (hi - lo) : 1.0;
  return {lo - pad, hi + pad};
}

} // namespace

std::string growth_svg(std::string_view title, std::string_view y_label,
                       std::vector<std::pair<double, double>> const &points, GrowthCurve const *curve)
{
  constexpr double W = 480, H = 360, L = 64, R = 16, T = 40, B = 48;
  double xlo = 0, xhi = 1, ylo = 0, yhi = 1;
  if (!points.empty()) {
    xlo = xhi = points.front().first;
    ylo = yhi = points.front().second;
    for (auto const &[x, y] : points) {
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  }
  if (curve) {
    for (double x : {xlo, xhi}) {
      double const y = curve->intercept + curve->slope * x;
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  }
  std::tie(xlo, xhi) = padded(xlo, xhi);
  std::tie(ylo, yhi) = padded(ylo, yhi);
  auto px = [&](double x) { return L + (x - xlo) / (xhi - xlo) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ylo) / (yhi - ylo) * (H - T - B); };

  std::string s = fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" "
                              "viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">\n",
                              W, H, W, H);
  s += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  s += fmt::format("<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", W / 2,
                   xml_escape(title));
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T, H - B);
  for (int t = 0; t <= 4; ++t) {
    double const x = xlo + (xhi - xlo) * t / 4.0;
    double const y = ylo + (yhi - ylo) * t / 4.0;
    s += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{:.1f}</text>\n", px(x), H - B + 16, x);
    s += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.1f}</text>\n", L - 4, py(y) + 4, y);
  }
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Gestational age (weeks)</text>\n",
                   (L + W - R) / 2, H - 10);
  s += fmt::format("<text x=\"14\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0})\">{1}</text>\n",
                   (T + H - B) / 2, xml_escape(y_label));
  for (auto const &[x, y] : points) {
    s += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"#1f77b4\"/>\n", px(x), py(y));
  }
  if (curve) {
    s += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"#d62728\"/>\n", px(xlo),
                     py(curve->intercept + curve->slope * xlo), px(xhi), py(curve->intercept + curve->slope * xhi));
    s += fmt::format("<text x=\"{}\" y=\"{}\">slope {:.6f}, intercept {:.6f}, r² {:.6f}, r {:.6f}, n {}</text>\n",
                     L + 6, T + 12, curve->slope, curve->intercept, curve->r2, curve->pearson_r, curve->n);
  }
  s += "</svg>\n";
  return s;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

std::string read_file(fs::path const &p)
{
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    throw IntegrityError(fmt::format("cannot read '{}'", p.string()));
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(fs::path const &p, std::string_view text)
{
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) {
    throw IntegrityError(fmt::format("cannot write '{}'", p.string()));
  }
}

std::vector<std::string> split(std::string const &line, char sep)
{
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Rows of a headed CSV as column-name -> value maps.
std::vector<std::map<std::string, std::string>> read_csv(fs::path const &p)
{
  std::istringstream in(read_file(p));
  std::string line;
  if (!std::getline(in, line)) {
    throw IntegrityError(fmt::format("'{}' is empty", p.string()));
  }
  std::vector<std::string> const header = split(line, ',');
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::vector<std::string> const cells = split(line, ',');
    if (cells.size() != header.size()) {
      throw IntegrityError(fmt::format("'{}': row has {} cells, header has {}", p.string(), cells.size(), header.size()));
    }
    std::map<std::string, std::string> row;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      row[header[c]] = cells[c];
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double to_double(std::string const &s, fs::path const &where)
{
  try {
    std::size_t used = 0;
    double const v = std::stod(s, &used);
    if (used != s.size()) {
      throw std::invalid_argument(s);
    }
    return v;
  } catch (std::exception const &) {
    throw IntegrityError(fmt::format("'{}': '{}' is not a number", where.string(), s));
  }
}

std::string hex(std::uint64_t h) { return fmt::format("{:016x}", h); }

// Regular files below `dir`, relative and sorted, excluding the stamp.
std::vector<fs::path> files_below(fs::path const &dir, bool recursive)
{
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) {
    return out;
  }
  auto add = [&](fs::directory_entry const &e) {
    if (e.is_regular_file() && e.path().filename() != "stamp") {
      out.push_back(fs::relative(e.path(), dir));
    }
  };
  if (recursive) {
    for (auto const &e : fs::recursive_directory_iterator(dir)) {
      add(e);
    }
  } else {
    for (auto const &e : fs::directory_iterator(dir)) {
      add(e);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t hash_file(fs::path const &p, std::uint64_t h)
{
  h = fnv1a(p.filename().string(), h);
  if (!fs::is_regular_file(p)) {
    return fnv1a("<missing>", h);
  }
  return fnv1a(read_file(p), h);
}

std::uint64_t hash_dir(fs::path const &dir, std::uint64_t h)
{
  for (auto const &f : files_below(dir, false)) {
    h = hash_file(dir / f, h);
  }
  return h;
}

fs::path series_dir(PipelineConfig const &c) { return c.denoise ? stage_dir(c, Stage::Denoise) : c.input; }

std::vector<MultiEchoDynamic> load_series(PipelineConfig const &c)
{
  if (c.input.empty()) {
    throw ConfigError("no input series directory configured");
  }
  return read_series(series_dir(c), c.tes_ms, c.dynamics);
}

std::vector<fs::path> cohort_files(PipelineConfig const &c)
{
  if (!c.cohort.empty()) {
    return c.cohort;
  }
  return {stage_dir(c, Stage::Stats) / "organ_stats.csv"};
}

std::string stage_stamp(PipelineConfig const &c, Stage stage)
{
  json const full = json::parse(config_json(c));
  json settings;
  std::uint64_t h = fnv1a(stage_name(stage));
  switch (stage) {
  case Stage::Denoise:
    settings = full.at("denoise");
    h = hash_dir(c.input, h);
    break;
  case Stage::Fit:
    settings = full.at("fit");
    h = hash_dir(series_dir(c), h);
    break;
  case Stage::Qc:
    settings = {full.at("qc"), c.structural_echo};
    h = hash_dir(series_dir(c), h);
    break;
  case Stage::Recon:
    settings = {full.at("recon"), c.structural_echo};
    h = hash_dir(series_dir(c), h);
    h = hash_dir(stage_dir(c, Stage::Fit), h);
    h = hash_file(stage_dir(c, Stage::Qc) / "qc_report.csv", h);
    if (!c.labels.empty()) {
      h = hash_file(c.labels, h);
    }
    break;
  case Stage::Stats:
    settings = {c.case_id, c.ga_weeks};
    h = hash_dir(stage_dir(c, Stage::Recon), h);
    if (!c.labels.empty()) {
      h = hash_file(c.labels, h);
    }
    break;
  case Stage::Growth:
    for (auto const &f : cohort_files(c)) {
      h = hash_file(f, fnv1a(f.generic_string(), h));
    }
    break;
  case Stage::Report:
    h = hash_dir(stage_dir(c, Stage::Growth), h);
    h = hash_file(stage_dir(c, Stage::Stats) / "consistency.csv", h);
    if (!c.reference_labels.empty()) {
      h = hash_file(c.labels, h);
      h = hash_file(c.reference_labels, h);
    }
    break;
  }
  settings = {settings, c.tes_ms, c.dynamics, c.denoise};
  return hex(fnv1a(settings.dump(), h));
}

std::string stage_denoise(PipelineConfig const &c, fs::path const &dir)
{
  if (c.input.empty()) {
    throw ConfigError("no input series directory configured");
  }
  std::vector<MultiEchoDynamic> const series = read_series(c.input, c.tes_ms, c.dynamics);
  DenoiseResult const res = mppca_denoise(MeasurementStack::from_series(series), c.denoise_options);
  write_series(res.stack.to_series(series), dir);
  write_volume(res.noise.sigma, dir / "noise_sigma.nii.gz");
  std::string note = fmt::format("{} measurements", res.stack.measurements());
  for (auto const &w : res.warnings) {
    note += "; " + w;
  }
  return note;
}

std::string stage_fit(PipelineConfig const &c, fs::path const &dir)
{
  std::vector<MultiEchoDynamic> const series = load_series(c);
  std::string csv = "dynamic,failed_fraction,median_t2s_ms\n";
  double failed = 0.0;
  for (auto const &d : series) {
    DynamicFit const f = map_dynamic(d, c.fit);
    write_volume(f.map.t2star, dir / fmt::format("t2s_dyn{:03}.nii.gz", d.index));
    write_volume(f.map.s0, dir / fmt::format("s0_dyn{:03}.nii.gz", d.index));
    write_mask(f.map.failed, f.map.t2star.geometry(), dir / fmt::format("failed_dyn{:03}.nii.gz", d.index));
    csv += fmt::format("{},{:.6f},{:.4f}\n", d.index, f.summary.failed_fraction, f.summary.median_t2star_ms);
    failed += f.summary.failed_fraction;
  }
  write_file(dir / "fit_summary.csv", csv);
  return fmt::format("{} dynamics, mean failed fraction {:.3f}", series.size(), failed / double(series.size()));
}

std::string stage_qc(PipelineConfig const &c, fs::path const &dir)
{
  std::vector<MultiEchoDynamic> const series = load_series(c);
  std::vector<DynamicScore> scores = score_dynamics(series, c.structural_echo, c.qc);
  std::vector<int> const kept = apply_qc(scores, c.qc, c.overrides);
  write_qc_report(dir / "qc_report.csv", scores);
  return fmt::format("{} of {} dynamics kept", kept.size(), scores.size());
}

struct QcRow {
  int dynamic;
  double ncc;
};

std::vector<QcRow> kept_dynamics(PipelineConfig const &c)
{
  fs::path const p = stage_dir(c, Stage::Qc) / "qc_report.csv";
  if (!fs::exists(p)) {
    throw ContractViolation(fmt::format("missing '{}'; run the qc stage first", p.string()));
  }
  std::vector<QcRow> out;
  for (auto const &row : read_csv(p)) {
    if (row.at("kept") == "1" || row.at("kept") == "true") {
      out.push_back({int(to_double(row.at("dynamic"), p)), to_double(row.at("ncc"), p)});
    }
  }
  return out;
}

std::string stage_recon(PipelineConfig const &c, fs::path const &dir)
{
  std::vector<QcRow> const kept = kept_dynamics(c);
  if (kept.empty()) {
    throw ReconstructionError("quality control kept no dynamics");
  }
  std::vector<MultiEchoDynamic> const all = load_series(c);
  std::vector<MultiEchoDynamic> dynamics;
  std::vector<T2StarMap> maps;
  fs::path const fit = stage_dir(c, Stage::Fit);
  std::size_t tmpl = 0;
  for (auto const &k : kept) {
    auto const it = std::find_if(all.begin(), all.end(), [&](auto const &d) { return d.index == k.dynamic; });
    if (it == all.end()) {
      throw IntegrityError(fmt::format("qc report names dynamic {} which is not in the series", k.dynamic));
    }
    if (k.ncc > kept[tmpl].ncc) {
      tmpl = dynamics.size();
    }
    dynamics.push_back(*it);
    T2StarMap m;
    m.t2star = read_volume(fit / fmt::format("t2s_dyn{:03}.nii.gz", k.dynamic));
    m.t2star.set_unit(UnitTag::Milliseconds);
    m.s0 = read_volume(fit / fmt::format("s0_dyn{:03}.nii.gz", k.dynamic));
    m.failed = read_mask(fit / fmt::format("failed_dyn{:03}.nii.gz", k.dynamic), &m.t2star.geometry());
    maps.push_back(std::move(m));
  }
  ReconConfig rc = c.recon;
  if (c.psf_from_input) {
    rc.psf = PsfSpec::for_acquisition(dynamics.front().geometry().spacing(), rc.psf.support_sigmas);
  }
  std::optional<LabelMap> labels;
  if (!c.labels.empty()) {
    labels = LabelMap{read_volume(c.labels)};
    labels->validate();
    rc.grid = labels->grid.geometry();
  }
  ReconResult const res = reconstruct(dynamics, maps, rc, tmpl, c.structural_echo);
  write_volume(res.structural, dir / "recon_echo2.nii.gz");
  write_volume(res.t2star, dir / "recon_t2s.nii.gz");
  write_mask(res.valid, res.t2star.geometry(), dir / "recon_valid_mask.nii.gz");
  write_file(dir / "recon_report.json", report_json(res));
  write_slice_transforms(res.slices, dir / "transforms");
  if (labels) {
    auto const means = dynamic_organ_means(res, maps, *labels, rc);
    std::string csv = "dynamic,organ,t2s_mean\n";
    for (std::size_t s = 0; s < means.size(); ++s) {
      for (std::size_t o = 0; o < means[s].size(); ++o) {
        if (means[s][o]) {
          csv += fmt::format("{},{},{:.6f}\n", dynamics[s].index, organ_key(int(o) + 1), *means[s][o]);
        }
      }
    }
    write_file(dir / "dynamic_organ_means.csv", csv);
  }
  int excluded = 0;
  for (auto const &s : res.slices) {
    excluded += s.excluded ? 1 : 0;
  }
  return fmt::format("{} dynamics, template {}, {} of {} slices excluded", dynamics.size(),
                     dynamics[tmpl].index, excluded, res.slices.size());
}

std::string stage_stats(PipelineConfig const &c, fs::path const &dir)
{
  if (c.labels.empty()) {
    throw ConfigError("the stats stage needs a label map ('labels')");
  }
  fs::path const rd = stage_dir(c, Stage::Recon);
  VoxelGrid const t2s = read_volume(rd / "recon_t2s.nii.gz");
  Mask const valid = read_mask(rd / "recon_valid_mask.nii.gz", &t2s.geometry());
  LabelMap const labels{read_volume(c.labels)};
  Mask failed(valid.size());
  for (std::size_t v = 0; v < valid.size(); ++v) {
    failed[v] = valid[v] ? 0 : 1;
  }
  std::vector<OrganStats> const stats = organ_stats(t2s, failed, labels);
  std::vector<OrganStatsRow> rows;
  for (auto const &s : stats) {
    rows.push_back({c.case_id, c.ga_weeks, s});
  }
  {
    std::ofstream out(dir / "organ_stats.csv", std::ios::binary);
    write_organ_stats_csv(out, rows);
  }
  std::map<int, std::vector<double>> dyn;
  fs::path const dm = rd / "dynamic_organ_means.csv";
  if (fs::exists(dm)) {
    for (auto const &row : read_csv(dm)) {
      auto const label = organ_from_key(row.at("organ"));
      if (!label) {
        throw IntegrityError(fmt::format("'{}': unknown organ '{}'", dm.string(), row.at("organ")));
      }
      dyn[*label].push_back(to_double(row.at("t2s_mean"), dm));
    }
  }
  std::vector<ConsistencyRow> cons;
  int pass = 0;
  for (auto const &s : stats) {
    auto const it = dyn.find(s.label);
    if (s.t2s_mean && it != dyn.end() && it->second.size() >= 2) {
      cons.push_back({c.case_id, s.label, consistency_check(it->second, *s.t2s_mean)});
      pass += cons.back().result.pass ? 1 : 0;
    }
  }
  {
    std::ofstream out(dir / "consistency.csv", std::ios::binary);
    write_consistency_csv(out, cons);
  }
  return fmt::format("{} organs, {} of {} inside the 2-sigma band", stats.size(), pass, cons.size());
}

struct CohortPoint {
  int organ;
  double ga;
  std::optional<double> t2s;
  double volume;
};

std::vector<CohortPoint> read_cohort(fs::path const &p)
{
  std::vector<CohortPoint> out;
  for (auto const &row : read_csv(p)) {
    auto const label = organ_from_key(row.at("organ"));
    if (!label) {
      throw IntegrityError(fmt::format("'{}': unknown organ '{}'", p.string(), row.at("organ")));
    }
    CohortPoint pt{*label, to_double(row.at("GA"), p), std::nullopt, to_double(row.at("volume_ml"), p)};
    if (!row.at("t2s_mean").empty()) {
      pt.t2s = to_double(row.at("t2s_mean"), p);
    }
    out.push_back(pt);
  }
  return out;
}

std::string stage_growth(PipelineConfig const &c, fs::path const &dir)
{
  std::string merged;
  for (auto const &f : cohort_files(c)) {
    if (!fs::exists(f)) {
      throw ContractViolation(fmt::format("missing organ statistics '{}'; run the stats stage first", f.string()));
    }
    std::istringstream in(read_file(f));
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        if (merged.empty()) {
          merged = line + "\n";
        }
        header = false;
      } else if (!line.empty()) {
        merged += line + "\n";
      }
    }
  }
  write_file(dir / "cohort_stats.csv", merged);
  std::vector<CohortPoint> const pts = read_cohort(dir / "cohort_stats.csv");
  std::vector<GrowthCurve> curves;
  for (Organ o : kAllOrgans) {
    std::vector<std::pair<double, double>> t2, vol;
    for (auto const &p : pts) {
      if (p.organ == code(o)) {
        if (p.t2s) {
          t2.emplace_back(p.ga, *p.t2s);
        }
        if (p.volume > 0) {
          vol.emplace_back(p.ga, p.volume);
        }
      }
    }
    for (auto const &[metric, data] : {std::pair{"t2s_mean", &t2}, std::pair{"volume_ml", &vol}}) {
      if (data->size() < 3) {
        continue;
      }
      try {
        GrowthCurve g = fit_growth_curve(*data, code(o));
        g.metric = metric;
        curves.push_back(g);
      } catch (RegressionError const &) {
        // Every case at the same GA: no curve for this organ.
      }
    }
  }
  std::ofstream out(dir / "growth_curves.csv", std::ios::binary);
  write_growth_curves_csv(out, curves);
  return fmt::format("{} rows, {} curves", pts.size(), curves.size());
}

std::string stage_report(PipelineConfig const &c, fs::path const &dir)
{
  fs::path const gd = stage_dir(c, Stage::Growth);
  if (!fs::exists(gd / "cohort_stats.csv") || !fs::exists(gd / "growth_curves.csv")) {
    throw ConfigError(fmt::format("missing statistics in '{}'; run the stats and growth stages first", gd.string()));
  }
  std::vector<CohortPoint> const pts = read_cohort(gd / "cohort_stats.csv");
  std::map<std::pair<int, std::string>, GrowthCurve> curves;
  for (auto const &row : read_csv(gd / "growth_curves.csv")) {
    fs::path const p = gd / "growth_curves.csv";
    GrowthCurve g;
    auto const label = organ_from_key(row.at("organ"));
    if (!label) {
      throw IntegrityError(fmt::format("'{}': unknown organ '{}'", p.string(), row.at("organ")));
    }
    g.organ = *label;
    g.metric = row.at("metric");
    g.n = std::size_t(to_double(row.at("n"), p));
    g.slope = to_double(row.at("slope"), p);
    g.intercept = to_double(row.at("intercept"), p);
    g.r2 = to_double(row.at("r2"), p);
    g.pearson_r = to_double(row.at("pearson_r"), p);
    curves[{g.organ, g.metric}] = g;
  }
  int plots = 0;
  std::string md = "# T2* report\n\n## Growth curves\n\n";
  md += "| Organ | Metric | n | Slope (/week) | Intercept | r² | r |\n|---|---|---|---|---|---|---|\n";
  for (auto const &[key, g] : curves) {
    md += fmt::format("| {} | {} | {} | {:.6f} | {:.6f} | {:.6f} | {:.6f} |\n", organ_name(g.organ), g.metric, g.n,
                      g.slope, g.intercept, g.r2, g.pearson_r);
  }
  for (Organ o : kAllOrgans) {
    std::vector<std::pair<double, double>> t2, vol;
    for (auto const &p : pts) {
      if (p.organ == code(o)) {
        if (p.t2s) {
          t2.emplace_back(p.ga, *p.t2s);
        }
        vol.emplace_back(p.ga, p.volume);
      }
    }
    std::string const key(organ_key(code(o)));
    std::string const name(organ_name(code(o)));
    auto plot = [&](std::string const &metric, std::string const &file, std::string const &y_label,
                    std::vector<std::pair<double, double>> const &data) {
      if (data.empty()) {
        return;
      }
      auto const it = curves.find({code(o), metric});
      write_file(dir / file, growth_svg(name, y_label, data, it == curves.end() ? nullptr : &it->second));
      ++plots;
    };
    plot("t2s_mean", "t2s_vs_ga_" + key + ".svg", "Mean T2* (ms)", t2);
    plot("volume_ml", "volume_vs_ga_" + key + ".svg", "Volume (mL)", vol);
  }
  fs::path const cons = stage_dir(c, Stage::Stats) / "consistency.csv";
  if (fs::exists(cons)) {
    md += "\n## Consistency with the dynamics\n\n";
    md += "| Case | Organ | Dynamics | Mean | σ | Band | Reconstruction | Within 2σ |\n";
    md += "|---|---|---|---|---|---|---|---|\n";
    for (auto const &row : read_csv(cons)) {
      auto const label = organ_from_key(row.at("organ"));
      md += fmt::format("| {} | {} | {} | {} | {} | {}–{} | {} | {} |\n", row.at("case"),
                        label ? organ_name(*label) : row.at("organ"), row.at("n_dynamics"), row.at("mean"),
                        row.at("sigma"), row.at("band_lo"), row.at("band_hi"), row.at("recon_mean"),
                        row.at("pass") == "1" ? "yes" : "no");
    }
  }
  if (!c.reference_labels.empty()) {
    if (c.labels.empty()) {
      throw ConfigError("Dice needs both 'labels' and 'reference_labels'");
    }
    LabelMap const a{read_volume(c.labels)};
    LabelMap const b{read_volume(c.reference_labels)};
    std::string csv = "organ,dice\n";
    md += "\n## Dice similarity\n\n| Organ | DSC |\n|---|---|\n";
    for (Organ o : kAllOrgans) {
      double const d = dice(a, b, code(o));
      csv += fmt::format("{},{:.6f}\n", organ_key(code(o)), d);
      md += fmt::format("| {} | {:.4f} |\n", organ_name(code(o)), d);
    }
    write_file(dir / "dice.csv", csv);
  }
  write_file(dir / "tables.md", md);
  return fmt::format("{} plots", plots);
}

std::string read_stamp(fs::path const &dir)
{
  fs::path const p = dir / "stamp";
  if (!fs::exists(p)) {
    return {};
  }
  std::istringstream in(read_file(p));
  std::string hash, line;
  std::getline(in, hash);
  while (std::getline(in, line)) {
    if (!line.empty() && !fs::exists(dir / line)) {
      return {};
    }
  }
  return hash;
}

} // namespace

StageOutcome run_stage(PipelineConfig const &config, Stage stage, bool force)
{
  fs::path const dir = stage_dir(config, stage);
  StageOutcome out{stage, false, {}};
  try {
    config.validate();
    std::string const stamp = stage_stamp(config, stage);
    if (!force && read_stamp(dir) == stamp) {
      out.skipped = true;
      out.note = "up to date";
      return out;
    }
    fs::remove_all(dir);
    fs::create_directories(dir);
    switch (stage) {
    case Stage::Denoise:
      out.note = stage_denoise(config, dir);
      break;
    case Stage::Fit:
      out.note = stage_fit(config, dir);
      break;
    case Stage::Qc:
      out.note = stage_qc(config, dir);
      break;
    case Stage::Recon:
      out.note = stage_recon(config, dir);
      break;
    case Stage::Stats:
      out.note = stage_stats(config, dir);
      break;
    case Stage::Growth:
      out.note = stage_growth(config, dir);
      break;
    case Stage::Report:
      out.note = stage_report(config, dir);
      break;
    }
    std::string text = stamp + "\n";
    for (auto const &f : files_below(dir, true)) {
      text += f.generic_string() + "\n";
    }
    write_file(dir / "stamp", text);
  } catch (StageFailure const &) {
    throw;
  } catch (std::exception const &e) {
    throw StageFailure(stage, exit_code_for(e), e.what());
  }
  return out;
}

std::vector<StageOutcome> run_pipeline(PipelineConfig const &config, StageLog const &log)
{
  config.validate();
  if (config.threads > 0) {
    set_thread_count(config.threads);
  }
  std::vector<StageOutcome> out;
  auto run = [&](Stage s) {
    out.push_back(run_stage(config, s));
    if (log) {
      log(out.back());
    }
  };
  if (config.denoise) {
    run(Stage::Denoise);
  }
  run(Stage::Fit);
  run(Stage::Qc);
  run(Stage::Recon);
  if (!config.labels.empty()) {
    run(Stage::Stats);
  }
  bool have_stats = true;
  for (auto const &f : cohort_files(config)) {
    have_stats = have_stats && fs::exists(f);
  }
  if (have_stats) {
    run(Stage::Growth);
    run(Stage::Report);
  }
  return out;
}

} // namespace t2s
