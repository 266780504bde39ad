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

#include "t2s/error.hpp"
#include "t2s/labels.hpp"
#include "t2s/numeric.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <fmt/ostream.h>

#include <cmath>
#include <limits>

namespace t2s {

void LabelMap::validate() const
{
  for (double v : grid.data()) {
    if (v != std::round(v) || !is_valid_label(int(v))) {
      throw ContractViolation(fmt::format("label map holds invalid code {}", v));
    }
  }
}

std::size_t LabelMap::count(int label) const
{
  std::size_t n = 0;
  for (double v : grid.data()) {
    n += int(v) == label ? 1 : 0;
  }
  return n;
}

double dice(LabelMap const &a, LabelMap const &b, int label)
{
  if (!a.grid.geometry().same_as(b.grid.geometry())) {
    throw ContractViolation("dice needs label maps on the same grid");
  }
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.grid.size(); ++i) {
    bool const ia = int(a.grid[i]) == label;
    bool const ib = int(b.grid[i]) == label;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na == 0 && nb == 0) {
    return 1.0;
  }
  return 2.0 * double(both) / double(na + nb);
}

std::vector<OrganStats> organ_stats(VoxelGrid const &t2s, Mask const &failed, LabelMap const &labels)
{
  if (!t2s.geometry().same_as(labels.grid.geometry()) || (!failed.empty() && failed.size() != t2s.size())) {
    throw ContractViolation("organ statistics need T2*, failure mask and labels on one grid");
  }
  double const voxel_ml = t2s.geometry().voxel_volume_mm3() / 1000.0;
  std::vector<std::vector<double>> values(std::size_t(kMaxLabel) + 1);
  std::vector<OrganStats> out;
  for (Organ o : kAllOrgans) {
    OrganStats s;
    s.label = code(o);
    out.push_back(s);
  }
  for (std::size_t i = 0; i < t2s.size(); ++i) {
    int const l = int(labels.grid[i]);
    if (l < 1 || l > kMaxLabel) {
      continue;
    }
    OrganStats &s = out[std::size_t(l - 1)];
    ++s.voxel_count;
    if (!failed.empty() && failed[i]) {
      ++s.excluded_failed;
    } else {
      values[std::size_t(l)].push_back(t2s[i]);
    }
  }
  for (auto &s : out) {
    auto const &v = values[std::size_t(s.label)];
    s.n = v.size();
    s.volume_ml = double(s.voxel_count) * voxel_ml;
    if (!v.empty()) {
      s.t2s_mean = mean(v);
      s.t2s_sd = sample_sd(v);
    }
  }
  return out;
}

ConsistencyResult consistency_check(std::span<double const> dynamic_means, double recon_mean)
{
  if (dynamic_means.size() < 2) {
    throw ContractViolation("consistency check needs at least two dynamic means");
  }
  ConsistencyResult r;
  r.dynamic_means.assign(dynamic_means.begin(), dynamic_means.end());
  r.mean = mean(dynamic_means);
  r.sigma = sample_sd(dynamic_means);
  r.band_lo = r.mean - 2.0 * r.sigma;
  r.band_hi = r.mean + 2.0 * r.sigma;
  r.recon_mean = recon_mean;
  r.pass = recon_mean >= r.band_lo && recon_mean <= r.band_hi;
  return r;
}

ConsistencyResult consistency_from_band(double mean_value, double band_lo, double band_hi, double recon_mean)
{
  if (!(band_lo <= band_hi)) {
    throw ContractViolation("consistency band must satisfy lo <= hi");
  }
  ConsistencyResult r;
  r.mean = mean_value;
  r.sigma = (band_hi - band_lo) / 4.0;
  r.band_lo = band_lo;
  r.band_hi = band_hi;
  r.recon_mean = recon_mean;
  r.pass = recon_mean >= band_lo && recon_mean <= band_hi;
  return r;
}

GrowthCurve fit_growth_curve(std::vector<std::pair<double, double>> const &points, int organ)
{
  if (points.size() < 3) {
    throw RegressionError(fmt::format("growth curve needs at least 3 points, got {}", points.size()));
  }
  double const n = double(points.size());
  double mx = 0.0, my = 0.0;
  for (auto const &[x, y] : points) {
    mx += x;
    my += y;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (auto const &[x, y] : points) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  if (sxx <= 1e-12 * std::max(1.0, mx * mx)) {
    throw RegressionError("gestational ages are all equal; slope undefined");
  }
  GrowthCurve g;
  g.organ = organ;
  g.n = points.size();
  g.slope = sxy / sxx;
  g.intercept = my - g.slope * mx;
  g.pearson_r = syy > 0.0 ? std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0) : 0.0;
  g.r2 = g.pearson_r * g.pearson_r;
  return g;
}

WelchResult welch_t_test(std::span<double const> a, std::span<double const> b)
{
  if (a.size() < 2 || b.size() < 2) {
    throw ContractViolation("Welch t-test needs at least two values per sample");
  }
  double const na = double(a.size());
  double const nb = double(b.size());
  double const ma = mean(a);
  double const mb = mean(b);
  double const va = std::pow(sample_sd(a), 2);
  double const vb = std::pow(sample_sd(b), 2);
  double const qa = va / na;
  double const qb = vb / nb;
  WelchResult r;
  if (qa + qb <= 0.0) {
    // Degenerate by construction: equal means are indistinguishable, any
    // difference is certain.
    r.dof = na + nb - 2.0;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.dof = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  boost::math::students_t dist(r.dof);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

namespace {

std::string opt(std::optional<double> v) { return v ? fmt::format("{:.4f}", *v) : std::string(); }

} // namespace

void write_organ_stats_csv(std::ostream &out, std::vector<OrganStatsRow> const &rows)
{
  fmt::print(out, "case,GA,organ,n,volume_ml,t2s_mean,t2s_sd\n");
  for (auto const &r : rows) {
    fmt::print(out, "{},{:.2f},{},{},{:.4f},{},{}\n", r.case_id, r.ga_weeks, organ_key(r.stats.label),
               r.stats.n, r.stats.volume_ml, opt(r.stats.t2s_mean), opt(r.stats.t2s_sd));
  }
}

void write_growth_curves_csv(std::ostream &out, std::vector<GrowthCurve> const &curves)
{
  fmt::print(out, "organ,metric,n,slope,intercept,r2,pearson_r\n");
  for (auto const &g : curves) {
    fmt::print(out, "{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", organ_key(g.organ), g.metric, g.n, g.slope,
               g.intercept, g.r2, g.pearson_r);
  }
}

void write_consistency_csv(std::ostream &out, std::vector<ConsistencyRow> const &rows)
{
  fmt::print(out, "case,organ,n_dynamics,mean,sigma,band_lo,band_hi,recon_mean,pass\n");
  for (auto const &r : rows) {
    fmt::print(out, "{},{},{},{:.4f},{:.4f},{:.4f},{:.4f},{:.4f},{}\n", r.case_id, organ_key(r.organ),
               r.result.dynamic_means.size(), r.result.mean, r.result.sigma, r.result.band_lo, r.result.band_hi,
               r.result.recon_mean, r.result.pass ? 1 : 0);
  }
}

} // namespace t2s
