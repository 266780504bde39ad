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

#include "t2s/numeric.hpp"

#include "t2s/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace t2s {

double mean(std::span<double const> v)
{
  if (v.empty()) {
    return 0.0;
  }
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double sample_sd(std::span<double const> v)
{
  if (v.size() < 2) {
    return 0.0;
  }
  double const m = mean(v);
  double ss = 0.0;
  for (double x : v) {
    ss += (x - m) * (x - m);
  }
  return std::sqrt(ss / double(v.size() - 1));
}

double median(std::vector<double> v)
{
  if (v.empty()) {
    return 0.0;
  }
  std::size_t const mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  double const hi = v[mid];
  if (v.size() % 2 == 1) {
    return hi;
  }
  double const lo = *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid));
  return 0.5 * (lo + hi);
}

double ncc(std::span<double const> a, std::span<double const> b)
{
  if (a.size() != b.size()) {
    throw ContractViolation("ncc needs equally long inputs");
  }
  if (a.empty()) {
    return 0.0;
  }
  double const ma = mean(a);
  double const mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double const da = a[i] - ma;
    double const db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) {
    return 0.0;
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

} // namespace t2s
