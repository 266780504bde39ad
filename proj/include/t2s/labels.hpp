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

#include <array>
#include <optional>
#include <string_view>

namespace t2s {

// Ten-organ segmentation codes; 0 is background.
enum class Organ : int {
  Lungs = 1,
  Liver = 2,
  Stomach = 3,
  Spleen = 4,
  KidneyPelvis = 5,
  KidneyParenchyma = 6,
  Bladder = 7,
  Thymus = 8,
  Gallbladder = 9,
  AdrenalGlands = 10,
};

inline constexpr int kOrganCount = 10;
inline constexpr int kMaxLabel = 10;

inline constexpr std::array<Organ, kOrganCount> kAllOrgans{
    Organ::Lungs,        Organ::Liver,   Organ::Stomach, Organ::Spleen,      Organ::KidneyPelvis,
    Organ::KidneyParenchyma, Organ::Bladder, Organ::Thymus, Organ::Gallbladder, Organ::AdrenalGlands};

constexpr int code(Organ o) { return static_cast<int>(o); }

// Display name ("Kidney parenchyma") and identifier ("kidney_parenchyma").
std::string_view organ_name(int label);
std::string_view organ_key(int label);
std::optional<int> organ_from_key(std::string_view key);

inline bool is_valid_label(int label) { return label >= 0 && label <= kMaxLabel; }

} // namespace t2s
