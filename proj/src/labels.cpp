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

#include "t2s/labels.hpp"

#include <string_view>

namespace t2s {

namespace {
constexpr std::array<std::string_view, kMaxLabel + 1> kNames{
    "Background", "Lungs",  "Liver",  "Stomach",     "Spleen",        "Kidney pelvis",
    "Kidney parenchyma", "Bladder", "Thymus", "Gallbladder", "Adrenal glands"};
constexpr std::array<std::string_view, kMaxLabel + 1> kKeys{
    "background", "lungs",  "liver",  "stomach",     "spleen",        "kidney_pelvis",
    "kidney_parenchyma", "bladder", "thymus", "gallbladder", "adrenal_glands"};
} // namespace

std::string_view organ_name(int label) { return is_valid_label(label) ? kNames[label] : "Unknown"; }

std::string_view organ_key(int label) { return is_valid_label(label) ? kKeys[label] : "unknown"; }

std::optional<int> organ_from_key(std::string_view key)
{
  for (int l = 1; l <= kMaxLabel; ++l) {
    if (kKeys[l] == key) {
      return l;
    }
  }
  return std::nullopt;
}

} // namespace t2s
