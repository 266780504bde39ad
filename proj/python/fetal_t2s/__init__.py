# fetal-t2s : quantitative T2* fetal body reconstruction toolkit
#
# Copyright 2026 The fetal-t2s Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Quantitative fetal-body T2* reconstruction toolkit.

Volumes are numpy arrays indexed (x, y, z).
"""

from ._core import (
    ConfigError,
    ContractViolation,
    Error,
    config_json,
    consistency_check,
    default_echo_times,
    dice,
    fit_echoes,
    fit_growth_curve,
    fit_voxel,
    make_phantom,
    mp_threshold,
    mppca_denoise,
    read_volume,
    run_pipeline,
    set_thread_count,
    simulate,
    welch_t_test,
    write_volume,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "Error",
    "config_json",
    "consistency_check",
    "default_echo_times",
    "dice",
    "fit_echoes",
    "fit_growth_curve",
    "fit_voxel",
    "make_phantom",
    "mp_threshold",
    "mppca_denoise",
    "read_volume",
    "run_pipeline",
    "set_thread_count",
    "simulate",
    "welch_t_test",
    "write_volume",
]
__version__ = "0.1.0"
