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
// t2s: command-line front end for the fetal T2* pipeline.

#include "t2s/parallel.hpp"
#include "t2s/pipeline.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <unistd.h>

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string input;
  std::string labels;
  unsigned threads = 0;
  std::optional<std::uint64_t> seed;
  bool skip_denoise = false;
  bool force = false;
  std::vector<int> keep;
  std::vector<int> drop;
};

bool use_color()
{
  return std::getenv("T2S_NO_COLOR") == nullptr && isatty(fileno(stdout)) && isatty(fileno(stderr));
}

std::string paint(std::string_view text, char const *code)
{
  return use_color() ? fmt::format("\x1b[{}m{}\x1b[0m", code, text) : std::string(text);
}

t2s::PipelineConfig make_config(Options const &o)
{
  t2s::PipelineConfig c = o.config.empty() ? t2s::PipelineConfig{} : t2s::load_config(o.config);
  if (!o.out.empty()) {
    c.output = o.out;
  }
  if (!o.input.empty()) {
    c.input = o.input;
  }
  if (!o.labels.empty()) {
    c.labels = o.labels;
  }
  if (o.threads > 0) {
    c.threads = o.threads;
  }
  if (o.seed) {
    c.seed = *o.seed;
  }
  if (o.skip_denoise) {
    c.denoise = false;
  }
  c.overrides.keep.insert(c.overrides.keep.end(), o.keep.begin(), o.keep.end());
  c.overrides.drop.insert(c.overrides.drop.end(), o.drop.begin(), o.drop.end());
  c.validate();
  if (c.threads > 0) {
    t2s::set_thread_count(c.threads);
  }
  return c;
}

void print_outcome(t2s::StageOutcome const &s)
{
  std::string const tag = s.skipped ? paint("skip", "33") : paint(" ok ", "32");
  fmt::print("[{}] {:<8} {}\n", tag, t2s::stage_name(s.stage), s.note);
  std::fflush(stdout);
}

} // namespace

int main(int argc, char **argv)
{
  CLI::App app{"Quantitative T2* reconstruction of the fetal body from multi-echo dynamic MRI"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App *sub) {
    sub->add_option("--config", o.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--input", o.input, "Echo series directory");
    sub->add_option("--labels", o.labels, "Label map (uint8 NIfTI)");
    sub->add_option("--threads", o.threads, "Worker thread cap (0 = all cores)");
    sub->add_option("--seed", o.seed, "Random seed");
    sub->add_flag("--skip-denoise", o.skip_denoise, "Fit the raw series instead of the denoised one");
    sub->add_option("--keep", o.keep, "Dynamics kept regardless of QC")->delimiter(',');
    sub->add_option("--drop", o.drop, "Dynamics dropped regardless of QC")->delimiter(',');
    sub->add_flag("--force", o.force, "Rerun even when the stage is up to date");
  };

  CLI::App *simulate = app.add_subcommand("simulate", "Write a phantom dataset with ground truth");
  common(simulate);
  std::vector<std::pair<CLI::App *, t2s::Stage>> stages;
  for (auto const &[name, stage, help] :
       {std::tuple{"denoise", t2s::Stage::Denoise, "MP-PCA denoising of the echo series"},
        std::tuple{"fit", t2s::Stage::Fit, "Per-dynamic T2* maps"},
        std::tuple{"qc", t2s::Stage::Qc, "Dynamic motion scoring and selection"},
        std::tuple{"recon", t2s::Stage::Recon, "Slice-to-volume reconstruction of structure and T2*"},
        std::tuple{"stats", t2s::Stage::Stats, "Organ statistics and 2-sigma consistency"},
        std::tuple{"growth", t2s::Stage::Growth, "Growth curves over a cohort of organ statistics"},
        std::tuple{"report", t2s::Stage::Report, "SVG plots and markdown tables"}}) {
    CLI::App *sub = app.add_subcommand(name, help);
    common(sub);
    stages.emplace_back(sub, stage);
  }
  CLI::App *run = app.add_subcommand("run", "Run every stage, skipping those already up to date");
  common(run);

  try {
    app.parse(argc, argv);
  } catch (CLI::ParseError const &e) {
    int const code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    t2s::PipelineConfig const config = make_config(o);
    if (simulate->parsed()) {
      t2s::SimulatedSeries const sim = t2s::simulate_dataset(config, config.output);
      fmt::print("[{}] simulate {} dynamics x {} echoes -> {}\n", paint(" ok ", "32"), sim.dynamics.size(),
                 config.tes_ms.size(), config.output.string());
      return 0;
    }
    if (run->parsed()) {
      t2s::run_pipeline(config, print_outcome);
      return 0;
    }
    for (auto const &[sub, stage] : stages) {
      if (sub->parsed()) {
        print_outcome(t2s::run_stage(config, stage, o.force));
      }
    }
    return 0;
  } catch (std::exception const &e) {
    std::cerr << paint("error", "31") << ": " << e.what() << "\n";
    return t2s::exit_code_for(e);
  }
}
