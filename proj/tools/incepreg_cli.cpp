/******************************************************************************
 * Copyright 2026 The incepreg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * 	http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 *****************************************************************************/

// incepreg command line: synth, preprocess, affine, train, register,
// evaluate.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "incepreg/incepreg.hpp"

namespace fs = std::filesystem;
using namespace incepreg;

namespace {

void write_json(const Json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int cmd_synth(std::uint64_t seed, std::size_t size, const fs::path& out) {
  const auto sc = make_synthetic_case(seed, size);
  save_synthetic_case(sc, out);
  std::cout << "wrote synthetic case seed " << seed << " (" << size << "^3, " << sc.pre.landmarks.size()
            << " landmarks) to " << out.string() << '\n';
  return 0;
}

int cmd_preprocess(const fs::path& dir) {
  preprocess_case_dir(dir);
  std::cout << "wrote *_pp volumes to " << dir.string() << '\n';
  return 0;
}

int cmd_affine(const fs::path& dir, const fs::path& out, const fs::path& config) {
  AffineConfig cfg = config.empty() ? AffineConfig{} : load_config(config).affine;
  const CasePair c = load_case(dir);
  const AffineResult r = affine_register(c.moving, c.fixed, cfg);
  Json j;
  j["matrix"] = affine_to_json(r.transform);
  j["convention"] = "fixed-grid voxel p maps to moving-grid voxel linear*p + translation (row-major 3x4)";
  j["contrast"] = contrast_name(cfg.contrast);
  j["initial_mse"] = r.initial_mse;
  j["final_mse"] = r.final_mse;
  j["warning"] = r.warning;
  write_json(j, out);
  const fs::path vol_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  const auto warped = apply_affine(c.moving, r.transform);
  for (Contrast con : kFusionOrder)
    save_volume(warped.get(con), vol_dir / (std::string("pre_") + contrast_name(con) + "_affine.nii.gz"));
  if (r.warning) std::cerr << "warning: affine registration did not improve on identity; identity returned\n";
  std::cout << "affine mse " << r.initial_mse << " -> " << r.final_mse << ", wrote " << out.string() << '\n';
  return 0;
}

std::vector<CasePair> load_cases(const fs::path& data) {
  std::vector<CasePair> cases;
  for (const auto& d : case_dirs(data)) cases.push_back(load_case(d));
  return cases;
}

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out, const fs::path& resume) {
  const TrainConfig cfg = config.empty() ? TrainConfig{} : load_config(config);
  const auto cases = load_cases(data);
  fs::create_directories(out);
  std::ofstream log(out / "train.log.jsonl");
  TrainOptions opt;
  opt.log = &log;
  Checkpoint ck;
  if (resume.empty()) {
    ck = train(cfg, cases, opt);
  } else {
    Checkpoint start = load_checkpoint(resume);
    const long remaining = std::max<long>(start.config.total_steps() - static_cast<long>(start.step), 0);
    ck = train_from(std::move(start), cases, remaining, opt);
  }
  save_checkpoint(ck, out / kCheckpointFile);
  write_json(to_json(ck.config), out / "config.json");
  std::cout << "trained " << ck.step << " steps on " << cases.size() << " case(s); checkpoint "
            << (out / kCheckpointFile).string() << '\n';
  return 0;
}

int cmd_register(const fs::path& ckpt, const fs::path& dir, const fs::path& out) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const CasePair c = load_case(dir);
  const Registration r = register_case(ck, c);
  fs::create_directories(out);
  const Vec3& sp = c.fixed.t1.spacing();
  const Vec3& org = c.fixed.t1.origin();
  save_field(r.field, sp, org, out / "field.nii.gz");
  for (Contrast con : kFusionOrder)
    save_volume(r.warped.get(con), out / (std::string("warped_") + contrast_name(con) + ".nii.gz"));
  save_volume(r.fused_warped, out / "warped_fused.nii.gz");
  Json score = to_json(r.score);
  if (ck.config.affine_first) {
    score["affine"] = affine_to_json(r.affine);
    score["residual_median_ae"] = *r.residual_median_ae;
  }
  write_json(score, out / "score.json");
  std::cout << "case " << c.id << ": median AE " << r.score.initial_median_ae << " -> " << r.score.median_ae
            << " mm, robustness " << r.score.robustness << '\n';
  return 0;
}

int cmd_evaluate(const fs::path& ckpt, const fs::path& data, const fs::path& out) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const auto summary = evaluate_suite(ck, load_cases(data));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream csv(out);
  if (!csv) throw Error("cannot write " + out.string());
  write_suite_csv(summary, csv);
  fs::path js = out;
  js.replace_extension(".json");
  write_json(to_json(summary), js);
  std::cout << summary.cases.size() << " case(s): pooled median AE " << summary.pooled_median_ae
            << " mm, robustness " << summary.pooled_robustness << "; wrote " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"incepreg: multi-contrast deformable registration"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t size = 48;
  std::string out, case_dir, config, data, ckpt, resume;

  auto* synth = app.add_subcommand("synth", "write a synthetic case");
  synth->add_option("--seed", seed, "generator seed")->required();
  synth->add_option("--size", size, "grid size per axis (>= 32)")->required();
  synth->add_option("--out", out, "output case directory")->required();

  auto* pre = app.add_subcommand("preprocess", "z-normalise and histogram-match a case (writes *_pp files)");
  pre->add_option("--case", case_dir, "case directory")->required();

  auto* aff = app.add_subcommand("affine", "affine registration of a case");
  aff->add_option("--case", case_dir, "case directory")->required();
  aff->add_option("--out", out, "output JSON path")->required();
  aff->add_option("--config", config, "TOML config ([affine] section)");

  auto* tr = app.add_subcommand("train", "train the network");
  tr->add_option("--config", config, "TOML config")->required();
  tr->add_option("--data", data, "case directory or directory of cases")->required();
  tr->add_option("--out", out, "checkpoint directory")->required();
  tr->add_option("--resume", resume, "continue from a checkpoint");

  auto* reg = app.add_subcommand("register", "register one case with a checkpoint");
  reg->add_option("--ckpt", ckpt, "checkpoint file or directory")->required();
  reg->add_option("--case", case_dir, "case directory")->required();
  reg->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a set of cases");
  ev->add_option("--ckpt", ckpt, "checkpoint file or directory")->required();
  ev->add_option("--data", data, "case directory or directory of cases")->required();
  ev->add_option("--out", out, "output CSV path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(seed, size, out);
    if (*pre) return cmd_preprocess(case_dir);
    if (*aff) return cmd_affine(case_dir, out, config);
    if (*tr) return cmd_train(config, data, out, resume);
    if (*reg) return cmd_register(ckpt, case_dir, out);
    if (*ev) return cmd_evaluate(ckpt, data, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
