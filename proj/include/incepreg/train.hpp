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

// Training loop, per-case registration and suite evaluation.

#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/affine.hpp"
#include "incepreg/backbone.hpp"
#include "incepreg/checkpoint.hpp"
#include "incepreg/config.hpp"
#include "incepreg/fusion.hpp"
#include "incepreg/io.hpp"
#include "incepreg/losses.hpp"
#include "incepreg/metrics.hpp"
#include "incepreg/preprocess.hpp"
#include "incepreg/synthetic.hpp"
#include "incepreg/warp.hpp"

namespace incepreg {

// A preprocessed registration pair: moving = pre-operative, fixed = post.
struct CasePair {
  std::string id;
  MultiContrastStudy moving, fixed;
};

// Per contrast: z-normalise both studies inside their own brain masks, then
// histogram-match the moving study onto the fixed one.
inline CasePair preprocess_pair(const std::string& id, const MultiContrastStudy& pre, const MultiContrastStudy& post) {
  pre.validate();
  post.validate();
  if (!pre.t1.same_grid(post.t1))
    throw std::invalid_argument("case " + id + ": pre " + pre.t1.shape().str() + " and post " + post.t1.shape().str() +
                                " grids differ");
  CasePair c{id, pre, post};
  for (Contrast con : kFusionOrder) {
    const BrainMask mm = brain_mask(pre.get(con)), fm = brain_mask(post.get(con));
    const Volume3D zf = znorm_brain(post.get(con), fm);
    const Volume3D zm = znorm_brain(pre.get(con), mm);
    c.moving.get(con) = histogram_match(zm, zf, mm, fm);
    c.fixed.get(con) = zf;
  }
  return c;
}

inline CasePair preprocess_pair(const SyntheticCase& sc) {
  return preprocess_pair("synth" + std::to_string(sc.seed), sc.pre, sc.post);
}

struct StepLog {
  long step = 0;  // 1-based
  double lr = 0;
  LossReport report;
};

inline std::string log_line(const StepLog& s) {
  Json j;
  j["step"] = s.step;
  j["l_mse"] = s.report.l_mse;
  j["l_diff"] = s.report.l_diff;
  j["l_edge"] = s.report.l_edge;
  j["l_total"] = s.report.l_total;
  return j.dump();
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(long step, const LossReport& r, const std::string& what)
      : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + what +
                           " (last report: " + log_line({step, 0, r}) + ")"),
        step_(step),
        report_(r) {}
  long step() const { return step_; }
  const LossReport& report() const { return report_; }

 private:
  long step_;
  LossReport report_;
};

struct TrainOptions {
  std::ostream* log = nullptr;                       // JSON lines
  std::function<void(const StepLog&)> on_step;       // called after every step
};

// Forward pass shared by training and inference. The moving study must
// already be affine-prewarped when the run uses affine_first.
template <class T>
struct Forward {
  Tensor<T> fused_moving, fused_fixed, field, warped, target;
};

template <class T>
Forward<T> forward_pass(const ModelParams<T>& p, const TrainConfig& cfg, const MultiContrastStudy& moving,
                        const MultiContrastStudy& fixed) {
  Forward<T> f;
  auto mv = study_tensors<T>(moving);
  auto fx = study_tensors<T>(fixed);
  f.fused_moving = fuse_contrasts(mv, p, "moving", cfg.fusion);
  f.fused_fixed = fuse_contrasts(fx, p, "target", cfg.fusion);
  f.field = backbone_forward(f.fused_moving, f.fused_fixed, p, cfg.backbone);
  if (cfg.loss_on_raw_contrasts) {
    f.warped = warp(ops::concat<T>({mv[0], mv[1], mv[2], mv[3]}), f.field);
    f.target = ops::concat<T>({fx[0], fx[1], fx[2], fx[3]});
  } else {
    f.warped = warp(f.fused_moving, f.field);
    f.target = f.fused_fixed;
  }
  return f;
}

namespace train_detail {

inline std::vector<std::size_t> epoch_order(std::uint64_t seed, long epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(epoch) + 1);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

inline bool finite(const LossReport& r) {
  return std::isfinite(r.l_mse) && std::isfinite(r.l_diff) && std::isfinite(r.l_edge) && std::isfinite(r.l_total);
}

}  // namespace train_detail

// Affine transforms for every case (moving -> fixed), cached by case id.
inline void ensure_affine_cache(Checkpoint& ck, const std::vector<CasePair>& cases) {
  for (const auto& c : cases)
    if (!ck.affine_cache.count(c.id))
      ck.affine_cache[c.id] = affine_register(c.moving, c.fixed, ck.config.affine).transform;
}

// Runs `steps` optimiser steps starting from `start` (batch size 1).
inline Checkpoint train_from(Checkpoint start, const std::vector<CasePair>& cases, long steps,
                             const TrainOptions& opt = {}) {
  using namespace train_detail;
  if (cases.empty()) throw std::invalid_argument("train: at least one case is required");
  Checkpoint ck = std::move(start);
  const TrainConfig& cfg = ck.config;
  cfg.validate();
  if (steps <= 0) return ck;

  std::vector<MultiContrastStudy> moving;
  if (cfg.affine_first) {
    ensure_affine_cache(ck, cases);
    for (const auto& c : cases) moving.push_back(apply_affine(c.moving, ck.affine_cache.at(c.id)));
  } else {
    for (const auto& c : cases) moving.push_back(c.moving);
  }

  Adam<float> adam(ck.params);
  adam.first_moments() = ck.adam_m;
  adam.second_moments() = ck.adam_v;
  adam.set_steps(ck.step);

  const long spe = std::max(cfg.steps_per_epoch, 1);
  long cached_epoch = -1;
  std::vector<std::size_t> order;
  LossReport last;
  for (long k = 0; k < steps; ++k) {
    const long s = static_cast<long>(ck.step);
    const long epoch = s / spe;
    if (epoch != cached_epoch) {
      order = epoch_order(cfg.seed, epoch, cases.size());
      cached_epoch = epoch;
    }
    const std::size_t ci = order[static_cast<std::size_t>(s % spe) % cases.size()];
    const double lr = cfg.lr_at(s);

    ck.params.zero_grad();
    auto f = forward_pass(ck.params, cfg, moving[ci], cases[ci].fixed);
    auto terms = total_loss(f.warped, f.target, f.field, cfg.loss);
    if (!finite(terms.report)) throw TrainingError(s + 1, terms.report, "non-finite loss");
    terms.total.backward();
    adam.step(ck.params, lr);
    if (!ck.params.all_finite()) throw TrainingError(s + 1, terms.report, "non-finite parameters after update");
    last = terms.report;
    ++ck.step;

    const StepLog entry{s + 1, lr, terms.report};
    if (opt.log) *opt.log << log_line(entry) << '\n' << std::flush;
    if (opt.on_step) opt.on_step(entry);
  }
  ck.adam_m = adam.first_moments();
  ck.adam_v = adam.second_moments();
  return ck;
}

inline Checkpoint train(const TrainConfig& cfg, const std::vector<CasePair>& cases, const TrainOptions& opt = {}) {
  return train_from(init_checkpoint(cfg), cases, cfg.total_steps(), opt);
}

// ---------------------------------------------------------------------------
// Registration and scoring

struct Registration {
  DisplacementField field;           // total field on the fixed grid
  DisplacementField deformable;      // network output alone
  AffineTransform affine;            // identity unless affine_first
  MultiContrastStudy warped;         // moving contrasts warped by `field`
  Volume3D fused_moving, fused_fixed, fused_warped;
  CaseScore score;
  std::optional<double> residual_median_ae;  // deformable stage only, affine_first runs
};

inline Registration register_case(const Checkpoint& ck, const CasePair& c) {
  const TrainConfig& cfg = ck.config;
  if (!c.moving.t1.same_grid(c.fixed.t1))
    throw std::invalid_argument("register: moving and fixed grids differ for case " + c.id);
  Registration r;
  MultiContrastStudy moving = c.moving;
  if (cfg.affine_first) {
    auto it = ck.affine_cache.find(c.id);
    r.affine = it != ck.affine_cache.end() ? it->second : affine_register(c.moving, c.fixed, cfg.affine).transform;
    moving = apply_affine(c.moving, r.affine);
  }
  auto f = forward_pass(ck.params, cfg, moving, c.fixed);
  r.deformable = to_field(f.field);
  r.field = cfg.affine_first ? compose_affine_after(r.affine, r.deformable) : r.deformable;
  r.warped = c.moving;
  for (Contrast con : kFusionOrder) r.warped.get(con) = warp(c.moving.get(con), r.field);
  r.fused_moving = to_volume(f.fused_moving, c.fixed.t1);
  r.fused_fixed = to_volume(f.fused_fixed, c.fixed.t1);
  r.fused_warped = to_volume(warp(f.fused_moving, f.field), c.fixed.t1);

  const Vec3& sp = c.fixed.t1.spacing();
  const Vec3& org = c.fixed.t1.origin();
  const DisplacementField zero(c.fixed.t1.shape());
  std::vector<int> ids;
  const auto before = landmark_errors(c.fixed.landmarks, c.moving.landmarks, zero, sp, org, &ids);
  const auto after = landmark_errors(c.fixed.landmarks, c.moving.landmarks, r.field, sp, org);
  r.score = summarize(before, after);
  r.score.case_id = c.id;
  r.score.landmark_ids = ids;
  r.score.neg_jacobian_fraction = neg_jacobian_fraction(jacobian_det(r.field));
  if (cfg.affine_first) {
    // Moving landmarks expressed in the affine-prewarped frame.
    const AffineTransform inv = r.affine.inverse();
    LandmarkSet pre;
    for (const auto& lm : c.moving.landmarks.entries)
      pre.entries.push_back({lm.id, voxel_to_world(inv.apply(world_to_voxel(lm.position, sp, org)), sp, org)});
    r.residual_median_ae = median(landmark_errors(c.fixed.landmarks, pre, r.deformable, sp, org));
  }
  return r;
}

struct SuiteSummary {
  std::vector<CaseScore> cases;
  double median_of_medians = 0;
  double pooled_median_ae = 0;
  double pooled_mean_ae = 0;
  double pooled_robustness = 0;
  double pooled_initial_median_ae = 0;
  double mean_neg_jacobian_fraction = 0;
};

inline SuiteSummary summarize_suite(std::vector<CaseScore> scores) {
  if (scores.empty()) throw std::invalid_argument("evaluate: at least one case is required");
  SuiteSummary s;
  std::vector<double> meds, before, after, jac;
  for (const auto& c : scores) {
    meds.push_back(c.median_ae);
    before.insert(before.end(), c.errors_before.begin(), c.errors_before.end());
    after.insert(after.end(), c.errors.begin(), c.errors.end());
    jac.push_back(c.neg_jacobian_fraction);
  }
  const CaseScore pooled = summarize(before, after);
  s.median_of_medians = median(meds);
  s.pooled_median_ae = pooled.median_ae;
  s.pooled_mean_ae = pooled.mean_ae;
  s.pooled_robustness = pooled.robustness;
  s.pooled_initial_median_ae = pooled.initial_median_ae;
  s.mean_neg_jacobian_fraction = mean(jac);
  s.cases = std::move(scores);
  return s;
}

inline SuiteSummary evaluate_suite(const Checkpoint& ck, const std::vector<CasePair>& cases) {
  std::vector<CaseScore> scores;
  for (const auto& c : cases) scores.push_back(register_case(ck, c).score);
  return summarize_suite(std::move(scores));
}

inline Json to_json(const CaseScore& s) {
  Json j;
  j["case"] = s.case_id;
  j["landmark_ids"] = s.landmark_ids;
  j["errors_before_mm"] = s.errors_before;
  j["errors_mm"] = s.errors;
  j["initial_median_ae"] = s.initial_median_ae;
  j["median_ae"] = s.median_ae;
  j["mean_ae"] = s.mean_ae;
  j["robustness"] = s.robustness;
  j["neg_jacobian_fraction"] = s.neg_jacobian_fraction;
  return j;
}

inline Json to_json(const SuiteSummary& s) {
  Json j;
  j["cases"] = Json::array();
  for (const auto& c : s.cases) j["cases"].push_back(to_json(c));
  j["summary"] = {{"median_of_medians_ae", s.median_of_medians},
                  {"pooled_median_ae", s.pooled_median_ae},
                  {"pooled_mean_ae", s.pooled_mean_ae},
                  {"pooled_robustness", s.pooled_robustness},
                  {"pooled_initial_median_ae", s.pooled_initial_median_ae},
                  {"mean_neg_jacobian_fraction", s.mean_neg_jacobian_fraction}};
  return j;
}

// Table-style CSV: one row per case, then the per-case-median summary and
// the pooled (all landmarks together) summary.
inline void write_suite_csv(const SuiteSummary& s, std::ostream& out) {
  out << "Case,Median Absolute Error (mm),Mean Absolute Error (mm),Robustness,Initial Median Absolute Error (mm),"
         "Negative Jacobian Fraction\n";
  auto row = [&](const std::string& name, double med, double mean_ae, double rob, double init, double jac) {
    out << name << ',' << detail::format_double(med) << ',' << detail::format_double(mean_ae) << ',' << detail::format_double(rob) << ','
        << detail::format_double(init) << ',' << detail::format_double(jac) << '\n';
  };
  std::vector<double> means, robs, inits;
  for (const auto& c : s.cases) {
    row(c.case_id, c.median_ae, c.mean_ae, c.robustness, c.initial_median_ae, c.neg_jacobian_fraction);
    means.push_back(c.mean_ae);
    robs.push_back(c.robustness);
    inits.push_back(c.initial_median_ae);
  }
  row("summary (median of per-case values)", s.median_of_medians, median(means), median(robs), median(inits),
      s.mean_neg_jacobian_fraction);
  row("summary (pooled landmarks)", s.pooled_median_ae, s.pooled_mean_ae, s.pooled_robustness,
      s.pooled_initial_median_ae, s.mean_neg_jacobian_fraction);
}

}  // namespace incepreg
