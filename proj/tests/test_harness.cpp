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

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "incepreg/case_io.hpp"
#include "incepreg/checkpoint.hpp"
#include "incepreg/config.hpp"
#include "incepreg/train.hpp"

using namespace incepreg;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(int steps = 3) {
  TrainConfig c;
  c.steps_per_epoch = steps;
  c.seed = 11;
  c.backbone.embed_dim = 8;
  c.backbone.depths = {1};
  c.backbone.heads = {2};
  c.backbone.decoder = {8, 8};
  c.backbone.mlp_ratio = 2;
  c.affine.iterations = 20;
  c.affine.levels = 2;
  return c;
}

const CasePair& toy_case() {
  static const CasePair c = preprocess_pair(make_synthetic_case(21, 32));
  return c;
}

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("incepreg_harness_" + tag + "_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(LrSchedule, StartsAtInitialAndNeverIncreases) {
  for (LrSchedule s : {LrSchedule::kPoly, LrSchedule::kConstant, LrSchedule::kExponential}) {
    TrainConfig c;
    c.lr_decay = s;
    c.steps_per_epoch = 50;
    c.epochs = 3;
    EXPECT_EQ(c.lr_at(0), 1e-4) << schedule_name(s);
    for (long k = 1; k <= c.total_steps() + 5; ++k) EXPECT_LE(c.lr_at(k), c.lr_at(k - 1)) << schedule_name(s);
    EXPECT_GE(c.lr_at(c.total_steps()), 0.0);
  }
  TrainConfig p;
  p.steps_per_epoch = 10;
  EXPECT_NEAR(p.lr_at(5), 1e-4 * std::pow(0.5, 0.9), 1e-18);
}

TEST(Train, ZeroStepsEqualsInit) {
  const auto cfg = tiny_config(0);
  const Checkpoint ck = train(cfg, {toy_case()});
  EXPECT_TRUE(ck == init_checkpoint(cfg));
  EXPECT_EQ(ck.step, 0u);
  EXPECT_THROW(train(cfg, {}), std::invalid_argument);
}

TEST(Train, DeterministicLogsAndCheckpoints) {
  const auto cfg = tiny_config(3);
  std::ostringstream log_a, log_b;
  TrainOptions oa, ob;
  oa.log = &log_a;
  ob.log = &log_b;
  const Checkpoint a = train(cfg, {toy_case()}, oa);
  const Checkpoint b = train(cfg, {toy_case()}, ob);
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  EXPECT_EQ(a.step, 3u);
  EXPECT_FALSE(a.params == init_checkpoint(cfg).params);

  // Log lines are JSON with the four loss terms.
  std::istringstream lines(log_a.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const Json j = Json::parse(line);
    EXPECT_EQ(j["step"].get<long>(), ++n);
    for (const char* k : {"l_mse", "l_diff", "l_edge", "l_total"}) EXPECT_TRUE(j.contains(k));
  }
  EXPECT_EQ(n, 3);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto cfg = tiny_config(4);
  const Checkpoint full = train(cfg, {toy_case()});
  const Checkpoint half = train_from(init_checkpoint(cfg), {toy_case()}, 2);
  const Checkpoint reloaded = deserialize_checkpoint(serialize_checkpoint(half));
  EXPECT_TRUE(reloaded == half);
  const Checkpoint resumed = train_from(reloaded, {toy_case()}, 2);
  EXPECT_EQ(serialize_checkpoint(resumed), serialize_checkpoint(full));
  // Zero extra steps leaves parameters untouched.
  EXPECT_TRUE(train_from(reloaded, {toy_case()}, 0) == reloaded);
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
  auto cfg = tiny_config(2);
  cfg.affine_first = true;
  const Checkpoint ck = train(cfg, {toy_case()});
  ASSERT_EQ(ck.affine_cache.count(toy_case().id), 1u);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(ck, dir / kCheckpointFile);
  const Checkpoint back = load_checkpoint(dir);  // directory form
  EXPECT_TRUE(back == ck);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
  const auto bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "INCPREG1");
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 4)), Error);
  EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), Error);
  fs::remove_all(dir);
}

TEST(Train, NonFiniteLossAborts) {
  CasePair bad = toy_case();
  bad.fixed.t2.data()[100] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(tiny_config(2), {bad});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Register, UntrainedCheckpointScoresInitialError) {
  const auto ck = init_checkpoint(tiny_config());
  const auto r = register_case(ck, toy_case());
  EXPECT_EQ(r.field.max_norm(), 0.0);
  EXPECT_EQ(r.score.errors, r.score.errors_before);
  EXPECT_EQ(r.score.median_ae, r.score.initial_median_ae);
  EXPECT_EQ(r.score.robustness, 0.0);
  EXPECT_FALSE(r.residual_median_ae.has_value());
}

TEST(Register, ComposedFieldMatchesSequentialMapping) {
  auto cfg = tiny_config(3);
  cfg.affine_first = true;
  cfg.lr_initial = 3e-3;
  const Checkpoint ck = train(cfg, {toy_case()});
  const auto& c = toy_case();
  const auto r = register_case(ck, c);
  ASSERT_GT(r.deformable.max_norm(), 1e-3);
  ASSERT_TRUE(r.residual_median_ae.has_value());
  const Vec3& sp = c.fixed.t1.spacing();
  const Vec3& org = c.fixed.t1.origin();
  std::size_t checked = 0;
  for (std::size_t k = 0; k < c.fixed.landmarks.size(); ++k) {
    const auto& fx = c.fixed.landmarks.entries[k];
    const auto& mv = c.moving.landmarks.entries[k];
    ASSERT_EQ(fx.id, mv.id);
    // Stage 1: deformable on the fixed grid; stage 2: the affine.
    const Vec3 p = world_to_voxel(fx.position, sp, org);
    const auto u = sample_field(r.deformable, p);
    ASSERT_TRUE(u.has_value());
    const Vec3 q = r.affine.apply(Vec3{p[0] + (*u)[0], p[1] + (*u)[1], p[2] + (*u)[2]});
    const double seq = distance(voxel_to_world(q, sp, org), mv.position);
    EXPECT_NEAR(r.score.errors[k], seq, 1e-4) << "landmark " << fx.id;
    ++checked;
  }
  EXPECT_GE(checked, 10u);
}

TEST(Config, TomlParsingAndErrors) {
  const auto c = parse_config_toml(R"(
[train]
steps_per_epoch = 12
lr_initial = 2e-4
lr_decay = "exponential"
seed = 5
affine_first = true
[loss]
w_edge = 0.5
[backbone]
variant = "conv"
window = [2, 4, 4]
[affine]
contrast = "t2"
)");
  EXPECT_EQ(c.steps_per_epoch, 12);
  EXPECT_EQ(c.lr_initial, 2e-4);
  EXPECT_EQ(c.lr_decay, LrSchedule::kExponential);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_TRUE(c.affine_first);
  EXPECT_EQ(c.loss.w_edge, 0.5);
  EXPECT_EQ(c.loss.w_mse, 1.0);
  EXPECT_EQ(c.backbone.variant, BackboneVariant::kConv);
  EXPECT_EQ(c.backbone.window, (Dims3{2, 4, 4}));
  EXPECT_EQ(c.affine.contrast, Contrast::T2);
  EXPECT_TRUE(config_from_json(to_json(c)) == c);

  EXPECT_THROW(parse_config_toml("[optimizer]\nlr = 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_config_toml("[train]\nlr_decay = \"cosine\"\n"), std::invalid_argument);
  EXPECT_THROW(parse_config_toml("[train]\nlr_initial = -1\n"), std::invalid_argument);
  EXPECT_THROW(parse_config_toml("[train\n"), std::invalid_argument);
}

#ifdef INCEPREG_SOURCE_DIR
TEST(Config, ShippedToyConfigMatchesDefaults) {
  const auto c = load_config(fs::path(INCEPREG_SOURCE_DIR) / "configs" / "toy.toml");
  TrainConfig expect;
  expect.loss_on_raw_contrasts = true;
  EXPECT_TRUE(c == expect);
}
#endif

TEST(Suite, SummariesAndCsv) {
  const auto ck = init_checkpoint(tiny_config());
  const auto one = evaluate_suite(ck, {toy_case()});
  ASSERT_EQ(one.cases.size(), 1u);
  EXPECT_EQ(one.pooled_median_ae, one.cases[0].median_ae);
  EXPECT_EQ(one.pooled_robustness, one.cases[0].robustness);
  EXPECT_EQ(one.median_of_medians, one.cases[0].median_ae);

  CaseScore s = summarize({4, 6, 8}, {1, 7, 3});
  s.case_id = "a";
  const auto two = summarize_suite({s, s});
  EXPECT_EQ(two.pooled_median_ae, s.median_ae);
  EXPECT_EQ(two.median_of_medians, s.median_ae);
  EXPECT_THROW(summarize_suite({}), std::invalid_argument);

  std::ostringstream csv;
  write_suite_csv(two, csv);
  std::istringstream in(csv.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header,
            "Case,Median Absolute Error (mm),Mean Absolute Error (mm),Robustness,Initial Median Absolute Error (mm),"
            "Negative Jacobian Fraction");
  int rows = 0;
  for (std::string l; std::getline(in, l);) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST(CaseIo, SyntheticCaseDirectoryRoundTrip) {
  const auto dir = temp_dir("case");
  const auto sc = make_synthetic_case(21, 32);
  save_synthetic_case(sc, dir);
  EXPECT_TRUE(is_case_dir(dir));
  EXPECT_FALSE(has_preprocessed(dir));
  const CasePair written = preprocess_case_dir(dir);
  EXPECT_TRUE(has_preprocessed(dir));
  const CasePair loaded = load_case(dir);
  for (Contrast con : kFusionOrder) {
    EXPECT_EQ(loaded.moving.get(con).data(), written.moving.get(con).data());
    EXPECT_EQ(loaded.fixed.get(con).data(), written.fixed.get(con).data());
  }
  EXPECT_EQ(loaded.fixed.landmarks.size(), sc.post.landmarks.size());
  EXPECT_EQ(case_dirs(dir), std::vector<fs::path>{dir});
  fs::remove_all(dir);
}
