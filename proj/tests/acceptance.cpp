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

// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. `acceptance --quick` skips the two training experiments.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>

#include "incepreg/incepreg.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace incepreg;
using incepreg::testing::grad_check;
using incepreg::testing::random_tensor;
using incepreg::testing::smooth_phantom;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void run(const char* name, double budget_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && secs > budget_s) o.check(false, "runtime " + fmt("%.1f", secs) + " s over " + fmt("%.0f", budget_s) + " s");
  if (!o.pass) ++failures;
  std::printf("%s  %-22s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::vector<double> vals(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

double rel(double a, double b) { return std::fabs(a - b) / std::max(std::fabs(b), 1e-300); }

// ---------------------------------------------------------------------------

Outcome kernel_fidelity() {
  // Slices index z, rows y, columns x.
  static constexpr double kSx[27] = {-1, 0, 1, -2, 0, 2, -1, 0, 1,   //
                                     -2, 0, 2, -4, 0, 4, -2, 0, 2,   //
                                     -1, 0, 1, -2, 0, 2, -1, 0, 1};
  static constexpr double kSy[27] = {-1, -2, -1, 0, 0, 0, 1, 2, 1,   //
                                     -2, -4, -2, 0, 0, 0, 2, 4, 2,   //
                                     -1, -2, -1, 0, 0, 0, 1, 2, 1};
  static constexpr double kSz[27] = {-1, -2, -1, -2, -4, -2, -1, -2, -1,  //
                                     0,  0,  0,  0,  0,  0,  0,  0,  0,   //
                                     1,  2,  1,  2,  4,  2,  1,  2,  1};
  Outcome o;
  const auto b = sobel_bank();
  int mismatches = 0;
  for (std::size_t i = 0; i < 27; ++i) mismatches += (b.sx[i] != kSx[i]) + (b.sy[i] != kSy[i]) + (b.sz[i] != kSz[i]);
  o.check(mismatches == 0, std::to_string(mismatches) + " kernel entries differ");
  o.check(b.sx[kernel_index(1, 0, 0)] == -2 && b.sx[kernel_index(1, 0, 2)] == 2, "row (-2,0,2)");
  o.check(b.sx[kernel_index(1, 1, 0)] == -4 && b.sx[kernel_index(1, 1, 2)] == 4, "centre row (-4,0,4)");
  const auto g = gaussian_kernel3();
  double s = 0;
  for (double w : g) s += w;
  o.check(std::fabs(s - 1.0) <= 1e-9, "gaussian sum " + fmt("%.3e", s));
  o.note(std::to_string(81 - mismatches) + "/81 sobel entries exact, gaussian sum-1 = " + fmt("%.1e", s - 1.0));
  return o;
}

Outcome edge_pipeline() {
  Outcome o;
  Volume3D c({10, 10, 10});
  for (auto& x : c.data()) x = 3.5f;
  const Volume3D ec = edge_map(c);
  float cmax = 0;
  for (float x : ec.data()) cmax = std::max(cmax, std::fabs(x));
  o.check(cmax == 0.0f, "constant input edge max " + fmt("%.3e", cmax));

  Rng rng(1);
  const auto v = random_tensor(rng, {1, 8, 9, 10}, -1, 1, false);
  const auto e = edge_map(v);
  double worst = 0;
  for (double shift : {-4.0, 7.5})
    for (double scale : {0.02, 1.0, 60.0}) {
      std::vector<double> wv(v.values().begin(), v.values().end());
      for (auto& x : wv) x = scale * x + shift;
      const auto ew = edge_map(Tensor<double>::from(v.shape(), wv));
      for (std::size_t i = 0; i < e.numel(); ++i) worst = std::max(worst, std::fabs(ew[i] - e[i]));
    }
  o.check(worst < 1e-5, "shift/scale invariance max diff " + fmt("%.2e", worst));

  const std::size_t n = 8;
  Volume3D r({n, n, n});
  for (std::size_t z = 0; z < n; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) r.at(x, y, z) = static_cast<float>(x);
  const Volume3D sx = sobel_response(r, 0);
  int off = 0;
  for (std::size_t z = 1; z + 1 < n; ++z)
    for (std::size_t y = 1; y + 1 < n; ++y)
      for (std::size_t x = 1; x + 1 < n; ++x) off += sx.at(x, y, z) != 32.0f;
  o.check(off == 0, std::to_string(off) + " interior ramp responses != 32");
  o.note("constant->0, invariance diff " + fmt("%.1e", worst) + ", ramp response 32 on all interior voxels");
  return o;
}

Outcome loss_correctness() {
  Outcome o;
  Rng rng(2);
  double worst = 0, worst_sum = 0;
  for (std::size_t n : {6, 7, 8}) {
    auto a = random_tensor(rng, {1, n, n, n}, -1, 1, false), b = random_tensor(rng, {1, n, n, n}, -1, 1, false);
    auto u = random_tensor(rng, {3, n, n, n}, -2, 2, false);
    oracle::Grid g{long(n), long(n), long(n)};
    const double m = oracle::mse(vals(a), vals(b)), d = oracle::diffusion(g, vals(u)),
                 e = oracle::edge_loss(g, vals(a), vals(b));
    worst = std::max({worst, rel(mse_loss(a, b).item(), m), rel(diffusion_loss(u).item(), d),
                      rel(edge_loss(a, b).item(), e)});
    const LossWeights w{0.7, 1.3, 2.1};
    const double t = total_loss(a, b, u, w).total.item();
    worst_sum = std::max(worst_sum, std::fabs(t - (w.w_mse * m + w.w_diff * d + w.w_edge * e)));
  }
  o.check(worst < 1e-10, "oracle rel err " + fmt("%.2e", worst));
  o.check(worst_sum < 1e-9, "weighted sum abs err " + fmt("%.2e", worst_sum));
  o.note("oracle rel err " + fmt("%.1e", worst) + ", weighted-sum abs err " + fmt("%.1e", worst_sum));
  return o;
}

template <class T>
void randomize_head(ModelParams<T>& p, std::uint64_t seed) {
  Rng rng(seed);
  for (const char* n : {"backbone.head.weight", "backbone.head.bias"})
    for (auto& v : p.at(n).mutable_values()) v = static_cast<T>(rng.uniform(-0.2, 0.2));
}

Outcome differentiability() {
  Outcome o;
  Rng rng(3);
  const std::size_t n = 6;
  std::ostringstream report;
  auto record = [&](const char* what, const incepreg::testing::GradCheck& r) {
    o.check(r.max_rel_err < 1e-3, std::string(what) + " rel err " + fmt("%.2e", r.max_rel_err) + " (" + r.worst + ")");
    report << what << ' ' << fmt("%.1e", r.max_rel_err) << ' ';
  };
  auto a = random_tensor(rng, {1, n, n, n}), b = random_tensor(rng, {1, n, n, n});
  auto u = random_tensor(rng, {3, n, n, n});
  record("mse", grad_check([&] { return mse_loss(a, b); }, {a, b}, 1e-5));
  record("diffusion", grad_check([&] { return diffusion_loss(u); }, {u}, 1e-5));
  record("edge", grad_check([&] { return edge_loss(a, b); }, {a, b}, 1e-5, 216));

  // Fractional sample offsets stay in [0.25, 0.75], away from lattice points.
  std::vector<double> fv(3 * n * n * n);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t z = 0; z < n; ++z)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const std::size_t pos[3] = {x, y, z};
          fv[((c * n + z) * n + y) * n + x] =
              0.5 + 0.25 * std::sin(0.7 * x + 0.4 * y + 0.9 * z + c) - (pos[c] == n - 1 ? 1.0 : 0.0);
        }
  auto field = Tensor<double>::from({3, n, n, n}, fv, true);
  auto target = random_tensor(rng, {1, n, n, n}, -1, 1, false);
  record("warp", grad_check([&] { return mse_loss(warp(a, field), target); }, {a, field}, 1e-6, 648));

  const FusionConfig fcfg;
  auto fp = init_fusion_params<double>(fcfg, 5);
  std::array<Tensor<double>, 4> in{random_tensor(rng, {1, n, n, n}), random_tensor(rng, {1, n, n, n}),
                                   random_tensor(rng, {1, n, n, n}), random_tensor(rng, {1, n, n, n})};
  std::vector<Tensor<double>> fin{in[0], in[1], in[2], in[3]};
  for (auto& [name, t] : fp.items()) fin.push_back(t);
  record("fusion", grad_check([&] { return ops::mean_square(fuse_contrasts(in, fp, "moving", fcfg)); }, fin, 1e-6, 8));

  BackboneConfig bcfg;
  bcfg.variant = BackboneVariant::kConv;
  bcfg.embed_dim = 4;
  bcfg.decoder = {6, 4, 4};
  auto bp = init_backbone_params<double>(bcfg, 7);
  randomize_head(bp, 8);
  auto m = random_tensor(rng, {1, 12, 12, 12}), f = random_tensor(rng, {1, 12, 12, 12});
  std::vector<Tensor<double>> bin{m, f};
  for (auto& [name, t] : bp.items()) bin.push_back(t);
  record("conv-backbone", grad_check([&] { return ops::mean(backbone_forward(m, f, bp, bcfg)); }, bin, 1e-6, 6));
  o.note("max rel err: " + report.str());
  return o;
}

Outcome warp_jacobian() {
  Outcome o;
  Rng rng(4);
  const GridShape s{9, 8, 7};
  const auto v = incepreg::testing::random_volume(rng, s, -3, 3);
  const Volume3D w = warp(v, DisplacementField(s));
  o.check(w.data() == v.data(), "zero-field warp is not bit-exact");

  Eigen::Matrix3d L;
  L << 1.08, 0.04, -0.03, 0.02, 0.95, 0.05, -0.01, 0.03, 1.02;
  AffineTransform a;
  a.linear = L;
  a.translation << 0.5, -1.0, 2.0;
  const Volume3D det = jacobian_det(affine_to_field(a, s));
  double worst = 0;
  for (std::size_t z = 1; z + 1 < s.nz; ++z)
    for (std::size_t y = 1; y + 1 < s.ny; ++y)
      for (std::size_t x = 1; x + 1 < s.nx; ++x) worst = std::max(worst, std::fabs(det.at(x, y, z) - L.determinant()));
  o.check(worst <= 1e-6, "affine det err " + fmt("%.2e", worst));
  const double frac = neg_jacobian_fraction(jacobian_det(DisplacementField(s)));
  o.check(frac == 0.0, "identity negative-jacobian fraction " + fmt("%.3f", frac));
  o.note("identity warp bit-exact, affine det err " + fmt("%.1e", worst) + ", identity folding 0");
  return o;
}

Outcome affine_recovery() {
  Outcome o;
  const auto moving = smooth_phantom(32);
  AffineTransform shift;
  shift.translation << 3.0, 0.0, 0.0;
  auto t0 = std::chrono::steady_clock::now();
  const auto rt = affine_register(moving, warp(moving, affine_to_field(shift, moving.shape())));
  const double t_trans = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double terr = (rt.transform.translation - shift.translation).norm();
  o.check(terr <= 0.3, "translation error " + fmt("%.3f", terr) + " voxel");

  const Eigen::Vector3d c(15.5, 15.5, 15.5);
  AffineTransform scale;
  scale.linear = 1.1 * Eigen::Matrix3d::Identity();
  scale.translation = c - scale.linear * c;
  t0 = std::chrono::steady_clock::now();
  const auto rs = affine_register(moving, warp(moving, affine_to_field(scale, moving.shape())));
  const double t_scale = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double serr = (rs.transform.linear - scale.linear).norm() / scale.linear.norm();
  o.check(serr <= 0.02, "scaling Frobenius error " + fmt("%.4f", serr));
  o.check(std::max(t_trans, t_scale) < 120, "per-case runtime over 2 min");
  o.note("translation err " + fmt("%.3f", terr) + " voxel, scaling rel err " + fmt("%.4f", serr) + ", slowest case " +
         fmt("%.1f", std::max(t_trans, t_scale)) + " s");
  return o;
}

// 48^3, 300 steps, default network, loss on the four raw contrasts.
Outcome toy_end_to_end() {
  Outcome o;
  const CasePair c = preprocess_pair(make_synthetic_case(1, 48));
  TrainConfig cfg;
  cfg.steps_per_epoch = 300;
  cfg.loss_on_raw_contrasts = true;
  double first = 0, last = 0;
  TrainOptions opt;
  opt.on_step = [&](const StepLog& s) {
    if (s.step == 1) first = s.report.l_total;
    last = s.report.l_total;
  };
  const Checkpoint ck = train(cfg, {c}, opt);
  const auto r = register_case(ck, c);
  const double loss_drop = 1.0 - last / first;
  const double ae_drop = 1.0 - r.score.median_ae / r.score.initial_median_ae;
  o.check(loss_drop >= 0.5, "l_total drop " + fmt("%.3f", loss_drop));
  o.check(ae_drop >= 0.3, "median AE drop " + fmt("%.3f", ae_drop));
  o.note("l_total " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " (-" + fmt("%.0f", 100 * loss_drop) +
         "%), median AE " + fmt("%.3f", r.score.initial_median_ae) + " -> " + fmt("%.3f", r.score.median_ae) +
         " mm (-" + fmt("%.0f", 100 * ae_drop) + "%), folding " + fmt("%.4f", r.score.neg_jacobian_fraction));
  return o;
}

// One model per trial, trained jointly on five synthetic cases.
Outcome ordering() {
  Outcome o;
  std::vector<CasePair> cases;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    CasePair c = preprocess_pair(make_synthetic_case(100 + s, 32));
    c.id = "seed" + std::to_string(100 + s);
    cases.push_back(std::move(c));
  }
  double pooled[2] = {0, 0}, initial = 0;
  for (int with_affine = 0; with_affine < 2; ++with_affine) {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.steps_per_epoch = 300;
    cfg.loss_on_raw_contrasts = true;
    cfg.affine_first = with_affine == 1;
    const auto summary = evaluate_suite(train(cfg, cases), cases);
    pooled[with_affine] = summary.pooled_median_ae;
    initial = summary.pooled_initial_median_ae;
  }
  o.check(pooled[1] <= pooled[0], "with-affine pooled median AE exceeds without-affine");
  o.note("pooled median AE: initial " + fmt("%.3f", initial) + ", without affine " + fmt("%.3f", pooled[0]) +
         ", with affine " + fmt("%.3f", pooled[1]) + " mm");
  return o;
}

Outcome determinism() {
  Outcome o;
  const CasePair c = preprocess_pair(make_synthetic_case(21, 32));
  TrainConfig cfg;
  cfg.steps_per_epoch = 3;
  cfg.seed = 4;
  cfg.backbone.embed_dim = 8;
  cfg.backbone.depths = {1};
  cfg.backbone.heads = {2};
  cfg.backbone.decoder = {8, 8};
  std::ostringstream la, lb;
  TrainOptions oa, ob;
  oa.log = &la;
  ob.log = &lb;
  const Checkpoint a = train(cfg, {c}, oa);
  const Checkpoint b = train(cfg, {c}, ob);
  const std::string sa = serialize_checkpoint(a);
  o.check(sa == serialize_checkpoint(b), "checkpoints differ between identical runs");
  o.check(la.str() == lb.str() && !la.str().empty(), "training logs differ between identical runs");
  o.check(serialize_checkpoint(deserialize_checkpoint(sa)) == sa && deserialize_checkpoint(sa) == a,
          "checkpoint round trip is not bit-exact");
  o.note("two runs: " + std::to_string(sa.size()) + "-byte checkpoints and logs identical, round trip bit-exact");
  return o;
}

Outcome metric_units() {
  Outcome o;
  const GridShape s{12, 12, 12};
  LandmarkSet fixed, moving;
  fixed.entries.push_back({1, {2, 2, 2}});
  moving.entries.push_back({1, {5, 6, 2}});
  const auto e = landmark_errors(fixed, moving, DisplacementField(s), {1, 1, 1}, {0, 0, 0});
  o.check(e.size() == 1 && e[0] == 5.0, "3-4-5 error " + fmt("%.6f", e.empty() ? -1.0 : e[0]));
  const double r0 = summarize({2, 4}, {2, 4}).robustness;
  const double r1 = summarize({2, 4}, {1, 2}).robustness;
  const double rh = summarize({5, 5}, {1, 9}).robustness;
  o.check(r0 == 0.0, "unchanged errors robustness " + fmt("%.3f", r0));
  o.check(r1 == 1.0, "all-improved robustness " + fmt("%.3f", r1));
  o.check(rh == 0.5, "half-improved robustness " + fmt("%.3f", rh));
  o.note("3-4-5 -> " + fmt("%.1f", e.empty() ? -1.0 : e[0]) + " mm, robustness {" + fmt("%.1f", r0) + ", " +
         fmt("%.1f", rh) + ", " + fmt("%.1f", r1) + "}");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::strcmp(argv[1], "--quick") == 0;
  run("kernel-fidelity", 1, kernel_fidelity);
  run("edge-pipeline", 10, edge_pipeline);
  run("loss-correctness", 0, loss_correctness);
  run("differentiability", 300, differentiability);
  run("warp-jacobian", 0, warp_jacobian);
  run("affine-recovery", 0, affine_recovery);
  if (!quick) {
    run("toy-end-to-end", 7200, toy_end_to_end);
    run("affine-ordering", 0, ordering);
  }
  run("determinism", 0, determinism);
  run("metric-units", 0, metric_units);
  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
