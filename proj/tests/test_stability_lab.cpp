// Copyright 2026 The mergelab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>

#include "mergelab/stability_lab.hpp"

using namespace mergelab;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<TaskEnvironment> ls_family(int tasks, int n, int p, double noise,
                                       double het, std::uint64_t seed) {
  TaskFamilyConfig cfg;
  cfg.family = Family::kLeastSquares;
  cfg.num_tasks = tasks;
  cfg.feature_dim = p;
  cfg.sizes.assign(static_cast<std::size_t>(tasks), n);
  cfg.het_knob = het;
  cfg.noise_scale = noise;
  cfg.seed = seed;
  return gen_task_family(cfg);
}

FinetuneConfig quick_cfg(int steps, int batch, double eta, std::uint64_t seed) {
  FinetuneConfig cfg;
  cfg.steps = steps;
  cfg.batch = batch;
  cfg.schedule = Schedule::constant(eta);
  cfg.seed = seed;
  return cfg;
}

// Exact least-squares minimizer of the joint risk over envs with equal sizes:
// solve (sum phi phi^T) x = sum phi y over the concatenated datasets.
ParamVector normal_equations(std::span<const TaskEnvironment> envs) {
  const auto p = static_cast<Eigen::Index>(envs.front().feature_dim());
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
  for (const auto& env : envs) {
    for (const auto& s : env.dataset()) {
      Eigen::Map<const Eigen::VectorXd> phi(s.features.data(), p);
      gram += phi * phi.transpose();
      rhs += phi * s.target;
    }
  }
  const Eigen::VectorXd sol = gram.ldlt().solve(rhs);
  return ParamVector(std::vector<double>(sol.data(), sol.data() + p));
}

}  // namespace

TEST_CASE("null perturbations produce exactly zero drift") {
  const auto envs = ls_family(3, 24, 4, 0.3, 0.2, 0x51AB);
  const ParamVector x0 = ParamVector::zeros(4);
  const FinetuneConfig cfg = quick_cfg(25, 4, 0.02, 0x11);

  StabilityOptions opts;
  opts.replicates = 6;
  opts.seed = 42;
  opts.force_null = true;

  SECTION("single task") {
    const StabilityEstimate est =
        empirical_local_stability(envs[0], x0, cfg, opts);
    CHECK(est.eps_sq == 0.0);
    CHECK(est.ci_halfwidth == 0.0);
    CHECK(est.replicates == 6);
    REQUIRE(est.per_task.size() == 1);
    CHECK(est.per_task[0] == 0.0);
    REQUIRE(est.per_task_samples.size() == 1);
    REQUIRE(est.per_task_samples[0].size() == 6);
    for (double v : est.per_task_samples[0]) CHECK(v == 0.0);
  }

  SECTION("merged output") {
    const std::vector<FinetuneConfig> cfgs(3, cfg);
    const StabilityEstimate est =
        empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts);
    CHECK(est.eps_sq == 0.0);
    CHECK(est.ci_halfwidth == 0.0);
    REQUIRE(est.per_task_samples.size() == 3);
    for (const auto& task : est.per_task_samples) {
      REQUIRE(task.size() == 6);
      for (double v : task) CHECK(v == 0.0);
    }
    CHECK(est.cache_clean);
    // N tasks, each replicate reuses the other N-1 cached runs.
    CHECK(est.cache_checks == static_cast<std::size_t>(3 * 6 * 2));
  }
}

TEST_CASE("uniform merge drift equals single-task drift over N squared") {
  // Uniform averaging is linear, so swapping one expert moves the merge by
  // exactly 1/N of the expert's own drift. Replicate streams are keyed on
  // (seed, task, replicate), so the local runs see the same perturbations.
  const int kTasks = 4;
  const auto envs = ls_family(kTasks, 32, 4, 0.25, 0.3, 0xFADE);
  const ParamVector x0 = ParamVector::zeros(4);
  const FinetuneConfig cfg = quick_cfg(30, 4, 0.02, 0x77);
  const std::vector<FinetuneConfig> cfgs(kTasks, cfg);

  StabilityOptions opts;
  opts.replicates = 5;
  opts.seed = 0xAB;

  const StabilityEstimate global =
      empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts);
  REQUIRE(global.per_task_samples.size() == kTasks);

  for (int i = 0; i < kTasks; ++i) {
    const StabilityEstimate local =
        empirical_local_stability(envs[i], x0, cfgs[i], opts);
    REQUIRE(local.per_task_samples[0].size() == 5);
    for (int r = 0; r < 5; ++r) {
      const double expected =
          local.per_task_samples[0][static_cast<std::size_t>(r)] /
          (kTasks * kTasks);
      CHECK(global.per_task_samples[static_cast<std::size_t>(i)]
                                   [static_cast<std::size_t>(r)] ==
            Catch::Approx(expected).epsilon(1e-8).margin(1e-24));
    }
  }
}

TEST_CASE("stability estimates are reproducible and seed sensitive") {
  const auto envs = ls_family(2, 20, 3, 0.4, 0.2, 0xBEE);
  const ParamVector x0 = ParamVector::zeros(3);
  const std::vector<FinetuneConfig> cfgs(2, quick_cfg(20, 3, 0.02, 0x5));

  StabilityOptions opts;
  opts.replicates = 5;
  opts.seed = 1;

  const StabilityEstimate a =
      empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts);
  const StabilityEstimate b =
      empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts);
  CHECK(a.eps_sq == b.eps_sq);
  CHECK(a.ci_halfwidth == b.ci_halfwidth);
  CHECK(a.per_task == b.per_task);
  CHECK(a.per_task_samples == b.per_task_samples);
  CHECK(a.cache_checks == b.cache_checks);

  StabilityOptions other = opts;
  other.seed = 2;
  const StabilityEstimate c =
      empirical_global_stability(envs, x0, cfgs, MergeSpec{}, other);
  CHECK(a.eps_sq != c.eps_sq);
}

TEST_CASE("fixed index honors the used data prefix") {
  const auto envs = ls_family(1, 32, 4, 0.3, 0.0, 0xC0DE);
  const ParamVector x0 = ParamVector::zeros(4);

  StabilityOptions opts;
  opts.replicates = 2;
  opts.seed = 9;

  SECTION("full dataset bounds") {
    FinetuneConfig cfg = quick_cfg(10, 4, 0.02, 0x3);
    opts.fixed_index = 31;
    CHECK_NOTHROW(empirical_local_stability(envs[0], x0, cfg, opts));
    opts.fixed_index = 32;
    CHECK_THROWS_WITH(empirical_local_stability(envs[0], x0, cfg, opts),
                      ContainsSubstring("fixed index outside the used prefix"));
  }

  SECTION("data_ratio shrinks the admissible range") {
    FinetuneConfig cfg = quick_cfg(10, 4, 0.02, 0x3);
    cfg.data_ratio = 0.5;  // 16 usable rows
    opts.fixed_index = 15;
    CHECK_NOTHROW(empirical_local_stability(envs[0], x0, cfg, opts));
    opts.fixed_index = 16;
    CHECK_THROWS_WITH(empirical_local_stability(envs[0], x0, cfg, opts),
                      ContainsSubstring("fixed index outside the used prefix"));
  }
}

TEST_CASE("stability input validation") {
  const auto envs = ls_family(2, 16, 3, 0.2, 0.0, 0xD1);
  const ParamVector x0 = ParamVector::zeros(3);
  const FinetuneConfig cfg = quick_cfg(5, 2, 0.02, 0x1);

  StabilityOptions opts;
  opts.replicates = 0;
  CHECK_THROWS_WITH(empirical_local_stability(envs[0], x0, cfg, opts),
                    ContainsSubstring("replicates must be >= 1"));

  const std::vector<FinetuneConfig> cfgs(2, cfg);
  CHECK_THROWS_WITH(
      empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts),
      ContainsSubstring("replicates must be >= 1"));

  opts.replicates = 2;
  const std::vector<FinetuneConfig> short_cfgs(1, cfg);
  CHECK_THROWS_WITH(
      empirical_global_stability(envs, x0, short_cfgs, MergeSpec{}, opts),
      ContainsSubstring("one training config per task"));

  const std::vector<TaskEnvironment> none;
  CHECK_THROWS_WITH(
      empirical_global_stability(none, x0, cfgs, MergeSpec{}, opts),
      ContainsSubstring("no tasks"));
}

TEST_CASE("bootstrap interval degenerates with one replicate") {
  const auto envs = ls_family(1, 24, 4, 0.4, 0.0, 0xF00);
  const ParamVector x0 = ParamVector::zeros(4);
  const FinetuneConfig cfg = quick_cfg(25, 4, 0.02, 0x21);

  StabilityOptions opts;
  opts.seed = 13;

  SECTION("single replicate") {
    opts.replicates = 1;
    const StabilityEstimate est =
        empirical_local_stability(envs[0], x0, cfg, opts);
    CHECK(est.ci_halfwidth == 0.0);
  }

  SECTION("spread across replicates widens the interval") {
    opts.replicates = 12;
    const StabilityEstimate est =
        empirical_local_stability(envs[0], x0, cfg, opts);
    CHECK(std::isfinite(est.ci_halfwidth));
    CHECK(est.ci_halfwidth > 0.0);
    CHECK(est.eps_sq > 0.0);
  }
}

TEST_CASE("descent oracle matches the normal equations") {
  const auto envs = ls_family(2, 48, 5, 0.15, 0.25, 0xACE);
  const ParamVector exact = normal_equations(envs);
  auto joint_risk = [&](const ParamVector& x) {
    double acc = 0.0;
    for (const auto& env : envs) acc += empirical_risk(env, x);
    return acc / static_cast<double>(envs.size());
  };

  // Fixed-step descent stalls once per-step risk improvements round to zero,
  // which floors the reachable gradient norm near 1e-8; ask for 1e-7.
  OracleConfig cfg;
  cfg.max_iters = 200000;
  cfg.grad_tol = 1e-7;
  auto [oracle, converged] = oracle_erm(envs, ParamVector::zeros(5), cfg);
  REQUIRE(converged);
  CHECK(joint_risk(oracle) == Catch::Approx(joint_risk(exact)).margin(1e-10));
  CHECK(joint_risk(oracle) >= joint_risk(exact) - 1e-14);

  SECTION("a zero budget returns the start unchanged") {
    OracleConfig frozen;
    frozen.max_iters = 0;
    frozen.grad_tol = 1e-6;
    auto [same, ok] = oracle_erm(envs, oracle, frozen);
    CHECK(ok);
    CHECK(same == oracle);

    auto [still_zero, stuck] =
        oracle_erm(envs, ParamVector::zeros(5), frozen);
    CHECK_FALSE(stuck);
    CHECK(still_zero == ParamVector::zeros(5));
  }

  SECTION("validation") {
    const std::vector<TaskEnvironment> none;
    CHECK_THROWS_WITH(oracle_erm(none, ParamVector::zeros(5), cfg),
                      ContainsSubstring("no tasks"));
    OracleConfig bad;
    bad.max_iters = -1;
    CHECK_THROWS_WITH(oracle_erm(envs, ParamVector::zeros(5), bad),
                      ContainsSubstring("bad budget"));
  }
}

TEST_CASE("gaps at a converged point collapse the excess proxy") {
  const auto envs = ls_family(2, 40, 4, 0.2, 0.3, 0xEFF);
  OracleConfig solve;
  solve.max_iters = 200000;
  solve.grad_tol = 1e-7;
  auto [x_hat, converged] = oracle_erm(envs, ParamVector::zeros(4), solve);
  REQUIRE(converged);

  // Starting the oracle at the already-converged point makes it return the
  // point untouched, so the oracle risk coincides with the empirical risk.
  // The tolerance must match the solve, or the re-check would iterate.
  OracleConfig at_point;
  at_point.start = x_hat;
  at_point.grad_tol = 1e-7;
  const GapEstimate gaps = empirical_gaps(envs, x_hat, 4000, at_point, 7);
  CHECK(gaps.oracle_converged);
  CHECK(gaps.oracle_risk == gaps.emp_risk);
  CHECK(gaps.excess_proxy == gaps.gen_gap);
  CHECK(gaps.grad_norm_sq <= 1e-14);
  CHECK(gaps.pop_risk >= 0.0);
  CHECK(gaps.emp_risk >= 0.0);
  CHECK(gaps.gen_gap == gaps.pop_risk - gaps.emp_risk);
}

TEST_CASE("noiseless interpolation leaves no measurable gaps") {
  const auto envs = ls_family(1, 32, 4, 0.0, 0.0, 0x1D0);
  const ParamVector truth(envs[0].spec().regression_weights);

  OracleConfig at_point;
  at_point.start = truth;
  const GapEstimate gaps = empirical_gaps(envs, truth, 2000, at_point, 3);
  CHECK(gaps.emp_risk <= 1e-20);
  CHECK(gaps.pop_risk <= 1e-20);
  CHECK(std::abs(gaps.gen_gap) <= 1e-20);
  CHECK(gaps.grad_norm_sq <= 1e-20);
  CHECK(std::abs(gaps.excess_proxy) <= 1e-20);
}

TEST_CASE("gap estimation validation") {
  const auto envs = ls_family(1, 16, 3, 0.2, 0.0, 0x9);
  const ParamVector x = ParamVector::zeros(3);
  const std::vector<TaskEnvironment> none;
  CHECK_THROWS_WITH(empirical_gaps(none, x, 100, OracleConfig{}, 0),
                    ContainsSubstring("no tasks"));
  CHECK_THROWS_WITH(empirical_gaps(envs, x, 0, OracleConfig{}, 0),
                    ContainsSubstring("fresh_m < 1"));
}

TEST_CASE("gamma grid audit wiring") {
  const auto envs = ls_family(2, 24, 3, 0.3, 0.25, 0xAA7);
  const ParamVector x0 = ParamVector::zeros(3);
  const std::vector<FinetuneConfig> cfgs(2, quick_cfg(25, 4, 0.02, 0x13));

  StabilityOptions opts;
  opts.replicates = 4;
  opts.seed = 3;

  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> grid = {0.5, 2.0, 8.0, inf};
  const LemmaAuditReport rep = lemma_audit(envs, x0, cfgs, MergeSpec{}, grid,
                                           opts, 2000);

  REQUIRE(rep.entries.size() == 4);
  CHECK(rep.eps_sq > 0.0);
  CHECK(rep.smoothness > 0.0);

  // The report must agree with a direct stability measurement under the same
  // options, and every entry must be an exact function of the header fields.
  const StabilityEstimate direct =
      empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts);
  CHECK(rep.eps_sq == direct.eps_sq);

  double slack_acc = 0.0;
  int live = 0;
  for (const auto& e : rep.entries) {
    const double rhs = rep.grad_norm_sq / (2.0 * e.gamma) +
                       0.5 * (rep.smoothness + e.gamma) * rep.eps_sq;
    CHECK(e.rhs == rhs);
    CHECK(e.slack == e.rhs - rep.gen_gap);
    CHECK(e.vacuous == (!std::isfinite(e.rhs) || e.rhs > 1e15));
    if (!e.vacuous) {
      slack_acc += e.slack;
      live += 1;
    }
  }
  CHECK(rep.entries[3].vacuous);  // infinite gamma with positive drift
  REQUIRE(live > 0);
  CHECK(rep.mean_slack == slack_acc / static_cast<double>(live));
  CHECK(rep.holds_on_average == (rep.mean_slack >= 0.0));
  CHECK(rep.gamma_star_measured ==
        std::sqrt(rep.grad_norm_sq / rep.eps_sq));

  SECTION("deterministic across repeated runs") {
    const LemmaAuditReport again = lemma_audit(envs, x0, cfgs, MergeSpec{},
                                               grid, opts, 2000);
    CHECK(lemma_report_to_json(rep).dump(2) ==
          lemma_report_to_json(again).dump(2));
  }
}

TEST_CASE("gamma grid audit with forced null drift") {
  const auto envs = ls_family(2, 20, 3, 0.3, 0.2, 0xB52);
  const ParamVector x0 = ParamVector::zeros(3);
  const std::vector<FinetuneConfig> cfgs(2, quick_cfg(20, 4, 0.02, 0x2));

  StabilityOptions opts;
  opts.replicates = 2;
  opts.seed = 5;
  opts.force_null = true;

  const std::vector<double> grid = {1.0};
  const LemmaAuditReport rep =
      lemma_audit(envs, x0, cfgs, MergeSpec{}, grid, opts, 1000);
  CHECK(rep.eps_sq == 0.0);
  REQUIRE(rep.entries.size() == 1);
  CHECK_FALSE(rep.entries[0].vacuous);
  CHECK(rep.entries[0].rhs == rep.grad_norm_sq / 2.0);
  CHECK(std::isinf(rep.gamma_star_measured));
}

TEST_CASE("gamma grid validation") {
  const auto envs = ls_family(1, 16, 3, 0.2, 0.0, 0x77);
  const ParamVector x0 = ParamVector::zeros(3);
  const std::vector<FinetuneConfig> cfgs(1, quick_cfg(5, 2, 0.02, 0x1));
  StabilityOptions opts;
  opts.replicates = 1;

  const std::vector<double> empty;
  CHECK_THROWS_WITH(
      lemma_audit(envs, x0, cfgs, MergeSpec{}, empty, opts, 100),
      ContainsSubstring("gamma grid is empty"));

  for (double bad : {-1.0, 0.0, std::numeric_limits<double>::quiet_NaN()}) {
    const std::vector<double> grid = {1.0, bad};
    CHECK_THROWS_WITH(
        lemma_audit(envs, x0, cfgs, MergeSpec{}, grid, opts, 100),
        ContainsSubstring("gamma values must be positive"));
  }
}

TEST_CASE("measurement reports serialize faithfully") {
  const auto envs = ls_family(2, 20, 3, 0.3, 0.2, 0x321);
  const ParamVector x0 = ParamVector::zeros(3);
  const std::vector<FinetuneConfig> cfgs(2, quick_cfg(15, 4, 0.02, 0x4));

  StabilityOptions opts;
  opts.replicates = 3;
  opts.seed = 11;

  SECTION("stability estimate") {
    const StabilityEstimate est =
        empirical_global_stability(envs, x0, cfgs, MergeSpec{}, opts);
    const nlohmann::ordered_json j = stability_estimate_to_json(est);
    CHECK(j.at("estimate").get<double>() == est.eps_sq);
    CHECK(j.at("ci").get<double>() == est.ci_halfwidth);
    CHECK(j.at("replicates").get<int>() == est.replicates);
    CHECK(j.at("per_task").get<std::vector<double>>() == est.per_task);
    CHECK(j.at("cache_checks").get<std::size_t>() == est.cache_checks);
    CHECK(j.at("cache_clean").get<bool>() == est.cache_clean);
    CHECK(stability_estimate_to_json(est).dump() == j.dump());
  }

  SECTION("gap estimate") {
    const GapEstimate gaps =
        empirical_gaps(envs, x0, 500, OracleConfig{}, 19);
    const nlohmann::ordered_json j = gaps_to_json(gaps);
    CHECK(j.at("pop_risk").get<double>() == gaps.pop_risk);
    CHECK(j.at("emp_risk").get<double>() == gaps.emp_risk);
    CHECK(j.at("gen_gap").get<double>() == gaps.gen_gap);
    CHECK(j.at("grad_norm_sq").get<double>() == gaps.grad_norm_sq);
    CHECK(j.at("oracle_risk").get<double>() == gaps.oracle_risk);
    CHECK(j.at("excess_proxy").get<double>() == gaps.excess_proxy);
    CHECK(j.at("oracle_converged").get<bool>() == gaps.oracle_converged);
  }

  SECTION("audit report") {
    const std::vector<double> grid = {0.7, 3.0};
    const LemmaAuditReport rep =
        lemma_audit(envs, x0, cfgs, MergeSpec{}, grid, opts, 500);
    const nlohmann::ordered_json j = lemma_report_to_json(rep);
    CHECK(j.at("eps_sq").get<double>() == rep.eps_sq);
    CHECK(j.at("gen_gap").get<double>() == rep.gen_gap);
    CHECK(j.at("smoothness").get<double>() == rep.smoothness);
    CHECK(j.at("holds_on_average").get<bool>() == rep.holds_on_average);
    REQUIRE(j.at("entries").size() == 2);
    CHECK(j.at("entries")[0].at("gamma").get<double>() == 0.7);
    CHECK(j.at("entries")[1].at("slack").get<double>() ==
          rep.entries[1].slack);
    CHECK(j.at("entries")[0].at("vacuous").get<bool>() ==
          rep.entries[0].vacuous);
  }
}
