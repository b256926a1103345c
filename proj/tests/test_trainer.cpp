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
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "mergelab/trainer.hpp"

using namespace mergelab;

namespace {

std::vector<TaskEnvironment> small_family(int n, double noise,
                                          std::uint64_t seed) {
  TaskFamilyConfig cfg;
  cfg.family = Family::kLeastSquares;
  cfg.num_tasks = 1;
  cfg.feature_dim = 4;
  cfg.sizes = {n};
  cfg.het_knob = 0.0;
  cfg.noise_scale = noise;
  cfg.seed = seed;
  return gen_task_family(cfg);
}

bool log_contains(const TrainResult& r, std::uint32_t j) {
  for (const auto& batch : r.batch_index_log)
    for (std::uint32_t v : batch)
      if (v == j) return true;
  return false;
}

}  // namespace

TEST_CASE("schedule validation rejects nonpositive and out-of-range values") {
  CHECK_THROWS_AS(validate_schedule(Schedule::constant(0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(validate_schedule(Schedule::constant(-1e-3)),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      validate_schedule(Schedule::constant(std::nan(""))),
      std::invalid_argument);
  CHECK_THROWS_AS(validate_schedule(Schedule::exp_decay(0.1, 0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(validate_schedule(Schedule::proximal(0.1, 0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(validate_schedule(Schedule::proximal(0.1, 1.0)),
                  std::invalid_argument);
  CHECK_NOTHROW(validate_schedule(Schedule::exp_decay(0.1, 0.9)));
  CHECK_NOTHROW(validate_schedule(Schedule::proximal(0.1, 0.25)));
}

TEST_CASE("schedule weight vectors follow their closed forms") {
  const WeightVector c = schedule_weight_vector(Schedule::constant(0.01), 5);
  REQUIRE(c.a.size() == 5);
  for (double v : c.a) CHECK(v == 1.0);
  CHECK(c.l1() == 5.0);
  CHECK(c.l2_sq() == 5.0);
  CHECK(c.last() == 1.0);

  const WeightVector e = schedule_weight_vector(Schedule::exp_decay(0.1, 0.8), 4);
  for (int k = 0; k < 4; ++k)
    CHECK(e.a[static_cast<std::size_t>(k)] ==
          Catch::Approx(std::pow(0.8, k)).epsilon(1e-15));

  // alpha = 0.5, K = 3: weights (1-alpha)^(K-1-k) = [0.25, 0.5, 1].
  const WeightVector p = schedule_weight_vector(Schedule::proximal(0.1, 0.5), 3);
  CHECK(p.a[0] == 0.25);
  CHECK(p.a[1] == 0.5);
  CHECK(p.a[2] == 1.0);
  CHECK(p.l1() == Catch::Approx((1.0 - std::pow(0.5, 3)) / 0.5).epsilon(1e-15));
  CHECK(p.last() == 1.0);

  CHECK_THROWS_AS(schedule_weight_vector(Schedule::constant(0.1), 0),
                  std::invalid_argument);
}

TEST_CASE("effective size uses a ceiling of the data ratio") {
  const std::vector<TaskEnvironment> envs = small_family(10, 1.0, 3);
  CHECK(effective_size(envs[0], 1.0) == 10);
  CHECK(effective_size(envs[0], 0.5) == 5);
  CHECK(effective_size(envs[0], 0.51) == 6);
  CHECK(effective_size(envs[0], 0.01) == 1);
  CHECK_THROWS_AS(effective_size(envs[0], 0.0), std::invalid_argument);
  CHECK_THROWS_AS(effective_size(envs[0], 1.1), std::invalid_argument);
}

TEST_CASE("finetune validation enforces batch and small-step limits") {
  const std::vector<TaskEnvironment> envs = small_family(16, 1.0, 5);
  FinetuneConfig cfg;
  cfg.steps = 10;
  cfg.batch = 4;
  cfg.schedule = Schedule::constant(1e-3);
  CHECK_NOTHROW(validate_finetune(envs[0], cfg));

  FinetuneConfig bad = cfg;
  bad.steps = 0;
  CHECK_THROWS_AS(validate_finetune(envs[0], bad), std::invalid_argument);
  bad = cfg;
  bad.batch = 0;
  CHECK_THROWS_AS(validate_finetune(envs[0], bad), std::invalid_argument);
  bad = cfg;
  bad.batch = 9;  // floor(16 / 2) = 8 is the largest legal batch
  CHECK_THROWS_AS(validate_finetune(envs[0], bad), std::invalid_argument);
  bad = cfg;
  bad.batch = 8;
  CHECK_NOTHROW(validate_finetune(envs[0], bad));

  // Halving the data halves the batch cap.
  bad = cfg;
  bad.data_ratio = 0.5;
  bad.batch = 5;
  CHECK_THROWS_AS(validate_finetune(envs[0], bad), std::invalid_argument);

  // Small-step regime: eta <= 1/(8 K L), constant schedules only.
  FinetuneConfig lemma = cfg;
  lemma.lemma_smoothness = 4.0;
  lemma.schedule = Schedule::constant(1.0 / (8.0 * 10 * 4.0));
  CHECK_NOTHROW(validate_finetune(envs[0], lemma));
  lemma.schedule = Schedule::constant(1.01 / (8.0 * 10 * 4.0));
  CHECK_THROWS_AS(validate_finetune(envs[0], lemma), std::invalid_argument);
  lemma.schedule = Schedule::exp_decay(1e-4, 0.9);
  CHECK_THROWS_AS(validate_finetune(envs[0], lemma), std::invalid_argument);
}

TEST_CASE("finetune is bitwise deterministic in its config") {
  const std::vector<TaskEnvironment> envs = small_family(24, 0.5, 7);
  const ParamVector x0 = ParamVector::zeros(4);
  FinetuneConfig cfg;
  cfg.steps = 30;
  cfg.batch = 4;
  cfg.schedule = Schedule::exp_decay(0.02, 0.97);
  cfg.seed = 99;

  const TrainResult a = finetune(x0, envs[0], cfg);
  const TrainResult b = finetune(x0, envs[0], cfg);
  CHECK(a.final == b.final);
  CHECK(a.batch_index_log == b.batch_index_log);
  CHECK(a.eta_ref == cfg.schedule.eta);
  REQUIRE(a.weight_vector.a.size() == 30);

  cfg.seed = 100;
  const TrainResult c = finetune(x0, envs[0], cfg);
  CHECK_FALSE(a.final == c.final);
}

TEST_CASE("the batch log replays to the exact final iterate") {
  const std::vector<TaskEnvironment> envs = small_family(20, 0.8, 9);
  const ParamVector x0 = ParamVector::zeros(4);
  FinetuneConfig cfg;
  cfg.steps = 25;
  cfg.batch = 3;
  cfg.schedule = Schedule::exp_decay(0.05, 0.9);
  cfg.seed = 1234;
  const TrainResult r = finetune(x0, envs[0], cfg);
  REQUIRE(r.batch_index_log.size() == 25);

  std::vector<double> x(x0.values().begin(), x0.values().end());
  std::vector<double> g(x.size());
  for (int k = 0; k < cfg.steps; ++k) {
    envs[0].batch_grad_raw(x.data(), r.batch_index_log[static_cast<std::size_t>(k)],
                           g.data());
    const double eta =
        r.eta_ref * r.weight_vector.a[static_cast<std::size_t>(k)];
    for (std::size_t d = 0; d < x.size(); ++d) x[d] -= eta * g[d];
  }
  const ParamVector replayed(std::move(x));
  CHECK(replayed == r.final);
}

TEST_CASE("coupled runs coincide exactly when the swap is never sampled") {
  const std::vector<TaskEnvironment> envs = small_family(16, 1.0, 13);
  const ParamVector x0 = ParamVector::zeros(4);
  FinetuneConfig cfg;
  cfg.steps = 6;
  cfg.batch = 2;
  cfg.schedule = Schedule::constant(0.01);

  int equal_runs = 0, unequal_runs = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    cfg.seed = seed;
    const PerturbedDataset pd = perturb(envs[0], 3, 5000 + seed);
    const auto [orig, twin] = coupled_finetune(x0, envs[0], pd, cfg);
    CHECK(orig.batch_index_log == twin.batch_index_log);
    const bool included = log_contains(orig, 3);
    const bool same = orig.final == twin.final;
    CHECK(same == !included);
    (same ? equal_runs : unequal_runs)++;
  }
  // Inclusion probability is about 0.53 here; both branches must occur.
  CHECK(equal_runs > 0);
  CHECK(unequal_runs > 0);

  // A null swap never separates the trajectories.
  cfg.seed = 77;
  const PerturbedDataset null = PerturbedDataset::null_perturbation(envs[0], 3);
  const auto [a, b] = coupled_finetune(x0, envs[0], null, cfg);
  CHECK(a.final == b.final);

  // The perturbation must come from the same dataset.
  const std::vector<TaskEnvironment> other = small_family(16, 1.0, 14);
  const PerturbedDataset foreign = perturb(other[0], 3, 1);
  CHECK_THROWS_AS(coupled_finetune(x0, envs[0], foreign, cfg),
                  std::invalid_argument);
}

TEST_CASE("batch membership frequency matches with-replacement sampling") {
  const std::vector<TaskEnvironment> envs = small_family(16, 1.0, 17);
  const ParamVector x0 = ParamVector::zeros(4);
  FinetuneConfig cfg;
  cfg.steps = 8;
  cfg.batch = 2;
  cfg.schedule = Schedule::constant(1e-3);

  const int trials = 400;
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    cfg.seed = static_cast<std::uint64_t>(t) * 2654435761u + 11;
    const TrainResult r = finetune(x0, envs[0], cfg);
    if (log_contains(r, 3)) ++hits;
  }
  const double p = 1.0 - std::pow(1.0 - 1.0 / 16.0, 2.0 * 8.0);
  const double sigma = std::sqrt(p * (1.0 - p) * trials);
  CHECK(std::abs(hits - p * trials) <= 3.0 * sigma);
}

TEST_CASE("index streams for a longer run extend the shorter run") {
  const std::vector<TaskEnvironment> envs = small_family(20, 1.0, 19);
  const ParamVector x0 = ParamVector::zeros(4);
  FinetuneConfig short_cfg;
  short_cfg.steps = 12;
  short_cfg.batch = 3;
  short_cfg.schedule = Schedule::constant(0.005);
  short_cfg.seed = 321;
  FinetuneConfig long_cfg = short_cfg;
  long_cfg.steps = 40;

  const TrainResult s = finetune(x0, envs[0], short_cfg);
  const TrainResult l = finetune(x0, envs[0], long_cfg);
  for (std::size_t k = 0; k < s.batch_index_log.size(); ++k)
    CHECK(s.batch_index_log[k] == l.batch_index_log[k]);
}

TEST_CASE("runaway step sizes raise a divergence error") {
  const std::vector<TaskEnvironment> envs = small_family(16, 1.0, 23);
  const ParamVector x0 = ParamVector({10.0, -10.0, 10.0, -10.0});
  FinetuneConfig cfg;
  cfg.steps = 50;
  cfg.batch = 4;
  cfg.schedule = Schedule::constant(1e6);
  cfg.seed = 5;
  try {
    finetune(x0, envs[0], cfg);
    FAIL("expected divergence");
  } catch (const DivergedError& e) {
    CHECK(e.step() >= 0);
    CHECK(e.step() < 50);
    CHECK_FALSE(e.norm() < 1e8);
  }
}

TEST_CASE("schedules and finetune configs round trip through json") {
  for (const Schedule& s : {Schedule::constant(0.01),
                            Schedule::exp_decay(0.1, 0.95),
                            Schedule::proximal(0.02, 0.3)}) {
    const Schedule back = schedule_from_json(schedule_to_json(s));
    CHECK(back.kind == s.kind);
    CHECK(back.eta == s.eta);
    if (s.kind == Schedule::Kind::kExpDecay) CHECK(back.rate == s.rate);
    if (s.kind == Schedule::Kind::kProximal) CHECK(back.alpha == s.alpha);
  }
  CHECK_THROWS_AS(schedule_from_json({{"kind", "linear"}, {"params", {}}}),
                  std::invalid_argument);

  FinetuneConfig cfg;
  cfg.steps = 64;
  cfg.batch = 6;
  cfg.schedule = Schedule::proximal(0.03, 0.4);
  cfg.seed = 31337;
  cfg.data_ratio = 0.75;
  const nlohmann::ordered_json j = finetune_to_json(cfg);
  CHECK(j.at("K") == 64);
  CHECK(j.at("b") == 6);
  const FinetuneConfig back = finetune_from_json(j);
  CHECK(back.steps == cfg.steps);
  CHECK(back.batch == cfg.batch);
  CHECK(back.schedule.kind == cfg.schedule.kind);
  CHECK(back.schedule.alpha == cfg.schedule.alpha);
  CHECK(back.seed == cfg.seed);
  CHECK(back.data_ratio == cfg.data_ratio);

  nlohmann::json defaulted = j;
  defaulted.erase("data_ratio");
  CHECK(finetune_from_json(defaulted).data_ratio == 1.0);
  defaulted.erase("K");
  CHECK_THROWS_AS(finetune_from_json(defaulted), std::invalid_argument);
}
