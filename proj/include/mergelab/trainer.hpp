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

#ifndef MERGELAB_TRAINER_HPP_
#define MERGELAB_TRAINER_HPP_

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergelab/param_vector.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/task_suite.hpp"

namespace mergelab {

// Step-size schedule. Step k uses eta^k = eta_ref * a[k] where a is the
// weight vector below and eta_ref the schedule's reference rate.
struct Schedule {
  enum class Kind { kConstant, kExpDecay, kProximal };

  Kind kind = Kind::kConstant;
  double eta = 1e-3;   // constant / proximal reference rate; exp-decay eta0
  double rate = 1.0;   // exp-decay factor per step
  double alpha = 0.5;  // proximal mixing weight, in (0, 1)

  static Schedule constant(double eta_l) {
    return Schedule{Kind::kConstant, eta_l, 1.0, 0.5};
  }
  static Schedule exp_decay(double eta0, double rate) {
    return Schedule{Kind::kExpDecay, eta0, rate, 0.5};
  }
  static Schedule proximal(double eta_l, double alpha) {
    return Schedule{Kind::kProximal, eta_l, 1.0, alpha};
  }
};

struct WeightVector {
  std::vector<double> a;

  double l1() const {
    double s = 0.0;
    for (double v : a) s += v;
    return s;
  }
  double l2_sq() const {
    double s = 0.0;
    for (double v : a) s += v * v;
    return s;
  }
  double last() const { return a.empty() ? 0.0 : a.back(); }
};

inline void validate_schedule(const Schedule& s) {
  if (!(s.eta > 0.0) || !std::isfinite(s.eta))
    throw std::invalid_argument("schedule: rate must be positive");
  if (s.kind == Schedule::Kind::kExpDecay &&
      (!(s.rate > 0.0) || !std::isfinite(s.rate)))
    throw std::invalid_argument("schedule: decay factor must be positive");
  if (s.kind == Schedule::Kind::kProximal &&
      !(s.alpha > 0.0 && s.alpha < 1.0))
    throw std::invalid_argument("schedule: alpha must lie in (0, 1)");
}

// Weight vector a with a[k] = eta^k / eta_ref. Constant: all ones.
// Exp-decay: rate^k. Proximal: (1 - alpha)^(K-1-k), so later steps dominate
// and |a|_1 = (1 - (1-alpha)^K) / alpha.
inline WeightVector schedule_weight_vector(const Schedule& s, int steps) {
  validate_schedule(s);
  if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  WeightVector w;
  w.a.resize(static_cast<std::size_t>(steps));
  switch (s.kind) {
    case Schedule::Kind::kConstant:
      for (int k = 0; k < steps; ++k) w.a[static_cast<std::size_t>(k)] = 1.0;
      break;
    case Schedule::Kind::kExpDecay:
      for (int k = 0; k < steps; ++k)
        w.a[static_cast<std::size_t>(k)] = std::pow(s.rate, k);
      break;
    case Schedule::Kind::kProximal:
      for (int k = 0; k < steps; ++k)
        w.a[static_cast<std::size_t>(k)] = std::pow(1.0 - s.alpha, steps - 1 - k);
      break;
  }
  return w;
}

struct FinetuneConfig {
  int steps = 100;  // K
  int batch = 8;    // b
  Schedule schedule;
  std::uint64_t seed = 0;
  double data_ratio = 1.0;  // use first ceil(ratio * n) samples
  // When positive, enforce the small-step regime eta <= 1/(8 K L) required
  // for bound comparisons (constant schedule only).
  double lemma_smoothness = 0.0;
};

struct TrainResult {
  ParamVector final;
  WeightVector weight_vector;
  std::vector<std::vector<std::uint32_t>> batch_index_log;
  double eta_ref = 0.0;
};

class DivergedError : public std::runtime_error {
 public:
  DivergedError(int step, double norm)
      : std::runtime_error("diverged at step " + std::to_string(step) +
                           " (iterate norm " + std::to_string(norm) + ")"),
        step_(step),
        norm_(norm) {}
  int step() const { return step_; }
  double norm() const { return norm_; }

 private:
  int step_;
  double norm_;
};

inline int effective_size(const TaskEnvironment& env, double data_ratio) {
  if (!(data_ratio > 0.0 && data_ratio <= 1.0))
    throw std::invalid_argument("finetune: data_ratio must lie in (0, 1]");
  return static_cast<int>(
      std::ceil(data_ratio * static_cast<double>(env.size())));
}

inline void validate_finetune(const TaskEnvironment& env,
                              const FinetuneConfig& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("finetune: K must be >= 1");
  int n_used = effective_size(env, cfg.data_ratio);
  if (cfg.batch < 1 || cfg.batch > n_used / 2)
    throw std::invalid_argument(
        "finetune: batch must satisfy 1 <= b <= floor(n_used / 2), n_used = " +
        std::to_string(n_used));
  validate_schedule(cfg.schedule);
  if (cfg.lemma_smoothness > 0.0) {
    if (cfg.schedule.kind != Schedule::Kind::kConstant)
      throw std::invalid_argument(
          "finetune: bound comparison requires a constant schedule");
    double cap = 1.0 / (8.0 * static_cast<double>(cfg.steps) *
                        cfg.lemma_smoothness);
    if (cfg.schedule.eta > cap)
      throw std::invalid_argument(
          "finetune: bound comparison requires eta <= 1/(8 K L) = " +
          std::to_string(cap));
  }
}

// Mini-batch SGD from x0 with batches sampled with replacement. The index
// stream is a pure function of (seed, step, slot), so coupled runs on
// datasets differing in one sample share batches exactly. Aborts when the
// iterate norm passes 1e8.
inline TrainResult finetune(const ParamVector& x0, const TaskEnvironment& env,
                            const FinetuneConfig& cfg) {
  if (x0.dim() != env.param_dim())
    throw std::invalid_argument("finetune: x0 dimension mismatch");
  validate_finetune(env, cfg);
  const std::size_t n_used =
      static_cast<std::size_t>(effective_size(env, cfg.data_ratio));

  TrainResult out;
  out.weight_vector = schedule_weight_vector(cfg.schedule, cfg.steps);
  out.eta_ref = cfg.schedule.eta;
  out.batch_index_log.reserve(static_cast<std::size_t>(cfg.steps));

  std::vector<double> x(x0.values().begin(), x0.values().end());
  std::vector<double> g(x.size());
  std::vector<std::uint32_t> idx(static_cast<std::size_t>(cfg.batch));

  for (int k = 0; k < cfg.steps; ++k) {
    for (int s = 0; s < cfg.batch; ++s)
      idx[static_cast<std::size_t>(s)] =
          batch_index(cfg.seed, static_cast<std::uint64_t>(k),
                      static_cast<std::uint64_t>(s), n_used);
    env.batch_grad_raw(x.data(), idx, g.data());
    const double eta = out.eta_ref * out.weight_vector.a[static_cast<std::size_t>(k)];
    double norm_sq = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) {
      x[d] -= eta * g[d];
      norm_sq += x[d] * x[d];
    }
    out.batch_index_log.push_back(idx);
    if (!std::isfinite(norm_sq) || norm_sq > 1e16)
      throw DivergedError(k, std::sqrt(norm_sq));
  }
  out.final = ParamVector(std::move(x));
  return out;
}

// Trains the original and the perturbed dataset under one index stream.
// Iterates stay bit-identical until the replaced index first enters a batch.
inline std::pair<TrainResult, TrainResult> coupled_finetune(
    const ParamVector& x0, const TaskEnvironment& env,
    const PerturbedDataset& perturbed, const FinetuneConfig& cfg) {
  if (&perturbed.origin() != &env && !perturbed.origin().same_task(env))
    throw std::invalid_argument(
        "coupled_finetune: perturbation does not originate from env");
  TaskEnvironment twin = perturbed.materialize();
  TrainResult a = finetune(x0, env, cfg);
  TrainResult b = finetune(x0, twin, cfg);
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Config (JSON) round trip: {K, b, schedule: {kind, params}, seed, data_ratio}
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json schedule_to_json(const Schedule& s) {
  nlohmann::ordered_json j;
  switch (s.kind) {
    case Schedule::Kind::kConstant:
      j["kind"] = "constant";
      j["params"] = {{"eta", s.eta}};
      break;
    case Schedule::Kind::kExpDecay:
      j["kind"] = "exp-decay";
      j["params"] = {{"eta0", s.eta}, {"rate", s.rate}};
      break;
    case Schedule::Kind::kProximal:
      j["kind"] = "proximal";
      j["params"] = {{"eta", s.eta}, {"alpha", s.alpha}};
      break;
  }
  return j;
}

inline Schedule schedule_from_json(const nlohmann::json& j) {
  Schedule s;
  try {
    std::string kind = j.at("kind").get<std::string>();
    const nlohmann::json& p = j.at("params");
    if (kind == "constant") {
      s = Schedule::constant(p.at("eta").get<double>());
    } else if (kind == "exp-decay") {
      s = Schedule::exp_decay(p.at("eta0").get<double>(),
                              p.at("rate").get<double>());
    } else if (kind == "proximal") {
      s = Schedule::proximal(p.at("eta").get<double>(),
                             p.at("alpha").get<double>());
    } else {
      throw std::invalid_argument("schedule: unknown kind " + kind);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("schedule: ") + e.what());
  }
  validate_schedule(s);
  return s;
}

inline nlohmann::ordered_json finetune_to_json(const FinetuneConfig& cfg) {
  nlohmann::ordered_json j;
  j["K"] = cfg.steps;
  j["b"] = cfg.batch;
  j["schedule"] = schedule_to_json(cfg.schedule);
  j["seed"] = cfg.seed;
  j["data_ratio"] = cfg.data_ratio;
  return j;
}

inline FinetuneConfig finetune_from_json(const nlohmann::json& j) {
  FinetuneConfig cfg;
  try {
    cfg.steps = j.at("K").get<int>();
    cfg.batch = j.at("b").get<int>();
    cfg.schedule = schedule_from_json(j.at("schedule"));
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.data_ratio = j.value("data_ratio", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("finetune config: ") + e.what());
  }
  return cfg;
}

}  // namespace mergelab

#endif  // MERGELAB_TRAINER_HPP_
