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
//
// Measurement side of the stability story: couple two training runs that
// differ in one sample, measure how far the outputs drift, and compare the
// drift against the closed-form predictions. Also measures generalization
// gaps and audits the gap <= grad/(2 gamma) + (L + gamma)/2 * stability
// inequality on a gamma grid.

#ifndef MERGELAB_STABILITY_LAB_HPP_
#define MERGELAB_STABILITY_LAB_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergelab/bound_calc.hpp"
#include "mergelab/merge_algs.hpp"
#include "mergelab/param_vector.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/task_suite.hpp"
#include "mergelab/trainer.hpp"

namespace mergelab {

struct StabilityOptions {
  int replicates = 20;
  std::uint64_t seed = 0;
  // Debug hooks: pin the replaced index instead of drawing it, or replace a
  // sample with itself so the coupled runs must coincide exactly.
  std::optional<int> fixed_index;
  bool force_null = false;
  int bootstrap_resamples = 200;
};

struct StabilityEstimate {
  double eps_sq = 0.0;            // mean over tasks of per-task replicate means
  int replicates = 0;
  std::vector<double> per_task;   // replicate mean per task
  std::vector<std::vector<double>> per_task_samples;  // [task][replicate]
  double ci_halfwidth = 0.0;      // bootstrap 95% interval half width on eps_sq
  std::size_t cache_checks = 0;   // reuse audits performed (multi-task runs)
  bool cache_clean = true;        // every audited reuse was bit-identical
};

namespace detail {

// Replicate streams are derived from (seed, task, replicate) so that a
// single-task measurement and the matching slot of a multi-task measurement
// see the same replaced index and the same replacement sample.
inline std::uint64_t index_seed(std::uint64_t seed, int task, int replicate) {
  return mix_seed(seed, 0x10CA1ull,
                  (static_cast<std::uint64_t>(static_cast<std::uint32_t>(task)) << 32) |
                      static_cast<std::uint32_t>(replicate));
}

inline std::uint64_t perturb_seed(std::uint64_t seed, int task, int replicate) {
  return mix_seed(seed, 0x5A17ull,
                  (static_cast<std::uint64_t>(static_cast<std::uint32_t>(task)) << 32) |
                      static_cast<std::uint32_t>(replicate));
}

inline PerturbedDataset draw_perturbation(const TaskEnvironment& env,
                                          const FinetuneConfig& cfg,
                                          const StabilityOptions& opts,
                                          int replicate) {
  const int n_used = effective_size(env, cfg.data_ratio);
  int j;
  if (opts.fixed_index) {
    j = *opts.fixed_index;
    if (j < 0 || j >= n_used)
      throw std::out_of_range("stability: fixed index outside the used prefix");
  } else {
    SplitMix g(index_seed(opts.seed, env.task_id(), replicate));
    j = static_cast<int>(g.next_index(static_cast<std::uint64_t>(n_used)));
  }
  if (opts.force_null) return PerturbedDataset::null_perturbation(env, j);
  return perturb(env, j, perturb_seed(opts.seed, env.task_id(), replicate));
}

inline std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFFull;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t hash_train_result(const TrainResult& r) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (double v : r.final.values()) h = fnv1a(h, std::bit_cast<std::uint64_t>(v));
  for (double v : r.weight_vector.a) h = fnv1a(h, std::bit_cast<std::uint64_t>(v));
  h = fnv1a(h, std::bit_cast<std::uint64_t>(r.eta_ref));
  return h;
}

// Percentile-bootstrap half width for the mean statistic. Resampling picks
// replicate columns jointly across tasks, matching how the estimate averages.
inline double bootstrap_ci_halfwidth(
    const std::vector<std::vector<double>>& samples, int resamples,
    std::uint64_t seed) {
  if (samples.empty() || samples.front().empty() || resamples < 2) return 0.0;
  const std::size_t reps = samples.front().size();
  SplitMix g(mix_seed(seed, 0xB007ull));
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    double acc = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
      const std::size_t pick = g.next_index(reps);
      for (const auto& task : samples) acc += task[pick];
    }
    means.push_back(acc / (static_cast<double>(reps) *
                           static_cast<double>(samples.size())));
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, means.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] + frac * (means[hi] - means[lo]);
  };
  return 0.5 * (quantile(0.975) - quantile(0.025));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single-task stability: mean squared distance between coupled runs that
// differ in one training sample.
// ---------------------------------------------------------------------------

inline StabilityEstimate empirical_local_stability(const TaskEnvironment& env,
                                                   const ParamVector& x0,
                                                   const FinetuneConfig& cfg,
                                                   const StabilityOptions& opts) {
  if (opts.replicates < 1)
    throw std::invalid_argument("stability: replicates must be >= 1");
  StabilityEstimate est;
  est.replicates = opts.replicates;
  est.per_task_samples.assign(1, {});
  est.per_task_samples[0].reserve(static_cast<std::size_t>(opts.replicates));
  for (int r = 0; r < opts.replicates; ++r) {
    PerturbedDataset pd = detail::draw_perturbation(env, cfg, opts, r);
    auto [base_run, twin_run] = coupled_finetune(x0, env, pd, cfg);
    est.per_task_samples[0].push_back(
        squared_distance(base_run.final, twin_run.final));
  }
  double acc = 0.0;
  for (double v : est.per_task_samples[0]) acc += v;
  est.per_task = {acc / static_cast<double>(opts.replicates)};
  est.eps_sq = est.per_task[0];
  est.ci_halfwidth = detail::bootstrap_ci_halfwidth(
      est.per_task_samples, opts.bootstrap_resamples, opts.seed);
  return est;
}

// ---------------------------------------------------------------------------
// Multi-task stability of the merged output. For each task i the pipeline is
// rerun with one sample of task i replaced; every other task reuses the
// cached unperturbed result, and each reuse is audited by content hash.
// ---------------------------------------------------------------------------

inline StabilityEstimate empirical_global_stability(
    std::span<const TaskEnvironment> envs, const ParamVector& x0,
    std::span<const FinetuneConfig> cfgs, const MergeSpec& merge_spec,
    const StabilityOptions& opts) {
  const std::size_t n = envs.size();
  if (n == 0) throw std::invalid_argument("stability: no tasks");
  if (cfgs.size() != n)
    throw std::invalid_argument("stability: one training config per task");
  if (opts.replicates < 1)
    throw std::invalid_argument("stability: replicates must be >= 1");

  std::vector<TrainResult> cached;
  std::vector<std::uint64_t> hashes;
  cached.reserve(n);
  hashes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cached.push_back(finetune(x0, envs[i], cfgs[i]));
    hashes.push_back(detail::hash_train_result(cached.back()));
  }
  const ParamVector merged = apply_merge(x0, cached, envs, merge_spec).first;

  StabilityEstimate est;
  est.replicates = opts.replicates;
  est.per_task_samples.assign(n, {});
  est.per_task.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    est.per_task_samples[i].reserve(static_cast<std::size_t>(opts.replicates));
    for (int r = 0; r < opts.replicates; ++r) {
      PerturbedDataset pd =
          detail::draw_perturbation(envs[i], cfgs[i], opts, r);
      TaskEnvironment twin = pd.materialize();
      TrainResult rerun = finetune(x0, twin, cfgs[i]);

      std::vector<TrainResult> assembled;
      assembled.reserve(n);
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i) {
          assembled.push_back(rerun);
          continue;
        }
        est.cache_checks += 1;
        if (detail::hash_train_result(cached[k]) != hashes[k])
          est.cache_clean = false;
        assembled.push_back(cached[k]);
      }
      const ParamVector remerged =
          apply_merge(x0, assembled, envs, merge_spec).first;
      est.per_task_samples[i].push_back(squared_distance(merged, remerged));
    }
    double acc = 0.0;
    for (double v : est.per_task_samples[i]) acc += v;
    est.per_task[i] = acc / static_cast<double>(opts.replicates);
  }
  double acc = 0.0;
  for (double v : est.per_task) acc += v;
  est.eps_sq = acc / static_cast<double>(n);
  est.ci_halfwidth = detail::bootstrap_ci_halfwidth(
      est.per_task_samples, opts.bootstrap_resamples, opts.seed);
  return est;
}

// ---------------------------------------------------------------------------
// Generalization gap, gradient norm, and excess-risk proxy at a point.
// ---------------------------------------------------------------------------

struct OracleConfig {
  std::optional<ParamVector> start;  // defaults to the evaluation point
  int max_iters = 100000;
  double grad_tol = 1e-8;
};

struct GapEstimate {
  double pop_risk = 0.0;
  double emp_risk = 0.0;
  double gen_gap = 0.0;       // pop_risk - emp_risk
  double grad_norm_sq = 0.0;  // squared norm of the uniform-mean gradient
  double oracle_risk = 0.0;   // empirical risk at the descent oracle
  double excess_proxy = 0.0;  // pop_risk - oracle_risk
  bool oracle_converged = false;
};

// Full-batch descent with the conservative fixed step 1/(2 L). Runs until the
// joint gradient is below grad_tol or the budget is spent; if a step fails to
// decrease the risk the step is halved for that iteration only.
inline std::pair<ParamVector, bool> oracle_erm(
    std::span<const TaskEnvironment> envs, ParamVector start,
    const OracleConfig& cfg) {
  if (envs.empty()) throw std::invalid_argument("oracle_erm: no tasks");
  if (cfg.max_iters < 0) throw std::invalid_argument("oracle_erm: bad budget");
  const double step0 =
      1.0 / (2.0 * estimate_L(envs, probe_pairs(start, ProbeOptions{})));
  const std::size_t d = start.dim();
  const double inv_n = 1.0 / static_cast<double>(envs.size());

  auto joint_risk = [&](const ParamVector& x) {
    double acc = 0.0;
    for (const auto& env : envs) acc += empirical_risk(env, x);
    return acc * inv_n;
  };
  auto joint_grad = [&](const ParamVector& x) {
    std::vector<double> g(d, 0.0);
    for (const auto& env : envs) {
      const ParamVector gi = env.full_grad(x);
      for (std::size_t k = 0; k < d; ++k) g[k] += inv_n * gi[k];
    }
    return g;
  };

  ParamVector x = std::move(start);
  double risk = joint_risk(x);
  bool converged = false;
  for (int it = 0; it < cfg.max_iters; ++it) {
    std::vector<double> g = joint_grad(x);
    double gsq = 0.0;
    for (double v : g) gsq += v * v;
    if (gsq <= cfg.grad_tol * cfg.grad_tol) {
      converged = true;
      break;
    }
    double step = step0;
    for (int h = 0; h < 40; ++h) {
      std::vector<double> next(d);
      for (std::size_t k = 0; k < d; ++k) next[k] = x[k] - step * g[k];
      ParamVector cand(std::move(next));
      const double cand_risk = joint_risk(cand);
      if (cand_risk <= risk) {
        x = std::move(cand);
        risk = cand_risk;
        break;
      }
      step *= 0.5;
      if (h == 39) converged = false;
    }
  }
  if (!converged) {
    std::vector<double> g = joint_grad(x);
    double gsq = 0.0;
    for (double v : g) gsq += v * v;
    converged = gsq <= cfg.grad_tol * cfg.grad_tol;
  }
  return {std::move(x), converged};
}

inline GapEstimate empirical_gaps(std::span<const TaskEnvironment> envs,
                                  const ParamVector& x, int fresh_m,
                                  const OracleConfig& oracle_cfg,
                                  std::uint64_t seed) {
  if (envs.empty()) throw std::invalid_argument("empirical_gaps: no tasks");
  if (fresh_m < 1) throw std::invalid_argument("empirical_gaps: fresh_m < 1");
  const double inv_n = 1.0 / static_cast<double>(envs.size());

  GapEstimate out;
  for (const auto& env : envs)
    out.pop_risk += inv_n * env.population_risk_estimate(x, fresh_m, seed);
  for (const auto& env : envs) out.emp_risk += inv_n * empirical_risk(env, x);
  out.gen_gap = out.pop_risk - out.emp_risk;

  std::vector<double> g(x.dim(), 0.0);
  for (const auto& env : envs) {
    const ParamVector gi = env.full_grad(x);
    for (std::size_t k = 0; k < x.dim(); ++k) g[k] += inv_n * gi[k];
  }
  for (double v : g) out.grad_norm_sq += v * v;

  auto [oracle, ok] =
      oracle_erm(envs, oracle_cfg.start ? *oracle_cfg.start : x, oracle_cfg);
  out.oracle_converged = ok;
  double oracle_risk = 0.0;
  for (const auto& env : envs) oracle_risk += inv_n * empirical_risk(env, oracle);
  out.oracle_risk = oracle_risk;
  out.excess_proxy = out.pop_risk - oracle_risk;
  return out;
}

// ---------------------------------------------------------------------------
// Gamma-grid audit of gen_gap <= grad/(2 gamma) + (L + gamma)/2 * eps_sq.
// ---------------------------------------------------------------------------

struct LemmaAuditEntry {
  double gamma = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - gen_gap
  bool vacuous = false;
};

struct LemmaAuditReport {
  double eps_sq = 0.0;
  double gen_gap = 0.0;
  double grad_norm_sq = 0.0;
  double smoothness = 0.0;
  std::vector<LemmaAuditEntry> entries;
  double gamma_star_measured = 0.0;  // sqrt(grad_norm_sq / eps_sq), raw
  double mean_slack = 0.0;           // over non-vacuous entries
  bool holds_on_average = false;
};

inline LemmaAuditReport lemma_audit(std::span<const TaskEnvironment> envs,
                                    const ParamVector& x0,
                                    std::span<const FinetuneConfig> cfgs,
                                    const MergeSpec& merge_spec,
                                    std::span<const double> gamma_grid,
                                    const StabilityOptions& opts,
                                    int fresh_m = 10000,
                                    const OracleConfig& oracle_cfg = {}) {
  if (gamma_grid.empty())
    throw std::invalid_argument("lemma_audit: gamma grid is empty");
  for (double g : gamma_grid)
    if (std::isnan(g) || g <= 0.0)
      throw std::invalid_argument("lemma_audit: gamma values must be positive");

  LemmaAuditReport rep;
  StabilityEstimate est =
      empirical_global_stability(envs, x0, cfgs, merge_spec, opts);
  rep.eps_sq = est.eps_sq;

  std::vector<TrainResult> results;
  results.reserve(envs.size());
  for (std::size_t i = 0; i < envs.size(); ++i)
    results.push_back(finetune(x0, envs[i], cfgs[i]));
  const ParamVector merged = apply_merge(x0, results, envs, merge_spec).first;

  OracleConfig oc = oracle_cfg;
  if (!oc.start) oc.start = x0;
  GapEstimate gaps =
      empirical_gaps(envs, merged, fresh_m, oc, mix_seed(opts.seed, 0xEA1ull));
  rep.gen_gap = gaps.gen_gap;
  rep.grad_norm_sq = gaps.grad_norm_sq;
  rep.smoothness = estimate_L(envs, probe_pairs(x0, ProbeOptions{}));

  double slack_acc = 0.0;
  int live = 0;
  for (double gamma : gamma_grid) {
    LemmaAuditEntry e;
    e.gamma = gamma;
    e.rhs = rep.grad_norm_sq / (2.0 * gamma) +
            0.5 * (rep.smoothness + gamma) * rep.eps_sq;
    e.slack = e.rhs - rep.gen_gap;
    e.vacuous = !std::isfinite(e.rhs) || e.rhs > 1e15;
    if (!e.vacuous) {
      slack_acc += e.slack;
      live += 1;
    }
    rep.entries.push_back(e);
  }
  rep.gamma_star_measured = std::sqrt(rep.grad_norm_sq / rep.eps_sq);
  rep.mean_slack = live > 0 ? slack_acc / static_cast<double>(live) : 0.0;
  rep.holds_on_average = live > 0 && rep.mean_slack >= 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// JSON views.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json stability_estimate_to_json(
    const StabilityEstimate& e) {
  nlohmann::ordered_json j;
  j["estimate"] = e.eps_sq;
  j["ci"] = e.ci_halfwidth;
  j["replicates"] = e.replicates;
  j["per_task"] = e.per_task;
  j["cache_checks"] = e.cache_checks;
  j["cache_clean"] = e.cache_clean;
  return j;
}

inline nlohmann::ordered_json gaps_to_json(const GapEstimate& g) {
  nlohmann::ordered_json j;
  j["pop_risk"] = g.pop_risk;
  j["emp_risk"] = g.emp_risk;
  j["gen_gap"] = g.gen_gap;
  j["grad_norm_sq"] = g.grad_norm_sq;
  j["oracle_risk"] = g.oracle_risk;
  j["excess_proxy"] = g.excess_proxy;
  j["oracle_converged"] = g.oracle_converged;
  return j;
}

inline nlohmann::ordered_json lemma_report_to_json(const LemmaAuditReport& r) {
  nlohmann::ordered_json j;
  j["eps_sq"] = r.eps_sq;
  j["gen_gap"] = r.gen_gap;
  j["grad_norm_sq"] = r.grad_norm_sq;
  j["smoothness"] = r.smoothness;
  j["gamma_star_measured"] = r.gamma_star_measured;
  j["mean_slack"] = r.mean_slack;
  j["holds_on_average"] = r.holds_on_average;
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) {
    nlohmann::ordered_json je;
    je["gamma"] = e.gamma;
    je["rhs"] = e.rhs;
    je["slack"] = e.slack;
    je["vacuous"] = e.vacuous;
    arr.push_back(je);
  }
  j["entries"] = arr;
  return j;
}

}  // namespace mergelab

#endif  // MERGELAB_STABILITY_LAB_HPP_
