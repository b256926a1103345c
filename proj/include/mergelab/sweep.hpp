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
// Manifest-driven hyperparameter sweeps. One axis (steps, batch, lr,
// data_ratio, or num_tasks) is varied over a grid; for every (axis value,
// replicate group) cell all experts are fine-tuned from the shared base,
// each merge recipe is applied, joint held-out loss/accuracy is measured,
// and the excess-risk prediction is computed from a probed profile. Cells
// whose training diverges are recorded as collapsed and excluded from means.

#ifndef MERGELAB_SWEEP_HPP_
#define MERGELAB_SWEEP_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
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

enum class SweepAxis { kSteps, kBatch, kLr, kDataRatio, kNumTasks };

inline std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::kSteps: return "steps";
    case SweepAxis::kBatch: return "batch";
    case SweepAxis::kLr: return "lr";
    case SweepAxis::kDataRatio: return "data_ratio";
    case SweepAxis::kNumTasks: return "num_tasks";
  }
  throw std::logic_error("axis_name: unreachable");
}

inline SweepAxis axis_from_name(const std::string& s) {
  if (s == "steps") return SweepAxis::kSteps;
  if (s == "batch") return SweepAxis::kBatch;
  if (s == "lr") return SweepAxis::kLr;
  if (s == "data_ratio") return SweepAxis::kDataRatio;
  if (s == "num_tasks") return SweepAxis::kNumTasks;
  throw std::invalid_argument("unknown sweep axis: " + s);
}

struct SweepManifest {
  TaskFamilyConfig family;  // task pool; groups subsample it
  FinetuneConfig base;
  SweepAxis axis = SweepAxis::kSteps;
  std::vector<double> axis_values;
  std::vector<MergeSpec> merges;
  int replicate_groups = 15;
  int group_size = 8;  // ignored on the num_tasks axis
  int test_m = 1000;
  ProbeOptions probe;
  double bound_C = 0.5;
  int zeta_coeff = 12;
  std::uint64_t seed = 0;
};

namespace detail {

inline bool integer_valued(double v) {
  return std::isfinite(v) && v == std::floor(v);
}

inline FinetuneConfig apply_axis(const SweepManifest& m, double v,
                                 FinetuneConfig cfg) {
  switch (m.axis) {
    case SweepAxis::kSteps:
      cfg.steps = static_cast<int>(std::llround(v));
      break;
    case SweepAxis::kBatch:
      cfg.batch = static_cast<int>(std::llround(v));
      break;
    case SweepAxis::kLr:
      cfg.schedule.eta = v;
      break;
    case SweepAxis::kDataRatio:
      cfg.data_ratio = v;
      break;
    case SweepAxis::kNumTasks:
      break;  // changes the group size, not the per-task config
  }
  return cfg;
}

inline int group_size_at(const SweepManifest& m, double v) {
  return m.axis == SweepAxis::kNumTasks ? static_cast<int>(std::llround(v))
                                        : m.group_size;
}

// First `size` entries of a seeded shuffle of the pool, reported in
// ascending order so downstream sums have a canonical term order.
inline std::vector<int> group_subset(std::uint64_t seed, int group, int size,
                                     int pool) {
  std::vector<int> idx(static_cast<std::size_t>(pool));
  std::iota(idx.begin(), idx.end(), 0);
  SplitMix g(mix_seed(seed, 0x6A0Bull, static_cast<std::uint64_t>(group),
                      static_cast<std::uint64_t>(size)));
  for (int k = 0; k < size; ++k) {
    const std::size_t j =
        static_cast<std::size_t>(k) +
        g.next_index(static_cast<std::uint64_t>(pool - k));
    std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

inline void validate_manifest(const SweepManifest& m) {
  validate_config(m.family);
  validate_schedule(m.base.schedule);
  if (m.axis_values.empty())
    throw std::invalid_argument("sweep: axis_values is empty");
  for (std::size_t i = 1; i < m.axis_values.size(); ++i)
    if (!(m.axis_values[i] > m.axis_values[i - 1]))
      throw std::invalid_argument("sweep: axis_values must be strictly increasing");
  if (m.merges.empty()) throw std::invalid_argument("sweep: no merge specs");
  if (m.replicate_groups < 1)
    throw std::invalid_argument("sweep: replicate_groups must be >= 1");
  if (m.test_m < 1) throw std::invalid_argument("sweep: test_m must be >= 1");
  if (m.probe.count < 1) throw std::invalid_argument("sweep: probe count < 1");
  if (!(m.bound_C >= 0.0)) throw std::invalid_argument("sweep: bound C < 0");
  if (m.zeta_coeff != 5 && m.zeta_coeff != 12)
    throw std::invalid_argument("sweep: zeta_coeff must be 5 or 12");

  const int pool = m.family.num_tasks;
  for (double v : m.axis_values) {
    switch (m.axis) {
      case SweepAxis::kSteps:
      case SweepAxis::kBatch:
        if (!detail::integer_valued(v) || v < 1.0)
          throw std::invalid_argument("sweep: axis values must be integers >= 1");
        break;
      case SweepAxis::kNumTasks:
        if (!detail::integer_valued(v) || v < 1.0 || v > pool)
          throw std::invalid_argument(
              "sweep: num_tasks values must be integers in [1, pool size]");
        break;
      case SweepAxis::kLr:
        if (!(v > 0.0)) throw std::invalid_argument("sweep: lr values must be > 0");
        break;
      case SweepAxis::kDataRatio:
        if (!(v > 0.0 && v <= 1.0))
          throw std::invalid_argument("sweep: data_ratio values must lie in (0, 1]");
        break;
    }
    const int gsize = detail::group_size_at(m, v);
    if (gsize < 1 || gsize > pool)
      throw std::invalid_argument("sweep: group size must lie in [1, pool size]");
    // Batch feasibility across every pool task the cell might draw.
    const FinetuneConfig cfg = detail::apply_axis(m, v, m.base);
    if (cfg.steps < 1) throw std::invalid_argument("sweep: steps must be >= 1");
    if (cfg.batch < 1) throw std::invalid_argument("sweep: batch must be >= 1");
    for (int n : m.family.sizes) {
      const int n_used = static_cast<int>(
          std::ceil(cfg.data_ratio * static_cast<double>(n)));
      if (2 * cfg.batch > n_used)
        throw std::invalid_argument(
            "sweep: batch too large for the effective dataset (need 2b <= n)");
    }
  }
}

// ---------------------------------------------------------------------------
// Joint held-out evaluation: equal fresh sample count per task, pooled mean
// loss and 0/1 accuracy (accuracy stays 0 for regression families).
// ---------------------------------------------------------------------------

struct JointEval {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> per_task_loss;
  std::vector<double> per_task_acc;
};

inline JointEval evaluate_joint(const ParamVector& x,
                                std::span<const TaskEnvironment> envs,
                                int test_m, std::uint64_t seed) {
  if (envs.empty()) throw std::invalid_argument("evaluate_joint: no tasks");
  if (test_m < 1) throw std::invalid_argument("evaluate_joint: test_m must be >= 1");
  JointEval out;
  for (const TaskEnvironment& env : envs) {
    const std::vector<Sample> fresh = env.draw_fresh(test_m, seed);
    double loss = 0.0;
    double hits = 0.0;
    for (const Sample& z : fresh) {
      loss += env.loss(x, z);
      if (env.family() == Family::kMlpTanhSoftmax && env.predict(x, z) == z.label)
        hits += 1.0;
    }
    out.per_task_loss.push_back(loss / static_cast<double>(test_m));
    out.per_task_acc.push_back(hits / static_cast<double>(test_m));
  }
  for (double v : out.per_task_loss) out.loss += v;
  for (double v : out.per_task_acc) out.accuracy += v;
  out.loss /= static_cast<double>(envs.size());
  out.accuracy /= static_cast<double>(envs.size());
  return out;
}

// ---------------------------------------------------------------------------
// Report containers.
// ---------------------------------------------------------------------------

struct SweepCell {
  double axis_value = 0.0;
  std::string method;
  int groups = 0;
  int collapsed = 0;
  int lambda_floored = 0;  // groups whose chi-square weights needed a floor
  double loss_mean = 0.0;
  double loss_se = 0.0;
  double acc_mean = 0.0;
  double acc_se = 0.0;
  double expert_acc_mean = 0.0;  // experts evaluated on their own slices
  double bound_total = 0.0;
  double bound_stability = 0.0;
  double bound_eps_sgd = 0.0;
  double bound_opt = 0.0;
  double chi_sq = 0.0;
  double a1 = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;
  double f0_gap = 0.0;
  double sigma_sq_max = 0.0;
  double zeta_sq_max = 0.0;
  double smoothness = 0.0;
};

struct TrendStat {
  double spearman = 0.0;
  double sign_agreement = 0.0;
  bool flat = false;
  int points = 0;
};

struct SweepReport {
  SweepManifest manifest;
  std::vector<std::string> method_labels;
  std::vector<SweepCell> cells;  // axis-major, method-minor
  std::vector<std::pair<std::string, TrendStat>> trends;
  int total_entries = 0;      // (axis value, group, method) cells
  int collapsed_entries = 0;  // those whose training or evaluation collapsed
};

namespace detail {

// Duplicate merge methods get a numeric suffix so report rows stay unique.
inline std::vector<std::string> method_labels(std::span<const MergeSpec> specs) {
  std::vector<std::string> labels;
  labels.reserve(specs.size());
  for (const MergeSpec& s : specs) {
    std::string base = MergeSpec::method_name(s.method);
    std::string label = base;
    int k = 2;
    while (std::find(labels.begin(), labels.end(), label) != labels.end())
      label = base + "-" + std::to_string(k++);
    labels.push_back(label);
  }
  return labels;
}

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (double v : a) ma += v;
  for (double v : b) mb += v;
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return 0.0;
  return pearson(average_ranks(a), average_ranks(b));
}

inline int delta_sign(double d) {
  if (!(std::abs(d) > 1e-12)) return 0;
  return d > 0.0 ? 1 : -1;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) /
                   static_cast<double>(v.size()));
}

struct MethodOut {
  bool collapsed = true;
  bool lambda_floored = false;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double acc = std::numeric_limits<double>::quiet_NaN();
  BoundBreakdown bd;
};

struct GroupRun {
  bool train_collapsed = false;
  double expert_acc = std::numeric_limits<double>::quiet_NaN();
  double sigma_sq_max = 0.0;
  double zeta_sq_max = 0.0;
  double smoothness = 0.0;
  std::vector<MethodOut> methods;
};

inline GroupRun run_group(const SweepManifest& m,
                          std::span<const TaskEnvironment> pool,
                          const ParamVector& x0,
                          std::span<const double> pool_gaps, double value,
                          int group) {
  GroupRun out;
  out.methods.resize(m.merges.size());

  const int gsize = group_size_at(m, value);
  const std::vector<int> subset =
      group_subset(m.seed, group, gsize, m.family.num_tasks);
  std::vector<TaskEnvironment> envs;
  envs.reserve(subset.size());
  for (int idx : subset) envs.push_back(pool[static_cast<std::size_t>(idx)]);

  std::vector<FinetuneConfig> cfgs;
  cfgs.reserve(subset.size());
  for (int idx : subset) {
    FinetuneConfig cfg = apply_axis(m, value, m.base);
    cfg.seed = mix_seed(m.seed, 0x7E41ull, static_cast<std::uint64_t>(group),
                        static_cast<std::uint64_t>(idx));
    cfgs.push_back(cfg);
  }

  std::vector<TrainResult> results;
  results.reserve(subset.size());
  for (std::size_t t = 0; t < envs.size(); ++t) {
    try {
      results.push_back(finetune(x0, envs[t], cfgs[t]));
    } catch (const DivergedError&) {
      out.train_collapsed = true;
      return out;  // every method row stays collapsed
    }
  }

  const HeterogeneityProfile profile = probe_profile(envs, x0, m.probe);
  for (double v : profile.sigma_sq) out.sigma_sq_max = std::max(out.sigma_sq_max, v);
  for (double v : profile.zeta_sq) out.zeta_sq_max = std::max(out.zeta_sq_max, v);
  out.smoothness = profile.smoothness;

  const std::uint64_t eval_seed =
      mix_seed(m.seed, 0xE7A1ull, static_cast<std::uint64_t>(group));

  double expert_acc = 0.0;
  for (std::size_t t = 0; t < envs.size(); ++t) {
    const std::vector<Sample> fresh = envs[t].draw_fresh(m.test_m, eval_seed);
    double hits = 0.0;
    for (const Sample& z : fresh)
      if (envs[t].family() == Family::kMlpTanhSoftmax &&
          envs[t].predict(results[t].final, z) == z.label)
        hits += 1.0;
    expert_acc += hits / static_cast<double>(m.test_m);
  }
  out.expert_acc = expert_acc / static_cast<double>(envs.size());

  for (std::size_t mi = 0; mi < m.merges.size(); ++mi) {
    MethodOut& mo = out.methods[mi];
    auto [merged, lambdas] = apply_merge(x0, results, envs, m.merges[mi]);
    const JointEval eval = evaluate_joint(merged, envs, m.test_m, eval_seed);
    if (!std::isfinite(eval.loss)) continue;  // stays collapsed
    mo.loss = eval.loss;
    mo.acc = eval.accuracy;

    // The chi-square term needs strictly positive weights; an adaptive fit
    // that zeroes a task out gets a tiny floor (recorded) instead of
    // aborting the cell.
    std::vector<double> lam(lambdas.weights().begin(), lambdas.weights().end());
    if (*std::min_element(lam.begin(), lam.end()) <= 0.0) {
      mo.lambda_floored = true;
      double total = 0.0;
      for (double& w : lam) {
        w += 1e-9;
        total += w;
      }
      for (double& w : lam) w /= total;
    }

    BoundInputs in;
    in.profile = profile;
    for (std::size_t t = 0; t < envs.size(); ++t) {
      in.n.push_back(effective_size(envs[t], cfgs[t].data_ratio));
      in.b.push_back(cfgs[t].batch);
      in.K.push_back(cfgs[t].steps);
    }
    in.lambdas = MergeCoefficients::make(lam);
    in.eta_l = cfgs[0].schedule.eta;
    in.C = m.bound_C;
    in.zeta_coeff = m.zeta_coeff;
    double f0 = 0.0;
    for (std::size_t t = 0; t < subset.size(); ++t)
      f0 += lam[t] * pool_gaps[static_cast<std::size_t>(subset[t])];
    in.f0_gap = f0;
    if (m.base.schedule.kind != Schedule::Kind::kConstant) {
      std::vector<WeightVector> wv;
      wv.reserve(results.size());
      for (const TrainResult& r : results) wv.push_back(r.weight_vector);
      in.weight_vectors = std::move(wv);
    }
    mo.bd = excess_bound(in);
    mo.collapsed = false;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trend statistics: ordinal agreement between the prediction and the
// measured loss across axis values, one series per merge method.
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, TrendStat>> trend_report(
    const SweepReport& report) {
  std::vector<std::pair<std::string, TrendStat>> out;
  for (const std::string& label : report.method_labels) {
    std::vector<double> loss, bound;
    for (const SweepCell& c : report.cells) {
      if (c.method != label) continue;
      if (!std::isfinite(c.loss_mean) || !std::isfinite(c.bound_total)) continue;
      loss.push_back(c.loss_mean);
      bound.push_back(c.bound_total);
    }
    TrendStat t;
    t.points = static_cast<int>(loss.size());
    bool loss_flat = true;
    bool bound_flat = true;
    for (std::size_t i = 1; i < loss.size(); ++i) {
      if (detail::delta_sign(loss[i] - loss[0]) != 0) loss_flat = false;
      if (detail::delta_sign(bound[i] - bound[0]) != 0) bound_flat = false;
    }
    t.flat = loss.size() < 2 || loss_flat || bound_flat;
    if (!t.flat) t.spearman = detail::spearman(bound, loss);
    int agree = 0;
    int pairs = 0;
    for (std::size_t i = 1; i < loss.size(); ++i) {
      pairs += 1;
      if (detail::delta_sign(loss[i] - loss[i - 1]) ==
          detail::delta_sign(bound[i] - bound[i - 1]))
        agree += 1;
    }
    t.sign_agreement =
        pairs > 0 ? static_cast<double>(agree) / static_cast<double>(pairs) : 0.0;
    out.emplace_back(label, t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweep driver. Work items are (axis value, group) pairs; they run on up to
// `jobs` threads and land in preassigned slots, so the aggregate is the same
// ordered reduction no matter the thread count.
// ---------------------------------------------------------------------------

inline SweepReport run_sweep(const SweepManifest& manifest, int jobs = 1) {
  validate_manifest(manifest);
  const std::vector<TaskEnvironment> pool = gen_task_family(manifest.family);
  const ParamVector x0 = pretrained_base(manifest.family);

  // Risk improvement available to each pool task, reused by every cell's
  // f0 estimate: empirical risk at the base minus at the task optimum.
  std::vector<double> pool_gaps;
  pool_gaps.reserve(pool.size());
  for (const TaskEnvironment& env : pool) {
    const double at_base = empirical_risk(env, x0);
    const double w = 1.0;
    const ParamVector opt =
        risk_minimize(std::span<const TaskEnvironment>(&env, 1),
                      std::span<const double>(&w, 1), x0, 4000, 1e-9);
    pool_gaps.push_back(std::max(0.0, at_base - empirical_risk(env, opt)));
  }

  const std::size_t values = manifest.axis_values.size();
  const std::size_t groups = static_cast<std::size_t>(manifest.replicate_groups);
  const std::size_t items = values * groups;
  std::vector<detail::GroupRun> runs(items);
  std::vector<std::string> errors(items);
  std::atomic<std::size_t> cursor{0};

  auto worker = [&]() {
    for (;;) {
      const std::size_t it = cursor.fetch_add(1);
      if (it >= items) return;
      const std::size_t vi = it / groups;
      const std::size_t g = it % groups;
      try {
        runs[it] = detail::run_group(manifest, pool, x0, pool_gaps,
                                     manifest.axis_values[vi],
                                     static_cast<int>(g));
      } catch (const std::exception& e) {
        errors[it] = e.what();
      }
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(jobs), items);
    threads.reserve(count);
    for (std::size_t t = 0; t < count; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
  }
  for (const std::string& err : errors)
    if (!err.empty()) throw std::runtime_error("sweep cell failed: " + err);

  SweepReport report;
  report.manifest = manifest;
  report.method_labels = detail::method_labels(manifest.merges);

  for (std::size_t vi = 0; vi < values; ++vi) {
    for (std::size_t mi = 0; mi < manifest.merges.size(); ++mi) {
      SweepCell cell;
      cell.axis_value = manifest.axis_values[vi];
      cell.method = report.method_labels[mi];
      cell.groups = manifest.replicate_groups;
      std::vector<double> loss, acc, expert_acc;
      std::vector<double> total, stab, eps, opt, chi, a1, a2, a3, f0;
      std::vector<double> sig, zet, smo;
      for (std::size_t g = 0; g < groups; ++g) {
        const detail::GroupRun& gr = runs[vi * groups + g];
        const detail::MethodOut& mo =
            gr.train_collapsed ? detail::MethodOut{} : gr.methods[mi];
        report.total_entries += 1;
        if (gr.train_collapsed || mo.collapsed) {
          report.collapsed_entries += 1;
          cell.collapsed += 1;
          continue;
        }
        if (mo.lambda_floored) cell.lambda_floored += 1;
        loss.push_back(mo.loss);
        acc.push_back(mo.acc);
        expert_acc.push_back(gr.expert_acc);
        total.push_back(mo.bd.total);
        stab.push_back(mo.bd.stability_term);
        eps.push_back(mo.bd.eps_sgd);
        opt.push_back(mo.bd.optimization_term);
        chi.push_back(mo.bd.chi_sq);
        a1.push_back(mo.bd.a1);
        a2.push_back(mo.bd.a2);
        a3.push_back(mo.bd.a3);
        f0.push_back(mo.bd.f0_gap);
        sig.push_back(gr.sigma_sq_max);
        zet.push_back(gr.zeta_sq_max);
        smo.push_back(gr.smoothness);
      }
      cell.loss_mean = detail::mean_of(loss);
      cell.loss_se = detail::stderr_of(loss);
      cell.acc_mean = detail::mean_of(acc);
      cell.acc_se = detail::stderr_of(acc);
      cell.expert_acc_mean = detail::mean_of(expert_acc);
      cell.bound_total = detail::mean_of(total);
      cell.bound_stability = detail::mean_of(stab);
      cell.bound_eps_sgd = detail::mean_of(eps);
      cell.bound_opt = detail::mean_of(opt);
      cell.chi_sq = detail::mean_of(chi);
      cell.a1 = detail::mean_of(a1);
      cell.a2 = detail::mean_of(a2);
      cell.a3 = detail::mean_of(a3);
      cell.f0_gap = detail::mean_of(f0);
      cell.sigma_sq_max = detail::mean_of(sig);
      cell.zeta_sq_max = detail::mean_of(zet);
      cell.smoothness = detail::mean_of(smo);
      report.cells.push_back(std::move(cell));
    }
  }
  report.trends = trend_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization. The JSON report is the canonical artifact; the CSV view is
// derived from it so both stay consistent.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json manifest_to_json(const SweepManifest& m) {
  nlohmann::ordered_json j;
  j["family"] = family_to_json(m.family);
  j["base_config"] = finetune_to_json(m.base);
  j["axis"] = axis_name(m.axis);
  j["axis_values"] = m.axis_values;
  nlohmann::ordered_json specs = nlohmann::ordered_json::array();
  for (const MergeSpec& s : m.merges) specs.push_back(merge_spec_to_json(s));
  j["merge_specs"] = specs;
  j["replicate_groups"] = m.replicate_groups;
  j["group_size"] = m.group_size;
  j["test_m"] = m.test_m;
  j["probe"] = {{"count", m.probe.count},
                {"radius", m.probe.radius},
                {"seed", m.probe.seed}};
  j["bound"] = {{"C", m.bound_C}, {"zeta_coeff", m.zeta_coeff}};
  j["seed"] = m.seed;
  return j;
}

inline SweepManifest manifest_from_json(const nlohmann::json& j) {
  try {
    SweepManifest m;
    m.family = family_from_json(j.at("family"));
    m.base = finetune_from_json(j.at("base_config"));
    m.axis = axis_from_name(j.at("axis").get<std::string>());
    m.axis_values = j.at("axis_values").get<std::vector<double>>();
    for (const auto& js : j.at("merge_specs"))
      m.merges.push_back(merge_spec_from_json(js));
    m.replicate_groups = j.value("replicate_groups", 15);
    m.group_size = j.value("group_size", 8);
    m.test_m = j.value("test_m", 1000);
    if (j.contains("probe")) {
      const auto& jp = j.at("probe");
      m.probe.count = jp.value("count", 32);
      m.probe.radius = jp.value("radius", 1.0);
      m.probe.seed = jp.value("seed", static_cast<std::uint64_t>(0x5EED));
    }
    if (j.contains("bound")) {
      const auto& jb = j.at("bound");
      m.bound_C = jb.value("C", 0.5);
      m.zeta_coeff = jb.value("zeta_coeff", 12);
    }
    m.seed = j.value("seed", static_cast<std::uint64_t>(0));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("sweep manifest: ") + e.what());
  }
}

inline nlohmann::ordered_json report_to_json(const SweepReport& r) {
  nlohmann::ordered_json j;
  j["manifest"] = manifest_to_json(r.manifest);
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const SweepCell& c : r.cells) {
    nlohmann::ordered_json jc;
    jc["axis_value"] = c.axis_value;
    jc["method"] = c.method;
    jc["groups"] = c.groups;
    jc["collapsed"] = c.collapsed;
    jc["lambda_floored"] = c.lambda_floored;
    jc["loss_mean"] = c.loss_mean;
    jc["loss_se"] = c.loss_se;
    jc["acc_mean"] = c.acc_mean;
    jc["acc_se"] = c.acc_se;
    jc["expert_acc_mean"] = c.expert_acc_mean;
    jc["bound_total"] = c.bound_total;
    jc["bound_stability"] = c.bound_stability;
    jc["bound_eps_sgd"] = c.bound_eps_sgd;
    jc["bound_opt"] = c.bound_opt;
    jc["chi_sq"] = c.chi_sq;
    jc["a1"] = c.a1;
    jc["a2"] = c.a2;
    jc["a3"] = c.a3;
    jc["f0_gap"] = c.f0_gap;
    jc["sigma_sq_max"] = c.sigma_sq_max;
    jc["zeta_sq_max"] = c.zeta_sq_max;
    jc["smoothness"] = c.smoothness;
    cells.push_back(jc);
  }
  j["cells"] = cells;
  nlohmann::ordered_json trends = nlohmann::ordered_json::object();
  for (const auto& [label, t] : r.trends) {
    trends[label] = {{"spearman", t.spearman},
                     {"sign_agreement", t.sign_agreement},
                     {"flat", t.flat},
                     {"points", t.points}};
  }
  j["trends"] = trends;
  j["total_entries"] = r.total_entries;
  j["collapsed_entries"] = r.collapsed_entries;
  return j;
}

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0.0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_json_number(const nlohmann::json& v) {
  if (v.is_null()) return "nan";  // JSON has no NaN literal
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  return fmt_double(v.get<double>());
}

}  // namespace detail

// Fixed column order; the leading seven columns are the plotting contract.
inline std::string sweep_csv(const nlohmann::json& report) {
  std::string out =
      "axis_value,method,loss_mean,loss_se,acc_mean,acc_se,bound_total,"
      "bound_stability,bound_eps_sgd,bound_opt,chi_sq,a1,a2,a3,f0_gap,"
      "sigma_sq_max,zeta_sq_max,smoothness,expert_acc_mean,groups,collapsed,"
      "lambda_floored\n";
  for (const auto& c : report.at("cells")) {
    out += detail::fmt_json_number(c.at("axis_value"));
    out += ",";
    out += c.at("method").get<std::string>();
    for (const char* key :
         {"loss_mean", "loss_se", "acc_mean", "acc_se", "bound_total",
          "bound_stability", "bound_eps_sgd", "bound_opt", "chi_sq", "a1",
          "a2", "a3", "f0_gap", "sigma_sq_max", "zeta_sq_max", "smoothness",
          "expert_acc_mean"}) {
      out += ",";
      out += detail::fmt_json_number(c.at(key));
    }
    for (const char* key : {"groups", "collapsed", "lambda_floored"}) {
      out += ",";
      out += std::to_string(c.at(key).get<long long>());
    }
    out += "\n";
  }
  return out;
}

}  // namespace mergelab

#endif  // MERGELAB_SWEEP_HPP_
