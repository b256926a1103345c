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

#ifndef MERGELAB_MERGE_ALGS_HPP_
#define MERGELAB_MERGE_ALGS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergelab/param_vector.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/task_suite.hpp"
#include "mergelab/trainer.hpp"

namespace mergelab {

inline ParamVector uniform_average(const ParamVector& base,
                                   std::span<const TaskVector> deltas) {
  if (deltas.empty())
    throw std::invalid_argument("uniform_average: no task vectors");
  return merge_linear(base, deltas, MergeCoefficients::uniform(deltas.size()));
}

// base + sum_i lambda * delta_i, accumulated per term in ascending task
// order; at lambda = 1/N this reproduces uniform_average bit for bit.
inline ParamVector task_arithmetic(const ParamVector& base,
                                   std::span<const TaskVector> deltas,
                                   double lambda_scalar) {
  if (deltas.empty())
    throw std::invalid_argument("task_arithmetic: no task vectors");
  if (!std::isfinite(lambda_scalar))
    throw std::invalid_argument("task_arithmetic: lambda must be finite");
  for (const TaskVector& t : deltas)
    detail::require_same_dim(t.dim(), base.dim(), "task_arithmetic");
  std::vector<double> out(base.dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double acc = base[k];
    for (std::size_t i = 0; i < deltas.size(); ++i)
      acc += lambda_scalar * deltas[i].delta[k];
    out[k] = acc;
  }
  return ParamVector(std::move(out));
}

// ---------------------------------------------------------------------------
// Normalization-aware averaging of heterogeneous experts. Each expert i ran
// K_i steps with step weights a_i and reference rate eta_i, so its delta is
// x_i - x0 = -eta_i * G_i a_i. The merge averages the per-unit-progress
// directions d_i = G_i a_i / |a_i|_1 and applies the mean progress
// tau_eff = (1/N) sum_i |a_i|_1:
//   x_avg = x0 - tau_eff * sum_i eta_i lambda_i d_i,
//   lambda_i = |a_i|_1 / sum_j |a_j|_1.
// With a shared eta this equals the plain (1/N) average of the experts.
// ---------------------------------------------------------------------------

struct NormalizedMergePlan {
  double tau_eff = 0.0;
  std::vector<double> l1_norms;
  MergeCoefficients lambdas = MergeCoefficients::uniform(1);
  std::vector<ParamVector> directions;  // d_i = G_i a_i / |a_i|_1
};

inline std::pair<ParamVector, NormalizedMergePlan> normalized_merge(
    const ParamVector& base, std::span<const TrainResult> results) {
  if (results.empty())
    throw std::invalid_argument("normalized_merge: no train results");
  const std::size_t n = results.size();
  std::vector<double> l1(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::require_same_dim(results[i].final.dim(), base.dim(),
                             "normalized_merge");
    l1[i] = results[i].weight_vector.l1();
    if (!(l1[i] > 0.0))
      throw std::invalid_argument(
          "normalized_merge: weight vector has zero mass");
    if (!(results[i].eta_ref > 0.0))
      throw std::invalid_argument("normalized_merge: eta_ref must be positive");
    total += l1[i];
  }

  NormalizedMergePlan plan;
  plan.l1_norms = l1;
  plan.tau_eff = total / static_cast<double>(n);
  std::vector<double> lambda(n);
  for (std::size_t i = 0; i < n; ++i) lambda[i] = l1[i] / total;
  plan.lambdas = MergeCoefficients::make(lambda);
  plan.directions.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d(base.dim());
    double inv = 1.0 / (results[i].eta_ref * l1[i]);
    for (std::size_t k = 0; k < d.size(); ++k)
      d[k] = (base[k] - results[i].final[k]) * inv;
    plan.directions.emplace_back(std::move(d));
  }

  std::vector<double> out(base.dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double acc = base[k];
    for (std::size_t i = 0; i < n; ++i)
      acc -= plan.tau_eff * results[i].eta_ref * plan.lambdas[i] *
             plan.directions[i][k];
    out[k] = acc;
  }
  return {ParamVector(std::move(out)), std::move(plan)};
}

// ---------------------------------------------------------------------------
// Trim / elect-sign / disjoint-merge. Per task, keep the ceil(density * d)
// largest-magnitude entries (ties keep the lower coordinate). Per coordinate,
// elect the sign of the summed survivors; a zero sum takes the sign of the
// largest-magnitude survivor and positive if that is tied too. Survivors
// whose sign matches are averaged with weights renormalized over them.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<double>> trim_task_vectors(
    std::span<const TaskVector> deltas, double density) {
  const std::size_t d = deltas[0].dim();
  const std::size_t keep = static_cast<std::size_t>(
      std::ceil(density * static_cast<double>(d)));
  std::vector<std::vector<double>> trimmed(deltas.size());
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    const ParamVector& v = deltas[i].delta;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       double ma = std::abs(v[a]), mb = std::abs(v[b]);
                       if (ma != mb) return ma > mb;
                       return a < b;
                     });
    trimmed[i].assign(d, 0.0);
    for (std::size_t r = 0; r < keep && r < d; ++r)
      trimmed[i][order[r]] = v[order[r]];
  }
  return trimmed;
}

}  // namespace detail

// Per-task vectors after trim and sign filtering: entries disagreeing with
// the elected sign are zeroed. Useful for inspecting how much disagreement
// the merge removed.
inline std::vector<ParamVector> ties_filtered_components(
    std::span<const TaskVector> deltas, double density) {
  if (deltas.empty())
    throw std::invalid_argument("ties_merge: no task vectors");
  if (!(density > 0.0 && density <= 1.0))
    throw std::invalid_argument("ties_merge: density must lie in (0, 1]");
  const std::size_t d = deltas[0].dim();
  for (const TaskVector& t : deltas)
    detail::require_same_dim(t.dim(), d, "ties_merge");
  auto trimmed = detail::trim_task_vectors(deltas, density);

  std::vector<std::vector<double>> filtered(deltas.size(),
                                            std::vector<double>(d, 0.0));
  for (std::size_t k = 0; k < d; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < deltas.size(); ++i) sum += trimmed[i][k];
    double sign;
    if (sum > 0.0) {
      sign = 1.0;
    } else if (sum < 0.0) {
      sign = -1.0;
    } else {
      double best_abs = 0.0;
      double best_sign = 1.0;
      bool tie_conflict = false;
      for (std::size_t i = 0; i < deltas.size(); ++i) {
        double m = std::abs(trimmed[i][k]);
        if (m > best_abs) {
          best_abs = m;
          best_sign = trimmed[i][k] > 0.0 ? 1.0 : -1.0;
          tie_conflict = false;
        } else if (m == best_abs && m > 0.0 &&
                   (trimmed[i][k] > 0.0 ? 1.0 : -1.0) != best_sign) {
          tie_conflict = true;
        }
      }
      sign = (best_abs == 0.0 || tie_conflict) ? 1.0 : best_sign;
    }
    for (std::size_t i = 0; i < deltas.size(); ++i)
      if (trimmed[i][k] != 0.0 && (trimmed[i][k] > 0.0 ? 1.0 : -1.0) == sign)
        filtered[i][k] = trimmed[i][k];
  }

  std::vector<ParamVector> out;
  out.reserve(deltas.size());
  for (auto& f : filtered) out.emplace_back(std::move(f));
  return out;
}

inline ParamVector ties_merge(const ParamVector& base,
                              std::span<const TaskVector> deltas,
                              double density,
                              const MergeCoefficients& lambdas) {
  if (deltas.size() != lambdas.size())
    throw std::invalid_argument("ties_merge: coefficient count mismatch");
  std::vector<ParamVector> filtered = ties_filtered_components(deltas, density);
  detail::require_same_dim(filtered[0].dim(), base.dim(), "ties_merge");
  std::vector<double> out(base.dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < filtered.size(); ++i) {
      if (filtered[i][k] != 0.0) {
        num += lambdas[i] * filtered[i][k];
        den += lambdas[i];
      }
    }
    out[k] = base[k] + (den > 0.0 ? num / den : 0.0);
  }
  return ParamVector(std::move(out));
}

// ---------------------------------------------------------------------------
// Random drop with rescale. Entry (i, k) is zeroed when the hash-derived
// uniform is below drop_p, surviving entries are scaled by 1/(1 - drop_p);
// the masked vectors then pass through merge_linear. drop_p = 0 is exactly
// the unmasked merge.
// ---------------------------------------------------------------------------

inline ParamVector dare_merge(const ParamVector& base,
                              std::span<const TaskVector> deltas,
                              double drop_p, const MergeCoefficients& lambdas,
                              std::uint64_t seed) {
  if (deltas.empty()) throw std::invalid_argument("dare_merge: no task vectors");
  if (!(drop_p >= 0.0 && drop_p < 1.0))
    throw std::invalid_argument("dare_merge: drop_p must lie in [0, 1)");
  if (deltas.size() != lambdas.size())
    throw std::invalid_argument("dare_merge: coefficient count mismatch");
  const double rescale = 1.0 / (1.0 - drop_p);
  std::vector<TaskVector> masked;
  masked.reserve(deltas.size());
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    detail::require_same_dim(deltas[i].dim(), base.dim(), "dare_merge");
    std::vector<double> m(base.dim());
    for (std::size_t k = 0; k < m.size(); ++k) {
      double u = bits_to_unit(mix_seed(seed, i, k));
      m[k] = u < drop_p ? 0.0 : deltas[i].delta[k] * rescale;
    }
    masked.push_back(TaskVector{ParamVector(std::move(m))});
  }
  return merge_linear(base, masked, lambdas);
}

// ---------------------------------------------------------------------------
// Adaptive coefficients: projected gradient descent of the mean held-out
// loss of the merged model over the probability simplex.
// ---------------------------------------------------------------------------

struct HeldoutSet {
  const TaskEnvironment* env = nullptr;
  std::vector<std::uint32_t> indices;
};

// Euclidean projection onto the probability simplex (sort and threshold).
inline std::vector<double> project_to_simplex(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("project_to_simplex: empty input");
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, theta = 0.0;
  std::size_t rho = 0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    css += u[j];
    double t = (css - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) {
      rho = j + 1;
      theta = t;
    }
  }
  for (double& x : v) x = std::max(x - theta, 0.0);
  double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (double& x : v) x /= s;
  return v;
}

namespace detail {

inline double heldout_loss(const ParamVector& x,
                           std::span<const HeldoutSet> heldout) {
  double acc = 0.0;
  for (const HeldoutSet& h : heldout) {
    double task = 0.0;
    for (std::uint32_t j : h.indices)
      task += h.env->loss(x, h.env->dataset()[j]);
    acc += task / static_cast<double>(h.indices.size());
  }
  return acc / static_cast<double>(heldout.size());
}

inline ParamVector heldout_grad(const ParamVector& x,
                                std::span<const HeldoutSet> heldout) {
  std::vector<double> g(x.dim(), 0.0);
  std::vector<double> task(x.dim());
  for (const HeldoutSet& h : heldout) {
    h.env->batch_grad_raw(x.data(), h.indices, task.data());
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += task[k];
  }
  for (double& v : g) v /= static_cast<double>(heldout.size());
  return ParamVector(std::move(g));
}

}  // namespace detail

inline MergeCoefficients adaptive_coefficients(
    const ParamVector& base, std::span<const TaskVector> deltas,
    std::span<const HeldoutSet> heldout, int steps, double step_size) {
  if (deltas.empty())
    throw std::invalid_argument("adaptive_coefficients: no task vectors");
  if (heldout.empty())
    throw std::invalid_argument("adaptive_coefficients: empty held-out data");
  for (const HeldoutSet& h : heldout) {
    if (h.env == nullptr || h.indices.empty())
      throw std::invalid_argument("adaptive_coefficients: empty held-out set");
    for (std::uint32_t j : h.indices)
      if (j >= static_cast<std::uint32_t>(h.env->size()))
        throw std::out_of_range("adaptive_coefficients: held-out index");
  }
  if (steps < 0 || !(step_size > 0.0))
    throw std::invalid_argument("adaptive_coefficients: bad optimizer params");

  const std::size_t n = deltas.size();
  if (n == 1) return MergeCoefficients::uniform(1);

  std::vector<double> lambda(n, 1.0 / static_cast<double>(n));
  auto merged = [&](const std::vector<double>& lam) {
    return merge_linear(base, deltas, MergeCoefficients::make(lam));
  };
  double cur = detail::heldout_loss(merged(lambda), heldout);
  if (!std::isfinite(cur))
    throw std::runtime_error("adaptive_coefficients: non-finite held-out loss");

  for (int it = 0; it < steps; ++it) {
    ParamVector gx = detail::heldout_grad(merged(lambda), heldout);
    std::vector<double> glam(n);
    for (std::size_t i = 0; i < n; ++i) glam[i] = dot(gx, deltas[i].delta);

    double t = step_size;
    bool accepted = false;
    for (int half = 0; half < 40; ++half) {
      std::vector<double> cand(n);
      for (std::size_t i = 0; i < n; ++i) cand[i] = lambda[i] - t * glam[i];
      cand = project_to_simplex(std::move(cand));
      double f = detail::heldout_loss(merged(cand), heldout);
      if (!std::isfinite(f))
        throw std::runtime_error(
            "adaptive_coefficients: non-finite held-out loss");
      if (f < cur) {
        lambda = std::move(cand);
        cur = f;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;  // held-out loss is monotone by construction
  }
  return MergeCoefficients::make(lambda);
}

// ---------------------------------------------------------------------------
// Merge spec: {method, params, seed}.
// ---------------------------------------------------------------------------

struct MergeSpec {
  enum class Method { kUniform, kTaskArithmetic, kNormalized, kTies, kDare, kAdaptive };

  Method method = Method::kUniform;
  double lambda_scalar = 0.0;   // task arithmetic
  double density = 0.2;         // ties
  double drop_p = 0.9;          // dare
  std::vector<double> weights;  // optional ties/dare coefficients
  int heldout_m = 256;          // adaptive
  int opt_steps = 100;          // adaptive
  double opt_step_size = 1.0;   // adaptive
  std::uint64_t seed = 0;

  static std::string method_name(Method m) {
    switch (m) {
      case Method::kUniform: return "uniform";
      case Method::kTaskArithmetic: return "task-arithmetic";
      case Method::kNormalized: return "normalized";
      case Method::kTies: return "ties";
      case Method::kDare: return "dare";
      case Method::kAdaptive: return "adaptive";
    }
    return "?";
  }
};

inline nlohmann::ordered_json merge_spec_to_json(const MergeSpec& s) {
  nlohmann::ordered_json j;
  j["method"] = MergeSpec::method_name(s.method);
  nlohmann::ordered_json p = nlohmann::ordered_json::object();
  switch (s.method) {
    case MergeSpec::Method::kUniform:
    case MergeSpec::Method::kNormalized:
      break;
    case MergeSpec::Method::kTaskArithmetic:
      p["lambda"] = s.lambda_scalar;
      break;
    case MergeSpec::Method::kTies:
      p["density"] = s.density;
      if (!s.weights.empty()) p["weights"] = s.weights;
      break;
    case MergeSpec::Method::kDare:
      p["drop_p"] = s.drop_p;
      if (!s.weights.empty()) p["weights"] = s.weights;
      break;
    case MergeSpec::Method::kAdaptive:
      p["heldout_m"] = s.heldout_m;
      p["steps"] = s.opt_steps;
      p["step_size"] = s.opt_step_size;
      break;
  }
  j["params"] = p;
  j["seed"] = s.seed;
  return j;
}

inline MergeSpec merge_spec_from_json(const nlohmann::json& j) {
  MergeSpec s;
  try {
    std::string m = j.at("method").get<std::string>();
    const nlohmann::json p = j.value("params", nlohmann::json::object());
    if (m == "uniform") {
      s.method = MergeSpec::Method::kUniform;
    } else if (m == "task-arithmetic") {
      s.method = MergeSpec::Method::kTaskArithmetic;
      s.lambda_scalar = p.at("lambda").get<double>();
    } else if (m == "normalized") {
      s.method = MergeSpec::Method::kNormalized;
    } else if (m == "ties") {
      s.method = MergeSpec::Method::kTies;
      s.density = p.at("density").get<double>();
      if (p.contains("weights")) s.weights = p["weights"].get<std::vector<double>>();
    } else if (m == "dare") {
      s.method = MergeSpec::Method::kDare;
      s.drop_p = p.at("drop_p").get<double>();
      if (p.contains("weights")) s.weights = p["weights"].get<std::vector<double>>();
    } else if (m == "adaptive") {
      s.method = MergeSpec::Method::kAdaptive;
      s.heldout_m = p.value("heldout_m", 256);
      s.opt_steps = p.value("steps", 100);
      s.opt_step_size = p.value("step_size", 1.0);
    } else {
      throw std::invalid_argument("merge spec: unknown method " + m);
    }
    s.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("merge spec: ") + e.what());
  }
  return s;
}

// Applies a merge spec to fine-tuned experts. `envs` supplies held-out draws
// for the adaptive method and may be empty for the others. Returns the
// merged parameters and the coefficients the method effectively used.
inline std::pair<ParamVector, MergeCoefficients> apply_merge(
    const ParamVector& base, std::span<const TrainResult> results,
    std::span<const TaskEnvironment> envs, const MergeSpec& spec) {
  if (results.empty()) throw std::invalid_argument("apply_merge: no experts");
  const std::size_t n = results.size();
  std::vector<TaskVector> deltas;
  deltas.reserve(n);
  for (const TrainResult& r : results)
    deltas.push_back(task_vector(r.final, base));

  MergeCoefficients coeffs =
      spec.weights.empty() ? MergeCoefficients::uniform(n)
                           : MergeCoefficients::make(spec.weights);
  switch (spec.method) {
    case MergeSpec::Method::kUniform:
      return {uniform_average(base, deltas), MergeCoefficients::uniform(n)};
    case MergeSpec::Method::kTaskArithmetic:
      return {task_arithmetic(base, deltas, spec.lambda_scalar),
              MergeCoefficients::uniform(n)};
    case MergeSpec::Method::kNormalized: {
      auto [merged, plan] = normalized_merge(base, results);
      return {std::move(merged), plan.lambdas};
    }
    case MergeSpec::Method::kTies:
      return {ties_merge(base, deltas, spec.density, coeffs), coeffs};
    case MergeSpec::Method::kDare:
      return {dare_merge(base, deltas, spec.drop_p, coeffs, spec.seed), coeffs};
    case MergeSpec::Method::kAdaptive: {
      if (envs.size() != n)
        throw std::invalid_argument(
            "apply_merge: adaptive merge needs one environment per expert");
      std::vector<TaskEnvironment> fresh;
      std::vector<HeldoutSet> heldout(n);
      fresh.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<Sample> draws = envs[i].draw_fresh(
            spec.heldout_m, mix_seed(spec.seed, 0x4E1Dull, i));
        fresh.emplace_back(envs[i].task_id(), envs[i].family(), envs[i].spec(),
                           std::move(draws), envs[i].feature_dim(),
                           envs[i].num_classes(), envs[i].hidden_dim());
      }
      for (std::size_t i = 0; i < n; ++i) {
        heldout[i].env = &fresh[i];
        heldout[i].indices.resize(static_cast<std::size_t>(fresh[i].size()));
        for (std::size_t j = 0; j < heldout[i].indices.size(); ++j)
          heldout[i].indices[j] = static_cast<std::uint32_t>(j);
      }
      MergeCoefficients lam = adaptive_coefficients(
          base, deltas, heldout, spec.opt_steps, spec.opt_step_size);
      return {merge_linear(base, deltas, lam), lam};
    }
  }
  throw std::logic_error("apply_merge: unreachable");
}

}  // namespace mergelab

#endif  // MERGELAB_MERGE_ALGS_HPP_
