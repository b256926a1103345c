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

#ifndef MERGELAB_BOUND_CALC_HPP_
#define MERGELAB_BOUND_CALC_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
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

// Per-task constants feeding the bounds. sigma_sq is the unit-batch
// stochastic-gradient variance; a batch of size b enjoys sigma_sq / b.
struct HeterogeneityProfile {
  enum class Provenance { kClosedForm, kProbed };

  std::vector<double> sigma_sq;
  std::vector<double> zeta_sq;
  double smoothness = 1.0;
  Provenance provenance = Provenance::kProbed;
};

struct BoundInputs {
  HeterogeneityProfile profile;
  std::vector<std::int64_t> n;
  std::vector<std::int64_t> b;
  std::vector<std::int64_t> K;
  MergeCoefficients lambdas = MergeCoefficients::uniform(1);
  double eta_l = 1e-3;
  double C = 0.5;       // optimization-error constant (PL-type)
  double f0_gap = 0.0;  // estimate of weighted risk at x0 minus its infimum
  int zeta_coeff = 12;  // 12 or 5; scales the zeta term of eps_sgd
  std::optional<std::vector<WeightVector>> weight_vectors;

  std::size_t tasks() const { return lambdas.size(); }
};

inline void validate_bound_inputs(const BoundInputs& in) {
  const std::size_t n = in.tasks();
  if (n == 0) throw std::invalid_argument("bound inputs: no tasks");
  if (in.profile.sigma_sq.size() != n || in.profile.zeta_sq.size() != n ||
      in.n.size() != n || in.b.size() != n || in.K.size() != n)
    throw std::invalid_argument("bound inputs: per-task arrays must have N entries");
  if (!(in.profile.smoothness > 0.0))
    throw std::invalid_argument("bound inputs: L must be positive");
  for (double v : in.profile.sigma_sq)
    if (!(v >= 0.0)) throw std::invalid_argument("bound inputs: sigma_sq < 0");
  for (double v : in.profile.zeta_sq)
    if (!(v >= 0.0)) throw std::invalid_argument("bound inputs: zeta_sq < 0");
  for (std::size_t i = 0; i < n; ++i) {
    if (in.K[i] < 1) throw std::invalid_argument("bound inputs: K_i must be >= 1");
    if (in.b[i] < 1) throw std::invalid_argument("bound inputs: b_i must be >= 1");
    if (in.n[i] < 2 * in.b[i])
      throw std::invalid_argument("bound inputs: need n_i >= 2 b_i");
  }
  if (!(in.eta_l > 0.0)) throw std::invalid_argument("bound inputs: eta_l <= 0");
  if (!(in.C >= 0.0)) throw std::invalid_argument("bound inputs: C < 0");
  if (!(in.f0_gap >= 0.0)) throw std::invalid_argument("bound inputs: f0_gap < 0");
  if (in.zeta_coeff != 5 && in.zeta_coeff != 12)
    throw std::invalid_argument("bound inputs: zeta_coeff must be 5 or 12");
  if (in.weight_vectors) {
    if (in.weight_vectors->size() != n)
      throw std::invalid_argument("bound inputs: weight vector count mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = (*in.weight_vectors)[i].a;
      if (a.size() != static_cast<std::size_t>(in.K[i]))
        throw std::invalid_argument("bound inputs: weight vector length != K_i");
      for (double v : a)
        if (!(v >= 0.0))
          throw std::invalid_argument("bound inputs: weight vectors must be >= 0");
      if (!((*in.weight_vectors)[i].l1() > 0.0))
        throw std::invalid_argument("bound inputs: weight vector has zero mass");
    }
  }
}

// ---------------------------------------------------------------------------
// Aggregation coefficients. lambdas here are the surrogate weights induced by
// the step-weight masses |a_i|_1 (for plain SGD, by the step counts K_i).
// ---------------------------------------------------------------------------

struct ACoefficients {
  double a1 = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;
  double tau_eff = 0.0;
  std::vector<double> lambdas;
};

inline ACoefficients a_coefficients(std::span<const WeightVector> avs) {
  if (avs.empty()) throw std::invalid_argument("a_coefficients: empty input");
  const std::size_t n = avs.size();
  std::vector<double> l1(n), l2sq(n), last(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    l1[i] = avs[i].l1();
    l2sq[i] = avs[i].l2_sq();
    last[i] = avs[i].last();
    if (!(l1[i] > 0.0))
      throw std::invalid_argument("a_coefficients: weight vector with zero mass");
    total += l1[i];
  }
  ACoefficients out;
  out.tau_eff = total / static_cast<double>(n);
  out.lambdas.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.lambdas[i] = l1[i] / total;
  double a1 = 0.0, a2 = 0.0, a3 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    a1 += out.lambdas[i] * out.lambdas[i] * l2sq[i] / (l1[i] * l1[i]);
    a2 += out.lambdas[i] * (l2sq[i] - last[i] * last[i]);
    a3 = std::max(a3, l1[i] * (l1[i] - last[i]));
  }
  out.a1 = out.tau_eff * static_cast<double>(n) * a1;
  out.a2 = a2;
  out.a3 = a3;
  return out;
}

inline ACoefficients a_coefficients(std::span<const std::int64_t> steps) {
  if (steps.empty()) throw std::invalid_argument("a_coefficients: empty input");
  const std::size_t n = steps.size();
  double total = 0.0;
  for (std::int64_t k : steps) {
    if (k < 1) throw std::invalid_argument("a_coefficients: K_i must be >= 1");
    total += static_cast<double>(k);
  }
  ACoefficients out;
  out.tau_eff = total / static_cast<double>(n);  // = mean K
  out.lambdas.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.lambdas[i] = static_cast<double>(steps[i]) / total;
  double a1 = 0.0, a2 = 0.0, a3 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double k = static_cast<double>(steps[i]);
    a1 += (out.tau_eff / k) * out.lambdas[i] * out.lambdas[i];
    a2 += out.lambdas[i] * (k - 1.0);
    a3 = std::max(a3, k * (k - 1.0));
  }
  out.a1 = static_cast<double>(n) * a1;
  out.a2 = a2;
  out.a3 = a3;
  return out;
}

inline double mean_steps(std::span<const std::int64_t> steps) {
  double total = 0.0;
  for (std::int64_t k : steps) total += static_cast<double>(k);
  return total / static_cast<double>(steps.size());
}

// ---------------------------------------------------------------------------
// Bound formulas.
// ---------------------------------------------------------------------------

// S = sum_i lambda_i K_i (sigma_i^2 / n_i + 3 b_i zeta_i^2 / n_i).
inline double stability_sum(const BoundInputs& in) {
  double s = 0.0;
  for (std::size_t i = 0; i < in.tasks(); ++i) {
    double ni = static_cast<double>(in.n[i]);
    s += in.lambdas[i] * static_cast<double>(in.K[i]) *
         (in.profile.sigma_sq[i] / ni +
          3.0 * static_cast<double>(in.b[i]) * in.profile.zeta_sq[i] / ni);
  }
  return s;
}

// Model-stability bound: 16 eta^2 S.
inline double stability_bound(const BoundInputs& in) {
  validate_bound_inputs(in);
  return 16.0 * in.eta_l * in.eta_l * stability_sum(in);
}

inline ACoefficients input_a_coefficients(const BoundInputs& in) {
  if (in.weight_vectors) {
    return a_coefficients(std::span<const WeightVector>(*in.weight_vectors));
  }
  return a_coefficients(std::span<const std::int64_t>(in.K));
}

// Surrogate-objective optimization error after N*K_bar total steps, with
// sigma and zeta taken as maxima over tasks and the zeta term scaled by
// zeta_coeff (12 by default, 5 selectable).
inline double eps_sgd(const BoundInputs& in, const ACoefficients& ac) {
  validate_bound_inputs(in);
  const double n = static_cast<double>(in.tasks());
  const double k_bar = mean_steps(in.K);
  const double l = in.profile.smoothness;
  double sigma_sq = 0.0, zeta_sq = 0.0;
  for (double v : in.profile.sigma_sq) sigma_sq = std::max(sigma_sq, v);
  for (double v : in.profile.zeta_sq) zeta_sq = std::max(zeta_sq, v);
  const double root = std::sqrt(n * k_bar);
  return 4.0 * in.f0_gap / root + 4.0 * l * sigma_sq * ac.a1 / root +
         6.0 * n * l * l * sigma_sq * ac.a2 / k_bar +
         static_cast<double>(in.zeta_coeff) * n * l * l * zeta_sq * ac.a3 /
             k_bar;
}

inline double eps_sgd(const BoundInputs& in) {
  return eps_sgd(in, input_a_coefficients(in));
}

// chi^2 divergence of uniform weights from lambda.
inline double chi_square(const MergeCoefficients& lambdas) {
  const double n = static_cast<double>(lambdas.size());
  double s = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (lambdas[i] == 0.0)
      throw std::domain_error(
          "chi_square: degenerate coefficient (lambda_i = 0)");
    double d = 1.0 / n - lambdas[i];
    s += d * d / (lambdas[i] * lambdas[i]);
  }
  return s;
}

inline double weighted_zeta_sq(const BoundInputs& in) {
  double s = 0.0;
  for (std::size_t i = 0; i < in.tasks(); ++i)
    s += in.lambdas[i] * in.profile.zeta_sq[i];
  return s;
}

// Gradient-norm bound at the merged point: 2 (chi^2 + 1) eps + 2 chi^2 sum_i
// lambda_i zeta_i^2.
inline double original_grad_bound(const BoundInputs& in) {
  validate_bound_inputs(in);
  double chi = chi_square(in.lambdas);
  return 2.0 * (chi + 1.0) * eps_sgd(in) + 2.0 * chi * weighted_zeta_sq(in);
}

// B = chi^2 sum lambda_i zeta_i^2 + (chi^2 + 1) eps_sgd: the gradient-side
// bracket of the excess-error bound.
inline double grad_bracket(const BoundInputs& in) {
  double chi = chi_square(in.lambdas);
  return chi * weighted_zeta_sq(in) + (chi + 1.0) * eps_sgd(in);
}

// 8 (L + gamma) eta^2 S + (1/gamma + 2C) B.
inline double bound_at_gamma(const BoundInputs& in, double gamma) {
  validate_bound_inputs(in);
  if (!(gamma > 0.0))
    throw std::invalid_argument("bound_at_gamma: gamma must be positive");
  double s = stability_sum(in);
  double b = grad_bracket(in);
  return 8.0 * (in.profile.smoothness + gamma) * in.eta_l * in.eta_l * s +
         (1.0 / gamma + 2.0 * in.C) * b;
}

// Minimizer of bound_at_gamma. Degenerate stability (denominator 0) yields
// an "unbounded" marker, both sides 0 an "undefined" one.
struct GammaStar {
  enum class Kind { kFinite, kUnbounded, kUndefined };
  Kind kind = Kind::kFinite;
  double value = 0.0;

  std::string to_string() const {
    if (kind == Kind::kUnbounded) return "unbounded";
    if (kind == Kind::kUndefined) return "undefined";
    return std::to_string(value);
  }
};

inline GammaStar gamma_star(const BoundInputs& in) {
  validate_bound_inputs(in);
  double denom = 8.0 * in.eta_l * in.eta_l * stability_sum(in);
  double num = grad_bracket(in);
  if (denom == 0.0 && num == 0.0) return {GammaStar::Kind::kUndefined, 0.0};
  if (denom == 0.0) return {GammaStar::Kind::kUnbounded, 0.0};
  return {GammaStar::Kind::kFinite, std::sqrt(num / denom)};
}

struct BoundBreakdown {
  double stability_term = 0.0;  // 8 (L + 1) eta^2 S
  double a1 = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;
  double tau_eff = 0.0;
  double eps_sgd = 0.0;
  double chi_sq = 0.0;
  GammaStar gamma_star;
  double optimization_term = 0.0;  // (2C + 1) B
  double total = 0.0;
  double total_at_gamma_star = 0.0;  // tighter pre-relaxation value
  double model_stability = 0.0;      // 16 eta^2 S
  double f0_gap = 0.0;
};

// Excess-error bound 8(L+1) eta^2 S + (2C+1) B together with every named
// intermediate. total_at_gamma_star reports the pre-relaxation bound
// 8 L eta^2 S + 2 C B + 4 sqrt(2) eta sqrt(S B) via bound_at_gamma.
inline BoundBreakdown excess_bound(const BoundInputs& in) {
  validate_bound_inputs(in);
  BoundBreakdown out;
  ACoefficients ac = input_a_coefficients(in);
  out.a1 = ac.a1;
  out.a2 = ac.a2;
  out.a3 = ac.a3;
  out.tau_eff = ac.tau_eff;
  out.eps_sgd = eps_sgd(in, ac);
  out.chi_sq = chi_square(in.lambdas);
  out.f0_gap = in.f0_gap;

  const double s = stability_sum(in);
  const double b = out.chi_sq * weighted_zeta_sq(in) + (out.chi_sq + 1.0) * out.eps_sgd;
  const double eta_sq = in.eta_l * in.eta_l;
  out.model_stability = 16.0 * eta_sq * s;
  out.stability_term = 8.0 * (in.profile.smoothness + 1.0) * eta_sq * s;
  out.optimization_term = (2.0 * in.C + 1.0) * b;
  out.total = out.stability_term + out.optimization_term;

  out.gamma_star = gamma_star(in);
  if (out.gamma_star.kind == GammaStar::Kind::kUndefined) {
    out.total_at_gamma_star = 0.0;
  } else if (out.gamma_star.kind == GammaStar::Kind::kUnbounded) {
    out.total_at_gamma_star = 2.0 * in.C * b;
  } else if (out.gamma_star.value == 0.0) {
    out.total_at_gamma_star = 8.0 * in.profile.smoothness * eta_sq * s;
  } else {
    out.total_at_gamma_star = bound_at_gamma(in, out.gamma_star.value);
  }
  return out;
}

inline std::pair<double, double> dissimilarity_constants(
    const MergeCoefficients& lambdas, std::span<const double> zeta_sq) {
  if (lambdas.size() != zeta_sq.size())
    throw std::invalid_argument("dissimilarity_constants: size mismatch");
  double kappa = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i)
    kappa += lambdas[i] * zeta_sq[i];
  return {2.0, 2.0 * kappa};
}

// ---------------------------------------------------------------------------
// Constant estimation probes.
// ---------------------------------------------------------------------------

struct ProbeOptions {
  int count = 32;
  double radius = 1.0;
  std::uint64_t seed = 0x5EEDull;
};

// center plus `count` points on the sphere of the given radius around it.
inline std::vector<ParamVector> probe_points(const ParamVector& center,
                                             const ProbeOptions& opts = {}) {
  if (opts.count < 0) throw std::invalid_argument("probe_points: count < 0");
  std::vector<ParamVector> out;
  out.reserve(static_cast<std::size_t>(opts.count) + 1);
  out.push_back(center);
  SplitMix g(mix_seed(opts.seed, 0x9B0B5ull));
  for (int i = 0; i < opts.count; ++i) {
    std::vector<double> dir(center.dim());
    double norm = 0.0;
    for (std::size_t k = 0; k < dir.size(); ++k) {
      dir[k] = g.next_gaussian();
      norm += dir[k] * dir[k];
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) norm = 1.0;
    std::vector<double> pt(center.dim());
    for (std::size_t k = 0; k < pt.size(); ++k)
      pt[k] = center[k] + opts.radius * dir[k] / norm;
    out.emplace_back(std::move(pt));
  }
  return out;
}

// Unit-batch gradient variance, maximized over probes around x_ref.
inline double estimate_sigma(const TaskEnvironment& env,
                             const ParamVector& x_ref,
                             const ProbeOptions& opts = {}) {
  std::vector<ParamVector> probes = probe_points(x_ref, opts);
  const std::size_t d = env.param_dim();
  double best = 0.0;
  std::vector<double> mean(d), g(d);
  for (const ParamVector& x : probes) {
    std::vector<std::uint32_t> all(static_cast<std::size_t>(env.size()));
    for (std::size_t j = 0; j < all.size(); ++j)
      all[j] = static_cast<std::uint32_t>(j);
    env.batch_grad_raw(x.data(), all, mean.data());
    double acc = 0.0;
    for (const Sample& z : env.dataset()) {
      std::fill(g.begin(), g.end(), 0.0);
      env.accumulate_grad_raw(x.data(), z, g.data());
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = g[k] - mean[k];
        dist += diff * diff;
      }
      acc += dist;
    }
    best = std::max(best, acc / static_cast<double>(env.size()));
  }
  return best;
}

// Per-task max over probes of the squared deviation of the task gradient
// from the uniform mean gradient.
inline std::vector<double> estimate_zeta(std::span<const TaskEnvironment> envs,
                                         std::span<const ParamVector> probes) {
  if (envs.empty()) throw std::invalid_argument("estimate_zeta: no tasks");
  if (probes.empty()) throw std::invalid_argument("estimate_zeta: no probes");
  const std::size_t d = envs[0].param_dim();
  std::vector<double> zeta(envs.size(), 0.0);
  for (const ParamVector& x : probes) {
    std::vector<ParamVector> grads;
    grads.reserve(envs.size());
    std::vector<double> mean(d, 0.0);
    for (const TaskEnvironment& env : envs) {
      grads.push_back(env.full_grad(x));
      for (std::size_t k = 0; k < d; ++k) mean[k] += grads.back()[k];
    }
    for (double& v : mean) v /= static_cast<double>(envs.size());
    for (std::size_t i = 0; i < envs.size(); ++i) {
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = grads[i][k] - mean[k];
        dist += diff * diff;
      }
      zeta[i] = std::max(zeta[i], dist);
    }
  }
  return zeta;
}

// Per-sample smoothness via finite differences over probe pairs, refined by
// re-probing along the observed gradient-difference direction.
inline double estimate_smoothness_probed(
    std::span<const TaskEnvironment> envs,
    std::span<const std::pair<ParamVector, ParamVector>> pairs) {
  if (pairs.empty())
    throw std::invalid_argument("estimate_L: need at least one probe pair");
  double best = 0.0;
  for (const auto& [x, y] : pairs) {
    double dist_sq = squared_distance(x, y);
    if (dist_sq == 0.0)
      throw std::invalid_argument("estimate_L: coincident probe pair");
    for (const TaskEnvironment& env : envs) {
      const std::size_t d = env.param_dim();
      std::vector<double> gx(d), gy(d);
      ParamVector a = x, b = y;
      for (int refine = 0; refine < 3; ++refine) {
        double step = std::sqrt(squared_distance(a, b));
        double local = 0.0;
        std::vector<double> bestdir(d, 0.0);
        for (const Sample& z : env.dataset()) {
          std::fill(gx.begin(), gx.end(), 0.0);
          std::fill(gy.begin(), gy.end(), 0.0);
          env.accumulate_grad_raw(a.data(), z, gx.data());
          env.accumulate_grad_raw(b.data(), z, gy.data());
          double diff = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            double e = gx[k] - gy[k];
            diff += e * e;
          }
          double ratio = std::sqrt(diff) / step;
          if (ratio > local) {
            local = ratio;
            for (std::size_t k = 0; k < d; ++k) bestdir[k] = gx[k] - gy[k];
          }
        }
        best = std::max(best, local);
        double norm = 0.0;
        for (double v : bestdir) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12) break;
        // Re-align the pair with the steepest observed curvature direction.
        std::vector<double> na(d), nb(d);
        for (std::size_t k = 0; k < d; ++k) {
          double mid = 0.5 * (a[k] + b[k]);
          na[k] = mid + 0.5 * step * bestdir[k] / norm;
          nb[k] = mid - 0.5 * step * bestdir[k] / norm;
        }
        a = ParamVector(std::move(na));
        b = ParamVector(std::move(nb));
      }
    }
  }
  return best;
}

inline double estimate_L(
    std::span<const TaskEnvironment> envs,
    std::span<const std::pair<ParamVector, ParamVector>> pairs) {
  if (envs.empty()) throw std::invalid_argument("estimate_L: no tasks");
  if (envs[0].family() == Family::kLeastSquares)
    return ls_smoothness_closed_form(envs);
  return estimate_smoothness_probed(envs, pairs);
}

inline double estimate_L(
    const TaskEnvironment& env,
    std::span<const std::pair<ParamVector, ParamVector>> pairs) {
  return estimate_L(std::span<const TaskEnvironment>(&env, 1), pairs);
}

inline std::vector<std::pair<ParamVector, ParamVector>> probe_pairs(
    const ParamVector& center, const ProbeOptions& opts = {}) {
  ProbeOptions two = opts;
  two.count = 2 * std::max(opts.count, 1);
  std::vector<ParamVector> pts = probe_points(center, two);
  std::vector<std::pair<ParamVector, ParamVector>> out;
  for (std::size_t i = 1; i + 1 < pts.size(); i += 2)
    out.emplace_back(pts[i], pts[i + 1]);
  return out;
}

struct DissimilarityReport {
  std::vector<double> lhs;
  std::vector<double> rhs;
  double max_violation = 0.0;  // max over probes of lhs - rhs
};

// Checks sum_i lambda_i |grad f_i|^2 <= beta^2 |sum_i lambda_i grad f_i|^2 +
// kappa^2 at each probe, with kappa^2 from the probed zeta estimates.
inline DissimilarityReport verify_grad_dissimilarity(
    std::span<const TaskEnvironment> envs, const MergeCoefficients& lambdas,
    std::span<const ParamVector> probes) {
  if (envs.size() != lambdas.size())
    throw std::invalid_argument("verify_grad_dissimilarity: size mismatch");
  if (probes.empty())
    throw std::invalid_argument("verify_grad_dissimilarity: no probes");
  std::vector<double> zeta = estimate_zeta(envs, probes);
  auto [beta_sq, kappa_sq] = dissimilarity_constants(lambdas, zeta);
  DissimilarityReport rep;
  const std::size_t d = envs[0].param_dim();
  for (const ParamVector& x : probes) {
    double lhs = 0.0;
    std::vector<double> mix(d, 0.0);
    for (std::size_t i = 0; i < envs.size(); ++i) {
      ParamVector g = envs[i].full_grad(x);
      lhs += lambdas[i] * squared_norm(g);
      for (std::size_t k = 0; k < d; ++k) mix[k] += lambdas[i] * g[k];
    }
    double mix_sq = 0.0;
    for (double v : mix) mix_sq += v * v;
    rep.lhs.push_back(lhs);
    rep.rhs.push_back(beta_sq * mix_sq + kappa_sq);
  }
  rep.max_violation = rep.lhs[0] - rep.rhs[0];
  for (std::size_t i = 1; i < rep.lhs.size(); ++i)
    rep.max_violation = std::max(rep.max_violation, rep.lhs[i] - rep.rhs[i]);
  return rep;
}

// ---------------------------------------------------------------------------
// Profile builders and the f0 gap estimate.
// ---------------------------------------------------------------------------

inline HeterogeneityProfile probe_profile(std::span<const TaskEnvironment> envs,
                                          const ParamVector& x0,
                                          const ProbeOptions& opts = {}) {
  HeterogeneityProfile prof;
  prof.provenance = HeterogeneityProfile::Provenance::kProbed;
  std::vector<ParamVector> probes = probe_points(x0, opts);
  prof.zeta_sq = estimate_zeta(envs, probes);
  prof.sigma_sq.reserve(envs.size());
  for (const TaskEnvironment& env : envs)
    prof.sigma_sq.push_back(estimate_sigma(env, x0, opts));
  prof.smoothness = estimate_L(envs, probe_pairs(x0, opts));
  return prof;
}

// Closed-form profile for the least-squares family: population sigma^2 over
// a ball of `radius` around x0, population zeta^2 maximized over the probe
// set, and the exact per-sample smoothness.
inline HeterogeneityProfile closed_form_profile(
    std::span<const TaskEnvironment> envs, const ParamVector& x0,
    double radius = 1.0, const ProbeOptions& opts = {}) {
  for (const TaskEnvironment& env : envs)
    if (env.family() != Family::kLeastSquares)
      throw std::invalid_argument(
          "closed_form_profile: least-squares family only");
  HeterogeneityProfile prof;
  prof.provenance = HeterogeneityProfile::Provenance::kClosedForm;
  ProbeOptions zopts = opts;
  zopts.radius = radius;
  std::vector<ParamVector> probes = probe_points(x0, zopts);
  prof.zeta_sq = ls_zeta_sq_population(envs, probes);
  prof.sigma_sq.reserve(envs.size());
  for (const TaskEnvironment& env : envs)
    prof.sigma_sq.push_back(ls_sigma_sq_closed_form(env, x0, radius));
  prof.smoothness = ls_smoothness_closed_form(envs);
  return prof;
}

// f(x0) under lambda weights minus the weighted sum of per-task minima found
// by long full-batch descent. `converged` reports whether every descent met
// its tolerance.
inline double estimate_f0_gap(std::span<const TaskEnvironment> envs,
                              const MergeCoefficients& lambdas,
                              const ParamVector& x0, int max_iters = 2000,
                              double tol = 1e-7, bool* converged = nullptr) {
  if (envs.size() != lambdas.size())
    throw std::invalid_argument("estimate_f0_gap: size mismatch");
  double f0 = weighted_empirical_risk(envs, lambdas, x0);
  double inf_sum = 0.0;
  bool ok = true;
  for (std::size_t i = 0; i < envs.size(); ++i) {
    std::vector<double> w(envs.size(), 0.0);
    w[i] = 1.0;
    bool conv = false;
    ParamVector xi = risk_minimize(envs, w, x0, max_iters, tol, &conv);
    ok = ok && conv;
    inf_sum += lambdas[i] * empirical_risk(envs[i], xi);
  }
  if (converged) *converged = ok;
  return std::max(f0 - inf_sum, 0.0);
}

// ---------------------------------------------------------------------------
// JSON round trip.
// ---------------------------------------------------------------------------

inline std::string provenance_name(HeterogeneityProfile::Provenance p) {
  return p == HeterogeneityProfile::Provenance::kClosedForm ? "closed-form"
                                                            : "probed";
}

inline nlohmann::ordered_json profile_to_json(const HeterogeneityProfile& p) {
  nlohmann::ordered_json j;
  j["sigma_sq"] = p.sigma_sq;
  j["zeta_sq"] = p.zeta_sq;
  j["L"] = p.smoothness;
  j["provenance"] = provenance_name(p.provenance);
  return j;
}

inline HeterogeneityProfile profile_from_json(const nlohmann::json& j) {
  HeterogeneityProfile p;
  try {
    p.sigma_sq = j.at("sigma_sq").get<std::vector<double>>();
    p.zeta_sq = j.at("zeta_sq").get<std::vector<double>>();
    p.smoothness = j.at("L").get<double>();
    std::string prov = j.value("provenance", "probed");
    if (prov == "closed-form")
      p.provenance = HeterogeneityProfile::Provenance::kClosedForm;
    else if (prov == "probed")
      p.provenance = HeterogeneityProfile::Provenance::kProbed;
    else
      throw std::invalid_argument("profile: unknown provenance " + prov);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("profile: ") + e.what());
  }
  return p;
}

inline nlohmann::ordered_json bound_inputs_to_json(const BoundInputs& in) {
  nlohmann::ordered_json j;
  j["profile"] = profile_to_json(in.profile);
  j["n"] = in.n;
  j["b"] = in.b;
  j["K"] = in.K;
  std::vector<double> lam(in.lambdas.weights().begin(),
                          in.lambdas.weights().end());
  j["lambdas"] = lam;
  j["eta_l"] = in.eta_l;
  j["C"] = in.C;
  j["f0_gap"] = in.f0_gap;
  j["zeta_coeff"] = in.zeta_coeff;
  if (in.weight_vectors) {
    nlohmann::ordered_json wv = nlohmann::ordered_json::array();
    for (const WeightVector& w : *in.weight_vectors) wv.push_back(w.a);
    j["weight_vectors"] = wv;
  }
  return j;
}

inline BoundInputs bound_inputs_from_json(const nlohmann::json& j) {
  BoundInputs in;
  try {
    in.profile = profile_from_json(j.at("profile"));
    in.n = j.at("n").get<std::vector<std::int64_t>>();
    in.b = j.at("b").get<std::vector<std::int64_t>>();
    in.K = j.at("K").get<std::vector<std::int64_t>>();
    in.lambdas =
        MergeCoefficients::make(j.at("lambdas").get<std::vector<double>>());
    in.eta_l = j.at("eta_l").get<double>();
    in.C = j.value("C", 0.5);
    in.f0_gap = j.value("f0_gap", 0.0);
    in.zeta_coeff = j.value("zeta_coeff", 12);
    if (j.contains("weight_vectors")) {
      std::vector<WeightVector> wv;
      for (const auto& row : j.at("weight_vectors"))
        wv.push_back(WeightVector{row.get<std::vector<double>>()});
      in.weight_vectors = std::move(wv);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bound inputs: ") + e.what());
  }
  validate_bound_inputs(in);
  return in;
}

inline nlohmann::ordered_json breakdown_to_json(const BoundBreakdown& b) {
  nlohmann::ordered_json j;
  j["stability_term"] = b.stability_term;
  j["A1"] = b.a1;
  j["A2"] = b.a2;
  j["A3"] = b.a3;
  j["tau_eff"] = b.tau_eff;
  j["eps_sgd"] = b.eps_sgd;
  j["chi_sq"] = b.chi_sq;
  if (b.gamma_star.kind == GammaStar::Kind::kFinite)
    j["gamma_star"] = b.gamma_star.value;
  else
    j["gamma_star"] = b.gamma_star.to_string();
  j["optimization_term"] = b.optimization_term;
  j["total"] = b.total;
  j["total_at_gamma_star"] = b.total_at_gamma_star;
  j["model_stability"] = b.model_stability;
  j["f0_gap"] = b.f0_gap;
  return j;
}

}  // namespace mergelab

#endif  // MERGELAB_BOUND_CALC_HPP_
