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

#ifndef MERGELAB_TASK_SUITE_HPP_
#define MERGELAB_TASK_SUITE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mergelab/param_vector.hpp"
#include "mergelab/rng.hpp"

namespace mergelab {

enum class Family { kLeastSquares, kMlpTanhSoftmax };

inline std::string family_name(Family f) {
  return f == Family::kLeastSquares ? "least-squares-linear"
                                    : "mlp-tanh-softmax";
}

inline Family family_from_name(const std::string& s) {
  if (s == "least-squares-linear") return Family::kLeastSquares;
  if (s == "mlp-tanh-softmax") return Family::kMlpTanhSoftmax;
  throw std::invalid_argument("unknown family: " + s);
}

struct Sample {
  std::vector<double> features;
  int label = -1;      // class index, classification only
  double target = 0.0; // regression only

  bool operator==(const Sample&) const = default;
};

struct TaskFamilyConfig {
  Family family = Family::kLeastSquares;
  int num_tasks = 1;
  int feature_dim = 8;
  int num_classes = 3;  // classification only
  int hidden_dim = 8;   // classification only
  std::vector<int> sizes;
  double het_knob = 0.0;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
};

// Per-task sampling distribution. Regression targets come from
// `regression_weights`; classification features are class-conditional
// Gaussians around `class_means`. `feature_mean` is the heterogeneity shift
// shared by both families.
struct DistributionSpec {
  std::vector<double> regression_weights;
  std::vector<std::vector<double>> class_means;
  std::vector<double> feature_mean;
  double noise_scale = 1.0;
  double het_angle = 0.0;

  bool operator==(const DistributionSpec&) const = default;
};

class TaskEnvironment {
 public:
  TaskEnvironment(int task_id, Family family, DistributionSpec spec,
                  std::vector<Sample> data, int feature_dim, int num_classes,
                  int hidden_dim)
      : task_id_(task_id),
        family_(family),
        spec_(std::move(spec)),
        data_(std::move(data)),
        p_(feature_dim),
        classes_(num_classes),
        hidden_(hidden_dim) {
    if (data_.size() < 2)
      throw std::invalid_argument("TaskEnvironment: need at least 2 samples");
  }

  int task_id() const { return task_id_; }
  Family family() const { return family_; }
  const DistributionSpec& spec() const { return spec_; }
  const std::vector<Sample>& dataset() const { return data_; }
  int size() const { return static_cast<int>(data_.size()); }
  int feature_dim() const { return p_; }
  int num_classes() const { return classes_; }
  int hidden_dim() const { return hidden_; }

  std::size_t param_dim() const {
    if (family_ == Family::kLeastSquares) return static_cast<std::size_t>(p_);
    return static_cast<std::size_t>(hidden_ * p_ + hidden_ +
                                    classes_ * hidden_ + classes_);
  }

  Sample draw_sample(SplitMix& g) const {
    Sample z;
    z.features.resize(p_);
    if (family_ == Family::kLeastSquares) {
      for (int k = 0; k < p_; ++k)
        z.features[k] = spec_.feature_mean[k] + g.next_gaussian();
      double y = 0.0;
      for (int k = 0; k < p_; ++k)
        y += spec_.regression_weights[k] * z.features[k];
      z.target = y + spec_.noise_scale * g.next_gaussian();
    } else {
      int c = static_cast<int>(g.next_index(static_cast<std::size_t>(classes_)));
      for (int k = 0; k < p_; ++k)
        z.features[k] = spec_.class_means[c][k] + spec_.feature_mean[k] +
                        spec_.noise_scale * g.next_gaussian();
      z.label = c;
    }
    return z;
  }

  std::vector<Sample> draw_fresh(int m, std::uint64_t seed) const {
    SplitMix g(mix_seed(seed, 0xF4E5Dull, static_cast<std::uint64_t>(task_id_)));
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) out.push_back(draw_sample(g));
    return out;
  }

  double loss(const ParamVector& x, const Sample& z) const {
    check_dim(x.dim());
    return loss_raw(x.data(), z);
  }

  ParamVector grad(const ParamVector& x, const Sample& z) const {
    check_dim(x.dim());
    std::vector<double> g(param_dim(), 0.0);
    accumulate_grad_raw(x.data(), z, g.data());
    return ParamVector(std::move(g));
  }

  // Mean gradient over the given index list, accumulated in list order.
  ParamVector batch_grad(const ParamVector& x,
                         std::span<const std::uint32_t> idx) const {
    check_dim(x.dim());
    std::vector<double> g(param_dim());
    batch_grad_raw(x.data(), idx, g.data());
    return ParamVector(std::move(g));
  }

  ParamVector full_grad(const ParamVector& x) const {
    std::vector<std::uint32_t> idx(data_.size());
    for (std::size_t j = 0; j < idx.size(); ++j)
      idx[j] = static_cast<std::uint32_t>(j);
    return batch_grad(x, idx);
  }

  double loss_raw(const double* x, const Sample& z) const {
    if (family_ == Family::kLeastSquares) {
      double r = -z.target;
      for (int k = 0; k < p_; ++k) r += x[k] * z.features[k];
      return 0.5 * r * r;
    }
    thread_local std::vector<double> act, logits;
    forward_mlp(x, z, act, logits);
    double m = logits[0];
    for (int c = 1; c < classes_; ++c) m = std::max(m, logits[c]);
    double sum = 0.0;
    for (int c = 0; c < classes_; ++c) sum += std::exp(logits[c] - m);
    return m + std::log(sum) - logits[z.label];
  }

  void accumulate_grad_raw(const double* x, const Sample& z,
                           double* out) const {
    if (family_ == Family::kLeastSquares) {
      double r = -z.target;
      for (int k = 0; k < p_; ++k) r += x[k] * z.features[k];
      for (int k = 0; k < p_; ++k) out[k] += r * z.features[k];
      return;
    }
    thread_local std::vector<double> act, logits, dlogits, dact;
    forward_mlp(x, z, act, logits);
    double m = logits[0];
    for (int c = 1; c < classes_; ++c) m = std::max(m, logits[c]);
    double sum = 0.0;
    dlogits.assign(static_cast<std::size_t>(classes_), 0.0);
    for (int c = 0; c < classes_; ++c) {
      dlogits[c] = std::exp(logits[c] - m);
      sum += dlogits[c];
    }
    for (int c = 0; c < classes_; ++c) dlogits[c] /= sum;
    dlogits[z.label] -= 1.0;

    const int h = hidden_;
    const double* w2 = x + h * p_ + h;
    double* gw1 = out;
    double* gb1 = out + h * p_;
    double* gw2 = out + h * p_ + h;
    double* gb2 = out + h * p_ + h + classes_ * h;
    dact.assign(static_cast<std::size_t>(h), 0.0);
    for (int c = 0; c < classes_; ++c) {
      gb2[c] += dlogits[c];
      for (int u = 0; u < h; ++u) {
        gw2[c * h + u] += dlogits[c] * act[u];
        dact[u] += dlogits[c] * w2[c * h + u];
      }
    }
    for (int u = 0; u < h; ++u) {
      double ds = dact[u] * (1.0 - act[u] * act[u]);
      gb1[u] += ds;
      for (int k = 0; k < p_; ++k) gw1[u * p_ + k] += ds * z.features[k];
    }
  }

  void batch_grad_raw(const double* x, std::span<const std::uint32_t> idx,
                      double* out) const {
    if (idx.empty())
      throw std::invalid_argument("batch_grad: empty index set");
    std::fill(out, out + param_dim(), 0.0);
    for (std::uint32_t j : idx) {
      if (j >= data_.size())
        throw std::out_of_range("batch_grad: index out of range");
      accumulate_grad_raw(x, data_[j], out);
    }
    double inv = 1.0 / static_cast<double>(idx.size());
    for (std::size_t k = 0; k < param_dim(); ++k) out[k] *= inv;
  }

  // Monte-Carlo estimate of the population risk with a seeded fresh stream.
  double population_risk_estimate(const ParamVector& x, int m,
                                  std::uint64_t seed) const {
    check_dim(x.dim());
    if (m < 1) throw std::invalid_argument("population_risk_estimate: m < 1");
    SplitMix g(mix_seed(seed, 0x9271ull, static_cast<std::uint64_t>(task_id_)));
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += loss_raw(x.data(), draw_sample(g));
    return acc / static_cast<double>(m);
  }

  int predict(const ParamVector& x, const Sample& z) const {
    if (family_ == Family::kLeastSquares) return -1;
    check_dim(x.dim());
    thread_local std::vector<double> act, logits;
    forward_mlp(x.data(), z, act, logits);
    int best = 0;
    for (int c = 1; c < classes_; ++c)
      if (logits[c] > logits[best]) best = c;
    return best;
  }

  TaskEnvironment with_replaced(int j, Sample s) const {
    if (j < 0 || j >= size())
      throw std::out_of_range("with_replaced: index out of range");
    std::vector<Sample> data = data_;
    data[static_cast<std::size_t>(j)] = std::move(s);
    return TaskEnvironment(task_id_, family_, spec_, std::move(data), p_,
                           classes_, hidden_);
  }

  bool same_task(const TaskEnvironment& other) const {
    return task_id_ == other.task_id_ && family_ == other.family_ &&
           p_ == other.p_ && classes_ == other.classes_ &&
           hidden_ == other.hidden_ && spec_ == other.spec_ &&
           data_ == other.data_;
  }

 private:
  void check_dim(std::size_t d) const {
    if (d != param_dim())
      throw std::invalid_argument("TaskEnvironment: parameter dim mismatch");
  }

  void forward_mlp(const double* x, const Sample& z, std::vector<double>& act,
                   std::vector<double>& logits) const {
    const int h = hidden_;
    const double* w1 = x;
    const double* b1 = x + h * p_;
    const double* w2 = x + h * p_ + h;
    const double* b2 = x + h * p_ + h + classes_ * h;
    act.assign(static_cast<std::size_t>(h), 0.0);
    logits.assign(static_cast<std::size_t>(classes_), 0.0);
    for (int u = 0; u < h; ++u) {
      double s = b1[u];
      for (int k = 0; k < p_; ++k) s += w1[u * p_ + k] * z.features[k];
      act[u] = std::tanh(s);
    }
    for (int c = 0; c < classes_; ++c) {
      double s = b2[c];
      for (int u = 0; u < h; ++u) s += w2[c * h + u] * act[u];
      logits[c] = s;
    }
  }

  int task_id_;
  Family family_;
  DistributionSpec spec_;
  std::vector<Sample> data_;
  int p_;
  int classes_;
  int hidden_;
};

// ---------------------------------------------------------------------------
// Family generation. Tasks share one draw of base parameters; task i rotates
// them by het_knob * (i/N) * pi/2 inside a fixed random 2-plane and shifts
// the feature mean by het_knob * (i/N) along a fixed random direction. At
// het_knob = 0 all tasks are bit-identical.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> gaussian_vec(SplitMix& g, int p) {
  std::vector<double> v(static_cast<std::size_t>(p));
  for (int k = 0; k < p; ++k) v[k] = g.next_gaussian();
  return v;
}

inline double vec_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline void normalize(std::vector<double>& v) {
  double n = vec_norm(v);
  if (n < 1e-12) throw std::runtime_error("degenerate direction draw");
  for (double& x : v) x /= n;
}

// Unit vector orthogonal to u (u must be unit).
inline std::vector<double> orthonormal_to(SplitMix& g,
                                          std::span<const double> u) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::vector<double> v = gaussian_vec(g, static_cast<int>(u.size()));
    double d = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) d += v[k] * u[k];
    for (std::size_t k = 0; k < u.size(); ++k) v[k] -= d * u[k];
    double n = vec_norm(v);
    if (n > 1e-6) {
      for (double& x : v) x /= n;
      return v;
    }
  }
  throw std::runtime_error("orthonormal_to: degenerate draws");
}

// Rotate v by angle theta inside the plane spanned by orthonormal (e1, e2).
inline std::vector<double> rotate_in_plane(std::span<const double> v,
                                           std::span<const double> e1,
                                           std::span<const double> e2,
                                           double theta) {
  double c1 = 0.0, c2 = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    c1 += v[k] * e1[k];
    c2 += v[k] * e2[k];
  }
  double ct = std::cos(theta), st = std::sin(theta);
  std::vector<double> out(v.begin(), v.end());
  for (std::size_t k = 0; k < v.size(); ++k)
    out[k] += (ct - 1.0) * (c1 * e1[k] + c2 * e2[k]) +
              st * (c1 * e2[k] - c2 * e1[k]);
  return out;
}

}  // namespace detail

inline void validate_config(const TaskFamilyConfig& cfg) {
  if (cfg.num_tasks < 1)
    throw std::invalid_argument("task family: N must be >= 1");
  if (cfg.feature_dim < 1)
    throw std::invalid_argument("task family: p must be >= 1");
  if (cfg.sizes.size() != static_cast<std::size_t>(cfg.num_tasks))
    throw std::invalid_argument("task family: need one dataset size per task");
  for (int n : cfg.sizes)
    if (n < 2) throw std::invalid_argument("task family: every n_i must be >= 2");
  if (cfg.het_knob < 0.0 || cfg.het_knob > 1.0)
    throw std::invalid_argument("task family: het_knob must lie in [0, 1]");
  if (cfg.noise_scale < 0.0)
    throw std::invalid_argument("task family: noise_scale must be >= 0");
  if (cfg.family == Family::kMlpTanhSoftmax) {
    if (cfg.num_classes < 2)
      throw std::invalid_argument("task family: C must be >= 2");
    if (cfg.hidden_dim < 1)
      throw std::invalid_argument("task family: hidden width must be >= 1");
  }
}

inline std::vector<TaskEnvironment> gen_task_family(
    const TaskFamilyConfig& cfg) {
  validate_config(cfg);
  const int p = cfg.feature_dim;
  SplitMix master(mix_seed(cfg.seed, 0x7A5Cull));

  std::vector<double> w_shared, e1, e2, shift_dir;
  std::vector<std::vector<double>> base_means;
  if (cfg.family == Family::kLeastSquares) {
    w_shared = detail::gaussian_vec(master, p);
    detail::normalize(w_shared);
    for (double& x : w_shared) x *= 2.0;
    e1 = w_shared;
    detail::normalize(e1);
    e2 = detail::orthonormal_to(master, e1);
  } else {
    base_means.resize(static_cast<std::size_t>(cfg.num_classes));
    for (auto& m : base_means) {
      m = detail::gaussian_vec(master, p);
      for (double& x : m) x *= 2.0;
    }
    e1 = detail::gaussian_vec(master, p);
    detail::normalize(e1);
    e2 = detail::orthonormal_to(master, e1);
  }
  shift_dir = detail::gaussian_vec(master, p);
  detail::normalize(shift_dir);

  std::vector<TaskEnvironment> envs;
  envs.reserve(static_cast<std::size_t>(cfg.num_tasks));
  for (int i = 0; i < cfg.num_tasks; ++i) {
    double frac = static_cast<double>(i) / static_cast<double>(cfg.num_tasks);
    double theta = cfg.het_knob * frac * std::numbers::pi / 2.0;
    double shift = cfg.het_knob * frac;

    DistributionSpec spec;
    spec.noise_scale = cfg.noise_scale;
    spec.het_angle = theta;
    spec.feature_mean.assign(static_cast<std::size_t>(p), 0.0);
    if (shift != 0.0)
      for (int k = 0; k < p; ++k) spec.feature_mean[k] = shift * shift_dir[k];

    if (cfg.family == Family::kLeastSquares) {
      spec.regression_weights =
          theta == 0.0 ? w_shared
                       : detail::rotate_in_plane(w_shared, e1, e2, theta);
    } else {
      spec.class_means.resize(base_means.size());
      for (std::size_t c = 0; c < base_means.size(); ++c)
        spec.class_means[c] =
            theta == 0.0 ? base_means[c]
                         : detail::rotate_in_plane(base_means[c], e1, e2, theta);
    }

    SplitMix child(mix_seed(cfg.seed, 0xD474ull, static_cast<std::uint64_t>(i)));
    TaskEnvironment probe(i, cfg.family, spec, std::vector<Sample>(2), p,
                          cfg.num_classes, cfg.hidden_dim);
    std::vector<Sample> data;
    data.reserve(static_cast<std::size_t>(cfg.sizes[i]));
    for (int j = 0; j < cfg.sizes[i]; ++j) data.push_back(probe.draw_sample(child));
    envs.emplace_back(i, cfg.family, std::move(spec), std::move(data), p,
                      cfg.num_classes, cfg.hidden_dim);
  }
  return envs;
}

// ---------------------------------------------------------------------------
// Single-sample perturbation. The perturbed dataset agrees with the origin
// everywhere except index `replaced_index`.
// ---------------------------------------------------------------------------

class PerturbedDataset {
 public:
  static PerturbedDataset make(const TaskEnvironment& env, int j,
                               std::uint64_t seed) {
    check_index(env, j);
    SplitMix g(mix_seed(seed, 0x9E87ull, static_cast<std::uint64_t>(j)));
    return PerturbedDataset(&env, j, env.draw_sample(g));
  }

  // Replacement equal to the original sample; coupled runs must coincide.
  static PerturbedDataset null_perturbation(const TaskEnvironment& env, int j) {
    check_index(env, j);
    return PerturbedDataset(&env, j, env.dataset()[static_cast<std::size_t>(j)]);
  }

  const TaskEnvironment& origin() const { return *origin_; }
  int replaced_index() const { return replaced_; }
  const Sample& replacement() const { return replacement_; }

  TaskEnvironment materialize() const {
    return origin_->with_replaced(replaced_, replacement_);
  }

 private:
  PerturbedDataset(const TaskEnvironment* env, int j, Sample s)
      : origin_(env), replaced_(j), replacement_(std::move(s)) {}

  static void check_index(const TaskEnvironment& env, int j) {
    if (j < 0 || j >= env.size())
      throw std::out_of_range("perturb: sample index out of range");
  }

  const TaskEnvironment* origin_;
  int replaced_;
  Sample replacement_;
};

inline PerturbedDataset perturb(const TaskEnvironment& env, int j,
                                std::uint64_t seed) {
  return PerturbedDataset::make(env, j, seed);
}

// ---------------------------------------------------------------------------
// Risk helpers.
// ---------------------------------------------------------------------------

inline double empirical_risk(const TaskEnvironment& env, const ParamVector& x) {
  double acc = 0.0;
  for (const Sample& z : env.dataset()) acc += env.loss(x, z);
  return acc / static_cast<double>(env.size());
}

inline double weighted_empirical_risk(std::span<const TaskEnvironment> envs,
                                      const MergeCoefficients& lambdas,
                                      const ParamVector& x) {
  if (envs.size() != lambdas.size())
    throw std::invalid_argument("weighted_empirical_risk: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < envs.size(); ++i)
    acc += lambdas[i] * empirical_risk(envs[i], x);
  return acc;
}

// ---------------------------------------------------------------------------
// Pretrained base: minimizer of the pooled het_knob = 0 family. Least squares
// solves normal equations; the tanh net runs full-batch descent with
// backtracking from a small seeded init. Memoized per canonical config.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string config_cache_key(const TaskFamilyConfig& cfg) {
  nlohmann::ordered_json j;
  j["family"] = family_name(cfg.family);
  j["N"] = cfg.num_tasks;
  j["p"] = cfg.feature_dim;
  j["C"] = cfg.num_classes;
  j["hidden"] = cfg.hidden_dim;
  j["n"] = cfg.sizes;
  j["het_knob"] = cfg.het_knob;
  j["noise_scale"] = cfg.noise_scale;
  j["seed"] = cfg.seed;
  return j.dump();
}

inline ParamVector pooled_least_squares(
    std::span<const TaskEnvironment> envs) {
  const int p = envs[0].feature_dim();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
  for (const TaskEnvironment& env : envs)
    for (const Sample& z : env.dataset()) {
      Eigen::Map<const Eigen::VectorXd> phi(z.features.data(), p);
      a.noalias() += phi * phi.transpose();
      rhs.noalias() += z.target * phi;
    }
  a.diagonal().array() += 1e-12 * a.trace() / static_cast<double>(p);
  Eigen::VectorXd w = a.ldlt().solve(rhs);
  return ParamVector(std::vector<double>(w.data(), w.data() + p));
}

}  // namespace detail

// Full-batch descent with backtracking on sum_i w_i * empirical_risk_i.
// Deterministic; `converged` reports whether the gradient tolerance was met
// within the iteration budget.
inline ParamVector risk_minimize(std::span<const TaskEnvironment> envs,
                                 std::span<const double> task_weights,
                                 ParamVector x, int max_iters, double tol,
                                 bool* converged = nullptr) {
  if (envs.empty() || envs.size() != task_weights.size())
    throw std::invalid_argument("risk_minimize: weight/task count mismatch");
  auto risk = [&](const ParamVector& p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < envs.size(); ++i)
      if (task_weights[i] != 0.0)
        acc += task_weights[i] * empirical_risk(envs[i], p);
    return acc;
  };
  auto grad = [&](const ParamVector& p) {
    std::vector<double> g(p.dim(), 0.0);
    std::vector<double> task(p.dim());
    for (std::size_t i = 0; i < envs.size(); ++i) {
      if (task_weights[i] == 0.0) continue;
      std::vector<std::uint32_t> all(
          static_cast<std::size_t>(envs[i].size()));
      for (std::size_t j = 0; j < all.size(); ++j)
        all[j] = static_cast<std::uint32_t>(j);
      envs[i].batch_grad_raw(p.data(), all, task.data());
      for (std::size_t k = 0; k < g.size(); ++k)
        g[k] += task_weights[i] * task[k];
    }
    return ParamVector(std::move(g));
  };

  bool met = false;
  double step = 1.0;
  double fx = risk(x);
  for (int it = 0; it < max_iters; ++it) {
    ParamVector g = grad(x);
    double gg = squared_norm(g);
    if (std::sqrt(gg) <= tol) {
      met = true;
      break;
    }
    bool moved = false;
    for (int half = 0; half < 60; ++half) {
      std::vector<double> cand(x.dim());
      for (std::size_t k = 0; k < x.dim(); ++k) cand[k] = x[k] - step * g[k];
      ParamVector next(std::move(cand));
      double fn = risk(next);
      if (fn <= fx - 1e-4 * step * gg) {
        x = std::move(next);
        fx = fn;
        step = std::min(step * 1.5, 16.0);
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  if (!met) {
    ParamVector g = grad(x);
    met = std::sqrt(squared_norm(g)) <= tol;
  }
  if (converged) *converged = met;
  return x;
}

inline ParamVector pretrained_base(const TaskFamilyConfig& cfg) {
  TaskFamilyConfig flat = cfg;
  flat.het_knob = 0.0;
  const std::string key = detail::config_cache_key(flat);

  static std::mutex mu;
  static std::map<std::string, ParamVector> cache;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }

  std::vector<TaskEnvironment> envs = gen_task_family(flat);
  ParamVector x0;
  if (cfg.family == Family::kLeastSquares) {
    x0 = detail::pooled_least_squares(envs);
  } else {
    SplitMix g(mix_seed(cfg.seed, 0xB453ull));
    std::vector<double> init(envs[0].param_dim());
    const int p = cfg.feature_dim, h = cfg.hidden_dim, c = cfg.num_classes;
    double s1 = 0.5 / std::sqrt(static_cast<double>(p));
    double s2 = 0.5 / std::sqrt(static_cast<double>(h));
    for (int k = 0; k < h * p; ++k) init[k] = s1 * g.next_gaussian();
    for (int k = 0; k < h; ++k) init[h * p + k] = 0.0;
    for (int k = 0; k < c * h; ++k) init[h * p + h + k] = s2 * g.next_gaussian();
    for (int k = 0; k < c; ++k) init[h * p + h + c * h + k] = 0.0;
    // Per-sample pooling: weight each task by its share of the pooled data.
    std::size_t total = 0;
    for (const TaskEnvironment& env : envs)
      total += static_cast<std::size_t>(env.size());
    std::vector<double> weights(envs.size());
    for (std::size_t i = 0; i < envs.size(); ++i)
      weights[i] = static_cast<double>(envs[i].size()) /
                   static_cast<double>(total);
    x0 = risk_minimize(envs, weights, ParamVector(std::move(init)), 2000, 1e-6);
  }

  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, x0);
  return x0;
}

// ---------------------------------------------------------------------------
// Least-squares closed forms. With phi ~ N(mu, I) and y = <w, phi> + s*eps,
// the per-sample gradient variance at x is
//   s^2 (p + |mu|^2) + |d|^2 (p + 1 + |mu|^2) + <mu, d>^2 (p + 2),
// d = x - w, and the task gradient is H (x - w) with H = I + mu mu^T.
// ---------------------------------------------------------------------------

inline double ls_sigma_sq_closed_form(const TaskEnvironment& env,
                                      const ParamVector& x_ref,
                                      double ball_radius = 0.0) {
  if (env.family() != Family::kLeastSquares)
    throw std::invalid_argument("closed form requires the least-squares family");
  const int p = env.feature_dim();
  const auto& w = env.spec().regression_weights;
  const auto& mu = env.spec().feature_mean;
  double mu2 = 0.0, d2 = 0.0, a = 0.0;
  for (int k = 0; k < p; ++k) {
    double dk = x_ref[static_cast<std::size_t>(k)] - w[k];
    mu2 += mu[k] * mu[k];
    d2 += dk * dk;
    a += mu[k] * dk;
  }
  double s = env.spec().noise_scale;
  double dmax = std::sqrt(d2) + ball_radius;
  double amax = std::abs(a) + ball_radius * std::sqrt(mu2);
  return s * s * (p + mu2) + dmax * dmax * (p + 1 + mu2) +
         amax * amax * (p + 2);
}

// Largest per-sample curvature of the squared loss: max_j |phi_j|^2.
inline double ls_smoothness_closed_form(const TaskEnvironment& env) {
  if (env.family() != Family::kLeastSquares)
    throw std::invalid_argument("closed form requires the least-squares family");
  double best = 0.0;
  for (const Sample& z : env.dataset()) {
    double n2 = 0.0;
    for (double v : z.features) n2 += v * v;
    best = std::max(best, n2);
  }
  return best;
}

inline double ls_smoothness_closed_form(std::span<const TaskEnvironment> envs) {
  double best = 0.0;
  for (const TaskEnvironment& env : envs)
    best = std::max(best, ls_smoothness_closed_form(env));
  return best;
}

namespace detail {

// Population gradient of task i at x: H_i (x - w_i), H_i = I + mu_i mu_i^T.
inline Eigen::VectorXd ls_population_grad(const TaskEnvironment& env,
                                          const Eigen::VectorXd& x) {
  const int p = env.feature_dim();
  Eigen::Map<const Eigen::VectorXd> w(env.spec().regression_weights.data(), p);
  Eigen::Map<const Eigen::VectorXd> mu(env.spec().feature_mean.data(), p);
  Eigen::VectorXd d = x - w;
  return d + mu * mu.dot(d);
}

// Empirical gradient of task i at x from dataset second moments.
inline Eigen::VectorXd ls_empirical_grad(const TaskEnvironment& env,
                                         const Eigen::VectorXd& x) {
  const int p = env.feature_dim();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
  for (const Sample& z : env.dataset()) {
    Eigen::Map<const Eigen::VectorXd> phi(z.features.data(), p);
    h.noalias() += phi * phi.transpose();
    c.noalias() += z.target * phi;
  }
  double inv = 1.0 / static_cast<double>(env.size());
  return inv * (h * x - c);
}

template <typename GradFn>
inline std::vector<double> ls_zeta_sq_impl(
    std::span<const TaskEnvironment> envs, std::span<const ParamVector> probes,
    GradFn&& grad_at) {
  if (envs.empty() || probes.empty())
    throw std::invalid_argument("zeta closed form: empty inputs");
  const int p = envs[0].feature_dim();
  const double n = static_cast<double>(envs.size());
  std::vector<double> zeta(envs.size(), 0.0);
  for (const ParamVector& probe : probes) {
    Eigen::Map<const Eigen::VectorXd> x(probe.data(), p);
    std::vector<Eigen::VectorXd> grads;
    grads.reserve(envs.size());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
    for (const TaskEnvironment& env : envs) {
      grads.push_back(grad_at(env, Eigen::VectorXd(x)));
      mean += grads.back();
    }
    mean /= n;
    for (std::size_t i = 0; i < envs.size(); ++i)
      zeta[i] = std::max(zeta[i], (grads[i] - mean).squaredNorm());
  }
  return zeta;
}

}  // namespace detail

inline std::vector<double> ls_zeta_sq_population(
    std::span<const TaskEnvironment> envs,
    std::span<const ParamVector> probes) {
  return detail::ls_zeta_sq_impl(envs, probes, [](const TaskEnvironment& e,
                                                  const Eigen::VectorXd& x) {
    return detail::ls_population_grad(e, x);
  });
}

inline std::vector<double> ls_zeta_sq_empirical(
    std::span<const TaskEnvironment> envs,
    std::span<const ParamVector> probes) {
  return detail::ls_zeta_sq_impl(envs, probes, [](const TaskEnvironment& e,
                                                  const Eigen::VectorXd& x) {
    return detail::ls_empirical_grad(e, x);
  });
}

// ---------------------------------------------------------------------------
// Manifest (JSON) round trip.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json family_to_json(const TaskFamilyConfig& cfg) {
  nlohmann::ordered_json j;
  j["family"] = family_name(cfg.family);
  j["N"] = cfg.num_tasks;
  j["p"] = cfg.feature_dim;
  j["C"] = cfg.num_classes;
  j["hidden"] = cfg.hidden_dim;
  j["n"] = cfg.sizes;
  j["het_knob"] = cfg.het_knob;
  j["noise_scale"] = cfg.noise_scale;
  j["seed"] = cfg.seed;
  return j;
}

inline TaskFamilyConfig family_from_json(const nlohmann::json& j) {
  TaskFamilyConfig cfg;
  try {
    cfg.family = family_from_name(j.at("family").get<std::string>());
    cfg.num_tasks = j.at("N").get<int>();
    cfg.feature_dim = j.at("p").get<int>();
    cfg.num_classes = j.value("C", 3);
    cfg.hidden_dim = j.value("hidden", 8);
    if (j.at("n").is_array())
      cfg.sizes = j.at("n").get<std::vector<int>>();
    else
      cfg.sizes.assign(static_cast<std::size_t>(cfg.num_tasks),
                       j.at("n").get<int>());
    cfg.het_knob = j.value("het_knob", 0.0);
    cfg.noise_scale = j.value("noise_scale", 1.0);
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("task family manifest: ") +
                                e.what());
  }
  validate_config(cfg);
  return cfg;
}

}  // namespace mergelab

#endif  // MERGELAB_TASK_SUITE_HPP_
