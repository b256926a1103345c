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

#ifndef MERGELAB_PARAM_VECTOR_HPP_
#define MERGELAB_PARAM_VECTOR_HPP_

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mergelab {

// Flat double-precision parameter vector. Values are immutable after
// construction; every operation below returns a fresh vector.
class ParamVector {
 public:
  ParamVector() = default;  // dim 0 placeholder, rejected by all operations

  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty())
      throw std::invalid_argument("ParamVector: dimension must be positive");
    for (double v : values_)
      if (!std::isfinite(v))
        throw std::invalid_argument("ParamVector: entries must be finite");
  }

  static ParamVector zeros(std::size_t dim) {
    return ParamVector(std::vector<double>(dim, 0.0));
  }

  std::size_t dim() const { return values_.size(); }
  double operator[](std::size_t k) const { return values_[k]; }
  std::span<const double> values() const { return values_; }
  const double* data() const { return values_.data(); }

  bool operator==(const ParamVector& other) const {
    return values_ == other.values_;
  }

 private:
  std::vector<double> values_;
};

// Delta of an expert against the shared base it was fine-tuned from.
struct TaskVector {
  ParamVector delta;
  std::size_t dim() const { return delta.dim(); }
};

namespace detail {

inline void require_same_dim(std::size_t a, std::size_t b, const char* who) {
  if (a != b)
    throw std::invalid_argument(std::string(who) + ": dimension mismatch (" +
                                std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
}

}  // namespace detail

// Nonnegative convex weights over tasks. Inputs whose sum strays from 1 by
// at most 1e-9 are renormalized; anything further off is rejected.
class MergeCoefficients {
 public:
  static MergeCoefficients make(std::vector<double> weights) {
    if (weights.empty())
      throw std::invalid_argument("MergeCoefficients: empty weight list");
    double sum = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w) || w < 0.0)
        throw std::invalid_argument(
            "MergeCoefficients: weights must be finite and nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument(
          "MergeCoefficients: weights must sum to 1 (got " +
          std::to_string(sum) + ")");
    if (sum != 1.0)
      for (double& w : weights) w /= sum;
    return MergeCoefficients(std::move(weights));
  }

  static MergeCoefficients uniform(std::size_t n) {
    if (n == 0) throw std::invalid_argument("MergeCoefficients: n must be positive");
    return MergeCoefficients(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  std::size_t size() const { return weights_.size(); }
  double operator[](std::size_t i) const { return weights_[i]; }
  std::span<const double> weights() const { return weights_; }

 private:
  explicit MergeCoefficients(std::vector<double> w) : weights_(std::move(w)) {}
  std::vector<double> weights_;
};

inline TaskVector task_vector(const ParamVector& expert,
                              const ParamVector& base) {
  detail::require_same_dim(expert.dim(), base.dim(), "task_vector");
  std::vector<double> d(expert.dim());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = expert[k] - base[k];
  return TaskVector{ParamVector(std::move(d))};
}

// base + sum_i lambda_i * delta_i, accumulated term by term in ascending
// task order so results are reproducible across runs and platforms.
inline ParamVector merge_linear(const ParamVector& base,
                                std::span<const TaskVector> deltas,
                                const MergeCoefficients& lambdas) {
  if (deltas.size() != lambdas.size())
    throw std::invalid_argument("merge_linear: coefficient count mismatch");
  if (deltas.empty())
    throw std::invalid_argument("merge_linear: no task vectors");
  for (const TaskVector& t : deltas)
    detail::require_same_dim(t.dim(), base.dim(), "merge_linear");
  std::vector<double> out(base.dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double acc = base[k];
    for (std::size_t i = 0; i < deltas.size(); ++i)
      acc += lambdas[i] * deltas[i].delta[k];
    out[k] = acc;
  }
  return ParamVector(std::move(out));
}

inline double squared_distance(const ParamVector& a, const ParamVector& b) {
  detail::require_same_dim(a.dim(), b.dim(), "squared_distance");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.dim(); ++k) {
    double d = a[k] - b[k];
    acc += d * d;
  }
  return acc;
}

inline double dot(const ParamVector& a, const ParamVector& b) {
  detail::require_same_dim(a.dim(), b.dim(), "dot");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.dim(); ++k) acc += a[k] * b[k];
  return acc;
}

inline double squared_norm(const ParamVector& a) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.dim(); ++k) acc += a[k] * a[k];
  return acc;
}

// ---------------------------------------------------------------------------
// Binary serialization. Layout: magic "MRGL", u32 LE version (1), u64 LE dim,
// then dim IEEE-754 doubles, little endian. No padding or trailing bytes.
// ---------------------------------------------------------------------------

inline constexpr char kParamsMagic[4] = {'M', 'R', 'G', 'L'};
inline constexpr std::uint32_t kParamsVersion = 1;

namespace detail {

inline void put_u32(std::ostream& sink, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  sink.write(b, 4);
}

inline void put_u64(std::ostream& sink, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  sink.write(b, 8);
}

inline bool get_bytes(std::istream& source, char* out, std::size_t count) {
  source.read(out, static_cast<std::streamsize>(count));
  return static_cast<std::size_t>(source.gcount()) == count;
}

inline std::uint32_t load_u32(const char* b) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline std::uint64_t load_u64(const char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_params(const ParamVector& v, std::ostream& sink) {
  if (v.dim() == 0)
    throw std::invalid_argument("write_params: empty parameter vector");
  sink.write(kParamsMagic, 4);
  detail::put_u32(sink, kParamsVersion);
  detail::put_u64(sink, static_cast<std::uint64_t>(v.dim()));
  for (std::size_t k = 0; k < v.dim(); ++k)
    detail::put_u64(sink, std::bit_cast<std::uint64_t>(v[k]));
  if (!sink) throw std::runtime_error("write_params: write failed");
}

inline void write_params(const ParamVector& v,
                         const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_params: cannot open " + path.string());
  write_params(v, f);
}

// Reads one parameter record and requires the source to be exhausted after
// it. Bad magic, unknown version and truncation raise distinct errors.
inline ParamVector read_params(std::istream& source) {
  char magic[4];
  if (!detail::get_bytes(source, magic, 4))
    throw std::runtime_error("read_params: truncated input (missing magic)");
  if (std::memcmp(magic, kParamsMagic, 4) != 0)
    throw std::runtime_error("read_params: bad magic");
  char head[4];
  if (!detail::get_bytes(source, head, 4))
    throw std::runtime_error("read_params: truncated input (missing version)");
  std::uint32_t version = detail::load_u32(head);
  if (version != kParamsVersion)
    throw std::runtime_error("read_params: unsupported version " +
                             std::to_string(version));
  char dimb[8];
  if (!detail::get_bytes(source, dimb, 8))
    throw std::runtime_error("read_params: truncated input (missing dim)");
  std::uint64_t dim = detail::load_u64(dimb);
  if (dim == 0) throw std::runtime_error("read_params: zero dimension");
  std::vector<double> values(dim);
  for (std::uint64_t k = 0; k < dim; ++k) {
    char b[8];
    if (!detail::get_bytes(source, b, 8))
      throw std::runtime_error("read_params: truncated payload at entry " +
                               std::to_string(k));
    values[k] = std::bit_cast<double>(detail::load_u64(b));
  }
  if (source.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("read_params: trailing bytes after payload");
  return ParamVector(std::move(values));
}

inline ParamVector read_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_params: cannot open " + path.string());
  return read_params(f);
}

}  // namespace mergelab

#endif  // MERGELAB_PARAM_VECTOR_HPP_
