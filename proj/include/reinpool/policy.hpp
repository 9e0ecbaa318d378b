// Copyright 2026 The ReinPool Authors
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

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/matrix.hpp"
#include "reinpool/pooling.hpp"
#include "reinpool/random.hpp"

namespace reinpool {

// Filtering policy: one multi-head self-attention layer with a residual
// connection, then a linear head giving one keep logit per row.
//
//   Q = X W_Q + b_Q,  K = X W_K + b_K,  V = X W_V + b_V
//   A_h = softmax(Q_h K_h^T / sqrt(d / H))       (per head, row-wise)
//   hidden = X + concat_h(A_h V_h) W_O + b_O
//   logit_t = w_cls . hidden_t + b_cls,  p_t = logistic(logit_t)
//
// Weight matrices are d_in x d_out (row-vector convention). There is no
// positional encoding, so the policy is permutation-equivariant over rows.
enum class Tensor : int { kWq, kWk, kWv, kWo, kBq, kBk, kBv, kBo, kWcls, kBcls };

inline constexpr std::array<Tensor, 10> kAllTensors = {
    Tensor::kWq, Tensor::kWk, Tensor::kWv, Tensor::kWo, Tensor::kBq,
    Tensor::kBk, Tensor::kBv, Tensor::kBo, Tensor::kWcls, Tensor::kBcls};

inline const char* tensor_name(Tensor t) {
  static constexpr std::array<const char*, 10> names = {
      "W_Q", "W_K", "W_V", "W_O", "b_Q", "b_K", "b_V", "b_O", "w_cls", "b_cls"};
  return names[static_cast<int>(t)];
}

class PolicyParams {
 public:
  PolicyParams() = default;
  PolicyParams(std::size_t dim, std::size_t heads) : dim_(dim), heads_(heads) {
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      fail(ErrorCode::kConfiguration,
           "head count " + std::to_string(heads) + " must divide dimension " +
               std::to_string(dim));
    }
    values_.assign(count_for(dim), 0.0);
  }

  // 4 d^2 weights, 4 d attention biases, d classifier weights, one bias.
  static std::size_t count_for(std::size_t d) { return 4 * d * d + 4 * d + d + 1; }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t head_dim() const noexcept { return dim_ / heads_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::vector<std::size_t> shape(Tensor t) const {
    switch (t) {
      case Tensor::kWq: case Tensor::kWk: case Tensor::kWv: case Tensor::kWo:
        return {dim_, dim_};
      case Tensor::kBcls:
        return {1};
      default:
        return {dim_};
    }
  }

  std::size_t offset(Tensor t) const {
    const auto i = static_cast<std::size_t>(t);
    const std::size_t dd = dim_ * dim_;
    if (i < 4) return i * dd;
    return 4 * dd + (i - 4) * dim_;
  }

  std::size_t tensor_size(Tensor t) const {
    std::size_t n = 1;
    for (auto s : shape(t)) n *= s;
    return n;
  }

  std::span<double> tensor(Tensor t) {
    return std::span<double>(values_).subspan(offset(t), tensor_size(t));
  }
  std::span<const double> tensor(Tensor t) const {
    return std::span<const double>(values_).subspan(offset(t), tensor_size(t));
  }

  double& b_cls() { return values_.back(); }
  double b_cls() const { return values_.back(); }

  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }

  PolicyParams zeros_like() const { return PolicyParams(dim_, heads_); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  std::size_t dim_ = 0;
  std::size_t heads_ = 0;
  std::vector<double> values_;
};

// Uniform(-s, s) projections with s = sqrt(6 / 2d), zero biases, zero
// classifier weights and b_cls = +1 (initial keep probability ~0.73).
inline PolicyParams init_policy(std::size_t dim, std::size_t heads,
                                RandomStream rng, double initial_bias = 1.0) {
  PolicyParams p(dim, heads);
  const double s = std::sqrt(6.0 / (2.0 * static_cast<double>(dim)));
  for (Tensor t : {Tensor::kWq, Tensor::kWk, Tensor::kWv, Tensor::kWo}) {
    for (double& w : p.tensor(t)) w = (2.0 * rng.uniform() - 1.0) * s;
  }
  p.b_cls() = initial_bias;
  return p;
}

inline double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

struct PolicyOutput {
  std::vector<double> logits;
  std::vector<double> keep_probs;

  // Activations for the backward pass.
  Matrix<double> x;
  Matrix<double> q, k, v;
  std::vector<Matrix<double>> attention;  // per head, N x N
  Matrix<double> heads_out;               // concatenated head outputs
  Matrix<double> hidden;

  std::size_t num_rows() const { return logits.size(); }
};

template <typename T>
PolicyOutput forward(const PolicyParams& params, const Matrix<T>& x_in) {
  const std::size_t n = x_in.rows();
  const std::size_t d = params.dim();
  const std::size_t heads = params.heads();
  const std::size_t hd = params.head_dim();
  if (n == 0) fail(ErrorCode::kShape, "policy input has no rows");
  if (x_in.cols() != d) {
    fail(ErrorCode::kDimensionMismatch,
         "policy dimension " + std::to_string(d) + " vs input dimension " +
             std::to_string(x_in.cols()));
  }

  PolicyOutput out;
  out.x = matrix_cast<double>(x_in);
  const auto& x = out.x;

  auto project = [&](Tensor w, Tensor b) {
    Matrix<double> y(n, d);
    auto wt = params.tensor(w);
    auto bt = params.tensor(b);
    for (std::size_t t = 0; t < n; ++t) {
      auto yr = y.row(t);
      std::copy(bt.begin(), bt.end(), yr.begin());
      auto xr = x.row(t);
      for (std::size_t i = 0; i < d; ++i) {
        const double xi = xr[i];
        const double* wrow = wt.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) yr[j] += xi * wrow[j];
      }
    }
    return y;
  };
  out.q = project(Tensor::kWq, Tensor::kBq);
  out.k = project(Tensor::kWk, Tensor::kBk);
  out.v = project(Tensor::kWv, Tensor::kBv);

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  out.attention.assign(heads, Matrix<double>(n, n));
  out.heads_out = Matrix<double>(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * hd;
    auto& a = out.attention[h];
    for (std::size_t t = 0; t < n; ++t) {
      auto ar = a.row(t);
      double row_max = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hd; ++j) acc += out.q(t, c0 + j) * out.k(s, c0 + j);
        ar[s] = acc * scale;
        row_max = std::max(row_max, ar[s]);
      }
      double total = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        ar[s] = std::exp(ar[s] - row_max);
        total += ar[s];
      }
      for (std::size_t s = 0; s < n; ++s) ar[s] /= total;
      for (std::size_t s = 0; s < n; ++s) {
        const double w = ar[s];
        for (std::size_t j = 0; j < hd; ++j) out.heads_out(t, c0 + j) += w * out.v(s, c0 + j);
      }
    }
  }

  out.hidden = x;
  auto wo = params.tensor(Tensor::kWo);
  auto bo = params.tensor(Tensor::kBo);
  auto wcls = params.tensor(Tensor::kWcls);
  out.logits.resize(n);
  out.keep_probs.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto hr = out.hidden.row(t);
    auto orow = out.heads_out.row(t);
    for (std::size_t j = 0; j < d; ++j) hr[j] += bo[j];
    for (std::size_t i = 0; i < d; ++i) {
      const double oi = orow[i];
      const double* wrow = wo.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) hr[j] += oi * wrow[j];
    }
    double z = params.b_cls();
    for (std::size_t j = 0; j < d; ++j) z += wcls[j] * hr[j];
    if (!std::isfinite(z)) {
      fail(ErrorCode::kNumericOverflow, "non-finite policy logit at row " + std::to_string(t));
    }
    out.logits[t] = z;
    out.keep_probs[t] = logistic(z);
  }
  return out;
}

inline double log_prob(const PolicyOutput& out, const KeepMask& mask) {
  if (mask.size() != out.num_rows()) {
    fail(ErrorCode::kShape, "mask length does not match policy output");
  }
  double lp = 0.0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    // log p = -softplus(-z), log(1 - p) = -softplus(z)
    lp -= mask[t] ? softplus(-out.logits[t]) : softplus(out.logits[t]);
  }
  return lp;
}

// Sum of per-row Bernoulli entropies.
inline double entropy(const PolicyOutput& out) {
  double h = 0.0;
  for (std::size_t t = 0; t < out.num_rows(); ++t) {
    const double z = out.logits[t];
    const double p = out.keep_probs[t];
    h += p * softplus(-z) + (1.0 - p) * softplus(z);
  }
  return h;
}

struct SampledMask {
  KeepMask mask;
  double log_prob = 0.0;
};

inline SampledMask sample_mask(const PolicyOutput& out, RandomStream& rng) {
  KeepMask mask(out.num_rows(), false);
  for (std::size_t t = 0; t < out.num_rows(); ++t) {
    mask.set(t, rng.uniform() < out.keep_probs[t]);
  }
  const double lp = log_prob(out, mask);
  return {std::move(mask), lp};
}

inline KeepMask greedy_mask(const PolicyOutput& out, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    fail(ErrorCode::kConfiguration, "threshold must lie in (0, 1)");
  }
  KeepMask mask(out.num_rows(), false);
  for (std::size_t t = 0; t < out.num_rows(); ++t) {
    mask.set(t, out.keep_probs[t] >= threshold);
  }
  return mask;
}

// L = -(1/G) sum_g c_g log pi(a_g | X) - entropy_coeff * H(pi(. | X))
inline double surrogate_loss(const PolicyOutput& out, std::span<const KeepMask> masks,
                             std::span<const double> coefficients,
                             double entropy_coeff = 0.0) {
  if (masks.size() != coefficients.size() || masks.empty()) {
    fail(ErrorCode::kShape, "need one coefficient per mask");
  }
  double loss = 0.0;
  for (std::size_t g = 0; g < masks.size(); ++g) {
    loss -= coefficients[g] * log_prob(out, masks[g]);
  }
  loss /= static_cast<double>(masks.size());
  if (entropy_coeff != 0.0) loss -= entropy_coeff * entropy(out);
  return loss;
}

// Exact gradient of surrogate_loss with respect to every parameter.
inline PolicyParams backward(const PolicyParams& params, const PolicyOutput& out,
                             std::span<const KeepMask> masks,
                             std::span<const double> coefficients,
                             double entropy_coeff = 0.0) {
  const std::size_t n = out.num_rows();
  const std::size_t d = params.dim();
  const std::size_t heads = params.heads();
  const std::size_t hd = params.head_dim();
  if (masks.size() != coefficients.size() || masks.empty()) {
    fail(ErrorCode::kShape, "need one coefficient per mask");
  }
  if (out.x.cols() != d || out.hidden.rows() != n) {
    fail(ErrorCode::kShape, "cached activations do not match the parameters");
  }
  for (const auto& m : masks) {
    if (m.size() != n) fail(ErrorCode::kShape, "mask length does not match policy output");
  }

  // d log pi / d logit_t = a_t - p_t
  std::vector<double> dlogit(n, 0.0);
  const double inv_g = 1.0 / static_cast<double>(masks.size());
  for (std::size_t g = 0; g < masks.size(); ++g) {
    const double c = coefficients[g];
    if (c == 0.0) continue;
    for (std::size_t t = 0; t < n; ++t) {
      dlogit[t] -= c * ((masks[g][t] ? 1.0 : 0.0) - out.keep_probs[t]);
    }
  }
  for (auto& x : dlogit) x *= inv_g;
  if (entropy_coeff != 0.0) {
    // dH/dz = -p (1 - p) z
    for (std::size_t t = 0; t < n; ++t) {
      const double p = out.keep_probs[t];
      dlogit[t] += entropy_coeff * p * (1.0 - p) * out.logits[t];
    }
  }

  PolicyParams grad = params.zeros_like();
  auto wcls = params.tensor(Tensor::kWcls);
  auto wo = params.tensor(Tensor::kWo);

  // Classifier head.
  {
    auto gw = grad.tensor(Tensor::kWcls);
    double gb = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      gb += dlogit[t];
      auto hr = out.hidden.row(t);
      for (std::size_t j = 0; j < d; ++j) gw[j] += dlogit[t] * hr[j];
    }
    grad.b_cls() = gb;
  }

  // hidden = X + heads_out W_O + b_O; d hidden_t = dlogit_t * w_cls.
  Matrix<double> d_heads(n, d);
  {
    auto gwo = grad.tensor(Tensor::kWo);
    auto gbo = grad.tensor(Tensor::kBo);
    std::vector<double> wo_wcls(d, 0.0);  // W_O w_cls
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) wo_wcls[i] += wo[i * d + j] * wcls[j];
    }
    for (std::size_t t = 0; t < n; ++t) {
      const double dz = dlogit[t];
      if (dz == 0.0) continue;
      auto orow = out.heads_out.row(t);
      for (std::size_t j = 0; j < d; ++j) gbo[j] += dz * wcls[j];
      for (std::size_t i = 0; i < d; ++i) {
        const double oi_dz = orow[i] * dz;
        double* grow = gwo.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) grow[j] += oi_dz * wcls[j];
        d_heads(t, i) = dz * wo_wcls[i];
      }
    }
  }

  // Attention, per head.
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix<double> dq(n, d), dk(n, d), dv(n, d);
  std::vector<double> da(n), ds(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * hd;
    const auto& a = out.attention[h];
    for (std::size_t t = 0; t < n; ++t) {
      // dA_ts = dO_t . V_s ; dV_s += A_ts dO_t
      double weighted = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hd; ++j) {
          acc += d_heads(t, c0 + j) * out.v(s, c0 + j);
          dv(s, c0 + j) += a(t, s) * d_heads(t, c0 + j);
        }
        da[s] = acc;
        weighted += acc * a(t, s);
      }
      // Softmax Jacobian: dS_ts = A_ts (dA_ts - sum_u A_tu dA_tu).
      for (std::size_t s = 0; s < n; ++s) ds[s] = a(t, s) * (da[s] - weighted) * scale;
      for (std::size_t s = 0; s < n; ++s) {
        const double g = ds[s];
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < hd; ++j) {
          dq(t, c0 + j) += g * out.k(s, c0 + j);
          dk(s, c0 + j) += g * out.q(t, c0 + j);
        }
      }
    }
  }

  // Input projections: dW = X^T dY, db = column sums of dY.
  auto accumulate = [&](const Matrix<double>& dy, Tensor w, Tensor b) {
    auto gw = grad.tensor(w);
    auto gb = grad.tensor(b);
    for (std::size_t t = 0; t < n; ++t) {
      auto xr = out.x.row(t);
      auto dr = dy.row(t);
      for (std::size_t j = 0; j < d; ++j) gb[j] += dr[j];
      for (std::size_t i = 0; i < d; ++i) {
        const double xi = xr[i];
        double* grow = gw.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) grow[j] += xi * dr[j];
      }
    }
  };
  accumulate(dq, Tensor::kWq, Tensor::kBq);
  accumulate(dk, Tensor::kWk, Tensor::kBk);
  accumulate(dv, Tensor::kWv, Tensor::kBv);
  return grad;
}

namespace detail {

inline void write_f64_le(std::ostream& out, std::span<const double> values) {
  std::vector<char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    std::memcpy(buf.data() + 8 * i, &bits, 8);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> decode_f64_le(std::span<const char> bytes) {
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, bytes.data() + 8 * i, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

inline void write_f64_file(const fs::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kStorage, "cannot write " + path.string());
  write_f64_le(out, values);
  out.close();
  if (!out) fail(ErrorCode::kStorage, "write failed: " + path.string());
}

}  // namespace detail

// policy.json + policy.bin (little-endian float64, header order).
inline void save_policy(const PolicyParams& params, const fs::path& dir) {
  detail::ensure_directory(dir);
  nlohmann::json header;
  header["dim"] = params.dim();
  header["heads"] = params.heads();
  header["tensors"] = nlohmann::json::array();
  for (Tensor t : kAllTensors) {
    header["tensors"].push_back({{"name", tensor_name(t)},
                                 {"shape", params.shape(t)},
                                 {"offset_floats", params.offset(t)}});
  }
  detail::write_f64_file(dir / "policy.bin", params.flat());
  detail::write_text(dir / "policy.json", header.dump(2) + "\n");
}

inline PolicyParams load_policy(const fs::path& dir) {
  const auto header = detail::parse_json_file(dir / "policy.json", ErrorCode::kCorruptStore);
  PolicyParams params;
  try {
    params = PolicyParams(header.at("dim").get<std::size_t>(),
                          header.at("heads").get<std::size_t>());
    const auto& tensors = header.at("tensors");
    if (tensors.size() != kAllTensors.size()) {
      fail(ErrorCode::kCorruptStore, "policy.json lists the wrong number of tensors");
    }
    for (std::size_t i = 0; i < kAllTensors.size(); ++i) {
      const Tensor t = kAllTensors[i];
      const auto& entry = tensors[i];
      if (entry.at("name").get<std::string>() != tensor_name(t) ||
          entry.at("shape").get<std::vector<std::size_t>>() != params.shape(t) ||
          entry.at("offset_floats").get<std::size_t>() != params.offset(t)) {
        fail(ErrorCode::kCorruptStore,
             "policy.json tensor " + std::to_string(i) + " does not match the expected layout");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptStore, "malformed policy.json: " + std::string(e.what()));
  }
  const auto bytes = detail::read_all_bytes(dir / "policy.bin");
  if (bytes.size() != params.size() * 8) {
    fail(ErrorCode::kCorruptStore, "policy.bin size does not match policy.json");
  }
  const auto values = detail::decode_f64_le(bytes);
  std::copy(values.begin(), values.end(), params.flat().begin());
  if (!params.all_finite()) fail(ErrorCode::kDataValidation, "non-finite policy weight");
  return params;
}

}  // namespace reinpool
