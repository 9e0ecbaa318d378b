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
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "reinpool/policy.hpp"
#include "reinpool/random.hpp"

namespace reinpool {

struct GradCheckOptions {
  std::size_t dim = 8;
  std::size_t heads = 2;
  std::size_t rows = 6;
  std::size_t masks = 2;
  double epsilon = 1e-5;
  double rel_tolerance = 1e-4;
  double abs_floor = 1e-6;
  double entropy_coeff = 0.0;
  std::uint64_t seed = 7;
  bool corrupt_gradient = false;  // test hook: perturbs one analytic entry
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::array<double, kAllTensors.size()> tensor_rel_error{};
  bool passed = false;
};

// Scaled error per entry: |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
inline double gradient_entry_error(double analytic, double numeric, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), abs_floor});
}

// Central finite differences of the surrogate loss against backward() on a
// random instance, every parameter entry.
inline GradCheckResult gradient_check(const GradCheckOptions& opt) {
  PolicyParams params(opt.dim, opt.heads);
  RandomStream rng(RandomStream::derive_key(opt.seed, {0x47524144ULL}));
  for (double& w : params.flat()) w = rng.uniform() - 0.5;
  Matrix<double> x(opt.rows, opt.dim);
  for (double& v : x.flat()) v = rng.normal();

  std::vector<KeepMask> masks;
  std::vector<double> coefs;
  for (std::size_t g = 0; g < opt.masks; ++g) {
    KeepMask m(opt.rows, false);
    for (std::size_t t = 0; t < opt.rows; ++t) m.set(t, rng.uniform() < 0.5);
    masks.push_back(m);
    coefs.push_back(2.0 * rng.uniform() - 1.0);
  }

  const auto out = forward(params, x);
  PolicyParams grad = backward(params, out, masks, coefs, opt.entropy_coeff);
  if (opt.corrupt_gradient) grad.tensor(Tensor::kWq)[0] += 1e-2 + std::abs(grad.tensor(Tensor::kWq)[0]);

  GradCheckResult result;
  for (std::size_t ti = 0; ti < kAllTensors.size(); ++ti) {
    const Tensor t = kAllTensors[ti];
    auto analytic = grad.tensor(t);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      PolicyParams plus = params, minus = params;
      plus.tensor(t)[i] += opt.epsilon;
      minus.tensor(t)[i] -= opt.epsilon;
      const double lp = surrogate_loss(forward(plus, x), masks, coefs, opt.entropy_coeff);
      const double lm = surrogate_loss(forward(minus, x), masks, coefs, opt.entropy_coeff);
      const double numeric = (lp - lm) / (2.0 * opt.epsilon);
      const double err = gradient_entry_error(analytic[i], numeric, opt.abs_floor);
      result.tensor_rel_error[ti] = std::max(result.tensor_rel_error[ti], err);
      result.max_rel_error = std::max(result.max_rel_error, err);
    }
  }
  result.passed = result.max_rel_error <= opt.rel_tolerance;
  return result;
}

}  // namespace reinpool
