// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/optim.hpp"

#include <algorithm>
#include <cmath>

#include "contseg/error.hpp"

namespace contseg {

Sgd::Sgd(ParamRefs params, double momentum) : params_(std::move(params)), momentum_(momentum) {
  if (momentum < 0 || momentum >= 1) throw InvalidArgument("momentum must lie in [0, 1)");
  for (const auto* p : params_) velocity_.emplace_back(p->size(), 0.f);
}

void Sgd::step(double lr) {
  const float mu = static_cast<float>(momentum_), rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ParamArray& p = *params_[i];
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + p.grad[j];
      p.value[j] -= rate * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Sgd::reset_momentum() {
  for (auto& v : velocity_) std::fill(v.begin(), v.end(), 0.f);
}

double poly_lr(double base, int epoch, int total, double exponent) {
  if (total <= 0) throw InvalidArgument("poly_lr needs a positive epoch count");
  const double f = 1.0 - static_cast<double>(epoch) / total;
  return f <= 0 ? 0.0 : base * std::pow(f, exponent);
}

}  // namespace contseg
