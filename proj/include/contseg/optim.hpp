// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "contseg/nn.hpp"

namespace contseg {

/// SGD with heavy-ball momentum: v = mu v + g; p -= lr v.
class Sgd {
 public:
  Sgd() = default;
  Sgd(ParamRefs params, double momentum);

  void step(double lr);
  void zero_grad();
  void reset_momentum();
  const ParamRefs& params() const { return params_; }

 private:
  ParamRefs params_;
  double momentum_ = 0.9;
  std::vector<std::vector<float>> velocity_;
};

/// base * (1 - epoch / total)^exponent, clamped at 0 past the end.
double poly_lr(double base, int epoch, int total, double exponent = 0.9);

}  // namespace contseg
