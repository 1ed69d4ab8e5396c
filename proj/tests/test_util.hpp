// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "snip/model.hpp"

namespace snip::testing_util {

/// Worst entrywise relative error between analytic gradients and central
/// differences of the full-precision loss, |a - f| / max(|a|, |f|, floor).
inline double max_fd_relative_error(const Model& model, const Batch& batch, const GradSet& grads, double h,
                                    double floor = 1e-6) {
  const auto policy = PrecisionPolicy::uniform(model.config(), LayerPrecision::high_precision(), "hp");
  Model probe = model;
  double worst = 0.0;
  for (std::size_t p = 0; p < probe.params().size(); ++p) {
    for (std::size_t i = 0; i < probe.params()[p].size(); ++i) {
      const double orig = probe.params()[p][i];
      probe.mutable_params()[p][i] = orig + h;
      const double up = probe.forward(batch, policy, std::nullopt, RngStream()).loss;
      probe.mutable_params()[p][i] = orig - h;
      const double down = probe.forward(batch, policy, std::nullopt, RngStream()).loss;
      probe.mutable_params()[p][i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double a = grads.params[p][i];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor}));
    }
  }
  return worst;
}

}  // namespace snip::testing_util
