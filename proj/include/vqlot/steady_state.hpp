#pragma once

// Stationary distribution of the queue-length birth-death chain.  Birth
// rate at length n is the total threshold joining rate, death rate is the
// passenger rate; the chain is finite because every group balks at its
// capacity.

#include <vector>

#include "vqlot/types.hpp"

namespace vqlot {

struct SteadyState {
  std::vector<double> probabilities;  // P_n for n = 0..max_capacity

  int states() const { return static_cast<int>(probabilities.size()); }

  // Total probability of lengths strictly below n.
  double mass_below(int n) const {
    double s = 0.0;
    for (int i = 0; i < n && i < states(); ++i) s += probabilities[i];
    return s;
  }

  double mean_length() const {
    double s = 0.0;
    for (int n = 0; n < states(); ++n) s += n * probabilities[n];
    return s;
  }
};

inline SteadyState steady_state(const MarketParams& params, const CapacityVector& caps) {
  caps.validate(params);
  const int top = caps.max_capacity();
  std::vector<double> weight(top + 1);
  weight[0] = 1.0;
  for (int n = 1; n <= top; ++n)
    weight[n] = weight[n - 1] * total_effective_rate(params, caps, n - 1) / params.passenger_rate;
  double z = 0.0;
  for (double w : weight) z += w;
  SteadyState ss;
  ss.probabilities.resize(top + 1);
  for (int n = 0; n <= top; ++n) ss.probabilities[n] = weight[n] / z;
  return ss;
}

}  // namespace vqlot
