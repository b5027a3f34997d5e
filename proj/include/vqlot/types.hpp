#pragma once

// Core domain types for the terminal virtual-queue model.
//
// Unit conventions, used everywhere in this library:
//   time      : hours
//   rates     : per hour (vehicles/h, orders/h)
//   money     : currency units; opportunity rates are currency per hour
// Inputs in other units (e.g. trip duration in minutes) must be converted
// before constructing MarketParams.

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <algorithm>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqlot/rng.hpp"

namespace vqlot {

class SolveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Economic environment: M heterogeneous driver groups feeding one
// passenger stream.  Immutable after construction; validate() enforces the
// model's standing assumptions.
struct MarketParams {
  int group_count = 0;                       // M
  std::vector<double> arrival_rates;         // lambda_m, vehicles/h
  double passenger_rate = 0.0;               // mu, orders/h
  std::vector<double> rewards;               // R_m, currency per order
  double driver_opportunity_rate = 0.0;      // r, currency/h
  double platform_opportunity_rate = 0.0;    // nu, currency/h
  double trip_duration = 0.0;                // T_d, hours
  std::optional<double> commission_cap;      // p_max, currency (absent = unregulated)

  void validate() const {
    if (group_count < 1) throw std::invalid_argument("MarketParams: group_count must be >= 1");
    if (static_cast<int>(arrival_rates.size()) != group_count ||
        static_cast<int>(rewards.size()) != group_count)
      throw std::invalid_argument("MarketParams: per-group arrays must have group_count entries");
    for (double l : arrival_rates)
      if (!(l > 0.0)) throw std::invalid_argument("MarketParams: arrival rates must be > 0");
    if (!(passenger_rate > 0.0)) throw std::invalid_argument("MarketParams: passenger rate must be > 0");
    if (!(driver_opportunity_rate > 0.0)) throw std::invalid_argument("MarketParams: r must be > 0");
    if (!(platform_opportunity_rate > 0.0)) throw std::invalid_argument("MarketParams: nu must be > 0");
    if (!(trip_duration > 0.0)) throw std::invalid_argument("MarketParams: trip duration must be > 0");
    if (commission_cap && !(*commission_cap > 0.0))
      throw std::invalid_argument("MarketParams: commission cap must be > 0 when present");
    // At least one group must generate surplus, otherwise every admission
    // destroys value and the optimal capacity question is degenerate.
    bool any_surplus = false;
    for (int m = 0; m < group_count; ++m)
      any_surplus |= rewards[m] - (driver_opportunity_rate + platform_opportunity_rate) * trip_duration > 0.0;
    if (!any_surplus)
      throw std::invalid_argument(
          "MarketParams: R_m - (r+nu)*T_d must be > 0 for at least one group");
  }

  double total_arrival_rate() const {
    return std::accumulate(arrival_rates.begin(), arrival_rates.end(), 0.0);
  }
};

// Per-group joining thresholds N_m.  The queue never exceeds max_capacity()
// in equilibrium.
struct CapacityVector {
  std::vector<int> capacities;

  CapacityVector() = default;
  explicit CapacityVector(std::vector<int> caps) : capacities(std::move(caps)) {}

  int group_count() const { return static_cast<int>(capacities.size()); }
  int max_capacity() const {
    return *std::max_element(capacities.begin(), capacities.end());
  }

  void validate(const MarketParams& params) const {
    if (group_count() != params.group_count)
      throw std::invalid_argument("CapacityVector: group count mismatch");
    for (int n : capacities)
      if (n < 1) throw std::invalid_argument("CapacityVector: capacities must be >= 1");
  }

  bool operator==(const CapacityVector& o) const { return capacities == o.capacities; }
};

enum class OverCapacityRule { none, back_placement };

// Entry-position lotteries.  entries[m][n] is the probability vector over
// insertion positions 1..n+1 used when a group-m driver joins a queue of
// length n, defined for n = 0..N_m-1.  Row n = 0 is always the point mass
// at position 1.
struct LotteryPolicy {
  std::vector<std::vector<std::vector<double>>> entries;
  OverCapacityRule over_capacity_rule = OverCapacityRule::none;

  int group_count() const { return static_cast<int>(entries.size()); }

  void validate(const CapacityVector& caps, double tol = 1e-12) const {
    if (group_count() != caps.group_count())
      throw std::invalid_argument("LotteryPolicy: group count mismatch");
    for (int m = 0; m < group_count(); ++m) {
      if (static_cast<int>(entries[m].size()) != caps.capacities[m])
        throw std::invalid_argument("LotteryPolicy: group " + std::to_string(m) +
                                    " must carry one row per queue length below capacity");
      for (int n = 0; n < static_cast<int>(entries[m].size()); ++n) {
        const auto& row = entries[m][n];
        if (static_cast<int>(row.size()) != n + 1)
          throw std::invalid_argument("LotteryPolicy: row length must equal queue length + 1");
        double sum = 0.0;
        for (double p : row) {
          if (p < -tol) throw std::invalid_argument("LotteryPolicy: negative probability");
          sum += p;
        }
        if (std::abs(sum - 1.0) > tol)
          throw std::invalid_argument("LotteryPolicy: row does not sum to 1");
      }
    }
  }
};

// Static per-group commission fees.  Dual to the maximum tolerable wait
// xi_m through p_m = R_m - r (T_d + xi_m).
struct PricePolicy {
  std::vector<double> fees;

  void validate(const MarketParams& params) const {
    if (static_cast<int>(fees.size()) != params.group_count)
      throw std::invalid_argument("PricePolicy: group count mismatch");
    for (int m = 0; m < params.group_count; ++m) {
      if (fees[m] > params.rewards[m] - params.driver_opportunity_rate * params.trip_duration + 1e-9)
        throw std::invalid_argument("PricePolicy: fee exceeds what a zero-wait driver would accept");
      if (params.commission_cap && fees[m] > *params.commission_cap + 1e-9)
        throw std::invalid_argument("PricePolicy: fee exceeds the commission cap");
    }
  }
};

inline void check_group(const MarketParams& params, int group) {
  if (group < 0 || group >= params.group_count)
    throw std::invalid_argument("group index out of range");
}

// Expected utility of a group-m driver joining at the given price and
// expected wait: R_m - p - r (T_d + W).
inline double joining_utility(const MarketParams& params, int group, double price,
                              double expected_wait) {
  check_group(params, group);
  if (expected_wait < 0.0) throw std::invalid_argument("joining_utility: negative wait");
  return params.rewards[group] - price -
         params.driver_opportunity_rate * (params.trip_duration + expected_wait);
}

// Threshold-form joining rate: lambda_m while the queue is below N_m, zero after.
inline double effective_arrival_rate(const MarketParams& params, int group, int queue_length,
                                     const CapacityVector& caps) {
  check_group(params, group);
  if (queue_length < 0) throw std::invalid_argument("effective_arrival_rate: negative length");
  return queue_length < caps.capacities[group] ? params.arrival_rates[group] : 0.0;
}

// Total joining rate at a given queue length.
inline double total_effective_rate(const MarketParams& params, const CapacityVector& caps,
                                   int queue_length) {
  double s = 0.0;
  for (int m = 0; m < params.group_count; ++m)
    s += effective_arrival_rate(params, m, queue_length, caps);
  return s;
}

// Canonical lottery constructors.

inline LotteryPolicy make_fifo_lottery(const CapacityVector& caps) {
  LotteryPolicy lot;
  lot.entries.resize(caps.group_count());
  for (int m = 0; m < caps.group_count(); ++m) {
    lot.entries[m].resize(caps.capacities[m]);
    for (int n = 0; n < caps.capacities[m]; ++n) {
      lot.entries[m][n].assign(n + 1, 0.0);
      lot.entries[m][n][n] = 1.0;  // back of the queue
    }
  }
  return lot;
}

inline LotteryPolicy make_lifo_lottery(const CapacityVector& caps) {
  LotteryPolicy lot;
  lot.entries.resize(caps.group_count());
  for (int m = 0; m < caps.group_count(); ++m) {
    lot.entries[m].resize(caps.capacities[m]);
    for (int n = 0; n < caps.capacities[m]; ++n) {
      lot.entries[m][n].assign(n + 1, 0.0);
      lot.entries[m][n][0] = 1.0;  // front of the queue
    }
  }
  return lot;
}

inline LotteryPolicy make_uniform_lottery(const CapacityVector& caps) {
  LotteryPolicy lot;
  lot.entries.resize(caps.group_count());
  for (int m = 0; m < caps.group_count(); ++m) {
    lot.entries[m].resize(caps.capacities[m]);
    for (int n = 0; n < caps.capacities[m]; ++n)
      lot.entries[m][n].assign(n + 1, 1.0 / (n + 1));
  }
  return lot;
}

inline LotteryPolicy make_random_lottery(const CapacityVector& caps, Rng& rng) {
  LotteryPolicy lot;
  lot.entries.resize(caps.group_count());
  for (int m = 0; m < caps.group_count(); ++m) {
    lot.entries[m].resize(caps.capacities[m]);
    for (int n = 0; n < caps.capacities[m]; ++n) {
      auto& row = lot.entries[m][n];
      row.resize(n + 1);
      double sum = 0.0;
      for (double& p : row) {
        p = 0.05 + rng.uniform();
        sum += p;
      }
      for (double& p : row) p /= sum;
    }
  }
  return lot;
}

}  // namespace vqlot
