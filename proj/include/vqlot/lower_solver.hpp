#pragma once

// Lower level of the bi-level program: for fixed capacities, find the
// lottery (and the coupled prices / wait tolerances) maximizing the
// steady-state objective.
//
// Structure exploited throughout: the queue-length chain, hence the steady
// state and the mean queue length, do not depend on the lottery.  Little's
// law then fixes the probability-weighted total wait, so
//   - the weighted welfare rate is the same for every feasible lottery
//     (capacity_value is the exact optimum), and
//   - the weighted profit rate is bounded above by capacity_value, attained
//     exactly by any lottery with per-group constant expected waits.
// The profit solver therefore drives the waits to a constant target with a
// projected Gauss-Newton iteration (adjoint-based analytic Jacobian) and
// certifies global optimality by comparing the achieved value against the
// bound.  Projected-gradient ascent on a smoothed objective remains as the
// fallback and serves the unweighted diagnostic variant, where no closed
// form exists.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "vqlot/objectives.hpp"
#include "vqlot/rng.hpp"
#include "vqlot/steady_state.hpp"
#include "vqlot/types.hpp"
#include "vqlot/waiting.hpp"

namespace vqlot {

struct SolverOptions {
  double tol_obj = 1e-8;        // relative objective tolerance (stationarity)
  int max_iterations = 5000;    // budget per start for the gradient path
  int max_newton_iterations = 120;
  double equalize_tol = 1e-10;  // relative constant-wait residual target
  double step_min = 1e-9;       // smallest probed perturbation
  int multistarts = 5;          // uniform, FIFO, LIFO + seeded random
  std::uint64_t seed = 1;
  int cap_grid_points = 9;      // outer wait-split search under a binding cap
  int cap_golden_iterations = 16;
  int certificate_slack = 10;   // over-capacity horizon beyond max capacity
  bool value_only = false;      // skip result assembly (fitness evaluations)
  ObjectiveConvention convention;
};

struct LowerLevelResult {
  LotteryPolicy lottery;               // over-capacity rule attached
  PricePolicy prices;
  std::vector<double> xi;              // per-group max expected wait
  EquilibriumSolution equilibrium;     // empty when value_only was set
  double objective_value = 0.0;        // evaluated at the returned lottery
  std::optional<double> certified_value;  // exact optimum when certified
  bool converged = false;
  bool certificate_ok = false;         // balk-deterrence certificate
  int iterations = 0;

  double fitness() const { return certified_value ? *certified_value : objective_value; }
};

namespace detail {

// ---------------------------------------------------------------------------
// Euclidean projection onto the probability simplex (Held/Michelot).
inline void project_simplex(std::vector<double>& v) {
  std::vector<double> u(v);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    css += u[i];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  double s = 0.0;
  for (double& x : v) {
    x = std::max(0.0, x - theta);
    s += x;
  }
  for (double& x : v) x /= s;
}

// Flattened layout of the free lottery rows (row n = 0 is the forced point
// mass and carries no variables).
struct VariableLayout {
  struct Block {
    int group;
    int length;  // queue length n; the row has n+1 entries
    int offset;
  };
  std::vector<Block> blocks;
  int dimension = 0;

  explicit VariableLayout(const CapacityVector& caps) {
    for (int m = 0; m < caps.group_count(); ++m)
      for (int n = 1; n < caps.capacities[m]; ++n) {
        blocks.push_back({m, n, dimension});
        dimension += n + 1;
      }
  }
};

inline LotteryPolicy unpack_lottery(const VariableLayout& layout, const CapacityVector& caps,
                                    const std::vector<double>& x) {
  LotteryPolicy lot;
  lot.entries.resize(caps.group_count());
  for (int m = 0; m < caps.group_count(); ++m) {
    lot.entries[m].resize(caps.capacities[m]);
    lot.entries[m][0] = {1.0};
  }
  for (const auto& b : layout.blocks) {
    auto& row = lot.entries[b.group][b.length];
    row.assign(x.begin() + b.offset, x.begin() + b.offset + b.length + 1);
  }
  return lot;
}

inline std::vector<double> pack_lottery(const VariableLayout& layout, const LotteryPolicy& lot) {
  std::vector<double> x(layout.dimension);
  for (const auto& b : layout.blocks) {
    const auto& row = lot.entries[b.group][b.length];
    std::copy(row.begin(), row.end(), x.begin() + b.offset);
  }
  return x;
}

inline void project_rows(const VariableLayout& layout, std::vector<double>& x) {
  std::vector<double> row;
  for (const auto& b : layout.blocks) {
    row.assign(x.begin() + b.offset, x.begin() + b.offset + b.length + 1);
    project_simplex(row);
    std::copy(row.begin(), row.end(), x.begin() + b.offset);
  }
}

// One forward evaluation: factorized wait system plus per-group waits.
struct Forward {
  LotteryPolicy lottery;
  std::unique_ptr<WaitSystem> system;
  Eigen::VectorXd w;
  std::vector<std::vector<double>> waits;  // W_m^n

  Forward(const MarketParams& params, const CapacityVector& caps, LotteryPolicy lot)
      : lottery(std::move(lot)) {
    system = std::make_unique<WaitSystem>(params, caps, lottery);
    w = system->solution();
    waits.resize(caps.group_count());
    for (int m = 0; m < caps.group_count(); ++m) {
      waits[m].resize(caps.capacities[m]);
      for (int n = 0; n < caps.capacities[m]; ++n) {
        const auto& row = lottery.entries[m][n];
        double acc = 0.0;
        for (int l = 1; l <= n + 1; ++l) acc += row[l - 1] * w(wait_index(n, l));
        waits[m][n] = acc;
      }
    }
  }

  WaitingTimes to_waiting_times(const LotteryPolicy& lot, const CapacityVector& caps) const {
    WaitingTimes wt;
    const int levels = system->levels();
    wt.conditional.resize(levels);
    for (int n = 0; n < levels; ++n) {
      wt.conditional[n].resize(n + 1);
      for (int l = 1; l <= n + 1; ++l) wt.conditional[n][l - 1] = w(wait_index(n, l));
    }
    wt.expected = expected_waits(wt, lot, caps);
    return wt;
  }
};

// d(functional)/d(lottery variables) for a functional with adjoint y
// (solving A^T y = dF/dw); the direct dependence dF/dW is contracted by the
// caller.  For variable row (m', k), entry i (1-based position):
//   lam_{m'} * sum_{l >= i} y(k-1, l) * (w(k, l+1) - w(k, l))
// because raising the insertion mass at position i moves every tracked
// driver at rank l >= i from "keeps its rank" to "pushed back one".
inline void accumulate_adjoint(const MarketParams& params, const VariableLayout& layout,
                               const Eigen::VectorXd& w, const Eigen::VectorXd& y,
                               double scale, std::vector<double>& grad) {
  std::vector<double> suffix;
  for (const auto& b : layout.blocks) {
    const int k = b.length;
    const double lam = params.arrival_rates[b.group];
    suffix.assign(k + 2, 0.0);
    for (int l = k; l >= 1; --l) {
      const double dl = y(wait_index(k - 1, l)) * (w(wait_index(k, l + 1)) - w(wait_index(k, l)));
      suffix[l] = suffix[l + 1] + dl;
    }
    for (int i = 1; i <= k + 1; ++i)
      grad[b.offset + i - 1] += scale * lam * suffix[std::min(i, k + 1)];
  }
}

// ---------------------------------------------------------------------------
// Projected Gauss-Newton for wait equalization: drive W_m^n -> target_m.
// In free mode the targets float to the current per-group means, so the
// iteration settles on whichever per-group-constant point is reachable.
struct EqualizeResult {
  std::vector<double> x;
  std::vector<std::vector<double>> waits;
  double max_residual = std::numeric_limits<double>::infinity();
  bool ok = false;
  int iterations = 0;
};

class Equalizer {
 public:
  Equalizer(const MarketParams& params, const CapacityVector& caps)
      : params_(params), caps_(caps), layout_(caps) {
    for (int m = 0; m < caps.group_count(); ++m) residual_count_ += caps.capacities[m];
  }

  const VariableLayout& layout() const { return layout_; }

  EqualizeResult run(std::vector<double> targets, std::vector<double> x0, int max_iters,
                     double tol_abs, bool free_levels = false) {
    EqualizeResult res;
    project_rows(layout_, x0);
    std::vector<double> x = std::move(x0);

    auto forward = std::make_unique<Forward>(params_, caps_, unpack_lottery(layout_, caps_, x));
    if (free_levels) recenter(*forward, targets);
    Eigen::VectorXd r = residuals(*forward, targets);
    double err = r.cwiseAbs().maxCoeff();
    double damping = 1e-12;

    for (int it = 0; it < max_iters && err > tol_abs && layout_.dimension > 0; ++it) {
      ++res.iterations;
      Eigen::MatrixXd jac = jacobian(*forward);

      // Minimum-norm Levenberg step: p = -J^T (J J^T + tau I)^{-1} r.
      Eigen::MatrixXd gram = jac * jac.transpose();
      const double tau = damping * std::max(1.0, gram.trace() / gram.rows());
      gram.diagonal().array() += tau;
      Eigen::VectorXd q = gram.ldlt().solve(-r);
      Eigen::VectorXd step = jac.transpose() * q;

      bool accepted = try_step(x, step, targets, free_levels, forward, r, err);
      if (!accepted) {
        Eigen::VectorXd gstep = -(jac.transpose() * r);
        accepted = try_step(x, gstep, targets, free_levels, forward, r, err);
      }
      if (!accepted) {
        damping *= 100.0;
        if (damping > 1e4) break;
      } else {
        damping = std::max(damping / 10.0, 1e-12);
      }
    }

    res.x = std::move(x);
    res.waits = forward->waits;
    res.max_residual = err;
    res.ok = err <= tol_abs;
    return res;
  }

 private:
  void recenter(const Forward& f, std::vector<double>& targets) const {
    for (int m = 0; m < caps_.group_count(); ++m) {
      double mean = 0.0;
      for (double w : f.waits[m]) mean += w;
      targets[m] = mean / f.waits[m].size();
    }
  }

  Eigen::VectorXd residuals(const Forward& f, const std::vector<double>& targets) const {
    Eigen::VectorXd r(residual_count_);
    int k = 0;
    for (int m = 0; m < caps_.group_count(); ++m)
      for (int n = 0; n < caps_.capacities[m]; ++n) r(k++) = f.waits[m][n] - targets[m];
    return r;
  }

  Eigen::MatrixXd jacobian(Forward& f) {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(residual_count_, layout_.dimension);
    std::vector<double> grad(layout_.dimension);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(f.system->size());
    int row = 0;
    for (int m = 0; m < caps_.group_count(); ++m) {
      for (int n = 0; n < caps_.capacities[m]; ++n, ++row) {
        const auto& delta = f.lottery.entries[m][n];
        g.setZero();
        for (int l = 1; l <= n + 1; ++l) g(wait_index(n, l)) = delta[l - 1];
        Eigen::VectorXd y = f.system->solve_transpose(g);
        std::fill(grad.begin(), grad.end(), 0.0);
        accumulate_adjoint(params_, layout_, f.w, y, 1.0, grad);
        for (int c = 0; c < layout_.dimension; ++c) jac(row, c) = grad[c];
        // Direct dependence of W_m^n on its own lottery row.
        for (const auto& b : layout_.blocks) {
          if (b.group != m || b.length != n) continue;
          for (int i = 1; i <= n + 1; ++i) jac(row, b.offset + i - 1) += f.w(wait_index(n, i));
        }
      }
    }
    return jac;
  }

  bool try_step(std::vector<double>& x, const Eigen::VectorXd& direction,
                std::vector<double>& targets, bool free_levels,
                std::unique_ptr<Forward>& forward, Eigen::VectorXd& r, double& err) {
    double alpha = 1.0;
    for (int ls = 0; ls < 28; ++ls, alpha *= 0.5) {
      std::vector<double> trial(x);
      for (int c = 0; c < layout_.dimension; ++c) trial[c] += alpha * direction(c);
      project_rows(layout_, trial);
      auto fwd = std::make_unique<Forward>(params_, caps_, unpack_lottery(layout_, caps_, trial));
      std::vector<double> t(targets);
      if (free_levels) recenter(*fwd, t);
      Eigen::VectorXd rr = residuals(*fwd, t);
      const double e = rr.cwiseAbs().maxCoeff();
      if (e < err * (1.0 - 1e-4 * alpha)) {
        x = std::move(trial);
        forward = std::move(fwd);
        targets = std::move(t);
        r = std::move(rr);
        err = e;
        return true;
      }
    }
    return false;
  }

  const MarketParams& params_;
  const CapacityVector& caps_;
  VariableLayout layout_;
  int residual_count_ = 0;
};

// ---------------------------------------------------------------------------
// Objective evaluation for a concrete lottery (prices implied by the waits).
inline PricePolicy implied_prices(const MarketParams& params,
                                  const std::vector<std::vector<double>>& waits) {
  PricePolicy prices;
  prices.fees.resize(params.group_count);
  for (int m = 0; m < params.group_count; ++m) {
    double xi = 0.0;
    for (double w : waits[m]) xi = std::max(xi, w);
    double p = price_from_wait(params, m, xi);
    if (params.commission_cap) p = std::min(p, *params.commission_cap);
    prices.fees[m] = p;
  }
  return prices;
}

inline double objective_of(const MarketParams& params, const CapacityVector& caps,
                           const SteadyState& ss, const std::vector<std::vector<double>>& waits,
                           const PricePolicy& prices, ObjectiveKind kind,
                           const ObjectiveConvention& conv) {
  double total = 0.0;
  for (int m = 0; m < params.group_count; ++m) {
    double acc = 0.0;
    for (int n = 0; n < caps.capacities[m]; ++n) {
      const double weight =
          conv.weighting == Weighting::steady_state ? ss.probabilities[n] : 1.0;
      acc += weight * joiner_value(params, m, prices.fees[m], waits[m][n], kind, conv);
    }
    total += params.arrival_rates[m] * acc;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Projected-gradient ascent on the smoothed objective (fallback path and
// the unweighted diagnostic variant).
struct PgdResult {
  std::vector<double> x;
  std::vector<std::vector<double>> waits;
  double objective = -std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool stationary = false;
};

class GradientSolver {
 public:
  GradientSolver(const MarketParams& params, const CapacityVector& caps, ObjectiveKind kind,
                 const ObjectiveConvention& conv)
      : params_(params), caps_(caps), kind_(kind), conv_(conv), layout_(caps),
        steady_(steady_state(params, caps)) {}

  const VariableLayout& layout() const { return layout_; }

  PgdResult run(std::vector<double> x0, int budget) {
    PgdResult res;
    project_rows(layout_, x0);
    std::vector<double> x = std::move(x0);
    if (layout_.dimension == 0) budget = 0;

    const double scale = 1.0 / params_.passenger_rate;
    double beta = 10.0 / scale;
    const double beta_max = 2e5 / scale;
    double eta = 1e-3;

    double value = layout_.dimension > 0 ? smoothed(x, beta) : 0.0;
    std::vector<double> grad(layout_.dimension);
    for (int it = 0; it < budget; ++it) {
      ++res.iterations;
      gradient(x, beta, grad);
      bool moved = false;
      for (int ls = 0; ls < 24 && !moved; ++ls) {
        if (eta < 1e-16) break;
        std::vector<double> trial(x);
        for (int c = 0; c < layout_.dimension; ++c) trial[c] += eta * grad[c];
        project_rows(layout_, trial);
        const double v = smoothed(trial, beta);
        if (v > value + 1e-14 * std::abs(value)) {
          x = std::move(trial);
          value = v;
          eta *= 1.3;
          moved = true;
        } else {
          eta *= 0.4;
        }
      }
      if (!moved) {
        if (beta < beta_max) {
          beta *= 4.0;
          value = smoothed(x, beta);
          eta = std::max(eta, 1e-5);
        } else {
          // No ascent direction found at the probe scale: treat as a local
          // maximum of the sharpened objective.
          res.stationary = true;
          break;
        }
      }
    }
    Forward f(params_, caps_, unpack_lottery(layout_, caps_, x));
    res.waits = f.waits;
    res.objective = objective_of(params_, caps_, steady_, f.waits,
                                 implied_prices(params_, f.waits), kind_, conv_);
    if (layout_.dimension == 0) res.stationary = true;
    res.x = std::move(x);
    return res;
  }

 private:
  double weight(int n) const {
    return conv_.weighting == Weighting::steady_state ? steady_.probabilities[n] : 1.0;
  }

  static double lse(const std::vector<double>& v, double beta) {
    double mx = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double w : v) s += std::exp(beta * (w - mx));
    return mx + std::log(s) / beta;
  }

  double smoothed(const std::vector<double>& x, double beta) const {
    Forward f(params_, caps_, unpack_lottery(layout_, caps_, x));
    double total = 0.0;
    for (int m = 0; m < params_.group_count; ++m) {
      const double xi = lse(f.waits[m], beta);
      double p = price_from_wait(params_, m, std::max(xi, 0.0));
      if (params_.commission_cap) p = std::min(p, *params_.commission_cap);
      double acc = 0.0;
      for (int n = 0; n < caps_.capacities[m]; ++n)
        acc += weight(n) * joiner_value(params_, m, p, f.waits[m][n], kind_, conv_);
      total += params_.arrival_rates[m] * acc;
    }
    return total;
  }

  void gradient(const std::vector<double>& x, double beta, std::vector<double>& grad) {
    Forward f(params_, caps_, unpack_lottery(layout_, caps_, x));
    std::vector<std::vector<double>> dw(params_.group_count);
    for (int m = 0; m < params_.group_count; ++m) {
      const auto& wm = f.waits[m];
      dw[m].resize(wm.size());
      const double xi = lse(wm, beta);
      const double p = price_from_wait(params_, m, std::max(xi, 0.0));
      const bool capped = params_.commission_cap && p >= *params_.commission_cap;
      double wsum = 0.0;
      for (std::size_t n = 0; n < wm.size(); ++n) wsum += weight(static_cast<int>(n));
      const double mx = *std::max_element(wm.begin(), wm.end());
      double z = 0.0;
      for (double w : wm) z += std::exp(beta * (w - mx));
      const double lam = params_.arrival_rates[m];
      const double wait_cost =
          kind_ == ObjectiveKind::profit
              ? params_.platform_opportunity_rate
              : params_.driver_opportunity_rate + params_.platform_opportunity_rate;
      const double price_sens =
          (kind_ == ObjectiveKind::profit && !capped) ? -params_.driver_opportunity_rate : 0.0;
      for (std::size_t n = 0; n < wm.size(); ++n) {
        const double softmax = std::exp(beta * (wm[n] - mx)) / z;
        dw[m][n] = lam * (price_sens * wsum * softmax - wait_cost * weight(static_cast<int>(n)));
      }
    }
    Eigen::VectorXd g = Eigen::VectorXd::Zero(f.system->size());
    for (int m = 0; m < params_.group_count; ++m)
      for (int n = 0; n < caps_.capacities[m]; ++n)
        for (int l = 1; l <= n + 1; ++l)
          g(wait_index(n, l)) += dw[m][n] * f.lottery.entries[m][n][l - 1];
    Eigen::VectorXd y = f.system->solve_transpose(g);
    std::fill(grad.begin(), grad.end(), 0.0);
    accumulate_adjoint(params_, layout_, f.w, y, 1.0, grad);
    for (const auto& b : layout_.blocks)
      for (int i = 1; i <= b.length + 1; ++i)
        grad[b.offset + i - 1] += dw[b.group][b.length] * f.w(wait_index(b.length, i));
  }

  const MarketParams& params_;
  const CapacityVector& caps_;
  ObjectiveKind kind_;
  ObjectiveConvention conv_;
  VariableLayout layout_;
  SteadyState steady_;
};

inline std::vector<double> start_point(const VariableLayout& layout, const CapacityVector& caps,
                                       int index, Rng& rng) {
  switch (index) {
    case 0: return pack_lottery(layout, make_uniform_lottery(caps));
    case 1: return pack_lottery(layout, make_fifo_lottery(caps));
    case 2: return pack_lottery(layout, make_lifo_lottery(caps));
    default: return pack_lottery(layout, make_random_lottery(caps, rng));
  }
}

inline LowerLevelResult finalize(const MarketParams& params, const CapacityVector& caps,
                                 ObjectiveKind kind, const SolverOptions& opts,
                                 const LotteryPolicy& lottery, int iterations, bool converged,
                                 std::optional<double> certified) {
  LowerLevelResult res;
  res.iterations = iterations;
  res.converged = converged;
  res.certified_value = certified;

  if (opts.value_only) {
    Forward f(params, caps, lottery);
    res.lottery = lottery;
    res.prices = implied_prices(params, f.waits);
    res.xi.resize(params.group_count);
    for (int m = 0; m < params.group_count; ++m)
      res.xi[m] = *std::max_element(f.waits[m].begin(), f.waits[m].end());
    res.objective_value = objective_of(params, caps, steady_state(params, caps), f.waits,
                                       res.prices, kind, opts.convention);
    return res;
  }

  ExtendedPolicy ext = extend_policy(params, caps, lottery, opts.certificate_slack);
  res.lottery = ext.policy;
  res.certificate_ok = ext.certificate_ok;
  res.equilibrium.capacities = caps;
  res.equilibrium.lottery = res.lottery;
  res.equilibrium.waiting = solve_waiting_times(params, caps, lottery);
  res.equilibrium.steady = steady_state(params, caps);
  res.xi.resize(params.group_count);
  for (int m = 0; m < params.group_count; ++m) {
    double xi = 0.0;
    for (double w : res.equilibrium.waiting.expected[m]) xi = std::max(xi, w);
    res.xi[m] = xi;
  }
  res.prices = implied_prices(params, res.equilibrium.waiting.expected);
  res.equilibrium.prices = res.prices;
  res.objective_value =
      objective_of(params, caps, res.equilibrium.steady, res.equilibrium.waiting.expected,
                   res.prices, kind, opts.convention);
  return res;
}

// Profit under a binding commission cap: the wait split across groups
// matters (capped groups want short waits, uncapped groups absorb the
// slack), so search the split hyperplane sum_m lam_m a_m t_m = L with the
// equalizer inside.  Exact for M <= 2; larger M uses the same first-group
// parameterization with the remaining groups pooled.
inline LowerLevelResult solve_profit_capped(const MarketParams& params,
                                            const CapacityVector& caps,
                                            const SolverOptions& opts, Equalizer& eq,
                                            double mean_len,
                                            const std::vector<double>& joining_mass) {
  const int m_count = params.group_count;
  const double floor_wait = 1.0 / params.passenger_rate;
  const double tol_abs =
      std::max(opts.equalize_tol * std::max(mean_len, floor_wait), 5e-14);
  int iters = 0;

  auto split_value = [&](const std::vector<double>& t) {
    double total = 0.0;
    for (int m = 0; m < m_count; ++m) {
      double p = price_from_wait(params, m, t[m]);
      if (params.commission_cap) p = std::min(p, *params.commission_cap);
      const double trip = opts.convention.platform_trip_cost ? params.trip_duration : 0.0;
      total += joining_mass[m] * (p - params.platform_opportunity_rate * (trip + t[m]));
    }
    return total;
  };

  struct Candidate {
    EqualizeResult eq;
    double value = -std::numeric_limits<double>::infinity();
  };

  auto probe = [&](const std::vector<double>& targets,
                   const std::vector<double>* warm) {
    Candidate c;
    for (double t : targets)
      if (t < floor_wait * 0.999) return c;
    std::vector<double> x0 =
        warm ? *warm : pack_lottery(eq.layout(), make_uniform_lottery(caps));
    c.eq = eq.run(targets, std::move(x0), opts.max_newton_iterations, tol_abs);
    iters += c.eq.iterations;
    if (c.eq.ok) {
      std::vector<double> achieved(m_count);
      for (int m = 0; m < m_count; ++m)
        achieved[m] = *std::max_element(c.eq.waits[m].begin(), c.eq.waits[m].end());
      c.value = split_value(achieved);
    }
    return c;
  };

  if (m_count == 1) {
    std::vector<double> t{mean_len / joining_mass[0]};
    Candidate c = probe(t, nullptr);
    return finalize(params, caps, ObjectiveKind::profit, opts,
                    unpack_lottery(eq.layout(), caps, c.eq.x), iters, c.eq.ok, std::nullopt);
  }

  auto targets_for = [&](double t0) {
    std::vector<double> t(m_count, 0.0);
    t[0] = t0;
    double rest = mean_len - joining_mass[0] * t0;
    double mass = 0.0;
    for (int m = 1; m < m_count; ++m) mass += joining_mass[m];
    for (int m = 1; m < m_count; ++m) t[m] = rest / mass;
    return t;
  };

  double mass_rest = 0.0;
  for (int m = 1; m < m_count; ++m) mass_rest += joining_mass[m];
  const double lo = floor_wait;
  const double hi = std::max(lo, (mean_len - mass_rest * floor_wait) / joining_mass[0]);

  Candidate best;
  double best_t0 = lo;
  std::vector<double> warm_storage;
  const std::vector<double>* warm = nullptr;
  const int grid = std::max(3, opts.cap_grid_points);
  for (int i = 0; i < grid; ++i) {
    const double t0 = lo + (hi - lo) * i / (grid - 1);
    Candidate c = probe(targets_for(t0), warm);
    if (c.eq.ok) {
      warm_storage = c.eq.x;
      warm = &warm_storage;
    }
    if (c.value > best.value) {
      best = std::move(c);
      best_t0 = t0;
    }
  }
  if (best.value == -std::numeric_limits<double>::infinity()) {
    GradientSolver gs(params, caps, ObjectiveKind::profit, opts.convention);
    Rng rng(opts.seed);
    PgdResult pr = gs.run(start_point(gs.layout(), caps, 0, rng), opts.max_iterations);
    return finalize(params, caps, ObjectiveKind::profit, opts,
                    unpack_lottery(gs.layout(), caps, pr.x), iters + pr.iterations,
                    pr.stationary, std::nullopt);
  }

  const double gr = 0.6180339887498949;
  double a = std::max(lo, best_t0 - (hi - lo) / (grid - 1));
  double b = std::min(hi, best_t0 + (hi - lo) / (grid - 1));
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  Candidate c1 = probe(targets_for(x1), &best.eq.x);
  Candidate c2 = probe(targets_for(x2), &best.eq.x);
  for (int i = 0; i < opts.cap_golden_iterations; ++i) {
    if (c1.value >= c2.value) {
      b = x2;
      x2 = x1;
      c2 = std::move(c1);
      x1 = b - gr * (b - a);
      c1 = probe(targets_for(x1), &best.eq.x);
    } else {
      a = x1;
      x1 = x2;
      c1 = std::move(c2);
      x2 = a + gr * (b - a);
      c2 = probe(targets_for(x2), &best.eq.x);
    }
  }
  for (Candidate* c : {&c1, &c2})
    if (c->value > best.value) best = std::move(*c);

  return finalize(params, caps, ObjectiveKind::profit, opts,
                  unpack_lottery(eq.layout(), caps, best.eq.x), iters, best.eq.ok,
                  std::nullopt);
}

}  // namespace detail

// Single forward evaluation of a candidate lottery (deterministic; prices
// are the largest feasible given the candidate's waits).
inline double evaluate_candidate(const MarketParams& params, const CapacityVector& caps,
                                 const LotteryPolicy& lottery, ObjectiveKind kind,
                                 const ObjectiveConvention& conv = {}) {
  lottery.validate(caps);
  detail::Forward f(params, caps, lottery);
  return detail::objective_of(params, caps, steady_state(params, caps), f.waits,
                              detail::implied_prices(params, f.waits), kind, conv);
}

inline LowerLevelResult solve_lower(const MarketParams& params, const CapacityVector& caps,
                                    ObjectiveKind kind, const SolverOptions& opts = {}) {
  params.validate();
  caps.validate(params);
  const ObjectiveConvention& conv = opts.convention;

  if (conv.weighting == Weighting::unweighted) {
    detail::GradientSolver gs(params, caps, kind, conv);
    Rng rng(opts.seed);
    detail::PgdResult best;
    int iters = 0;
    for (int s = 0; s < std::max(1, opts.multistarts); ++s) {
      auto pr = gs.run(detail::start_point(gs.layout(), caps, s, rng),
                       opts.max_iterations / std::max(1, opts.multistarts));
      iters += pr.iterations;
      if (pr.objective > best.objective) best = std::move(pr);
    }
    return detail::finalize(params, caps, kind, opts,
                            detail::unpack_lottery(gs.layout(), caps, best.x), iters,
                            best.stationary, std::nullopt);
  }

  const SteadyState ss = steady_state(params, caps);
  const double mean_len = ss.mean_length();
  std::vector<double> joining_mass(params.group_count);
  for (int m = 0; m < params.group_count; ++m)
    joining_mass[m] = params.arrival_rates[m] * ss.mass_below(caps.capacities[m]);
  const double bound = capacity_value(params, caps, conv);

  if (kind == ObjectiveKind::welfare) {
    // Every feasible lottery attains the same weighted welfare (Little's
    // law); the uniform lottery is the canonical representative.
    return detail::finalize(params, caps, kind, opts, make_uniform_lottery(caps), 1, true,
                            bound);
  }

  // Profit: canonical solution has every group at the constant wait
  // t* = L / sum_m lam_m a_m, which attains the Little bound exactly.
  double mass = 0.0;
  for (double jm : joining_mass) mass += jm;
  const double t_star = mean_len / mass;

  detail::Equalizer eq(params, caps);

  const bool cap_binds = params.commission_cap && [&] {
    for (int m = 0; m < params.group_count; ++m)
      if (price_from_wait(params, m, t_star) > *params.commission_cap) return true;
    return false;
  }();
  if (cap_binds)
    return detail::solve_profit_capped(params, caps, opts, eq, mean_len, joining_mass);

  const double tol_abs =
      std::max(opts.equalize_tol * std::max(t_star, 1.0 / params.passenger_rate), 5e-14);
  std::vector<double> targets(params.group_count, t_star);
  Rng rng(opts.seed);
  int iters = 0;
  detail::EqualizeResult best_eq;
  for (int s = 0; s < std::max(1, opts.multistarts) && !best_eq.ok; ++s) {
    auto r = eq.run(targets, detail::start_point(eq.layout(), caps, s, rng),
                    opts.max_newton_iterations, tol_abs);
    iters += r.iterations;
    if (r.max_residual < best_eq.max_residual) best_eq = std::move(r);
  }
  if (!best_eq.ok) {
    // The cross-group-equal split may be unreachable; any per-group
    // constant split attains the same bound, so let the levels float.
    for (int s = 0; s < std::max(1, opts.multistarts) && !best_eq.ok; ++s) {
      auto r = eq.run(targets, detail::start_point(eq.layout(), caps, s, rng),
                      opts.max_newton_iterations, tol_abs, /*free_levels=*/true);
      iters += r.iterations;
      if (r.max_residual < best_eq.max_residual) best_eq = std::move(r);
    }
  }

  if (best_eq.ok) {
    LowerLevelResult res = detail::finalize(
        params, caps, ObjectiveKind::profit, opts,
        detail::unpack_lottery(eq.layout(), caps, best_eq.x), iters, true, std::nullopt);
    // Certify global optimality: the Little bound was attained.
    if (std::abs(res.objective_value - bound) <= std::max(1e-8 * std::abs(bound), 1e-8))
      res.certified_value = bound;
    return res;
  }

  detail::GradientSolver gs(params, caps, ObjectiveKind::profit, conv);
  detail::PgdResult best;
  for (int s = 0; s < std::max(1, opts.multistarts); ++s) {
    auto pr = gs.run(detail::start_point(gs.layout(), caps, s, rng),
                     opts.max_iterations / std::max(1, opts.multistarts));
    iters += pr.iterations;
    if (pr.objective > best.objective) best = std::move(pr);
  }
  return detail::finalize(params, caps, ObjectiveKind::profit, opts,
                          detail::unpack_lottery(gs.layout(), caps, best.x), iters,
                          best.stationary, std::nullopt);
}

}  // namespace vqlot
