#pragma once

// Conditional waiting times of the virtual queue under a lottery policy.
//
// w[n][l] is the expected wait of a driver who joined a length-n queue at
// position l (1-based), for n = 0..Nhat-1, l = 1..n+1.  First-step analysis
// on the post-join state gives one balance equation per unknown.  With
// Lam = total joining rate at length n+1 (the length AFTER our driver
// joined; this post-join indexing is pinned by the hand-solved LIFO case
// lambda=mu=1, N=2 -> w = (2, 1, 3)):
//
//   (Lam + mu) w[n][l] = 1 + sum_m lam_m^{n+1} [ S_m(l) w[n+1][l+1]
//                                              + (1 - S_m(l)) w[n+1][l] ]
//                          + mu w[n-1][l-1] * [l >= 2]
//
// where S_m(l) is the probability that a group-m joiner at length n+1 is
// inserted at or ahead of position l.  Rows with n = Nhat-1 have Lam = 0
// and reduce to the at-capacity boundary recursions automatically.
// Unknowns are ordered lexicographically by (n, l); the matrix has at most
// 4 off-diagonal entries per row and is solved by a direct sparse LU.

#include <memory>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "vqlot/steady_state.hpp"
#include "vqlot/types.hpp"

namespace vqlot {

struct WaitingTimes {
  // conditional[n][l-1] = w[n][l], triangular, n = 0..Nhat-1.
  std::vector<std::vector<double>> conditional;
  // expected[m][n] = W_m^n for n = 0..N_m-1.
  std::vector<std::vector<double>> expected;

  int levels() const { return static_cast<int>(conditional.size()); }
};

namespace detail {

inline int wait_index(int n, int l) { return n * (n + 1) / 2 + (l - 1); }

// Assembled and factorized balance system for fixed rates and lottery.
// Kept around by the lower-level solver, which needs transpose solves for
// its adjoint Jacobian.
class WaitSystem {
 public:
  // `levels` defaults to max capacity; a larger value appends over-capacity
  // rows (no arrivals there), used by the balk-deterrence certificate.
  WaitSystem(const MarketParams& params, const CapacityVector& caps,
             const LotteryPolicy& lottery, int levels = -1)
      : params_(params), caps_(caps) {
    levels_ = levels < 0 ? caps.max_capacity() : levels;
    size_ = levels_ * (levels_ + 1) / 2;
    assemble(lottery);
  }

  int levels() const { return levels_; }
  int size() const { return size_; }

  const Eigen::VectorXd& solution() {
    if (!solved_) {
      factorize();
      w_ = lu_->solve(rhs_);
      if (lu_->info() != Eigen::Success)
        throw SolveError("waiting-time system: solve failed");
      solved_ = true;
    }
    return w_;
  }

  double at(int n, int l) { return solution()(wait_index(n, l)); }

  // Solve A^T y = g (adjoint direction for sensitivity analysis).
  Eigen::VectorXd solve_transpose(const Eigen::VectorXd& g) {
    if (!transpose_lu_) {
      Eigen::SparseMatrix<double> at = matrix_.transpose();
      transpose_lu_ = std::make_unique<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
      transpose_lu_->compute(at);
      if (transpose_lu_->info() != Eigen::Success)
        throw SolveError("waiting-time system: transpose factorization failed");
    }
    return transpose_lu_->solve(g);
  }

  // Largest relative balance-equation residual of a candidate solution.
  double relative_residual(const Eigen::VectorXd& w) const {
    Eigen::VectorXd r = matrix_ * w - rhs_;
    return r.cwiseAbs().maxCoeff() / rhs_.cwiseAbs().maxCoeff();
  }

 private:
  void assemble(const LotteryPolicy& lottery) {
    if (lottery.group_count() != params_.group_count)
      throw std::invalid_argument("waiting-time system: lottery group count mismatch");
    for (int m = 0; m < params_.group_count; ++m)
      if (static_cast<int>(lottery.entries[m].size()) < caps_.capacities[m])
        throw std::invalid_argument("waiting-time system: lottery rows missing for capacity");

    const double mu = params_.passenger_rate;
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(size_) * (params_.group_count + 3));
    rhs_ = Eigen::VectorXd::Ones(size_);

    for (int n = 0; n < levels_; ++n) {
      // Groups still joining once the queue holds n+1 drivers.
      std::vector<int> active;
      for (int m = 0; m < params_.group_count; ++m)
        if (n + 1 < caps_.capacities[m]) active.push_back(m);
      double lam_total = 0.0;
      for (int m : active) lam_total += params_.arrival_rates[m];

      for (int l = 1; l <= n + 1; ++l) {
        const int row = wait_index(n, l);
        trip.emplace_back(row, row, lam_total + mu);
        for (int m : active) {
          const auto& delta = lottery.entries[m][n + 1];
          double ahead = 0.0;  // P(new group-m joiner lands at position <= l)
          for (int i = 0; i < l; ++i) ahead += delta[i];
          const double lam = params_.arrival_rates[m];
          trip.emplace_back(row, wait_index(n + 1, l + 1), -lam * ahead);
          trip.emplace_back(row, wait_index(n + 1, l), -lam * (1.0 - ahead));
        }
        if (l >= 2) trip.emplace_back(row, wait_index(n - 1, l - 1), -mu);
      }
    }

    matrix_.resize(size_, size_);
    matrix_.setFromTriplets(trip.begin(), trip.end());
    matrix_.makeCompressed();
  }

  void factorize() {
    lu_ = std::make_unique<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
    lu_->compute(matrix_);
    if (lu_->info() != Eigen::Success)
      throw SolveError("waiting-time system: singular factorization");
  }

  const MarketParams& params_;
  const CapacityVector& caps_;
  int levels_ = 0;
  int size_ = 0;
  Eigen::SparseMatrix<double> matrix_;
  Eigen::VectorXd rhs_;
  Eigen::VectorXd w_;
  bool solved_ = false;
  std::unique_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> lu_;
  std::unique_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> transpose_lu_;
};

}  // namespace detail

// Lottery-averaged expected waits W_m^n = sum_l delta_m^{l,n} w[n][l].
inline std::vector<std::vector<double>> expected_waits(const WaitingTimes& waiting,
                                                       const LotteryPolicy& lottery,
                                                       const CapacityVector& caps) {
  std::vector<std::vector<double>> result(caps.group_count());
  for (int m = 0; m < caps.group_count(); ++m) {
    result[m].resize(caps.capacities[m]);
    for (int n = 0; n < caps.capacities[m]; ++n) {
      if (n >= waiting.levels())
        throw std::invalid_argument("expected_waits: waiting times not solved for capacity");
      const auto& row = lottery.entries[m][n];
      double acc = 0.0;
      for (int l = 1; l <= n + 1; ++l) acc += row[l - 1] * waiting.conditional[n][l - 1];
      result[m][n] = acc;
    }
  }
  return result;
}

inline WaitingTimes solve_waiting_times(const MarketParams& params, const CapacityVector& caps,
                                        const LotteryPolicy& lottery) {
  params.validate();
  caps.validate(params);
  detail::WaitSystem system(params, caps, lottery);
  const Eigen::VectorXd& w = system.solution();
  if (system.relative_residual(w) > 1e-10)
    throw SolveError("waiting-time system: residual above tolerance");

  WaitingTimes waiting;
  waiting.conditional.resize(system.levels());
  for (int n = 0; n < system.levels(); ++n) {
    waiting.conditional[n].resize(n + 1);
    for (int l = 1; l <= n + 1; ++l)
      waiting.conditional[n][l - 1] = w(detail::wait_index(n, l));
  }
  waiting.expected = expected_waits(waiting, lottery, caps);
  return waiting;
}

// Everything the objective evaluation needs, bundled.
struct EquilibriumSolution {
  CapacityVector capacities;
  LotteryPolicy lottery;
  PricePolicy prices;
  WaitingTimes waiting;
  SteadyState steady;
};

inline EquilibriumSolution make_equilibrium(const MarketParams& params, const CapacityVector& caps,
                                            const LotteryPolicy& lottery, PricePolicy prices) {
  EquilibriumSolution eq;
  eq.capacities = caps;
  eq.lottery = lottery;
  eq.prices = std::move(prices);
  eq.waiting = solve_waiting_times(params, caps, lottery);
  eq.steady = steady_state(params, caps);
  return eq;
}

}  // namespace vqlot
