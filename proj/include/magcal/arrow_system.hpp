/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "magcal/error.hpp"
#include "magcal/residuals.hpp"

namespace magcal
{

/// Normal equations H dx = b with "arrow" sparsity: a block-tridiagonal
/// state part (StateDim x StateDim blocks, coupling only neighbouring states)
/// bordered by a dense ParamDim-wide parameter part.
///
/// Solving eliminates the states first with a block-Thomas sweep and then the
/// small parameter Schur complement, so a solve costs O(M) in the number of
/// states.
template <int StateDim, int ParamDim>
class ArrowSystem
{
public:
  using StateBlock = Eigen::Matrix<double, StateDim, StateDim>;
  using BorderBlock = Eigen::Matrix<double, StateDim, ParamDim>;
  using ParamBlockMat = Eigen::Matrix<double, ParamDim, ParamDim>;
  using StateVec = Eigen::Matrix<double, StateDim, 1>;
  using ParamVec = Eigen::Matrix<double, ParamDim, 1>;

  static constexpr int kStateDim = StateDim;
  static constexpr int kParamDim = ParamDim;

  explicit ArrowSystem(std::size_t num_states = 0) { reset(num_states); }

  void reset(std::size_t num_states)
  {
    m_diag.assign(num_states, StateBlock::Zero());
    m_upper.assign(num_states > 0 ? num_states - 1 : 0, StateBlock::Zero());
    m_border.assign(num_states, BorderBlock::Zero());
    m_grad_states.assign(num_states, StateVec::Zero());
    m_params.setZero();
    m_grad_params.setZero();
    m_cost = 0.0;
    m_frozen.fill(false);
  }

  std::size_t num_states() const { return m_diag.size(); }
  Eigen::Index dimension() const
  {
    return ParamDim + static_cast<Eigen::Index>(num_states()) * StateDim;
  }
  double cost() const { return m_cost; }

  /// Accumulates J^T J, -J^T r and ||r||^2 of one residual block.
  void add(const ResidualBlock& block)
  {
    if (!block.value.allFinite())
      throw Error(ErrorCode::kNonFinite, "non-finite residual value");
    m_cost += block.value.squaredNorm();
    for (int a = 0; a < block.term_count; ++a)
    {
      const auto& ta = block.terms[static_cast<std::size_t>(a)];
      if (!ta.jacobian.allFinite())
        throw Error(ErrorCode::kNonFinite, "non-finite Jacobian entry");
      const auto ja = ta.jacobian.leftCols(ta.var.dim);
      const SmallVec g = -(ja.transpose() * block.value);
      if (ta.var.is_state())
        m_grad_states[state_index(ta.var)] += g;
      else
      {
        check_param(ta.var);
        m_grad_params.segment(ta.var.index, ta.var.dim) += g;
      }

      for (int c = a; c < block.term_count; ++c)
      {
        const auto& tb = block.terms[static_cast<std::size_t>(c)];
        const auto jb = tb.jacobian.leftCols(tb.var.dim);
        const SmallMat hab = ja.transpose() * jb;
        accumulate(ta.var, tb.var, hab, a == c);
      }
    }
  }

  /// Removes the parameter slice from the problem: its step is forced to 0.
  void freeze(int offset, int dim)
  {
    for (int i = offset; i < offset + dim; ++i)
      m_frozen[static_cast<std::size_t>(i)] = true;
  }

  const std::vector<StateBlock>& diagonal_blocks() const { return m_diag; }
  const std::vector<StateBlock>& upper_blocks() const { return m_upper; }
  const std::vector<BorderBlock>& border_blocks() const { return m_border; }
  const ParamBlockMat& param_block() const { return m_params; }

  /// Effective (mask-applied) gradient b = -J^T r in [params, states] order.
  Eigen::VectorXd gradient() const
  {
    Eigen::VectorXd b(dimension());
    b.head<ParamDim>() = masked_param_gradient();
    for (std::size_t i = 0; i < num_states(); ++i)
      b.segment<StateDim>(ParamDim + static_cast<Eigen::Index>(i) * StateDim) = m_grad_states[i];
    return b;
  }

  /// Dense H in [params, states] order, with frozen parameters masked.
  Eigen::MatrixXd dense_hessian() const
  {
    const Eigen::Index n = dimension();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    h.topLeftCorner<ParamDim, ParamDim>() = masked_param_block();
    for (std::size_t i = 0; i < num_states(); ++i)
    {
      const Eigen::Index o = ParamDim + static_cast<Eigen::Index>(i) * StateDim;
      const BorderBlock border = masked_border(i);
      h.block<StateDim, StateDim>(o, o) = m_diag[i];
      h.block<StateDim, ParamDim>(o, 0) = border;
      h.block<ParamDim, StateDim>(0, o) = border.transpose();
      if (i + 1 < num_states())
      {
        h.block<StateDim, StateDim>(o, o + StateDim) = m_upper[i];
        h.block<StateDim, StateDim>(o + StateDim, o) = m_upper[i].transpose();
      }
    }
    return h;
  }

  /// Solves (H + lambda * diag(H)) dx = b. Returns nullopt when the damped
  /// system is not positive definite.
  std::optional<Eigen::VectorXd> solve(double lambda) const
  {
    const std::size_t m = num_states();
    constexpr int kRhs = ParamDim + 1;
    using Rhs = Eigen::Matrix<double, StateDim, kRhs>;

    std::vector<Eigen::LLT<StateBlock>> factors(m);
    std::vector<Rhs> y(m);

    // Forward sweep of the block LDL^T factorization of the state part,
    // carrying [border | gradient] as right-hand sides.
    for (std::size_t i = 0; i < m; ++i)
    {
      StateBlock d = damped(m_diag[i], lambda);
      Rhs rhs;
      rhs.template leftCols<ParamDim>() = masked_border(i);
      rhs.col(ParamDim) = m_grad_states[i];
      if (i > 0)
      {
        const StateBlock& u = m_upper[i - 1];
        d -= u.transpose() * factors[i - 1].solve(u);
        rhs -= u.transpose() * factors[i - 1].solve(y[i - 1]);
      }
      factors[i].compute(0.5 * (d + d.transpose()));
      if (factors[i].info() != Eigen::Success)
        return std::nullopt;
      y[i] = rhs;
    }

    // Back substitution gives X = H_ss^-1 [border | gradient].
    std::vector<Rhs>& x = y;
    for (std::size_t r = m; r-- > 0;)
    {
      if (r + 1 < m)
        x[r] -= m_upper[r] * x[r + 1];
      x[r] = factors[r].solve(x[r]);
    }

    ParamBlockMat schur = masked_param_block();
    for (int j = 0; j < ParamDim; ++j)
      schur(j, j) += lambda * damping_weight(schur(j, j));
    ParamVec g = masked_param_gradient();
    for (std::size_t i = 0; i < m; ++i)
    {
      const BorderBlock border = masked_border(i);
      schur -= border.transpose() * x[i].template leftCols<ParamDim>();
      g -= border.transpose() * x[i].col(ParamDim);
    }
    Eigen::LLT<ParamBlockMat> schur_llt(0.5 * (schur + schur.transpose()));
    if (schur_llt.info() != Eigen::Success)
      return std::nullopt;
    const ParamVec dp = schur_llt.solve(g);
    if (!dp.allFinite())
      return std::nullopt;

    Eigen::VectorXd step(dimension());
    step.head<ParamDim>() = dp;
    for (std::size_t i = 0; i < m; ++i)
    {
      step.segment<StateDim>(ParamDim + static_cast<Eigen::Index>(i) * StateDim) =
          x[i].col(ParamDim) - x[i].template leftCols<ParamDim>() * dp;
    }
    if (!step.allFinite())
      return std::nullopt;
    return step;
  }

  /// Eigenvalues of the undamped parameter Schur complement H_pp - H_ps H_ss^-1 H_sp.
  std::optional<ParamVec> schur_eigenvalues() const
  {
    const std::size_t m = num_states();
    std::vector<Eigen::LLT<StateBlock>> factors(m);
    std::vector<BorderBlock> y(m);
    for (std::size_t i = 0; i < m; ++i)
    {
      StateBlock d = m_diag[i];
      BorderBlock rhs = masked_border(i);
      if (i > 0)
      {
        d -= m_upper[i - 1].transpose() * factors[i - 1].solve(m_upper[i - 1]);
        rhs -= m_upper[i - 1].transpose() * factors[i - 1].solve(y[i - 1]);
      }
      factors[i].compute(d);
      if (factors[i].info() != Eigen::Success)
        return std::nullopt;
      y[i] = rhs;
    }
    for (std::size_t r = m; r-- > 0;)
    {
      if (r + 1 < m)
        y[r] -= m_upper[r] * y[r + 1];
      y[r] = factors[r].solve(y[r]);
    }
    ParamBlockMat schur = masked_param_block();
    for (std::size_t i = 0; i < m; ++i)
      schur -= masked_border(i).transpose() * y[i];
    Eigen::SelfAdjointEigenSolver<ParamBlockMat> eig(0.5 * (schur + schur.transpose()));
    return eig.eigenvalues();
  }

private:
  static double damping_weight(double diag_entry) { return std::clamp(diag_entry, 1e-9, 1e32); }

  static StateBlock damped(const StateBlock& block, double lambda)
  {
    StateBlock out = block;
    for (int j = 0; j < StateDim; ++j)
      out(j, j) += lambda * damping_weight(block(j, j));
    return out;
  }

  std::size_t state_index(const Variable& var) const
  {
    if (var.index < 0 || static_cast<std::size_t>(var.index) >= num_states() || var.dim != StateDim)
      throw Error(ErrorCode::kInvalidArgument, "residual references an unknown state");
    return static_cast<std::size_t>(var.index);
  }

  using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 9, 9>;
  using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 9, 1>;

  void accumulate(const Variable& a, const Variable& b, const SmallMat& hab, bool same_term)
  {
    if (a.is_state() && b.is_state())
    {
      const std::size_t i = state_index(a);
      const std::size_t j = state_index(b);
      if (i == j)
      {
        m_diag[i] += hab;
        if (!same_term)
          m_diag[i] += hab.transpose();
      }
      else if (j == i + 1)
        m_upper[i] += hab;
      else if (i == j + 1)
        m_upper[j] += hab.transpose();
      else
        throw Error(ErrorCode::kInvalidArgument, "residual couples non-adjacent states");
    }
    else if (a.is_state())
    {
      m_border[state_index(a)].block(0, b.index, StateDim, b.dim) += hab;
    }
    else if (b.is_state())
    {
      m_border[state_index(b)].block(0, a.index, StateDim, a.dim) += hab.transpose();
    }
    else
    {
      check_param(a);
      check_param(b);
      m_params.block(a.index, b.index, a.dim, b.dim) += hab;
      if (!same_term)
        m_params.block(b.index, a.index, b.dim, a.dim) += hab.transpose();
    }
  }

  static void check_param(const Variable& var)
  {
    if (var.index < 0 || var.index + var.dim > ParamDim)
      throw Error(ErrorCode::kInvalidArgument, "residual references an unknown parameter range");
  }

  ParamBlockMat masked_param_block() const
  {
    ParamBlockMat p = m_params;
    for (int j = 0; j < ParamDim; ++j)
    {
      if (m_frozen[static_cast<std::size_t>(j)])
      {
        p.row(j).setZero();
        p.col(j).setZero();
        p(j, j) = 1.0;
      }
    }
    return p;
  }

  ParamVec masked_param_gradient() const
  {
    ParamVec g = m_grad_params;
    for (int j = 0; j < ParamDim; ++j)
    {
      if (m_frozen[static_cast<std::size_t>(j)])
        g(j) = 0.0;
    }
    return g;
  }

  BorderBlock masked_border(std::size_t i) const
  {
    BorderBlock b = m_border[i];
    for (int j = 0; j < ParamDim; ++j)
    {
      if (m_frozen[static_cast<std::size_t>(j)])
        b.col(j).setZero();
    }
    return b;
  }

  std::vector<StateBlock> m_diag;
  std::vector<StateBlock> m_upper; // block (i, i + 1)
  std::vector<BorderBlock> m_border;
  std::vector<StateVec> m_grad_states;
  ParamBlockMat m_params = ParamBlockMat::Zero();
  ParamVec m_grad_params = ParamVec::Zero();
  std::array<bool, ParamDim> m_frozen{};
  double m_cost = 0.0;
};

} // namespace magcal
