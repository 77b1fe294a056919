"""Numeric thresholds and tolerances, kept in one record.

Every module and every test reads these values from here so that a
tolerance is never duplicated (and silently diverged) across the codebase.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class NumericConfig:
    # below this norm a vector counts as degenerate and cannot be normalized
    eps_norm: float = 1e-12
    # a normalized vector must have norm 1 within this
    unit_norm_tol: float = 1e-6
    # softmax outputs must sum to 1 within this
    prob_sum_tol: float = 1e-9
    # similarity symmetry s_ij == s_ji
    symmetry_tol: float = 1e-12
    # factored bilinear form vs. explicitly materialized d x d matrix
    factored_sim_tol: float = 1e-10
    # factored ||A - I||_F^2 vs. explicit computation
    factored_reg_tol: float = 1e-8
    # finite-difference gradient checking
    fd_step: float = 1e-5
    fd_rel_tol: float = 1e-4
    # guards the relative-error denominator for near-zero gradient entries
    fd_floor: float = 1e-6
    # split ratios must sum to 1 within this
    ratio_sum_tol: float = 1e-9
    # PCA: total variance below this counts as degenerate input
    eps_variance: float = 1e-12


DEFAULTS = NumericConfig()
