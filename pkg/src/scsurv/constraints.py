"""Linear inequality systems encoding single-crossing constraints.

For fixed crossing parameters (theta, gamma) the constraint on the stacked
log-jump vector u = (u_0, u_1) is A u >= 0 with 3m rows: m coupling rows that
order the two curves (cumulatively for survival-curve crossings, pointwise
for hazard crossings) and 2m rows enforcing u <= 0 componentwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EventGrid, StepSurvival, require_same_grid
from .errors import GridMismatchError


@dataclass(frozen=True)
class CrossingParams:
    """Crossing time theta (0 = no crossing) and initial dominance gamma
    (+1 = control curve on top before the crossing, -1 = treatment)."""

    theta: float
    gamma: int

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError(f"theta must be >= 0, got {self.theta}")
        if self.gamma not in (-1, 1):
            raise ValueError(f"gamma must be -1 or +1, got {self.gamma}")


def v_index(theta: float, grid: EventGrid) -> int:
    """Largest j with t_j <= theta (1-based), or 0 when theta < t_1."""
    return int(np.searchsorted(grid.times, theta, side="right"))


@dataclass(frozen=True)
class ConstraintSystem:
    """Sparse description of the 3m x 2m system A u >= 0.

    Coupling row k (1-based) has sign s_k = gamma for k <= v and -gamma for
    k > v.  For ``kind="survival"`` the row value is s_k * sum_{j<=k}
    (u_j0 - u_j1); for ``kind="hazard"`` it is s_k * (u_k0 - u_k1).  Rows
    m+1..3m are the unit-negative rows for u <= 0.
    """

    kind: str
    m: int
    v: int
    gamma: int

    def __post_init__(self):
        if self.kind not in ("survival", "hazard"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if not 0 <= self.v <= self.m:
            raise ValueError("v must lie in {0..m}")

    @property
    def signs(self) -> np.ndarray:
        """Row signs s_k, k = 1..m."""
        s = np.full(self.m, -self.gamma, dtype=float)
        s[: self.v] = self.gamma
        return s

    def coupling_matrix(self) -> np.ndarray:
        """Dense m x 2m matrix of the coupling rows."""
        m = self.m
        rows = np.zeros((m, 2 * m))
        s = self.signs
        for k in range(m):
            if self.kind == "survival":
                rows[k, : k + 1] = s[k]
                rows[k, m : m + k + 1] = -s[k]
            else:
                rows[k, k] = s[k]
                rows[k, m + k] = -s[k]
        return rows

    def full_matrix(self) -> np.ndarray:
        """Dense 3m x 2m matrix A (coupling rows then -I for u <= 0)."""
        return np.vstack([self.coupling_matrix(), -np.eye(2 * self.m)])

    def coupling_values(self, u0: np.ndarray, u1: np.ndarray) -> np.ndarray:
        """Values a_k^T u of the m coupling rows."""
        diff = np.asarray(u0, dtype=float) - np.asarray(u1, dtype=float)
        if self.kind == "survival":
            diff = np.cumsum(diff)
        return self.signs * diff

    def is_feasible(self, u0: np.ndarray, u1: np.ndarray, tol: float = 1e-9) -> bool:
        return self.max_violation(u0, u1) <= tol

    def max_violation(self, u0: np.ndarray, u1: np.ndarray) -> float:
        """Largest constraint violation (0 when feasible)."""
        coupling = -self.coupling_values(u0, u1)
        upper = np.concatenate([u0, u1])
        worst = max(coupling.max(initial=0.0), upper.max(initial=0.0))
        return float(max(worst, 0.0))


def build_constraints(grid: EventGrid, params: CrossingParams) -> ConstraintSystem:
    """Survival-curve crossing system for fixed (theta, gamma)."""
    return ConstraintSystem(
        kind="survival", m=grid.m, v=v_index(params.theta, grid), gamma=params.gamma
    )


def check_single_crossing(
    s0: StepSurvival, s1: StepSurvival, params: CrossingParams, tol: float = 0.0
) -> bool:
    """Whether two step curves obey the (theta, gamma) crossing pattern at
    every grid time, within ``tol``."""
    require_same_grid(s0, s1)
    S0, S1 = s0.grid_survival, s1.grid_survival
    pre = s0.times <= params.theta
    if params.gamma == 1:
        ok_pre = np.all(S0[pre] >= S1[pre] - tol)
        ok_post = np.all(S0[~pre] <= S1[~pre] + tol)
    else:
        ok_pre = np.all(S0[pre] <= S1[pre] + tol)
        ok_post = np.all(S0[~pre] >= S1[~pre] - tol)
    return bool(ok_pre and ok_post)
