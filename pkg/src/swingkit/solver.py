"""Backward-induction solver for the volume-constrained exercise problem.

State is (time index, lattice node, volume level). The volume grid pitch
equals L*dt, so a full-rate step moves exactly one level and restricting the
rate to {0, L} loses nothing: the one-step objective is linear in the rate and
successor values are evaluated on aligned levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ScenarioLattice, TimeGrid, backward_extremum

EXACT_TOL = 1e-10


class InvariantError(Exception):
    """A structural property of a solved field failed to hold."""


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Volume levels y_j = j * step for j = j_min..j_cap, with y_{j_cap} = 1.

    step is the canonical pitch 1/j_cap, validated to match L*dt. When
    L*T > 1 the grid extends below zero (j_min = j_cap - K) so the full-rate
    region 1 - L*(T - t) <= y is covered at every time index. Array positions
    are level indices shifted by -j_min.
    """

    L: float
    step: float
    j_cap: int
    j_min: int
    n_steps: int

    @classmethod
    def aligned(cls, L: float, time_grid: TimeGrid) -> "VolumeGrid":
        if not L > 0:
            raise ValueError("rate cap L must be positive")
        raw = 1.0 / (L * time_grid.dt)
        j_cap = int(round(raw))
        if j_cap < 1 or abs(raw - j_cap) > 1e-9:
            raise ValueError(
                "misaligned grids: 1/(L*dt) = %.17g must be a positive integer" % raw
            )
        j_min = min(0, j_cap - time_grid.K)
        return cls(L=L, step=1.0 / j_cap, j_cap=j_cap, j_min=j_min, n_steps=time_grid.K)

    @property
    def n_levels(self) -> int:
        return self.j_cap - self.j_min + 1

    @property
    def cap_pos(self) -> int:
        return self.j_cap - self.j_min

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.j_min, self.j_cap + 1) / self.j_cap

    def boundary_pos(self, k: int) -> int:
        """Array position of the level 1 - L*(T - t_k); may be negative when
        that level sits below the grid (only possible when L*T <= 1)."""
        return self.cap_pos - (self.n_steps - k)

    def index_of(self, y: float) -> int:
        pos = int(round((y * self.j_cap))) - self.j_min
        if not 0 <= pos < self.n_levels or abs(y * self.j_cap - round(y * self.j_cap)) > 1e-9:
            raise ValueError("start volume %.17g is off the grid" % y)
        return pos


@dataclass(eq=False)
class ValueField:
    """Solved value surface J[k][node][position] plus its grids."""

    time_grid: TimeGrid
    volume_grid: VolumeGrid
    values: list

    def region_masks(self, k: int) -> dict:
        """Boolean masks over positions: deep (strictly below the full-rate
        boundary), boundary, interior, cap."""
        vg = self.volume_grid
        pos = np.arange(vg.n_levels)
        b = vg.boundary_pos(k)
        return {
            "deep": pos < b,
            "boundary": pos == b,
            "interior": (pos > b) & (pos < vg.cap_pos),
            "cap": pos == vg.cap_pos,
        }

    def at(self, k: int, node: int, y: float) -> float:
        return float(self.values[k][node, self.volume_grid.index_of(y)])


@dataclass(eq=False)
class DerivativeField:
    """One-sided volume difference quotients of a solved value field.

    dminus[k][n][p] = (J[p] - J[p-1]) / step. The lowest column is 0 when the
    grid extends through the full-rate region (J is constant in y there) and
    NaN otherwise. dplus[k][n][p] = dminus[k][n][p+1], padded at the top.
    """

    time_grid: TimeGrid
    volume_grid: VolumeGrid
    dminus: list
    dplus: list

    def gap(self, k: int) -> np.ndarray:
        return self.dminus[k] - self.dplus[k]


@dataclass(eq=False)
class LipschitzDiagnostic:
    """Dominating field z[k][node] = max(X, E[z_next | node]) and its maximum.

    z dominates the magnitude of every volume derivative of J, giving the
    Lipschitz bound |J(y1) - J(y2)| <= z * |y1 - y2|.
    """

    z: list
    c_max: float


def lipschitz_diagnostic(lattice: ScenarioLattice) -> LipschitzDiagnostic:
    z = backward_extremum(lattice, "max")
    return LipschitzDiagnostic(z=z, c_max=max(float(v.max()) for v in z))


def solve(lattice: ScenarioLattice, time_grid: TimeGrid, volume_grid: VolumeGrid) -> ValueField:
    """Backward induction over (node, volume level) slices.

    At each state the stay candidate is E[J_{k+1}(same level)] and the
    exercise candidate is step*X + E[J_{k+1}(level+1)], excluded at the cap.
    """
    K = time_grid.K
    if lattice.n_steps != K:
        raise ValueError("lattice has %d steps, time grid has %d" % (lattice.n_steps, K))
    if volume_grid.n_steps != K:
        raise ValueError("volume grid was aligned to a different time grid")
    if any(lattice.n_nodes(k) == 0 for k in range(K + 1)):
        raise ValueError("empty lattice slice")
    step = volume_grid.step
    values = [None] * (K + 1)
    values[K] = np.zeros((lattice.n_nodes(K), volume_grid.n_levels))
    for k in range(K - 1, -1, -1):
        ej = lattice.expect_next(k, values[k + 1])
        ex = np.empty_like(ej)
        ex[:, :-1] = step * lattice.x(k)[:, None] + ej[:, 1:]
        ex[:, -1] = -np.inf
        values[k] = np.maximum(ej, ex)
    return ValueField(time_grid, volume_grid, values)


def derivatives(field: ValueField) -> DerivativeField:
    vg = field.volume_grid
    step = vg.step
    dminus = []
    dplus = []
    low = 0.0 if vg.j_min < 0 else np.nan
    for vals in field.values:
        dm = np.empty_like(vals)
        dm[:, 1:] = np.diff(vals, axis=1) / step
        dm[:, 0] = low
        dp = np.empty_like(vals)
        dp[:, :-1] = dm[:, 1:]
        dp[:, -1] = dm[:, -1]
        dminus.append(dm)
        dplus.append(dp)
    return DerivativeField(field.time_grid, vg, dminus, dplus)


def check_value_invariants(field: ValueField, lattice: ScenarioLattice,
                           diag: LipschitzDiagnostic = None) -> dict:
    """Assert the structural properties of a solved field.

    Terminal and cap columns vanish, J is nonincreasing and concave in the
    volume level, and adjacent differences obey the Lipschitz bound through
    the dominating field z. Raises InvariantError on the first violation and
    returns the observed extremes otherwise.
    """
    vg = field.volume_grid
    step = vg.step
    K = field.time_grid.K
    if diag is None:
        diag = lipschitz_diagnostic(lattice)
    report = {"monotone": 0.0, "concavity": 0.0, "lipschitz": 0.0,
              "terminal": 0.0, "cap": 0.0}
    term = float(np.abs(field.values[K]).max())
    report["terminal"] = term
    if term != 0.0:
        raise InvariantError("terminal values are not identically zero")
    for k in range(K + 1):
        vals = field.values[k]
        cap = float(np.abs(vals[:, -1]).max())
        report["cap"] = max(report["cap"], cap)
        if cap != 0.0:
            raise InvariantError("value at y=1 is %.3g at slice %d" % (cap, k))
        d1 = np.diff(vals, axis=1)
        worst = float(d1.max())
        report["monotone"] = max(report["monotone"], worst)
        if worst > EXACT_TOL:
            raise InvariantError("J increases in y by %.3g at slice %d" % (worst, k))
        if vals.shape[1] >= 3:
            d2 = np.diff(vals, n=2, axis=1)
            worst2 = float(d2.max())
            report["concavity"] = max(report["concavity"], worst2)
            if worst2 > EXACT_TOL:
                raise InvariantError("J is non-concave in y by %.3g at slice %d" % (worst2, k))
        bound = diag.z[k][:, None] * step + EXACT_TOL
        excess = float((np.abs(d1) - bound).max())
        report["lipschitz"] = max(report["lipschitz"], excess)
        if excess > 0:
            raise InvariantError("Lipschitz bound violated by %.3g at slice %d" % (excess, k))
    return report


@dataclass(eq=False)
class ResidualReport:
    """One-step consistency residuals of a solved field.

    residuals[k][n][p] is NaN at masked positions: the moving-boundary level
    (where the left and right volume derivatives legitimately differ) and
    levels where the left derivative itself is undefined.
    """

    form: str
    residuals: list
    max_abs: float


def bellman_residual(field: ValueField, deriv: DerivativeField,
                     lattice: ScenarioLattice, form: str = "implicit") -> ResidualReport:
    """Residual of J against its one-step optimality identity.

    implicit: r = J_k - (step*(X + dminus_k)_+ + E[J_{k+1}]), with the
    derivative taken from the solved field at the same time index.
    explicit: the derivative and positive part are taken at k+1 inside the
    conditional expectation instead.
    """
    if form not in ("implicit", "explicit"):
        raise ValueError("form must be 'implicit' or 'explicit'")
    vg = field.volume_grid
    step = vg.step
    K = field.time_grid.K
    residuals = []
    max_abs = 0.0
    for k in range(K):
        vals = field.values[k]
        x = lattice.x(k)
        if form == "implicit":
            ej = lattice.expect_next(k, field.values[k + 1])
            r = vals - (step * np.maximum(x[:, None] + deriv.dminus[k], 0.0) + ej)
        else:
            P = lattice.transition_matrix(k)
            r = np.empty_like(vals)
            for n in range(vals.shape[0]):
                inner = step * np.maximum(x[n] + deriv.dminus[k + 1], 0.0) + field.values[k + 1]
                r[n] = P[n] @ inner
            r = vals - r
        b = vg.boundary_pos(k)
        if 0 <= b < vg.n_levels:
            r[:, b] = np.nan
        r[np.isnan(deriv.dminus[k])] = np.nan
        residuals.append(r)
        finite = r[np.isfinite(r)]
        if finite.size:
            max_abs = max(max_abs, float(np.abs(finite).max()))
    return ResidualReport(form, residuals, max_abs)


@dataclass(eq=False)
class BoundaryReport:
    """Violations of the terminal/upper boundary and the full-rate identity."""

    max_deep: float
    max_cap: float
    violations: list


def boundary_check(field: ValueField, lattice: ScenarioLattice,
                   tol: float = EXACT_TOL) -> BoundaryReport:
    """Check J = 0 at y = 1 and the full-rate identity below the boundary.

    For every level with y <= 1 - L*(T - t_k) the value must equal the
    expected remaining reward of exercising at the full rate throughout,
    E[sum step*X | node].
    """
    vg = field.volume_grid
    step = vg.step
    K = field.time_grid.K
    tail = [None] * (K + 1)
    tail[K] = np.zeros(lattice.n_nodes(K))
    for k in range(K - 1, -1, -1):
        tail[k] = step * lattice.x(k) + lattice.expect_next(k, tail[k + 1])
    max_deep = 0.0
    max_cap = 0.0
    violations = []
    for k in range(K + 1):
        vals = field.values[k]
        cap_err = float(np.abs(vals[:, -1]).max())
        max_cap = max(max_cap, cap_err)
        if cap_err > tol:
            violations.append(("cap", k, cap_err))
        b = vg.boundary_pos(k)
        hi = min(b, vg.n_levels - 1)
        if hi >= 0:
            err = float(np.abs(vals[:, :hi + 1] - tail[k][:, None]).max())
            max_deep = max(max_deep, err)
            if err > tol:
                violations.append(("deep", k, err))
    return BoundaryReport(max_deep, max_cap, violations)
