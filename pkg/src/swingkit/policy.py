"""Bang-bang policy extraction, trajectory rollout, exit times, and the
window-averaged control approximation.

The optimal rate at (k, node, level) follows the sign of X + D, where D is
the volume derivative of the value across the level increment the exercise
would consume: exercising moves level p to p+1, so the relevant difference
quotient is dminus at p+1. Ties resolve to the full rate, which matches the
saturating optimal control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import PathEnsemble, ScenarioLattice, TimeGrid
from .solver import DerivativeField, InvariantError, ValueField, VolumeGrid

TIE_TOL = 1e-9


@dataclass(eq=False)
class PolicyField:
    """decisions[k][node][position] is True where the optimal rate is L."""

    time_grid: TimeGrid
    volume_grid: VolumeGrid
    decisions: list
    tie_tol: float = TIE_TOL

    @property
    def L(self) -> float:
        return self.volume_grid.L

    def rate(self, k: int, node: int, pos: int) -> float:
        return self.L if self.decisions[k][node, pos] else 0.0


def extract_policy(field: ValueField, deriv: DerivativeField,
                   lattice: ScenarioLattice, tie_tol: float = TIE_TOL) -> PolicyField:
    """Read the bang-bang policy off the solved derivative field.

    decision = L iff X + dminus(level+1) >= -tie_tol and the cap leaves room.
    Feasibility at the cap and the forced full rate on and below the moving
    boundary are verified before returning.
    """
    vg = field.volume_grid
    K = field.time_grid.K
    decisions = []
    for k in range(K):
        x = lattice.x(k)
        dec = np.zeros((lattice.n_nodes(k), vg.n_levels), dtype=bool)
        dec[:, :-1] = x[:, None] + deriv.dminus[k][:, 1:] >= -tie_tol
        b = vg.boundary_pos(k)
        if b >= 0:
            forced = dec[:, :min(b, vg.cap_pos - 1) + 1]
            if not forced.all():
                raise InvariantError("full rate not selected below the boundary at slice %d" % k)
        decisions.append(dec)
    decisions.append(np.zeros((lattice.n_nodes(K), vg.n_levels), dtype=bool))
    return PolicyField(field.time_grid, vg, decisions, tie_tol)


@dataclass(eq=False)
class ControlPath:
    """One rolled-out trajectory: rates, volume levels, and realized reward."""

    path_id: int
    nodes: np.ndarray
    rates: np.ndarray
    positions: np.ndarray
    volumes: np.ndarray
    reward_increments: np.ndarray
    reward: float
    weight: float


@dataclass(eq=False)
class RolloutBundle:
    """Policy rollout over an ensemble from a common start (t_{k0}, y_0)."""

    time_grid: TimeGrid
    volume_grid: VolumeGrid
    k0: int
    pos0: int
    node0: int
    paths: list
    mean: float
    exhaustive: bool = False

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def realized_positions(self) -> list:
        """Per (k, node) realized volume position, or raise if two paths visit
        the same node at different levels."""
        K = self.time_grid.K
        table = [dict() for _ in range(K + 1)]
        for cp in self.paths:
            for i, pos in enumerate(cp.positions):
                k = self.k0 + i
                n = int(cp.nodes[k])
                if table[k].setdefault(n, int(pos)) != int(pos):
                    raise ValueError("node %d at slice %d is visited at two volume levels" % (n, k))
        return table


def rollout(policy: PolicyField, lattice: ScenarioLattice, ensemble: PathEnsemble,
            start, node0: int = None) -> RolloutBundle:
    """Apply the policy along each ensemble path from (t_{k0}, y0).

    start is (k0, y0) with y0 on the volume grid. When node0 is given, only
    paths passing through that node at k0 enter, with weights renormalized.
    """
    k0, y0 = start
    vg = policy.volume_grid
    tg = policy.time_grid
    K = tg.K
    if not 0 <= k0 < K:
        raise ValueError("start index %d outside the grid" % k0)
    pos0 = vg.index_of(y0)
    rows = range(ensemble.n_paths)
    if node0 is not None:
        rows = [r for r in rows if ensemble.nodes[r, k0] == node0]
        if not rows:
            raise ValueError("no ensemble path passes node %d at slice %d" % (node0, k0))
    total_w = sum(float(ensemble.weights[r]) for r in rows)
    paths = []
    mean = 0.0
    for r in rows:
        nodes = ensemble.nodes[r]
        pos = pos0
        positions = np.empty(K - k0 + 1, dtype=np.int64)
        rates = np.zeros(K - k0)
        incs = np.zeros(K - k0)
        positions[0] = pos
        for m in range(k0, K):
            n = int(nodes[m])
            if policy.decisions[m][n, pos]:
                rates[m - k0] = vg.L
                incs[m - k0] = vg.step * lattice.x(m)[n]
                pos += 1
            positions[m - k0 + 1] = pos
        reward = float(incs.sum())
        w = float(ensemble.weights[r]) / total_w
        paths.append(ControlPath(r, nodes, rates, positions, vg.levels[positions],
                                 incs, reward, w))
        mean += w * reward
    return RolloutBundle(tg, vg, k0, pos0, node0, paths, mean,
                         ensemble.exhaustive and node0 is None)


def check_inclusion(bundle: RolloutBundle, deriv: DerivativeField,
                    lattice: ScenarioLattice, tie_tol: float = TIE_TOL) -> dict:
    """Differential-inclusion consistency along rolled-out paths.

    At every realized (k, node, level): a zero rate requires X + dminus <=
    tie_tol and a full rate requires X + dminus >= -tie_tol. Positions whose
    left derivative is undefined (the lowest level of a grid that does not
    extend below zero) are skipped.
    """
    worst_zero = -np.inf
    worst_full = np.inf
    K = bundle.time_grid.K
    for cp in bundle.paths:
        for m in range(bundle.k0, K):
            n = int(cp.nodes[m])
            pos = int(cp.positions[m - bundle.k0])
            s = lattice.x(m)[n] + deriv.dminus[m][n, pos]
            if np.isnan(s):
                continue
            if cp.rates[m - bundle.k0] > 0:
                worst_full = min(worst_full, s)
            else:
                worst_zero = max(worst_zero, s)
    if worst_zero > tie_tol:
        raise InvariantError("zero rate taken where X + D = %.3g > 0" % worst_zero)
    if worst_full < -tie_tol:
        raise InvariantError("full rate taken where X + D = %.3g < 0" % worst_full)
    return {"max_zero_side": worst_zero, "min_full_side": worst_full}


def check_saturation(bundle: RolloutBundle) -> bool:
    """When the full-rate budget covers the remaining horizon, every path must
    finish with the volume exactly exhausted. Returns False when the start is
    not in that region (nothing to check)."""
    vg = bundle.volume_grid
    K = bundle.time_grid.K
    if K - bundle.k0 < vg.cap_pos - bundle.pos0:
        return False
    for cp in bundle.paths:
        if cp.positions[-1] != vg.cap_pos:
            raise InvariantError(
                "path %d ends at volume %.17g, not 1" % (cp.path_id, cp.volumes[-1])
            )
    return True


@dataclass(eq=False)
class ExerciseBoundary:
    """Per-path exit data for the volume band (1 - Y0 - L*(T-t), 1 - Y0).

    sigma_u is the first grid time the cumulative volume reaches the global
    cap, sigma_l the first time the remaining capacity is at least the
    remaining full-rate volume, sigma their minimum. Off the event
    {L*(T - t0) > 1 - y0 > 0} the convention sigma = T applies.
    """

    k0: int
    m_event: bool
    sigma_u: np.ndarray
    sigma_l: np.ndarray
    sigma: np.ndarray
    k_u: np.ndarray
    k_l: np.ndarray
    k_sigma: np.ndarray
    case_u: np.ndarray


def exit_times(bundle: RolloutBundle) -> ExerciseBoundary:
    vg = bundle.volume_grid
    tg = bundle.time_grid
    K = tg.K
    times = tg.times
    n = bundle.n_paths
    m_event = (K - bundle.k0) > (vg.cap_pos - bundle.pos0) > 0
    k_u = np.full(n, -1, dtype=np.int64)
    k_l = np.full(n, K, dtype=np.int64)
    k_sig = np.full(n, K, dtype=np.int64)
    case_u = np.zeros(n, dtype=bool)
    for r, cp in enumerate(bundle.paths):
        pos = cp.positions
        ms = np.arange(bundle.k0, K + 1)
        hit_u = np.nonzero(pos >= vg.cap_pos)[0]
        hit_l = np.nonzero(vg.cap_pos - pos >= K - ms)[0]
        if hit_u.size:
            k_u[r] = bundle.k0 + hit_u[0]
        k_l[r] = bundle.k0 + hit_l[0]
        ku = k_u[r] if k_u[r] >= 0 else K + 1
        case_u[r] = ku <= k_l[r]
        k_sig[r] = min(ku, k_l[r]) if m_event else K
    sigma_u = times[np.where(k_u >= 0, k_u, K)]
    sigma_l = times[k_l]
    sigma = times[k_sig]
    if m_event and np.any(k_sig <= bundle.k0):
        raise InvariantError("exit at or before the start time on the interior event")
    return ExerciseBoundary(bundle.k0, m_event, sigma_u, sigma_l, sigma,
                            k_u, k_l, k_sig, case_u)


@dataclass(eq=False)
class ExerciseRegions:
    """Sign of X + dminus per (k, node, level): +1, -1, or 0 within tie_tol."""

    volume_grid: VolumeGrid
    sign: list
    tie_tol: float

    def positive(self, k: int) -> np.ndarray:
        return self.sign[k] == 1

    def negative(self, k: int) -> np.ndarray:
        return self.sign[k] == -1

    def zero(self, k: int) -> np.ndarray:
        return self.sign[k] == 0


def exercise_regions(deriv: DerivativeField, lattice: ScenarioLattice,
                     tie_tol: float = TIE_TOL) -> ExerciseRegions:
    """Classify every (k, node, level) by the sign of X + dminus.

    Where the left derivative is undefined (lowest level of a grid with no
    extension below zero) the right derivative stands in.
    """
    K = deriv.time_grid.K
    sign = []
    for k in range(K + 1):
        if k < K:
            s = lattice.x(k)[:, None] + deriv.dminus[k]
            fallback = lattice.x(k)[:, None] + deriv.dplus[k]
        else:
            s = deriv.dminus[k] * 0.0
            fallback = s
        s = np.where(np.isnan(s), fallback, s)
        out = np.zeros(s.shape, dtype=np.int8)
        out[s > tie_tol] = 1
        out[s < -tie_tol] = -1
        sign.append(out)
    return ExerciseRegions(deriv.volume_grid, sign, tie_tol)


@dataclass(eq=False)
class MollifiedControl:
    """One window-averaged control iterate.

    f[k] holds the rate field over (node, level); trajectories has one volume
    path per ensemble path, produced by the explicit Euler update
    y <- y + dt * f evaluated at the floor-snapped level.
    """

    n: int
    window: float
    pitches: int
    clamped: bool
    f: list
    trajectories: np.ndarray


def _window_field(mask: np.ndarray, m: int, L: float) -> np.ndarray:
    """Rate = L * (fraction of the m window starts below p whose closed
    forward window of m pitches stays inside the positive region)."""
    n_nodes, n_levels = mask.shape
    zero = np.zeros((n_nodes, 1), dtype=np.int64)
    ok = np.zeros((n_nodes, n_levels), dtype=np.int64)
    span = n_levels - m
    if span > 0:
        cpad = np.concatenate([zero, np.cumsum(mask.astype(np.int64), axis=1)], axis=1)
        ok[:, :span] = (cpad[:, m + 1:] - cpad[:, :span]) == m + 1
    spad = np.concatenate([zero, np.cumsum(ok, axis=1)], axis=1)
    p_idx = np.arange(n_levels)
    a_idx = np.maximum(p_idx - m, 0)
    return (spad[:, p_idx] - spad[:, a_idx]) * (L / m)


def mollified_iterate(regions: ExerciseRegions, lattice: ScenarioLattice,
                      ensemble: PathEnsemble, start, n_max: int,
                      time_grid: TimeGrid) -> list:
    """Window-averaged control iterates n = 1..n_max from a common start.

    The window width 2^-n is snapped to whole grid pitches; a width below one
    pitch clamps to a single pitch and sets the clamped flag. Widths that
    halve exactly on the grid give rate fields that increase pointwise with n,
    so the Euler volume paths rise monotonically toward the rollout path.
    """
    k0, y0 = start
    vg = regions.volume_grid
    dt = time_grid.dt
    K = time_grid.K
    pos0 = vg.index_of(y0)
    out = []
    for n in range(1, n_max + 1):
        width = 2.0 ** (-n)
        raw = width / vg.step
        m = max(1, int(round(raw)))
        clamped = raw < 1.0 - 1e-12
        f = [_window_field(regions.positive(k), m, vg.L) for k in range(K + 1)]
        traj = np.empty((ensemble.n_paths, K - k0 + 1))
        for r in range(ensemble.n_paths):
            y = vg.levels[pos0]
            traj[r, 0] = y
            for mm in range(k0, K):
                node = int(ensemble.nodes[r, mm])
                p = int(np.floor(y * vg.j_cap + 1e-9)) - vg.j_min
                p = min(max(p, 0), vg.n_levels - 1)
                y = y + dt * f[mm][node, p]
                traj[r, mm - k0 + 1] = y
        out.append(MollifiedControl(n, width, m, clamped, f, traj))
    return out
