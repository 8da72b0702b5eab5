"""Optimal stopping machinery: envelope recursions, per-path stop windows,
constrained predictable stopping searches, Doob decompositions, and the
stopping representations of the marginal value of volume.

Discrete predictability convention: the event {sigma = t_k} must be decided
one grid step ahead, i.e. it is constant across all time-k children of each
time-(k-1) node. Stopping values sample the cashflow at grid times, so a jump
placed at a grid time is seen by a rule that stops exactly there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import PathEnsemble, ScenarioLattice, backward_extremum
from .policy import RolloutBundle, exit_times, extract_policy, rollout, TIE_TOL
from .solver import InvariantError, ValueField, derivatives


@dataclass(eq=False)
class SnellField:
    """Envelope values per (k, node) for one direction.

    direction "sup": smallest supermartingale dominating X, the value of
    sup E[X(sigma)]. direction "inf": largest submartingale below X.
    """

    direction: str
    values: list


def snell(lattice: ScenarioLattice, direction: str) -> SnellField:
    if direction not in ("sup", "inf"):
        raise ValueError("direction must be 'sup' or 'inf'")
    w = backward_extremum(lattice, "max" if direction == "sup" else "min")
    return SnellField(direction, w)


def check_snell(field: SnellField, lattice: ScenarioLattice, tol: float = 1e-12) -> dict:
    """Dominance, one-step super/sub-martingale property, terminal match."""
    K = lattice.n_steps
    vals = field.values
    sup = field.direction == "sup"
    worst_dom = 0.0
    worst_mart = 0.0
    if np.any(vals[K] != lattice.x(K)):
        raise InvariantError("terminal envelope does not equal the terminal cashflow")
    for k in range(K + 1):
        gap = lattice.x(k) - vals[k] if sup else vals[k] - lattice.x(k)
        worst_dom = max(worst_dom, float(gap.max()))
        if k < K:
            drift = lattice.expect_next(k, vals[k + 1]) - vals[k]
            drift = drift if sup else -drift
            worst_mart = max(worst_mart, float(drift.max()))
    if worst_dom > tol:
        raise InvariantError("envelope fails to dominate the cashflow by %.3g" % worst_dom)
    if worst_mart > tol:
        raise InvariantError("envelope drifts the wrong way by %.3g" % worst_mart)
    return {"dominance": worst_dom, "drift": worst_mart}


@dataclass(eq=False)
class StopWindows:
    """Per-path admissible stop flags derived from a policy rollout.

    can_raise[r, m] marks grid times t_m in (t_{k0}, T] at which the rate was
    below L in the adjacent step on path r (the holder could still exercise
    more there); can_lower marks times with rate above 0 (could exercise
    less). m_event is the flag {L*(T - t0) > 1 - y0 > 0}.
    """

    k0: int
    m_event: bool
    can_raise: np.ndarray
    can_lower: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    exhaustive: bool

    def flags(self, constraint) -> np.ndarray:
        if constraint is None:
            return np.ones_like(self.can_raise)
        if constraint == "can_raise":
            return self.can_raise
        if constraint == "can_lower":
            return self.can_lower
        raise ValueError("constraint must be 'can_raise', 'can_lower', or None")


def stop_windows(bundle: RolloutBundle) -> StopWindows:
    K = bundle.time_grid.K
    k0 = bundle.k0
    vg = bundle.volume_grid
    n = bundle.n_paths
    can_raise = np.zeros((n, K + 1), dtype=bool)
    can_lower = np.zeros((n, K + 1), dtype=bool)
    nodes = np.zeros((n, K + 1), dtype=np.int64)
    weights = np.zeros(n)
    for r, cp in enumerate(bundle.paths):
        nodes[r] = cp.nodes
        weights[r] = cp.weight
        u = cp.rates
        for m in range(k0 + 1, K + 1):
            prev_low = u[m - 1 - k0] < vg.L
            prev_pos = u[m - 1 - k0] > 0.0
            next_low = m <= K - 1 and u[m - k0] < vg.L
            next_pos = m <= K - 1 and u[m - k0] > 0.0
            can_raise[r, m] = prev_low or next_low
            can_lower[r, m] = prev_pos or next_pos
    m_event = (K - k0) > (vg.cap_pos - bundle.pos0) > 0
    return StopWindows(k0, m_event, can_raise, can_lower, nodes, weights,
                       bundle.exhaustive)


@dataclass(eq=False)
class StoppingRule:
    """Stop decisions per (k, node), applied with first-hit semantics.

    A predictable rule keeps the stop flag constant across all children of
    each parent node, so {sigma = t_k} is decided at t_{k-1}.
    """

    stop: list
    predictable: bool
    k0: int
    include_start: bool = False

    def check_predictable(self, lattice: ScenarioLattice):
        if not self.predictable:
            return
        for k in range(self.k0 + 1, lattice.n_steps + 1):
            for node in lattice.slices[k - 1]:
                vals = {bool(self.stop[k][c]) for c in node.children}
                if len(vals) > 1:
                    raise InvariantError(
                        "stop decision at slice %d varies across one parent's children" % k
                    )


def evaluate_stop_rule(lattice: ScenarioLattice, rule: StoppingRule,
                       ensemble: PathEnsemble, node0: int = None) -> float:
    """Expected stopped cashflow of a rule over an ensemble; every path must
    stop by the terminal time."""
    k0 = rule.k0
    rows = range(ensemble.n_paths)
    if node0 is not None:
        rows = [r for r in rows if ensemble.nodes[r, k0] == node0]
    total_w = sum(float(ensemble.weights[r]) for r in rows)
    first = k0 if rule.include_start else k0 + 1
    value = 0.0
    for r in rows:
        hit = None
        for m in range(first, lattice.n_steps + 1):
            if rule.stop[m][int(ensemble.nodes[r, m])]:
                hit = m
                break
        if hit is None:
            raise ValueError("path %d never stops" % r)
        value += float(ensemble.weights[r]) / total_w * lattice.x(hit)[int(ensemble.nodes[r, hit])]
    return value


def _node_flags(windows: StopWindows, lattice: ScenarioLattice, constraint) -> list:
    """Map per-path window flags onto tree nodes; inconsistent mappings are a
    structural error (would mean the flags are not adapted)."""
    K = lattice.n_steps
    path_flags = windows.flags(constraint)
    flags = [np.zeros(lattice.n_nodes(k), dtype=bool) for k in range(K + 1)]
    seen = [np.zeros(lattice.n_nodes(k), dtype=bool) for k in range(K + 1)]
    for r in range(windows.nodes.shape[0]):
        for m in range(windows.k0 + 1, K + 1):
            n = int(windows.nodes[r, m])
            if seen[m][n] and flags[m][n] != path_flags[r, m]:
                raise ValueError("window flag is not a node function at slice %d" % m)
            seen[m][n] = True
            flags[m][n] = path_flags[r, m]
    return flags, seen


def optimal_predictable_stop(lattice: ScenarioLattice, windows: StopWindows,
                             constraint, direction: str, predictable: bool = True,
                             include_start: bool = None):
    """Best stopping rule with stop times confined to a window set.

    Searches over discrete-predictable rules (stop decisions made one step
    ahead, at the parent node) or plain adapted rules when predictable is
    False. Needs a tree lattice and exhaustive windows so the flags are exact
    node functions. Returns (rule, value). Raises when no admissible rule
    exists.
    """
    if direction not in ("sup", "inf"):
        raise ValueError("direction must be 'sup' or 'inf'")
    if not lattice.is_tree():
        raise ValueError("the stopping search needs a tree lattice")
    if not windows.exhaustive:
        raise ValueError("the stopping search needs exhaustive window flags")
    if include_start is None:
        include_start = constraint is None and not predictable
    if include_start and (constraint is not None or predictable):
        raise ValueError("stopping at the start is only allowed unconstrained and non-predictable")
    K = lattice.n_steps
    k0 = windows.k0
    flags, seen = _node_flags(windows, lattice, constraint)
    sense = 1.0 if direction == "sup" else -1.0
    bad = -np.inf
    value = [np.full(lattice.n_nodes(k), bad) for k in range(K + 1)]
    choice = [np.zeros(lattice.n_nodes(k), dtype=np.int8) for k in range(K + 1)]
    # choice codes: 1 = stop next step (predictable) / stop here (plain), 0 = continue

    if predictable:
        for k in range(K - 1, k0 - 1, -1):
            for n in range(lattice.n_nodes(k)):
                if k > k0 and not seen[k][n]:
                    continue
                node = lattice.slices[k][n]
                probs = np.array(node.probs)
                kids = np.array(node.children)
                stop_ok = all(flags[k + 1][c] for c in kids)
                stop_val = float(probs @ (sense * lattice.x(k + 1)[kids])) if stop_ok else bad
                if k + 1 <= K - 1:
                    kid_vals = value[k + 1][kids]
                    cont_val = float(probs @ kid_vals) if np.all(np.isfinite(kid_vals)) else bad
                else:
                    cont_val = bad
                value[k][n] = max(stop_val, cont_val)
                choice[k][n] = 1 if stop_val >= cont_val else 0
    else:
        first = k0 if include_start else k0 + 1
        for k in range(K, first - 1, -1):
            for n in range(lattice.n_nodes(k)):
                if k > k0 and not seen[k][n]:
                    continue
                here_ok = flags[k][n] if k > k0 else True
                here = sense * lattice.x(k)[n] if here_ok else bad
                if k < K:
                    node = lattice.slices[k][n]
                    kid_vals = value[k + 1][np.array(node.children)]
                    cont = (float(np.array(node.probs) @ kid_vals)
                            if np.all(np.isfinite(kid_vals)) else bad)
                else:
                    cont = bad
                value[k][n] = max(here, cont)
                choice[k][n] = 1 if here >= cont else 0
        if not include_start:
            for n in range(lattice.n_nodes(k0)):
                node = lattice.slices[k0][n]
                kid_vals = value[k0 + 1][np.array(node.children)]
                value[k0][n] = (float(np.array(node.probs) @ kid_vals)
                                if np.all(np.isfinite(kid_vals)) else bad)
                choice[k0][n] = 0

    start_nodes = np.unique(windows.nodes[:, k0])
    start_w = np.array([windows.weights[windows.nodes[:, k0] == n].sum() for n in start_nodes])
    start_vals = np.array([value[k0][n] for n in start_nodes])
    if np.any(~np.isfinite(start_vals[start_w > 0])):
        raise ValueError("no admissible stopping rule for constraint %r" % (constraint,))
    best = float(start_w @ start_vals) * sense

    stop = [np.zeros(lattice.n_nodes(k), dtype=bool) for k in range(K + 1)]
    alive = {int(n) for n in start_nodes}
    if not predictable and include_start:
        stopped = {n for n in alive if choice[k0][n] == 1}
        for n in stopped:
            stop[k0][n] = True
        alive -= stopped
    for k in range(k0, K):
        nxt = set()
        for n in alive:
            node = lattice.slices[k][n]
            if predictable and choice[k][n] == 1:
                for c in node.children:
                    stop[k + 1][c] = True
                continue
            for c in node.children:
                nxt.add(int(c))
        if not predictable:
            stopped = {n for n in nxt if choice[k + 1][n] == 1}
            for n in stopped:
                stop[k + 1][n] = True
            nxt -= stopped
        alive = nxt
    rule = StoppingRule(stop, predictable, k0, include_start)
    rule.check_predictable(lattice)
    return rule, best


@dataclass(eq=False)
class DoobDecomposition:
    """Martingale/compensator split of an envelope field.

    increments[k][n][ci] = Y[k+1][child_ci] - E[Y[k+1] | node n]. The
    node-valued martingale part exists only on tree lattices; pathwise
    accumulation works on any lattice.
    """

    direction: str
    increments: list
    martingale: list
    compensator: list

    def accumulate(self, lattice: ScenarioLattice, ensemble: PathEnsemble) -> np.ndarray:
        """Martingale part along each ensemble path, started at Y[0]."""
        K = lattice.n_steps
        out = np.zeros((ensemble.n_paths, K + 1))
        for r in range(ensemble.n_paths):
            n = int(ensemble.nodes[r, 0])
            out[r, 0] = self._y0[n]
            for k in range(K):
                node = lattice.slices[k][n]
                c = int(ensemble.nodes[r, k + 1])
                ci = node.children.index(c)
                out[r, k + 1] = out[r, k] + self.increments[k][n][ci]
                n = c
        return out


def doob_decomposition(snell_field: SnellField, lattice: ScenarioLattice) -> DoobDecomposition:
    K = lattice.n_steps
    vals = snell_field.values
    increments = []
    scale = max(1.0, max(float(np.abs(v).max()) for v in vals))
    for k in range(K):
        per_node = []
        for n, node in enumerate(lattice.slices[k]):
            kids = np.array(node.children)
            probs = np.array(node.probs)
            ey = float(probs @ vals[k + 1][kids])
            inc = vals[k + 1][kids] - ey
            if abs(float(probs @ inc)) > 1e-12 * scale:
                raise InvariantError("increment mean %.3g at slice %d node %d"
                                     % (float(probs @ inc), k, n))
            per_node.append(inc)
        increments.append(per_node)
    martingale = None
    compensator = None
    if lattice.is_tree():
        martingale = [vals[0].copy()]
        for k in range(K):
            nxt = np.zeros(lattice.n_nodes(k + 1))
            for n, node in enumerate(lattice.slices[k]):
                for ci, c in enumerate(node.children):
                    nxt[c] = martingale[k][n] + increments[k][n][ci]
            martingale.append(nxt)
        compensator = [vals[k] - martingale[k] for k in range(K + 1)]
    dec = DoobDecomposition(snell_field.direction, increments, martingale, compensator)
    dec._y0 = vals[0]
    return dec


@dataclass(eq=False)
class MarginalRow:
    """One start of the marginal-value table."""

    t0: float
    y0: float
    region: str
    dminus_neg: float
    dplus_neg: float
    ex_sigma: float
    sup_raise: float
    inf_lower: float
    snell_sup: float
    snell_inf: float
    note: str = ""


@dataclass(eq=False)
class MarginalReport:
    rows: list
    tol: float

    def format_table(self) -> str:
        header = ("t0 y0 region neg_dminus neg_dplus ex_sigma sup_can_raise "
                  "inf_can_lower snell_sup snell_inf note")
        lines = [header]
        for r in self.rows:
            lines.append("%.17g %.17g %s %.17g %.17g %.17g %.17g %.17g %.17g %.17g %s"
                         % (r.t0, r.y0, r.region, r.dminus_neg, r.dplus_neg, r.ex_sigma,
                            r.sup_raise, r.inf_lower, r.snell_sup, r.snell_inf,
                            r.note or "-"))
        return "\n".join(lines) + "\n"


def marginal_value_report(field: ValueField, lattice: ScenarioLattice,
                          ensemble: PathEnsemble, starts,
                          tie_tol: float = TIE_TOL) -> MarginalReport:
    """Stopping representations of -D-J and -D+J at each start.

    Per start (t0, y0) the row carries both one-sided derivatives, the value
    E[X(sigma)] of the canonical exit time, the constrained predictable
    search values, and the plain envelope values where the region calls for
    them. On models declaring a left-continuous-in-expectation limit the
    regional identities are asserted within 3*dt*max(X):

      deep (y below the full-rate boundary): both derivatives vanish;
      boundary (y exactly on it): -D- = 0 and -D+ matches the inf envelope;
      interior: -D- >= sup_can_raise >= E[X(sigma)] >= inf_can_lower >= -D+,
        all five within tolerance of each other;
      cap (y = 1): -D- matches the sup envelope.

    Starts whose region membership cannot be resolved on the grid (the
    boundary level falls below the grid) are tagged and skipped.
    """
    tg = field.time_grid
    vg = field.volume_grid
    K = tg.K
    deriv = derivatives(field)
    policy = extract_policy(field, deriv, lattice, tie_tol)
    occ = lattice.occupancy()
    sup_env = snell(lattice, "sup")
    inf_env = snell(lattice, "inf")
    tol = 3.0 * tg.dt * lattice.max_x()
    searchable = lattice.is_tree() and ensemble.exhaustive
    rows = []
    for (t0, y0) in starts:
        k0f = t0 / tg.dt
        k0 = int(round(k0f))
        if abs(k0f - k0) > 1e-9 or not 0 <= k0 < K:
            raise ValueError("start time %.17g is off the grid" % t0)
        boundary_y = 1.0 - vg.L * (tg.T - tg.times[k0])
        try:
            pos0 = vg.index_of(y0)
        except ValueError:
            if abs(y0 - boundary_y) <= 1e-9:
                rows.append(MarginalRow(t0, y0, "boundary", np.nan, np.nan, np.nan,
                                        np.nan, np.nan, np.nan, np.nan,
                                        "boundary-unaligned"))
                continue
            raise
        b = vg.boundary_pos(k0)
        if pos0 == vg.cap_pos:
            region = "cap"
        elif pos0 == b:
            region = "boundary"
        elif pos0 < b:
            region = "deep"
        else:
            region = "interior"
        w = occ[k0]
        ndm = -float(w @ deriv.dminus[k0][:, pos0]) + 0.0
        ndp = -float(w @ deriv.dplus[k0][:, pos0]) + 0.0
        ssup = float(w @ sup_env.values[k0])
        sinf = float(w @ inf_env.values[k0])
        ex_sig = np.nan
        sup_a = np.nan
        inf_b = np.nan
        note = ""
        if region != "cap":
            bundle = rollout(policy, lattice, ensemble, (k0, y0))
            exits = exit_times(bundle)
            ex_sig = sum(cp.weight * lattice.x(int(exits.k_sigma[r]))[int(cp.nodes[exits.k_sigma[r]])]
                         for r, cp in enumerate(bundle.paths))
            if searchable and region == "interior":
                windows = stop_windows(bundle)
                _, sup_a = optimal_predictable_stop(lattice, windows, "can_raise", "sup")
                _, inf_b = optimal_predictable_stop(lattice, windows, "can_lower", "inf")
        row = MarginalRow(t0, y0, region, ndm, ndp, ex_sig, sup_a, inf_b,
                          ssup if region == "cap" else np.nan,
                          sinf if region == "boundary" else np.nan, note)
        rows.append(row)
        if not lattice.lce_declared:
            continue
        if region == "deep":
            if abs(ndm) > 1e-12 or abs(ndp) > 1e-12:
                raise InvariantError("derivatives fail to vanish below the boundary")
        elif region == "boundary":
            if abs(ndm) > 1e-12:
                raise InvariantError("left derivative fails to vanish on the boundary")
            if abs(ndp - sinf) > tol:
                raise InvariantError("-D+ differs from the inf envelope by %.3g"
                                     % abs(ndp - sinf))
        elif region == "cap":
            if abs(ndm - ssup) > tol:
                raise InvariantError("-D- differs from the sup envelope by %.3g"
                                     % abs(ndm - ssup))
        else:
            if abs(ndm - ex_sig) > tol:
                raise InvariantError("-D- differs from E[X(sigma)] by %.3g" % abs(ndm - ex_sig))
            if searchable:
                chain = [ndm, sup_a, ex_sig, inf_b, ndp]
                for hi, lo in zip(chain, chain[1:]):
                    if hi < lo - tol:
                        raise InvariantError("marginal-value chain broken: %.17g < %.17g"
                                             % (hi, lo))
    return MarginalReport(rows, tol)
