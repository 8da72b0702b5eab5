"""Scenario lattices for the cashflow process, path ensembles, and lattice I/O.

A lattice is a finite sequence of time slices; each slice holds nodes carrying
a nonnegative cashflow value and one-step transition probabilities into the
next slice. The cashflow is treated as constant on [t_k, t_{k+1}), so integrals
of piecewise-constant exercise rates against it are exact sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_K = T."""

    T: float
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.K + 1) * (self.T / self.K)
        t[-1] = self.T
        return t


@dataclass(frozen=True)
class LatticeNode:
    """One lattice node: cashflow value plus transitions into the next slice.

    Terminal nodes carry empty children/probs tuples.
    """

    x: float
    children: tuple = ()
    probs: tuple = ()


@dataclass(eq=False)
class ScenarioLattice:
    """Finite scenario lattice for the cashflow process.

    slices[k] is the list of nodes alive at time index k. lce_declared is a
    model attribute (left-continuity in expectation of the continuous-time
    limit cannot be decided from finitely many grid values). p_exponent is
    recorded for diagnostics only. Instances are immutable by convention once
    built; the cached arrays must not be mutated.
    """

    slices: list
    lce_declared: bool = True
    p_exponent: float = 2.0
    _x: list = field(default_factory=list, repr=False)
    _P: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.slices = [tuple(sl) for sl in self.slices]
        if len(self.slices) < 2:
            raise ValueError("lattice needs at least two time slices")
        self._x = [np.array([node.x for node in sl], dtype=float) for sl in self.slices]

    @property
    def n_steps(self) -> int:
        return len(self.slices) - 1

    def n_nodes(self, k: int) -> int:
        return len(self.slices[k])

    def x(self, k: int) -> np.ndarray:
        """Cashflow values at slice k as a vector."""
        return self._x[k]

    def max_x(self) -> float:
        return max(float(v.max()) for v in self._x)

    def transition_matrix(self, k: int) -> np.ndarray:
        """Dense one-step transition matrix from slice k to slice k+1."""
        if k not in self._P:
            if k >= self.n_steps:
                raise ValueError("no transitions out of the terminal slice")
            P = np.zeros((self.n_nodes(k), self.n_nodes(k + 1)))
            for n, node in enumerate(self.slices[k]):
                for c, p in zip(node.children, node.probs):
                    P[n, c] += p
            self._P[k] = P
        return self._P[k]

    def expect_next(self, k: int, values_next: np.ndarray) -> np.ndarray:
        """Conditional expectation of a slice-(k+1) quantity given each node at k."""
        return self.transition_matrix(k) @ values_next

    def occupancy(self) -> list:
        """Forward node probabilities from the single root."""
        if self.n_nodes(0) != 1:
            raise ValueError("occupancy needs a single root node")
        occ = [np.array([1.0])]
        for k in range(self.n_steps):
            occ.append(occ[k] @ self.transition_matrix(k))
        return occ

    def is_tree(self) -> bool:
        """True when no two edges merge, i.e. every node has a unique parent."""
        for k in range(self.n_steps):
            incoming = np.zeros(self.n_nodes(k + 1), dtype=int)
            for node in self.slices[k]:
                for c in node.children:
                    incoming[c] += 1
            if np.any(incoming != 1):
                return False
        return True

    def validate(self):
        """Check cashflow sign, probability sums, and reachability."""
        K = self.n_steps
        for k, sl in enumerate(self.slices):
            for n, node in enumerate(sl):
                if node.x < 0:
                    raise ValueError(
                        "negative cashflow %.17g at slice %d node %d" % (node.x, k, n)
                    )
                if len(node.children) != len(node.probs):
                    raise ValueError("children/probs length mismatch at slice %d node %d" % (k, n))
                if k == K:
                    if node.children:
                        raise ValueError("terminal node %d has children" % n)
                    continue
                if not node.children:
                    raise ValueError("non-terminal node at slice %d has no children" % k)
                if any(p < 0 for p in node.probs):
                    raise ValueError("negative transition probability at slice %d node %d" % (k, n))
                if abs(sum(node.probs) - 1.0) > PROB_TOL:
                    raise ValueError(
                        "transition probabilities at slice %d node %d sum to %.17g"
                        % (k, n, sum(node.probs))
                    )
                for c in node.children:
                    if not 0 <= c < self.n_nodes(k + 1):
                        raise ValueError("child index %d out of range at slice %d" % (c, k))
        for k in range(K):
            incoming = np.zeros(self.n_nodes(k + 1), dtype=int)
            for node in self.slices[k]:
                for c in node.children:
                    incoming[c] += 1
            if np.any(incoming == 0):
                orphan = int(np.argmin(incoming))
                raise ValueError("node %d at slice %d is unreachable" % (orphan, k + 1))
        return self


def backward_extremum(lattice: ScenarioLattice, direction: str) -> list:
    """Backward recursion W_k = extremum(X_k, E[W_{k+1} | node]).

    direction "max" gives the smallest supermartingale dominating X (the
    optimal stopping value of sup E[X(sigma)]); "min" gives the inf version.
    """
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    op = np.maximum if direction == "max" else np.minimum
    K = lattice.n_steps
    w = [None] * (K + 1)
    w[K] = lattice.x(K).copy()
    for k in range(K - 1, -1, -1):
        w[k] = op(lattice.x(k), lattice.expect_next(k, w[k + 1]))
    return w


def build_binary_example(K: int) -> ScenarioLattice:
    """Binary-trial cashflow on [0, 3]: flat at 1, then a jump at t=1.

    A single pre-jump node splits at t=1 into two equally likely branches.
    On the up branch X(t) = 1 + (2 - t) for t >= 1 (so X(1) = 2, decreasing
    to 0 at t = 3); on the down branch X(t) = 1 - (2 - t) (so X(1) = 0,
    increasing to 2 at t = 3). K must be divisible by 6 so that t = 1, 1.5
    and 2.5 land on the grid.
    """
    if K % 6 != 0:
        raise ValueError("K must be divisible by 6, got %d" % K)
    T = 3.0
    k_jump = K // 3
    times = TimeGrid(T, K).times
    slices = []
    for k in range(K + 1):
        t = times[k]
        if k < k_jump:
            if k == k_jump - 1:
                slices.append([LatticeNode(1.0, (0, 1), (0.5, 0.5))])
            else:
                slices.append([LatticeNode(1.0, (0,), (1.0,))])
        else:
            hi = 1.0 + (2.0 - t)
            lo = 1.0 - (2.0 - t)
            if k == K:
                slices.append([LatticeNode(hi), LatticeNode(lo)])
            else:
                slices.append([LatticeNode(hi, (0,), (1.0,)), LatticeNode(lo, (1,), (1.0,))])
    lat = ScenarioLattice(slices, lce_declared=True, p_exponent=2.0)
    return lat.validate()


def build_binomial(kind: str, K: int, T: float, c: float = None, x0: float = None,
                   up: float = None, down: float = None, p_up: float = 0.5,
                   drift: float = None, noise: float = None,
                   lce_declared: bool = True, p_exponent: float = 2.0) -> ScenarioLattice:
    """Recombining binomial lattice of one of four drift kinds.

    kind "constant" needs c and yields X identically c on a single-node chain.
    The other kinds ("martingale", "submartingale", "supermartingale") need
    x0 plus either multiplicative parameters (up, down, p_up) giving
    X = x0 * up^i * down^(k-i), or additive parameters (drift, noise) giving
    X = x0 + k*drift + (2i - k)*noise with p = 1/2. The declared kind is
    validated against the actual one-step drift, and any parameterization
    that would produce a negative cashflow is rejected rather than clipped.
    """
    if kind == "constant":
        if c is None:
            raise ValueError("constant kind needs c")
        if c < 0:
            raise ValueError("constant cashflow must be nonnegative")
        slices = [[LatticeNode(float(c), (0,), (1.0,))] for _ in range(K)]
        slices.append([LatticeNode(float(c))])
        return ScenarioLattice(slices, lce_declared, p_exponent).validate()

    if kind not in ("martingale", "submartingale", "supermartingale"):
        raise ValueError("unknown kind %r" % kind)
    if x0 is None:
        raise ValueError("kind %r needs x0" % kind)

    multiplicative = up is not None or down is not None
    additive = drift is not None or noise is not None
    if multiplicative == additive:
        raise ValueError("give either up/down or drift/noise parameters")

    if multiplicative:
        if up is None or down is None:
            raise ValueError("multiplicative parameterization needs both up and down")
        if x0 < 0 or up < 0 or down < 0:
            raise ValueError("negative multiplicative parameters would produce negative cashflows")
        if not 0 <= p_up <= 1:
            raise ValueError("p_up must lie in [0, 1]")
        m = p_up * up + (1.0 - p_up) * down
        value = lambda k, i: x0 * up ** i * down ** (k - i)
        p = p_up
    else:
        if drift is None or noise is None:
            raise ValueError("additive parameterization needs both drift and noise")
        m = None
        value = lambda k, i: x0 + k * drift + (2 * i - k) * noise
        p = 0.5

    if multiplicative:
        if kind == "martingale" and abs(m - 1.0) > PROB_TOL:
            raise ValueError("declared martingale but one-step factor is %.17g" % m)
        if kind == "submartingale" and not m > 1.0 + PROB_TOL:
            raise ValueError("declared submartingale but one-step factor is %.17g" % m)
        if kind == "supermartingale" and not m < 1.0 - PROB_TOL:
            raise ValueError("declared supermartingale but one-step factor is %.17g" % m)
    else:
        if kind == "martingale" and drift != 0.0:
            raise ValueError("declared martingale but additive drift is %.17g" % drift)
        if kind == "submartingale" and not drift > 0.0:
            raise ValueError("declared submartingale but additive drift is %.17g" % drift)
        if kind == "supermartingale" and not drift < 0.0:
            raise ValueError("declared supermartingale but additive drift is %.17g" % drift)

    slices = []
    for k in range(K + 1):
        row = []
        for i in range(k + 1):
            v = value(k, i)
            if v < 0:
                raise ValueError(
                    "parameters clip: cashflow %.17g at slice %d node %d" % (v, k, i)
                )
            if k == K:
                row.append(LatticeNode(float(v)))
            else:
                row.append(LatticeNode(float(v), (i, i + 1), (1.0 - p, p)))
        slices.append(row)
    return ScenarioLattice(slices, lce_declared, p_exponent).validate()


@dataclass(eq=False)
class PathEnsemble:
    """A set of lattice paths with probability weights.

    nodes has shape (n_paths, K+1) and holds node indices per time index.
    exhaustive marks ensembles that enumerate every path with its exact
    probability.
    """

    nodes: np.ndarray
    weights: np.ndarray
    exhaustive: bool = False

    @property
    def n_paths(self) -> int:
        return self.nodes.shape[0]

    def validate(self, lattice: ScenarioLattice):
        if abs(self.weights.sum() - 1.0) > PROB_TOL * max(1, self.n_paths):
            raise ValueError("path weights sum to %.17g" % self.weights.sum())
        K = lattice.n_steps
        if self.nodes.shape[1] != K + 1:
            raise ValueError("path length does not match the lattice")
        for r in range(self.n_paths):
            for k in range(K):
                node = lattice.slices[k][self.nodes[r, k]]
                if int(self.nodes[r, k + 1]) not in node.children:
                    raise ValueError("invalid transition on path %d at step %d" % (r, k))
        return self

    def expectation_of_x(self, lattice: ScenarioLattice, k: int) -> float:
        return float(self.weights @ lattice.x(k)[self.nodes[:, k]])


def count_paths(lattice: ScenarioLattice) -> int:
    """Number of distinct root-to-terminal node sequences."""
    counts = np.ones(lattice.n_nodes(0), dtype=object)
    for k in range(lattice.n_steps):
        nxt = np.zeros(lattice.n_nodes(k + 1), dtype=object)
        for n, node in enumerate(lattice.slices[k]):
            for c in node.children:
                nxt[c] += counts[n]
        counts = nxt
    return int(counts.sum())


def enumerate_paths(lattice: ScenarioLattice, max_paths: int = 65536) -> PathEnsemble:
    """Exhaustive path ensemble with exact probability weights."""
    total = count_paths(lattice)
    if total > max_paths:
        raise ValueError("path count %d exceeds the bound %d" % (total, max_paths))
    K = lattice.n_steps
    paths = []
    weights = []

    def walk(k, n, prefix, prob):
        if k == K:
            paths.append(prefix)
            weights.append(prob)
            return
        node = lattice.slices[k][n]
        for c, p in zip(node.children, node.probs):
            walk(k + 1, c, prefix + [c], prob * p)

    for n0 in range(lattice.n_nodes(0)):
        start_w = 1.0 / lattice.n_nodes(0)
        walk(0, n0, [n0], start_w)
    return PathEnsemble(np.array(paths, dtype=np.int64), np.array(weights), exhaustive=True)


def sample_paths(lattice: ScenarioLattice, n_paths: int = 0, seed: int = 0,
                 exhaustive: bool = False, max_paths: int = 65536) -> PathEnsemble:
    """Sampled (uniform-weight) or exhaustive path ensemble.

    Sampling is deterministic given the seed. Exhaustive mode enumerates all
    paths with exact probabilities and rejects lattices whose path count
    exceeds max_paths.
    """
    if exhaustive:
        return enumerate_paths(lattice, max_paths)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    rng = np.random.default_rng(seed)
    K = lattice.n_steps
    nodes = np.zeros((n_paths, K + 1), dtype=np.int64)
    for r in range(n_paths):
        n = rng.integers(lattice.n_nodes(0)) if lattice.n_nodes(0) > 1 else 0
        nodes[r, 0] = n
        for k in range(K):
            node = lattice.slices[k][n]
            ci = rng.choice(len(node.children), p=np.array(node.probs) / sum(node.probs))
            n = node.children[ci]
            nodes[r, k + 1] = n
    weights = np.full(n_paths, 1.0 / n_paths)
    return PathEnsemble(nodes, weights, exhaustive=False)


def write_lattice(path: str, lattice: ScenarioLattice, time_grid: TimeGrid, L: float):
    """Plain-text lattice export, one node per line.

    Header: `T K L lce p_exponent`. Node lines: `k node X child:prob ...`.
    All floats use 17 significant digits so a write/read/write round trip is
    byte-identical.
    """
    lines = ["%.17g %d %.17g %d %.17g" % (time_grid.T, time_grid.K, L,
                                          int(lattice.lce_declared), lattice.p_exponent)]
    for k, sl in enumerate(lattice.slices):
        for n, node in enumerate(sl):
            parts = ["%d %d %.17g" % (k, n, node.x)]
            parts += ["%d:%.17g" % (c, p) for c, p in zip(node.children, node.probs)]
            lines.append(" ".join(parts))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_lattice(path: str):
    """Read a lattice export; returns (lattice, time_grid, L)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if len(head) != 5:
        raise ValueError("malformed lattice header")
    T, K, L = float(head[0]), int(head[1]), float(head[2])
    lce, p_exp = bool(int(head[3])), float(head[4])
    raw = {}
    for ln in lines[1:]:
        parts = ln.split()
        k, n, x = int(parts[0]), int(parts[1]), float(parts[2])
        children = []
        probs = []
        for tok in parts[3:]:
            cs, ps = tok.split(":")
            children.append(int(cs))
            probs.append(float(ps))
        raw.setdefault(k, {})[n] = LatticeNode(x, tuple(children), tuple(probs))
    slices = []
    for k in range(K + 1):
        if k not in raw:
            raise ValueError("missing slice %d in lattice file" % k)
        row = raw[k]
        slices.append([row[n] for n in range(len(row))])
    lat = ScenarioLattice(slices, lce_declared=lce, p_exponent=p_exp).validate()
    return lat, TimeGrid(T, K), L
