import numpy as np
import pytest

from swingkit import (LatticeNode, ScenarioLattice, TimeGrid, VolumeGrid,
                      build_binary_example, build_binomial, derivatives,
                      extract_policy, sample_paths, solve)


def exp_sigma_params(K, T=2.0, sigma=0.15):
    dt = T / K
    up = float(np.exp(sigma * np.sqrt(dt)))
    down = float(np.exp(-sigma * np.sqrt(dt)))
    p_up = (1.0 - down) / (up - down)
    return up, down, p_up


def make_exp_martingale(K, T=2.0, x0=1.0):
    """Recombining martingale lattice with volatility scaled to the step."""
    up, down, p_up = exp_sigma_params(K, T)
    return build_binomial("martingale", K, T, x0=x0, up=up, down=down, p_up=p_up)


def solved(lattice, T, L=1.0):
    tg = TimeGrid(T, lattice.n_steps)
    vg = VolumeGrid.aligned(L, tg)
    field = solve(lattice, tg, vg)
    deriv = derivatives(field)
    policy = extract_policy(field, deriv, lattice)
    return tg, vg, field, deriv, policy


@pytest.fixture(scope="session")
def binary96():
    lat = build_binary_example(96)
    tg, vg, field, deriv, policy = solved(lat, 3.0)
    ens = sample_paths(lat, exhaustive=True)
    return {"lat": lat, "tg": tg, "vg": vg, "field": field,
            "deriv": deriv, "policy": policy, "ens": ens}


def collision_lattice():
    """Two mid nodes with opposite exercise decisions feeding one child, so
    the realized volume level at that child depends on the path."""
    slices = [
        [LatticeNode(1.0, (0, 1), (0.5, 0.5))],
        [LatticeNode(5.0, (0,), (1.0,)), LatticeNode(0.01, (0,), (1.0,))],
        [LatticeNode(0.5, (0,), (1.0,))],
        [LatticeNode(0.0)],
    ]
    lat = ScenarioLattice(slices).validate()
    tg = TimeGrid(3.0, 3)
    vg = VolumeGrid.aligned(1.0, tg)
    return lat, tg, vg


def random_tiny_lattice(seed):
    """Seeded lattice small enough for exhaustive policy enumeration."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 4))
    sizes = [1] + [int(rng.integers(1, 4)) for _ in range(K)]
    slices = []
    for k in range(K + 1):
        row = []
        nxt = sizes[k + 1] if k < K else 0
        owners = {}
        for c in range(nxt):
            owners.setdefault(int(rng.integers(sizes[k])), []).append(c)
        for n in range(sizes[k]):
            x = float(np.round(rng.uniform(0.0, 3.0), 3))
            if k == K:
                row.append(LatticeNode(x))
                continue
            kids = set(owners.get(n, []))
            kids |= set(np.nonzero(rng.random(nxt) < 0.4)[0].tolist())
            if not kids:
                kids = {int(rng.integers(nxt))}
            kids = sorted(kids)
            w = rng.uniform(0.2, 1.0, size=len(kids))
            w = w / w.sum()
            row.append(LatticeNode(x, tuple(int(i) for i in kids),
                                   tuple(float(v) for v in w)))
        slices.append(row)
    lat = ScenarioLattice(slices).validate()
    tg = TimeGrid(float(K), K)
    j_cap = int(rng.integers(1, 3))
    vg = VolumeGrid.aligned(1.0 / (j_cap * tg.dt), tg)
    return lat, tg, vg


@pytest.fixture(scope="session")
def mart96():
    lat = make_exp_martingale(96)
    tg, vg, field, deriv, policy = solved(lat, 2.0)
    return {"lat": lat, "tg": tg, "vg": vg, "field": field,
            "deriv": deriv, "policy": policy}
