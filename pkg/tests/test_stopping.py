import numpy as np
import pytest

from swingkit import (InvariantError, StoppingRule, StopWindows, TimeGrid,
                      VolumeGrid, build_binomial, check_snell,
                      doob_decomposition, evaluate_stop_rule,
                      marginal_value_report, optimal_predictable_stop, rollout,
                      sample_paths, snell, stop_windows)


@pytest.fixture()
def half_bundle(binary96):
    return rollout(binary96["policy"], binary96["lat"], binary96["ens"], (0, 0.5))


def test_snell_roots(binary96):
    lat = binary96["lat"]
    assert snell(lat, "sup").values[0][0] == 2.0
    assert snell(lat, "inf").values[0][0] == 0.0
    const = build_binomial("constant", 8, 1.0, c=0.7)
    assert snell(const, "sup").values[0][0] == 0.7
    assert snell(const, "inf").values[0][0] == 0.7


def test_snell_invariants(binary96):
    lat = binary96["lat"]
    for d in ("sup", "inf"):
        rep = check_snell(snell(lat, d), lat)
        assert rep == {"dominance": 0.0, "drift": 0.0}


def test_snell_detects_corruption(binary96):
    lat = binary96["lat"]
    field = snell(lat, "sup")
    field.values[10][0] = 0.0
    with pytest.raises(InvariantError, match="fails to dominate"):
        check_snell(field, lat)


def test_stop_windows_exact_sets(half_bundle):
    w = stop_windows(half_bundle)
    assert w.k0 == 0 and w.m_event and w.exhaustive
    hi_raise = set(np.nonzero(w.can_raise[0])[0].tolist())
    hi_lower = set(np.nonzero(w.can_lower[0])[0].tolist())
    lo_raise = set(np.nonzero(w.can_raise[1])[0].tolist())
    lo_lower = set(np.nonzero(w.can_lower[1])[0].tolist())
    # high branch exercises on [1, 1.5): both windows pinch at the exit
    assert hi_raise == set(range(1, 33)) | set(range(48, 97))
    assert hi_lower == set(range(32, 49))
    assert lo_raise == set(range(1, 81))
    assert lo_lower == set(range(80, 97))


def test_stop_windows_flags_accessor(half_bundle):
    w = stop_windows(half_bundle)
    assert np.array_equal(w.flags("can_raise"), w.can_raise)
    assert np.all(w.flags(None))
    with pytest.raises(ValueError, match="constraint must be"):
        w.flags("sometimes")


def test_constrained_searches_hit_the_marginal_values(binary96, half_bundle):
    lat = binary96["lat"]
    w = stop_windows(half_bundle)
    rule_a, va = optimal_predictable_stop(lat, w, "can_raise", "sup")
    rule_b, vb = optimal_predictable_stop(lat, w, "can_lower", "inf")
    assert va == 1.5
    assert vb == 1.5
    assert rule_a.predictable and rule_b.predictable
    rule_a.check_predictable(lat)
    rule_b.check_predictable(lat)
    ens = binary96["ens"]
    assert evaluate_stop_rule(lat, rule_a, ens) == 1.5
    assert evaluate_stop_rule(lat, rule_b, ens) == 1.5


def test_unconstrained_search_recovers_the_envelope(binary96, half_bundle):
    lat = binary96["lat"]
    w = stop_windows(half_bundle)
    rule, v = optimal_predictable_stop(lat, w, None, "sup", predictable=False)
    assert v == 2.0
    assert rule.include_start
    assert v == snell(lat, "sup").values[0][0]


def test_unconstrained_beats_constrained_strictly(binary96, half_bundle):
    """Dropping both the window constraint and predictability is worth
    exactly the 2 vs 1.5 difference here."""
    lat = binary96["lat"]
    w = stop_windows(half_bundle)
    _, va = optimal_predictable_stop(lat, w, "can_raise", "sup")
    _, vu = optimal_predictable_stop(lat, w, None, "sup", predictable=False)
    assert vu - va == 0.5


def test_named_rule_evaluates_to_seven_quarters(binary96):
    lat = binary96["lat"]
    stop = [np.zeros(lat.n_nodes(k), dtype=bool) for k in range(97)]
    stop[32][0] = True
    stop[80][1] = True
    rule = StoppingRule(stop=stop, predictable=False, k0=0)
    assert evaluate_stop_rule(lat, rule, binary96["ens"]) == 1.75


def test_predictability_check(binary96):
    lat = binary96["lat"]
    stop = [np.zeros(lat.n_nodes(k), dtype=bool) for k in range(97)]
    stop[32][0] = True
    stop[80][1] = True
    stop[96][:] = True
    bad = StoppingRule(stop=stop, predictable=True, k0=0)
    with pytest.raises(InvariantError, match="varies across one parent's children"):
        bad.check_predictable(lat)
    # the same decisions are fine when not declared predictable
    StoppingRule(stop=stop, predictable=False, k0=0).check_predictable(lat)


def test_evaluate_requires_stopping(binary96):
    lat = binary96["lat"]
    stop = [np.zeros(lat.n_nodes(k), dtype=bool) for k in range(97)]
    rule = StoppingRule(stop=stop, predictable=False, k0=0)
    with pytest.raises(ValueError, match="never stops"):
        evaluate_stop_rule(lat, rule, binary96["ens"])


def test_search_rejections(binary96, half_bundle):
    lat = binary96["lat"]
    w = stop_windows(half_bundle)
    with pytest.raises(ValueError, match="only allowed unconstrained"):
        optimal_predictable_stop(lat, w, "can_raise", "sup", include_start=True)
    with pytest.raises(ValueError, match="direction must be"):
        optimal_predictable_stop(lat, w, None, "max")
    sampled = sample_paths(lat, n_paths=16, seed=3)
    ws = stop_windows(rollout(binary96["policy"], lat, sampled, (0, 0.5)))
    with pytest.raises(ValueError, match="exhaustive window flags"):
        optimal_predictable_stop(lat, ws, "can_raise", "sup")


def test_search_needs_a_tree():
    lat = build_binomial("martingale", 4, 2.0, x0=1.0, up=1.25, down=0.8, p_up=4 / 9)
    tg = TimeGrid(2.0, 4)
    vg = VolumeGrid.aligned(1.0, tg)
    from swingkit import derivatives, extract_policy, solve
    field = solve(lat, tg, vg)
    pol = extract_policy(field, derivatives(field), lat)
    ens = sample_paths(lat, exhaustive=True)
    w = stop_windows(rollout(pol, lat, ens, (0, 0.0)))
    with pytest.raises(ValueError, match="needs a tree lattice"):
        optimal_predictable_stop(lat, w, None, "sup")


def test_infeasible_constraint(binary96):
    b = rollout(binary96["policy"], binary96["lat"], binary96["ens"], (0, 1.0))
    w = stop_windows(b)
    assert not w.m_event
    assert not w.can_lower.any()
    with pytest.raises(ValueError, match="no admissible stopping rule"):
        optimal_predictable_stop(binary96["lat"], w, "can_lower", "inf")


def test_window_flags_must_be_node_functions():
    from swingkit import build_binary_example
    lat = build_binary_example(6)
    ens = sample_paths(lat, exhaustive=True)
    cr = np.zeros((2, 7), dtype=bool)
    cr[0, 1] = True  # paths share node 0 at m=1 but disagree
    cr[:, 6] = True
    w = StopWindows(k0=0, m_event=True, can_raise=cr, can_lower=np.zeros_like(cr),
                    nodes=ens.nodes, weights=ens.weights, exhaustive=True)
    with pytest.raises(ValueError, match="not a node function"):
        optimal_predictable_stop(lat, w, "can_raise", "sup")


def test_doob_decomposition_on_the_tree(binary96):
    lat = binary96["lat"]
    ens = binary96["ens"]
    dd = doob_decomposition(snell(lat, "sup"), lat)
    assert dd.direction == "sup"
    assert dd.martingale is not None and dd.compensator is not None
    acc = dd.accumulate(lat, ens)
    for r in range(2):
        node_view = np.array([dd.martingale[k][int(ens.nodes[r, k])]
                              for k in range(97)])
        assert np.array_equal(acc[r], node_view)
        # the removed part never decreases along any path
        y = np.array([snell(lat, "sup").values[k][int(ens.nodes[r, k])]
                      for k in range(97)])
        assert np.diff(acc[r] - y).min() >= 0.0
    dd_inf = doob_decomposition(snell(lat, "inf"), lat)
    acc_inf = dd_inf.accumulate(lat, ens)
    for r in range(2):
        y = np.array([snell(lat, "inf").values[k][int(ens.nodes[r, k])]
                      for k in range(97)])
        assert np.diff(y - acc_inf[r]).min() >= 0.0


def test_doob_increments_are_centered(binary96):
    lat = binary96["lat"]
    dd = doob_decomposition(snell(lat, "sup"), lat)
    for k in range(96):
        for n, node in enumerate(lat.slices[k]):
            mean = float(np.array(node.probs) @ dd.increments[k][n])
            assert abs(mean) <= 1e-12


def test_doob_node_view_needs_a_tree():
    lat = build_binomial("martingale", 2, 2.0, x0=1.0, up=1.25, down=0.75, p_up=0.5)
    dd = doob_decomposition(snell(lat, "sup"), lat)
    assert dd.martingale is None
    assert dd.compensator is None
    ens = sample_paths(lat, exhaustive=True)
    acc = dd.accumulate(lat, ens)  # pathwise accumulation still works
    assert acc.shape == (4, 3)
    assert np.max(np.abs(ens.weights @ acc - acc[0, 0])) <= 1e-12


def test_marginal_report_regions(binary96):
    rep = marginal_value_report(binary96["field"], binary96["lat"], binary96["ens"],
                                [(0.0, 0.5), (0.0, 0.0), (2.0, 0.0), (2.5, 0.0),
                                 (0.0, 1.0)])
    assert rep.tol == 0.1875
    rows = {(r.t0, r.y0): r for r in rep.rows}

    r = rows[(0.0, 0.5)]
    assert r.region == "interior"
    assert r.dminus_neg == 1.484375
    assert r.dplus_neg == 1.515625
    assert r.ex_sigma == 1.5
    assert r.sup_raise == 1.5
    assert r.inf_lower == 1.5
    assert np.isnan(r.snell_sup) and np.isnan(r.snell_inf)

    r = rows[(0.0, 0.0)]
    assert r.region == "interior"
    assert (r.dminus_neg, r.ex_sigma, r.sup_raise, r.inf_lower) == (1.0, 1.0, 1.0, 1.0)

    r = rows[(2.0, 0.0)]
    assert r.region == "boundary"
    assert r.dminus_neg == 0.0
    assert r.snell_inf == 0.5
    assert abs(r.dplus_neg - r.snell_inf) <= rep.tol

    r = rows[(2.5, 0.0)]
    assert r.region == "deep"
    assert r.dminus_neg == 0.0 and r.dplus_neg == 0.0

    r = rows[(0.0, 1.0)]
    assert r.region == "cap"
    assert r.dminus_neg == 1.984375
    assert r.snell_sup == 2.0
    assert abs(r.dminus_neg - r.snell_sup) <= rep.tol


def test_marginal_report_table_format(binary96):
    rep = marginal_value_report(binary96["field"], binary96["lat"], binary96["ens"],
                                [(0.0, 0.5)])
    lines = rep.format_table().splitlines()
    assert lines[0].split() == ["t0", "y0", "region", "neg_dminus", "neg_dplus",
                                "ex_sigma", "sup_can_raise", "inf_can_lower",
                                "snell_sup", "snell_inf", "note"]
    assert lines[1].split()[:3] == ["0", "0.5", "interior"]
    assert lines[1].split()[-1] == "-"
