"""Command line front end.

Subcommands: price (solve and export), verify (invariant suites), dual
(refinement study of the martingale bound), stopping (marginal-value table),
example (full worked-model bundle). Configuration is a flat key=value file;
all numeric output uses 17 significant digits so runs are reproducible
byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .duality import (build_optimal_martingale, dual_value, duality_gap_study,
                      random_martingale)
from .models import (TimeGrid, build_binary_example, build_binomial, count_paths,
                     read_lattice, sample_paths, write_lattice)
from .oracle import brute_force_value
from .policy import check_inclusion, check_saturation, exit_times, extract_policy, rollout
from .solver import (InvariantError, VolumeGrid, bellman_residual, boundary_check,
                     check_value_invariants, derivatives, lipschitz_diagnostic, solve)
from .stopping import check_snell, doob_decomposition, marginal_value_report, snell

_KEY_TYPES = {
    "model": str,
    "kind": str,
    "K": int,
    "T": float,
    "L": float,
    "c": float,
    "x0": float,
    "up": float,
    "down": float,
    "p_up": float,
    "drift": float,
    "noise": float,
    "seed": int,
    "n_paths": int,
    "exhaustive": bool,
    "starts": str,
    "k_list": str,
    "lattice_file": str,
    "tie_tol": float,
}


def parse_config(path: str) -> dict:
    """Flat key=value file; blank lines and # comments are skipped."""
    cfg = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("line %d is not key=value: %r" % (ln, raw.strip()))
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _KEY_TYPES:
                raise ValueError("unknown config key %r" % key)
            typ = _KEY_TYPES[key]
            if typ is bool:
                low = val.lower()
                if low in ("1", "true", "yes"):
                    cfg[key] = True
                elif low in ("0", "false", "no"):
                    cfg[key] = False
                else:
                    raise ValueError("key %r wants a boolean, got %r" % (key, val))
            else:
                try:
                    cfg[key] = typ(val)
                except ValueError:
                    raise ValueError("key %r wants %s, got %r" % (key, typ.__name__, val))
    return cfg


def build_model(cfg: dict):
    """Returns (lattice, time_grid, L) from the configuration."""
    model = cfg.get("model", "binary")
    if model == "binary":
        K = cfg.get("K", 96)
        T = cfg.get("T", 3.0)
        if T != 3.0:
            raise ValueError("the binary example lives on T = 3")
        return build_binary_example(K), TimeGrid(3.0, K), cfg.get("L", 1.0)
    if model == "binomial":
        kind = cfg.get("kind")
        if kind is None:
            raise ValueError("binomial model needs kind=")
        K = cfg.get("K", 96)
        T = cfg.get("T", 2.0)
        lat = build_binomial(kind, K, T, c=cfg.get("c"), x0=cfg.get("x0"),
                             up=cfg.get("up"), down=cfg.get("down"),
                             p_up=cfg.get("p_up", 0.5), drift=cfg.get("drift"),
                             noise=cfg.get("noise"))
        return lat, TimeGrid(T, K), cfg.get("L", 1.0)
    if model == "file":
        path = cfg.get("lattice_file")
        if path is None:
            raise ValueError("model=file needs lattice_file=")
        lat, tg, L = read_lattice(path)
        for key, have in (("K", tg.K), ("T", tg.T), ("L", L)):
            if key in cfg and cfg[key] != have:
                raise ValueError("config %s=%r disagrees with the lattice file" % (key, cfg[key]))
        return lat, tg, L
    raise ValueError("unknown model %r" % model)


def make_ensemble(lattice, cfg: dict):
    if cfg.get("exhaustive", False):
        return sample_paths(lattice, exhaustive=True)
    n_paths = cfg.get("n_paths", 0)
    if n_paths < 1:
        if count_paths(lattice) <= 65536:
            return sample_paths(lattice, exhaustive=True)
        raise ValueError("too many paths to enumerate; set n_paths= or exhaustive=true")
    return sample_paths(lattice, n_paths=n_paths, seed=cfg.get("seed", 0))


def parse_starts(text: str) -> list:
    starts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 2:
            raise ValueError("start %r is not t:y" % chunk)
        starts.append((float(parts[0]), float(parts[1])))
    if not starts:
        raise ValueError("empty start list")
    return starts


def parse_k_list(text: str) -> list:
    try:
        ks = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError("k_list must be a comma-separated list of integers")
    if not ks:
        raise ValueError("empty k_list")
    return ks


def _time_index(t: float, tg: TimeGrid) -> int:
    kf = t / tg.dt
    k = int(round(kf))
    if abs(kf - k) > 1e-9 or not 0 <= k <= tg.K:
        raise ValueError("start time %.17g is off the grid" % t)
    return k


def _write(out_dir: str, name: str, text: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def _value_field_text(field, deriv, lattice) -> str:
    tg, vg = field.time_grid, field.volume_grid
    lines = ["t node y J dminus dplus"]
    for k in range(tg.K + 1):
        for n in range(lattice.n_nodes(k)):
            for p in range(vg.n_levels):
                lines.append("%.17g %d %.17g %.17g %.17g %.17g"
                             % (tg.times[k], n, vg.levels[p], field.values[k][n, p],
                                deriv.dminus[k][n, p], deriv.dplus[k][n, p]))
    return "\n".join(lines) + "\n"


def _rollout_text(bundle, lattice) -> str:
    tg = bundle.time_grid
    lines = ["path t u y X inc"]
    for cp in bundle.paths:
        for i in range(tg.K - bundle.k0):
            k = bundle.k0 + i
            lines.append("%d %.17g %.17g %.17g %.17g %.17g"
                         % (cp.path_id, tg.times[k], cp.rates[i], cp.volumes[i],
                            lattice.x(k)[int(cp.nodes[k])], cp.reward_increments[i]))
    return "\n".join(lines) + "\n"


def _exits_text(bundle) -> str:
    ex = exit_times(bundle)
    lines = ["path sigma_u sigma_l sigma case"]
    for r in range(bundle.n_paths):
        lines.append("%d %.17g %.17g %.17g %s"
                     % (bundle.paths[r].path_id, ex.sigma_u[r], ex.sigma_l[r],
                        ex.sigma[r], "U" if ex.case_u[r] else "L"))
    return "\n".join(lines) + "\n"


def _solve_all(cfg: dict):
    lattice, tg, L = build_model(cfg)
    vg = VolumeGrid.aligned(L, tg)
    field = solve(lattice, tg, vg)
    deriv = derivatives(field)
    policy = extract_policy(field, deriv, lattice, cfg.get("tie_tol", 1e-9))
    return lattice, tg, vg, field, deriv, policy


def cmd_price(cfg: dict, out_dir: str) -> int:
    lattice, tg, vg, field, deriv, policy = _solve_all(cfg)
    ens = make_ensemble(lattice, cfg)
    starts = parse_starts(cfg.get("starts", "0:0"))
    files = {"value_field.txt": _value_field_text(field, deriv, lattice)}
    summary = []
    for i, (t0, y0) in enumerate(starts):
        k0 = _time_index(t0, tg)
        if k0 == tg.K:
            raise ValueError("start time %.17g has no remaining horizon" % t0)
        pos0 = vg.index_of(y0)
        value = float(lattice.occupancy()[k0] @ field.values[k0][:, pos0])
        summary.append("J(%.17g,%.17g)=%.17g" % (t0, y0, value))
        bundle = rollout(policy, lattice, ens, (k0, y0))
        summary.append("rollout_mean(%.17g,%.17g)=%.17g" % (t0, y0, bundle.mean))
        files["rollout_%d.txt" % i] = _rollout_text(bundle, lattice)
        files["exits_%d.txt" % i] = _exits_text(bundle)
    files["summary.txt"] = "\n".join(summary) + "\n"
    for name, text in files.items():
        _write(out_dir, name, text)
    for line in summary:
        print(line)
    return 0


def _verify_ensemble(lattice, cfg: dict):
    if cfg.get("exhaustive", False) or count_paths(lattice) <= 65536:
        return sample_paths(lattice, exhaustive=True)
    n_paths = cfg.get("n_paths", 0)
    return sample_paths(lattice, n_paths=n_paths if n_paths >= 1 else 256,
                        seed=cfg.get("seed", 0))


def _verify_checks(cfg: dict):
    lattice, tg, vg, field, deriv, policy = _solve_all(cfg)
    lt_above_one = vg.n_steps > vg.j_cap
    diag = lipschitz_diagnostic(lattice)
    ens = _verify_ensemble(lattice, cfg)
    results = []

    def run(name, fn):
        try:
            results.append(("PASS", name, fn()))
        except InvariantError as exc:
            results.append(("FAIL", name, str(exc)))
        except ValueError as exc:
            results.append(("SKIP", name, str(exc)))

    def check_values():
        ext = check_value_invariants(field, lattice, diag)
        return "monotone %.3g concavity %.3g lipschitz %.3g" % (
            ext["monotone"], ext["concavity"], ext["lipschitz"])

    def check_residual():
        rep = bellman_residual(field, deriv, lattice, "implicit")
        if rep.max_abs > 1e-10:
            raise InvariantError("implicit residual %.3g above 1e-10" % rep.max_abs)
        return "max residual %.3g" % rep.max_abs

    def check_boundary():
        rep = boundary_check(field, lattice)
        if rep.violations:
            raise InvariantError("%d violations, deep %.3g cap %.3g"
                                 % (len(rep.violations), rep.max_deep, rep.max_cap))
        return "deep %.3g cap %.3g" % (rep.max_deep, rep.max_cap)

    def check_rollout():
        bundle = rollout(policy, lattice, ens, (0, 0.0))
        inc = check_inclusion(bundle, deriv, lattice, policy.tie_tol)
        saturated = check_saturation(bundle)
        if ens.exhaustive:
            err = abs(bundle.mean - float(field.values[0][0, vg.index_of(0.0)]))
            if err > 1e-10:
                raise InvariantError("rollout mean misses the value by %.3g" % err)
        return "saturated %s zero-side %.3g full-side %.3g" % (
            saturated, inc["max_zero_side"], inc["min_full_side"])

    def check_envelopes():
        a = check_snell(snell(lattice, "sup"), lattice)
        b = check_snell(snell(lattice, "inf"), lattice)
        doob_decomposition(snell(lattice, "sup"), lattice)
        doob_decomposition(snell(lattice, "inf"), lattice)
        return "sup drift %.3g inf drift %.3g" % (a["drift"], b["drift"])

    def check_oracle():
        if tg.K > 4:
            raise ValueError("enumeration oracle runs at K <= 4 only")
        res = brute_force_value(lattice, tg, vg)
        err = abs(res.value - float(field.values[0][0, vg.index_of(0.0)]))
        if err > 1e-12:
            raise InvariantError("solver misses enumeration by %.3g" % err)
        return "enumerated %d policies, error %.3g" % (res.n_policies, err)

    def check_weak_duality():
        if not lt_above_one:
            raise ValueError("dual bound needs L*T > 1")
        primal = float(field.values[0][0, vg.index_of(0.0)])
        worst = np.inf
        for seed in range(10):
            rep = dual_value(lattice, tg, vg, random_martingale(lattice, seed), primal)
            worst = min(worst, rep.gap)
            if rep.gap < -1e-10:
                raise InvariantError("weak duality broken by %.3g (seed %d)" % (rep.gap, seed))
        return "10 random martingales, worst gap %.3g" % worst

    def check_optimal_martingale():
        if not lt_above_one:
            raise ValueError("dual construction needs L*T > 1")
        res = build_optimal_martingale(lattice, tg, vg, field, deriv, policy)
        if res.report.gap < -1e-10:
            raise InvariantError("negative gap %.3g" % res.report.gap)
        if res.flags:
            raise InvariantError("; ".join(res.flags))
        return "gap %.3g spread %.3g" % (res.report.gap, res.diagnostics["node_spread"])

    def check_marginal():
        starts = parse_starts(cfg["starts"]) if "starts" in cfg else [(0.0, 0.0)]
        rep = marginal_value_report(field, lattice, ens, starts, policy.tie_tol)
        return "%d starts within %.3g" % (len(rep.rows), rep.tol)

    run("value_invariants", check_values)
    run("bellman_residual", check_residual)
    run("boundary_identities", check_boundary)
    run("policy_rollout", check_rollout)
    run("snell_envelopes", check_envelopes)
    run("enumeration_oracle", check_oracle)
    run("weak_duality", check_weak_duality)
    run("optimal_martingale", check_optimal_martingale)
    run("marginal_values", check_marginal)
    return results


def cmd_verify(cfg: dict, out_dir: str) -> int:
    results = _verify_checks(cfg)
    lines = ["%s %s: %s" % (status, name, detail) for status, name, detail in results]
    _write(out_dir, "report.txt", "\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 2 if any(status == "FAIL" for status, _, _ in results) else 0


def cmd_dual(cfg: dict, out_dir: str) -> int:
    model = cfg.get("model", "binary")
    if model == "file":
        raise ValueError("the refinement study needs a rebuildable model, not model=file")
    k_list = parse_k_list(cfg.get("k_list", "48,96,192"))

    def make_instance(K):
        sub = dict(cfg)
        sub["K"] = int(K)
        lattice, tg, L = build_model(sub)
        return lattice, tg, VolumeGrid.aligned(L, tg)

    rows = duality_gap_study(make_instance, k_list)
    lines = ["K primal dual gap"]
    for row in rows:
        lines.append("%d %.17g %.17g %.17g" % (row.K, row.primal, row.dual, row.gap))
    _write(out_dir, "gap_study.txt", "\n".join(lines) + "\n")

    lattice, tg, vg = make_instance(max(k_list))
    field = solve(lattice, tg, vg)
    res = build_optimal_martingale(lattice, tg, vg, field)
    mbar = ["k node M"]
    for k, vals in enumerate(res.node_values):
        for n in range(vals.shape[0]):
            mbar.append("%d %d %.17g" % (k, n, vals[n]))
    _write(out_dir, "martingale.txt", "\n".join(mbar) + "\n")
    for line in lines:
        print(line)
    for flag in res.flags:
        print("flag: %s" % flag)
    return 0


def cmd_stopping(cfg: dict, out_dir: str) -> int:
    lattice, tg, vg, field, deriv, policy = _solve_all(cfg)
    ens = make_ensemble(lattice, cfg)
    starts = parse_starts(cfg.get("starts", "0:0"))
    report = marginal_value_report(field, lattice, ens, starts, policy.tie_tol)
    text = report.format_table()
    _write(out_dir, "marginal.txt", text)
    print(text, end="")
    return 0


def cmd_example(cfg: dict, out_dir: str) -> int:
    """Full bundle on the worked two-branch model."""
    sub = dict(cfg)
    sub["model"] = "binary"
    sub.setdefault("K", 96)
    sub.setdefault("starts", "0:0.5;0:0")
    code = cmd_price(sub, out_dir)
    if code != 0:
        return code
    lattice, tg, vg, field, deriv, policy = _solve_all(sub)
    ens = make_ensemble(lattice, sub)
    report = marginal_value_report(field, lattice, ens,
                                   [(0.0, 0.5), (0.0, 0.0), (2.0, 0.0), (0.0, 1.0)],
                                   policy.tie_tol)
    _write(out_dir, "marginal.txt", report.format_table())
    write_lattice(os.path.join(out_dir, "example_lattice.txt"), lattice, tg, vg.L)
    K = sub["K"]
    sub["k_list"] = "%d,%d,%d" % (K // 2, K, 2 * K)
    return cmd_dual(sub, out_dir)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValueError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="swingkit", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("price", "solve and export value, policy, and exits"),
                            ("verify", "run the invariant suites"),
                            ("dual", "martingale-bound refinement study"),
                            ("stopping", "marginal-value stopping table"),
                            ("example", "full worked-example bundle")):
        sp = subs.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="key=value configuration file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--steps", type=int, default=None, help="override the step count K")
        sp.add_argument("--seed", type=int, default=None, help="override the sampling seed")
        sp.add_argument("--exhaustive", action="store_true",
                        help="force exhaustive path enumeration")
    return parser


_COMMANDS = {
    "price": cmd_price,
    "verify": cmd_verify,
    "dual": cmd_dual,
    "stopping": cmd_stopping,
    "example": cmd_example,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = parse_config(args.config) if args.config else {}
        if args.steps is not None:
            cfg["K"] = args.steps
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.exhaustive:
            cfg["exhaustive"] = True
        return _COMMANDS[args.command](cfg, args.out)
    except InvariantError as exc:
        print("invariant violation: %s" % exc, file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
