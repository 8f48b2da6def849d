"""Batch front end.

    dividend-ratchet solve|verify|simulate|curve|refine --config run.json --out DIR
                     [--seed N] [--priority retention-first|dividend-first]

Data goes to files in ``--out``; stdout only carries progress lines and
stderr carries one JSON error record on failure.  Exit codes: 0 ok,
1 verification failed, 2 bad configuration, 3 missing artifact, 4 hypothesis
not met.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConditionNotMetError, ContractViolation, RatchetError, ValidationError
from .io import fmt, manifest, num, read_csv, read_json, write_csv, write_json
from .model import ActionGrid, CLPrimitives, ModelParams, params_from_cl

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_HYPOTHESIS = 0, 1, 2, 3, 4


class MissingArtifact(RatchetError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    raw: dict
    grid: Optional[ActionGrid] = None
    box: Optional[object] = None
    solver: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    curve: dict = field(default_factory=dict)
    refine: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)


_SECTIONS = {"model", "grid", "box", "solver", "sim", "curve", "refine", "outputs"}


def _section(raw, key):
    v = raw.get(key, {})
    if not isinstance(v, dict):
        raise ValidationError(f"'{key}' must be an object")
    return v


def parse_config(raw: dict) -> RunConfig:
    from .curves import IntervalBox

    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    m = _section(raw, "model")
    has_direct = all(k in m for k in ("mu", "sigma", "b", "q"))
    has_cl = "cl" in m
    if has_direct == has_cl:
        raise ValidationError("model needs exactly one of {mu, sigma, b, q} or {cl, q}")
    try:
        if has_direct:
            model = ModelParams(float(m["mu"]), float(m["sigma"]), float(m["b"]), float(m["q"]))
        else:
            if "q" not in m:
                raise ValidationError("model.cl needs a discount rate q")
            c = m["cl"]
            prim = CLPrimitives(float(c["lambda"]), float(c["mu0"]), float(c["sigma0_sq"]),
                                float(c["theta"]), float(c["gamma"]), c.get("principle", "expected-value"))
            model = params_from_cl(prim, float(m["q"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad model section: {exc!r}") from None
    grid = box = None
    if "grid" in raw:
        g = _section(raw, "grid")
        try:
            grid = ActionGrid(g["retentions"], g["dividends"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad grid section: {exc!r}") from None
    if "box" in raw:
        b = _section(raw, "box")
        try:
            box = IntervalBox(float(b["a_lo"]), float(b["a_hi"]), float(b["c_lo"]), float(b["c_hi"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad box section: {exc!r}") from None
    return RunConfig(model, raw, grid, box, _section(raw, "solver"), _section(raw, "sim"),
                     _section(raw, "curve"), _section(raw, "refine"), _section(raw, "outputs"))


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON in {path}: {exc}") from None
    return parse_config(raw)


def _solver_config(rc: RunConfig, priority: Optional[str]):
    from .thresholds import SolverConfig

    s = dict(rc.solver)
    if priority is not None:
        s["priority"] = priority
    allowed = {"x_max", "coarse_points", "refine_tol", "delta_tol", "inf_threshold_M", "priority"}
    bad = set(s) - allowed
    if bad:
        raise ValidationError(f"unknown solver keys: {sorted(bad)}")
    try:
        return SolverConfig(**s)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def _need_grid(rc):
    if rc.grid is None:
        raise ValidationError("this command needs a 'grid' section")
    return rc.grid


def _need_box(rc):
    if rc.box is None:
        raise ValidationError("this command needs a 'box' section")
    return rc.box


def _progress(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(rc: RunConfig, out: Path, priority=None, **_) -> int:
    from .thresholds import solve_backward, switch_chain

    grid = _need_grid(rc)
    cfg = _solver_config(rc, priority)
    t0 = time.perf_counter()
    sol = solve_backward(rc.model, grid, cfg)
    elapsed = time.perf_counter() - t0
    m, n = sol.shape
    rows = []
    for i in range(m):
        for j in range(n):
            if (i, j) == (m - 1, n - 1):
                continue
            rep = sol.reports.get((i, j))
            rows.append((i, j, grid.retentions[i], grid.dividends[j], sol.y_star[i, j], sol.z_star[i, j],
                         sol.k_star[i, j], rep.case if rep else "", rep.fallback if rep else ""))
    write_csv(out / "thresholds.csv", ["i", "j", "a", "c", "y_star", "z_star", "k_star", "case", "fallback"], rows)
    lv = [t for t in (sol.switch_level(i, j) for i in range(m) for j in range(n)) if math.isfinite(t)]
    x_hi = float(rc.outputs.get("values_x_max", 1.25 * max(lv) if lv and max(lv) > 0 else 50.0))
    npts = int(rc.outputs.get("values_points", 401))
    xs = np.linspace(0.0, x_hi, npts)
    vrows = []
    for i in range(m):
        for j in range(n):
            w = sol.value(xs, i, j)
            vrows.extend((x, i, j, grid.retentions[i], grid.dividends[j], v) for x, v in zip(xs, w))
    write_csv(out / "values.csv", ["x", "i", "j", "a", "c", "W"], vrows)
    chain = [{"a": a, "c": c, "at": lvl} for (a, c), lvl in switch_chain(sol)]
    write_json(out / "solution.json", {
        "model": rc.model.to_dict(), "grid": grid.to_dict(), "solver": sol.config.to_dict(),
        "switch_chain": chain,
    })
    write_json(out / "manifest.json", manifest("solve", rc.raw, extra={"solver_resolved": sol.config.to_dict(),
                                                                      "priority": sol.config.priority.value}))
    _progress(f"solved {m}x{n} grid in {elapsed:.3f}s; chain: "
              + " -> ".join(f"({e['a']:g},{e['c']:g})" for e in chain))
    return EXIT_OK


def load_solution(directory: Path):
    """Rebuild a solution from ``solution.json`` + ``thresholds.csv`` in ``directory``."""
    from .thresholds import SolverConfig, solution_from_tables

    meta_p, thr_p = directory / "solution.json", directory / "thresholds.csv"
    for pth in (meta_p, thr_p):
        if not pth.exists():
            raise MissingArtifact(f"missing artifact {pth}")
    meta = read_json(meta_p)
    p = ModelParams(**{k: float(v) for k, v in meta["model"].items()})
    grid = ActionGrid(meta["grid"]["retentions"], meta["grid"]["dividends"])
    s = {k: (num(v) if isinstance(v, str) and k != "priority" else v) for k, v in meta["solver"].items()}
    cfg = SolverConfig(**s)
    y = np.full((grid.m, grid.n), math.inf)
    z = np.full((grid.m, grid.n), math.inf)
    k = np.zeros((grid.m, grid.n))
    for r in read_csv(thr_p):
        i, j = int(r["i"]), int(r["j"])
        y[i, j], z[i, j], k[i, j] = num(r["y_star"]), num(r["z_star"]), num(r["k_star"])
    return solution_from_tables(p, grid, cfg, y, z, k)


def _solution_dir(out: Path, solution: Optional[str]) -> Path:
    return Path(solution) if solution else out


def cmd_verify(rc: RunConfig, out: Path, solution=None, **_) -> int:
    from .hjb import boundary_checks, default_samples, smooth_pasting, viscosity_scan

    sol = load_solution(_solution_dir(out, solution))
    n = int(rc.outputs.get("verify_points", 2000))
    xs = default_samples(sol, n)
    scan = viscosity_scan(sol, xs)
    pasting = smooth_pasting(sol)
    bnd = boundary_checks(sol)
    write_csv(out / "residuals.csv", ["x", "i", "j", "branchA", "branchC", "branchL", "max"], scan.report.rows())
    write_csv(out / "pasting.csv", ["i", "j", "level", "kind", "left", "right", "raw_relative", "relative",
                                    "d2_jump", "fallback"],
              [(pc.cell[0], pc.cell[1], pc.level, pc.kind, pc.left, pc.right, pc.raw_relative, pc.relative,
                pc.d2_jump, pc.fallback) for pc in pasting])
    worst_paste = max((pc.relative for pc in pasting), default=0.0)
    passed = bool(scan.passed and worst_paste <= 1e-3 and bnd.passed)
    write_json(out / "verify_summary.json", {
        "passed": passed,
        "viscosity": {"passed": scan.passed, "max_positive": scan.max_positive, "tol_pos": scan.tol_pos,
                      "max_active_gap": scan.max_active_gap, "tol_active": scan.tol_active,
                      "worst_positive": scan.worst_positive, "worst_active": scan.worst_active},
        "pasting": {"max_relative": worst_paste, "tolerance": 1e-3},
        "boundary": {"zero_ok": bnd.zero_ok, "tail_ok": bnd.tail_ok, "lipschitz_ok": bnd.lipschitz_ok,
                     "lipschitz": bnd.lipschitz, "slope0_max": bnd.slope0_max},
    })
    write_json(out / "manifest.json", manifest("verify", rc.raw))
    _progress(f"verify: {'PASS' if passed else 'FAIL'} (max residual {scan.max_positive:.3e}, "
              f"max pasting gap {worst_paste:.3e})")
    return EXIT_OK if passed else EXIT_FAIL


def _sim_config(rc: RunConfig, seed):
    from .simulate import SimConfig

    s = {k: v for k, v in rc.sim.items() if k != "probes"}
    if seed is not None:
        s["seed"] = int(seed)
    try:
        return SimConfig(**s)
    except TypeError as exc:
        raise ValidationError(f"bad sim section: {exc}") from None


def cmd_simulate(rc: RunConfig, out: Path, seed=None, solution=None, **_) -> int:
    from .simulate import simulate_strategy, threshold_policy

    sol = load_solution(_solution_dir(out, solution))
    cfg = _sim_config(rc, seed)
    g = sol.grid
    probes = rc.sim.get("probes") or [[5.0, g.retentions[0], g.dividends[0]]]
    policy = threshold_policy(sol)
    m, n = sol.shape
    slope0 = max(float(sol.value(0.0, i, j, 1)) for i in range(m) for j in range(n))
    results = []
    for x0, a0, c0 in probes:
        t0 = time.perf_counter()
        try:
            est = simulate_strategy(sol.params, policy, float(x0), float(a0), float(c0), cfg, slope0)
        except ContractViolation:
            raise
        i, j = sol.grid_indices(float(a0), float(c0))
        target = float(sol.value(float(x0), i, j))
        rec = {"x0": x0, "a0": a0, "c0": c0, "analytic": target, "agrees": est.agrees_with(target)}
        rec.update(est.to_dict())
        results.append(rec)
        _progress(f"simulate x0={x0} a0={a0} c0={c0}: mean {est.mean:.6f} +- {est.stderr:.2e} "
                  f"(analytic {target:.6f}) in {time.perf_counter() - t0:.2f}s")
    write_json(out / "estimate.json", {"seed": int(cfg.seed), "sim": cfg.to_dict(), "estimates": results})
    write_json(out / "manifest.json", manifest("simulate", rc.raw, seed=int(cfg.seed)))
    return EXIT_OK


def cmd_curve(rc: RunConfig, out: Path, **_) -> int:
    from .curves import CurveConfig, corner_condition, solve_curves, verify_curve_optimality

    box = _need_box(rc)
    ok, bound = corner_condition(rc.model, box)
    if not ok:
        raise ConditionNotMetError(
            f"c_hi={box.c_hi} must exceed q sigma^2 a_lo^2 / (2 (mu a_lo - b)) = {bound}")
    allowed = {"n_a", "n_c", "eps_bc", "ode_tol", "max_sub", "grow_start", "shrink"}
    bad = set(rc.curve) - allowed
    if bad:
        raise ValidationError(f"unknown curve keys: {sorted(bad)}")
    cfg = CurveConfig(**rc.curve)
    t0 = time.perf_counter()
    cs = solve_curves(rc.model, box, cfg)
    rep = verify_curve_optimality(cs)
    write_csv(out / "curves.csv", ["a", "c", "zeta_A", "zeta_C", "K", "regime"], cs.rows())
    write_json(out / "curve_report.json", {
        "x_c": cs.x_c, "x_a": cs.x_a, "eps_box": cs.eps_box.to_dict(), "aborted": cs.aborted,
        "conditions": "met" if rep.conditions_met else "conditions unmet",
        "report": rep.to_dict(),
    })
    write_json(out / "manifest.json", manifest("curve", rc.raw, extra={"curve_config": cfg.to_dict()}))
    _progress(f"curve: x_c={cs.x_c:.6g}, box {cs.eps_box}, "
              f"{'conditions met' if rep.conditions_met else 'conditions unmet'} "
              f"({time.perf_counter() - t0:.2f}s)")
    return EXIT_OK


def cmd_refine(rc: RunConfig, out: Path, priority=None, **_) -> int:
    from .convergence import RefinementPlan, lipschitz_probe, run_refinement

    box = _need_box(rc)
    r = dict(rc.refine)
    levels = r.pop("levels", 4)
    probe_kw = {k: r.pop(k) for k in ("x_hi", "n_x", "n_a", "n_c") if k in r}
    if r:
        raise ValidationError(f"unknown refine keys: {sorted(r)}")
    if isinstance(levels, int):
        plan = RefinementPlan.dyadic(box, levels, **probe_kw)
    else:
        try:
            grids = [(lv["retentions"], lv["dividends"]) for lv in levels]
        except (TypeError, KeyError) as exc:
            raise ValidationError(f"bad refine levels: {exc!r}") from None
        plan = RefinementPlan.custom(box, grids, **probe_kw)
    res = run_refinement(rc.model, plan, _solver_config(rc, priority))
    write_csv(out / "gaps.csv", ["level", "m", "n", "sup_gap", "max_value"], res.rows())
    lip = lipschitz_probe(res).to_dict() if len(res.tables) > 1 else None
    ok = res.monotone and res.gaps_nonincreasing
    write_json(out / "refine_report.json", {
        "monotone": res.monotone, "worst_decrease": res.worst_decrease,
        "gaps_nonincreasing": res.gaps_nonincreasing, "sup_gaps": res.sup_gaps,
        "levels_pass_viscosity_scan": res.scans_passed, "lipschitz": lip,
    })
    write_json(out / "manifest.json", manifest("refine", rc.raw, extra={"plan": plan.to_dict()}))
    _progress(f"refine: {len(plan.levels)} levels, monotone={res.monotone}, "
              f"gaps nonincreasing={res.gaps_nonincreasing}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "simulate": cmd_simulate,
            "curve": cmd_curve, "refine": cmd_refine}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dividend-ratchet", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--priority", choices=["retention-first", "dividend-first"])
    ap.add_argument("--solution", help="directory holding solve artifacts (default: --out)")
    return ap


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        rc = load_config(args.config)
        return COMMANDS[args.command](rc, out, seed=args.seed, priority=args.priority, solution=args.solution)
    except ValidationError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_CONFIG)
    except MissingArtifact as exc:
        return _error(type(exc).__name__, str(exc), EXIT_MISSING)
    except ConditionNotMetError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_HYPOTHESIS)
    except RatchetError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_FAIL)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
