"""Command-line front end: ``srlab <subcommand> [--config cfg.json] [--out dir] [--seed N] [--tol-<name> X]``.

Every run writes ``<out>/<subcommand>_report.json`` and ``<out>/<subcommand>.csv``.
Exit status: 0 all assertions passed, 1 an assertion failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from . import acceptance
from . import controllability as ctl
from . import distance as dist
from . import dynamics as dyn
from . import hamiltonian as ham
from . import products as prod
from .io import control_rows, path_rows, write_csv, write_json
from .models import build_model

log = logging.getLogger("srlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

TOLERANCES = {
    "bvp": 1e-9,
    "ep": dist.TOL_EP,
    "steer": ctl.TOL_STEER,
    "normal": dist.NORMAL_TOL,
    "abnormal": dist.ABNORMAL_RTOL,
    "drift": 1e-8,
}

CONFIG_KEYS = {"model", "params", "seed", "out", "tolerances"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    model: Any = "heisenberg3"
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    out: Path = Path("srlab_out")
    tolerances: dict[str, float] = field(default_factory=lambda: dict(TOLERANCES))


@dataclass
class Outcome:
    results: dict[str, Any]
    header: list[str]
    rows: list[list[Any]]
    assertions: list[dict[str, Any]]


def _assert(name: str, ok: bool, **info) -> dict[str, Any]:
    return {"name": name, "passed": bool(ok), **info}


def _vec(params, key, default=None):
    v = params.get(key, default)
    if v is None:
        raise ConfigError(f"missing parameter {key!r}")
    return np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# subcommands: thin adapters over library calls

def cmd_shoot(cfg: RunConfig) -> Outcome:
    model = build_model(cfg.model)
    p = cfg.params
    q0 = _vec(p, "q0", [0.0] * model.n)
    p0 = _vec(p, "p0", [0.0] * model.n)
    phase = ham.geodesic_shoot(model, q0, p0, float(p.get("T", 1.0)), int(p.get("steps", ham.DEFAULT_STEPS)))
    h0 = ham.normal_hamiltonian(model, q0, p0)
    drift = ham.hamiltonian_drift(model, phase)
    header, rows = path_rows(phase.times, [("q", phase.q), ("p", phase.p), ("u", phase.controls)])
    res = {"endpoint": phase.q[-1], "hamiltonian": h0, "drift": drift,
           "length": float(np.sqrt(2 * h0)) * float(p.get("T", 1.0))}
    tol = cfg.tolerances["drift"]
    return Outcome(res, header, rows, [_assert("hamiltonian drift", drift <= tol * max(1.0, h0), value=drift)])


def cmd_bvp(cfg: RunConfig) -> Outcome:
    model = build_model(cfg.model)
    p = cfg.params
    q0, q1 = _vec(p, "q0", [0.0] * model.n), _vec(p, "q1")
    p0 = _vec(p, "p0_init", (q1 - q0).tolist())
    opts = ham.ShootOptions(tol_bvp=cfg.tolerances["bvp"], steps=int(p.get("steps", 200)),
                            max_iter=int(p.get("max_iter", 100)))
    r = ham.shoot_bvp(model, q0, q1, p0, opts)
    header, rows = (path_rows(r.phase.times, [("q", r.phase.q), ("p", r.phase.p), ("u", r.phase.controls)])
                    if r.phase is not None else (["t"], []))
    return Outcome(r.diagnostics(), header, rows,
                   [_assert("bvp converged", r.success, residual=r.residual)])


def _best_options(cfg: RunConfig) -> dist.BestOptions:
    p = cfg.params
    return dist.BestOptions(
        direct=dist.DirectOptions(m=int(p.get("m", 64)), tol_ep=cfg.tolerances["ep"], seed=cfg.seed),
        shoot=ham.ShootOptions(tol_bvp=cfg.tolerances["bvp"]),
        starts=int(p.get("starts", 16)))


def cmd_distance(cfg: RunConfig) -> Outcome:
    model = build_model(cfg.model)
    p = cfg.params
    q0, q1 = _vec(p, "q0", [0.0] * model.n), _vec(p, "q1")
    method = p.get("method", "best")
    opts = _best_options(cfg)
    if method == "best":
        r = dist.distance_best(model, q0, q1, opts)
    elif method == "direct":
        r = dist.distance_direct(model, q0, q1, opts.direct)
    else:
        raise ConfigError(f"method must be 'best' or 'direct', got {method!r}")
    res = r.to_dict()
    asserts = [_assert("endpoint feasible", r.success and r.endpoint_error <= cfg.tolerances["ep"],
                       value=r.endpoint_error)]
    if p.get("classify", False):
        cert = dist.certify_result(model, q0, r, cfg.tolerances["normal"], cfg.tolerances["abnormal"])
        res["certificate"] = cert.to_dict()
    header, rows = control_rows(r.control)
    return Outcome(res, header, rows, asserts)


def cmd_brackets(cfg: RunConfig) -> Outcome:
    model = build_model(cfg.model)
    p = cfg.params
    q = _vec(p, "q", [0.0] * model.n)
    gv = ctl.bracket_span(model, q, int(p.get("depth", 4)))
    asserts = [_assert("bracket generating", gv.satisfied, ranks=list(gv.ranks))]
    if "expect" in p:
        asserts.append(_assert("growth vector", list(gv.ranks) == list(p["expect"]), expected=p["expect"]))
    rows = [[k + 1, r] for k, r in enumerate(gv.ranks)]
    return Outcome(gv.to_dict(), ["layer", "rank"], rows, asserts)


def cmd_steer(cfg: RunConfig) -> Outcome:
    model = build_model(cfg.model)
    p = cfg.params
    q0, q1 = _vec(p, "q0", [0.0] * model.n), _vec(p, "q1")
    words = [tuple(w) for w in p["words"]] if "words" in p else None
    plan = ctl.steer(model, q0, q1, words, ctl.SteerOptions(tol_steer=cfg.tolerances["steer"]))
    cert = ctl.steering_cost_certificate(model, plan)
    res = {"plan": plan.to_dict(), "certificate": cert}
    header, rows = control_rows(plan.control)
    return Outcome(res, header, rows,
                   [_assert("steering converged", plan.success, error=plan.endpoint_error),
                    _assert("plan replays", cert.replay_error <= 2 * cfg.tolerances["steer"],
                            error=cert.replay_error)])


def cmd_ballbox(cfg: RunConfig) -> Outcome:
    model = build_model(cfg.model)
    p = cfg.params
    q0 = _vec(p, "q0", [0.0] * model.n)
    fit = dist.ballbox_fit(model, q0, _vec(p, "direction"), p.get("scales", list(acceptance.BALLBOX_SCALES)),
                           _best_options(cfg))
    asserts = [_assert("fit", len(fit.failures) == 0, failures=fit.failures)]
    if "expect" in p:
        tol = float(p.get("expect_tolerance", 0.02))
        asserts.append(_assert("exponent", abs(fit.exponent - float(p["expect"])) <= tol,
                               value=fit.exponent, expected=p["expect"], tolerance=tol))
    return Outcome(fit.to_dict(), ["scale", "distance"], [[s, d] for s, d in zip(fit.scales, fit.distances)],
                   asserts)


def cmd_orbit(cfg: RunConfig) -> Outcome:
    p = cfg.params
    family = p.get("family", "heisenberg")
    spec = prod.SequenceSpec(float(p.get("c", 1.0)), float(p["p"]) if "p" in p else 2.0, p.get("component", "z"))
    cache = prod.DistanceCache(p.get("cache"))
    N = p.get("N", list(acceptance.ORBIT_N))
    fn = {"heisenberg": prod.orbit_profile, "engel": prod.engel_profile}.get(family)
    if fn is None:
        raise ConfigError(f"family must be 'heisenberg' or 'engel', got {family!r}")
    pr = fn(spec, N, quality=p.get("quality", "fast"), cache=cache)
    asserts = [_assert("verdict issued", pr.verdict != "inconclusive", verdict=pr.verdict)]
    if "expect" in p:
        asserts.append(_assert("verdict", pr.verdict == p["expect"], verdict=pr.verdict, expected=p["expect"]))
    return Outcome(pr.to_dict(), ["N", "partial_sum"], pr.rows(), asserts)


def cmd_spectrum(cfg: RunConfig) -> Outcome:
    p = cfg.params
    u = prod.circle_control(int(p.get("m", 64)))
    rows = prod.elusive_spectrum(p.get("N", [1, 2, 4, 8, 16]), u, int(p.get("k", 3)), p.get("amplitudes", "harmonic"))
    smin = [r.sigma_min for r in rows]
    asserts = []
    if p.get("expect_decreasing", True):
        asserts.append(_assert("sigma_min strictly decreasing", all(b < a for a, b in zip(smin, smin[1:])),
                               sigma_min=smin))
    return Outcome({"rows": rows}, ["N", "sigma_max", "sigma_min", "rank"],
                   [[r.N, r.sigma_max, r.sigma_min, r.rank] for r in rows], asserts)


def cmd_verify(cfg: RunConfig) -> Outcome:
    numbers = cfg.params.get("criteria") or sorted(acceptance.CRITERIA)
    bad = [k for k in numbers if k not in acceptance.CRITERIA]
    if bad:
        raise ConfigError(f"unknown criteria {bad}; valid: 1..{len(acceptance.CRITERIA)}")
    results = []
    for k in numbers:
        c = acceptance.run_criterion(int(k), cfg.seed)
        print(c.line(), flush=True)
        results.append(c)
    return Outcome({"criteria": [c.to_dict() for c in results]}, ["criterion", "passed"],
                   [[c.number, int(c.passed)] for c in results],
                   [_assert(f"criterion {c.number}", c.passed, title=c.title) for c in results])


COMMANDS: dict[str, tuple[Callable[[RunConfig], Outcome], set[str]]] = {
    "shoot": (cmd_shoot, {"q0", "p0", "T", "steps"}),
    "bvp": (cmd_bvp, {"q0", "q1", "p0_init", "steps", "max_iter"}),
    "distance": (cmd_distance, {"q0", "q1", "method", "m", "starts", "classify"}),
    "brackets": (cmd_brackets, {"q", "depth", "expect"}),
    "steer": (cmd_steer, {"q0", "q1", "words"}),
    "ballbox": (cmd_ballbox, {"q0", "direction", "scales", "m", "starts", "expect", "expect_tolerance"}),
    "orbit": (cmd_orbit, {"family", "component", "c", "p", "N", "quality", "cache", "expect"}),
    "spectrum": (cmd_spectrum, {"N", "m", "k", "amplitudes", "expect_decreasing"}),
    "verify": (cmd_verify, {"criteria"}),
}


# ---------------------------------------------------------------------------
# configuration

_TOL_FLAG = re.compile(r"^--tol-([a-z]+)(?:=(.*))?$")


def load_config(command: str, path: str | None, out: str | None, seed: int | None,
                tol_overrides: dict[str, float]) -> RunConfig:
    raw: dict[str, Any] = {}
    if path:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; allowed {sorted(CONFIG_KEYS)}")
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("'params' must be an object")
    allowed = COMMANDS[command][1]
    bad = set(params) - allowed
    if bad:
        raise ConfigError(f"unknown parameters for {command}: {sorted(bad)}; allowed {sorted(allowed)}")
    tols = dict(TOLERANCES)
    for k, v in {**raw.get("tolerances", {}), **tol_overrides}.items():
        if k not in TOLERANCES:
            raise ConfigError(f"unknown tolerance {k!r}; known {sorted(TOLERANCES)}")
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"tolerance {k!r} must be a number") from None
        if not (np.isfinite(v) and v > 0):
            raise ConfigError(f"tolerance {k!r} must be positive")
        tols[k] = v
    return RunConfig(command, raw.get("model", "heisenberg3"), params,
                     int(seed if seed is not None else raw.get("seed", 0)),
                     Path(out or raw.get("out", "srlab_out")), tols)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srlab", description="Sub-Riemannian geometry experiments.",
                                 epilog="Tolerance overrides: --tol-<name> X with name in "
                                        + ", ".join(sorted(TOLERANCES)) + ".  Worker processes: "
                                        "environment variable SRLAB_WORKERS.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--out", help="output directory (default srlab_out)")
    ap.add_argument("--seed", type=int, help="seed for multistarts and perturbations")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _split_tolerances(argv: list[str], ap: argparse.ArgumentParser) -> tuple[list[str], dict[str, str]]:
    rest, tols = [], {}
    i = 0
    while i < len(argv):
        m = _TOL_FLAG.match(argv[i])
        if m:
            if m.group(2) is not None:
                tols[m.group(1)] = m.group(2)
            elif i + 1 < len(argv):
                tols[m.group(1)] = argv[i + 1]
                i += 1
            else:
                ap.error(f"{argv[i]} needs a value")
        else:
            rest.append(argv[i])
        i += 1
    return rest, tols


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, tols = _split_tolerances(argv, ap)
        args = ap.parse_args(rest)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, args.out, args.seed, tols)
    except (ConfigError, OSError) as exc:
        print(f"srlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    fn = COMMANDS[cfg.command][0]
    t0 = time.time()
    try:
        outcome = fn(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"srlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        # solver failures are failed assertions, not crashes
        outcome = Outcome({"error": f"{type(exc).__name__}: {exc}"}, ["error"], [],
                          [_assert("solver completed", False, error=str(exc))])
    report = {
        "config": {"command": cfg.command, "model": cfg.model, "params": cfg.params, "seed": cfg.seed,
                   "tolerances": cfg.tolerances},
        "results": outcome.results,
        "assertions": outcome.assertions,
        "passed": all(a["passed"] for a in outcome.assertions),
        "provenance": {"srlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                       "python": platform.python_version(), "seed": cfg.seed,
                       "wall_time_s": time.time() - t0, "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t0))},
    }
    write_csv(cfg.out / f"{cfg.command}.csv", outcome.header, outcome.rows)
    write_json(cfg.out / f"{cfg.command}_report.json", report)
    for a in outcome.assertions:
        log.info("%s: %s", "PASS" if a["passed"] else "FAIL", a["name"])
    return EXIT_OK if report["passed"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
