"""Command-line interface: ``padiff <subcommand> [options]``.

Parameter precedence is command-line flag, then ``--config`` file (plain JSON
object, or a run manifest whose ``params`` are reused), then built-in
defaults.  Each run writes its CSV files and ``manifest.json`` under ``--out``.

Exit codes: 0 success, 1 invalid input or failed verification, 2 internal
error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .diffwalk import SupportTooLarge, support_count
from .kernels import load_kernel, symmetrize
from .manifest import OutputDir, RunManifest

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# parameter parsing helpers


def floats(text) -> list[float]:
    """``"0.5,1"`` or ``"0:2:0.5"`` (start:stop:step, stop included)."""
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    text = str(text).strip()
    if text.count(":") == 2:
        lo, hi, st = (float(x) for x in text.split(":"))
        if st <= 0:
            raise UsageError("grid step must be positive")
        n = int(math.floor((hi - lo) / st + 1e-9)) + 1
        return [round(lo + k * st, 12) for k in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def ints(text) -> list[int]:
    if isinstance(text, (int, float)):
        return [int(text)]
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def sites(text, d: int) -> list[tuple[int, ...]]:
    """``"1,0,0;0,1,0"`` -> list of d-tuples."""
    out = []
    for part in str(text).split(";"):
        c = tuple(int(x) for x in part.split(",") if x.strip())
        if len(c) != d:
            raise UsageError(f"site {part!r} is not {d}-dimensional")
        out.append(c)
    return out


def weighted_sites(text, d: int) -> dict[tuple[int, ...], float]:
    """``"0,0,0:1;1,0,0:0.5"`` -> {site: weight}."""
    out = {}
    for part in str(text).split(";"):
        if not part.strip():
            continue
        site, _, w = part.partition(":")
        (x,) = sites(site, d)
        out[x] = out.get(x, 0.0) + float(w or 1.0)
    return out


# ---------------------------------------------------------------------------
# subcommand table: name -> (help, {param: (default, type, help)})

KERNEL = ("srw3", str, "kernel name (srw3, srw(4), drift(0.7)) or kernel file")
DIM = (None, int, "dimension for kernels given without one")
SEEDLESS = {"green", "bm", "chi", "support-count", "phase-diagram"}

COMMANDS: dict[str, tuple[str, dict]] = {
    "green": (
        "Green function at the origin (m=2) or G^(m)(0,z) of the differences walk",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "m": (2, int, "number of walkers"),
            "z": (None, str, "offsets z_1;...;z_{m-1}, each comma separated (default: origin)"),
        },
    ),
    "bm": (
        "critical value b_m from the collision operator over a box schedule",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "m": (3, int, "moment order"),
            "boxes": (None, str, "comma-separated box half-widths (default schedule by m, d)"),
        },
    ),
    "chi": (
        "annealed Lyapunov exponent chi_m(b) on a finite box",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "m": (2, int, "moment order"),
            "b": ("0:3:0.25", str, "b values: list or start:stop:step"),
            "L": (4, int, "box half-width"),
            "method": ("auto", str, "auto, dense, lanczos or power"),
        },
    ),
    "support-count": (
        "number of differences-walk states with a collision inside the box",
        {"m": (3, int, "walkers"), "L": (1, int, "box half-width"), "dim": (1, int, "lattice dimension")},
    ),
    "mc-moment": (
        "Monte Carlo E exp(b T^(m)(t)) for m independent walks",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "m": (2, int, "walkers"),
            "b": ("0.5", str, "b values"),
            "t": ("10", str, "horizons"),
            "replicas": (10_000, int, "replicas per point"),
            "torus": (None, int, "run on (Z/NZ)^d instead of Z^d"),
        },
    ),
    "mc-quenched": (
        "quenched E exp(b T(xi, xi')) with xi frozen by --xi-seed",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "b": ("1.4", str, "b values"),
            "t": ("20,40,80", str, "horizons"),
            "replicas": (10_000, int, "replicas over xi'"),
            "xi_seed": (0, int, "seed of the frozen walk"),
            "torus": (None, int, "torus side"),
        },
    ),
    "simulate": (
        "simulate the interacting diffusions on a torus and emit statistics",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "torus": (8, int, "torus side N"),
            "b": (0.5, float, "diffusion parameter"),
            "theta": (1.0, float, "initial level"),
            "t": (2.0, float, "horizon"),
            "dt": (0.01, float, "time step"),
            "replicas": (1000, int, "replicas"),
            "stats": ("mean,m2,m3,m4,survival,laplace,growth,covariance", str, "statistics to collect"),
            "every": (None, int, "steps between output times"),
        },
    ),
    "duality-check": (
        "compare both sides of the self-duality relation",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "torus": (8, int, "torus side N"),
            "b": (0.5, float, "diffusion parameter"),
            "theta": (1.0, float, "initial level of X"),
            "t": (2.0, float, "horizon"),
            "dt": (0.01, float, "time step"),
            "replicas": (4000, int, "replicas per side"),
            "f": (None, str, "test function site:weight;... (default: origin:1)"),
        },
    ),
    "palm": (
        "size-biased field against the frozen-walk collision moment",
        {
            "kernel": KERNEL,
            "dim": DIM,
            "torus": (8, int, "torus side N"),
            "b": (0.5, float, "diffusion parameter"),
            "theta": (1.0, float, "initial level"),
            "T": ("4", str, "horizons"),
            "dt": (0.02, float, "time step"),
            "replicas": (4000, int, "Brownian replicas"),
            "walk_replicas": (200_000, int, "walk replicas for the collision side"),
        },
    ),
    "phase-diagram": (
        "thresholds and chi_m(b)/m curves per dimension, as CSV panels",
        {
            "kernel": ("srw", str, "kernel family taking a dimension"),
            "dims": ("1,2,3", str, "dimensions"),
            "ms": ("2,3,4", str, "moment orders"),
            "b": ("0:3:0.25", str, "b grid"),
            "max_states": (20_000, int, "state cap for the chi boxes"),
        },
    ),
    "verify": (
        "run the acceptance battery",
        {"suite": ("fast", str, "fast or full"), "only": (None, str, "comma-separated check ids")},
    ),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="padiff", description="Thresholds, exponents and simulations for interacting diffusions with quadratic noise.")
    p.add_argument("--version", action="version", version=f"padiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_, params) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        for key, (default, typ, h) in params.items():
            flag = "--" + key.replace("_", "-")
            sp.add_argument(flag, dest=key, type=typ, default=None, help=f"{h} (default: {default})")
        sp.add_argument("--seed", type=int, default=None, help="master seed (default: 0)")
        sp.add_argument("--threads", type=int, default=None, help="numba worker threads")
        sp.add_argument("--out", default=None, help="output directory (default: padiff-out/<subcommand>)")
        sp.add_argument("--config", default=None, help="JSON config or manifest to take parameters from")
    return p


def effective_params(command: str, args: argparse.Namespace) -> tuple[dict, int]:
    """Merge defaults, config file and flags (flags win)."""
    _, spec = COMMANDS[command]
    params = {k: v[0] for k, v in spec.items()}
    seed = 0
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if "params" in cfg and "subcommand" in cfg:
            if cfg["subcommand"] != command:
                raise UsageError(f"manifest is for {cfg['subcommand']!r}, not {command!r}")
            seed = cfg.get("seed") if cfg.get("seed") is not None else seed
            cfg = cfg["params"]
        else:
            seed = cfg.pop("seed", seed)
        unknown = set(cfg) - set(params)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        params.update(cfg)
    for k in spec:
        v = getattr(args, k)
        if v is not None:
            params[k] = v
    if args.seed is not None:
        seed = args.seed
    return params, int(seed)


def _kernel(params):
    return load_kernel(params["kernel"], params.get("dim"))


# ---------------------------------------------------------------------------
# subcommand bodies: each returns (summary dict, exit code)


def cmd_green(P, seed, out: OutputDir):
    from .green import green_differences, green_scalar

    a = _kernel(P)
    m = P["m"]
    if m == 2 and P["z"] is None:
        g = green_scalar(symmetrize(a))
        z = "origin"
    else:
        if not a.is_symmetric:
            raise UsageError("G^(m) for m >= 3 needs a symmetric kernel")
        zs = sites(P["z"], a.dim) if P["z"] else None
        if zs is not None and len(zs) != m - 1:
            raise UsageError(f"need {m - 1} offsets for m={m}")
        g = green_differences(m, a, zs)
        z = P["z"] or "origin"
    out.write_csv(
        "green.csv",
        ["kernel", "m", "z", "value", "error", "method", "flag"],
        [[a.label(), m, z, g.value, g.estimated_error, g.method, g.flag]],
        [f"note: {g.note}"] if g.note else [],
    )
    out.write_csv("green_trace.csv", ["resolution", "value"], g.refinement_trace)
    print(f"G = {g.value:.10g} +- {g.estimated_error:.2g} ({g.method}, {g.flag})")
    return {"value": g.value, "error": g.estimated_error, "flag": g.flag}, EXIT_OK


def cmd_bm(P, seed, out):
    from .green import b2
    from .spectral import bm

    a = _kernel(P)
    if not a.is_symmetric:
        raise UsageError("b_m needs a symmetric kernel")
    if b2(a).recurrent:
        print("recurrent kernel: b_m = 0 for all m (extinction for all b)")
        out.write_csv("bm.csv", ["m", "L", "states", "lambda", "b_m"], [])
        return {"recurrent": True}, EXIT_OK
    r = bm(P["m"], a, ints(P["boxes"]) if P["boxes"] else None)
    out.write_csv(
        "bm.csv",
        ["m", "L", "states", "lambda", "b_m_upper"],
        [[r.m, L, n, lam, bb] for L, n, lam, bb in zip(r.boxes, r.sizes, r.lambdas, r.bm_by_box)],
        [f"extrapolated b_m = {r.value!r} +- {r.error!r} ({r.status})", r.note],
    )
    print(f"b_{r.m} = {r.value:.6f} +- {r.error:.2g}   (upper bound {r.bm_upper:.6f}; {r.status})")
    return {"value": r.value, "error": r.error, "upper": r.bm_upper, "status": r.status}, EXIT_OK


def cmd_chi(P, seed, out):
    from .spectral import chi_eigen

    a = _kernel(P)
    m, L = P["m"], P["L"]
    rows = []
    for b in floats(P["b"]):
        r = chi_eigen(m, b, a, L, method=P["method"])
        rows.append([b, r.value, r.value / m, r.lower_sandwich, r.upper_sandwich, r.method, r.converged])
        print(f"b={b:<8g} chi_{m}={r.value:.6f}  chi/m={r.value / m:.6f}")
    out.write_csv("chi.csv", ["b", "chi", "chi_over_m", "lower", "upper", "method", "converged"], rows, [f"m={m} L={L} kernel={a.label()}"])
    return {"points": len(rows)}, EXIT_OK


def cmd_support_count(P, seed, out):
    n = support_count(P["m"], P["L"], P["dim"])
    out.write_csv("support_count.csv", ["m", "L", "dim", "count"], [[P["m"], P["L"], P["dim"], n]])
    print(n)
    return {"count": n}, EXIT_OK


def _em_row(r):
    return [r.b, r.t, r.log_estimate, r.se_log, r.tail_share, r.replicas]


EM_COLUMNS = ["b", "t", "estimate_log", "se_log", "tail_share", "replicas"]


def cmd_mc_moment(P, seed, out):
    from .mc_collision import collision_batch, exp_moment_from_samples

    a = _kernel(P)
    ts = sorted(floats(P["t"]))
    bs = floats(P["b"])
    if any(b < 0 for b in bs):
        raise UsageError("b must be >= 0")
    T, _ = collision_batch(P["m"], a, ts, P["replicas"], seed, P["torus"])
    rows = []
    for b in bs:
        for i, t in enumerate(ts):
            r = exp_moment_from_samples(T[:, i], b, t)
            rows.append(_em_row(r))
            print(f"b={b:<6g} t={t:<6g} log E = {r.log_estimate:.6f} +- {r.se_log:.3g}  tail={r.tail_share:.3f}")
    out.write_csv("mc_moment.csv", EM_COLUMNS, rows, ["se_log is nan when the top 1% of samples carry more than half the estimate"])
    return {"points": len(rows)}, EXIT_OK


def cmd_mc_quenched(P, seed, out):
    from .mc_collision import frozen_collision_batch, exp_moment_from_samples, sample_walk

    a = _kernel(P)
    ts = sorted(floats(P["t"]))
    xi = sample_walk(a, ts[-1], P["xi_seed"], torus=P["torus"])
    T = frozen_collision_batch(xi, a, ts, P["replicas"], seed, torus=P["torus"])
    rows = []
    for b in floats(P["b"]):
        for i, t in enumerate(ts):
            r = exp_moment_from_samples(T[:, i], b, t)
            rows.append(_em_row(r) + [P["xi_seed"]])
            print(f"b={b:<6g} t={t:<6g} log E = {r.log_estimate:.6f} +- {r.se_log:.3g}")
    out.write_csv(
        "mc_quenched.csv", EM_COLUMNS + ["xi_seed"], rows,
        ["diagnostic: boundedness in t for fixed b is a trend, not a test"],
    )
    return {"points": len(rows)}, EXIT_OK


def _geometry(P):
    from .ssde import TorusGeometry

    return TorusGeometry(_kernel(P), P["torus"])


def cmd_simulate(P, seed, out):
    from .ssde import run

    g = _geometry(P)
    stats = tuple(s.strip() for s in P["stats"].split(",") if s.strip())
    r = run(g, P["b"], P["theta"], P["t"], P["dt"], P["replicas"], seed, every=P["every"], stats=stats)
    names = list(r.series)
    cols = ["time"] + [c for n in names for c in (n, n + "_se")]
    rows = [[t] + [v for n in names for v in (r.series[n][i], r.errors[n][i])] for i, t in enumerate(r.times)]
    notes = []
    summary = {"mean_within_3se": r.mean_ok()}
    if r.growth:
        notes.append(f"growth rate of log X_0: {r.growth[0]!r} +- {r.growth[1]!r}")
        summary["growth"] = list(r.growth)
    if r.covariance_sign:
        notes.append("covariance sign at lags: " + "; ".join(f"{k}: {v:+d}" for k, v in r.covariance_sign.items()))
        summary["covariance_sign"] = {",".join(map(str, k)): v for k, v in r.covariance_sign.items()}
    out.write_csv("simulate.csv", cols, rows, notes)
    print(f"mean at t={r.times[-1]:g}: {r.series['mean'][-1]:.6f} +- {r.errors['mean'][-1]:.2g}")
    for n in notes:
        print(n)
    return summary, EXIT_OK


def cmd_duality(P, seed, out):
    from .ssde import duality_check

    g = _geometry(P)
    f = weighted_sites(P["f"], g.dim) if P["f"] else {(0,) * g.dim: 1.0}
    r = duality_check(g, P["theta"], f, P["t"], P["replicas"], seed, b=P["b"], dt=P["dt"])
    out.write_csv("duality.csv", ["lhs", "lhs_se", "rhs", "rhs_se", "z"], [[r.lhs, r.lhs_se, r.rhs, r.rhs_se, r.z]])
    print(f"lhs={r.lhs:.6f}+-{r.lhs_se:.2g} rhs={r.rhs:.6f}+-{r.rhs_se:.2g} z={r.z:.3f}")
    return {"z": r.z}, EXIT_OK


def cmd_palm(P, seed, out):
    from .ssde import palm_run

    g = _geometry(P)
    rows = []
    for T in floats(P["T"]):
        r = palm_run(g, P["b"], P["theta"], T, P["dt"], P["replicas"], seed, walk_replicas=P["walk_replicas"])
        rows.append([T, r.palm_mean, r.palm_se, r.collision_moment, r.collision_se, r.z])
        print(f"T={T:<6g} palm={r.palm_mean:.5f}+-{r.palm_se:.2g} collision={r.collision_moment:.5f}+-{r.collision_se:.2g} z={r.z:.2f}")
    out.write_csv(
        "palm.csv", ["T", "palm_mean", "palm_se", "collision_moment", "collision_se", "z"], rows,
        ["the tagged walk is redrawn per T from the seed; growth in T is a diagnostic only"],
    )
    return {"points": len(rows)}, EXIT_OK


def _chi_box(m: int, d: int, cap: int) -> int:
    L = 0
    while (2 * (L + 1) + 1) ** (d * (m - 1)) <= cap:
        L += 1
    return L


def cmd_phase_diagram(P, seed, out):
    from .green import b2, green_differences
    from .spectral import bm, chi_eigen

    index = {"kernel": P["kernel"], "panels": []}
    grid = floats(P["b"])
    ms = ints(P["ms"])
    for d in ints(P["dims"]):
        a = load_kernel(P["kernel"], d)
        t2 = b2(a)
        entry = {"dim": d, "kernel": a.label()}
        if t2.recurrent:
            entry.update(regime="extinction for all b", recurrent=True, thresholds={})
            out.write_csv(f"thresholds_d{d}.csv", ["m", "b_m", "error", "(m-1)b_m", "upper_2/G"], [], ["recurrent: b_m = 0 for all m"])
            entry["files"] = [f"thresholds_d{d}.csv"]
            index["panels"].append(entry)
            print(f"d={d}: recurrent, extinction for all b")
            continue
        thr = {2: (t2.value, t2.error, 2.0 / (t2.green.value))}
        for m in ms:
            if m == 2:
                continue
            r = bm(m, a)
            thr[m] = (r.value, r.error, 2.0 / green_differences(m, a).value)
        rows = [[m, v, e, (m - 1) * v, up] for m, (v, e, up) in sorted(thr.items())]
        vals = [thr[m][0] for m in sorted(thr)]
        checks = {
            "decreasing": bool(all(x >= y for x, y in zip(vals, vals[1:]))),
            "(m-1)b_m<2": bool(all((m - 1) * thr[m][0] < 2 for m in thr)),
        }
        out.write_csv(f"thresholds_d{d}.csv", ["m", "b_m", "error", "(m-1)b_m", "upper_2/G"], rows)
        curves = []
        for m in ms:
            L = _chi_box(m, d, P["max_states"])
            for b in grid:
                c = chi_eigen(m, b, a, L)
                curves.append([m, L, b, c.value / m, max(c.value, 0.0) / m])
        out.write_csv(
            f"chi_d{d}.csv", ["m", "L", "b", "chi_over_m_box", "chi_over_m_clipped"], curves,
            ["box values are lower bounds; clipped column replaces negatives by 0"],
        )
        b2v = thr[2][0]
        entry.update(
            recurrent=False,
            thresholds={str(m): {"value": v, "error": e, "upper_2/G": up} for m, (v, e, up) in thr.items()},
            checks=checks,
            regimes=[
                {"label": "I", "b_range": [0.0, b2v], "note": "finite second moment of the equilibrium"},
                {"label": "II", "b_range": [b2v, None], "note": "upper boundary unknown: b_* not computed"},
                {"label": "III", "b_range": [None, None], "note": "diagnostic only: b_* not computed"},
            ],
            files=[f"thresholds_d{d}.csv", f"chi_d{d}.csv"],
        )
        index["panels"].append(entry)
        print(f"d={d}: " + ", ".join(f"b{m}={v:.5f}" for m, (v, _, _) in sorted(thr.items())) + f"  checks={checks}")
    out.write_json("phase_diagram.json", index)
    return {"dims": ints(P["dims"])}, EXIT_OK


def cmd_verify(P, seed, out):
    from .checks import SUITES, run_suite

    if P["suite"] not in SUITES:
        raise UsageError(f"suite must be one of {sorted(SUITES)}")
    only = set(P["only"].split(",")) if P["only"] else None
    results = run_suite(P["suite"], only, progress=lambda r: print(r.line(), flush=True))
    out.write_csv(
        "verify.csv", ["id", "status", "name", "tolerance"],
        [[r.id, r.status, r.name, r.tolerance] for r in results],
    )
    out.write_json("verify_report.json", {"suite": P["suite"], "checks": [r.as_dict() for r in results]})
    failed = [r.id for r in results if not r.passed]
    print("all checks passed" if not failed else f"FAILED: {', '.join(failed)}")
    return {"failed": failed}, EXIT_OK if not failed else EXIT_INVALID


HANDLERS = {
    "green": cmd_green,
    "bm": cmd_bm,
    "chi": cmd_chi,
    "support-count": cmd_support_count,
    "mc-moment": cmd_mc_moment,
    "mc-quenched": cmd_mc_quenched,
    "simulate": cmd_simulate,
    "duality-check": cmd_duality,
    "palm": cmd_palm,
    "phase-diagram": cmd_phase_diagram,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            import numba

            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        params, seed = effective_params(args.command, args)
        manifest = RunManifest(args.command, params, None if args.command in SEEDLESS else seed)
        out = OutputDir(args.out or Path("padiff-out") / args.command, manifest)
        summary, code = HANDLERS[args.command](params, seed, out)
        manifest.summary = summary
        out.finish()
        return code
    except (UsageError, SupportTooLarge, ValueError) as exc:
        print(f"padiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # anything else is a bug or resource failure
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
