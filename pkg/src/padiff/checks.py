"""Acceptance battery shared by ``padiff verify`` and the test suite.

Every check returns a :class:`CheckResult` carrying the measured values, the
tolerance it was judged against and its runtime.  Checks never raise on a
failed comparison; exceptions inside a check are reported as failures.
"""

from __future__ import annotations

import functools
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .green import b2, green_differences, green_scalar, return_time_tail
from .kernels import StepDistribution, load_kernel, srw
from .mc_collision import chi_mc, collision_batch, exp_moment
from .spectral import bm, chi_eigen
from .ssde import TorusGeometry, duality_check, feynman_kac_check, palm_run, run

__all__ = ["CheckResult", "CHECKS", "SUITES", "run_suite", "watson_green", "test_kernels"]

DATA = Path(__file__).resolve().parent / "data"


@dataclass
class CheckResult:
    id: str
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerance: str = ""
    runtime: float = 0.0
    detail: str = ""

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def line(self) -> str:
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"{self.id} {self.status} {self.name} [{vals}] tol: {self.tolerance} ({self.runtime:.1f}s)"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status
        d["measured"] = {k: _plain(v) for k, v in self.measured.items()}
        return d


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _timed(cid: str, name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(**kw) -> CheckResult:
            t0 = time.perf_counter()
            try:
                passed, measured, tol = fn(**kw)
                res = CheckResult(cid, name, bool(passed), measured, tol)
            except Exception as exc:  # a crashing check is a failing check
                res = CheckResult(cid, name, False, {"error": repr(exc)}, "", detail=traceback.format_exc())
            res.runtime = time.perf_counter() - t0
            return res

        inner.check_id = cid
        return inner

    return wrap


def watson_green() -> float:
    """Closed form of the simple-cubic Green function at the origin."""
    g = math.gamma
    return math.sqrt(6) / (32 * math.pi**3) * g(1 / 24) * g(5 / 24) * g(7 / 24) * g(11 / 24)


def test_kernels() -> dict[str, StepDistribution]:
    """Transient kernels the monotonicity check runs on."""
    return {"srw3": srw(3), "range2_d3": load_kernel(str(DATA / "range2_d3.kernel"))}


@functools.lru_cache(maxsize=None)
def _bm_cached(m: int, a: StepDistribution):
    return bm(m, a)


@functools.lru_cache(maxsize=None)
def _b2_cached(a: StepDistribution):
    return b2(a)


# ---------------------------------------------------------------------------
# thresholds


@_timed("C1", "b2 of SRW d=3 against the Watson closed form")
def check_b2_watson(green_kwargs: dict | None = None, tol: float = 2e-4, max_seconds: float = 10.0):
    t0 = time.perf_counter()
    res = b2(srw(3), **(green_kwargs or {}))
    elapsed = time.perf_counter() - t0
    oracle = 2.0 / watson_green()
    dev = abs(res.value - oracle)
    return (
        dev <= tol and elapsed < max_seconds,
        {"b2": res.value, "oracle": oracle, "deviation": dev, "seconds": elapsed},
        f"|b2 - oracle| <= {tol:g}, runtime < {max_seconds:g}s",
    )


@_timed("C2", "spectral b_2 equals Green b_2 for SRW d=3,4,5")
def check_spectral_green(dims=(3, 4, 5), tol: float = 1e-3):
    rel = []
    for d in dims:
        g = _b2_cached(srw(d)).value
        s = bm(2, srw(d)).value
        rel.append(abs(s - g) / g)
    return max(rel) <= tol, {"dims": list(dims), "relative_deviation": rel}, f"relative deviation <= {tol:g}"


@_timed("C3", "bound sandwich for b_3, b_4 on SRW d=3")
def check_sandwich():
    a = srw(3)
    g2 = _b2_cached(a)
    lo2 = g2.value + g2.error
    ok = True
    meas: dict = {"b2": g2.value}
    for m in (3, 4):
        r = _bm_cached(m, a)
        G = green_differences(m, a)
        upper = 2.0 / G.value
        upper_lo = 2.0 / (G.value + G.estimated_error)
        val_lo = (m - 1) * (r.value - r.error)
        val_hi = (m - 1) * (r.value + r.error)
        ok &= lo2 <= val_lo and val_hi <= upper_lo and upper < 2.0
        meas[f"b{m}"] = r.value
        meas[f"b{m}_err"] = r.error
        meas[f"(m-1)b{m}"] = (m - 1) * r.value
        meas[f"2/G{m}"] = upper
    b3 = _bm_cached(3, a)
    strict = g2.value - g2.error > b3.value + b3.error
    meas["b2>b3"] = strict
    return ok and strict, meas, "b2 <= (m-1)b_m <= 2/G^(m)(0,0) < 2 with error bars clear of both bounds; b2 > b3"


@_timed("C4", "b2 >= b3 >= b4 and lambda_m(L) nondecreasing")
def check_monotone(kernels: dict | None = None):
    kernels = kernels or test_kernels()
    ok = True
    meas = {}
    for name, a in kernels.items():
        vals = [_b2_cached(a).value] + [_bm_cached(m, a).value for m in (3, 4)]
        ok &= vals[0] >= vals[1] >= vals[2]
        for m in (3, 4):
            lams = _bm_cached(m, a).lambdas
            ok &= all(np.diff(lams) >= -1e-12 * max(lams))
        meas[name] = vals
    return ok, meas, "b2 >= b3 >= b4 on each kernel; lambda_m(L) nondecreasing on each schedule"


# ---------------------------------------------------------------------------
# chi


@_timed("C5", "chi_m sandwich, large-b asymptote, chi_m(0) under box refinement")
def check_chi(b_grid=(0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 10.0, 100.0), boxes={2: 6, 3: 2}, zero_boxes=(4, 8, 15)):
    a = srw(3)
    ok = True
    meas = {}
    for m, L in boxes.items():
        res = [chi_eigen(m, b, a, L) for b in b_grid]
        inside = all(r.in_sandwich for r in res)
        big = next(r for r in res if r.b == 100.0)
        ratio = big.value / (big.b * m)
        asym = abs(ratio - (m - 1) / 2) <= 0.05 * (m - 1) / 2
        nonpos = res[0].value <= 0
        ok &= inside and asym and nonpos
        meas[f"m{m}_sandwich"] = inside
        meas[f"m{m}_chi/(bm)@100"] = ratio
        meas[f"m{m}_chi(0)"] = res[0].value
    zeros = [chi_eigen(2, 0.0, a, L).value for L in zero_boxes]
    conv = all(z <= 0 for z in zeros) and all(np.diff(zeros) >= 0) and abs(zeros[-1]) <= 1e-2
    meas["chi2(0) by L"] = zeros
    return ok and conv, meas, "lower <= chi <= upper; |chi/(bm) - (m-1)/2| <= 5%; chi(0) <= 0 and -> 0 within 1e-2"


# ---------------------------------------------------------------------------
# Monte Carlo


@_timed("C6", "MC collision time of two walks against G/2")
def check_mc_green(replicas: int = 100_000, t: float = 200.0, seed: int = 20240601, max_seconds: float = 60.0):
    a = srw(3)
    t0 = time.perf_counter()
    T, _ = collision_batch(2, a, [t], replicas, seed)
    elapsed = time.perf_counter() - t0
    x = T[:, 0]
    mean, se = float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))
    # the difference walk runs at rate 2, so the missing part is half the
    # rate-1 return-time integral beyond 2t
    tail = 0.5 * return_time_tail(a, 2 * t)
    target = green_scalar(a).value / 2
    z = (mean + tail - target) / se
    return (
        abs(z) <= 3 and elapsed < max_seconds,
        {"E[T(t)]": mean, "se": se, "tail": tail, "G/2": target, "z": z, "z_uncorrected": (mean - target) / se, "seconds": elapsed},
        f"|E[T(t)] + tail - G/2| <= 3 SE, runtime < {max_seconds:g}s",
    )


@functools.lru_cache(maxsize=None)
def _moment_run(b: float = 0.3, t: float = 2.0, N: int = 8, replicas: int = 10_000, seed: int = 7, dt: float = 0.01):
    return run(TorusGeometry(srw(3), N), b, 1.0, t, dt, replicas, seed, stats=("mean", "m2"))


@_timed("C7", "second moment of the field against the collision exponential moment")
def check_moment_identity(b: float = 0.3, t: float = 2.0, N: int = 8, replicas: int = 10_000, mc_replicas: int = 200_000, seed: int = 7):
    r = _moment_run(b, t, N, replicas, seed)
    m2, se2 = float(r.series["m2"][-1]), float(r.errors["m2"][-1])
    em = exp_moment(2, srw(3), b, t, mc_replicas, seed + 1, torus=N)
    z = (m2 - em.estimate) / math.hypot(se2, em.se)
    return abs(z) <= 3, {"E[X0^2]": m2, "se": se2, "exp_moment": em.estimate, "se_mc": em.se, "z": z}, "|z| <= 3"


MEAN_CONFIGS = (
    ("srw3", 8, 0.3, 2.0, 10_000),
    ("srw3", 8, 1.0, 2.0, 2000),
    ("srw2", 8, 0.5, 2.0, 2000),
    ("srw1", 16, 0.2, 4.0, 2000),
)


@_timed("C8", "mean preservation at every output time")
def check_mean(configs=MEAN_CONFIGS, seed: int = 7):
    ok = True
    worst = {}
    for name, N, b, t, R in configs:
        if (name, N, b, t, R) == ("srw3", 8, 0.3, 2.0, 10_000):
            r = _moment_run(b, t, N, R, seed)
        else:
            r = run(TorusGeometry(load_kernel(name), N), b, 1.0, t, 0.01, R, seed + 11, stats=("mean",))
        # t = 0 is exact (zero SE), so it is left out of the ratio
        dev = np.abs(r.series["mean"][1:] - 1.0) / r.errors["mean"][1:]
        ok &= r.mean_ok()
        worst[f"{name},N={N},b={b}"] = float(dev.max())
    return ok, {"max |mean-theta|/SE": worst}, "|mean - theta| <= 3 SE at all output times"


@_timed("C9", "self-duality of Laplace functionals")
def check_duality(replicas: int = 4000, seed: int = 5):
    g = TorusGeometry(srw(3), 8)
    r = duality_check(g, 1.0, {(0, 0, 0): 1.0}, 2.0, replicas, seed, b=0.5)
    return abs(r.z) <= 3, {"lhs": r.lhs, "lhs_se": r.lhs_se, "rhs": r.rhs, "rhs_se": r.rhs_se, "z": r.z}, "|z| <= 3"


@_timed("C10", "Feynman-Kac replay: within budget and halving with dt")
def check_feynman_kac(seed: int = 0, walks: int = 500_000):
    g = TorusGeometry(srw(3), 8)
    r = feynman_kac_check(g, b=0.5, theta=1.0, t=2.0, dt=0.08, walks=walks, seed=seed)
    return (
        r.within_budget and r.halving,
        {"dts": list(r.dts), "discrepancy": list(r.discrepancy), "budget": list(r.budget), "ratio": r.ratio, "noise_floor": r.noise_floor},
        "discrepancy <= budget at both dt; discrepancy(dt/2) <= discrepancy(dt)/2 + 3 floor + resolution",
    )


@_timed("C11", "Palm mean against frozen-walk collision moment")
def check_palm(b: float = 0.5, T: float = 4.0, replicas: int = 4000, seed: int = 3):
    g = TorusGeometry(srw(3), 8)
    r = palm_run(g, b, 1.0, T, replicas=replicas, seed=seed)
    return (
        abs(r.z) <= 3,
        {"palm_mean": r.palm_mean, "palm_se": r.palm_se, "collision": r.collision_moment, "collision_se": r.collision_se, "z": r.z},
        "|z| <= 3",
    )


@_timed("C12", "recurrent regime signs for SRW d=1")
def check_recurrent(seed: int = 4):
    a = srw(1)
    flag = b2(a).flag
    c = chi_mc(2, a, 0.2, [25, 50, 75, 100], 20_000, seed)
    r = run(TorusGeometry(a, 16), 8.0, 1.0, 10.0, 0.01, 200, seed, stats=("mean", "growth"))
    g, gse = r.growth
    ok = flag == "RECURRENT" and c.ci_low > 0 and g + 3 * gse < 0
    return ok, {"flag": flag, "chi_mc": c.slope, "chi_ci_low": c.ci_low, "growth": g, "growth_se": gse}, "recurrence flag; chi slope CI above 0; growth + 3 SE < 0"


@_timed("NC", "negative control: coarse Green grid must fail C1")
def check_negative_control():
    tampered = check_b2_watson(green_kwargs={"refinements": (2, 3, 4)})
    return not tampered.passed, {"tampered_b2": tampered.measured.get("b2"), "tampered_status": tampered.status}, "tampered C1 reports FAIL"


CHECKS = {
    f.check_id: f
    for f in (
        check_b2_watson,
        check_spectral_green,
        check_sandwich,
        check_monotone,
        check_chi,
        check_mc_green,
        check_moment_identity,
        check_mean,
        check_duality,
        check_feynman_kac,
        check_palm,
        check_recurrent,
        check_negative_control,
    )
}

SUITES = {
    "fast": ("C1", "C2", "C5", "C12", "NC"),
    "full": tuple(CHECKS),
}


def run_suite(name: str, only=None, progress=None) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    out = []
    for cid in SUITES[name]:
        if only and cid not in only:
            continue
        res = CHECKS[cid]()
        if progress:
            progress(res)
        out.append(res)
    return out
