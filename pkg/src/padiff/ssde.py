"""Interacting diffusions with quadratic noise on a finite torus.

The field solves ``dX_i = sum_j a(i,j)(X_j - X_i) dt + sqrt(b) X_i dW_i`` on
``(Z/NZ)^d`` with the periodized kernel.  One integrator step is a Strang
splitting: half an explicit Euler exchange step, an exact lognormal noise
step, then another half exchange step.  Both pieces map nonnegative fields to
nonnegative fields and are linear in X.

Replicas are stored as rows of a ``(R, N**d)`` array.  Gaussian increments
come from Philox streams keyed by (seed, stream tag, step, replica block), so a
replica's noise does not depend on how many replicas run alongside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

from .kernels import StepDistribution, reflect
from .mc_collision import BLOCK, WalkPath, _events_budget, block_rng, frozen_exp_moment, sample_walk

__all__ = [
    "TorusGeometry",
    "FieldState",
    "PalmFieldState",
    "RunResult",
    "FKResult",
    "DualityResult",
    "PalmResult",
    "flat_state",
    "step",
    "run",
    "simulate_with_noise",
    "fine_noise",
    "feynman_kac_estimate",
    "feynman_kac_field",
    "feynman_kac_check",
    "duality_check",
    "palm_run",
]

_TAG_FIELD = 21
_TAG_DUAL_X = 22
_TAG_DUAL_STAR = 23
_TAG_FK_NOISE = 24
_TAG_FK_WALK = 25
_TAG_PALM = 26
_TAG_ZETA = 27
_TAG_PALM_WALK = 28

_RESCALE_EXP = 500


@dataclass(frozen=True)
class TorusGeometry:
    """``(Z/NZ)^d`` with the periodized jump kernel.

    ``N == 1`` is allowed: every offset wraps to the single site and the
    exchange term vanishes.
    """

    kernel: StepDistribution
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        need = 2 * self.kernel.max_offset + 1
        if self.N != 1 and self.N < need:
            raise ValueError(f"torus side {self.N} too small for kernel reach (need N >= {need})")

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.dim

    @property
    def n_sites(self) -> int:
        return self.N**self.dim

    def index(self, x) -> int:
        """Flat index of site ``x`` (reduced mod N)."""
        return int(np.ravel_multi_index(tuple(int(c) % self.N for c in x), self.shape))

    def coords(self, idx: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(idx, self.shape))

    @cached_property
    def periodized(self) -> dict[tuple[int, ...], float]:
        """Offsets reduced mod N with merged probabilities."""
        out: dict[tuple[int, ...], float] = {}
        for off, p in self.kernel.support:
            key = tuple(c % self.N for c in off)
            out[key] = out.get(key, 0.0) + p
        return out

    @cached_property
    def table(self) -> tuple[np.ndarray, np.ndarray]:
        """``(nbr, probs)``: ``nbr[i, k]`` is site ``i + offset_k``."""
        offs = list(self.periodized)
        probs = np.array([self.periodized[o] for o in offs])
        grid = np.indices(self.shape).reshape(self.dim, -1).T
        nbr = np.empty((self.n_sites, len(offs)), dtype=np.int32)
        for k, o in enumerate(offs):
            moved = (grid + np.array(o)) % self.N
            nbr[:, k] = np.ravel_multi_index(tuple(moved.T), self.shape)
        return nbr, probs

    def apply_kernel(self, X: np.ndarray) -> np.ndarray:
        """``(aX)_i = sum_j a_N(i, j) X_j`` row by row."""
        nbr, probs = self.table
        X = np.atleast_2d(X)
        return np.einsum("rik,k->ri", X[:, nbr], probs)

    def reflected(self) -> "TorusGeometry":
        return TorusGeometry(reflect(self.kernel), self.N)


@numba.njit(cache=True)
def _exchange(X, nbr, probs, h):
    R, n = X.shape
    K = nbr.shape[1]
    out = np.empty_like(X)
    for r in range(R):
        for i in range(n):
            s = 0.0
            for k in range(K):
                s += probs[k] * X[r, nbr[i, k]]
            out[r, i] = (1.0 - h) * X[r, i] + h * s
    return out


@numba.njit(cache=True, fastmath=True)
def _strang(X, dW, nbr, probs, h, sb, c, tag, tag_factor):
    """Exchange half-step, lognormal noise step, exchange half-step, row by
    row; returns the new field and each row's maximum."""
    R, n = X.shape
    K = nbr.shape[1]
    out = np.empty_like(X)
    top = np.empty(R)
    tmp = np.empty(n)
    for r in range(R):
        row = X[r]
        for i in range(n):
            s = 0.0
            for k in range(K):
                s += probs[k] * row[nbr[i, k]]
            tmp[i] = (1.0 - h) * row[i] + h * s
        noise = dW[r]
        for i in range(n):
            tmp[i] *= math.exp(sb * noise[i] + c)
        if tag >= 0:
            tmp[tag] *= tag_factor
        o = out[r]
        m = 0.0
        for i in range(n):
            s = 0.0
            for k in range(K):
                s += probs[k] * tmp[nbr[i, k]]
            v = (1.0 - h) * tmp[i] + h * s
            o[i] = v
            m = max(m, v)
        top[r] = m
    return out, top


@dataclass
class FieldState:
    """Replicated field on a torus.

    ``values * 2**scale`` (scale per replica) is the field; the power-of-two
    rescaling keeps long runs inside floating range without spoiling the exact
    linearity in the initial level.  ``noise_log`` collects the increments of
    every step when not None.
    """

    geometry: TorusGeometry
    b: float
    theta: float
    values: np.ndarray
    time: float = 0.0
    steps: int = 0
    seed: int = 0
    stream: int = _TAG_FIELD
    scale: np.ndarray | None = None
    noise_log: list | None = None

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("b must be >= 0")
        self.values = np.ascontiguousarray(np.atleast_2d(np.asarray(self.values, dtype=float)))
        if self.values.shape[1] != self.geometry.n_sites:
            raise ValueError("values do not match the torus")
        if self.scale is None:
            self.scale = np.zeros(self.values.shape[0], dtype=np.int64)

    @property
    def replicas(self) -> int:
        return self.values.shape[0]

    def field(self) -> np.ndarray:
        """Field values, shape ``(R, N**d)``."""
        return np.ldexp(self.values, self.scale[:, None])

    def log_field(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.values) + self.scale[:, None] * math.log(2.0)

    def tag_site(self, t_mid: float) -> int:
        return -1


@dataclass
class PalmFieldState(FieldState):
    """Field with the size-biasing term switched on at ``zeta(T - t)``."""

    zeta: WalkPath | None = None
    horizon: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if self.zeta is None:
            raise ValueError("a Palm field needs the tagged walk")
        if self.zeta.t_max < self.horizon:
            raise ValueError("tagged walk shorter than the horizon")

    def tag_site(self, t_mid: float) -> int:
        u = max(self.horizon - t_mid, 0.0)
        return self.geometry.index(self.zeta.position_at(u))


def flat_state(geometry: TorusGeometry, b: float, theta: float, replicas: int, seed: int, **kw) -> FieldState:
    """Every site at ``theta`` in every replica."""
    vals = np.full((replicas, geometry.n_sites), float(theta))
    return FieldState(geometry, b, theta, vals, seed=seed, **kw)


def _draw_noise(seed: int, stream: int, step_index: int, replicas: int, n_sites: int, dt: float) -> np.ndarray:
    out = np.empty((replicas, n_sites))
    for blk in range((replicas + BLOCK - 1) // BLOCK):
        lo = blk * BLOCK
        hi = min(replicas, lo + BLOCK)
        rng = block_rng(seed, stream, (step_index << 20) + blk)
        out[lo:hi] = rng.standard_normal((hi - lo, n_sites))
    return out * math.sqrt(dt)


def max_dt() -> float:
    """Largest step for which the exchange half-step is a convex combination."""
    return 2.0


def step(state: FieldState, dt: float, dW: np.ndarray | None = None) -> FieldState:
    """Advance ``state`` in place by one Strang step and return it.

    ``dW`` overrides the Gaussian increments (shape ``(R, N**d)``, variance
    ``dt``); by default they are drawn from the state's stream.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt > max_dt():
        raise ValueError(f"dt={dt} exceeds the exchange stability bound {max_dt()}")
    nbr, probs = state.geometry.table
    if dW is None:
        dW = _draw_noise(state.seed, state.stream, state.steps, state.replicas, state.geometry.n_sites, dt)
    else:
        dW = np.ascontiguousarray(np.broadcast_to(dW, state.values.shape), dtype=float)
    if state.noise_log is not None:
        state.noise_log.append(dW.copy())
    tag = state.tag_site(state.time + 0.5 * dt)
    X, top = _strang(
        state.values, dW, nbr, probs, 0.5 * dt, math.sqrt(state.b), -0.5 * state.b * dt, tag, math.exp(state.b * dt)
    )
    state.values = X
    state.time += dt
    state.steps += 1
    _renormalize(state, top)
    return state


def _renormalize(state: FieldState, top: np.ndarray) -> None:
    bad = (top > 2.0**_RESCALE_EXP) | ((top < 2.0**-_RESCALE_EXP) & (top > 0))
    if bad.any():
        _, e = np.frexp(top[bad])
        state.values[bad] = np.ldexp(state.values[bad], -e[:, None])
        state.scale[bad] += e


# ---------------------------------------------------------------------------
# runs and statistics


@dataclass
class RunResult:
    """Time series from :func:`run`.

    Each entry of ``series`` maps a statistic name to an array over ``times``
    of estimates, with a matching entry in ``errors`` (standard errors across
    replicas).  Site averages are used as per-replica estimators, so
    ``m2`` estimates ``E[X_0(t)^2]`` by translation invariance.
    """

    times: np.ndarray
    series: dict[str, np.ndarray]
    errors: dict[str, np.ndarray]
    growth: tuple[float, float] | None
    covariance_sign: dict[tuple[int, ...], int]
    state: FieldState
    params: dict = field(default_factory=dict)

    def mean_ok(self, k: float = 3.0) -> bool:
        """Mean within ``k`` standard errors of theta at every output time."""
        dev = np.abs(self.series["mean"] - self.state.theta)
        se = self.errors["mean"]
        return bool(np.all(dev <= k * se + 1e-12 * self.state.theta))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf


def _shifted(geometry: TorusGeometry, X: np.ndarray, lag) -> np.ndarray:
    grid = X.reshape((-1,) + geometry.shape)
    axes = tuple(range(1, geometry.dim + 1))
    return np.roll(grid, shift=tuple(-int(c) for c in lag), axis=axes).reshape(X.shape)


STATS = ("mean", "m2", "m3", "m4", "survival", "laplace", "growth", "covariance")


def run(
    geometry: TorusGeometry,
    b: float,
    theta: float,
    t: float,
    dt: float = 0.01,
    replicas: int = 1000,
    seed: int = 0,
    every: int | None = None,
    stats=STATS,
    eps: float = 1e-3,
    probe: np.ndarray | None = None,
    lags=None,
    site: int = 0,
) -> RunResult:
    """Simulate from the flat field ``theta`` up to ``t`` and collect statistics.

    ``every`` is the number of steps between output times (about 20 outputs
    by default).  ``probe`` is the test function of the Laplace functional
    (default: indicator of ``site``).  ``growth`` is the replica-averaged
    least-squares slope of ``log X_site`` against time, with its standard
    error.
    """
    nsteps = int(round(t / dt))
    if not math.isclose(nsteps * dt, t, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t must be a multiple of dt")
    every = every or max(1, nsteps // 20)
    state = flat_state(geometry, b, theta, replicas, seed)
    stats = set(stats)
    unknown = stats - set(STATS)
    if unknown:
        raise ValueError(f"unknown statistics {sorted(unknown)}")
    if probe is None:
        probe = np.zeros(geometry.n_sites)
        probe[site] = 1.0
    lags = [tuple(int(c) for c in l) for l in (lags or [np.eye(geometry.dim, dtype=int)[0], 2 * np.eye(geometry.dim, dtype=int)[0]])]

    names = ["mean"] + [s for s in ("m2", "m3", "m4", "survival", "laplace") if s in stats]
    series: dict[str, list] = {k: [] for k in names}
    errors: dict[str, list] = {k: [] for k in names}
    times: list[float] = []
    logs: list[np.ndarray] = []
    cov_acc = {lag: [] for lag in lags}

    def record():
        X = state.field()
        times.append(state.time)
        per = {"mean": X.mean(axis=1)}
        for k in (2, 3, 4):
            if f"m{k}" in series:
                per[f"m{k}"] = (X**k).mean(axis=1)
        if "survival" in series:
            per["survival"] = (X > eps).mean(axis=1)
        if "laplace" in series:
            per["laplace"] = np.exp(-(X @ probe))
        for k, v in per.items():
            mu, se = _mean_se(v)
            series[k].append(mu)
            errors[k].append(se)
        if "growth" in stats:
            logs.append(state.log_field()[:, site])

    record()
    for n in range(1, nsteps + 1):
        step(state, dt)
        if n % every == 0 or n == nsteps:
            record()

    growth = None
    if "growth" in stats and len(times) > 2:
        ts = np.array(times[1:])
        Y = np.array(logs[1:]).T  # (R, T)
        tc = ts - ts.mean()
        slopes = (Y - Y.mean(axis=1, keepdims=True)) @ tc / (tc @ tc)
        growth = _mean_se(slopes)
    cov_sign: dict[tuple[int, ...], int] = {}
    if "covariance" in stats:
        X = state.field()
        mu = X.mean()
        for lag in lags:
            c = float((X * _shifted(geometry, X, lag)).mean() - mu * mu)
            cov_sign[lag] = int(np.sign(c))
    return RunResult(
        times=np.array(times),
        series={k: np.array(v) for k, v in series.items()},
        errors={k: np.array(v) for k, v in errors.items()},
        growth=growth,
        covariance_sign=cov_sign,
        state=state,
        params=dict(N=geometry.N, d=geometry.dim, kernel=geometry.kernel.label(), b=b, theta=theta, t=t, dt=dt, replicas=replicas, seed=seed),
    )


# ---------------------------------------------------------------------------
# Feynman-Kac replay


def fine_noise(geometry: TorusGeometry, t: float, h: float, seed: int) -> np.ndarray:
    """Brownian increments on a fine grid, shape ``(t/h, N**d)``."""
    K = int(round(t / h))
    rng = block_rng(seed, _TAG_FK_NOISE, 0)
    return rng.standard_normal((K, geometry.n_sites)) * math.sqrt(h)


def simulate_with_noise(geometry: TorusGeometry, b: float, theta: float, noise: np.ndarray, h: float, dt: float) -> np.ndarray:
    """One field driven by the given fine increments, stepped with ``dt``.

    ``dt`` must be a multiple of ``h``; increments are summed over each step.
    Returns the field at the end, shape ``(N**d,)``.
    """
    r = int(round(dt / h))
    if not math.isclose(r * h, dt, rel_tol=1e-9):
        raise ValueError("dt must be a multiple of the noise resolution")
    K = noise.shape[0]
    if K % r:
        raise ValueError("noise length is not a whole number of steps")
    agg = noise.reshape(K // r, r, -1).sum(axis=1)
    st = flat_state(geometry, b, theta, 1, 0)
    for dW in agg:
        step(st, dt, dW[None, :])
    return st.field()[0]


@numba.njit(cache=True)
def _fk_walks(C, stride, h, t, start, nbr, cum, hold, ustep, sb):
    nw, E = hold.shape
    K = (C.shape[1] - 1) // stride
    H = h * stride
    out = np.empty(nw)
    exhausted = False
    for w in range(nw):
        x = start
        u0 = 0.0
        S = 0.0
        e = 0
        while True:
            u1 = u0 + hold[w, e]
            last = u1 >= t
            if last:
                klo = 0
            else:
                klo = int(math.floor((t - u1) / H)) + 1
            khi = int(math.floor((t - u0) / H))
            if khi > K - 1:
                khi = K - 1
            if khi >= klo:
                S += C[x, (khi + 1) * stride] - C[x, klo * stride]
            if last:
                break
            u = ustep[w, e]
            s = 0
            while s < cum.shape[0] - 1 and cum[s] <= u:
                s += 1
            x = nbr[x, s]
            u0 = u1
            e += 1
            if e >= E:
                exhausted = True
                break
        out[w] = sb * S
    return out, exhausted


@dataclass
class FKEstimate:
    value: float
    se: float
    value_coarse: float
    walks: int


def feynman_kac_estimate(
    geometry: TorusGeometry,
    b: float,
    theta: float,
    noise: np.ndarray,
    h: float,
    site: int,
    walks: int,
    seed: int,
    block: int = 1 << 16,
) -> FKEstimate:
    """Walk average ``theta e^{-bt/2} E_i exp(sqrt(b) int dW_{xi(t-s)}(s))``.

    The stochastic integral is evaluated on the recorded increments: the
    increment of fine step k is collected at the walk's position at time
    ``t - k h``.  ``value_coarse`` repeats the estimate with the same walks
    and the increments merged in pairs (resolution ``2h``).
    """
    if noise is None:
        raise ValueError("no recorded noise")
    K = noise.shape[0]
    t = K * h
    if K == 0:
        return FKEstimate(float(theta), 0.0, float(theta), walks)
    C = np.zeros((geometry.n_sites, K + 1))
    C[:, 1:] = np.cumsum(noise, axis=0).T
    nbr, probs = geometry.table
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    pre = theta * math.exp(-0.5 * b * t)
    sb = math.sqrt(b)
    vals, vals2 = [], []
    for blk in range((walks + block - 1) // block):
        nw = min(block, walks - blk * block)
        attempt = 0
        while True:
            rng = block_rng(seed, _TAG_FK_WALK, blk, attempt)
            E = _events_budget(t, attempt)
            hold = rng.standard_exponential((nw, E))
            us = rng.random((nw, E))
            a1, ex1 = _fk_walks(C, 1, h, t, site, nbr, cum, hold, us, sb)
            if not ex1:
                break
            attempt += 1
        vals.append(a1)
        if K % 2 == 0:
            a2, _ = _fk_walks(C, 2, h, t, site, nbr, cum, hold, us, sb)
            vals2.append(a2)
    e1 = np.exp(np.concatenate(vals))
    mu, se = _mean_se(e1) if walks > 1 else (float(e1[0]), 0.0)
    coarse = float(np.exp(np.concatenate(vals2)).mean()) if vals2 else mu
    return FKEstimate(pre * mu, pre * se, pre * coarse, walks)


@numba.njit(cache=True, fastmath=True)
def _fk_walks_all(CT, stride, h, t, trans, offs, N, cum, hold, ustep, sb, acc, acc2):
    """Every walk is replayed from every start site (translated copies);
    exp(sb * integral) and its square are added into ``acc`` and ``acc2``.

    ``CT[k, x]`` is the noise prefix sum at site x before fine step k and
    ``trans[D, i]`` the flat index of site i shifted by flat displacement D.
    """
    nw, E = hold.shape
    n = trans.shape[1]
    d = offs.shape[1]
    K = (CT.shape[0] - 1) // stride
    H = h * stride
    D = np.zeros(d, np.int64)
    S = np.empty(n)
    for w in range(nw):
        for k in range(d):
            D[k] = 0
        for i in range(n):
            S[i] = 0.0
        u0 = 0.0
        e = 0
        while True:
            u1 = u0 + hold[w, e]
            last = u1 >= t
            klo = 0 if last else int(math.floor((t - u1) / H)) + 1
            khi = min(int(math.floor((t - u0) / H)), K - 1)
            if khi >= klo:
                flat = 0
                for k in range(d):
                    flat = flat * N + D[k]
                row = trans[flat]
                hi = CT[(khi + 1) * stride]
                lo = CT[klo * stride]
                for i in range(n):
                    j = row[i]
                    S[i] += hi[j] - lo[j]
            if last:
                break
            u = ustep[w, e]
            s = 0
            while s < cum.shape[0] - 1 and cum[s] <= u:
                s += 1
            for k in range(d):
                D[k] = (D[k] + offs[s, k]) % N
            u0 = u1
            e += 1
            if e >= E:
                return True
        for i in range(n):
            v = math.exp(sb * S[i])
            acc[i] += v
            acc2[i] += v * v
    return False


@dataclass
class FKField:
    """Walk representation evaluated at every site."""

    value: np.ndarray
    se: np.ndarray
    value_coarse: np.ndarray
    walks: int


def feynman_kac_field(
    geometry: TorusGeometry,
    b: float,
    theta: float,
    noise: np.ndarray,
    h: float,
    walks: int,
    seed: int,
    block: int = 1 << 14,
) -> FKField:
    """:func:`feynman_kac_estimate` at all sites at once.

    Each sampled walk is used from every start site; estimates at different
    sites are therefore correlated, each one is unbiased.
    """
    K = noise.shape[0]
    t = K * h
    n = geometry.n_sites
    if K == 0:
        v = np.full(n, float(theta))
        return FKField(v, np.zeros(n), v.copy(), walks)
    CT = np.zeros((K + 1, n))
    CT[1:] = np.cumsum(noise, axis=0)
    offs = np.array(list(geometry.periodized), dtype=np.int64).reshape(-1, geometry.dim)
    probs = np.array(list(geometry.periodized.values()))
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    sites = np.indices(geometry.shape).reshape(geometry.dim, -1).T
    trans = np.empty((n, n), dtype=np.int32)
    for D in range(n):
        moved = (sites + sites[D]) % geometry.N
        trans[D] = np.ravel_multi_index(tuple(moved.T), geometry.shape)
    sb = math.sqrt(b)
    strides = (1, 2) if K % 2 == 0 else (1,)
    acc = {s: (np.zeros(n), np.zeros(n)) for s in strides}
    for blk in range((walks + block - 1) // block):
        nw = min(block, walks - blk * block)
        attempt = 0
        while True:
            rng = block_rng(seed, _TAG_FK_WALK, blk, attempt)
            E = _events_budget(t, attempt)
            hold = rng.standard_exponential((nw, E))
            us = rng.random((nw, E))
            trial = {s: (np.zeros(n), np.zeros(n)) for s in strides}
            if not any(_fk_walks_all(CT, s, h, t, trans, offs, geometry.N, cum, hold, us, sb, *trial[s]) for s in strides):
                break
            attempt += 1
        for s in strides:
            acc[s][0][:] += trial[s][0]
            acc[s][1][:] += trial[s][1]
    pre = theta * math.exp(-0.5 * b * t)
    m1 = acc[1][0] / walks
    var = np.maximum(acc[1][1] / walks - m1**2, 0.0) * walks / max(walks - 1, 1)
    coarse = acc[strides[-1]][0] / walks
    return FKField(pre * m1, pre * np.sqrt(var / walks), pre * coarse, walks)


def _zscore(diff: float, se: float) -> float:
    if se == 0:
        return 0.0 if abs(diff) < 1e-12 else math.copysign(math.inf, diff)
    return diff / se


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


@dataclass
class FKResult:
    """Simulated field versus its walk representation, over all sites.

    For step sizes ``dts = (dt, dt/2)``: ``discrepancy[k]`` is the root mean
    square over sites of ``X_dt(t) - FK``.  ``budget[k]`` adds three walk
    standard errors, the integrator bias (Richardson estimate from the two
    step sizes, first order) and the noise-resolution term ``resolution``.
    ``simulated`` and ``fk`` are also reported at ``site``.
    """

    t: float
    site: int
    dts: tuple[float, float]
    simulated: tuple[float, float]
    fk: float
    fk_se: float
    noise_floor: float
    resolution: float
    discrepancy: tuple[float, float]
    budget: tuple[float, float]

    @property
    def within_budget(self) -> bool:
        return all(d <= bud for d, bud in zip(self.discrepancy, self.budget))

    @property
    def ratio(self) -> float:
        return self.discrepancy[1] / self.discrepancy[0] if self.discrepancy[0] > 0 else 0.0

    @property
    def halving(self) -> bool:
        """The discrepancy at ``dt/2`` is at most half the one at ``dt``, up to
        the statistical part of the budget."""
        slack = 3 * self.noise_floor + self.resolution
        return self.discrepancy[1] <= 0.5 * self.discrepancy[0] + slack


def feynman_kac_check(
    geometry: TorusGeometry,
    b: float = 0.5,
    theta: float = 1.0,
    t: float = 2.0,
    dt: float = 0.08,
    site: int = 0,
    walks: int = 500_000,
    seed: int = 0,
    fine: int = 64,
) -> FKResult:
    """Replay one noise realization through the integrator at ``dt`` and
    ``dt/2`` and through the walk representation at resolution ``dt/fine``."""
    if fine % 4:
        raise ValueError("fine must be a multiple of 4")
    h = dt / fine
    noise = fine_noise(geometry, t, h, seed)
    x1 = simulate_with_noise(geometry, b, theta, noise, h, dt)
    x2 = simulate_with_noise(geometry, b, theta, noise, h, dt / 2)
    fk = feynman_kac_field(geometry, b, theta, noise, h, walks, seed)
    floor = _rms(fk.se)
    res = _rms(fk.value - fk.value_coarse)
    step_diff = _rms(x1 - x2)
    disc = (_rms(x1 - fk.value), _rms(x2 - fk.value))
    budget = (3 * floor + 2 * step_diff + res, 3 * floor + step_diff + res)
    return FKResult(
        t, site, (dt, dt / 2), (float(x1[site]), float(x2[site])), float(fk.value[site]), float(fk.se[site]),
        floor, res, disc, budget,
    )


# ---------------------------------------------------------------------------
# self-duality


@dataclass
class DualityResult:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float

    @property
    def z(self) -> float:
        return _zscore(self.lhs - self.rhs, math.hypot(self.lhs_se, self.rhs_se))


def _as_field(geometry: TorusGeometry, f) -> np.ndarray:
    if isinstance(f, dict):
        out = np.zeros(geometry.n_sites)
        for x, v in f.items():
            out[geometry.index(x)] += v
        return out
    f = np.asarray(f, dtype=float).reshape(-1)
    if f.shape[0] != geometry.n_sites:
        raise ValueError("test function does not match the torus")
    return f


def duality_check(
    geometry: TorusGeometry,
    theta: float,
    f,
    t: float,
    replicas: int,
    seed: int,
    b: float = 0.5,
    dt: float = 0.01,
) -> DualityResult:
    """Both sides of ``E exp(-<X(t), f>) = E exp(-<theta, X*(t)>)``.

    X starts flat at ``theta`` with kernel a; X* starts at ``f`` with the
    reflected kernel.  The two sides use independent noise.  On the left the
    translates of ``f`` are averaged within each replica (same law by
    translation invariance).
    """
    f = _as_field(geometry, f)
    if np.any(f < 0):
        raise ValueError("f must be nonnegative")
    nsteps = int(round(t / dt))
    if nsteps == 0 or not f.any():
        v = math.exp(-theta * f.sum())
        return DualityResult(v, 0.0, v, 0.0)
    X = flat_state(geometry, b, theta, replicas, seed, stream=_TAG_DUAL_X)
    dual = geometry.reflected()
    Y = FieldState(dual, b, theta, np.tile(f, (replicas, 1)), seed=seed, stream=_TAG_DUAL_STAR)
    for _ in range(nsteps):
        step(X, t / nsteps)
        step(Y, t / nsteps)
    FX = X.field()
    support = np.nonzero(f)[0]
    pair = np.zeros_like(FX)
    for s in support:
        pair += f[s] * _shifted(geometry, FX, geometry.coords(s))
    lhs = np.exp(-pair).mean(axis=1)
    rhs = np.exp(-theta * Y.field().sum(axis=1))
    return DualityResult(*_mean_se(lhs), *_mean_se(rhs))


# ---------------------------------------------------------------------------
# Palm field


@dataclass
class PalmResult:
    """Palm mean at ``site`` against the frozen-walk collision moment."""

    b: float
    T: float
    site: int
    palm_mean: float
    palm_se: float
    collision_moment: float
    collision_se: float
    zeta: WalkPath

    @property
    def z(self) -> float:
        return _zscore(self.palm_mean - self.collision_moment, math.hypot(self.palm_se, self.collision_se))


def palm_run(
    geometry: TorusGeometry,
    b: float,
    theta: float,
    T: float,
    dt: float = 0.02,
    replicas: int = 4000,
    seed: int = 0,
    site: int = 0,
    walk_replicas: int = 200_000,
    zeta: WalkPath | None = None,
) -> PalmResult:
    """Size-biased field with tagged walk zeta (drawn from ``seed`` unless
    given), started flat, observed at ``site`` at time ``T``.

    The collision side is ``theta E_site exp(b int_0^T 1{xi = zeta})`` for a
    random walk xi on the same torus.
    """
    if zeta is None:
        zeta = sample_walk(geometry.kernel, T, int(block_rng(seed, _TAG_ZETA, 0).integers(2**62)), torus=geometry.N)
    nsteps = int(round(T / dt))
    vals = np.full((replicas, geometry.n_sites), float(theta))
    st = PalmFieldState(geometry, b, theta, vals, seed=seed, stream=_TAG_PALM, zeta=zeta, horizon=T)
    for _ in range(nsteps):
        step(st, T / nsteps)
    pm, pse = _mean_se(st.field()[:, site])
    if b == 0:
        cm, cse = theta, 0.0
    else:
        em = frozen_exp_moment(
            zeta, geometry.kernel, b, T, walk_replicas, int(block_rng(seed, _TAG_PALM_WALK, 0).integers(2**62)),
            start=geometry.coords(site), torus=geometry.N,
        )
        cm, cse = theta * em.estimate, theta * em.se
    return PalmResult(b, T, site, pm, pse, cm, cse, zeta)
