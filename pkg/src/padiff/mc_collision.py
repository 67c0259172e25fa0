"""Monte Carlo for the collision local time of independent random walks.

Simulation is event-driven: between two jumps of the superposed rate-m
Poisson clock the number of coinciding pairs is constant, so the collision
local time ``T^(m)(t) = sum_{k<l} int_0^t 1{xi_k(s) = xi_l(s)} ds`` is
accumulated exactly.

Randomness comes from Philox streams keyed by (seed, purpose, block), where a
block is a fixed run of ``BLOCK`` consecutive replicas.  Replica r therefore
always sees the same numbers, whatever the total number of replicas.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .kernels import StepDistribution

__all__ = [
    "WalkPath",
    "CollisionRecord",
    "ExpMomentResult",
    "ChiMcResult",
    "sample_walk",
    "collision_time",
    "simulate_collisions",
    "collision_batch",
    "exp_moment",
    "exp_moment_from_samples",
    "chi_mc",
    "frozen_collision_batch",
    "frozen_exp_moment",
    "quenched_exp_moment",
    "BLOCK",
]

BLOCK = 1024
_TAG_COLLIDE = 11
_TAG_WALK = 12
_TAG_FROZEN = 13


def block_rng(seed: int, tag: int, block: int, attempt: int = 0) -> np.random.Generator:
    """Counter-based generator for one replica block."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, int(block), int(attempt)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# single paths


@dataclass(frozen=True)
class WalkPath:
    """One walker on ``[0, t_max]``: jump times (strictly increasing), the
    offsets taken at those times, and the start site."""

    times: np.ndarray
    offsets: np.ndarray
    start: np.ndarray
    t_max: float
    seed: int | None = None
    torus: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        start = np.asarray(self.start, dtype=np.int64).reshape(-1)
        offsets = np.asarray(self.offsets, dtype=np.int64).reshape(len(times), len(start))
        if len(times) and (np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > self.t_max):
            raise ValueError("jump times must be strictly increasing inside [0, t_max]")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "start", start)

    @property
    def positions(self) -> np.ndarray:
        """Site after each jump, with the start prepended; shape (J+1, d)."""
        pos = np.vstack([self.start[None, :], self.start[None, :] + np.cumsum(self.offsets, axis=0)])
        if self.torus:
            pos = pos % self.torus
        return pos

    def position_at(self, s: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, s, side="right"))
        return self.positions[k]


def sample_walk(a: StepDistribution, t_max: float, seed: int, start=None, torus: int | None = None) -> WalkPath:
    """Rate-1 walk with jump law ``a`` on ``[0, t_max]``."""
    rng = block_rng(seed, _TAG_WALK, 0)
    n = rng.poisson(t_max)
    times = np.sort(rng.uniform(0.0, t_max, n))
    idx = rng.choice(len(a.probs), size=n, p=a.probs_array)
    start = np.zeros(a.dim, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    if torus:
        start = start % torus
    return WalkPath(times, a.offsets_array[idx], start, float(t_max), seed, torus)


@dataclass
class CollisionRecord:
    """Collision local time of m walkers up to ``t``, total and per pair."""

    m: int
    t: float
    T_total: float
    pairs: dict[tuple[int, int], float] = field(default_factory=dict)
    seed: int | None = None
    replica: int | None = None


def collision_time(paths: list[WalkPath], t: float, subset=None) -> CollisionRecord:
    """Exact collision local time of given paths on ``[0, t]``.

    ``subset`` restricts the pair sum to pairs inside that index set.
    """
    m = len(paths)
    if any(p.t_max < t for p in paths):
        raise ValueError("paths do not cover the horizon")
    events = sorted({0.0, float(t)} | {float(s) for p in paths for s in p.times if s < t})
    idx = list(range(m)) if subset is None else sorted(subset)
    pairs = {(k, l): 0.0 for k, l in itertools.combinations(idx, 2)}
    for s0, s1 in zip(events[:-1], events[1:]):
        pos = [tuple(p.position_at(s0)) for p in paths]
        for (k, l) in pairs:
            if pos[k] == pos[l]:
                pairs[(k, l)] += s1 - s0
    return CollisionRecord(m, float(t), float(sum(pairs.values())), pairs)


# ---------------------------------------------------------------------------
# batched m-walker simulation


@numba.njit(cache=True)
def _collide_block(m, start, offs, cum, horizons, torus, hold, uwalk, ustep, want_pairs):
    nb, K = hold.shape
    d = offs.shape[1]
    H = horizons.shape[0]
    npairs = m * (m - 1) // 2
    T = np.zeros((nb, H))
    P = np.zeros((nb, npairs))
    end_pos = np.zeros((nb, m, d), np.int64)
    exhausted = np.zeros(nb, np.bool_)
    pos = np.empty((m, d), np.int64)
    same = np.zeros(npairs, np.bool_)
    for r in range(nb):
        for i in range(m):
            for k in range(d):
                pos[i, k] = start[i, k]
        sharp = 0
        pi = 0
        for i in range(m):
            for j in range(i + 1, m):
                eq = True
                for k in range(d):
                    if pos[i, k] != pos[j, k]:
                        eq = False
                        break
                same[pi] = eq
                if eq:
                    sharp += 1
                pi += 1
        t = 0.0
        acc = 0.0
        h = 0
        e = 0
        tlast = horizons[H - 1]
        while True:
            if e >= K:
                exhausted[r] = True
                break
            tn = t + hold[r, e]
            while h < H and horizons[h] <= tn:
                T[r, h] = acc + sharp * (horizons[h] - t)
                h += 1
            if want_pairs:
                upto = tn if tn < tlast else tlast
                for p in range(npairs):
                    if same[p]:
                        P[r, p] += upto - t
            if h == H:
                break
            acc += sharp * (tn - t)
            t = tn
            w = int(uwalk[r, e] * m)
            if w >= m:
                w = m - 1
            u = ustep[r, e]
            s = 0
            while s < cum.shape[0] - 1 and cum[s] <= u:
                s += 1
            # remove coincidences of walker w, move, add them back
            for k in range(d):
                v = pos[w, k] + offs[s, k]
                if torus > 0:
                    v = v % torus
                pos[w, k] = v
            sharp = 0
            pi = 0
            for i in range(m):
                for j in range(i + 1, m):
                    if i == w or j == w:
                        eq = True
                        for k in range(d):
                            if pos[i, k] != pos[j, k]:
                                eq = False
                                break
                        same[pi] = eq
                    if same[pi]:
                        sharp += 1
                    pi += 1
            e += 1
        for i in range(m):
            for k in range(d):
                end_pos[r, i, k] = pos[i, k]
    return T, P, exhausted, end_pos


def _events_budget(rate_t: float, attempt: int) -> int:
    return int((rate_t + 10.0 * math.sqrt(rate_t) + 32) * (2**attempt))


def collision_batch(
    m: int,
    a: StepDistribution,
    horizons,
    replicas: int,
    seed: int,
    torus: int | None = None,
    start=None,
    first_replica: int = 0,
    want_pairs: bool = False,
):
    """Collision local times of ``replicas`` independent m-walker systems.

    Returns ``(T, pairs)`` with ``T`` of shape ``(replicas, len(horizons))``;
    ``pairs`` (per-pair times at the last horizon) is None unless requested.
    Walkers start at ``start`` (shape (m, d)), by default all at the origin.
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if np.any(np.diff(horizons) < 0) or horizons[0] < 0:
        raise ValueError("horizons must be nonnegative and sorted")
    d = a.dim
    start = np.zeros((m, d), dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64).reshape(m, d)
    if torus:
        start = start % torus
    offs = a.offsets_array
    cum = np.cumsum(a.probs_array)
    cum[-1] = 1.0
    tmax = float(horizons[-1])
    out_T = np.empty((replicas, len(horizons)))
    out_P = np.empty((replicas, m * (m - 1) // 2)) if want_pairs else None
    b0 = first_replica // BLOCK
    b1 = (first_replica + replicas - 1) // BLOCK
    for blk in range(b0, b1 + 1):
        attempt = 0
        while True:
            rng = block_rng(seed, _TAG_COLLIDE, blk, attempt)
            K = _events_budget(m * tmax, attempt)
            hold = rng.standard_exponential((BLOCK, K)) / m
            uw = rng.random((BLOCK, K))
            us = rng.random((BLOCK, K))
            T, P, ex, _ = _collide_block(m, start, offs, cum, horizons, int(torus or 0), hold, uw, us, want_pairs)
            if not ex.any():
                break
            attempt += 1
        lo = max(first_replica, blk * BLOCK)
        hi = min(first_replica + replicas, (blk + 1) * BLOCK)
        out_T[lo - first_replica : hi - first_replica] = T[lo - blk * BLOCK : hi - blk * BLOCK]
        if want_pairs:
            out_P[lo - first_replica : hi - first_replica] = P[lo - blk * BLOCK : hi - blk * BLOCK]
    return out_T, out_P


def simulate_collisions(
    m: int, a: StepDistribution, t: float, seed: int, replica: int = 0, torus: int | None = None, start=None
) -> CollisionRecord:
    """Collision record of a single replica, keyed by (seed, replica)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    T, P = collision_batch(m, a, [t], 1, seed, torus, start, first_replica=replica, want_pairs=True)
    pairs = {pq: float(v) for pq, v in zip(itertools.combinations(range(m), 2), P[0])}
    return CollisionRecord(m, float(t), float(T[0, 0]), pairs, seed, replica)


# ---------------------------------------------------------------------------
# exponential moments


@dataclass
class ExpMomentResult:
    """Estimate of ``E exp(b T)``.

    ``se`` and ``se_log`` are NaN (CI refused) when the top 1% of samples
    carry more than half of the estimate.  ``se_log_batch`` is the spread of
    per-batch log-estimates; it stays defined under the alarm but is itself
    unreliable there.
    """

    b: float
    t: float
    estimate: float
    log_estimate: float
    se: float
    se_log: float
    tail_share: float
    replicas: int
    ci_refused: bool
    mean_T: float
    se_T: float
    se_log_batch: float = math.nan


def exp_moment_from_samples(x: np.ndarray, b: float, t: float, batches: int = 32, alarm: float = 0.5) -> ExpMomentResult:
    """Log-sum-exp estimate of ``E exp(b T)`` from samples ``x = T``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    y = b * x
    M = float(y.max()) if n else 0.0
    w = np.exp(y - M)
    S = w.sum()
    log_est = M + math.log(S / n)
    nb = min(batches, n)
    usable = (n // nb) * nb
    bmeans = w[:usable].reshape(nb, -1).mean(axis=1)
    se_scaled = bmeans.std(ddof=1) / math.sqrt(nb) if nb > 1 else math.inf
    mean_scaled = S / n
    k = max(1, int(math.ceil(0.01 * n)))
    top = np.partition(w, n - k)[n - k :].sum() if n > k else S
    tail = float(top / S) if S > 0 else 0.0
    refused = tail > alarm
    if b == 0:
        se_scaled, tail, refused = 0.0, 0.01 if n >= 100 else 1.0 / n, False
    se_log = se_scaled / mean_scaled if mean_scaled > 0 else math.inf
    with np.errstate(divide="ignore"):
        blog = np.log(bmeans)
    se_log_batch = float(blog.std(ddof=1) / math.sqrt(nb)) if nb > 1 else math.inf
    est = math.exp(log_est) if log_est < 700 else math.inf
    se = est * se_log if math.isfinite(est) else math.inf
    if refused:
        se, se_log = math.nan, math.nan
    return ExpMomentResult(
        b=float(b),
        t=float(t),
        estimate=est,
        log_estimate=log_est,
        se=se,
        se_log=se_log,
        tail_share=tail,
        replicas=n,
        ci_refused=refused,
        mean_T=float(x.mean()),
        se_T=float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf,
        se_log_batch=0.0 if b == 0 else se_log_batch,
    )


def exp_moment(
    m: int,
    a: StepDistribution,
    b: float,
    t: float,
    replicas: int,
    seed: int,
    torus: int | None = None,
    batches: int = 32,
) -> ExpMomentResult:
    """``E exp(b T^(m)(t))`` for m walkers started together at the origin."""
    if b < 0:
        raise ValueError("b must be >= 0")
    T, _ = collision_batch(m, a, [t], replicas, seed, torus)
    return exp_moment_from_samples(T[:, 0], b, t, batches)


@dataclass
class ChiMcResult:
    """Least-squares growth rate of ``log E exp(b T(t))`` over a time grid."""

    slope: float
    ci_low: float
    ci_high: float
    intercept: float
    points: list[ExpMomentResult]
    alarm: bool


def _slope(ts, ys, ses):
    ts = np.asarray(ts, float)
    ys = np.asarray(ys, float)
    ses = np.asarray(ses, float)
    if not np.all(np.isfinite(ses) & (ses > 0)):
        raise ValueError("per-point standard errors must be finite and positive")
    w = 1.0 / np.maximum(ses, 1e-300) ** 2
    tb = np.sum(w * ts) / w.sum()
    yb = np.sum(w * ys) / w.sum()
    sxx = np.sum(w * (ts - tb) ** 2)
    slope = np.sum(w * (ts - tb) * (ys - yb)) / sxx
    se = math.sqrt(1.0 / sxx)
    return float(slope), float(yb - slope * tb), se


def chi_mc(
    m: int,
    a: StepDistribution,
    b: float,
    t_grid,
    replicas: int,
    seed: int,
    torus: int | None = None,
    z: float = 1.96,
    widen: float = 3.0,
) -> ChiMcResult:
    """Slope of ``log E exp(b T^(m)(t))`` against t.

    All horizons share the same paths.  The CI treats points as independent.
    When any point trips the heavy-tail alarm its batch-spread standard error
    is used instead and the CI is widened by ``widen``.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    if len(t_grid) < 2:
        raise ValueError("t_grid needs at least two points")
    T, _ = collision_batch(m, a, t_grid, replicas, seed, torus)
    pts = [exp_moment_from_samples(T[:, i], b, t) for i, t in enumerate(t_grid)]
    alarm = any(p.ci_refused for p in pts)
    ys = [p.log_estimate for p in pts]
    ses = [p.se_log if math.isfinite(p.se_log) else p.se_log_batch for p in pts]
    if b == 0:
        return ChiMcResult(0.0, 0.0, 0.0, 0.0, pts, False)
    slope, icpt, se = _slope(t_grid, ys, ses)
    half = z * se * (widen if alarm else 1.0)
    return ChiMcResult(slope, slope - half, slope + half, icpt, pts, alarm)


# ---------------------------------------------------------------------------
# one random walker against a frozen path


@numba.njit(cache=True)
def _frozen_block(ftimes, fpos, start, offs, cum, horizons, torus, hold, ustep):
    nb, K = hold.shape
    d = offs.shape[1]
    H = horizons.shape[0]
    nf = ftimes.shape[0]
    T = np.zeros((nb, H))
    exhausted = np.zeros(nb, np.bool_)
    x = np.empty(d, np.int64)
    for r in range(nb):
        for k in range(d):
            x[k] = start[k]
        fi = 0
        t = 0.0
        acc = 0.0
        h = 0
        e = 0
        tj = hold[r, 0]
        while True:
            tf = ftimes[fi] if fi < nf else np.inf
            tn = tj if tj < tf else tf
            same = True
            for k in range(d):
                if x[k] != fpos[fi, k]:
                    same = False
                    break
            c = 1.0 if same else 0.0
            while h < H and horizons[h] <= tn:
                T[r, h] = acc + c * (horizons[h] - t)
                h += 1
            if h == H:
                break
            acc += c * (tn - t)
            t = tn
            if tj <= tf:
                u = ustep[r, e]
                s = 0
                while s < cum.shape[0] - 1 and cum[s] <= u:
                    s += 1
                for k in range(d):
                    v = x[k] + offs[s, k]
                    if torus > 0:
                        v = v % torus
                    x[k] = v
                e += 1
                if e >= K:
                    exhausted[r] = True
                    break
                tj = t + hold[r, e]
            else:
                fi += 1
    return T, exhausted


def frozen_collision_batch(
    frozen: WalkPath,
    a: StepDistribution,
    horizons,
    replicas: int,
    seed: int,
    start=None,
    torus: int | None = None,
    first_replica: int = 0,
    tag: int = _TAG_FROZEN,
) -> np.ndarray:
    """``int_0^t 1{xi(s) = frozen(s)} ds`` for independent rate-1 walks xi.

    Returns shape ``(replicas, len(horizons))``.
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if horizons[-1] > frozen.t_max:
        raise ValueError("frozen path shorter than the horizon")
    torus = torus if torus is not None else frozen.torus
    d = a.dim
    start = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    if torus:
        start = start % torus
    fpos = frozen.positions
    ftimes = frozen.times
    offs = a.offsets_array
    cum = np.cumsum(a.probs_array)
    cum[-1] = 1.0
    out = np.empty((replicas, len(horizons)))
    b0 = first_replica // BLOCK
    b1 = (first_replica + replicas - 1) // BLOCK
    for blk in range(b0, b1 + 1):
        attempt = 0
        while True:
            rng = block_rng(seed, tag, blk, attempt)
            K = _events_budget(float(horizons[-1]), attempt)
            hold = rng.standard_exponential((BLOCK, K))
            us = rng.random((BLOCK, K))
            T, ex = _frozen_block(ftimes, fpos, start, offs, cum, horizons, int(torus or 0), hold, us)
            if not ex.any():
                break
            attempt += 1
        lo = max(first_replica, blk * BLOCK)
        hi = min(first_replica + replicas, (blk + 1) * BLOCK)
        out[lo - first_replica : hi - first_replica] = T[lo - blk * BLOCK : hi - blk * BLOCK]
    return out


def frozen_exp_moment(
    frozen: WalkPath,
    a: StepDistribution,
    b: float,
    t: float,
    replicas: int,
    seed: int,
    start=None,
    torus: int | None = None,
) -> ExpMomentResult:
    """``E^xi exp(b int_0^t 1{xi(s) = frozen(s)} ds)`` with xi started at ``start``."""
    T = frozen_collision_batch(frozen, a, [t], replicas, seed, start, torus)
    return exp_moment_from_samples(T[:, 0], b, t)


def quenched_exp_moment(
    a: StepDistribution,
    b: float,
    t: float,
    xi_seed: int,
    replicas: int,
    seed: int,
    torus: int | None = None,
) -> ExpMomentResult:
    """Quenched moment ``E^{xi'} exp(b T(xi, xi'))`` with xi fixed by ``xi_seed``.

    Both walks start at the origin.  Averaging over many ``xi_seed`` values
    recovers the annealed moment (tower property).
    """
    xi = sample_walk(a, t, xi_seed, torus=torus)
    return frozen_exp_moment(xi, a, b, t, replicas, seed, None, torus)
