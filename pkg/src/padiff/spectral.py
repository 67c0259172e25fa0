"""Collision operator K^(m), thresholds b_m and annealed Lyapunov exponents.

``K^(m)(x, y) = sqrt(#(x)) G^(m)(x, y) sqrt(#(y))`` on the collision support,
truncated to a box of half-width L.  Its spectral radius lambda_m gives
``b_m = m / lambda_m``.  Truncation can only lower the spectral radius (all
entries are positive), so ``m / lambda_m(L)`` is an upper bound for b_m at
every L.

The Perron vector of K is invariant under relabelling the first m-1 walkers
and under lattice symmetries of the kernel, so the operator is assembled on
orbit-averaged basis vectors.  The reduced symmetric matrix has the same
spectral radius.

The exponent ``chi_m(b)`` is the top of the spectrum of
``b diag(#) - m (1 - a^(m))`` on ``Z^{d(m-1)}``; restricting to a box with
absorbing boundary gives a lower bound.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import eigsh

from .diffwalk import DEFAULT_CAP, RelativeState, _encode, _moves, collision_counts, support_array
from .green import DifferenceGreen
from .kernels import StepDistribution, lattice_symmetries

__all__ = [
    "KOperatorMatrix",
    "ChiOperatorMatrix",
    "SpectralRadius",
    "BmResult",
    "ChiResult",
    "IntermittencyReport",
    "build_K",
    "spectral_radius",
    "bm",
    "build_chi_operator",
    "chi_eigen",
    "check_intermittency",
    "extrapolate_geometric",
    "default_boxes",
]


# ---------------------------------------------------------------------------
# numba helpers


@numba.njit(cache=True)
def _dedupe(keys):
    n = len(keys)
    size = 16
    while size < 2 * n + 16:
        size *= 2
    tab = np.full(size, -1, np.int64)
    val = np.empty(size, np.int64)
    ids = np.empty(n, np.int64)
    uniq = np.empty(n, np.int64)
    nu = 0
    mask = size - 1
    mult = np.int64(-7046029254386353131)
    for i in range(n):
        k = keys[i]
        h = ((k * mult) >> np.int64(20)) & mask
        while True:
            t = tab[h]
            if t == k:
                ids[i] = val[h]
                break
            if t == -1:
                tab[h] = k
                val[h] = nu
                uniq[nu] = k
                ids[i] = nu
                nu += 1
                break
            h = (h + 1) & mask
    return uniq[:nu], ids


@numba.njit(cache=True)
def _separable_keys(X, S, R, flip, group):
    """Canonical key of ``G(0, y - x)`` for all pairs (x in X, y in S).

    Per axis, the offsets of the m-1 coordinates form an index in
    ``[0, (2R+1)^(m-1))``; it is replaced by its mirror image when the axis law
    is symmetric, and indices are sorted within groups of identically
    distributed axes.
    """
    nx, q, d = X.shape
    n = S.shape[0]
    base = 2 * R + 1
    NU = 1
    for _ in range(q):
        NU *= base
    keys = np.empty(nx * n, np.int64)
    idx = np.empty(d, np.int64)
    for i in range(nx):
        for j in range(n):
            for k in range(d):
                c = 0
                for p in range(q):
                    c = c * base + (S[j, p, k] - X[i, p, k] + R)
                if flip[k]:
                    c2 = NU - 1 - c
                    if c2 < c:
                        c = c2
                idx[k] = c
            # insertion sort within groups (groups are contiguous runs)
            for k in range(1, d):
                v = idx[k]
                g = group[k]
                l = k - 1
                while l >= 0 and group[l] == g and idx[l] > v:
                    idx[l + 1] = idx[l]
                    l -= 1
                idx[l + 1] = v
            key = 0
            for k in range(d):
                key = key * NU + idx[k]
            keys[i * n + j] = key
    return keys


@numba.njit(cache=True)
def _general_keys(X, S, R):
    """Key of ``y - x`` up to the global sign flip (symmetric kernels)."""
    nx, q, d = X.shape
    n = S.shape[0]
    base = 2 * R + 1
    keys = np.empty(nx * n, np.int64)
    for i in range(nx):
        for j in range(n):
            c = 0
            cm = 0
            for p in range(q):
                for k in range(d):
                    z = S[j, p, k] - X[i, p, k]
                    c = c * base + (z + R)
                    cm = cm * base + (-z + R)
            keys[i * n + j] = c if c < cm else cm
    return keys


@numba.njit(cache=True)
def _accumulate(ids, gvals, sq_x, sq_y, lab, nx, n, nrows):
    out = np.zeros((nx, nrows))
    for i in range(nx):
        for j in range(n):
            out[i, lab[j]] += sq_x[i] * gvals[ids[i * n + j]] * sq_y[j]
    return out


# ---------------------------------------------------------------------------
# symmetry reduction


def _group_elements(m: int, a: StepDistribution, reduce: bool):
    q = m - 1
    if not reduce:
        return [(tuple(range(q)), np.eye(a.dim, dtype=np.int64))]
    lat = lattice_symmetries(a)
    return [(perm, g) for perm in itertools.permutations(range(q)) for g in lat]


def _orbits(S: np.ndarray, L: int, elements) -> np.ndarray:
    """Index of the smallest member of each state's orbit."""
    codes = _encode(S, L)
    orbit = np.arange(len(S))
    for perm, g in elements:
        img = np.einsum("kl,npl->npk", g, S[:, list(perm), :])
        pos = np.searchsorted(codes, _encode(img, L))
        orbit = np.minimum(orbit, pos)
    return orbit


# ---------------------------------------------------------------------------
# K operator


@dataclass
class KOperatorMatrix:
    """Box-truncated collision operator.

    ``matrix`` is the symmetric nonnegative matrix on orbit-averaged basis
    vectors (``reduced=True``) or on individual states (``reduced=False``).
    ``row_of_state[i]`` gives the matrix row containing ``states[i]``.
    """

    m: int
    L: int
    kernel: StepDistribution
    states: np.ndarray
    sharp: np.ndarray
    row_of_state: np.ndarray
    orbit_sizes: np.ndarray
    matrix: np.ndarray
    reduced: bool
    green_origin: float
    green_error: float
    origin_row: int = 0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def index(self) -> dict[tuple, int]:
        return {
            tuple(map(tuple, s.tolist())): int(r) for s, r in zip(self.states, self.row_of_state)
        }

    def row_of(self, s: RelativeState) -> int:
        return self.index[s.coords]


def build_K(
    m: int,
    a: StepDistribution,
    L: int,
    reduce: bool = True,
    cap: int = DEFAULT_CAP,
    pair_cap: float = 1.5e8,
) -> KOperatorMatrix:
    """Assemble ``K^(m)`` on the collision support inside ``[-L, L]^{d(m-1)}``.

    Green values are computed once per distinct offset ``y - x`` (translation
    invariance of the differences walk, plus the kernel's symmetries).

    Raises
    ------
    ValueError
        Kernel not symmetric, or differences walk recurrent for this (m, d).
    SupportTooLarge
        Support enumeration over the state cap.
    """
    if not a.is_symmetric:
        raise ValueError("build_K requires a symmetric kernel")
    d = a.dim
    S = support_array(m, L, d, cap)
    n = len(S)
    sharp = collision_counts(S).astype(float)
    elements = _group_elements(m, a, reduce)
    orbit = _orbits(S, L, elements)
    reps, lab, sizes = np.unique(orbit, return_inverse=True, return_counts=True)
    X = S[reps]
    nx = len(reps)
    if nx * n > pair_cap:
        raise ValueError(f"K assembly needs {nx * n:.3g} pair evaluations (cap {pair_cap:.3g}); lower L")
    R = 2 * L
    ev = DifferenceGreen(a, m, max(R, 0))
    g0, e0, div0 = ev.evaluate(np.zeros((1, m - 1, d), dtype=np.int64))
    if div0[0]:
        raise ValueError(f"differences walk with m={m} is recurrent in d={d}: G^(m) diverges")
    if ev.separable:
        laws = ev.laws
        flip = np.array([law.is_symmetric for law in laws])
        group = np.zeros(d, dtype=np.int64)
        for k in range(1, d):
            group[k] = group[k - 1] if laws[k] == laws[k - 1] else group[k - 1] + 1
        keys = _separable_keys(X, S, R, flip, group)
        uniq, ids = _dedupe(keys)
        NU = (2 * R + 1) ** (m - 1)
        idx = np.empty((len(uniq), d), dtype=np.int64)
        rem = uniq.copy()
        for k in range(d - 1, -1, -1):
            idx[:, k] = rem % NU
            rem //= NU
        gvals = np.empty(len(uniq))
        chunk = 200_000
        from .green import _integrate_with_trace

        for s in range(0, len(uniq), chunk):
            sl = slice(s, s + chunk)
            f = ev.integrand_from_index(idx[sl], "nodes")
            fe = ev.integrand_from_index(idx[sl], "edges")
            tr, _ = _integrate_with_trace(f, ev.weights, ev.nodes, ev.edges, fe, ev.checkpoints[-1:], 10.0)
            gvals[sl] = m * tr[-1][1]
    else:
        keys = _general_keys(X, S, R)
        uniq, ids = _dedupe(keys)
        base = 2 * R + 1
        digits = np.empty((len(uniq), (m - 1) * d), dtype=np.int64)
        rem = uniq.copy()
        for c in range((m - 1) * d - 1, -1, -1):
            digits[:, c] = rem % base - R
            rem //= base
        gvals, _, _ = ev.evaluate(digits.reshape(-1, m - 1, d))
    sq = np.sqrt(sharp)
    rows = _accumulate(ids, gvals, sq[reps], sq, lab, nx, n, nx)
    # R[i, j] = sum over orbit j of K(x_i, y); symmetric form on unit orbit vectors
    M = np.sqrt(sizes)[:, None] * rows / np.sqrt(sizes)[None, :]
    asym = np.abs(M - M.T).max() if nx > 1 else 0.0
    scale = np.abs(M).max()
    if asym > 1e-9 * scale:
        warnings.warn(f"K assembly asymmetry {asym:.3g}", RuntimeWarning, stacklevel=2)
    M = 0.5 * (M + M.T)
    origin_code_row = int(lab[np.searchsorted(_encode(S, L), _encode(np.zeros((1, m - 1, d), dtype=np.int64), L))[0]])
    return KOperatorMatrix(
        m=m,
        L=L,
        kernel=a,
        states=S,
        sharp=sharp,
        row_of_state=lab,
        orbit_sizes=sizes,
        matrix=M,
        reduced=reduce,
        green_origin=float(g0[0]),
        green_error=float(e0[0] / g0[0]),
        origin_row=origin_code_row,
    )


@dataclass
class SpectralRadius:
    value: float
    iterations: int
    converged: bool
    vector: np.ndarray | None = None


def spectral_radius(K, tol: float = 1e-10, max_iter: int = 100_000, start: np.ndarray | None = None) -> SpectralRadius:
    """Power iteration for a symmetric nonnegative matrix.

    Starts from the indicator of the origin row.  Stops when successive
    Rayleigh quotients differ by less than ``tol`` (relative).  On
    non-convergence the best estimate is returned with ``converged=False``.
    """
    A = K.matrix if isinstance(K, KOperatorMatrix) else K
    n = A.shape[0]
    if start is None:
        v = np.zeros(n)
        v[K.origin_row if isinstance(K, KOperatorMatrix) else 0] = 1.0
    else:
        v = np.asarray(start, dtype=float).copy()
        v /= np.linalg.norm(v)
    r_old = np.inf
    r = float(v @ (A @ v))
    for it in range(1, max_iter + 1):
        w = A @ v
        r = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return SpectralRadius(0.0, it, True, v)
        v = w / nw
        if abs(r - r_old) <= tol * abs(r):
            return SpectralRadius(r, it, True, v)
        r_old = r
    warnings.warn("power iteration did not converge", RuntimeWarning, stacklevel=2)
    return SpectralRadius(r, max_iter, False, v)


# ---------------------------------------------------------------------------
# thresholds


def extrapolate_geometric(Ls, lams) -> tuple[float, float, float, str]:
    """Fit ``lam(L) = lam_inf - c rho^L`` through the last three points.

    Returns ``(lam_inf, rho, residual, status)``.  ``residual`` is the misfit
    of the fitted curve at the fourth-last point when one exists.  When the
    increments are not positive and contracting, ``lam_inf`` falls back to
    the last value and ``status`` says why.
    """
    Ls = np.asarray(Ls, dtype=float)
    lams = np.asarray(lams, dtype=float)
    if len(Ls) < 3:
        return float(lams[-1]), math.nan, 0.0, "fewer than three boxes"
    L1, L2, L3 = Ls[-3:]
    y1, y2, y3 = lams[-3:]
    d1, d2 = y2 - y1, y3 - y2
    if d2 == 0 and d1 == 0:
        return float(y3), 0.0, 0.0, "converged"
    if not (d1 > 0 and d2 >= 0) or d2 >= d1 * (L3 - L2) / (L2 - L1):
        return float(y3), math.nan, 0.0, "increments not contracting"
    if d2 == 0:
        return float(y3), 0.0, 0.0, "converged"
    target = d2 / d1

    def h(rho):
        return (rho**L3 - rho**L2) / (rho**L2 - rho**L1) - target

    rho = brentq(h, 1e-12, 1 - 1e-12) if abs(L3 - L2 - (L2 - L1)) > 1e-12 else target ** (1 / (L3 - L2))
    c = d2 / (rho**L2 - rho**L3)
    lam_inf = y3 + c * rho**L3
    resid = 0.0
    if len(Ls) >= 4:
        pred = lam_inf - c * rho ** Ls[-4]
        resid = abs(pred - lams[-4])
    return float(lam_inf), float(rho), float(resid), "geometric"


@dataclass
class BmResult:
    """Threshold ``b_m = m / lambda_m`` with its box history.

    ``bm_upper`` (= ``m / lambda_m(L_max)``) is a rigorous upper bound up to
    Green-function error; ``value`` uses the extrapolated lambda.  The error
    bar is heuristic: no convergence rate in L is known.
    """

    m: int
    boxes: list[int]
    lambdas: list[float]
    bm_by_box: list[float]
    lambda_inf: float
    value: float
    error: float
    bm_upper: float
    green_origin: float
    green_error: float
    status: str
    iterations: list[int] = field(default_factory=list)
    sizes: list[int] = field(default_factory=list)
    note: str = "box extrapolation is a heuristic fit; error bar not certified"


def default_boxes(m: int, d: int) -> tuple[int, ...]:
    if m == 2:
        return (0,)
    if m == 3:
        return (2, 4, 6, 8) if d <= 3 else (1, 2, 3)
    return (0, 1, 2) if d <= 3 else (0, 1)


def bm(m: int, a: StepDistribution, boxes=None, tol: float = 1e-10, reduce: bool = True) -> BmResult:
    """``b_m`` over an increasing box schedule with geometric extrapolation."""
    if not a.is_symmetric:
        raise ValueError("bm requires a symmetric kernel")
    boxes = sorted(set(int(L) for L in (boxes if boxes is not None else default_boxes(m, a.dim))))
    lams, its, sizes = [], [], []
    g0 = ge = None
    for L in boxes:
        K = build_K(m, a, L, reduce=reduce)
        sr = spectral_radius(K, tol=tol)
        lams.append(sr.value)
        its.append(sr.iterations)
        sizes.append(len(K.states))
        g0, ge = K.green_origin, K.green_error
    if m == 2:
        lam_inf, resid, status = lams[-1], 0.0, "exact (single state)"
    else:
        lam_inf, _, resid, status = extrapolate_geometric(boxes, lams)
    err_lam = abs(lams[-1] - lam_inf) + resid + ge * lam_inf
    if m > 2 and len(lams) == 3:
        # no fourth box to test the fit against: allow one more increment
        err_lam += lams[-1] - lams[-2]
    if status == "increments not contracting":
        err_lam += lams[-1] - lams[-2]
    value = m / lam_inf
    return BmResult(
        m=m,
        boxes=boxes,
        lambdas=lams,
        bm_by_box=[m / x for x in lams],
        lambda_inf=lam_inf,
        value=value,
        error=m * err_lam / lam_inf**2,
        bm_upper=m / lams[-1],
        green_origin=g0,
        green_error=ge,
        status=status,
        iterations=its,
        sizes=sizes,
    )


# ---------------------------------------------------------------------------
# chi operator


@dataclass
class ChiOperatorMatrix:
    """``b diag(#) - m (1 - a^(m))`` on the full box with absorbing boundary."""

    m: int
    b: float
    L: int
    kernel: StepDistribution
    matrix: sp.csr_matrix
    sharp: np.ndarray
    origin_index: int

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _box_states(m: int, d: int, L: int) -> np.ndarray:
    B = 2 * L + 1
    n = B ** (d * (m - 1))
    grids = np.indices((B,) * (d * (m - 1)), dtype=np.int8).reshape(d * (m - 1), n).T
    return grids.astype(np.int64) - L


def _hopping(m: int, a: StepDistribution, L: int, max_states: int):
    d = a.dim
    q = m - 1
    B = 2 * L + 1
    n = B ** (d * q)
    if n > max_states:
        raise ValueError(f"chi box with {n} states exceeds max_states={max_states}")
    Y = _box_states(m, d, L)
    deltas, probs = _moves(m, a)
    weights = B ** np.arange(d * q - 1, -1, -1)
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    for delta, p in zip(deltas, probs):
        flat = delta.ravel()
        Z = Y + flat
        ok = np.all(np.abs(Z) <= L, axis=1)
        rows.append(idx[ok])
        cols.append(idx[ok] + int(flat @ weights))
        vals.append(np.full(ok.sum(), m * p))
    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    H.sum_duplicates()
    sharp = collision_counts(Y.reshape(n, q, d)).astype(float)
    origin = int(np.flatnonzero(np.all(Y == 0, axis=1))[0])
    return H, sharp, origin


_HOP_CACHE: dict = {}


def build_chi_operator(m: int, b: float, a: StepDistribution, L: int, max_states: int = 3_000_000) -> ChiOperatorMatrix:
    if not a.is_symmetric:
        raise ValueError("chi operator requires a symmetric kernel")
    if b < 0:
        raise ValueError("b must be >= 0")
    key = (m, a, L)
    if key not in _HOP_CACHE:
        if len(_HOP_CACHE) > 8:
            _HOP_CACHE.clear()
        _HOP_CACHE[key] = _hopping(m, a, L, max_states)
    H, sharp, origin = _HOP_CACHE[key]
    A = H + sp.diags(b * sharp - m)
    return ChiOperatorMatrix(m, float(b), L, a, A.tocsr(), sharp, origin)


@dataclass
class ChiResult:
    """Finite-box value of chi_m(b), a lower bound for the infinite-volume value."""

    m: int
    b: float
    L: int
    value: float
    lower_sandwich: float
    upper_sandwich: float
    method: str
    iterations: int
    converged: bool

    @property
    def in_sandwich(self) -> bool:
        eps = 1e-9 * max(1.0, abs(self.upper_sandwich))
        return self.lower_sandwich - eps <= self.value <= self.upper_sandwich + eps


def _power_chi(C: ChiOperatorMatrix, tol: float, max_iter: int):
    A = C.matrix
    shift = C.m
    v = np.zeros(C.size)
    v[C.origin_index] = 1.0
    r_old = np.inf
    r = 0.0
    for it in range(1, max_iter + 1):
        w = A @ v + shift * v
        r = float(v @ w) - shift
        v = w / np.linalg.norm(w)
        if abs(r - r_old) <= tol * max(1.0, abs(r)):
            return r, it, True
        r_old = r
    return r, max_iter, False


def chi_eigen(
    m: int,
    b: float,
    a: StepDistribution,
    L: int,
    method: str = "auto",
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> ChiResult:
    """Top eigenvalue of the box-truncated chi operator.

    ``method``: ``"power"`` (power iteration on the operator shifted by +m,
    which is entrywise nonnegative), ``"lanczos"`` (ARPACK), ``"dense"``, or
    ``"auto"`` (dense for small boxes, Lanczos otherwise).
    """
    C = build_chi_operator(m, b, a, L)
    s0 = (m * (m - 1) // 2)
    upper, lower = b * s0, b * s0 - m
    if method == "auto":
        method = "dense" if C.size <= 1500 else "lanczos"
    if method == "dense":
        val = float(np.linalg.eigvalsh(C.matrix.toarray())[-1])
        its, conv = 1, True
    elif method == "lanczos":
        v0 = np.ones(C.size)
        v0[C.origin_index] += C.size**0.5
        try:
            w = eigsh(C.matrix, k=1, which="LA", tol=tol, v0=v0, maxiter=max_iter, return_eigenvectors=False)
            val, its, conv = float(w[0]), 0, True
        except Exception:  # ARPACK non-convergence: fall back to power iteration
            val, its, conv = _power_chi(C, tol, max_iter)
            method = "power"
    elif method == "power":
        val, its, conv = _power_chi(C, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ChiResult(m, float(b), L, val, lower, upper, method, its, conv)


@dataclass
class IntermittencyReport:
    b: float
    L: int
    chis: dict[int, float]
    normalized: dict[int, float]
    monotone: bool
    order: int | None
    message: str


def check_intermittency(b: float, a: StepDistribution, m_max: int, L: int, tol: float = 1e-8, **kw) -> IntermittencyReport:
    """Compare ``chi_m(b) / m`` over m = 2..m_max on a common box.

    Finite-box values are lower bounds; negative values stand for a zero
    exponent.  The order n is the smallest m with
    ``chi_m/m < chi_{m+1}/(m+1)``, which places b in ``(b_{n+1}, b_n]``
    (with ``chi_1 = 0`` since the mean is conserved, and ``b_1 = inf``).
    """
    chis = {1: 0.0}
    chis.update({m: chi_eigen(m, b, a, L, **kw).value for m in range(2, m_max + 1)})
    norm = {m: max(c, 0.0) / m for m, c in chis.items()}
    ms = sorted(norm)
    monotone = all(norm[ms[i + 1]] >= norm[ms[i]] - tol for i in range(len(ms) - 1))
    order = None
    for i in range(len(ms) - 1):
        if norm[ms[i]] < norm[ms[i + 1]] - tol:
            order = ms[i]
            break
    if order is None:
        msg = "none detected at this L"
    else:
        msg = f"intermittent of order {order}"
    return IntermittencyReport(float(b), L, chis, norm, monotone, order, msg)
