"""Lattice Green functions and the critical value b_2.

Two independent routes are provided:

* ``quadrature``: the Fourier integral ``(2 pi)^{-d} int dlam / (1 - A(lam))``
  on a tensor grid graded towards the singularity at ``lam = 0``;
* ``time-integration``: ``int_0^inf`` of a heat-kernel quantity, on dyadic
  Gauss-Legendre panels with a fitted power-law tail.

The differences-walk Green function

    G^(m)(0, z) = m int_0^inf sum_w P_t(0, w) prod_p P_t(0, z_p + w) dt

is evaluated by :class:`DifferenceGreen`, which factorizes over coordinate
axes when the kernel allows it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    AxisLaw,
    StepDistribution,
    _leggauss,
    axis_heat_kernel,
    heat_kernel,
    one_minus_structure,
    symmetrize,
)

__all__ = [
    "GreenResult",
    "ThresholdResult",
    "green_scalar",
    "b2",
    "green_differences",
    "DifferenceGreen",
    "time_grid",
    "return_time_tail",
]

DIVERGENT = "DIVERGENT"


@dataclass
class GreenResult:
    """Value of a Green-function integral with its convergence history.

    ``value`` is ``inf`` and ``divergent`` is True when the integral does not
    converge (recurrent walk).
    """

    value: float
    estimated_error: float
    method: str
    refinement_trace: list[tuple[float, float]] = field(default_factory=list)
    divergent: bool = False
    note: str = ""

    @property
    def flag(self) -> str:
        return DIVERGENT if self.divergent else "ok"

    @property
    def relative_error(self) -> float:
        if self.divergent or self.value == 0:
            return math.inf
        return self.estimated_error / abs(self.value)


@dataclass
class ThresholdResult:
    """``b_2 = 2 / G(0,0)``; ``value == 0`` with ``recurrent`` set when the
    symmetrized walk is recurrent (no nontrivial equilibrium for any b > 0)."""

    value: float
    error: float
    recurrent: bool
    green: GreenResult

    @property
    def flag(self) -> str:
        return "RECURRENT" if self.recurrent else "ok"


# ---------------------------------------------------------------------------
# divergence rules


def _divergence_check(trace: list[tuple[float, float]], ratio: float) -> str | None:
    """Return a reason string when a refinement trace diverges.

    Two rules: the configured blow-up rule (a value exceeding ``ratio`` times
    its predecessor on two consecutive refinements), and a non-contraction
    rule (successive increments failing to shrink), which catches slow
    logarithmic growth.
    """
    vals = [v for _, v in trace]
    if any(not math.isfinite(v) for v in vals):
        return "non-finite value"
    jumps = [vals[i + 1] > ratio * vals[i] for i in range(len(vals) - 1)]
    for i in range(len(jumps) - 1):
        if jumps[i] and jumps[i + 1]:
            return f"value grew more than {ratio:g}x across two refinements"
    inc = np.diff(vals)
    if len(inc) >= 3 and np.all(inc[-3:] > 0):
        r = inc[-2:] / inc[-3:-1]
        if np.all(r > 0.5):
            return "refinement increments do not contract"
    return None


# ---------------------------------------------------------------------------
# Fourier quadrature


def _graded_axis(n: int, grade: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes on [-pi, pi] graded as ``lam = pi u^grade`` towards 0."""
    u, w = _leggauss(n)
    u = (u + 1) / 2
    w = w / 2
    lam = math.pi * u**grade
    jac = math.pi * grade * u ** (grade - 1) * w
    return np.concatenate([-lam[::-1], lam]), np.concatenate([jac[::-1], jac])


def _fourier_green(a: StepDistribution, n: int, grade: float) -> float:
    d = a.dim
    lam, w = _graded_axis(n, grade)
    offs = a.offsets_array
    probs = a.probs_array
    total = 0.0
    # loop over the first axis to bound memory at (2n)^(d-1)
    rest = np.meshgrid(*([lam] * (d - 1)), indexing="ij", sparse=True) if d > 1 else []
    wrest = np.ones((1,) * max(d - 1, 0)) if d > 1 else np.ones(())
    for k in range(d - 1):
        sh = [1] * (d - 1)
        sh[k] = len(lam)
        wrest = wrest * w.reshape(sh)
    for l0, w0 in zip(lam, w):
        oma = 0.0
        for off, p in zip(offs, probs):
            phase = off[0] * l0
            for k in range(1, d):
                if off[k]:
                    phase = phase + off[k] * rest[k - 1]
            oma = oma + p * 2.0 * np.sin(phase / 2.0) ** 2
        total += w0 * float(np.sum(wrest / oma))
    return total / (2 * math.pi) ** d


def green_scalar(
    a_hat: StepDistribution,
    refinements: tuple[int, ...] = (8, 16, 32, 64),
    grade: float = 5.0,
    max_points: float = 4e7,
    divergence_ratio: float = 10.0,
) -> GreenResult:
    """``G(0,0) = (2 pi)^{-d} int [1 - A(lam)]^{-1} dlam`` for a symmetric kernel.

    The grid uses ``2n`` graded Gauss-Legendre nodes per axis for each ``n`` in
    ``refinements`` while ``(2n)^d <= max_points``; the ladder is extended by
    halving (down to n = 4) when fewer than three fit.  If that still leaves
    fewer than three (large d), the time-integration route
    ``int_0^inf P_t(0,0) dt`` is used instead.

    Returns a :class:`GreenResult`; recurrence shows up as ``divergent=True``.
    """
    if not a_hat.is_symmetric:
        raise ValueError("green_scalar requires a symmetric kernel")
    d = a_hat.dim
    usable = [n for n in refinements if (2 * n) ** d <= max_points]
    # extend the ladder downwards by halving before giving up on quadrature
    while usable and len(usable) < 3 and usable[0] // 2 >= 4:
        usable.insert(0, usable[0] // 2)
    if len(usable) < 3:
        return _time_green_scalar(a_hat, divergence_ratio)
    trace: list[tuple[float, float]] = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for n in usable:
            trace.append((float(n), float(_fourier_green(a_hat, n, grade))))
    reason = _divergence_check(trace, divergence_ratio)
    if reason:
        return GreenResult(math.inf, math.inf, "quadrature", trace, True, reason)
    err = abs(trace[-1][1] - trace[-2][1])
    return GreenResult(trace[-1][1], err, "quadrature", trace)


# ---------------------------------------------------------------------------
# time integration


def time_grid(kmax: int = 16, per_panel: int = 8, kmin: int = -3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dyadic Gauss-Legendre panels ``[0, 2^kmin], [2^kmin, 2^(kmin+1)], ...``.

    Returns ``(nodes, weights, edges)``; ``edges`` are the panel endpoints.
    """
    u, w = _leggauss(per_panel)
    edges = np.concatenate([[0.0], 2.0 ** np.arange(kmin, kmax + 1)])
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = (lo + (hi - lo) * (u + 1) / 2).ravel()
    weights = ((hi - lo) / 2 * w).ravel()
    return nodes, weights, edges


@dataclass
class _TailFit:
    value: float
    alpha: float
    divergent: bool


def _tail(f_end: np.ndarray, f_quarter: np.ndarray, T: float, min_alpha: float = 1.05):
    """Power-law tail ``int_T^inf C t^-alpha`` fitted from values at T/4 and T."""
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = -np.log(f_end / f_quarter) / math.log(4.0)
        tail = f_end * T / (alpha - 1.0)
    bad = ~(alpha > min_alpha)
    tail = np.where(bad, np.inf, tail)
    tail = np.where(f_end == 0, 0.0, tail)
    return tail, alpha, bad & (f_end > 0)


def _integrate_with_trace(fvals, weights, nodes, edges, f_edges, checkpoints, divergence_ratio):
    """Truncated integrals plus tails at each checkpoint edge index.

    ``f_edges[i]`` is the integrand at ``edges[i]``.  Works elementwise on the
    trailing axes of ``fvals``.
    """
    trace = []
    truncated = []
    for ci in checkpoints:
        T = edges[ci]
        sel = nodes < T
        part = np.tensordot(weights[sel], fvals[sel], axes=(0, 0))
        tail, alpha, bad = _tail(f_edges[ci], f_edges[ci - 2], T)
        truncated.append(part)
        trace.append((T, part + tail, alpha, bad))
    return trace, truncated


def _origin_return(a: StepDistribution):
    """Vectorized ``t -> P_t(0, 0)`` for the rate-1 walk with kernel ``a``."""
    laws = a.axis_laws
    if laws is not None:
        def p00(ts):
            out = np.ones(len(ts))
            for law in laws:
                out *= np.array([axis_heat_kernel(law, t, 0)[0] for t in ts])
            return out
    else:
        def p00(ts):
            return np.array([heat_kernel(a, t, 0, tol=1.0).values[0].ravel()[0] for t in ts])
    return p00


def return_time_tail(a: StepDistribution, t0: float, panels: int = 14, per_panel: int = 8) -> float:
    """``int_{t0}^inf P_t(0, 0) dt`` (inf for a recurrent kernel).

    Dyadic Gauss-Legendre panels on ``[t0, t0 2^panels]`` plus a fitted
    power-law tail beyond.
    """
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    p00 = _origin_return(a)
    u, w = _leggauss(per_panel)
    edges = t0 * 2.0 ** np.arange(panels + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = (lo + (hi - lo) * (u + 1) / 2).ravel()
    weights = ((hi - lo) / 2 * w).ravel()
    part = float(weights @ p00(nodes))
    fe = p00(edges[[-3, -1]])
    tail, _, bad = _tail(fe[1], fe[0], edges[-1])
    return math.inf if bool(bad) else part + float(tail)


def _time_green_scalar(a: StepDistribution, divergence_ratio: float, kmax: int = 18) -> GreenResult:
    if a.axis_laws is None:
        kmax = min(kmax, 10)
    nodes, weights, edges = time_grid(kmax)
    p00 = _origin_return(a)
    f = p00(nodes)
    fe = p00(edges)
    cps = list(range(len(edges) - 6, len(edges), 2))
    trace, truncated = _integrate_with_trace(f, weights, nodes, edges, fe, cps, divergence_ratio)
    ttrace = [(float(T), float(v)) for (T, _, _, _), v in zip(trace, truncated)]
    reason = _divergence_check(ttrace, divergence_ratio)
    if reason is None and bool(trace[-1][3]):
        reason = f"tail exponent {float(trace[-1][2]):.3f} <= 1"
    if reason:
        return GreenResult(math.inf, math.inf, "time-integration", ttrace, True, reason)
    vals = [(float(T), float(v)) for T, v, _, _ in trace]
    err = abs(vals[-1][1] - vals[-2][1])
    return GreenResult(vals[-1][1], err, "time-integration", vals)


def b2(a: StepDistribution, **kwargs) -> ThresholdResult:
    """``b_2 = 2 / G(0,0)`` of the symmetrized kernel; 0 with a recurrence flag
    when that Green function diverges."""
    g = green_scalar(symmetrize(a), **kwargs)
    if g.divergent:
        return ThresholdResult(0.0, 0.0, True, g)
    return ThresholdResult(2.0 / g.value, 2.0 * g.estimated_error / g.value**2, False, g)


# ---------------------------------------------------------------------------
# differences-walk Green function


class DifferenceGreen:
    """Evaluator of ``G^(m)(0, z)`` for many offsets ``z`` sharing one time grid.

    Parameters
    ----------
    a : StepDistribution
        Symmetric kernel.
    m : int
        Number of walkers (``z`` has ``m - 1`` components in Z^d).
    reach : int
        Largest ``|z_{p,k}|`` that will be requested.
    kmax : int
        The time integral is computed on ``[0, 2^kmax]`` plus a fitted tail.
    """

    def __init__(self, a: StepDistribution, m: int, reach: int, kmax: int | None = None, per_panel: int = 8):
        if not a.is_symmetric:
            raise ValueError("differences-walk Green function requires a symmetric kernel")
        if m < 2:
            raise ValueError("m must be >= 2")
        self.a = a
        self.m = int(m)
        self.reach = int(reach)
        laws = a.axis_laws
        self.separable = laws is not None and all(l.is_symmetric for l in laws)
        if kmax is None:
            kmax = 16 if self.separable else 10
        self.kmax = kmax
        self.nodes, self.weights, self.edges = time_grid(kmax, per_panel)
        self.checkpoints = list(range(len(self.edges) - 5, len(self.edges), 2))
        self._tables: dict[AxisLaw, tuple[np.ndarray, np.ndarray]] = {}
        if self.separable:
            for law in laws:
                if law not in self._tables:
                    self._tables[law] = (self._axis_table(law, self.nodes), self._axis_table(law, self.edges))
            self.laws = laws

    # -- separable route ---------------------------------------------------
    def _axis_table(self, law: AxisLaw, times: np.ndarray) -> np.ndarray:
        R, q = self.reach, self.m - 1
        nU = (2 * R + 1) ** q
        out = np.empty((len(times), nU))
        letters = "abcdefgh"[:q]
        spec = "w," + ",".join(l + "w" for l in letters) + "->" + letters
        for i, t in enumerate(times):
            W = int(math.ceil(10.0 * math.sqrt(t * law.rate * law.second_moment))) + 20 * law.max_step
            p = axis_heat_kernel(law, t, W + R)
            c = W + R
            pw = p[c - W : c + W + 1]
            shifted = np.stack([p[c - W + u : c + W + 1 + u] for u in range(-R, R + 1)])
            out[i] = np.einsum(spec, pw, *([shifted] * q)).ravel()
        return out

    def axis_index(self, Z: np.ndarray) -> np.ndarray:
        """Per-axis table index of offsets ``Z`` with shape ``(n, m-1, d)``;
        returns shape ``(n, d)``."""
        R = self.reach
        base = (2 * R + 1) ** np.arange(self.m - 2, -1, -1)
        if np.abs(Z).max(initial=0) > R:
            raise ValueError("offset outside the prepared reach")
        return np.tensordot(Z + R, base, axes=([1], [0]))

    def integrand_from_index(self, idx: np.ndarray, which: str = "nodes") -> np.ndarray:
        """``sum_w P_t(0,w) prod_p P_t(0, z_p + w)`` at all grid times; shape (T, n)."""
        k = 0 if which == "nodes" else 1
        out = None
        for ax, law in enumerate(self.laws):
            f = self._tables[law][k][:, idx[:, ax]]
            out = f if out is None else out * f
        return out

    # -- general route ------------------------------------------------------
    def _general_integrand(self, Z: np.ndarray, times: np.ndarray) -> np.ndarray:
        d, q = self.a.dim, self.m - 1
        out = np.empty((len(times), len(Z)))
        for i, t in enumerate(times):
            W = int(math.ceil(10.0 * math.sqrt(t * self.a.variance_trace()))) + 20 * self.a.max_offset
            box = W + self.reach
            P = heat_kernel(self.a, t, box, tol=1.0, max_points=5e7).values[0]
            core = tuple(slice(box - W, box + W + 1) for _ in range(d))
            pw = P[core]
            for j, z in enumerate(Z):
                prod = pw.copy()
                for p in range(q):
                    sl = tuple(slice(box - W + z[p][k], box + W + 1 + z[p][k]) for k in range(d))
                    prod *= P[sl]
                out[i, j] = prod.sum()
        return out

    # -- public --------------------------------------------------------------
    def evaluate(self, Z: np.ndarray, chunk: int = 200_000) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``G^(m)(0, z)`` for each row of ``Z`` (shape ``(n, m-1, d)``).

        Returns ``(values, errors, divergent)``.  ``errors`` is the change
        between the last two tail checkpoints.
        """
        Z = np.asarray(Z, dtype=np.int64).reshape(-1, self.m - 1, self.a.dim)
        n = len(Z)
        vals = np.empty(n)
        errs = np.empty(n)
        div = np.zeros(n, dtype=bool)
        if self.separable:
            idx_all = self.axis_index(Z)
        for s in range(0, n, chunk):
            sl = slice(s, min(n, s + chunk))
            if self.separable:
                f = self.integrand_from_index(idx_all[sl], "nodes")
                fe = self.integrand_from_index(idx_all[sl], "edges")
            else:
                f = self._general_integrand(Z[sl], self.nodes)
                fe = self._general_integrand(Z[sl], self.edges)
            trace, _ = _integrate_with_trace(f, self.weights, self.nodes, self.edges, fe, self.checkpoints, 10.0)
            v_last = trace[-1][1]
            v_prev = trace[-2][1]
            vals[sl] = self.m * v_last
            errs[sl] = self.m * np.abs(v_last - v_prev)
            div[sl] = trace[-1][3]
        vals[div] = np.inf
        errs[div] = np.inf
        return vals, errs, div

    def trace_at(self, z: np.ndarray) -> list[tuple[float, float]]:
        z = np.asarray(z, dtype=np.int64).reshape(1, self.m - 1, self.a.dim)
        if self.separable:
            idx = self.axis_index(z)
            f = self.integrand_from_index(idx, "nodes")
            fe = self.integrand_from_index(idx, "edges")
        else:
            f = self._general_integrand(z, self.nodes)
            fe = self._general_integrand(z, self.edges)
        cps = list(range(len(self.edges) - 9, len(self.edges), 2))
        trace, truncated = _integrate_with_trace(f, self.weights, self.nodes, self.edges, fe, cps, 10.0)
        return [(float(T), float(self.m * v[0])) for (T, v, _, _) in trace], [
            (float(T), float(self.m * v[0])) for (T, _, _, _), v in zip(trace, truncated)
        ], bool(trace[-1][3][0]), float(trace[-1][2][0])


def green_differences(m: int, a: StepDistribution, z=None, **kwargs) -> GreenResult:
    """``G^(m)(0, z) = m int_0^inf P^(m)_t(0, z) dt`` for the differences walk.

    ``z`` is a sequence of ``m - 1`` points of Z^d (default: the origin).
    Divergence (recurrent differences walk) is reported, not raised.
    """
    if not a.is_symmetric:
        raise ValueError("green_differences requires a symmetric kernel")
    if z is None:
        z = np.zeros((m - 1, a.dim), dtype=np.int64)
    z = np.asarray(getattr(z, "coords", z), dtype=np.int64).reshape(m - 1, a.dim)
    reach = int(np.abs(z).max(initial=0))
    ev = DifferenceGreen(a, m, reach, **kwargs)
    trace, truncated, bad, alpha = ev.trace_at(z)
    reason = _divergence_check(truncated, 10.0)
    if reason is None and bad:
        reason = f"tail exponent {alpha:.3f} <= 1"
    if reason:
        return GreenResult(math.inf, math.inf, "time-integration", truncated, True, reason)
    err = abs(trace[-1][1] - trace[-2][1])
    return GreenResult(trace[-1][1], err, "time-integration", trace, note=f"tail exponent {alpha:.4f}")
