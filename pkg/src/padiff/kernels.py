"""Random-walk jump laws on Z^d and their continuous-time transition kernels.

A :class:`StepDistribution` is the one-step law ``a(0, .)`` of a rate-1
continuous-time random walk.  Transition probabilities ``P_t(0, x)`` are
obtained from the Fourier representation

    P_t(0, x) = (2 pi)^{-d} int cos(x . lam) exp(-t [1 - A(lam)]) dlam,

with ``A`` the structure function, using composite Gauss-Legendre quadrature.
"""

from __future__ import annotations

import ast
import functools
import hashlib
import itertools
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "StepDistribution",
    "HeatKernelTable",
    "AxisLaw",
    "symmetrize",
    "reflect",
    "structure_function",
    "one_minus_structure",
    "heat_kernel",
    "axis_heat_kernel",
    "srw",
    "drift",
    "parse_kernel_config",
    "load_kernel",
    "gl_panels",
]

PROB_TOL = 1e-12


def _lattice_rank_and_index(vectors: np.ndarray) -> tuple[int, int]:
    """Rank of the integer lattice spanned by ``vectors`` and its index in Z^rank.

    Integer row reduction (Euclid on columns) to echelon form; the index is the
    absolute product of the pivots.
    """
    M = [list(map(int, v)) for v in vectors]
    ncol = len(M[0]) if M else 0
    rank = 0
    index = 1
    for col in range(ncol):
        rows = [r for r in range(rank, len(M)) if M[r][col] != 0]
        if not rows:
            continue
        while True:
            rows = [r for r in range(rank, len(M)) if M[r][col] != 0]
            piv = min(rows, key=lambda r: abs(M[r][col]))
            M[rank], M[piv] = M[piv], M[rank]
            done = True
            for r in range(rank + 1, len(M)):
                if M[r][col] != 0:
                    q = M[r][col] // M[rank][col]
                    M[r] = [x - q * y for x, y in zip(M[r], M[rank])]
                    if M[r][col] != 0:
                        done = False
            if done:
                break
        index *= abs(M[rank][col])
        rank += 1
    return rank, index


@dataclass(frozen=True)
class AxisLaw:
    """One coordinate of an axis-separable walk: rate ``rate``, steps ``steps``
    with probabilities ``probs`` (normalized to 1 on this axis)."""

    rate: float
    steps: tuple[int, ...]
    probs: tuple[float, ...]

    @property
    def second_moment(self) -> float:
        return float(sum(p * s * s for s, p in zip(self.steps, self.probs)))

    @property
    def max_step(self) -> int:
        return max(abs(s) for s in self.steps)

    @property
    def is_symmetric(self) -> bool:
        d = dict(zip(self.steps, self.probs))
        return all(abs(d.get(-s, 0.0) - p) <= PROB_TOL for s, p in d.items())


@dataclass(frozen=True)
class StepDistribution:
    """Finite-support jump law ``a(0, .)`` on Z^d with jump rate 1.

    Offsets are stored sorted with duplicates merged.  The zero offset is
    rejected: a jump to the current site is not a jump.

    Parameters
    ----------
    dim : int
        Lattice dimension d.
    offsets : sequence of integer d-tuples
    probs : sequence of positive floats summing to 1
    name : str, optional
        Label used in reports.
    """

    dim: int
    offsets: tuple[tuple[int, ...], ...]
    probs: tuple[float, ...]
    name: str = field(default="", compare=False)
    jump_rate: float = field(default=1.0, init=False, compare=False)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim!r}")
        if len(self.offsets) != len(self.probs) or not self.offsets:
            raise ValueError("offsets and probs must be non-empty and of equal length")
        merged: dict[tuple[int, ...], float] = {}
        for off, p in zip(self.offsets, self.probs):
            off = tuple(int(x) for x in off)
            if len(off) != self.dim:
                raise ValueError(f"offset {off} does not have dimension {self.dim}")
            if not any(off):
                raise ValueError("offset 0 is not allowed (a(0,0) = 0)")
            p = float(p)
            if not p > 0 or not math.isfinite(p):
                raise ValueError(f"probabilities must be positive, got {p} for {off}")
            merged[off] = merged.get(off, 0.0) + p
        total = sum(merged.values())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        keys = sorted(merged)
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "offsets", tuple(keys))
        object.__setattr__(self, "probs", tuple(merged[k] for k in keys))

    # -- basic views -------------------------------------------------------
    @property
    def support(self) -> list[tuple[tuple[int, ...], float]]:
        return list(zip(self.offsets, self.probs))

    @property
    def offsets_array(self) -> np.ndarray:
        return np.array(self.offsets, dtype=np.int64).reshape(-1, self.dim)

    @property
    def probs_array(self) -> np.ndarray:
        return np.array(self.probs, dtype=float)

    @property
    def max_offset(self) -> int:
        return int(np.abs(self.offsets_array).max())

    @functools.cached_property
    def key(self) -> str:
        """Stable digest of the law, used for cache keys and manifests."""
        h = hashlib.sha256(repr((self.dim, self.offsets, self.probs)).encode())
        return h.hexdigest()[:16]

    def label(self) -> str:
        return self.name or f"kernel-{self.key}"

    # -- flags -------------------------------------------------------------
    @functools.cached_property
    def is_symmetric(self) -> bool:
        d = dict(self.support)
        for off, p in d.items():
            q = d.get(tuple(-x for x in off))
            if q is None or abs(q - p) > PROB_TOL:
                return False
        return True

    @functools.cached_property
    def is_irreducible(self) -> bool:
        """Every site is reachable from every other.

        Holds iff the offsets generate Z^d as a group (lattice index 1) and
        positively span R^d (some strictly positive combination vanishes).
        """
        X = self.offsets_array
        rank, index = _lattice_rank_and_index(X)
        if rank != self.dim or index != 1:
            return False
        # strictly positive c with X^T c = 0: feasible iff c >= 1 is feasible
        res = linprog(
            np.zeros(len(X)),
            A_eq=X.T.astype(float),
            b_eq=np.zeros(self.dim),
            bounds=[(1.0, None)] * len(X),
            method="highs",
        )
        return bool(res.status == 0)

    @functools.cached_property
    def axis_laws(self) -> tuple[AxisLaw, ...] | None:
        """Per-axis factorization, or None when some offset is off-axis.

        A walk whose jumps all lie on coordinate axes is a product of
        independent one-dimensional walks with rates ``c_k = sum of a(j)``
        over offsets on axis k.
        """
        per_axis: list[dict[int, float]] = [dict() for _ in range(self.dim)]
        for off, p in self.support:
            nz = [k for k, x in enumerate(off) if x != 0]
            if len(nz) != 1:
                return None
            k = nz[0]
            per_axis[k][off[k]] = per_axis[k].get(off[k], 0.0) + p
        laws = []
        for k in range(self.dim):
            if not per_axis[k]:
                return None
            rate = sum(per_axis[k].values())
            steps = tuple(sorted(per_axis[k]))
            laws.append(AxisLaw(rate, steps, tuple(per_axis[k][s] / rate for s in steps)))
        return tuple(laws)

    @property
    def is_axis_separable(self) -> bool:
        return self.axis_laws is not None

    def variance_trace(self) -> float:
        X = self.offsets_array.astype(float)
        return float((self.probs_array[:, None] * X**2).sum())

    def __repr__(self) -> str:
        return f"StepDistribution({self.label()}, dim={self.dim}, support={len(self.offsets)})"


def symmetrize(a: StepDistribution) -> StepDistribution:
    """Symmetrized law ``(a(0, j) + a(0, -j)) / 2``."""
    d: dict[tuple[int, ...], float] = {}
    for off, p in a.support:
        neg = tuple(-x for x in off)
        d[off] = d.get(off, 0.0) + p / 2
        d[neg] = d.get(neg, 0.0) + p / 2
    name = a.name if a.is_symmetric else (f"sym({a.name})" if a.name else "")
    return StepDistribution(a.dim, tuple(d), tuple(d.values()), name=name)


def reflect(a: StepDistribution) -> StepDistribution:
    """Reflected law ``a*(0, j) = a(0, -j)``."""
    offs = tuple(tuple(-x for x in off) for off in a.offsets)
    name = a.name if a.is_symmetric else (f"refl({a.name})" if a.name else "")
    return StepDistribution(a.dim, offs, a.probs, name=name)


def _require_symmetric(a: StepDistribution, what: str) -> None:
    if not a.is_symmetric:
        raise ValueError(f"{what} requires a symmetric kernel; symmetrize it first")


def structure_function(a: StepDistribution, lam) -> np.ndarray | float:
    """``A(lam) = sum_j a(0, j) cos(j . lam)`` for a symmetric kernel.

    ``lam`` may have shape ``(..., d)``; the result has shape ``(...)``.
    """
    _require_symmetric(a, "structure_function")
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-1] != a.dim:
        raise ValueError(f"lam must have trailing dimension {a.dim}")
    phase = lam @ a.offsets_array.T.astype(float)
    out = np.cos(phase) @ a.probs_array
    return float(out) if out.ndim == 0 else out


def one_minus_structure(a: StepDistribution, lam) -> np.ndarray:
    """``1 - A(lam)`` written as ``sum_j a_j 2 sin^2(j . lam / 2)``.

    This form keeps full relative accuracy near ``lam = 0``.
    """
    _require_symmetric(a, "one_minus_structure")
    lam = np.asarray(lam, dtype=float)
    phase = lam @ a.offsets_array.T.astype(float)
    return (2.0 * np.sin(phase / 2.0) ** 2) @ a.probs_array


# ---------------------------------------------------------------------------
# quadrature helpers


@functools.lru_cache(maxsize=64)
def _leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def gl_panels(a: float, b: float, npanels: int, per_panel: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on ``[a, b]`` with equal panels."""
    u, w = _leggauss(per_panel)
    edges = np.linspace(a, b, npanels + 1)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    x = (lo + (hi - lo) * (u + 1) / 2).ravel()
    wx = ((hi - lo) / 2 * w).ravel()
    return x, wx


def _axis_nodes(t: float, second_moment: float, max_step: int, width: int, nodes: int) -> int:
    # the integrand is a Gaussian bump of width ~ 1/sqrt(t v) times cos(x lam)
    # with |x| up to `width`; both must be resolved by the composite rule
    need = max(nodes, int(math.ceil(40.0 * math.sqrt(max(t, 0.0) * second_moment))) + 8 * max_step, 3 * width)
    return need


def axis_heat_kernel(law: AxisLaw, t: float, width: int, nodes: int = 64) -> np.ndarray:
    """``P_t(0, x)`` for ``x = -width..width`` of a symmetric one-dimensional law."""
    if not law.is_symmetric:
        raise ValueError("axis_heat_kernel requires a symmetric axis law")
    xs = np.arange(-width, width + 1)
    if t == 0:
        out = np.zeros(2 * width + 1)
        out[width] = 1.0
        return out
    n = _axis_nodes(t, law.second_moment * law.rate, law.max_step, width, nodes)
    lam, w = gl_panels(0.0, math.pi, max(1, -(-n // 16)))
    steps = np.array(law.steps, dtype=float)
    probs = np.array(law.probs)
    oma = (2.0 * np.sin(np.outer(lam, steps) / 2.0) ** 2) @ probs
    f = np.exp(-t * law.rate * oma) * w
    keep = f > 1e-300
    keep &= f > f.max() * 1e-22
    lam, f = lam[keep], f[keep]
    out = np.cos(np.outer(xs, lam)) @ f / math.pi
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class HeatKernelTable:
    """Transition probabilities ``P_t(0, x)`` on the box ``[-box, box]^d``.

    ``values[k]`` is the slice at ``times[k]``, an array of shape
    ``(2 box + 1,) * d`` indexed by ``x + box``.
    """

    kernel: StepDistribution
    times: tuple[float, ...]
    box: int
    values: np.ndarray
    truncation_mass: np.ndarray
    warning: str | None = None

    def at(self, k: int, x: Sequence[int]) -> float:
        idx = tuple(int(c) + self.box for c in x)
        return float(self.values[(k,) + idx])

    def origin(self) -> np.ndarray:
        return self.values[(slice(None),) + (self.box,) * self.kernel.dim]


def _tensor_heat(a: StepDistribution, t: float, box: int, nodes: int, max_points: float) -> np.ndarray:
    d = a.dim
    if t == 0:
        out = np.zeros((2 * box + 1,) * d)
        out[(box,) * d] = 1.0
        return out
    n = _axis_nodes(t, a.variance_trace(), a.max_offset, box, nodes)
    npan = max(2, -(-n // 16))
    if npan % 2:
        npan += 1
    lam, w = gl_panels(-math.pi, math.pi, npan)
    if len(lam) ** d > max_points:
        raise ValueError(
            f"tensor quadrature needs {len(lam)}^{d} points at t={t}; "
            "use an axis-separable kernel or a smaller time"
        )
    grids = np.meshgrid(*([lam] * d), indexing="ij", sparse=True)
    oma = np.zeros((len(lam),) * d)
    for off, p in a.support:
        phase = sum(g * o for g, o in zip(grids, off) if o != 0)
        oma = oma + p * 2.0 * np.sin(phase / 2.0) ** 2
    f = np.exp(-t * oma)
    for k in range(d):
        sh = [1] * d
        sh[k] = len(lam)
        f = f * w.reshape(sh)
    xs = np.arange(-box, box + 1)
    E = np.exp(1j * np.outer(xs, lam))
    out = f.astype(complex)
    for _ in range(d):
        # contract the leading lam-axis, append the new x-axis at the end
        out = np.tensordot(out, E, axes=([0], [1]))
    return np.maximum(out.real / (2 * math.pi) ** d, 0.0)


@functools.lru_cache(maxsize=256)
def _heat_cached(a: StepDistribution, times: tuple[float, ...], box: int, nodes: int, max_points: float):
    laws = a.axis_laws
    slices = []
    for t in times:
        if laws is not None and all(law.is_symmetric for law in laws):
            fac = [axis_heat_kernel(law, t, box, nodes) for law in laws]
            v = fac[0]
            for f in fac[1:]:
                v = np.multiply.outer(v, f)
            slices.append(v)
        else:
            slices.append(_tensor_heat(a, t, box, nodes, max_points))
    vals = np.stack(slices)
    vals.setflags(write=False)
    return vals


def heat_kernel(
    a: StepDistribution,
    t: float | Iterable[float],
    box: int,
    nodes: int = 64,
    tol: float = 1e-8,
    max_points: float = 2e7,
) -> HeatKernelTable:
    """Continuous-time transition probabilities ``P_t(0, x)`` on a box.

    Parameters
    ----------
    a : StepDistribution
        Symmetric jump law.
    t : float or sequence of float
        Time(s), nonnegative.
    box : int
        Half-width of the output box.
    nodes : int
        Minimum Gauss-Legendre nodes per axis; raised automatically for large
        ``t`` or wide boxes so the oscillatory integrand stays resolved.
    tol : float
        Truncation mass above which a warning is attached.

    Returns
    -------
    HeatKernelTable
        Cached and read-only.  ``truncation_mass`` is the probability that the
        walk sits outside the box.
    """
    _require_symmetric(a, "heat_kernel")
    times = tuple(float(x) for x in np.atleast_1d(np.asarray(t, dtype=float)))
    if any(x < 0 or not math.isfinite(x) for x in times):
        raise ValueError("times must be finite and nonnegative")
    box = int(box)
    if box < 0:
        raise ValueError("box must be >= 0")
    vals = _heat_cached(a, times, box, int(nodes), float(max_points))
    mass = 1.0 - vals.reshape(len(times), -1).sum(axis=1)
    mass = np.maximum(mass, 0.0)
    msg = None
    if np.any(mass > tol):
        k = int(np.argmax(mass))
        msg = f"box {box} misses probability mass {mass[k]:.3g} at t={times[k]:g}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return HeatKernelTable(a, times, box, vals, mass, msg)


# ---------------------------------------------------------------------------
# constructors


def srw(dim: int) -> StepDistribution:
    """Simple random walk: each of the 2d neighbours with probability 1/(2d)."""
    offs = []
    for k in range(dim):
        for s in (1, -1):
            e = [0] * dim
            e[k] = s
            offs.append(tuple(e))
    return StepDistribution(dim, tuple(offs), (1.0 / (2 * dim),) * (2 * dim), name=f"srw{dim}")


def drift(p: float) -> StepDistribution:
    """Nearest-neighbour walk on Z: +1 with probability p, -1 with 1 - p."""
    p = float(p)
    if not 0.0 < p < 1.0:
        if p == 1.0:
            return StepDistribution(1, ((1,),), (1.0,), name="drift(1)")
        if p == 0.0:
            return StepDistribution(1, ((-1,),), (1.0,), name="drift(0)")
        raise ValueError("drift probability must lie in [0, 1]")
    return StepDistribution(1, ((1,), (-1,)), (p, 1.0 - p), name=f"drift({p:g})")


def parse_kernel_config(text: str, name: str = "") -> StepDistribution:
    """Parse a key-value kernel description.

    Recognized keys: ``dim = d``, repeated ``step = [o_1, ..., o_d, prob]``,
    optional ``name = ...``.  ``#`` starts a comment.
    """
    dim = None
    steps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "dim":
            dim = int(val)
        elif key == "step":
            try:
                entry = ast.literal_eval(val)
            except (ValueError, SyntaxError) as exc:
                raise ValueError(f"line {lineno}: bad step entry {val!r}") from exc
            if not isinstance(entry, (list, tuple)) or len(entry) < 2:
                raise ValueError(f"line {lineno}: step must be [offsets..., prob]")
            steps.append((tuple(int(x) for x in entry[:-1]), float(entry[-1])))
        elif key == "name":
            name = val.strip("\"'")
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    if dim is None:
        raise ValueError("kernel config lacks 'dim'")
    if not steps:
        raise ValueError("kernel config has no 'step' entries")
    return StepDistribution(dim, tuple(s[0] for s in steps), tuple(s[1] for s in steps), name=name)


_DRIFT_RE = re.compile(r"^drift\(\s*([0-9.eE+-]+)\s*\)$")
_SRW_RE = re.compile(r"^srw(?:\(\s*(\d+)\s*\)|(\d+))?$")


def load_kernel(spec: str, dim: int | None = None) -> StepDistribution:
    """Resolve a kernel from a name (``srw``, ``srw3``, ``srw(3)``,
    ``drift(p)``) or a path to a config file."""
    spec = spec.strip()
    m = _SRW_RE.match(spec)
    if m:
        d = m.group(1) or m.group(2)
        d = int(d) if d else dim
        if d is None:
            raise ValueError("srw needs a dimension (use --dim or srw3)")
        if dim is not None and int(dim) != d:
            raise ValueError(f"kernel {spec!r} conflicts with dim={dim}")
        return srw(d)
    m = _DRIFT_RE.match(spec)
    if m:
        if dim not in (None, 1):
            raise ValueError("drift(p) is one-dimensional")
        return drift(float(m.group(1)))
    path = Path(spec)
    if path.is_file():
        a = parse_kernel_config(path.read_text(), name=path.stem)
        if dim is not None and a.dim != dim:
            raise ValueError(f"kernel file has dim {a.dim}, requested {dim}")
        return a
    raise ValueError(f"unknown kernel {spec!r}")


def lattice_symmetries(a: StepDistribution, max_dim: int = 5) -> list[np.ndarray]:
    """Signed permutation matrices ``g`` with ``a(0, g j) = a(0, j)`` for all j."""
    d = a.dim
    if d > max_dim:
        mats = [np.eye(d, dtype=np.int64)]
        if a.is_symmetric:
            mats.append(-np.eye(d, dtype=np.int64))
        return mats
    law = dict(a.support)
    out = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            g = np.zeros((d, d), dtype=np.int64)
            for i, (j, s) in enumerate(zip(perm, signs)):
                g[i, j] = s
            ok = True
            for off, p in law.items():
                img = tuple(int(x) for x in g @ np.array(off))
                q = law.get(img)
                if q is None or abs(q - p) > PROB_TOL:
                    ok = False
                    break
            if ok:
                out.append(g)
    return out
