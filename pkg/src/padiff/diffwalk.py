"""Differences random walk of m independent walkers.

A state is stored as the ``m - 1`` displacements ``y_p = xi_p - xi_m`` of the
first ``m - 1`` walkers from the last one, so the state space is literally
``Z^{d(m-1)}``.  The full array of pairwise differences can be rebuilt on
demand with :meth:`RelativeState.pairwise`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .kernels import StepDistribution

__all__ = [
    "RelativeState",
    "TransitionList",
    "SupportTooLarge",
    "collision_count",
    "collision_counts",
    "transitions",
    "enumerate_support",
    "support_array",
    "support_count",
    "origin",
]

DEFAULT_CAP = 5_000_000


class SupportTooLarge(RuntimeError):
    """Raised when an enumeration would exceed the configured state cap."""

    def __init__(self, estimate: int, cap: int, m: int, d: int, L: int):
        self.estimate = estimate
        self.cap = cap
        super().__init__(
            f"support enumeration for m={m}, d={d}, L={L} needs about {estimate} states "
            f"(cap {cap}); lower L or raise the cap"
        )


@dataclass(frozen=True)
class RelativeState:
    """Position of the differences walk: ``coords[p] = xi_p - xi_m``."""

    m: int
    coords: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be >= 2")
        coords = tuple(tuple(int(x) for x in c) for c in self.coords)
        if len(coords) != self.m - 1:
            raise ValueError(f"expected {self.m - 1} coordinates, got {len(coords)}")
        if len({len(c) for c in coords}) > 1:
            raise ValueError("coordinates must share one dimension")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return len(self.coords[0])

    def as_array(self) -> np.ndarray:
        return np.array(self.coords, dtype=np.int64)

    def positions(self) -> np.ndarray:
        """Absolute positions with walker m pinned at the origin; shape (m, d)."""
        return np.vstack([self.as_array(), np.zeros((1, self.dim), dtype=np.int64)])

    def pairwise(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """All differences ``xi_p - xi_q`` for ``1 <= p < q <= m`` (1-based)."""
        pos = self.positions()
        return {
            (p + 1, q + 1): tuple(int(x) for x in pos[p] - pos[q])
            for p, q in itertools.combinations(range(self.m), 2)
        }

    @classmethod
    def from_array(cls, m: int, arr) -> "RelativeState":
        arr = np.asarray(arr, dtype=np.int64).reshape(m - 1, -1)
        return cls(m, tuple(map(tuple, arr.tolist())))


def origin(m: int, d: int) -> RelativeState:
    return RelativeState(m, ((0,) * d,) * (m - 1))


def collision_counts(Y: np.ndarray) -> np.ndarray:
    """Vectorized collision function for states ``Y`` of shape ``(n, m-1, d)``."""
    Y = np.asarray(Y)
    q = Y.shape[1]
    out = np.zeros(Y.shape[0], dtype=np.int64)
    for p in range(q):
        out += np.all(Y[:, p] == 0, axis=1)
        for r in range(p + 1, q):
            out += np.all(Y[:, p] == Y[:, r], axis=1)
    return out


def collision_count(s: RelativeState) -> int:
    """Number of coinciding pairs among the m walkers."""
    return int(collision_counts(s.as_array()[None])[0])


@dataclass(frozen=True)
class TransitionList:
    """One-step law of the differences walk from a given state."""

    entries: tuple[tuple[RelativeState, float], ...]

    @property
    def total(self) -> float:
        return float(sum(p for _, p in self.entries))

    def as_dict(self) -> dict[tuple, float]:
        return {s.coords: p for s, p in self.entries}


def _moves(m: int, a: StepDistribution) -> tuple[np.ndarray, np.ndarray]:
    """All (displacement of the m-1 coordinates, probability) for one jump.

    Walker r < m jumping by j shifts coordinate r by +j; walker m jumping by
    j shifts every coordinate by -j.  Each walker moves with probability 1/m.
    Duplicate displacements are merged.
    """
    q, d = m - 1, a.dim
    acc: dict[bytes, tuple[np.ndarray, float]] = {}
    for j, p in a.support:
        j = np.array(j, dtype=np.int64)
        for r in range(m):
            delta = np.zeros((q, d), dtype=np.int64)
            if r < q:
                delta[r] = j
            else:
                delta[:] = -j
            key = delta.tobytes()
            prev = acc.get(key)
            acc[key] = (delta, (prev[1] if prev else 0.0) + p / m)
    keys = sorted(acc, key=lambda k: tuple(acc[k][0].ravel()))
    return np.stack([acc[k][0] for k in keys]), np.array([acc[k][1] for k in keys])


def transitions(s: RelativeState, a: StepDistribution) -> TransitionList:
    """Jump law of the differences walk from ``s`` (duplicates merged)."""
    if a.dim != s.dim:
        raise ValueError("kernel and state dimensions differ")
    deltas, probs = _moves(s.m, a)
    base = s.as_array()
    return TransitionList(
        tuple((RelativeState.from_array(s.m, base + dl), float(p)) for dl, p in zip(deltas, probs))
    )


def _encode(Y: np.ndarray, L: int) -> np.ndarray:
    """Lexicographic mixed-radix code of states with entries in [-L, L]."""
    B = 2 * L + 1
    flat = (Y + L).reshape(len(Y), -1)
    code = np.zeros(len(Y), dtype=np.int64)
    for c in range(flat.shape[1]):
        code = code * B + flat[:, c]
    return code


def _decode(code: np.ndarray, L: int, m: int, d: int) -> np.ndarray:
    B = 2 * L + 1
    n = d * (m - 1)
    out = np.empty((len(code), n), dtype=np.int64)
    c = code.copy()
    for k in range(n - 1, -1, -1):
        out[:, k] = c % B
        c //= B
    return (out - L).reshape(-1, m - 1, d)


def _estimate(m: int, d: int, L: int) -> int:
    B = (2 * L + 1) ** d
    if m == 2:
        return 1
    return (m * (m - 1) // 2) * B ** (m - 2)


def support_array(m: int, L: int, d: int, cap: int = DEFAULT_CAP) -> np.ndarray:
    """States of ``[-L, L]^{d(m-1)}`` with at least one coinciding pair.

    Returns an integer array of shape ``(n, m-1, d)`` in lexicographic order.
    Built as the union of the coincidence sets ``{y_p = 0}`` and
    ``{y_p = y_q}``, each parametrized by the remaining free coordinates.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    if m < 2:
        raise ValueError("m must be >= 2")
    est = _estimate(m, d, L)
    if est > cap:
        raise SupportTooLarge(est, cap, m, d, L)
    q = m - 1
    if q == 1:
        return np.zeros((1, 1, d), dtype=np.int64)
    box = np.array(list(itertools.product(range(-L, L + 1), repeat=d)), dtype=np.int64)
    nb = len(box)
    codes = []
    free_idx = np.array(list(itertools.product(range(nb), repeat=q - 1)), dtype=np.int64)
    for p in range(q):
        # y_p = 0, others free
        others = [r for r in range(q) if r != p]
        Y = np.zeros((len(free_idx), q, d), dtype=np.int64)
        for c, r in enumerate(others):
            Y[:, r] = box[free_idx[:, c]]
        codes.append(_encode(Y, L))
        for r in range(p + 1, q):
            # y_p = y_r, the remaining q-2 coordinates free, shared value free
            rest = [s for s in range(q) if s not in (p, r)]
            Y = np.zeros((len(free_idx), q, d), dtype=np.int64)
            Y[:, p] = box[free_idx[:, 0]]
            Y[:, r] = box[free_idx[:, 0]]
            for c, s in enumerate(rest, start=1):
                Y[:, s] = box[free_idx[:, c]]
            codes.append(_encode(Y, L))
    code = np.unique(np.concatenate(codes))
    return _decode(code, L, m, d)


def enumerate_support(m: int, L: int, d: int, cap: int = DEFAULT_CAP) -> list[RelativeState]:
    """Collision support inside the box, as :class:`RelativeState` objects in
    lexicographic order."""
    Y = support_array(m, L, d, cap)
    return [RelativeState.from_array(m, y) for y in Y]


def support_count(m: int, L: int, d: int, cap: int = DEFAULT_CAP) -> int:
    return int(len(support_array(m, L, d, cap)))
