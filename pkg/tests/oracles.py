"""Reference computations that share no code with the package."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.special import ive


def watson_green() -> float:
    g = math.gamma
    return math.sqrt(6) / (32 * math.pi**3) * g(1 / 24) * g(5 / 24) * g(7 / 24) * g(11 / 24)


def srw_return(t, d):
    """P_t(0, 0) for rate-1 simple random walk on Z^d."""
    return ive(0, t / d) ** d


def srw_green_quad(d: int) -> float:
    f = lambda t: srw_return(t, d)
    return quad(f, 0, 100, limit=400)[0] + quad(f, 100, math.inf, limit=400)[0]


def srw_green_m(m: int, d: int, z=None, nmax: int = 60) -> float:
    """``m int_0^inf sum_w P_t(w) prod_p P_t(z_p + w) dt`` for SRW, via Bessel
    sums per axis."""
    z = np.zeros((m - 1, d), dtype=int) if z is None else np.asarray(z).reshape(m - 1, d)
    ns = np.arange(-nmax, nmax + 1)

    def f(t):
        s = t / d
        out = 1.0
        for k in range(d):
            acc = ive(ns, s)
            for p in range(m - 1):
                acc = acc * ive(ns + z[p, k], s)
            out *= acc.sum()
        return m * out

    return quad(f, 0, 50, limit=400)[0] + quad(f, 50, math.inf, limit=400)[0]


def poisson_heat(offsets, probs, t: float, nmax: int | None = None) -> dict:
    """``P_t(0, .)`` as the Poisson mixture of n-step convolutions."""
    if nmax is None:
        nmax = int(t + 10 * math.sqrt(t) + 20)
    law = {tuple(o): p for o, p in zip(offsets, probs)}
    dim = len(next(iter(law)))
    cur = {(0,) * dim: 1.0}
    out: dict = {}
    w = math.exp(-t)
    for n in range(nmax + 1):
        for x, p in cur.items():
            out[x] = out.get(x, 0.0) + w * p
        nxt: dict = {}
        for x, p in cur.items():
            for o, q in law.items():
                y = tuple(a + b for a, b in zip(x, o))
                nxt[y] = nxt.get(y, 0.0) + p * q
        cur = nxt
        w *= t / (n + 1)
    return out


def brute_support(m: int, L: int, d: int) -> list:
    """States of [-L, L]^{d(m-1)} with a coinciding pair, lexicographic."""
    box = list(itertools.product(range(-L, L + 1), repeat=d))
    out = []
    for ys in itertools.product(box, repeat=m - 1):
        pos = list(ys) + [(0,) * d]
        if any(pos[i] == pos[j] for i in range(m) for j in range(i + 1, m)):
            out.append(ys)
    return out


def torus_second_moment(N: int, d: int, b: float, t: float) -> float:
    """E[X_0(t)^2] for the flat start at 1 on the torus, SRW exchange.

    ``f(x) = E[X_0 X_x]`` solves ``f' = 2 (A - 1) f + b delta_0 f`` with A
    the periodized SRW averaging operator.
    """
    n = N**d
    grid = np.array(list(itertools.product(range(N), repeat=d)))
    index = {tuple(x): i for i, x in enumerate(grid)}
    Q = -np.eye(n)
    for i, x in enumerate(grid):
        for k in range(d):
            for s in (1, -1):
                y = x.copy()
                y[k] = (y[k] + s) % N
                Q[i, index[tuple(y)]] += 1.0 / (2 * d)
    M = 2 * Q
    M[0, 0] += b
    f = expm(M * t) @ np.ones(n)
    return float(f[0])


def collision_moments(t: float, d: int = 3, n: int = 4000):
    """First two moments of the two-walk collision time on [0, t] for SRW,
    from the Markov property of the rate-2 difference walk."""
    s = np.linspace(0, t, n + 1)
    p = srw_return(2 * s, d)
    h = t / n
    first = np.concatenate([[0.0], np.cumsum((p[1:] + p[:-1]) / 2 * h)])
    # E T^2 = 2 int_0^t p(u) F(t - u) du, with F(r) = int_0^r p
    g = p * first[::-1]
    second = 2 * np.sum((g[1:] + g[:-1]) / 2 * h)
    return float(first[-1]), float(second)
