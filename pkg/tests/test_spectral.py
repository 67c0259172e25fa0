import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from padiff.diffwalk import RelativeState, collision_count
from padiff.green import b2, green_scalar
from padiff.kernels import drift, srw
from padiff.spectral import (
    bm,
    build_chi_operator,
    build_K,
    chi_eigen,
    check_intermittency,
    extrapolate_geometric,
    spectral_radius,
)
from oracles import srw_green_m

A3 = srw(3)


def test_K_m2_is_green_scalar():
    K = build_K(2, A3, 3)
    assert K.matrix.shape == (1, 1)
    assert K.matrix[0, 0] == pytest.approx(green_scalar(A3).value, rel=1e-4)


def test_K_invariants_full_basis():
    K = build_K(3, A3, 1, reduce=False)
    M = K.matrix
    assert np.allclose(M, M.T, atol=1e-10)
    assert np.all(M >= 0)
    assert np.all(np.diag(M) >= K.sharp - 1e-12)


def test_K_entries_against_bessel_oracle():
    K = build_K(3, A3, 1, reduce=False)
    idx = K.index
    x = RelativeState(3, ((0, 0, 0), (1, 0, 0)))
    y = RelativeState(3, ((0, 1, 0), (0, 0, 0)))
    z = y.as_array() - x.as_array()
    ref = np.sqrt(collision_count(x) * collision_count(y)) * srw_green_m(3, 3, z)
    assert K.matrix[idx[x.coords], idx[y.coords]] == pytest.approx(ref, rel=1e-5)


def test_reduced_basis_keeps_spectrum():
    full = spectral_radius(build_K(3, A3, 2, reduce=False)).value
    red = spectral_radius(build_K(3, A3, 2, reduce=True)).value
    assert red == pytest.approx(full, rel=1e-9)


def test_power_iteration_scalar():
    assert spectral_radius(np.array([[2.5]])).value == 2.5


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 6), elements=st.floats(0.01, 1.0)))
def test_power_iteration_matches_eigvalsh(B):
    S = B + B.T
    r = spectral_radius(S, tol=1e-13)
    assert r.converged
    assert r.value == pytest.approx(np.linalg.eigvalsh(S)[-1], rel=1e-9)


def test_power_iteration_reports_nonconvergence():
    S = np.array([[1.0, 0.999], [0.999, 1.0]]) + np.diag([0.0, 1e-9])
    with pytest.warns(RuntimeWarning):
        r = spectral_radius(S, tol=1e-300, max_iter=5)
    assert not r.converged


@pytest.mark.parametrize("d", [3, 4])
def test_bm2_equals_b2(d):
    a = srw(d)
    assert bm(2, a).value == pytest.approx(b2(a).value, rel=1e-3)


def test_bm3_boxes_and_bounds():
    r = bm(3, A3, boxes=(1, 2, 3))
    assert np.all(np.diff(r.lambdas) >= -1e-12)
    lower = b2(A3).value / 2
    assert r.bm_upper >= r.value >= lower
    assert r.bm_upper < 2 / srw_green_m(3, 3)
    assert "heuristic" in r.note


def test_bm_refuses_asymmetric():
    with pytest.raises(ValueError):
        bm(2, drift(0.7))


def test_extrapolate_geometric_exact():
    Ls = [2, 4, 6]
    lams = [3.0 - 0.5 * 0.6**L for L in Ls]
    lim, _, resid, _ = extrapolate_geometric(Ls, lams)
    assert lim == pytest.approx(3.0, rel=1e-10)
    assert resid == pytest.approx(0.0, abs=1e-10)


def test_chi_operator_structure():
    C = build_chi_operator(3, 0.7, srw(1), 3)
    M = C.matrix.toarray()
    assert np.allclose(M, M.T)
    off = M - np.diag(np.diag(M))
    assert np.all(off >= 0)
    with pytest.raises(ValueError):
        build_chi_operator(2, -1.0, srw(1), 3)


@pytest.mark.parametrize("m,a,L", [(2, srw(1), 20), (2, A3, 4), (3, srw(1), 6), (3, A3, 1)])
def test_chi_sandwich_and_monotonicity(m, a, L):
    bs = np.linspace(0, 4, 9)
    vals = np.array([chi_eigen(m, b, a, L).value for b in bs])
    for b, v in zip(bs, vals):
        s = m * (m - 1) / 2
        assert b * s - m - 1e-9 <= v <= b * s + 1e-9
    assert np.all(np.diff(vals) >= -1e-9)
    assert np.all(vals[1:-1] <= (vals[:-2] + vals[2:]) / 2 + 1e-9)
    bigger = np.array([chi_eigen(m, b, a, L + 1).value for b in bs])
    assert np.all(bigger >= vals - 1e-9)


def test_chi_methods_agree():
    vals = [chi_eigen(2, 1.7, A3, 5, method=k).value for k in ("dense", "lanczos", "power")]
    assert max(vals) - min(vals) < 1e-7


def test_chi_zero_b():
    for L in (2, 4, 8):
        assert chi_eigen(2, 0.0, A3, L).value <= 0


def test_chi_sign_change_brackets_b2():
    assert chi_eigen(2, 1.0, A3, 8).value < 0
    assert chi_eigen(2, 1.9, A3, 8).value > 0


def test_chi_large_b_asymptote():
    for m in (2, 3):
        v = chi_eigen(m, 100.0, A3, 1).value
        assert v / (100 * m) == pytest.approx((m - 1) / 2, rel=0.05)


def test_intermittency_order():
    assert check_intermittency(1.9, A3, 3, 2).order == 1
    r = check_intermittency(1.1, A3, 3, 3)
    assert r.order == 2 and r.monotone
