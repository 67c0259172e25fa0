import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padiff.kernels import (
    StepDistribution,
    drift,
    heat_kernel,
    load_kernel,
    one_minus_structure,
    parse_kernel_config,
    reflect,
    srw,
    structure_function,
    symmetrize,
)
from oracles import poisson_heat


@st.composite
def kernels_1d2d(draw):
    d = draw(st.integers(1, 2))
    n = draw(st.integers(1, 4))
    offs = draw(
        st.lists(
            st.tuples(*[st.integers(-2, 2)] * d).filter(any),
            min_size=n,
            max_size=n,
            unique=True,
        )
    )
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    w = w / w.sum()
    return StepDistribution(d, tuple(offs), tuple(w))


def test_symmetrize_drift():
    s = symmetrize(drift(0.7))
    assert dict(s.support) == pytest.approx({(1,): 0.5, (-1,): 0.5})


def test_symmetrize_one_sided_d2():
    a = StepDistribution(2, ((1, 0),), (1.0,))
    assert dict(symmetrize(a).support) == pytest.approx({(1, 0): 0.5, (-1, 0): 0.5})


def test_reflect_drift():
    r = dict(reflect(drift(0.7)).support)
    assert r[(1,)] == pytest.approx(0.3) and r[(-1,)] == pytest.approx(0.7)


def test_symmetric_fixed_points():
    a = srw(3)
    assert symmetrize(a) == a
    assert reflect(a) == a


@settings(max_examples=60, deadline=None)
@given(kernels_1d2d())
def test_symmetrize_reflect_algebra(a):
    s = symmetrize(a)
    assert symmetrize(s) == s
    assert reflect(reflect(a)) == a
    assert symmetrize(reflect(a)) == s
    assert s.is_symmetric


def test_rejects_bad_laws():
    with pytest.raises(ValueError):
        StepDistribution(1, ((1,), (-1,)), (0.7, 0.7))
    with pytest.raises(ValueError):
        StepDistribution(1, ((1,),), (-1.0,))


def test_structure_function_srw():
    lam = np.array([[0.0, 0.0, 0.0], [math.pi, 0, 0], [0.3, -0.2, 1.1]])
    expect = np.cos(lam).mean(axis=1)
    assert np.allclose(structure_function(srw(3), lam), expect)
    assert np.allclose(one_minus_structure(srw(3), lam), 1 - expect)


def test_structure_function_needs_symmetry():
    with pytest.raises(ValueError):
        structure_function(drift(0.7), [0.1])


def test_one_minus_structure_small_lambda():
    lam = np.array([1e-9, 0.0, 0.0])
    # 1 - cos loses everything here; the sin form keeps it
    assert one_minus_structure(srw(3), lam) == pytest.approx(1e-18 / 6, rel=1e-6)


@pytest.mark.parametrize("a", [srw(1), srw(2), srw(3), load_kernel("srw(1)")])
def test_heat_kernel_matches_poisson_series(a):
    t = 1.7
    tab = heat_kernel(a, t, box=10)
    ref = poisson_heat(a.offsets, a.probs, t)
    for x, p in ref.items():
        if max(abs(c) for c in x) <= 10:
            assert tab.at(0, x) == pytest.approx(p, abs=1e-10)


def test_heat_kernel_slices():
    tab = heat_kernel(srw(2), [0.0, 0.5, 3.0], box=12)
    assert tab.at(0, (0, 0)) == 1.0
    assert np.all(tab.values >= -1e-15)
    sums = tab.values.reshape(3, -1).sum(axis=1)
    assert np.all(sums <= 1 + 1e-12)
    assert np.allclose(sums, 1 - tab.truncation_mass)


def test_heat_kernel_truncation_warning():
    with pytest.warns(RuntimeWarning):
        tab = heat_kernel(srw(1), 50.0, box=3)
    assert tab.warning and tab.truncation_mass[0] > 0.1


@pytest.mark.parametrize("a", [srw(1), srw(2), load_kernel("drift(0.5)")])
def test_chapman_kolmogorov(a):
    s, t, B = 0.8, 1.3, 14
    ps = heat_kernel(a, s, B).values[0]
    pt = heat_kernel(a, t, B).values[0]
    pst = heat_kernel(a, s + t, B).values[0]
    from scipy.signal import fftconvolve

    conv = fftconvolve(ps, pt, mode="same")
    assert np.allclose(conv, pst, atol=1e-9)


def test_return_probability_monotone():
    times = np.linspace(0, 20, 41)
    p0 = heat_kernel(srw(3), times, box=25, tol=1.0).origin()
    assert np.all(np.diff(p0) <= 1e-14)


def test_sum_of_squares_is_doubled_time():
    a = srw(2)
    t = 1.1
    p = heat_kernel(a, t, 16).values[0]
    p2 = heat_kernel(a, 2 * t, 16).at(0, (0, 0))
    assert (p**2).sum() == pytest.approx(p2, abs=1e-10)


def test_kernel_config_and_names(tmp_path):
    f = tmp_path / "k.kernel"
    f.write_text("# two-step walk\ndim = 1\nstep = [1, 0.25]\nstep = [-1, 0.25]\nstep = [2, 0.25]\nstep = [-2, 0.25]\n")
    a = load_kernel(str(f))
    assert a.dim == 1 and a.max_offset == 2 and a.is_symmetric
    assert load_kernel("srw3") == srw(3) == load_kernel("srw", dim=3)
    assert load_kernel("drift(0.7)") == drift(0.7)
    with pytest.raises(ValueError):
        load_kernel("srw")
    with pytest.raises(ValueError):
        parse_kernel_config("dim = 1\nstep = [1, 0.5]\n")
    with pytest.raises(ValueError):
        parse_kernel_config("step = [1, 1.0]\n")
