import numpy as np
from hypothesis import given, settings, strategies as st

from disperse import scenes
from disperse.billiard import (
    OrientedLine,
    billiard_step,
    involution,
    inverse_step,
    phase_to_line,
    reflect_velocity,
)
from disperse.geometry import enumerate_instances, random_phase_point
from disperse.scaling import fit_loglog
from disperse.singularity import even_odd_decompose

TWO_DISK = scenes.two_disk()
unit = st.floats(-1.0, 1.0, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


def _unit(xs):
    x = np.asarray(xs, dtype=float)
    n = np.linalg.norm(x)
    return x / n if n > 1e-3 else None


@given(st.lists(unit, min_size=3, max_size=3), st.lists(unit, min_size=3, max_size=3))
def test_reflection_algebra(a, b):
    v, n = _unit(a), _unit(b)
    if v is None or n is None:
        return
    w = reflect_velocity(v, n)
    assert abs(np.linalg.norm(w) - 1) < 1e-12
    assert abs(w @ n + v @ n) < 1e-12
    assert np.max(np.abs(reflect_velocity(w, n) - v)) < 1e-12


@given(seeds)
def test_involution_on_phase_points(seed):
    x = random_phase_point(TWO_DISK, np.random.default_rng(seed))
    y = involution(TWO_DISK, x)
    assert np.max(np.abs(involution(TWO_DISK, y).v - x.v)) < 1e-12


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_step_then_inverse(seed):
    x = random_phase_point(TWO_DISK, np.random.default_rng(seed), min_cos=1e-3)
    y, ev = billiard_step(TWO_DISK, x)
    if ev.tangency or ev.cos_phi < 1e-3:
        return
    z, _ = inverse_step(TWO_DISK, y)
    assert z.instance == x.instance and z.distance(x) < 1e-9


@given(st.lists(unit, min_size=2, max_size=2), st.lists(unit, min_size=2, max_size=2))
def test_line_coordinates(q, d):
    v = _unit(d)
    if v is None:
        return
    l = OrientedLine.through(q, v)
    assert abs(l.p @ l.v) < 1e-12
    again = OrientedLine.through(l.p, l.v)
    assert np.max(np.abs(again.p - l.p)) < 1e-12


@given(seeds)
def test_phase_to_line_contains_q(seed):
    x = random_phase_point(TWO_DISK, np.random.default_rng(seed))
    l = phase_to_line(x)
    gap = x.q - l.p
    assert np.linalg.norm(gap - (gap @ l.v) * l.v) < 1e-12


@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=6))
def test_even_odd_reconstruction(coefs):
    F = lambda u: np.polyval(coefs, u)
    t = even_odd_decompose(F, np.linspace(0.0, 0.5, 21))
    assert t.residual < 1e-12


@given(st.floats(-2, 2), st.floats(0.1, 10))
def test_fit_recovers_exponent(slope, scale):
    xs = np.logspace(-3, -1, 6)
    rep = fit_loglog(xs, scale * xs**slope)
    assert abs(rep.slope - slope) < 1e-9


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.01, 0.5), st.floats(0.0, 0.5))
def test_instance_enumeration_is_monotone(x, y, r, extra):
    small = set(enumerate_instances(TWO_DISK, [x, y], r))
    assert small <= set(enumerate_instances(TWO_DISK, [x, y], r + extra))
