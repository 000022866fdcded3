import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import duallab as dl
from duallab.preferences import (
    UtilityPair,
    biconjugate_by_grid,
    certify_pair,
    conjugate_by_grid,
)


def test_log_conjugate_values(log_pair):
    assert log_pair.v(1.0) == pytest.approx(-1.0, abs=1e-15)
    assert log_pair.inverse_marginal(2.0) == pytest.approx(0.5, abs=1e-15)
    assert abs(log_pair.v(0.5) - conjugate_by_grid(log_pair.u, 0.5)) < 1e-6


def test_power_conjugate_against_grid_oracle():
    pair = dl.make_power_utility(0.5)
    assert abs(pair.v(1.0) - 1.0) < 1e-12
    assert abs(conjugate_by_grid(pair.u, 1.0) - 1.0) < 1e-6
    for y in (0.5, 1.0, 2.0):
        assert pair.u_prime(pair.inverse_marginal(y)) == pytest.approx(y, abs=1e-8)
    ys = np.linspace(0.1, 10, 50)
    assert np.all(np.diff(pair.v(ys)) < 0)


def test_power_rejects_bad_alpha():
    for alpha in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError, match="alpha"):
            dl.make_power_utility(alpha)


def test_conjugacy_suite_on_documented_grids(log_pair):
    # biconjugacy and marginal inversion for log and power families
    x_grid = np.geomspace(0.1, 10.0, 13)
    y_grid = np.geomspace(0.1, 10.0, 13)
    pairs = [log_pair] + [dl.make_power_utility(a) for a in (0.3, 0.5, 0.7)]
    for pair in pairs:
        for x in x_grid:
            assert abs(pair.u(x) - biconjugate_by_grid(pair.v, float(x))) < 1e-6
        inv = pair.u_prime(pair.inverse_marginal(y_grid))
        assert np.max(np.abs(inv - y_grid)) < 1e-8


def test_certification_rejects_wrong_conjugate():
    bad = UtilityPair(
        name="bad-log",
        u=np.log,
        u_prime=lambda x: 1.0 / np.asarray(x, dtype=float),
        v=lambda y: -np.log(y),  # missing the -1
        v_prime=lambda y: -1.0 / np.asarray(y, dtype=float),
    )
    with pytest.raises(ValueError, match="grid oracle"):
        certify_pair(bad)


def test_quadratic_penalty(quad_penalty):
    assert quad_penalty.rho(0.0) == 0.0
    assert quad_penalty.rho_prime(-0.125) == -0.125
    assert quad_penalty.rho_prime_inv(quad_penalty.rho_prime(0.3)) == pytest.approx(0.3, abs=1e-16)
    xs = np.linspace(-2, 2, 41)
    vals = quad_penalty.rho(xs)
    assert np.all(vals >= 0) and vals[20] == 0.0 and np.all(np.delete(vals, 20) > 0)


def test_penalty_scale():
    pen = dl.make_quadratic_penalty(scale=4.0)
    assert pen.rho(2.0) == pytest.approx(8.0)
    assert pen.rho_prime_inv(1.0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        dl.make_quadratic_penalty(scale=0.0)


def test_fenchel_gap_values(log_pair):
    x = 1.7
    assert dl.fenchel_gap(log_pair, x, log_pair.u_prime(x)) == pytest.approx(0.0, abs=1e-12)
    assert dl.fenchel_gap(log_pair, 1.0, 2.0) == pytest.approx(1.0 - math.log(2.0), abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(1e-3, 1e3), y=st.floats(1e-3, 1e3))
def test_fenchel_gap_nonnegative(x, y):
    pair = _LOG
    assert dl.fenchel_gap(pair, x, y) >= -1e-12


@settings(max_examples=50, deadline=None)
@given(alpha=st.sampled_from([0.3, 0.5, 0.7]), y=st.floats(1e-2, 1e2))
def test_marginal_inversion_property(alpha, y):
    pair = _POWERS[alpha]
    assert pair.u_prime(pair.inverse_marginal(y)) == pytest.approx(y, rel=1e-10)


_LOG = dl.make_log_utility()
_POWERS = {a: dl.make_power_utility(a) for a in (0.3, 0.5, 0.7)}
