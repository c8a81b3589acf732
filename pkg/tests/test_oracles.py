import math
from fractions import Fraction

import pytest

from oracles import (
    FROZEN,
    bang_bang_arc,
    double_integrator_min_time,
    layout_size,
    rocket_field,
    simpson_t_squared,
    vdp_field,
)


def test_simpson_exact_fraction():
    assert simpson_t_squared() == Fraction(1, 3)
    assert float(simpson_t_squared()) == FROZEN["simpson_t2"]


@pytest.mark.parametrize("d", [0.25, 1.0, 4.0])
def test_double_integrator_grid_search(d):
    T = double_integrator_min_time(d)
    assert abs(T - FROZEN["di_min_time"][d]) <= 2e-3 * FROZEN["di_min_time"][d]
    assert FROZEN["di_min_time"][d] == pytest.approx(2 * math.sqrt(d), rel=1e-15)


def test_bang_bang_arc_endpoint():
    pos, vel = bang_bang_arc(Fraction(2), Fraction(1))
    assert (float(pos), float(vel)) == FROZEN["di_bang_bang_final"]


@pytest.mark.parametrize("key", list(FROZEN["n_z"]))
def test_layout_enumeration(key):
    assert layout_size(*key) == FROZEN["n_z"][key]


def test_hand_evaluated_fields():
    for (x, u), want in FROZEN["vdp"].items():
        assert vdp_field(*x, u) == pytest.approx(want)
    for (x, u), want in FROZEN["rocket"].items():
        assert rocket_field(*x, u) == pytest.approx(want)
