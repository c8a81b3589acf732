"""Independent reference computations for frozen test values.

Nothing here imports the package under test. Each oracle is deliberately
computed by a different route than the implementation (exact rational
arithmetic, brute-force search, index-set enumeration) and the resulting
numbers are frozen in ``FROZEN``; ``test_oracles.py`` re-derives them.
"""

from __future__ import annotations

import math
from fractions import Fraction


def simpson_t_squared() -> Fraction:
    """Simpson rule on t**2 over [0, 1] in exact arithmetic."""
    f0, fm, f1 = Fraction(0), Fraction(1, 4), Fraction(1)
    return Fraction(1, 6) * (f0 + 4 * fm + f1)


def bang_bang_arc(t: Fraction, t_switch: Fraction) -> tuple:
    """Double integrator from rest, u = +1 then -1, exact rational state."""
    if t <= t_switch:
        return (t * t / 2, t)
    s = t - t_switch
    v_s = t_switch
    return (t_switch * t_switch / 2 + v_s * s - s * s / 2, v_s - s)


def double_integrator_min_time(d: float, resolution: int = 4000) -> float:
    """Brute-force minimum time for a rest-to-rest move over distance ``d``.

    Scans the final time on a grid and accepts the first time for which a
    switch time exists that reaches position ``d`` with zero velocity. Only
    single-switch bang-bang controls are searched, which is sufficient for
    the double integrator.
    """
    t_hi = 4.0 * math.sqrt(d) + 1.0
    for i in range(1, resolution + 1):
        T = t_hi * i / resolution
        # velocity zero at T forces the switch at T/2; scan it anyway
        best = math.inf
        for j in range(0, 201):
            s = T * j / 200
            pos = s * s / 2 + s * (T - s) - (T - s) ** 2 / 2
            vel = s - (T - s)
            best = min(best, abs(pos - d) + abs(vel))
        if best <= d * 2e-3:
            return T
    return math.nan


def layout_size(p: int, q: int, N: int, param: str, form: str) -> int:
    """Decision-vector length by enumerating the index sets."""
    x_idx = [k / 2 for k in range(2 * N + 1)] if form == "uncompressed" else list(range(N + 1))
    if param in ("quadratic", "linear"):
        u_idx = [k / 2 for k in range(2 * N + 1)]
    elif param == "mean":
        u_idx = list(range(N + 1))
    else:
        u_idx = list(range(N))
    return 1 + p * len(x_idx) + q * len(u_idx)


def vdp_field(x1, x2, u):
    return (x2, (1 - x1 * x1) * x2 - x1 + u)


def rocket_field(s, v, m, u):
    return (v, (u - 0.02 * v * v) / m, -0.01 * u * u)


FROZEN = {
    "simpson_t2": 1.0 / 3.0,
    "di_min_time": {0.25: 1.0, 1.0: 2.0, 4.0: 4.0},
    "n_z": {
        (2, 1, 15, "constant", "compressed"): 48,
        (2, 1, 15, "quadratic", "compressed"): 64,
        (3, 1, 10, "mean", "uncompressed"): 75,
    },
    "vdp": {((1, 1), 0): (1, -1), ((0.8, 0), 0): (0, -0.8), ((0, 1), 1): (1, 2), ((0, 0), 0): (0, 0)},
    "rocket": {((0, 0, 1), 1): (0, 1, -0.01), ((0, 1, 1), 0): (1, -0.02, 0), ((0, 0, 2), 1): (0, 0.5, -0.01)},
    "di_bang_bang_final": (1.0, 0.0),
    "exp1": math.e,
}
