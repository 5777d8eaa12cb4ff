import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiowave.cosphere import (
    CospherePoint,
    DirectionGrid,
    PhaseFunctionSample,
    ball_members,
    ball_volume,
    direction_count,
    directions,
    maximal_Mlambda,
    metric_d,
    quasi_triangle_constant,
    volume_growth,
    write_ball_stats,
)
from fiowave.spectral_core import Grid

angles = st.floats(0, 2 * math.pi)
coords = st.floats(0, 2 * math.pi)


def pt(x, th):
    return CospherePoint(tuple(x), (math.cos(th), math.sin(th)))


def test_point_validation():
    with pytest.raises(ValueError):
        CospherePoint((0.0, 0.0), (1.0, 0.1))
    p = CospherePoint((0.0, 0.0), (0.6, 0.8))
    assert abs(np.linalg.norm(p.omega) - 1) <= 1e-14


def test_metric_examples():
    a = CospherePoint((1.0, 1.0), (1.0, 0.0))
    assert metric_d(a, a) == 0.0
    b = CospherePoint((1.01, 1.0), (1.0, 0.0))
    assert metric_d(a, b) == pytest.approx(math.sqrt(0.01 + 0.0001), rel=1e-9)
    assert metric_d(a, b) == pytest.approx(0.100499, abs=1e-6)
    c = CospherePoint((1.0, 1.01), (1.0, 0.0))
    assert metric_d(a, c) == pytest.approx(0.01, rel=1e-9)


def test_metric_periodic():
    a = CospherePoint((0.005, 0.0), (1.0, 0.0))
    b = CospherePoint((2 * math.pi - 0.005, 0.0), (1.0, 0.0))
    assert metric_d(a, b) == pytest.approx(math.sqrt(0.01 + 0.0001), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(coords, coords, angles, coords, coords, angles)
def test_metric_symmetric_nonnegative(x1, x2, t1, y1, y2, t2):
    a, b = pt((x1, x2), t1), pt((y1, y2), t2)
    assert metric_d(a, b) == metric_d(b, a)
    assert metric_d(a, b) >= 0


def test_quasi_triangle_constant():
    assert quasi_triangle_constant(10_000, rng=7) <= 3.0


@pytest.mark.parametrize("j", range(1, 9))
def test_direction_grid(j):
    d = directions(j)
    assert len(d) == direction_count(j) == math.ceil(2 * math.pi * 2 ** (j / 2))
    assert np.allclose(np.linalg.norm(d, axis=1), 1, atol=1e-14)
    assert DirectionGrid(j).max_neighbor_angle(j) <= 2 ** (-j / 2 + 1)


def test_ball_tiny_radius():
    g = Grid(64)
    x = tuple(c[5, 9] for c in g.coords)
    m = ball_members(CospherePoint(x, (1.0, 0.0)), 0.5 * g.spacing**2, 4, g)
    assert len(m) >= 1
    assert np.all(m[:, 1] == 5) and np.all(m[:, 2] == 9)


def test_ball_unit_volume():
    g = Grid(64)
    m = ball_members(CospherePoint((1.0, 2.0), (1.0, 0.0)), 1.0, 4, g)
    vol = ball_volume(len(m), 4, g)
    assert 0.25 <= vol <= 4.0


def test_ball_rejects_bad_radius():
    with pytest.raises(ValueError):
        ball_members(CospherePoint((0.0, 0.0), (1.0, 0.0)), 0.0, 2, Grid(16))


def test_ball_doubling():
    g = Grid(64)
    x = tuple(c[10, 20] for c in g.coords)
    c = CospherePoint(x, directions(4)[3])
    for tau in (0.1, 0.2, 0.3, 0.4, 0.5):
        a = len(ball_members(c, tau, 4, g))
        b = len(ball_members(c, 2 * tau, 4, g))
        assert b / a <= 2 ** (2 * 2 + 1)


def test_volume_growth_slope(tmp_path):
    g = Grid(128)
    taus = np.geomspace(0.05, 0.5, 6)
    counts = volume_growth(g, 10, taus, samples=40, rng=3)
    slope = np.polyfit(np.log2(taus), np.log2(counts), 1)[0]
    assert abs(slope - 4) <= 0.3
    write_ball_stats(tmp_path / "balls.csv", taus, counts)
    lines = (tmp_path / "balls.csv").read_text().splitlines()
    assert lines[0] == "tau,count" and len(lines) == 7


def test_phase_sample_validation():
    g = Grid(16)
    with pytest.raises(ValueError):
        PhaseFunctionSample(g, 2, np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        PhaseFunctionSample(g, 1, np.full((direction_count(1), 16, 16), np.nan))


def test_maximal_constant():
    g = Grid(16)
    v = np.full((direction_count(2), 16, 16), -2.5)
    out = maximal_Mlambda(PhaseFunctionSample(g, 2, v), 0.7).values
    assert np.allclose(out, 2.5, rtol=1e-12)


def test_maximal_rejects_lambda():
    g = Grid(16)
    with pytest.raises(ValueError):
        maximal_Mlambda(PhaseFunctionSample(g, 1, np.zeros((direction_count(1), 16, 16))), 0.0)


def _brute_maximal(g, j, vals, lam, radii, k, i1, i2):
    dirs = directions(j)
    x = tuple(c[i1, i2] for c in g.coords)
    center = CospherePoint(x, tuple(dirs[k]))
    best = abs(vals[k, i1, i2])
    for r in radii:
        mem = ball_members(center, r, j, g)
        if len(mem):
            avg = np.mean(np.abs(vals[mem[:, 0], mem[:, 1], mem[:, 2]]) ** lam)
            best = max(best, avg ** (1 / lam))
    return best


def test_maximal_matches_enumeration(rng):
    g = Grid(32)
    j = 2
    vals = rng.standard_normal((direction_count(j), 32, 32))
    radii = [0.13, 0.37, 0.81, 1.7, 3.3]
    out = maximal_Mlambda(PhaseFunctionSample(g, j, vals), 1.0, radii).values
    for _ in range(15):
        k, i1, i2 = rng.integers(direction_count(j)), rng.integers(32), rng.integers(32)
        ref = _brute_maximal(g, j, vals, 1.0, radii, k, i1, i2)
        assert out[k, i1, i2] == pytest.approx(ref, rel=1e-10)


def test_maximal_ball_indicator():
    g = Grid(32)
    j = 2
    x = tuple(c[16, 16] for c in g.coords)
    center = CospherePoint(x, tuple(directions(j)[0]))
    mem = ball_members(center, 0.8, j, g)
    vals = np.zeros((direction_count(j), 32, 32))
    vals[mem[:, 0], mem[:, 1], mem[:, 2]] = 1.0
    out = maximal_Mlambda(PhaseFunctionSample(g, j, vals), 1.0).values
    assert np.all(out[mem[:, 0], mem[:, 1], mem[:, 2]] == 1.0)
    # decay: far from the ball the value tracks the ball-measure ratio and stays below 1
    assert out[0, 0, 0] < 0.5
    assert out[0, 16, 16] >= out[0, 16, 24] >= out[0, 16, 31] > 0


def test_maximal_domination_and_power_means(rng):
    g = Grid(32)
    j = 3
    vals = rng.standard_normal((direction_count(j), 32, 32)) ** 3
    s = PhaseFunctionSample(g, j, vals)
    m_half = maximal_Mlambda(s, 0.5).values
    m_one = maximal_Mlambda(s, 1.0).values
    m_two = maximal_Mlambda(s, 2.0).values
    assert np.all(m_one >= np.abs(vals))
    assert np.all(m_half >= np.abs(vals))
    idx = tuple(rng.integers(0, sh, 500) for sh in vals.shape)
    assert np.all(m_half[idx] <= m_one[idx] * (1 + 1e-12))
    assert np.all(m_one[idx] <= m_two[idx] * (1 + 1e-12))


def test_maximal_boundedness_stable():
    ratios = []
    for N in (64, 128):
        g = Grid(N)
        vals = np.random.default_rng(N).standard_normal((direction_count(2), N, N))
        out = maximal_Mlambda(PhaseFunctionSample(g, 2, vals), 1.0).values
        ratios.append(np.linalg.norm(out) / np.linalg.norm(vals))
    assert ratios[1] == pytest.approx(ratios[0], rel=0.1)
