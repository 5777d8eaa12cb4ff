import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiowave.spectral_core import (
    Field,
    Grid,
    GridMismatchError,
    LPFamily,
    MultiplierSpec,
    StatementVoidError,
    UnsupportedRangeError,
    apply_multiplier,
    field_from_bytes,
    field_to_bytes,
    littlewood_paley,
    norm_classical,
    predicted_loss_sigma,
    read_field,
    rp_exponent,
    sp_exponent,
    write_field,
)


def plane_wave(grid, k):
    x1, x2 = grid.coords
    return Field(grid, np.exp(1j * (k[0] * x1 + k[1] * x2)))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(12)
    with pytest.raises(ValueError):
        Grid(4)
    g = Grid(16)
    assert g.spacing == pytest.approx(2 * np.pi / 16)
    lat = g.lattice()
    assert lat.min() == -8 and lat.max() == 7
    assert len({tuple(v) for v in lat}) == 16**2


def test_roundtrip_and_parseval(g64, rng):
    f = Field.random(g64, rng)
    back = Field.from_hat(g64, f.hat).values
    assert np.linalg.norm(back - f.values) / np.linalg.norm(f.values) <= 1e-12
    energy_x = np.sum(np.abs(f.values) ** 2)
    energy_k = np.sum(np.abs(f.hat) ** 2) / g64.N**2
    assert abs(energy_x - energy_k) / energy_x <= 1e-12


def test_multiplier_identity(g64, rng):
    f = Field.random(g64, rng)
    one = MultiplierSpec(g64, np.ones(g64.shape))
    assert np.array_equal(apply_multiplier(f, one).hat, f.hat)


def test_multiplier_mean_projection(g64):
    x1, _ = g64.coords
    f = Field(g64, 3 + np.exp(1j * x1))
    m = MultiplierSpec.from_function(g64, lambda k1, k2: (k1 == 0) & (k2 == 0))
    out = apply_multiplier(f, m).values
    assert np.allclose(out, 3.0, atol=1e-13)


def test_multiplier_laplacian_eigenfunction(g64):
    f = plane_wave(g64, (2, 1))
    m = MultiplierSpec.radial(g64, lambda r: r**2)
    assert np.allclose(apply_multiplier(f, m).values, 5 * f.values, atol=1e-12)


def test_multiplier_grid_mismatch(g64):
    f = Field.zeros(Grid(32))
    with pytest.raises(GridMismatchError):
        apply_multiplier(f, MultiplierSpec(g64, np.ones(g64.shape)))


def test_multiplier_composition(g64, rng):
    f = Field.random(g64, rng)
    m1 = MultiplierSpec(g64, rng.standard_normal(g64.shape))
    m2 = MultiplierSpec(g64, rng.standard_normal(g64.shape))
    a = apply_multiplier(apply_multiplier(f, m1), m2)
    b = apply_multiplier(f, m1 * m2)
    assert (a - b).norm() / f.norm() <= 1e-12


@pytest.mark.parametrize("N", [8, 32, 64, 128])
def test_lp_partition_of_unity(N):
    lp = LPFamily.build(Grid(N))
    total = sum(w.values for w in lp.windows)
    assert np.abs(total - 1).max() <= 1e-14


def test_lp_windows_support_and_scaling(g128):
    lp = LPFamily.build(g128)
    r = g128.abs_freq
    psi1 = lp.window(1)
    assert np.all(psi1[(r < 0.5) | (r > 2)] == 0)
    for j in range(2, lp.J + 1):
        expect = LPFamily.profile(1, r / 2.0 ** (j - 1))
        assert np.allclose(lp.window(j), expect, atol=1e-15)
        assert lp.windows[j].support_violation() == 0.0
    assert np.all(lp.q.values[r <= 2] == 1)
    assert np.all(lp.rho.values[r <= 0.5] == 1)
    assert np.all(lp.rho.values[r >= 2] == 0)


def test_lp_constant_field(g64):
    f = Field(g64, np.full(g64.shape, 2.5 + 0j))
    pieces = littlewood_paley(f, LPFamily.build(g64))
    assert np.allclose(pieces[0].values, f.values, atol=1e-14)
    assert all(p.norm() <= 1e-13 for p in pieces[1:])


@pytest.mark.parametrize("j0", [1, 2, 3, 4])
def test_lp_plane_wave_two_pieces(g64, j0):
    f = plane_wave(g64, (2**j0, 0))
    pieces = littlewood_paley(f, LPFamily.build(g64))
    live = [j for j, p in enumerate(pieces) if p.norm() > 1e-13]
    assert set(live) <= {j0, j0 + 1}


def test_lp_reconstruction(g64, rng):
    f = Field.random(g64, rng)
    pieces = littlewood_paley(f, LPFamily.build(g64))
    total = pieces[0]
    for p in pieces[1:]:
        total = total + p
    assert (total - f).norm() / f.norm() <= 1e-12


def test_zygmund_constant(g64):
    f = Field(g64, np.full(g64.shape, -1.5 + 2j))
    assert norm_classical(f, "Czyg", 0.7).value == pytest.approx(abs(-1.5 + 2j), rel=1e-12)


@pytest.mark.parametrize("j,s", [(2, 0.5), (3, 1.0), (4, 0.6)])
def test_zygmund_plane_wave(g64, j, s):
    f = plane_wave(g64, (0, 2**j))
    # oracle: the largest weighted window value at |k| = 2^j
    oracle = max(2.0 ** (i * s) * float(LPFamily.profile(i, 2.0**j)) for i in range(10))
    val = norm_classical(f, "Czyg", s).value
    assert val == pytest.approx(oracle, rel=1e-10)
    assert 0.5 <= val / 2.0 ** (j * s) <= 2.0 * (1 + 1e-12)


@pytest.mark.parametrize("k,s", [((8, 0), 1.0), ((3, 4), 0.5), ((16, 16), -0.5)])
def test_hsp2_plane_wave(g64, k, s):
    f = plane_wave(g64, k)
    bracket = math.sqrt(1 + k[0] ** 2 + k[1] ** 2)
    ratio = norm_classical(f, "Hsp", s, 2).value / (bracket**s * f.norm())
    assert 0.5 <= ratio <= 2.0


@pytest.mark.parametrize("space,p", [("Lp", 1.5), ("Hsp", 1), ("Hsp", 3), ("Czyg", 2),
                                     ("Cminus", 2), ("Hsp", math.inf)])
def test_norm_homogeneity_and_zero(g64, rng, space, p):
    f = Field.random(g64, rng)
    a = norm_classical(f, space, 0.5, p).value
    b = norm_classical(f * (-3 + 4j), space, 0.5, p).value
    assert b == pytest.approx(5 * a, rel=1e-12)
    assert a > 0
    assert norm_classical(Field.zeros(g64), space, 0.5, p).value == 0.0


def test_norm_errors_and_flags(g64, rng):
    f = Field.random(g64, rng)
    with pytest.raises(UnsupportedRangeError):
        norm_classical(f, "Hsp", 0, 0.5)
    rep = norm_classical(f, "Hsp", 0, math.inf)
    assert rep.surrogate
    assert '"surrogate": true' in rep.to_json()


def test_hsp_monotone_in_s(g64, rng):
    lp = LPFamily.build(g64)
    f = Field.from_hat(g64, (1 - lp.q.values) * Field.random(g64, rng).hat)
    for p in (1.0, 2.0, 4.0):
        vals = [norm_classical(f, "Hsp", s, p).value for s in (-0.5, 0.0, 0.5, 1.0)]
        assert all(a <= 2 * b for a, b in zip(vals, vals[1:]))


def test_cminus_smooth_vs_rough(g64, rng):
    x1, _ = g64.coords
    smooth = Field(g64, np.sin(x1) + 0j)
    assert norm_classical(smooth, "Cminus", 0.5).value < 3.0
    rough = Field.random(g64, rng)
    assert norm_classical(rough, "Cminus", 1.5).value > norm_classical(rough, "Cminus", 0.5).value


def test_exponent_values():
    # frozen values of the closed-form exponents
    assert sp_exponent(2, 5) == 0
    assert sp_exponent(1, 2) == pytest.approx(0.25)
    assert sp_exponent(math.inf, 3) == pytest.approx(0.5)
    assert rp_exponent(2, 2) == 0
    assert rp_exponent(1, 2) == pytest.approx(1.0)
    assert rp_exponent(0.5, 2) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        sp_exponent(0, 2)
    with pytest.raises(ValueError):
        rp_exponent(-1, 2)


def test_predicted_sigma():
    assert predicted_loss_sigma(3, 2, 2, 0.05) == 0.0
    assert predicted_loss_sigma(0.5, 1, 2, 0.05) == pytest.approx(0.3)
    assert predicted_loss_sigma(1.0, 1, 2, 0.1) == pytest.approx(0.1)
    with pytest.raises(StatementVoidError):
        predicted_loss_sigma(1.0, 0.5, 2, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 50.0), st.integers(2, 6))
def test_sp_conjugate_symmetry(p, n):
    q = math.inf if p == 1.0 else p / (p - 1)
    assert sp_exponent(p, n) == pytest.approx(sp_exponent(q, n), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(2, 5))
def test_rp_formula(p, n):
    assert rp_exponent(p, n) == pytest.approx(4 * sp_exponent(p, n) + 2 * max(0, 1 / p - 1))


def test_field_io(tmp_path, rng):
    g = Grid(16)
    f = Field.random(g, rng)
    buf = field_to_bytes(f)
    assert buf[:4] == b"WPF1" and len(buf) == 12 + 16 * 256
    back, end = field_from_bytes(buf)
    assert end == len(buf) and np.array_equal(back.values, f.values)
    write_field(tmp_path / "f.wpf", f)
    assert np.array_equal(read_field(tmp_path / "f.wpf").values, f.values)
