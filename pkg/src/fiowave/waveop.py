"""Divergence-form operators ``L = sum D_i a_ij D_j + sum a_j D_j + a_0`` on the torus.

``D = -i grad``, so with real symmetric elliptic ``a_ij`` and no lower-order
terms ``L`` is the positive operator ``-div(a grad)``.  This module assembles
``L`` and its exact lattice adjoint, splits the principal part into a smooth
paradifferential piece plus a rough remainder, and builds the approximate
square root ``b`` of the smoothed principal symbol together with the remainder
operators used by the wave solver.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .spectral_core import Field, Grid, _lp_for, field_from_bytes, field_to_bytes, fft, ifft
from .symbols import Symbol, quantize_apply, separable_expand, smooth_split

__all__ = [
    "EllipticityError",
    "ShiftTooSmallError",
    "Coefficients",
    "WaveOperator",
    "HalfWaveData",
    "assemble_L",
    "paradiff_split",
    "principal_symbol_A",
    "sqrt_symbol",
    "build_Ltilde",
    "low_regularizer",
    "write_coefficients",
    "read_coefficients",
]

Op = Callable[[Field], Field]


class EllipticityError(ValueError):
    """Raised when the measured ellipticity constant is not positive."""


class ShiftTooSmallError(ValueError):
    """Raised when ``b + ic`` comes too close to zero on the lattice."""


def _min_eig(a: np.ndarray) -> float:
    # a: (n, n, ...) -> min over x of the smallest eigenvalue of the symmetric part
    n = a.shape[0]
    m = np.moveaxis(a.reshape(n, n, -1), -1, 0)
    m = 0.5 * (m + np.swapaxes(m, 1, 2))
    return float(np.linalg.eigvalsh(m).min())


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Coefficient fields of ``L``.

    Attributes
    ----------
    aij : ndarray, shape (n, n, N, N)
        Real principal coefficients.
    aj : ndarray, shape (n, N, N)
        Complex first-order coefficients.
    a0 : ndarray, shape (N, N)
        Complex zeroth-order coefficient.
    r : float
        Declared Zygmund regularity of ``aij`` (``inf`` for smooth data).
    kappa0 : float
        Declared ellipticity constant; must not exceed the measured one.
    """

    grid: Grid
    aij: np.ndarray
    aj: np.ndarray
    a0: np.ndarray
    r: float = math.inf
    kappa0: float = 0.0
    symmetric: bool = True

    def __post_init__(self):
        g = self.grid
        n = g.n
        aij = np.asarray(self.aij)
        if np.iscomplexobj(aij):
            if np.abs(aij.imag).max(initial=0.0) > 0:
                raise ValueError("principal coefficients must be real")
            aij = aij.real
        aij = np.ascontiguousarray(aij, dtype=float)
        aj = np.ascontiguousarray(self.aj, dtype=complex)
        a0 = np.ascontiguousarray(self.a0, dtype=complex)
        if aij.shape != (n, n) + g.shape or aj.shape != (n,) + g.shape or a0.shape != g.shape:
            raise ValueError("coefficient shapes do not match the grid")
        if self.symmetric and not np.array_equal(aij, np.swapaxes(aij, 0, 1)):
            raise ValueError("symmetric flag set but a_ij != a_ji")
        for arr in (aij, aj, a0):
            arr.setflags(write=False)
        object.__setattr__(self, "aij", aij)
        object.__setattr__(self, "aj", aj)
        object.__setattr__(self, "a0", a0)
        kap = self.measured_kappa
        if not kap > 0:
            raise EllipticityError(f"measured ellipticity {kap:.3g} is not positive")
        if self.kappa0 > kap * (1 + 1e-12):
            raise EllipticityError(f"declared kappa0={self.kappa0} exceeds measured {kap:.6g}")

    @cached_property
    def measured_kappa(self) -> float:
        """``min_x min_{|eta|=1} sum a_ij(x) eta_i eta_j``."""
        return _min_eig(self.aij)

    @property
    def self_adjoint(self) -> bool:
        return self.symmetric and not np.any(self.aj) and not np.any(self.a0.imag)

    @classmethod
    def constant(cls, grid: Grid, matrix=None, aj=None, a0=0.0, **kw) -> "Coefficients":
        """Constant coefficients (default: the identity matrix, so ``L = -Laplacian``)."""
        n = grid.n
        M = np.eye(n) if matrix is None else np.asarray(matrix, dtype=float)
        aij = M[:, :, None, None] * np.ones(grid.shape)
        vec = np.zeros(n) if aj is None else np.asarray(aj, dtype=complex)
        ajf = vec[:, None, None] * np.ones(grid.shape)
        kw.setdefault("kappa0", float(np.linalg.eigvalsh(0.5 * (M + M.T)).min()))
        kw.setdefault("symmetric", bool(np.array_equal(M, M.T)))
        return cls(grid, aij, ajf, complex(a0) * np.ones(grid.shape), **kw)


def write_coefficients(path, c: Coefficients) -> None:
    """JSON header line, then one WPF1 block per coefficient field (``aij``, ``aj``, ``a0``)."""
    g = c.grid
    head = {"n": g.n, "N": g.N, "r": None if math.isinf(c.r) else c.r,
            "kappa0": c.kappa0, "symmetric": c.symmetric}
    parts = [json.dumps(head).encode() + b"\n"]
    for i in range(g.n):
        for j in range(g.n):
            parts.append(field_to_bytes(Field(g, c.aij[i, j])))
    for j in range(g.n):
        parts.append(field_to_bytes(Field(g, c.aj[j])))
    parts.append(field_to_bytes(Field(g, c.a0)))
    Path(path).write_bytes(b"".join(parts))


def read_coefficients(path) -> Coefficients:
    buf = Path(path).read_bytes()
    cut = buf.index(b"\n")
    head = json.loads(buf[:cut])
    g = Grid(int(head["N"]), int(head["n"]))
    off = cut + 1
    fields = []
    for _ in range(g.n * g.n + g.n + 1):
        f, off = field_from_bytes(buf, off)
        g.check(f.grid)
        fields.append(f.values)
    n = g.n
    aij = np.array(fields[:n * n]).real.reshape((n, n) + g.shape)
    aj = np.array(fields[n * n:n * n + n])
    r = math.inf if head["r"] is None else float(head["r"])
    return Coefficients(g, aij, aj, fields[-1], r=r, kappa0=float(head["kappa0"]),
                        symmetric=bool(head["symmetric"]))


# ---------------------------------------------------------------------------
# the operator


def _D(f: Field, j: int) -> np.ndarray:
    return ifft(f.grid.freqs[j] * f.hat, f.grid.n)


def _Dv(v: np.ndarray, grid: Grid, j: int) -> np.ndarray:
    return ifft(grid.freqs[j] * fft(v, grid.n), grid.n)


@dataclass(frozen=True, eq=False)
class WaveOperator:
    """``L`` with its paradifferential parts.

    ``sharp[i][j]`` and ``flat[i][j]`` are the smoothed and rough parts of
    ``a_ij`` as separable symbols (smoothing parameter ``gamma``), so that
    ``L11 = sum D_i a_ij^sharp(x, D) D_j`` and ``L21`` likewise with the flat
    parts; ``L3`` collects the first- and zeroth-order terms.
    """

    coeffs: Coefficients
    gamma: float
    sharp: tuple
    flat: tuple

    @property
    def grid(self) -> Grid:
        return self.coeffs.grid

    def L(self, f: Field) -> Field:
        c, g = self.coeffs, self.grid
        g.check(f.grid)
        Df = [_D(f, j) for j in range(g.n)]
        out = np.zeros(g.shape, complex)
        for i in range(g.n):
            flux = sum(c.aij[i, j] * Df[j] for j in range(g.n))
            out += _Dv(flux, g, i)
        out += sum(c.aj[j] * Df[j] for j in range(g.n)) + c.a0 * f.values
        return Field(g, out)

    def Lstar(self, h: Field) -> Field:
        """Exact adjoint of :meth:`L` for the torus pairing (``D_j`` is self-adjoint)."""
        c, g = self.coeffs, self.grid
        g.check(h.grid)
        Dh = [_D(h, i) for i in range(g.n)]
        out = np.zeros(g.shape, complex)
        for j in range(g.n):
            flux = sum(c.aij[i, j] * Dh[i] for i in range(g.n))
            out += _Dv(flux + np.conj(c.aj[j]) * h.values, g, j)
        out += np.conj(c.a0) * h.values
        return Field(g, out)

    def _paradiff(self, parts, f: Field) -> Field:
        g = self.grid
        g.check(f.grid)
        Df = [Field(g, _D(f, j)) for j in range(g.n)]
        out = np.zeros(g.shape, complex)
        for i in range(g.n):
            inner = sum(quantize_apply(parts[i][j], Df[j]).values for j in range(g.n))
            out += _Dv(inner, g, i)
        return Field(g, out)

    def L11(self, f: Field) -> Field:
        return self._paradiff(self.sharp, f)

    def L21(self, f: Field) -> Field:
        return self._paradiff(self.flat, f)

    def L3(self, f: Field) -> Field:
        c, g = self.coeffs, self.grid
        g.check(f.grid)
        out = sum(c.aj[j] * _D(f, j) for j in range(g.n)) + c.a0 * f.values
        return Field(g, out)

    @cached_property
    def A(self) -> Symbol:
        return principal_symbol_A(self.coeffs)

    @cached_property
    def A_sharp(self) -> Symbol:
        """``sum_ij a_ij^sharp(x, eta) eta_i eta_j`` as one separable symbol."""
        g = self.grid
        X, E, w = [], [], []
        for i in range(g.n):
            for j in range(g.n):
                d = self.sharp[i][j].data
                X.append(d["X"])
                E.append(d["E"] * (g.freqs[i] * g.freqs[j])[None])
                w.append(d["w"])
        return Symbol.separable(g, np.concatenate(X), np.concatenate(E), np.concatenate(w),
                                m=2.0, r=self.coeffs.r, delta=self.gamma, name="A#")


def assemble_L(c: Coefficients, gamma: float = 0.5) -> WaveOperator:
    """Assemble ``L`` from its coefficients; the parts are split with ``gamma``.

    Raises
    ------
    EllipticityError
        If the measured ellipticity is not positive (checked by ``Coefficients``).
    """
    if not c.measured_kappa > 0:
        raise EllipticityError("measured ellipticity is not positive")
    g = c.grid
    ones = np.ones((1,) + g.shape)
    sharp, flat = [], []
    cache = {}
    for i in range(g.n):
        srow, frow = [], []
        for j in range(g.n):
            key = (min(i, j), max(i, j)) if c.symmetric else (i, j)
            if key not in cache:
                a = Symbol.separable(g, c.aij[i, j][None], ones, m=0.0, r=c.r, name=f"a{i}{j}")
                cache[key] = smooth_split(a, gamma)
            s, f = cache[key]
            srow.append(s)
            frow.append(f)
        sharp.append(tuple(srow))
        flat.append(tuple(frow))
    return WaveOperator(c, gamma, tuple(sharp), tuple(flat))


def paradiff_split(op: WaveOperator) -> tuple[Op, Op, Op]:
    """``(L11, L21, L3)`` with ``L11 + L21 + L3 = L`` up to rounding."""
    return op.L11, op.L21, op.L3


def principal_symbol_A(c: Coefficients) -> Symbol:
    """``A(x, eta) = sum a_ij(x) eta_i eta_j`` as a separable symbol."""
    g = c.grid
    X, E = [], []
    for i in range(g.n):
        for j in range(g.n):
            X.append(c.aij[i, j])
            E.append(g.freqs[i] * g.freqs[j])
    return Symbol.separable(g, X, E, m=2.0, r=c.r, name="A")


# ---------------------------------------------------------------------------
# square root


def low_regularizer(grid: Grid) -> np.ndarray:
    """``mu(eta) = max(0, 1 - |eta|^2)``; on the integer lattice only ``eta = 0`` is hit."""
    return np.maximum(0.0, 1.0 - grid.abs_freq**2)


@dataclass(eq=False)
class HalfWaveData:
    """Square-root data ``b = (A_sharp + mu)^(1/2)`` and its remainders.

    Attributes
    ----------
    A_sharp : Symbol
    b : Symbol
        Carries a separable expansion, so ``b(x, D)`` costs one FFT per term.
    c_shift : float
        Imaginary shift in ``b~ = b + i c``.
    levels : ndarray or None
        Smoothed coefficient fields ``(K, n, n, N, N)`` behind ``A_sharp``, one
        per Littlewood-Paley level ``lp[k]``; used by the bicharacteristic flow.
    """

    grid: Grid
    A_sharp: Symbol
    b: Symbol
    c_shift: float
    mu: np.ndarray
    levels: np.ndarray | None = None
    lp: np.ndarray | None = None
    _bbar: np.ndarray | None = field(default=None, repr=False)
    _bmat: object = field(default=None, repr=False)

    @property
    def b_fourier(self):
        """Sparse Fourier-domain matrix of ``b(x, D)`` (built once)."""
        if self._bmat is None:
            self._bmat = self.b.expansion.fourier_matrix()
        return self._bmat

    def b_apply(self, f: Field) -> Field:
        return Field(self.grid, self.b_batch(f.values[None])[0])

    def b_batch(self, F: np.ndarray) -> np.ndarray:
        """``b(x, D)`` on a batch of value arrays ``(B, N, N)``."""
        g = self.grid
        F = np.asarray(F)
        H = fft(F, g.n).reshape(len(F), -1)
        return ifft((self.b_fourier @ H.T).T.reshape(F.shape), g.n)

    def btilde_apply(self, f: Field) -> Field:
        return self.b_apply(f) + (1j * self.c_shift) * f

    def e_apply(self, f: Field) -> Field:
        """``e f = A_sharp(x, D) f - b(x, D)^2 f``."""
        return quantize_apply(self.A_sharp, f) - self.b_apply(self.b_apply(f))

    @property
    def bbar(self) -> np.ndarray:
        """``x``-average of ``b`` on the lattice."""
        if self._bbar is None:
            g = self.grid
            out = np.zeros(g.N**g.n)
            for idx, U, V in self.b.expansion.shells:
                out[idx] = (U.mean(axis=0) @ V).real
            self._bbar = out.reshape(g.shape)
        return self._bbar

    def check_shift(self) -> float:
        """Smallest ``|b(x, eta) + ic|``; raises below ``1e-8``."""
        lo = math.inf
        for _, cols in self.b.iter_columns():
            lo = min(lo, float(np.abs(cols.real + 1j * self.c_shift).min()))
        if lo < 1e-8:
            raise ShiftTooSmallError(f"|b + ic| reaches {lo:.3g}")
        return lo

    def btilde_solve(self, g_: Field, rtol: float = 1e-12) -> Field:
        """Solve ``b~(x, D) w = g`` by GMRES preconditioned with ``(bbar + ic)^-1``."""
        g = self.grid
        n = g.N**g.n
        shape = g.shape
        pre = 1.0 / (self.bbar + 1j * self.c_shift)

        def mv(v):
            return self.btilde_apply(Field(g, v.reshape(shape))).values.ravel()

        def pv(v):
            return ifft(pre * fft(v.reshape(shape), g.n), g.n).ravel()

        A = spla.LinearOperator((n, n), matvec=mv, dtype=complex)
        M = spla.LinearOperator((n, n), matvec=pv, dtype=complex)
        x0 = pv(g_.values.ravel())
        sol, info = spla.gmres(A, g_.values.ravel(), x0=x0, M=M, rtol=rtol, atol=0.0,
                               restart=60, maxiter=50)
        if info != 0:
            raise ShiftTooSmallError(f"b~ inversion did not converge (info={info})")
        return Field(g, sol.reshape(shape))


def _levels_from(A_sharp: Symbol, grid: Grid):
    # undo the separable packing of A_sharp: X_t = smoothed a_ij at level k, E_t = psi_k eta_i eta_j
    d = A_sharp.data
    n = grid.n
    K = len(d["X"]) // (n * n)
    lev = d["X"].real.reshape(n, n, K, *grid.shape)
    lev = np.moveaxis(lev, 2, 0)
    lp = np.stack([w.values for w in _lp_for(grid).windows])
    return lev, lp


def sqrt_symbol(A_sharp: Symbol, c_shift: float | None = None, tol: float = 1e-8) -> HalfWaveData:
    """``b = (A_sharp + mu)^(1/2)`` with ``mu`` the low-frequency regularizer.

    ``b(x, D)`` is applied through a separable expansion accurate to ``tol``
    times ``max b``.  With ``c_shift=None`` the shift is ``1 + ||e||``, the norm
    measured on one seeded random field relative to ``||<D> f||``.

    Raises
    ------
    ValueError
        If ``A_sharp`` is negative beyond ``-1e-10`` somewhere on the lattice.
    """
    g = A_sharp.grid
    mu = low_regularizer(g)
    mu_flat = mu.ravel()
    lo, hi = math.inf, 0.0
    for idx, cols in A_sharp.iter_columns():
        lo = min(lo, float(cols.real.min()))
        hi = max(hi, float(cols.real.max() + mu_flat[idx].max()))
    if lo < -1e-10:
        raise ValueError(f"A_sharp is negative ({lo:.3g}) on the lattice")

    def root(vals, *eta):
        e2 = sum(e * e for e in eta)
        return np.sqrt(np.maximum(vals.real, 0.0) + np.maximum(0.0, 1.0 - e2))

    b = Symbol.mapped(A_sharp, root, m=1.0, r=A_sharp.r, delta=A_sharp.delta, name="b")
    b = b.with_expansion(separable_expand(b, tol=tol * math.sqrt(hi)))
    levels = lp = None
    if A_sharp.kind == "separable" and len(A_sharp.data["X"]) % (g.n * g.n) == 0:
        levels, lp = _levels_from(A_sharp, g)
    hw = HalfWaveData(g, A_sharp, b, 0.0, mu, levels, lp)
    if c_shift is None:
        f = Field.random(g, np.random.default_rng(0))
        bracket = np.sqrt(1.0 + g.abs_freq**2)
        c_shift = 1.0 + hw.e_apply(f).norm() / Field.from_hat(g, bracket * f.hat).norm()
    hw.c_shift = float(c_shift)
    return hw


def build_Ltilde(op: WaveOperator, hw: HalfWaveData) -> Op:
    """``f -> b~(x, D)(b~(x, D) f) - L f``."""

    def Lt(f: Field) -> Field:
        return hw.btilde_apply(hw.btilde_apply(f)) - op.L(f)

    return Lt
