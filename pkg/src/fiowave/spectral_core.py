"""Periodic grids, Fourier multipliers, Littlewood-Paley pieces and classical norms.

The continuum is modelled by the torus ``[0, 2*pi)^n`` sampled on ``N`` points per
axis.  Frequencies are the integer vectors in ``[-N/2, N/2)^n`` stored in the
native FFT ordering, so a frequency array can be multiplied directly against
``scipy.fft.fftn`` output.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Grid",
    "Field",
    "MultiplierSpec",
    "LPFamily",
    "NormReport",
    "GridMismatchError",
    "UnsupportedRangeError",
    "StatementVoidError",
    "smooth_step",
    "radial_cutoff",
    "apply_multiplier",
    "littlewood_paley",
    "norm_classical",
    "lp_norm",
    "sp_exponent",
    "rp_exponent",
    "predicted_loss_sigma",
    "write_field",
    "read_field",
    "field_to_bytes",
    "field_from_bytes",
    "stack_fields",
    "fft",
    "ifft",
]


class GridMismatchError(ValueError):
    """Raised when objects living on different grids are combined."""


class UnsupportedRangeError(ValueError):
    """Raised for exponents outside the supported range (for example p < 1)."""


class StatementVoidError(ValueError):
    """Raised when parameters fall outside the range where a loss bound is stated."""


def fft(a: np.ndarray, n: int = 2) -> np.ndarray:
    """Unnormalized forward transform over the last ``n`` axes."""
    return sfft.fftn(a, axes=tuple(range(-n, 0)), workers=-1)


def ifft(a: np.ndarray, n: int = 2) -> np.ndarray:
    """Inverse of :func:`fft` (carries the ``1/N^n`` factor)."""
    return sfft.ifftn(a, axes=tuple(range(-n, 0)), workers=-1)


# ---------------------------------------------------------------------------
# smooth profiles


def _exp_inv(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u, dtype=float)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def smooth_step(u) -> np.ndarray:
    """C-infinity step rising from 0 at ``u <= 0`` to 1 at ``u >= 1``.

    Built from the flat profile ``exp(-1/u)``; every derivative vanishes at both
    ends, so windows assembled from it are smooth and have exact supports.
    """
    u = np.asarray(u, dtype=float)
    a = _exp_inv(u)
    b = _exp_inv(1.0 - u)
    return a / (a + b)


def radial_cutoff(t, inner: float, outer: float) -> np.ndarray:
    """Equal to 1 for ``t <= inner``, 0 for ``t >= outer``, smooth in between."""
    t = np.asarray(t, dtype=float)
    return 1.0 - smooth_step((t - inner) / (outer - inner))


# ---------------------------------------------------------------------------
# grid and fields


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[0, 2*pi)^n``.

    Parameters
    ----------
    N : int
        Points per axis, a power of two with ``N >= 8``.
    n : int
        Spatial dimension.
    """

    N: int
    n: int = 2

    def __post_init__(self):
        if self.N < 8 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 8, got {self.N}")
        if self.n < 1:
            raise ValueError("dimension must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def spacing(self) -> float:
        return 2 * np.pi / self.N

    @property
    def cell(self) -> float:
        """Measure of one grid cell."""
        return self.spacing**self.n

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays ``x_1, ..., x_n``."""
        x = np.arange(self.N) * self.spacing
        return tuple(np.meshgrid(*([x] * self.n), indexing="ij"))

    @cached_property
    def freqs(self) -> tuple[np.ndarray, ...]:
        """Integer frequency arrays in FFT ordering."""
        k = np.fft.fftfreq(self.N, 1.0 / self.N)
        return tuple(np.meshgrid(*([k] * self.n), indexing="ij"))

    @cached_property
    def abs_freq(self) -> np.ndarray:
        return np.sqrt(sum(k**2 for k in self.freqs))

    @cached_property
    def unit_freq(self) -> tuple[np.ndarray, ...]:
        """Normalized frequencies; zero at the origin."""
        r = self.abs_freq
        safe = np.where(r > 0, r, 1.0)
        return tuple(np.where(r > 0, k / safe, 0.0) for k in self.freqs)

    @property
    def max_freq(self) -> float:
        return self.N / 2 * math.sqrt(self.n)

    def points(self) -> np.ndarray:
        """Grid points as an ``(N^n, n)`` array in row-major order."""
        return np.stack([c.ravel() for c in self.coords], axis=-1)

    def lattice(self) -> np.ndarray:
        """Lattice frequencies as an ``(N^n, n)`` array in FFT order."""
        return np.stack([k.ravel() for k in self.freqs], axis=-1)

    def check(self, other: "Grid") -> None:
        if self != other:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")


class Field:
    """Complex samples on a :class:`Grid` with a lazily cached transform."""

    __slots__ = ("grid", "_values", "_hat")

    def __init__(self, grid: Grid, values=None, hat=None):
        if values is None and hat is None:
            raise ValueError("either values or hat must be supplied")
        self.grid = grid
        self._values = None if values is None else np.asarray(values, dtype=complex)
        self._hat = None if hat is None else np.asarray(hat, dtype=complex)
        arr = self._values if self._values is not None else self._hat
        if arr.shape != grid.shape:
            raise GridMismatchError(f"array shape {arr.shape} does not match grid {grid.shape}")

    @classmethod
    def from_hat(cls, grid: Grid, hat) -> "Field":
        return cls(grid, hat=hat)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.shape, dtype=complex))

    @classmethod
    def random(cls, grid: Grid, rng: np.random.Generator | int | None = None) -> "Field":
        rng = np.random.default_rng(rng)
        return cls(grid, rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape))

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = ifft(self._hat, self.grid.n)
        return self._values

    @property
    def hat(self) -> np.ndarray:
        if self._hat is None:
            self._hat = fft(self._values, self.grid.n)
        return self._hat

    def norm(self, p: float = 2.0) -> float:
        return lp_norm(self.values, self.grid, p)

    def inner(self, other: "Field") -> complex:
        """Sesquilinear pairing ``int f * conj(g) dx`` on the torus."""
        self.grid.check(other.grid)
        return complex(np.vdot(other.values, self.values) * self.grid.cell)

    def _binary(self, other, op):
        if isinstance(other, Field):
            self.grid.check(other.grid)
            other = other.values
        return Field(self.grid, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __repr__(self) -> str:
        return f"Field(N={self.grid.N}, n={self.grid.n}, l2={self.norm():.4g})"


def lp_norm(values: np.ndarray, grid: Grid, p: float) -> float:
    """Torus ``L^p`` norm of grid samples (Riemann sum with the cell measure)."""
    a = np.abs(values)
    if math.isinf(p):
        return float(a.max())
    return float((np.sum(a**p) * grid.cell) ** (1.0 / p))


# ---------------------------------------------------------------------------
# multipliers


@dataclass(frozen=True, eq=False)
class MultiplierSpec:
    """A function of frequency sampled on the lattice.

    Attributes
    ----------
    grid : Grid
    values : ndarray
        Samples in FFT ordering.
    name : str
    support : tuple of float or None
        Declared radial support ``(rmin, rmax)``; the samples vanish outside it.
    """

    grid: Grid
    values: np.ndarray
    name: str = "multiplier"
    support: tuple[float, float] | None = None

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise GridMismatchError("multiplier shape does not match grid")

    @classmethod
    def from_function(cls, grid: Grid, func: Callable, name: str = "multiplier",
                      support=None) -> "MultiplierSpec":
        """Sample ``func(*freqs)`` on the lattice."""
        vals = np.broadcast_to(np.asarray(func(*grid.freqs)), grid.shape).copy()
        return cls(grid, vals, name, support)

    @classmethod
    def radial(cls, grid: Grid, func: Callable, name: str = "radial",
               support=None) -> "MultiplierSpec":
        return cls(grid, np.asarray(func(grid.abs_freq)) * np.ones(grid.shape), name, support)

    def support_violation(self) -> float:
        """Largest magnitude of the samples outside the declared support."""
        if self.support is None:
            return 0.0
        lo, hi = self.support
        r = self.grid.abs_freq
        outside = (r < lo) | (r > hi)
        return float(np.abs(self.values[outside]).max(initial=0.0))

    def __mul__(self, other: "MultiplierSpec") -> "MultiplierSpec":
        self.grid.check(other.grid)
        return MultiplierSpec(self.grid, self.values * other.values, f"{self.name}*{other.name}")


def apply_multiplier(f: Field, m: MultiplierSpec) -> Field:
    """Return the field whose transform is ``m(eta) * fhat(eta)``."""
    f.grid.check(m.grid)
    return Field.from_hat(f.grid, m.values * f.hat)


# ---------------------------------------------------------------------------
# Littlewood-Paley family


def _lp_bump(t):
    # psi_0 profile: 1 on [0, 1/2], 0 beyond 1
    return radial_cutoff(t, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class LPFamily:
    """Dyadic Littlewood-Paley windows on a grid.

    ``psi_0(xi) = h(|xi|)`` with ``h = 1`` on ``[0, 1/2]`` and ``h = 0`` beyond 1,
    and ``psi_j(xi) = h(2^-j |xi|) - h(2^(1-j) |xi|)``.  The number of windows is
    chosen so that the family telescopes to one on the whole lattice.

    Also carries the low-frequency cutoff ``q`` (equal to 1 on ``|xi| <= 2``) and
    a packet low window ``rho`` (1 on ``|xi| <= 1/2``, 0 on ``|xi| >= 2``).
    """

    grid: Grid
    windows: tuple[MultiplierSpec, ...]
    q: MultiplierSpec
    rho: MultiplierSpec

    @classmethod
    def build(cls, grid: Grid) -> "LPFamily":
        r = grid.abs_freq
        top = max(1, math.ceil(math.log2(grid.max_freq)) + 1)
        wins = [MultiplierSpec(grid, _lp_bump(r), "psi_0", (0.0, 1.0))]
        for j in range(1, top + 1):
            vals = _lp_bump(r / 2.0**j) - _lp_bump(r / 2.0 ** (j - 1))
            wins.append(MultiplierSpec(grid, vals, f"psi_{j}", (2.0 ** (j - 2), 2.0**j)))
        q = MultiplierSpec(grid, radial_cutoff(r, 2.0, 4.0), "q", (0.0, 4.0))
        rho = MultiplierSpec(grid, radial_cutoff(r, 0.5, 2.0), "rho", (0.0, 2.0))
        return cls(grid, tuple(wins), q, rho)

    @property
    def J(self) -> int:
        return len(self.windows) - 1

    def window(self, j: int) -> np.ndarray:
        return self.windows[j].values

    @staticmethod
    def profile(j: int, t) -> np.ndarray:
        """Continuous radial profile of ``psi_j`` at radius ``t``."""
        t = np.asarray(t, dtype=float)
        if j == 0:
            return _lp_bump(t)
        return _lp_bump(t / 2.0**j) - _lp_bump(t / 2.0 ** (j - 1))


def littlewood_paley(f: Field, lp: LPFamily) -> list[Field]:
    """Split ``f`` into its dyadic pieces ``psi_j(D) f``."""
    f.grid.check(lp.grid)
    return [apply_multiplier(f, w) for w in lp.windows]


# ---------------------------------------------------------------------------
# norms


@dataclass
class NormReport:
    """Value of a classical norm with its per-scale contributions."""

    space: str
    s: float
    p: float
    value: float
    scales: list[float] = field(default_factory=list)
    surrogate: bool = False
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        p = "inf" if math.isinf(self.p) else self.p
        d = {"space": self.space, "s": self.s, "p": p, "value": self.value,
             "scales": self.scales}
        if self.surrogate:
            d["surrogate"] = True
        if self.details:
            d["details"] = self.details
        return json.dumps(d)


_SPACES = {"Lp": "L^p", "L^p": "L^p", "Hsp": "H^{s,p}", "H^{s,p}": "H^{s,p}",
           "Czyg": "C^s_*", "C^s_*": "C^s_*", "Cminus": "C^s_-", "C^s_-": "C^s_-"}

_LP_CACHE: dict[Grid, LPFamily] = {}


def _lp_for(grid: Grid) -> LPFamily:
    lp = _LP_CACHE.get(grid)
    if lp is None:
        lp = _LP_CACHE.setdefault(grid, LPFamily.build(grid))
    return lp


def _bracket(grid: Grid) -> np.ndarray:
    return np.sqrt(1.0 + grid.abs_freq**2)


def _dyadic_bmo(g: np.ndarray, grid: Grid) -> tuple[float, list[float]]:
    """Local dyadic mean oscillation: sup over dyadic squares of the mean of |g - g_Q|.

    Squares of side at least 1 use the mean of ``|g|`` instead (local bmo).
    """
    N, n = grid.N, grid.n
    sups = []
    size = N
    while size >= 1:
        m = N // size
        shp = []
        for _ in range(n):
            shp += [m, size]
        blocks = g.reshape(shp)
        axes = tuple(range(1, 2 * n, 2))
        mean = blocks.mean(axis=axes, keepdims=True)
        side = size * grid.spacing
        if side >= 1.0:
            osc = np.abs(blocks).mean(axis=axes)
        else:
            osc = np.abs(blocks - mean).mean(axis=axes)
        sups.append(float(osc.max()))
        size //= 2
    return max(sups), sups


def _holder_offsets(grid: Grid) -> list[tuple[int, ...]]:
    if grid.n != 2:
        steps = [2**k for k in range(int(math.log2(grid.N)))]
        offs = []
        for d in range(grid.n):
            for s in steps:
                e = [0] * grid.n
                e[d] = s
                offs.append(tuple(e))
        return offs
    offs = {(a, b) for a in range(-3, 4) for b in range(0, 4) if (a, b) != (0, 0) and not (b == 0 and a < 0)}
    s = 4
    while s <= grid.N // 2:
        for a, b in [(s, 0), (0, s), (s, s), (s, -s)]:
            offs.add((a, b))
        s *= 2
    return sorted(offs)


def _cminus(f: Field, s: float) -> tuple[float, list[float]]:
    grid = f.grid
    l = max(0, math.ceil(s) - 1)
    t = s - l
    hat = f.hat
    terms = []
    derivs = []
    for alpha in np.ndindex(*([l + 1] * grid.n)):
        if sum(alpha) > l:
            continue
        mult = np.ones(grid.shape, dtype=complex)
        for k, a in zip(grid.freqs, alpha):
            mult = mult * (1j * k) ** a
        d = ifft(mult * hat, grid.n)
        terms.append(float(np.abs(d).max()))
        if sum(alpha) == l:
            derivs.append(d)
    sup = max(terms)
    quot = 0.0
    if t > 0:
        h = grid.spacing
        for off in _holder_offsets(grid):
            dist = h * math.sqrt(sum(o * o for o in off))
            for d in derivs:
                diff = np.abs(np.roll(d, shift=[-o for o in off], axis=tuple(range(grid.n))) - d)
                quot = max(quot, float(diff.max()) / dist**t)
    return sup + quot, terms + [quot]


def norm_classical(f: Field, space: str, s: float = 0.0, p: float = 2.0) -> NormReport:
    """Classical function-space norm of a field.

    Parameters
    ----------
    f : Field
    space : str
        ``"Lp"``, ``"Hsp"`` (square-function form of the Bessel-potential space,
        with the local-Hardy surrogate at ``p = 1`` and a dyadic-BMO surrogate
        at ``p = inf``), ``"Czyg"`` (Zygmund) or ``"Cminus"`` (Hölder-type, grid
        differences).
    s, p : float
        Smoothness and integrability exponents.

    Returns
    -------
    NormReport
    """
    if space not in _SPACES:
        raise ValueError(f"unknown space tag {space!r}")
    tag = _SPACES[space]
    p = float(p)
    if p < 1:
        raise UnsupportedRangeError("p < 1 is not supported")
    grid = f.grid
    if tag == "L^p":
        return NormReport(tag, s, p, lp_norm(f.values, grid, p))
    if tag == "C^s_-":
        val, terms = _cminus(f, s)
        return NormReport(tag, s, math.inf, val, terms)
    lp = _lp_for(grid)
    hat = f.hat
    if tag == "C^s_*":
        scales = [2.0 ** (j * s) * float(np.abs(ifft(w.values * hat, grid.n)).max())
                  for j, w in enumerate(lp.windows)]
        return NormReport(tag, s, math.inf, max(scales), scales)
    if math.isinf(p):
        g = ifft(_bracket(grid) ** s * hat, grid.n)
        val, sups = _dyadic_bmo(g, grid)
        val += float(np.abs(ifft(lp.q.values * _bracket(grid) ** s * hat, grid.n)).max())
        return NormReport(tag, s, p, val, sups, surrogate=True)
    sq = np.zeros(grid.shape)
    scales = []
    for j, w in enumerate(lp.windows):
        piece = 2.0 ** (j * s) * ifft(w.values * hat, grid.n)
        a2 = np.abs(piece) ** 2
        sq += a2
        scales.append(lp_norm(np.sqrt(a2), grid, p))
    val = lp_norm(np.sqrt(sq), grid, p)
    details = {}
    if p == 1.0:
        low = lp_norm(ifft(lp.q.values * hat, grid.n), grid, 1.0)
        val += low
        details["lowfreq"] = low
    return NormReport(tag, s, p, val, scales, details=details)


# ---------------------------------------------------------------------------
# exponents


def _inv(p: float) -> float:
    if p <= 0:
        raise ValueError("p must be positive")
    return 0.0 if math.isinf(p) else 1.0 / p


def sp_exponent(p: float, n: int = 2) -> float:
    """Fixed-time Sobolev loss ``(n-1)/2 * |1/p - 1/2|``."""
    return (n - 1) / 2 * abs(_inv(p) - 0.5)


def rp_exponent(p: float, n: int = 2) -> float:
    """Critical coefficient regularity ``4 s(p) + 2 max(0, 1/p - 1)``."""
    return 4 * sp_exponent(p, n) + 2 * max(0.0, _inv(p) - 1.0)


def predicted_loss_sigma(r: float, p: float, n: int = 2, eps: float = 1e-3) -> float:
    """Predicted extra derivative loss for coefficients of regularity ``r``.

    Zero above the critical regularity ``r(p)``; ``(r(p) - r)/2 + eps`` on the
    intermediate range ``2n max(0, 1/p - 1) < r <= r(p)``.
    """
    if r <= 0 or eps <= 0:
        raise ValueError("r and eps must be positive")
    rp = rp_exponent(p, n)
    if r > rp:
        return 0.0
    if r > 2 * n * max(0.0, _inv(p) - 1.0):
        return (rp - r) / 2 + eps
    raise StatementVoidError(f"no loss bound is stated for r={r}, p={p}, n={n}")


# ---------------------------------------------------------------------------
# binary field format


_FIELD_MAGIC = b"WPF1"


def field_to_bytes(f: Field) -> bytes:
    grid = f.grid
    head = _FIELD_MAGIC + struct.pack("<II", grid.n, grid.N)
    body = np.ascontiguousarray(f.values, dtype="<c16").tobytes()
    return head + body


def field_from_bytes(buf: bytes, offset: int = 0) -> tuple[Field, int]:
    if buf[offset:offset + 4] != _FIELD_MAGIC:
        raise ValueError("not a WPF1 field")
    n, N = struct.unpack_from("<II", buf, offset + 4)
    grid = Grid(N, n)
    count = N**n
    start = offset + 12
    vals = np.frombuffer(buf, dtype="<c16", count=count, offset=start).reshape(grid.shape)
    return Field(grid, vals.copy()), start + 16 * count


def write_field(path, f: Field) -> None:
    Path(path).write_bytes(field_to_bytes(f))


def read_field(path) -> Field:
    f, _ = field_from_bytes(Path(path).read_bytes())
    return f


def stack_fields(fields: Sequence[Field]) -> np.ndarray:
    return np.stack([f.values for f in fields])
