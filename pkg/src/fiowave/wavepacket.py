"""Dyadic-parabolic wave packets on the torus.

The discrete frame splits the lattice into dyadic annuli ``|xi| ~ 2^j`` and each
annulus into angular sectors of width ``~ 2^(-j/2)``.  Window squares telescope,
so the analysis map ``W`` is an isometry and ``V = W*`` inverts it exactly.

Alongside the discrete frame we keep the continuous packets
``psi_{w,s}(xi) = Psi(s|xi|) c_s phi(|xi_hat - w| / sqrt(s))`` which define the
parabolic cutoffs ``phi_w`` and the FIO-adapted Hardy-Sobolev norm.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import threading
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import integrate

from .cosphere import directions, direction_count, metric_d_array
from .spectral_core import (
    Field,
    Grid,
    MultiplierSpec,
    UnsupportedRangeError,
    fft,
    ifft,
    lp_norm,
    norm_classical,
    radial_cutoff,
    _lp_for,
)

__all__ = [
    "PacketFrame",
    "PacketCoefficients",
    "FIONormReport",
    "FrameCoverageError",
    "build_frame",
    "transform_W",
    "synthesize_V",
    "packet_field",
    "radial_profile",
    "angular_bump",
    "c_sigma",
    "packet_window",
    "parabolic_cutoff_phi",
    "phi_omega_at",
    "reproducing_m",
    "reproduce",
    "fio_directions",
    "norm_HspFIO",
    "packet_average",
    "write_coefficients",
    "read_coefficients",
]

_LN2 = math.log(2.0)


class FrameCoverageError(ValueError):
    """Raised when the parabolic cutoffs fail to cover part of the lattice."""


# ---------------------------------------------------------------------------
# profiles


def _G(t):
    # 1 on [0, 1], 0 on [2, inf)
    return radial_cutoff(t, 1.0, 2.0)


def radial_profile(t) -> np.ndarray:
    """Continuous radial packet profile ``Psi`` with ``int Psi(s t)^2 ds/s = 1``.

    ``Psi(t)^2 = (G(t) - G(2t)) / ln 2`` with ``G`` a smooth cutoff equal to 1 on
    ``[0, 1]`` and 0 beyond 2, so ``Psi`` is supported in ``[1/2, 2]``.
    """
    t = np.asarray(t, dtype=float)
    return np.sqrt(np.maximum(_G(t) - _G(2 * t), 0.0) / _LN2)


def angular_bump(v) -> np.ndarray:
    """Angular profile ``phi``: 1 for ``v <= 1/4`` and 0 for ``v >= 1``."""
    return radial_cutoff(v, 0.25, 1.0)


_MOMENTS: dict[int, np.ndarray] = {}
_NSERIES = 64


def _moments(power: int) -> np.ndarray:
    # M_k = int_0^1 phi(s)^power s^(2k) ds, with the binomial series weights of
    # (1 - x)^(-1/2) folded in
    if power not in _MOMENTS:
        k = np.arange(_NSERIES)
        binom = np.ones(_NSERIES)
        for i in range(1, _NSERIES):
            binom[i] = binom[i - 1] * (2 * i - 1) / (2 * i)
        mom = np.empty(_NSERIES)
        for i in k:
            mom[i] = integrate.quad(lambda s: angular_bump(s) ** power * s ** (2 * i),
                                    0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)[0]
        _MOMENTS[power] = binom * mom / 4.0**k
    return _MOMENTS[power]


def angular_mass(tau, power: int = 1) -> np.ndarray:
    """``int_{S^1} phi(|e_1 - nu| / sqrt(tau))^power d nu`` (arc-length measure).

    For ``tau <= 2`` the substitution ``s = 2 sin(theta/2)/sqrt(tau)`` turns the
    integral into ``2 sqrt(tau) int_0^1 phi(s)^power (1 - tau s^2/4)^(-1/2) ds``,
    evaluated through its power series in ``tau``.  Larger ``tau`` falls back to
    a direct midpoint rule in the angle.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    out = np.empty_like(tau)
    small = tau <= 2.0
    if np.any(small):
        coef = _moments(power)
        t = tau[small]
        acc = np.zeros_like(t)
        for c in coef[::-1]:
            acc = acc * t + c
        out[small] = 2.0 * np.sqrt(t) * acc
    if np.any(~small):
        t = tau[~small]
        m = 4096
        th = (np.arange(m) + 0.5) / m * 2 * np.pi - np.pi
        v = 2 * np.abs(np.sin(th / 2))[None, :] / np.sqrt(t)[:, None]
        out[~small] = (angular_bump(v) ** power).sum(axis=1) * (2 * np.pi / m)
    return out


def c_sigma(sigma) -> np.ndarray:
    """Packet normalization ``(int_{S^1} phi(|e_1 - nu|/sqrt(sigma))^2 d nu)^(-1/2)``."""
    return angular_mass(sigma, 2) ** -0.5


def packet_window(grid: Grid, omega, sigma: float) -> np.ndarray:
    """Continuous packet ``psi_{omega,sigma}`` sampled on the lattice."""
    w = np.asarray(omega, dtype=float)
    ux, uy = grid.unit_freq
    v = np.sqrt((ux - w[0]) ** 2 + (uy - w[1]) ** 2) / math.sqrt(sigma)
    out = radial_profile(sigma * grid.abs_freq) * float(c_sigma(sigma)[0]) * angular_bump(v)
    out[grid.abs_freq == 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# discrete frame


@dataclass(frozen=True, eq=False)
class PacketFrame:
    """Discrete dyadic-parabolic tight frame.

    Attributes
    ----------
    grid : Grid
    J : int
        Finest scale; scales ``j = 1..J`` have ``sigma_j = 2^-j``.
    index : tuple of (int, int)
        Block labels ``(j, k)`` in storage order.
    omegas : ndarray, shape (nblocks, 2)
        Block directions.
    windows : ndarray, shape (nblocks, N, N)
        Real frequency windows in FFT order.
    rho : ndarray
        Low-frequency window.
    supports : tuple
        Declared ``(rmin, rmax, max |xi_hat - omega|)`` per block.  The finest
        scale absorbs every frequency beyond ``2^(J-1)``, so its ``rmax`` is the
        lattice corner.
    """

    grid: Grid
    J: int
    index: tuple
    omegas: np.ndarray
    windows: np.ndarray
    rho: np.ndarray
    supports: tuple

    @property
    def nblocks(self) -> int:
        return len(self.index)

    @cached_property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<III", self.grid.n, self.grid.N, self.J))
        h.update(np.ascontiguousarray(self.windows).tobytes())
        h.update(np.ascontiguousarray(self.rho).tobytes())
        return h.hexdigest()

    def blocks_at(self, j: int) -> range:
        """Storage positions of the scale-``j`` blocks."""
        start = sum(direction_count(i) for i in range(1, j))
        return range(start, start + direction_count(j))

    def tightness_residual(self) -> float:
        tot = np.sum(self.windows**2, axis=0) + self.rho**2
        return float(np.abs(tot - 1.0).max())

    def support_violation(self) -> float:
        """Largest window value found outside its declared support."""
        r = self.grid.abs_freq
        ux, uy = self.grid.unit_freq
        worst = 0.0
        for b, (lo, hi, ang) in enumerate(self.supports):
            w = self.omegas[b]
            dev = np.sqrt((ux - w[0]) ** 2 + (uy - w[1]) ** 2)
            out = (r < lo) | (r > hi) | (dev > ang)
            worst = max(worst, float(np.abs(self.windows[b][out]).max(initial=0.0)))
        out = self.grid.abs_freq > 2.0
        worst = max(worst, float(np.abs(self.rho[out]).max(initial=0.0)))
        return worst


def build_frame(grid: Grid, J: int) -> PacketFrame:
    """Construct the discrete tight frame with scales ``1..J``.

    Radial squares are ``G(2^-j t) - G(2^(1-j) t)`` for ``j < J`` and the remainder
    ``1 - G(2^(1-J) t)`` at ``j = J``, with ``rho^2 = G``.  Angular windows use
    ``phi(|xi_hat - omega| / sqrt(sigma_j))`` over ``ceil(2 pi 2^(j/2))`` directions,
    normalized per scale so their squares sum to one.
    """
    if grid.n != 2:
        raise ValueError("the packet frame is implemented for n = 2")
    if J < 0 or (J > 0 and 2**J > grid.N // 4):
        raise ValueError(f"J={J} too large for N={grid.N} (need 2^J <= N/4)")
    r = grid.abs_freq
    ux, uy = grid.unit_freq
    if J == 0:
        rho2 = np.ones(grid.shape)
    else:
        rho2 = _G(r)
    wins, index, omegas, supports = [], [], [], []
    corner = grid.max_freq
    for j in range(1, J + 1):
        if j < J:
            rad2 = _G(r / 2.0**j) - _G(r / 2.0 ** (j - 1))
            hi = 2.0 ** (j + 1)
        else:
            rad2 = 1.0 - _G(r / 2.0 ** (j - 1))
            hi = corner
        rad = np.sqrt(np.maximum(rad2, 0.0))
        sq = math.sqrt(2.0**-j)
        dirs = directions(j)
        ang = np.stack([angular_bump(np.sqrt((ux - w[0]) ** 2 + (uy - w[1]) ** 2) / sq)
                        for w in dirs])
        norm = np.sqrt(np.sum(ang**2, axis=0))
        ang = ang / np.where(norm > 0, norm, 1.0)
        for k, w in enumerate(dirs):
            wins.append(rad * ang[k])
            index.append((j, k))
            omegas.append(w)
            supports.append((2.0 ** (j - 1), hi, sq))
    windows = np.array(wins) if wins else np.zeros((0,) + grid.shape)
    rho = np.sqrt(rho2)
    # final pointwise renormalization: exact tightness up to rounding
    tot = np.sqrt(np.sum(windows**2, axis=0) + rho**2)
    windows = windows / tot
    rho = rho / tot
    windows.setflags(write=False)
    rho.setflags(write=False)
    return PacketFrame(grid, J, tuple(index), np.array(omegas).reshape(-1, 2),
                       windows, rho, tuple(supports))


@dataclass(eq=False)
class PacketCoefficients:
    """Packet coefficients ``(j, k, x)`` plus the low-frequency block."""

    frame: PacketFrame
    blocks: np.ndarray
    low: np.ndarray

    def __post_init__(self):
        want = (self.frame.nblocks,) + self.frame.grid.shape
        if self.blocks.shape != want or self.low.shape != self.frame.grid.shape:
            raise ValueError("coefficient arrays do not match the frame")

    @classmethod
    def zeros(cls, frame: PacketFrame) -> "PacketCoefficients":
        g = frame.grid
        return cls(frame, np.zeros((frame.nblocks,) + g.shape, complex), np.zeros(g.shape, complex))

    @classmethod
    def random(cls, frame: PacketFrame, rng=None) -> "PacketCoefficients":
        rng = np.random.default_rng(rng)
        shp = (frame.nblocks + 1,) + frame.grid.shape
        a = rng.standard_normal(shp) + 1j * rng.standard_normal(shp)
        return cls(frame, a[:-1], a[-1])

    def norm(self) -> float:
        tot = np.sum(np.abs(self.blocks) ** 2) + np.sum(np.abs(self.low) ** 2)
        return float(math.sqrt(tot * self.frame.grid.cell))

    def inner(self, other: "PacketCoefficients") -> complex:
        s = np.vdot(other.blocks, self.blocks) + np.vdot(other.low, self.low)
        return complex(s * self.frame.grid.cell)

    def scale(self, j: int) -> np.ndarray:
        """Coefficients at scale ``j`` with shape ``(N_j, N, N)``."""
        r = self.frame.blocks_at(j)
        return self.blocks[r.start:r.stop]

    def to_bytes(self) -> bytes:
        fr = self.frame
        head = b"WPC1" + bytes.fromhex(fr.hash)
        head += struct.pack("<IIII", fr.grid.n, fr.grid.N, fr.J, fr.nblocks)
        body = np.ascontiguousarray(self.blocks, dtype="<c16").tobytes()
        body += np.ascontiguousarray(self.low, dtype="<c16").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes, frame: PacketFrame) -> "PacketCoefficients":
        if buf[:4] != b"WPC1":
            raise ValueError("not a WPC1 coefficient file")
        if buf[4:36].hex() != frame.hash:
            raise ValueError("coefficient file was produced by a different frame")
        n, N, J, nb = struct.unpack_from("<IIII", buf, 36)
        if (n, N, J, nb) != (frame.grid.n, frame.grid.N, frame.J, frame.nblocks):
            raise ValueError("coefficient counts do not match the frame")
        per = N**n
        arr = np.frombuffer(buf, dtype="<c16", offset=52, count=per * (nb + 1))
        arr = arr.reshape((nb + 1,) + frame.grid.shape).copy()
        return cls(frame, arr[:-1], arr[-1])


def write_coefficients(path, c: PacketCoefficients) -> None:
    Path(path).write_bytes(c.to_bytes())


def read_coefficients(path, frame: PacketFrame) -> PacketCoefficients:
    return PacketCoefficients.from_bytes(Path(path).read_bytes(), frame)


def transform_W(f: Field, frame: PacketFrame) -> PacketCoefficients:
    """Packet transform: block ``(j,k)`` is ``psi_{j,k}(D) f``, low block ``rho(D) f``."""
    f.grid.check(frame.grid)
    hat = f.hat
    blocks = ifft(frame.windows * hat[None], 2) if frame.nblocks else \
        np.zeros((0,) + f.grid.shape, complex)
    low = ifft(frame.rho * hat, 2)
    return PacketCoefficients(frame, blocks, low)


def synthesize_V(c: PacketCoefficients) -> Field:
    """Adjoint of :func:`transform_W`; ``V(W f) = f`` for a tight frame."""
    fr = c.frame
    hat = fr.rho * fft(c.low, 2)
    if fr.nblocks:
        hat = hat + np.einsum("bij,bij->ij", fr.windows, fft(c.blocks, 2))
    return Field.from_hat(fr.grid, hat)


def packet_field(frame: PacketFrame, j: int, k: int, center=None, normalize: bool = True) -> Field:
    """Inverse transform of the ``(j, k)`` window translated to ``center``."""
    g = frame.grid
    hat = frame.windows[frame.blocks_at(j)[k]].astype(complex)
    if center is not None:
        x0 = np.asarray(center, dtype=float)
        hat = hat * np.exp(-1j * (g.freqs[0] * x0[0] + g.freqs[1] * x0[1]))
    f = Field.from_hat(g, hat)
    if normalize:
        f = Field(g, f.values / f.norm())
    return f


def packet_average(c: PacketCoefficients, j: int, points, N_exp: float = 3.0) -> np.ndarray:
    """Weighted packet average ``sigma^-n int |W_sigma f(y,nu)| (1 + d^2/sigma)^-N dy dnu``.

    Parameters
    ----------
    c : PacketCoefficients
    j : int
        Scale, ``sigma = 2^-j``.
    points : sequence of (k, i1, i2)
        Phase-space sample points (direction index and grid index).
    """
    g = c.frame.grid
    sigma = 2.0**-j
    a = np.abs(c.scale(j))
    dirs = directions(j)
    pts = np.stack(g.coords, axis=-1)
    dnu = 2 * np.pi / len(dirs)
    out = []
    for k, i1, i2 in points:
        x = pts[i1, i2]
        w = dirs[k]
        acc = 0.0
        for kk, nu in enumerate(dirs):
            d1 = metric_d_array(x, w, pts, nu)
            d2 = metric_d_array(pts, nu, x, w)
            d = np.maximum(d1, d2)
            acc += float(np.sum(a[kk] / (1 + d**2 / sigma) ** N_exp))
        out.append(acc * g.cell * dnu / sigma**g.n)
    return np.array(out)


# ---------------------------------------------------------------------------
# parabolic cutoffs and the reproducing multiplier


class _ConeTable:
    """Quadrature tables for ``phi_w`` on one grid.

    With ``u = tau |xi|`` the defining scale integral becomes
    ``phi_w(xi) = int_{1/2}^{2} Psi(u) c_{u/|xi|} phi(|xi_hat - w| sqrt(|xi|/u)) du/u``
    for ``|xi| >= 1/2``.  The integrand is smooth and vanishes to all orders at the
    ends, so the midpoint rule in ``log u`` converges spectrally; nodes double
    from 32 until the largest change on the lattice is at most ``1e-10``.
    """

    def __init__(self, grid: Grid, tol: float = 1e-10):
        self.grid = grid
        r2 = np.rint(grid.abs_freq**2).astype(np.int64)
        uniq, inv = np.unique(r2, return_inverse=True)
        self.radii = np.sqrt(uniq.astype(float))
        self.inv = inv.reshape(grid.shape)
        self._cache: dict[tuple, np.ndarray] = {}
        self._lock = threading.Lock()
        n = 32
        prev = self._set_nodes(n)
        while True:
            n *= 2
            cur = self._set_nodes(n)
            change = float(np.abs(cur - prev).max())
            if change <= tol or n >= 4096:
                break
            prev = cur
        self.nodes = n
        self.change = change

    def _set_nodes(self, n: int) -> np.ndarray:
        h = 2 * _LN2 / n
        self.u = np.exp(-_LN2 + (np.arange(n) + 0.5) * h)
        R = self.radii[:, None]
        with np.errstate(divide="ignore"):
            tau = np.where(R > 0, self.u[None, :] / np.where(R > 0, R, 1.0), 1.0)
        T = radial_profile(self.u)[None, :] * c_sigma(tau.ravel()).reshape(tau.shape) * h
        T[self.radii == 0] = 0.0
        self.table = T
        self.mass = (T * angular_mass(tau.ravel(), 1).reshape(tau.shape)).sum(axis=1)
        return self._evaluate(np.array([1.0, 0.0]))

    def _evaluate(self, w: np.ndarray) -> np.ndarray:
        g = self.grid
        ux, uy = g.unit_freq
        dev = np.sqrt((ux - w[0]) ** 2 + (uy - w[1]) ** 2)
        R = g.abs_freq
        live = (R > 0) & (dev**2 * R < 2.0)
        out = np.zeros(g.shape)
        rows = self.inv[live]
        arg = dev[live][:, None] * np.sqrt(R[live][:, None] / self.u[None, :])
        out[live] = np.sum(self.table[rows] * angular_bump(arg), axis=1)
        return out

    def phi(self, w) -> np.ndarray:
        key = (round(float(w[0]), 15), round(float(w[1]), 15))
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            hit = self._evaluate(np.asarray(w, dtype=float))
            hit.setflags(write=False)
            with self._lock:
                if len(self._cache) > 1024:
                    self._cache.clear()
                self._cache[key] = hit
        return hit

    @cached_property
    def m(self) -> np.ndarray:
        R = self.grid.abs_freq
        dens = self.mass[self.inv]
        bad = (R >= 0.5) & (dens < 1e-10)
        if np.any(bad):
            raise FrameCoverageError("parabolic cutoffs do not cover the high-frequency lattice")
        out = np.where(R >= 0.5, 1.0 / np.where(dens > 0, dens, 1.0), 0.0)
        out.setflags(write=False)
        return out


_TABLES: dict[Grid, _ConeTable] = {}
_TLOCK = threading.Lock()


def _table(grid: Grid) -> _ConeTable:
    with _TLOCK:
        t = _TABLES.get(grid)
    if t is None:
        t = _ConeTable(grid)
        with _TLOCK:
            t = _TABLES.setdefault(grid, t)
    return t


def parabolic_cutoff_phi(omega, frame: PacketFrame | Grid) -> MultiplierSpec:
    """Parabolic cutoff ``phi_omega = int_0^4 psi_{omega,tau} dtau/tau`` on the lattice.

    The node count reached by the adaptive rule is stored in the returned
    multiplier's name.
    """
    grid = frame.grid if isinstance(frame, PacketFrame) else frame
    w = np.asarray(omega, dtype=float)
    if abs(np.linalg.norm(w) - 1.0) > 1e-12:
        raise ValueError("omega must be a unit vector")
    t = _table(grid)
    return MultiplierSpec(grid, t.phi(w), f"phi_omega[nodes={t.nodes}]", (0.125, grid.max_freq))


def phi_omega_at(xi, omega) -> np.ndarray:
    """Off-lattice ``phi_omega(xi)`` by adaptive quadrature directly in ``tau``.

    Slow but independent of the lattice tables; accepts any frequencies,
    shape ``(m, 2)``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    w = np.asarray(omega, dtype=float)
    out = np.zeros(len(xi))
    for i, v in enumerate(xi):
        R = float(np.hypot(*v))
        if R == 0:
            continue
        dev = float(np.hypot(*(v / R - w)))
        lo = max(0.5 / R, dev * dev)
        hi = min(4.0, 2.0 / R)
        if lo >= hi:
            continue

        def integrand(lt):
            tau = math.exp(lt)
            return float(radial_profile(tau * R) * c_sigma(tau)[0]
                         * angular_bump(dev / math.sqrt(tau)))

        out[i] = integrate.quad(integrand, math.log(lo), math.log(hi),
                                epsabs=1e-13, epsrel=1e-11, limit=400)[0]
    return out


def reproducing_m(frame: PacketFrame | Grid) -> MultiplierSpec:
    """Radial multiplier ``m = 1 / int_{S^1} phi_nu dnu`` on ``|xi| >= 1/2`` (zero below)."""
    grid = frame.grid if isinstance(frame, PacketFrame) else frame
    return MultiplierSpec(grid, _table(grid).m, "m", (0.5, grid.max_freq))


def reproduce(f: Field, ndirs: int = 256) -> Field:
    """``sum_k (2 pi / K) m(D) phi_{nu_k}(D) f`` over ``K`` equispaced directions."""
    t = _table(f.grid)
    th = 2 * np.pi * np.arange(ndirs) / ndirs
    acc = np.zeros(f.grid.shape)
    for a in th:
        acc += t.phi((math.cos(a), math.sin(a)))
    return Field.from_hat(f.grid, (2 * np.pi / ndirs) * t.m * acc * f.hat)


# ---------------------------------------------------------------------------
# FIO Hardy-Sobolev norm


def fio_directions(J: int) -> np.ndarray:
    """Directions used for the sphere integral: ``2^(ceil(J/2) + 3)`` equispaced."""
    K = 2 ** (math.ceil(J / 2) + 3)
    th = 2 * np.pi * np.arange(K) / K
    return np.stack([np.cos(th), np.sin(th)], axis=-1)


@dataclass
class FIONormReport:
    """Terms of the FIO-adapted norm.

    ``value = lowfreq + (sum_w weight * term_w^p)^(1/p)``; for ``p = inf`` the
    direction sum is replaced by a maximum.
    """

    value: float
    lowfreq: float
    terms: list[float]
    weights: list[float]
    s: float
    p: float
    directions: list[list[float]] = field(default_factory=list)
    nodes: int = 0
    surrogate: bool = False

    def to_json(self) -> str:
        p = "inf" if math.isinf(self.p) else self.p
        return json.dumps({"space": "H^{s,p}_FIO", "s": self.s, "p": p, "value": self.value,
                           "lowfreq": self.lowfreq, "terms": self.terms,
                           "weights": self.weights, "directions": self.directions,
                           "quadrature_nodes": self.nodes, "surrogate": self.surrogate})


def norm_HspFIO(f: Field, s: float, p: float, frame: PacketFrame, ndirs: int | None = None) -> FIONormReport:
    """FIO Hardy-Sobolev norm ``||q(D) f||_p + (int ||phi_w(D) f||_{H^{s,p}}^p dw)^(1/p)``.

    The sphere integral uses uniform weights ``2 pi / K`` on ``K`` equispaced
    directions (``K = 2^(ceil(J/2)+3)`` unless given).
    """
    p = float(p)
    if p < 1:
        raise UnsupportedRangeError("p < 1 is not supported")
    grid = f.grid
    grid.check(frame.grid)
    lp = _lp_for(grid)
    low = lp_norm(ifft(lp.q.values * f.hat, grid.n), grid, p)
    if ndirs is None:
        dirs = fio_directions(frame.J)
    else:
        th = 2 * np.pi * np.arange(ndirs) / ndirs
        dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
    t = _table(grid)
    wgt = 2 * np.pi / len(dirs)
    terms = []
    sur = False
    for w in dirs:
        rep = norm_classical(Field.from_hat(grid, t.phi(w) * f.hat), "Hsp", s, p)
        sur = sur or rep.surrogate
        terms.append(rep.value)
    terms_a = np.array(terms)
    if math.isinf(p):
        body = float(terms_a.max())
    else:
        body = float(np.sum(wgt * terms_a**p) ** (1.0 / p))
    return FIONormReport(low + body, low, terms, [wgt] * len(dirs), s, p,
                         dirs.tolist(), t.nodes, sur)
