"""Cosphere geometry: the parabolic quasi-metric, metric balls and maximal functions.

Phase space is ``T^2 x S^1``: a position on the torus together with a unit
direction.  Directions at scale ``sigma_j = 2^-j`` come from an equispaced grid
with ``ceil(2*pi*2^(j/2))`` members.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .spectral_core import Grid

__all__ = [
    "CospherePoint",
    "DirectionGrid",
    "PhaseFunctionSample",
    "direction_count",
    "directions",
    "torus_diff",
    "metric_d",
    "metric_d_array",
    "ball_members",
    "ball_volume",
    "volume_growth",
    "maximal_Mlambda",
    "quasi_triangle_constant",
    "write_ball_stats",
]


def direction_count(j: int) -> int:
    """Number of directions used at scale ``2^-j``."""
    return math.ceil(2 * math.pi * 2 ** (j / 2))


@lru_cache(maxsize=None)
def _directions(count: int) -> np.ndarray:
    th = 2 * np.pi * np.arange(count) / count
    d = np.stack([np.cos(th), np.sin(th)], axis=-1)
    d.setflags(write=False)
    return d


def directions(j: int) -> np.ndarray:
    """Unit vectors of the scale-``j`` direction grid, shape ``(N_j, 2)``."""
    return _directions(direction_count(j))


@dataclass(frozen=True)
class CospherePoint:
    """A phase-space point ``(x, omega)`` with optional scale ``sigma``."""

    x: tuple[float, ...]
    omega: tuple[float, ...]
    sigma: float | None = None

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        nrm = float(np.linalg.norm(w))
        if abs(nrm - 1.0) > 1e-12:
            raise ValueError(f"direction must be a unit vector (|omega| = {nrm})")
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "omega", tuple(float(v) for v in w / nrm))


@dataclass(frozen=True)
class DirectionGrid:
    """Per-scale equispaced direction sets for scales ``1..J``."""

    J: int

    def at(self, j: int) -> np.ndarray:
        return directions(j)

    def counts(self) -> list[int]:
        return [direction_count(j) for j in range(1, self.J + 1)]

    def max_neighbor_angle(self, j: int) -> float:
        return 2 * math.pi / direction_count(j)


@dataclass(frozen=True, eq=False)
class PhaseFunctionSample:
    """Real samples indexed by ``(direction k, grid point x)`` at one scale."""

    grid: Grid
    j: int
    values: np.ndarray

    def __post_init__(self):
        want = (direction_count(self.j),) + self.grid.shape
        if self.values.shape != want:
            raise ValueError(f"expected shape {want}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("phase-space samples must be finite")


def torus_diff(x, y) -> np.ndarray:
    """Shortest periodic difference ``x - y`` per axis, in ``(-pi, pi]``."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return d - 2 * np.pi * np.round(d / (2 * np.pi))


def metric_d_array(x, omega, y, nu) -> np.ndarray:
    """Vectorized ``(|omega.(x-y)| + |x-y|^2 + |omega-nu|^2)^(1/2)``."""
    z = torus_diff(x, y)
    omega = np.asarray(omega, dtype=float)
    nu = np.asarray(nu, dtype=float)
    along = np.abs(np.sum(omega * z, axis=-1))
    return np.sqrt(along + np.sum(z * z, axis=-1) + np.sum((omega - nu) ** 2, axis=-1))


def metric_d(a: CospherePoint, b: CospherePoint) -> float:
    """Parabolic quasi-distance between two phase-space points.

    The first argument's direction sets the parabolic orientation; the value
    is symmetrized by taking the larger of the two orientations, which keeps
    the two-sided equivalence with the sub-Riemannian metric.
    """
    d1 = metric_d_array(a.x, a.omega, b.x, b.omega)
    d2 = metric_d_array(b.x, b.omega, a.x, a.omega)
    return float(max(d1, d2))


def _offsets(grid: Grid) -> np.ndarray:
    # wrapped coordinate offsets z of every grid point from the origin
    k = np.fft.fftfreq(grid.N, 1.0 / grid.N) * grid.spacing
    return np.stack(np.meshgrid(*([k] * grid.n), indexing="ij"), axis=-1)


def ball_members(center: CospherePoint, tau: float, j: int, grid: Grid) -> np.ndarray:
    """All lattice points of ``grid x directions(j)`` within distance ``tau``.

    Returns
    -------
    ndarray of int, shape (count, 1 + n)
        Rows ``(direction index, grid index_1, ..., grid index_n)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    dirs = directions(j)
    if len(dirs) == 0:
        raise ValueError("empty direction grid")
    pts = np.stack(grid.coords, axis=-1)
    x = np.asarray(center.x)
    w = np.asarray(center.omega)
    rows = []
    for k, nu in enumerate(dirs):
        ang = float(np.sum((w - nu) ** 2))
        if ang > tau * tau:
            continue
        z = torus_diff(x, pts)
        d2 = np.maximum(np.abs(z @ w), np.abs(z @ nu)) + np.sum(z * z, axis=-1) + ang
        idx = np.argwhere(d2 <= tau * tau)
        if len(idx):
            rows.append(np.column_stack([np.full(len(idx), k), idx]))
    if not rows:
        return np.zeros((0, 1 + grid.n), dtype=int)
    return np.concatenate(rows)


def ball_volume(count: int, j: int, grid: Grid) -> float:
    """Phase-space measure represented by ``count`` lattice members (arc-length on S^1)."""
    return count * grid.cell * 2 * np.pi / direction_count(j)


def volume_growth(grid: Grid, j: int, taus, samples: int = 40, rng=None) -> np.ndarray:
    """Mean ball member counts over uniformly random phase-space centers.

    Averaging over off-lattice centers makes the mean count an unbiased estimate
    of ``|B_tau| / (cell * dnu)`` even when ``tau^2`` is below the grid spacing.
    """
    rng = np.random.default_rng(rng)
    out = []
    for tau in taus:
        tot = 0
        for _ in range(samples):
            x = rng.uniform(0, 2 * np.pi, grid.n)
            th = rng.uniform(0, 2 * np.pi)
            c = CospherePoint(tuple(x), (math.cos(th), math.sin(th)))
            tot += len(ball_members(c, float(tau), j, grid))
        out.append(tot / samples)
    return np.array(out)


def _stencil(grid: Grid, w: np.ndarray, nu: np.ndarray, budget: float) -> np.ndarray:
    z = _offsets(grid)
    d2 = np.maximum(np.abs(z @ w), np.abs(z @ nu)) + np.sum(z * z, axis=-1)
    return (d2 <= budget).astype(float)


def maximal_Mlambda(g: PhaseFunctionSample, lam: float, radii=None) -> PhaseFunctionSample:
    """Fractional maximal function ``(M |g|^lam)^(1/lam)`` on phase space.

    ``M`` is the centered maximal operator over metric balls whose radii form a
    geometric sequence (ratio 2) from one grid cell up to the phase-space
    diameter.  The zero-radius limit is included, so the output dominates ``|g|``
    pointwise.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    grid, j = g.grid, g.j
    dirs = directions(j)
    K = len(dirs)
    a = np.abs(g.values)
    pw = a**lam
    if radii is None:
        diam = math.sqrt(math.pi * math.sqrt(grid.n) + grid.n * math.pi**2 + 4.0)
        radii = []
        r = grid.spacing
        while r < 2 * diam:
            radii.append(r)
            r *= 2
    pw_hat = np.fft.rfftn(pw, axes=(-2, -1))
    best = np.zeros_like(a)
    for k in range(K):
        w = dirs[k]
        chord2 = np.sum((dirs - w) ** 2, axis=-1)
        for r in radii:
            acc = np.zeros(grid.shape)
            total = 0.0
            for kk in np.nonzero(chord2 <= r * r)[0]:
                st = _stencil(grid, w, dirs[kk], r * r - chord2[kk])
                cnt = st.sum()
                if cnt == 0:
                    continue
                total += cnt
                # centered average: convolution with the point-symmetric stencil
                acc += np.fft.irfftn(pw_hat[kk] * np.fft.rfftn(st), s=grid.shape, axes=(-2, -1))
            if total > 0:
                avg = np.maximum(acc / total, 0.0)
                best[k] = np.maximum(best[k], avg)
    out = np.maximum(a, best ** (1.0 / lam))
    return PhaseFunctionSample(grid, j, out)


def quasi_triangle_constant(trials: int = 10_000, rng=None) -> float:
    """Largest observed ``d(a,c) / (d(a,b) + d(b,c))`` over random triples."""
    rng = np.random.default_rng(rng)

    def pts(m):
        x = rng.uniform(0, 2 * np.pi, size=(m, 2))
        th = rng.uniform(0, 2 * np.pi, size=m)
        return x, np.stack([np.cos(th), np.sin(th)], axis=-1)

    def sym(xa, wa, xb, wb):
        return np.maximum(metric_d_array(xa, wa, xb, wb), metric_d_array(xb, wb, xa, wa))

    xa, wa = pts(trials)
    # cluster b and c near a so that small scales dominate the sample
    scale = 10 ** rng.uniform(-3, 0, size=(trials, 1))
    xb = xa + scale * rng.standard_normal((trials, 2))
    xc = xa + scale * rng.standard_normal((trials, 2))
    tb = np.arctan2(wa[:, 1], wa[:, 0]) + scale[:, 0] * rng.standard_normal(trials)
    tc = np.arctan2(wa[:, 1], wa[:, 0]) + scale[:, 0] * rng.standard_normal(trials)
    wb = np.stack([np.cos(tb), np.sin(tb)], axis=-1)
    wc = np.stack([np.cos(tc), np.sin(tc)], axis=-1)
    ac = sym(xa, wa, xc, wc)
    denom = sym(xa, wa, xb, wb) + sym(xb, wb, xc, wc)
    ok = denom > 0
    return float(np.max(ac[ok] / denom[ok]))


def write_ball_stats(path, taus, counts) -> None:
    """Dump ``(tau, count)`` rows as CSV."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "count"])
        for t, c in zip(taus, counts):
            w.writerow([f"{t:.6g}", f"{c:.6g}"])
