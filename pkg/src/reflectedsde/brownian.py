"""Dyadic Brownian paths and their lagged piecewise-linear interpolation.

Paths are built canonically by midpoint refinement from the unit grid: the
level-0 increments and every level's midpoint perturbations come from
independent counter-based streams keyed by ``(seed, level)``, with stream
row ``k`` feeding knot ``k``.  As a result refinement is reproducible
independent of call order, ``refine`` then restrict returns the original
knot values byte-exactly, and sampling directly at a fine level equals
repeated refinement of a coarser path.

The interpolant is the lagged one: on the knot interval starting at
``k / 2^n`` it interpolates the path over the PREVIOUS knot interval, which
makes its slope depend only on already-observed increments.  Values at
negative times are the value at zero.  This differs from the common
current-interval interpolation on purpose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import InvalidHorizon, LevelTooFine

_HEADER = struct.Struct("<IIdQ")


def _level_stream(seed: int, level: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, level])))


@dataclass(frozen=True)
class BrownianPath:
    """Brownian knot values on a dyadic grid of spacing ``2^-fine_level``.

    ``values`` has shape ``(K + 1, dim_noise)`` with ``values[0] = 0``; the
    horizon is ``K / 2^fine_level`` (the requested horizon padded up to a
    dyadic multiple).  Immutable; ``refine`` returns a new path.
    """

    dim_noise: int
    horizon: float
    fine_level: int
    seed: int
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def increments(self) -> np.ndarray:
        """Per-knot increments, shape (K, dim_noise)."""
        return np.diff(self.values, axis=0)

    @property
    def n_knots(self) -> int:
        return self.values.shape[0] - 1


@dataclass(frozen=True)
class DyadicIndex:
    """Knot interval bookkeeping: interval ``[knot/2^level, (knot+1)/2^level)``."""

    level: int
    knot: int

    @property
    def s_minus(self) -> float:
        return max(self.knot - 1, 0) / 2.0**self.level

    @property
    def s_n(self) -> float:
        return self.knot / 2.0**self.level

    @classmethod
    def from_time(cls, level: int, t: float) -> "DyadicIndex":
        return cls(level, int(np.floor(t * 2.0**level)))


def sample_path(m: int, T: float, fine_level: int, seed: int) -> BrownianPath:
    """Sample a Brownian path on the dyadic grid, canonically refined.

    Deterministic given ``(seed, m, T, fine_level)``.  The horizon is padded
    up to the next multiple of the grid spacing when needed.
    """
    if T <= 0:
        raise InvalidHorizon(f"horizon must be positive, got {T}")
    if fine_level < 1:
        raise ValueError("fine_level must be at least 1")
    if m < 1:
        raise ValueError("dim_noise must be at least 1")
    n_fine = ceil(T * 2.0**fine_level - 1e-9)
    units = ceil(n_fine / 2.0**fine_level - 1e-12)

    draws = _level_stream(seed, 0).standard_normal((units, m))
    values = np.zeros((units + 1, m))
    np.cumsum(draws, axis=0, out=values[1:])
    for level in range(1, fine_level + 1):
        values = _refine_values(values, seed, level)
    return BrownianPath(m, n_fine / 2.0**fine_level, fine_level, seed, values[: n_fine + 1])


def _refine_values(values: np.ndarray, seed: int, new_level: int) -> np.ndarray:
    n_int, m = values.shape[0] - 1, values.shape[1]
    xi = _level_stream(seed, new_level).standard_normal((n_int, m))
    xi *= 2.0 ** (-0.5 * (new_level + 1))
    out = np.empty((2 * n_int + 1, m))
    out[0::2] = values
    out[1::2] = 0.5 * (values[:-1] + values[1:]) + xi
    return out


def refine(path: BrownianPath) -> BrownianPath:
    """One level of midpoint insertion; existing knot values are kept exactly."""
    values = _refine_values(np.asarray(path.values), path.seed, path.fine_level + 1)
    return BrownianPath(path.dim_noise, path.horizon, path.fine_level + 1, path.seed, values)


def restrict(path: BrownianPath, level: int) -> BrownianPath:
    """Restriction to a coarser dyadic grid (knot values shared byte-exactly)."""
    if level > path.fine_level:
        raise LevelTooFine(f"cannot restrict level {path.fine_level} to finer level {level}")
    stride = 2 ** (path.fine_level - level)
    return BrownianPath(
        path.dim_noise, path.horizon, level, path.seed, np.asarray(path.values)[::stride]
    )


def level_values(path: BrownianPath, n: int) -> np.ndarray:
    """Path values at the level-``n`` knots that the path's grid contains."""
    if n > path.fine_level:
        raise LevelTooFine(f"level {n} exceeds the path's fine level {path.fine_level}")
    stride = 2 ** (path.fine_level - n)
    n_full = path.n_knots // stride
    idx = np.minimum(np.arange(n_full + 1) * stride, path.n_knots)
    return np.asarray(path.values)[idx]


def wz_value(path: BrownianPath, n: int, t: float) -> np.ndarray:
    """Lagged piecewise-linear interpolant at time ``t``.

    On ``[k/2^n, (k+1)/2^n)`` the value runs linearly from the knot value at
    ``(k-1)/2^n`` to the one at ``k/2^n``; values at negative times are zero.
    """
    if n > path.fine_level:
        raise LevelTooFine(f"level {n} exceeds the path's fine level {path.fine_level}")
    if t < 0 or t > path.horizon + 1e-12:
        raise ValueError(f"time {t} outside [0, {path.horizon}]")
    scaled = t * 2.0**n
    k = int(np.floor(scaled))
    frac = scaled - k
    stride = 2 ** (path.fine_level - n)
    values = np.asarray(path.values)
    w_k = values[min(k * stride, path.n_knots)]
    w_prev = values[max(k - 1, 0) * stride]
    return w_prev + frac * (w_k - w_prev)


def wz_slope(path: BrownianPath, n: int, t: float) -> np.ndarray:
    """Right-continuous derivative of the lagged interpolant at time ``t``."""
    if n > path.fine_level:
        raise LevelTooFine(f"level {n} exceeds the path's fine level {path.fine_level}")
    if t < 0 or t > path.horizon + 1e-12:
        raise ValueError(f"time {t} outside [0, {path.horizon}]")
    k = int(np.floor(t * 2.0**n))
    stride = 2 ** (path.fine_level - n)
    values = np.asarray(path.values)
    w_k = values[min(k * stride, path.n_knots)]
    w_prev = values[max(k - 1, 0) * stride]
    return 2.0**n * (w_k - w_prev)


def wz_knot_slopes(path: BrownianPath, n: int) -> np.ndarray:
    """Interpolant slope per knot interval covering the horizon.

    Row ``k`` is the constant slope on ``[k/2^n, (k+1)/2^n)``: ``2^n`` times
    the previous knot increment, zero on the first interval.  The number of
    rows is the number of level-``n`` intervals needed to cover the horizon
    (at least one, even for horizons shorter than a knot).
    """
    knots = level_values(path, n)
    stride = 2 ** (path.fine_level - n)
    n_int = max(1, -(-path.n_knots // stride))
    slopes = np.zeros((n_int, path.dim_noise))
    lagged = 2.0**n * np.diff(knots, axis=0)
    take = min(len(lagged), n_int - 1)
    slopes[1 : 1 + take] = lagged[:take]
    return slopes


def dump_increments(path: BrownianPath, fileobj) -> None:
    """Binary dump: little-endian header (m, fine_level, horizon, seed) then increments."""
    fileobj.write(
        _HEADER.pack(
            path.dim_noise,
            path.fine_level,
            path.horizon,
            path.seed & 0xFFFFFFFFFFFFFFFF,
        )
    )
    fileobj.write(np.ascontiguousarray(path.increments, dtype="<f8").tobytes())


def load_increments(fileobj) -> BrownianPath:
    """Rebuild a path from a binary dump (knot values to floating-point precision)."""
    m, fine_level, horizon, seed = _HEADER.unpack(fileobj.read(_HEADER.size))
    raw = np.frombuffer(fileobj.read(), dtype="<f8").reshape(-1, m)
    values = np.zeros((raw.shape[0] + 1, m))
    np.cumsum(raw, axis=0, out=values[1:])
    return BrownianPath(m, horizon, fine_level, seed, values)
