"""Three-axial rotary position encoding over (time, row, col).

Each attention head's vector is split into three even-sized chunks plus an
unrotated tail. Chunk k encodes one axis: consecutive (even, odd) pairs are
rotated by angle coordinate / period, with periods geometrically spaced.
Time is an absolute timestamp in seconds; spatial coordinates live on a
[-1, +1]^2 grid so relative distances are resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PERIOD_RANGE = (1e-2, 1e2)


def rope_periods(n: int, period_range: tuple[float, float] = DEFAULT_PERIOD_RANGE) -> np.ndarray:
    """n angular periods, log-uniform across period_range.

    For the default range this is 10**linspace(-2, 2, n); n=1 returns the
    lower endpoint.
    """
    if n < 1:
        raise ValueError("need at least one period")
    lo, hi = period_range
    if not (0 < lo < hi):
        raise ValueError(f"invalid period range {period_range}")
    return 10.0 ** np.linspace(np.log10(lo), np.log10(hi), n)


@dataclass(frozen=True)
class RopeConfig:
    """Head-dimension split and period schedule for 3-axial RoPE.

    head_dim = 3 * dims_per_axis + unrotated tail; dims_per_axis = 2 * num_periods.
    """

    head_dim: int
    dims_per_axis: int
    num_periods: int
    period_range: tuple[float, float] = DEFAULT_PERIOD_RANGE

    def __post_init__(self):
        if self.dims_per_axis != 2 * self.num_periods:
            raise ValueError("dims_per_axis must equal 2 * num_periods")
        if self.num_periods < 1:
            raise ValueError("need at least one period per axis")
        if self.rotated_dims > self.head_dim:
            raise ValueError(
                f"3 * {self.dims_per_axis} rotated dims exceed head_dim {self.head_dim}"
            )
        lo, hi = self.period_range
        if not (0 < lo < hi):
            raise ValueError(f"invalid period range {self.period_range}")

    @property
    def rotated_dims(self) -> int:
        return 3 * self.dims_per_axis

    @property
    def unrotated_dims(self) -> int:
        return self.head_dim - self.rotated_dims

    @classmethod
    def for_head_dim(cls, head_dim: int, period_range: tuple[float, float] = DEFAULT_PERIOD_RANGE) -> "RopeConfig":
        """Largest even per-axis split that fits; head_dim 64 gives the
        3 x 20 + 4 layout."""
        per_axis = 2 * (head_dim // 6)
        if per_axis < 2:
            raise ValueError(f"head_dim {head_dim} too small for 3-axial RoPE")
        return cls(head_dim, per_axis, per_axis // 2, period_range)

    def periods(self) -> np.ndarray:
        return rope_periods(self.num_periods, self.period_range)


@dataclass(frozen=True)
class Coord3:
    """Token position: absolute time in seconds, spatial (i, j) in [-1, +1]."""

    tau: float
    i: float
    j: float

    def __post_init__(self):
        if not (-1.0 <= self.i <= 1.0 and -1.0 <= self.j <= 1.0):
            raise ValueError(f"spatial coords must lie in [-1, 1], got ({self.i}, {self.j})")

    def as_array(self) -> np.ndarray:
        return np.array([self.tau, self.i, self.j], dtype=np.float64)


def rope_angles(coords: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotation angles for coordinate rows.

    coords: (..., 3) array of (tau, i, j). Returns (..., 3 * num_periods)
    angles in radians, axis-major: all tau angles, then i, then j.
    """
    coords = np.asarray(coords, dtype=np.float64)
    inv = 1.0 / cfg.periods()
    return (coords[..., :, None] * inv).reshape(*coords.shape[:-1], 3 * cfg.num_periods)


def rotate_token(v: np.ndarray, coord: Coord3, cfg: RopeConfig) -> np.ndarray:
    """Rotate one head-dim vector by its coordinate angles.

    Pairs (v[2k], v[2k+1]) within each axis chunk rotate by coord_axis /
    period_k; the trailing unrotated dims pass through. Norm is preserved.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cfg.head_dim,):
        raise ValueError(f"expected vector of length {cfg.head_dim}, got {v.shape}")
    ang = rope_angles(coord.as_array(), cfg)
    cos, sin = np.cos(ang), np.sin(ang)
    out = v.copy()
    r = cfg.rotated_dims
    even, odd = v[0:r:2], v[1:r:2]
    out[0:r:2] = even * cos - odd * sin
    out[1:r:2] = even * sin + odd * cos
    return out
