"""Core domain types: video clips, latent feature grids, variable-FPS clip
sampling, and the LWMF feature file format.

LWMF layout (little-endian):
    magic "LWMF" (4B) | u32 version=1 | u32 T,H,W,D |
    T x f64 timestamps | f32 data row-major [t][h][w][d]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import check_dims, expect_magic, expect_version, read_exact

LWMF_MAGIC = b"LWMF"
LWMF_VERSION = 1

# Default variable-FPS sampling range in seconds, spanning ~2-20 fps
# effective rates.
DEFAULT_DELTA_RANGE = (0.05, 0.5)


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_strictly_increasing(ts: np.ndarray, what: str) -> None:
    if len(ts) > 1 and not np.all(np.diff(ts) > 0):
        raise ValueError(f"{what} timestamps must be strictly increasing")


@dataclass(frozen=True)
class VideoClip:
    """A sequence of RGB frames with absolute timestamps in seconds.

    frames: list of (H', W', 3) uint8 arrays, all the same resolution.
    timestamps: float64 array of length T, strictly increasing.
    """

    frames: list[np.ndarray]
    timestamps: np.ndarray

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("clip needs at least one frame")
        shape = self.frames[0].shape
        if len(shape) != 3 or shape[2] != 3:
            raise ValueError(f"frames must be (H, W, 3), got {shape}")
        for k, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(f"frame {k} has shape {f.shape}, expected {shape}")
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if ts.shape != (len(self.frames),):
            raise ValueError("need one timestamp per frame")
        _check_strictly_increasing(ts, "clip")
        object.__setattr__(self, "frames", [_as_readonly(f) for f in self.frames])
        object.__setattr__(self, "timestamps", _as_readonly(ts))

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        h, w, _ = self.frames[0].shape
        return h, w


@dataclass(frozen=True)
class LatentGrid:
    """Per-frame feature tensor (T, H, W, D) float32 with timestamps.

    One slice ``data[t]`` holds the H x W patch tokens of frame t.
    """

    data: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 4:
            raise ValueError(f"data must be (T, H, W, D), got shape {d.shape}")
        if min(d.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature data contains NaN/Inf")
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if ts.shape != (d.shape[0],):
            raise ValueError("need one timestamp per frame")
        _check_strictly_increasing(ts, "grid")
        object.__setattr__(self, "data", _as_readonly(d))
        object.__setattr__(self, "timestamps", _as_readonly(ts))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    def frame(self, t: int) -> np.ndarray:
        return self.data[t]

    def slice_frames(self, start: int, stop: int) -> "LatentGrid":
        return LatentGrid(self.data[start:stop], self.timestamps[start:stop])


@dataclass(frozen=True)
class SamplerSpec:
    """Variable-FPS clip sampler: T frames with uniform gaps in
    [delta_min, delta_max] seconds."""

    num_frames: int
    delta_min: float = DEFAULT_DELTA_RANGE[0]
    delta_max: float = DEFAULT_DELTA_RANGE[1]

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError("sampler needs at least 2 frames")
        if not (0 < self.delta_min <= self.delta_max):
            raise ValueError(
                f"need 0 < delta_min <= delta_max, got [{self.delta_min}, {self.delta_max}]"
            )


@dataclass(frozen=True)
class VideoMeta:
    """Index metadata for a stored video: duration plus either explicit
    frame timestamps or a constant fps."""

    duration: float
    timestamps: np.ndarray | None = None
    fps: float | None = None
    _frame_ts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if (self.timestamps is None) == (self.fps is None):
            raise ValueError("give exactly one of timestamps or fps")
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64)
            if ts.size < 1:
                raise ValueError("timestamps must be non-empty")
            _check_strictly_increasing(ts, "video")
            if ts[0] < 0 or ts[-1] > self.duration + 1e-9:
                raise ValueError("timestamps must lie within [0, duration]")
        else:
            if self.fps <= 0:
                raise ValueError("fps must be positive")
            n = int(np.floor(self.duration * self.fps)) + 1
            ts = np.arange(n, dtype=np.float64) / self.fps
        object.__setattr__(self, "timestamps", _as_readonly(np.asarray(ts)) if self.timestamps is not None else None)
        object.__setattr__(self, "_frame_ts", _as_readonly(ts))

    @property
    def frame_timestamps(self) -> np.ndarray:
        return self._frame_ts

    @property
    def num_frames(self) -> int:
        return len(self._frame_ts)


def sample_clip_timestamps(
    meta: VideoMeta, spec: SamplerSpec, rng: np.random.Generator
) -> np.ndarray:
    """Sample T target timestamps with consecutive gaps uniform in
    [delta_min, delta_max] and a uniform feasible start.

    Raises ValueError when the video is too short to fit the worst-case clip.
    """
    ts = meta.frame_timestamps
    t_lo, t_hi = float(ts[0]), float(ts[-1])
    span = t_hi - t_lo
    worst = (spec.num_frames - 1) * spec.delta_max
    if worst > span:
        raise ValueError(
            f"clip of {spec.num_frames} frames needs up to {worst:.6g} s "
            f"but video spans only {span:.6g} s"
        )
    gaps = rng.uniform(spec.delta_min, spec.delta_max, size=spec.num_frames - 1)
    start = t_lo + rng.uniform(0.0, span - gaps.sum())
    out = np.empty(spec.num_frames, dtype=np.float64)
    out[0] = start
    out[1:] = start + np.cumsum(gaps)
    return out


def nearest_frame_lookup(meta: VideoMeta, tau: float) -> tuple[int, float]:
    """Return (index, timestamp) of the stored frame closest to ``tau``.

    Requested times outside the video are clamped; exact midpoints break
    toward the earlier frame. The returned timestamp is the frame's true
    time, which is what downstream consumers must use.
    """
    ts = meta.frame_timestamps
    if len(ts) == 0:
        raise ValueError("video has no frames")
    tau = min(max(tau, float(ts[0])), float(ts[-1]))
    hi = int(np.searchsorted(ts, tau, side="left"))
    if hi == 0:
        return 0, float(ts[0])
    if hi >= len(ts):
        return len(ts) - 1, float(ts[-1])
    lo = hi - 1
    if tau - ts[lo] <= ts[hi] - tau:
        return lo, float(ts[lo])
    return hi, float(ts[hi])


def write_feature_file(grid: LatentGrid, path: str | Path) -> None:
    """Persist a LatentGrid as an LWMF file (bit-exact roundtrip)."""
    t, h, w, d = grid.shape
    check_dims((t, h, w, d), itemsize=4)
    with open(path, "wb") as f:
        f.write(LWMF_MAGIC)
        f.write(struct.pack("<IIIII", LWMF_VERSION, t, h, w, d))
        f.write(grid.timestamps.astype("<f8").tobytes())
        f.write(grid.data.astype("<f4").tobytes())


def read_feature_file(path: str | Path) -> LatentGrid:
    """Load an LWMF file written by :func:`write_feature_file`.

    Raises BadMagic / VersionMismatch / TruncatedFile / DimensionOverflow on
    malformed input; never returns a partial grid.
    """
    with open(path, "rb") as f:
        expect_magic(f, LWMF_MAGIC)
        expect_version(f, LWMF_VERSION, "LWMF")
        t, h, w, d = struct.unpack("<IIII", read_exact(f, 16, "dimensions"))
        payload = check_dims((t, h, w, d), itemsize=4)
        ts = np.frombuffer(read_exact(f, 8 * t, "timestamps"), dtype="<f8")
        data = np.frombuffer(read_exact(f, payload, "feature data"), dtype="<f4")
    return LatentGrid(data.reshape(t, h, w, d), ts)
