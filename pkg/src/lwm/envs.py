"""Deterministic 2D toy environments with pixel rendering and offline
trajectory generation.

Two layouts on the unit square: ``wall`` (two rooms split by a wall with a
door; the agent is position controlled) and ``pointmaze`` (a U-shaped
corridor around a central block; the agent is a force-actuated ball with
velocity, damping, and inertia). Collisions resolve axis by axis: the
agent slides along obstacle faces and never penetrates them.

LWMT trajectory file layout (little-endian):
    magic "LWMT" | u32 version=1 | u32 spec length | spec text (key=value) |
    u64 seed | u32 count | u32 action dim | u32 state dim |
    per trajectory: u32 T | state_dim x f64 initial state |
                    T x res x res x 3 u8 frames | (T-1) x A f32 actions
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .actions import ActionTrajectory
from .binio import check_dims, expect_magic, expect_version, read_exact
from .data import VideoClip

LWMT_MAGIC = b"LWMT"
LWMT_VERSION = 1

# Render palette: background, wall, goal, agent. Kept far apart so the toy
# encoder separates the classes easily.
COLOR_BACKGROUND = (30, 30, 30)
COLOR_WALL = (140, 140, 140)
COLOR_GOAL = (40, 200, 70)
COLOR_AGENT = (230, 60, 50)

CLASS_BACKGROUND, CLASS_WALL, CLASS_AGENT, CLASS_GOAL = 0, 1, 2, 3


@dataclass(frozen=True)
class EnvSpec:
    """Geometry and dynamics constants, all in unit-square units."""

    kind: str = "wall"
    resolution: int = 64
    agent_radius: float = 0.03
    render_radius: float = 0.055
    door_span: float = 0.2
    wall_x: float = 0.5
    wall_thickness: float = 0.04
    dt: float = 0.1
    damping: float = 0.95
    max_force: float = 1.0
    wall_speed: float = 0.5
    success_radius: float = 0.05
    frame_dt: float = 0.1

    def __post_init__(self):
        if self.kind not in ("wall", "pointmaze"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.success_radius <= 0:
            raise ValueError("success radius must be positive")
        for name in ("agent_radius", "door_span", "dt", "max_force", "frame_dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.damping < 1):
            raise ValueError("damping must lie in (0, 1)")

    @property
    def obstacles(self) -> list[tuple[float, float, float, float]]:
        """Axis-aligned obstacle rectangles (x0, x1, y0, y1)."""
        if self.kind == "wall":
            half = self.wall_thickness / 2
            lo, hi = 0.5 - self.door_span / 2, 0.5 + self.door_span / 2
            return [
                (self.wall_x - half, self.wall_x + half, 0.0, lo),
                (self.wall_x - half, self.wall_x + half, hi, 1.0),
            ]
        return [(0.3, 0.7, 0.3, 1.0)]

    @property
    def max_speed(self) -> float:
        """Steady-state speed bound of the damped integrator."""
        return self.dt * self.max_force / (1.0 - self.damping) * np.sqrt(2.0)

    def to_text(self) -> str:
        fields = (
            "kind resolution agent_radius render_radius door_span wall_x "
            "wall_thickness dt damping max_force wall_speed success_radius frame_dt"
        ).split()
        return "\n".join(f"{k}={getattr(self, k)}" for k in fields)

    @classmethod
    def from_text(cls, text: str) -> "EnvSpec":
        kwargs = {}
        for line in text.splitlines():
            if not line:
                continue
            k, _, v = line.partition("=")
            kwargs[k] = v if k == "kind" else (int(v) if k == "resolution" else float(v))
        return cls(**kwargs)


@dataclass(frozen=True)
class EnvState:
    """Agent position/velocity and goal, all inside the unit square."""

    pos: tuple[float, float]
    vel: tuple[float, float]
    goal: tuple[float, float]
    kind: str

    def to_vector(self) -> np.ndarray:
        return np.array([*self.pos, *self.vel, *self.goal], dtype=np.float64)

    @classmethod
    def from_vector(cls, v: np.ndarray, kind: str) -> "EnvState":
        v = np.asarray(v, dtype=np.float64)
        return cls((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), kind)


STATE_DIM = 6


def _expanded(rect, r):
    x0, x1, y0, y1 = rect
    return x0 - r, x1 + r, y0 - r, y1 + r


def in_free_space(spec: EnvSpec, pos: tuple[float, float], slack: float = 1e-9) -> bool:
    """True when a disc of agent_radius at pos overlaps no obstacle and
    stays inside the arena."""
    x, y = pos
    r = spec.agent_radius
    if not (r - slack <= x <= 1 - r + slack and r - slack <= y <= 1 - r + slack):
        return False
    for rect in spec.obstacles:
        x0, x1, y0, y1 = _expanded(rect, r)
        if x0 + slack < x < x1 - slack and y0 + slack < y < y1 - slack:
            return False
    return True


def _move_axis(spec: EnvSpec, pos: float, target: float, other: float, axis: int) -> tuple[float, bool]:
    """Slide along one axis from pos to target, stopping at obstacle faces.

    Returns (new coordinate, blocked flag). ``other`` is the fixed
    coordinate of the other axis.
    """
    r = spec.agent_radius
    new = min(max(target, r), 1.0 - r)
    blocked = new != target
    for rect in spec.obstacles:
        x0, x1, y0, y1 = _expanded(rect, r)
        lo, hi = (x0, x1) if axis == 0 else (y0, y1)
        olo, ohi = (y0, y1) if axis == 0 else (x0, x1)
        if not (olo < other < ohi):
            continue
        inside = lo < new < hi
        crossed = (pos <= lo and new >= hi) or (pos >= hi and new <= lo)
        if inside or crossed:
            new = lo if pos <= lo else hi
            blocked = True
    return new, blocked


def move_with_collision(
    spec: EnvSpec, pos: tuple[float, float], delta: tuple[float, float]
) -> tuple[tuple[float, float], tuple[bool, bool]]:
    """Axis-separated slide: resolve x, then y at the updated x."""
    x, y = pos
    nx, bx = _move_axis(spec, x, x + delta[0], y, axis=0)
    ny, by = _move_axis(spec, y, y + delta[1], nx, axis=1)
    return (nx, ny), (bx, by)


def sample_free_position(spec: EnvSpec, rng: np.random.Generator) -> tuple[float, float]:
    """Rejection-sample a position whose agent disc sits in free space."""
    r = spec.agent_radius
    for _ in range(10_000):
        pos = (rng.uniform(r, 1 - r), rng.uniform(r, 1 - r))
        if in_free_space(spec, pos):
            return pos
    raise RuntimeError("could not sample a free position; check geometry")


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    """Uniformly random agent and goal positions in free space."""
    pos = sample_free_position(spec, rng)
    goal = sample_free_position(spec, rng)
    return EnvState(pos, (0.0, 0.0), goal, spec.kind)


def env_step(spec: EnvSpec, state: EnvState, action: np.ndarray) -> EnvState:
    """Advance one step. Wall: position displacement. PointMaze: damped
    velocity integration. Blocked velocity components are zeroed."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2,):
        raise ValueError(f"action must be a 2-vector, got shape {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValueError("action contains NaN/Inf")
    a = np.clip(action, -spec.max_force, spec.max_force)
    if spec.kind == "wall":
        delta = (a[0] * spec.wall_speed * spec.dt, a[1] * spec.wall_speed * spec.dt)
        pos, _ = move_with_collision(spec, state.pos, delta)
        return replace(state, pos=pos)
    vx = spec.damping * state.vel[0] + a[0] * spec.dt
    vy = spec.damping * state.vel[1] + a[1] * spec.dt
    pos, (bx, by) = move_with_collision(spec, state.pos, (vx * spec.dt, vy * spec.dt))
    vel = (0.0 if bx else vx, 0.0 if by else vy)
    return replace(state, pos=pos, vel=vel)


def is_success(spec: EnvSpec, state: EnvState) -> bool:
    dx = state.pos[0] - state.goal[0]
    dy = state.pos[1] - state.goal[1]
    return float(np.hypot(dx, dy)) < spec.success_radius


# -- rendering -----------------------------------------------------------------


def _pixel_centers(res: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c, indexing="ij")  # (y, x) grids


def _disc_mask(res: int, center: tuple[float, float], radius: float) -> np.ndarray:
    yy, xx = _pixel_centers(res)
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius**2


def _wall_mask(spec: EnvSpec, res: int) -> np.ndarray:
    yy, xx = _pixel_centers(res)
    mask = np.zeros((res, res), dtype=bool)
    for x0, x1, y0, y1 in spec.obstacles:
        mask |= (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    return mask


def render_class_map(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Per-pixel class ids with the same draw order as env_render."""
    res = spec.resolution
    out = np.full((res, res), CLASS_BACKGROUND, dtype=np.uint8)
    out[_wall_mask(spec, res)] = CLASS_WALL
    out[_disc_mask(res, state.goal, spec.render_radius)] = CLASS_GOAL
    out[_disc_mask(res, state.pos, spec.render_radius)] = CLASS_AGENT
    return out


def env_render(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Deterministic (res, res, 3) uint8 frame; agent drawn on top."""
    palette = np.array(
        [COLOR_BACKGROUND, COLOR_WALL, COLOR_AGENT, COLOR_GOAL], dtype=np.uint8
    )
    return palette[render_class_map(spec, state)]


# -- trajectory generation and the LWMT format ----------------------------------


@dataclass(frozen=True)
class TrajectoryDataset:
    """Offline random-policy trajectories plus the spec and seed that
    generated them."""

    trajectories: list[ActionTrajectory]
    spec: EnvSpec
    seed: int

    def __len__(self) -> int:
        return len(self.trajectories)


def rollout_policy(
    spec: EnvSpec, state: EnvState, actions: np.ndarray
) -> list[np.ndarray]:
    """Re-simulate stored actions from a state; returns all rendered frames
    (including the initial one)."""
    frames = [env_render(spec, state)]
    for a in actions:
        state = env_step(spec, state, a)
        frames.append(env_render(spec, state))
    return frames


def replay_states(spec: EnvSpec, init_state: np.ndarray, actions: np.ndarray) -> list[EnvState]:
    """States visited when replaying stored actions, including the first."""
    state = EnvState.from_vector(init_state, spec.kind)
    states = [state]
    for a in actions:
        state = env_step(spec, state, a)
        states.append(state)
    return states


def generate_trajectories(
    spec: EnvSpec, count: int, length: int, seed: int
) -> TrajectoryDataset:
    """Random-policy rollouts: ``count`` trajectories of ``length`` frames.

    Frame timestamps advance by spec.frame_dt; actions are uniform in the
    legal action box. (spec, seed, count, length) fully determine the
    result, byte for byte.
    """
    if count < 1 or length < 1:
        raise ValueError("count and length must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    ts = np.arange(length, dtype=np.float64) * spec.frame_dt
    for _ in range(count):
        state = env_reset(spec, rng)
        init = state.to_vector()
        frames = [env_render(spec, state)]
        actions = rng.uniform(-spec.max_force, spec.max_force, size=(length - 1, 2))
        for a in actions:
            state = env_step(spec, state, a)
            frames.append(env_render(spec, state))
        out.append(
            ActionTrajectory(
                VideoClip(frames, ts), actions.astype(np.float32), init
            )
        )
    return TrajectoryDataset(out, spec, seed)


def write_trajectories(ds: TrajectoryDataset, path: str | Path) -> None:
    spec_text = ds.spec.to_text().encode("utf-8")
    a_dim = ds.trajectories[0].action_dim if ds.trajectories else 2
    with open(path, "wb") as f:
        f.write(LWMT_MAGIC)
        f.write(struct.pack("<I", LWMT_VERSION))
        f.write(struct.pack("<I", len(spec_text)))
        f.write(spec_text)
        f.write(struct.pack("<QIII", ds.seed, len(ds.trajectories), a_dim, STATE_DIM))
        for traj in ds.trajectories:
            t = traj.clip.num_frames
            f.write(struct.pack("<I", t))
            if traj.init_state is None:
                raise ValueError("trajectory missing initial state; not replayable")
            f.write(traj.init_state.astype("<f8").tobytes())
            f.write(np.stack(traj.clip.frames).tobytes())
            f.write(traj.actions.astype("<f4").tobytes())


def read_trajectories(path: str | Path) -> TrajectoryDataset:
    with open(path, "rb") as f:
        expect_magic(f, LWMT_MAGIC)
        expect_version(f, LWMT_VERSION, "LWMT")
        (spec_len,) = struct.unpack("<I", read_exact(f, 4, "spec length"))
        spec = EnvSpec.from_text(read_exact(f, spec_len, "spec").decode("utf-8"))
        seed, count, a_dim, state_dim = struct.unpack(
            "<QIII", read_exact(f, 20, "dataset header")
        )
        if state_dim != STATE_DIM:
            raise ValueError(f"unsupported state dim {state_dim}")
        res = spec.resolution
        out = []
        for _ in range(count):
            (t,) = struct.unpack("<I", read_exact(f, 4, "trajectory length"))
            check_dims((t, res, res, 3), itemsize=1)
            init = np.frombuffer(
                read_exact(f, 8 * STATE_DIM, "initial state"), dtype="<f8"
            )
            frames_raw = read_exact(f, t * res * res * 3, "frames")
            frames = np.frombuffer(frames_raw, dtype=np.uint8).reshape(t, res, res, 3)
            acts = np.frombuffer(
                read_exact(f, 4 * (t - 1) * a_dim, "actions"), dtype="<f4"
            ).reshape(t - 1, a_dim)
            ts = np.arange(t, dtype=np.float64) * spec.frame_dt
            out.append(
                ActionTrajectory(VideoClip(list(frames), ts), acts, init.copy())
            )
    return TrajectoryDataset(out, spec, seed)
