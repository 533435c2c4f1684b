"""Cross-Entropy Method planning in latent space.

Candidate action sequences roll through the conditioned predictor with
frameskip grouping; the cost is the L2 distance between the final
predicted feature grid and the encoded goal image. The CEM refits a
diagonal Gaussian proposal to the elite candidates each iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .actions import ConditionedPredictor
from .data import LatentGrid
from .envs import EnvSpec, EnvState, env_render, env_reset, env_step, is_success

STD_FLOOR = 1e-3


@dataclass(frozen=True)
class PlanParams:
    """CEM hyperparameters; defaults follow the planning setup
    {N=300, H=25, f=5, H'=5, m=25, K=10, J=30}."""

    population: int = 300
    horizon: int = 25
    frameskip: int = 5
    executed: int = 25
    elites: int = 10
    iterations: int = 30

    def __post_init__(self):
        for name in ("population", "horizon", "frameskip", "executed", "elites", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.horizon % self.frameskip != 0:
            raise ValueError(
                f"frameskip {self.frameskip} must divide horizon {self.horizon}"
            )
        if self.elites > self.population:
            raise ValueError("elites must not exceed population")
        if self.executed > self.horizon:
            raise ValueError("executed actions must not exceed horizon")

    @property
    def predictor_calls(self) -> int:
        return self.horizon // self.frameskip


@dataclass(frozen=True)
class ProposalDistribution:
    """Diagonal Gaussian over action sequences in R^(H x A)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std shapes differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ValueError("proposal parameters must be finite")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"std below floor {STD_FLOOR}")

    @classmethod
    def standard(cls, dims: tuple[int, int]) -> "ProposalDistribution":
        return cls(np.zeros(dims), np.ones(dims))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, *self.mean.shape))

    def refit(self, elites: np.ndarray) -> "ProposalDistribution":
        """Empirical per-dimension mean/std of the elites, std floored."""
        return ProposalDistribution(
            elites.mean(axis=0), np.maximum(elites.std(axis=0), STD_FLOOR)
        )


def cem_optimize(
    objective,
    dims: tuple[int, int],
    params: PlanParams,
    rng: np.random.Generator,
    clamp: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Minimize a batched objective over action sequences.

    objective: callable taking (n, H, A) and returning (n,) costs.
    Returns (best sequence ever seen, best-ever cost after each iteration).
    """
    dist = ProposalDistribution.standard(dims)
    best_seq, best_cost = None, np.inf
    curve = np.empty(params.iterations)
    for j in range(params.iterations):
        samples = dist.sample(rng, params.population)
        if clamp is not None:
            samples = np.clip(samples, clamp[0], clamp[1])
        costs = np.asarray(objective(samples), dtype=np.float64)
        if costs.shape != (params.population,):
            raise ValueError(f"objective returned shape {costs.shape}")
        order = np.argsort(costs, kind="stable")
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_seq = samples[order[0]].copy()
        dist = dist.refit(samples[order[: params.elites]])
        curve[j] = best_cost
    return best_seq, curve


def planning_objective(
    model: ConditionedPredictor,
    start: LatentGrid,
    goal: LatentGrid,
    params: PlanParams,
    frame_dt: float,
):
    """Batched latent-rollout cost: roll H' = H/f conditioned steps, then
    take the L2 distance of the final predicted grid to the goal grid."""
    if start.num_frames != 1 or goal.num_frames != 1:
        raise ValueError("start and goal must be single-frame grids")
    dtype = next(model.parameters()).dtype
    _, h, w, d = start.shape
    goal_flat = torch.tensor(goal.data.reshape(1, -1), dtype=dtype)
    start_t = torch.tensor(start.data, dtype=dtype)
    t0 = float(start.timestamps[0])
    f = params.frameskip

    def objective(action_batch: np.ndarray) -> np.ndarray:
        n, horizon, a_dim = action_batch.shape
        if horizon % f != 0:
            raise ValueError(f"horizon {horizon} not divisible by frameskip {f}")
        grouped = action_batch.reshape(n, horizon // f, f * a_dim)
        acts = torch.tensor(grouped, dtype=dtype)
        feats = start_t.unsqueeze(0).expand(n, 1, h, w, d)
        ts = np.array([t0])
        with torch.no_grad():
            for g in range(horizon // f):
                tau = t0 + (g + 1) * f * frame_dt
                pred = model.direct_predictions(feats, ts, tau, acts[:, g])
                feats = torch.cat((feats, pred.view(n, 1, h, w, d)), dim=1)
                ts = np.append(ts, tau)
        final = feats[:, -1].reshape(n, -1)
        return torch.linalg.vector_norm(final - goal_flat, dim=1).numpy()

    return objective


def sample_plan_episode(
    spec: EnvSpec, params: PlanParams, rng: np.random.Generator, margin: float = 0.85
) -> EnvState:
    """Reset until the goal is reachable within the horizon.

    Reachability is a path-length bound: straight line in one room, or via
    the door center between rooms, against the maximum distance the agent
    can cover in H steps.
    """
    if spec.kind == "wall":
        budget = params.horizon * spec.wall_speed * spec.dt * margin
    else:
        # Damped integrator from rest: cumulative displacement over H steps.
        lam, v, dist = spec.damping, 0.0, 0.0
        for _ in range(params.horizon):
            v = lam * v + spec.max_force * spec.dt
            dist += v * spec.dt
        budget = dist * margin
    for _ in range(10_000):
        state = env_reset(spec, rng)
        if _path_length(spec, state.pos, state.goal) <= budget:
            return state
    raise RuntimeError("could not sample a reachable episode")


def _path_length(spec: EnvSpec, a, b) -> float:
    if spec.kind == "wall":
        same_side = (a[0] < spec.wall_x) == (b[0] < spec.wall_x)
        if same_side:
            return float(np.hypot(a[0] - b[0], a[1] - b[1]))
        door = (spec.wall_x, 0.5)
        return float(
            np.hypot(a[0] - door[0], a[1] - door[1])
            + np.hypot(b[0] - door[0], b[1] - door[1])
        )
    # pointmaze: route via the corridor corners nearest to each arm
    waypoints = [(0.15, 0.15), (0.85, 0.15)]

    def arm(p):
        if p[0] < 0.3:
            return 0
        if p[0] > 0.7:
            return 2
        return 1

    arms = arm(a), arm(b)
    if arms[0] == arms[1]:
        return float(np.hypot(a[0] - b[0], a[1] - b[1]))
    path = [a]
    lo, hi = min(arms), max(arms)
    if (lo, hi) == (0, 1):
        path.append(waypoints[0])
    elif (lo, hi) == (1, 2):
        path.append(waypoints[1])
    else:
        path.extend(waypoints if arms[0] == 0 else waypoints[::-1])
    path.append(b)
    return float(sum(np.hypot(p[0] - q[0], p[1] - q[1]) for p, q in zip(path, path[1:])))


def plan_episode(
    spec: EnvSpec,
    model: ConditionedPredictor,
    encoder,
    params: PlanParams,
    rng: np.random.Generator,
) -> tuple[bool, dict]:
    """Plan open-loop to an image goal and execute the first m actions.

    The goal observation renders the agent placed at the goal position.
    Returns (success, info) with the CEM cost curve and executed actions.
    """
    state = sample_plan_episode(spec, params, rng)
    goal_state = replace(state, pos=state.goal, vel=(0.0, 0.0))
    t0 = np.array([0.0])
    start_grid = encoder.encode_frames(env_render(spec, state)[None], t0)
    goal_grid = encoder.encode_frames(env_render(spec, goal_state)[None], t0)
    objective = planning_objective(model, start_grid, goal_grid, params, spec.frame_dt)
    best, curve = cem_optimize(
        objective,
        (params.horizon, 2),
        params,
        rng,
        clamp=(-spec.max_force, spec.max_force),
    )
    for action in best[: params.executed]:
        state = env_step(spec, state, action)
    return is_success(spec, state), {
        "cost_curve": curve,
        "actions": best,
        "final_state": state,
    }


def evaluate_planning(
    spec: EnvSpec,
    model: ConditionedPredictor,
    encoder,
    params: PlanParams,
    episodes: int,
    seed: int = 0,
    csv_path: str | Path | None = None,
    workers: int = 1,
) -> float:
    """Mean success over seeded episodes; optionally logs one CSV row per
    episode (seed, final cost, success)."""
    if episodes < 1:
        raise ValueError("need at least one episode")

    def run(idx: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        ok, info = plan_episode(spec, model, encoder, params, rng)
        return idx, ok, float(info["cost_curve"][-1])

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = sorted(pool.map(run, range(episodes)))
    else:
        results = [run(i) for i in range(episodes)]

    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["episode", "seed", "final_cost", "success"])
            for idx, ok, cost in results:
                writer.writerow([idx, f"{seed}-{idx}", f"{cost:.6f}", int(ok)])
    return sum(ok for _, ok, _ in results) / episodes
