"""Action conditioning: zero-initialized action blocks grafted onto a
pre-trained predictor, frameskip action grouping, and fine-tuning in
scratch / action-only / full modes.

An action block updates the query stream as q + scale * MLP(LN([q, a])).
With the per-block scale vector initialized to zero the conditioned model
is exactly the unconditional one, so fine-tuning starts from a no-op.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import LatentGrid, VideoClip
from .predictor import Predictor, PredictorConfig, _seeded_init, init_predictor, smooth_l1
from .training import TrainConfig, lr_at_step, make_optimizer


@dataclass(frozen=True)
class ActionTrajectory:
    """Observation-action pairs: action[t] conditions the transition from
    frame t to frame t+1.

    init_state optionally carries the environment state vector the episode
    started from, which makes stored trajectories replayable.
    """

    clip: VideoClip
    actions: np.ndarray
    init_state: np.ndarray | None = None

    def __post_init__(self):
        acts = np.asarray(self.actions, dtype=np.float32)
        if acts.ndim != 2:
            raise ValueError(f"actions must be (T-1, A), got shape {acts.shape}")
        if acts.shape[0] != self.clip.num_frames - 1:
            raise ValueError(
                f"{acts.shape[0]} actions do not match {self.clip.num_frames} frames"
            )
        if not np.all(np.isfinite(acts)):
            raise ValueError("actions contain NaN/Inf")
        object.__setattr__(self, "actions", acts)

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]


class FinetuneMode(enum.Enum):
    SCRATCH = "scratch"
    ACTION_ONLY = "action-only"
    FULL = "full"

    @classmethod
    def parse(cls, name: str) -> "FinetuneMode":
        for mode in cls:
            if mode.value == name:
                return mode
        raise ValueError(
            f"unknown fine-tune mode {name!r}; expected one of "
            f"{[m.value for m in cls]}"
        )


def embed_action_sequence(actions: np.ndarray, frameskip: int) -> np.ndarray:
    """Group consecutive actions into per-transition vectors of dim A*f.

    Group g is the concatenation (a[g*f], ..., a[g*f+f-1]); intermediate
    observations are skipped, not stacked. Leftover actions that do not
    fill a group are an error.
    """
    actions = np.asarray(actions)
    if actions.ndim != 2:
        raise ValueError(f"actions must be (n, A), got shape {actions.shape}")
    if frameskip < 1:
        raise ValueError("frameskip must be >= 1")
    n, a = actions.shape
    if n % frameskip != 0:
        raise ValueError(
            f"{n} actions do not divide into groups of {frameskip}"
        )
    return actions.reshape(n // frameskip, frameskip * a)


def ungroup_action_sequence(grouped: np.ndarray, frameskip: int) -> np.ndarray:
    """Inverse of embed_action_sequence."""
    g, af = grouped.shape
    if af % frameskip != 0:
        raise ValueError(f"grouped dim {af} not divisible by frameskip {frameskip}")
    return grouped.reshape(g * frameskip, af // frameskip)


class ActionBlock(nn.Module):
    """Residual MLP on [query, action] with zero-initialized layer scale."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(2 * dim)
        self.fc1 = nn.Linear(2 * dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.scale = nn.Parameter(torch.zeros(dim))

    def forward(self, q: torch.Tensor, action_emb: torch.Tensor) -> torch.Tensor:
        h = self.norm(torch.cat((q, action_emb), dim=-1))
        return q + self.scale * self.fc2(nn.functional.gelu(self.fc1(h)))


class ConditionedPredictor(nn.Module):
    """A base predictor plus one action block per decoder block.

    At initialization the action path contributes exactly zero, so the
    conditioned forward equals the base forward for any actions.
    """

    def __init__(self, base: Predictor, action_dim: int, seed: int = 0):
        super().__init__()
        if action_dim < 1:
            raise ValueError("action dim must be positive")
        self.base = base
        self.action_dim = action_dim
        dim = base.config.model_dim
        self.action = nn.ModuleDict(
            {
                "proj": nn.Linear(action_dim, dim),
                "blocks": nn.ModuleList(
                    ActionBlock(dim) for _ in range(base.config.num_blocks)
                ),
            }
        )
        gen = torch.Generator().manual_seed(seed)
        _seeded_init(self.action, gen)
        with torch.no_grad():
            for blk in self.action["blocks"]:
                blk.scale.zero_()

    @property
    def config(self) -> PredictorConfig:
        return self.base.config

    def added_parameters(self) -> int:
        return sum(p.numel() for p in self.action.parameters())

    def _hook(self, action_emb: torch.Tensor):
        blocks = self.action["blocks"]

        def hook(idx: int, q: torch.Tensor) -> torch.Tensor:
            return blocks[idx](q, action_emb)

        return hook

    def train_predictions(
        self, feats: torch.Tensor, timestamps: np.ndarray, actions: torch.Tensor
    ) -> torch.Tensor:
        """Teacher-forced conditioned predictions.

        feats: (B, T, H, W, D); actions: (B, T-1, A*f), one group per
        predicted transition. The query block for frame t+1 receives
        action t in every action block; the causality mask is unchanged.
        """
        b, t, h, w, _ = feats.shape
        if actions.shape[:2] != (b, t - 1):
            raise ValueError(
                f"actions shape {tuple(actions.shape)} does not provide "
                f"{t - 1} per-transition groups"
            )
        if actions.shape[2] != self.action_dim:
            raise ValueError(
                f"action dim {actions.shape[2]} != expected {self.action_dim}"
            )
        emb = self.action["proj"](actions)
        emb = emb.repeat_interleave(h * w, dim=1)
        return self.base.train_predictions(feats, timestamps, block_hook=self._hook(emb))

    def direct_predictions(
        self,
        ctx_feats: torch.Tensor,
        ctx_timestamps: np.ndarray,
        tau: float,
        action_group: torch.Tensor,
    ) -> torch.Tensor:
        """One conditioned step: all queries of the target frame share the
        given action group. ctx_feats (B, T, H, W, D); action_group (B, A*f)."""
        if action_group.shape[-1] != self.action_dim:
            raise ValueError(
                f"action dim {action_group.shape[-1]} != expected {self.action_dim}"
            )
        emb = self.action["proj"](action_group).unsqueeze(1)
        return self.base.direct_predictions(
            ctx_feats, ctx_timestamps, tau, block_hook=self._hook(emb)
        )

    def forward_conditioned(self, grid: LatentGrid, actions: np.ndarray) -> np.ndarray:
        """Numpy wrapper: (T-1, H, W, D) conditioned predictions."""
        dtype = self.base.query_embed.dtype
        feats = torch.tensor(grid.data, dtype=dtype).unsqueeze(0)
        acts = torch.tensor(np.asarray(actions), dtype=dtype).unsqueeze(0)
        with torch.no_grad():
            out = self.train_predictions(feats, grid.timestamps, acts)
        return out.squeeze(0).numpy()


def attach_action_blocks(
    base: Predictor, action_dim: int, seed: int = 0
) -> ConditionedPredictor:
    """Graft zero-initialized action blocks onto a predictor.

    The returned model's output equals the base model's for any input and
    any actions until the layer-scale vectors move away from zero.
    """
    return ConditionedPredictor(base, action_dim, seed)


# -- fine-tuning ---------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    """Fine-tuning setup: epochs over grouped trajectory windows."""

    epochs: int = 25
    clip_frames: int = 4
    frameskip: int = 5
    window_stride: int = 5
    holdout_fraction: float = 0.1
    train: TrainConfig = None

    def __post_init__(self):
        if self.train is None:
            object.__setattr__(self, "train", TrainConfig())
        if self.epochs < 1 or self.clip_frames < 2 or self.frameskip < 1:
            raise ValueError("invalid finetune config")
        if not (0 < self.holdout_fraction < 1):
            raise ValueError("holdout fraction must be in (0, 1)")


def grouped_feature_windows(
    grid: LatentGrid, actions: np.ndarray, cfg: FinetuneConfig
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Aligned (features, timestamps, grouped actions) windows of one
    encoded trajectory: frames at indices s, s+f, ..., s+(T_c-1)*f with the
    (T_c-1)*f raw actions in between grouped by frameskip."""
    f, tc = cfg.frameskip, cfg.clip_frames
    span = (tc - 1) * f
    out = []
    for s in range(0, grid.num_frames - span, cfg.window_stride):
        idx = [s + k * f for k in range(tc)]
        raw = actions[s : s + span]
        out.append(
            (grid.data[idx], grid.timestamps[idx], embed_action_sequence(raw, f))
        )
    return out


def split_trajectories(
    num_trajectories: int, holdout_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """90/10-style split by trajectory, seeded."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 9091])).permutation(
        num_trajectories
    )
    n_hold = max(1, int(round(num_trajectories * holdout_fraction))) if num_trajectories > 1 else 0
    held = sorted(int(i) for i in order[:n_hold])
    train = sorted(int(i) for i in order[n_hold:])
    return train, held


def _window_batch(windows, indices):
    feats = np.stack([windows[i][0] for i in indices])
    ts = np.stack([windows[i][1] for i in indices])
    acts = np.stack([windows[i][2] for i in indices])
    return feats, ts, acts


def conditioned_loss(
    model: ConditionedPredictor, feats: np.ndarray, ts: np.ndarray, acts: np.ndarray
) -> torch.Tensor:
    dtype = model.base.query_embed.dtype
    feats_t = torch.tensor(feats, dtype=dtype)
    preds = model.train_predictions(feats_t, ts, torch.tensor(acts, dtype=dtype))
    return smooth_l1(preds, feats_t[:, 1:])


def heldout_loss(model: ConditionedPredictor, windows, batch_size: int = 16) -> float:
    if not windows:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(windows), batch_size):
            idx = range(lo, min(lo + batch_size, len(windows)))
            loss = conditioned_loss(model, *_window_batch(windows, idx))
            total += float(loss) * len(idx)
    return total / len(windows)


def finetune(
    base: Predictor,
    trajectories: list[ActionTrajectory],
    encoder,
    mode: FinetuneMode | str,
    cfg: FinetuneConfig,
    log=None,
) -> tuple[ConditionedPredictor, dict]:
    """Fine-tune on offline trajectories; returns the model and a history
    with initial/final held-out losses.

    scratch: re-initialize the base and train everything. full: keep the
    pre-trained base and train everything. action-only: freeze every base
    parameter and train only the action projection and blocks.
    """
    if isinstance(mode, str):
        mode = FinetuneMode.parse(mode)
    if not trajectories:
        raise ValueError("trajectory dataset is empty")
    tcfg = cfg.train
    if mode is FinetuneMode.SCRATCH:
        base = init_predictor(base.config, tcfg.seed)
    action_dim = trajectories[0].action_dim * cfg.frameskip
    model = attach_action_blocks(base, action_dim, seed=tcfg.seed)
    if mode is FinetuneMode.ACTION_ONLY:
        for p in model.base.parameters():
            p.requires_grad_(False)
    opt = make_optimizer(model, tcfg)

    train_idx, held_idx = split_trajectories(
        len(trajectories), cfg.holdout_fraction, tcfg.seed
    )
    grids = {
        i: encoder.encode_frames(
            np.stack(trajectories[i].clip.frames), trajectories[i].clip.timestamps
        )
        for i in train_idx + held_idx
    }
    train_windows = [
        w for i in train_idx for w in grouped_feature_windows(grids[i], trajectories[i].actions, cfg)
    ]
    held_windows = [
        w for i in held_idx for w in grouped_feature_windows(grids[i], trajectories[i].actions, cfg)
    ]
    if not train_windows:
        raise ValueError("no trainable windows; trajectories too short for the config")

    history = {"heldout_initial": heldout_loss(model, held_windows)}
    step = 0
    losses = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 31, epoch]))
        order = rng.permutation(len(train_windows))
        for lo in range(0, len(order), tcfg.batch_size):
            lr = lr_at_step(step, tcfg.warmup_steps, tcfg.base_lr)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = conditioned_loss(model, *_window_batch(train_windows, order[lo : lo + tcfg.batch_size]))
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite fine-tune loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
            step += 1
        if log is not None:
            log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, losses[-1])
    history["heldout_final"] = heldout_loss(model, held_windows)
    history["train_losses"] = losses
    history["steps"] = step
    return model, history
