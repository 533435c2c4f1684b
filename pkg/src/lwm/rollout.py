"""Inference-time evaluation: autoregressive rollouts, surprise scoring
for plausibility, pairwise relative accuracy, and PCA feature images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import LatentGrid


@dataclass(frozen=True)
class RolloutResult:
    """One predicted grid per requested timestamp, in request order, plus
    the context length (frames) used for each prediction."""

    grids: list[LatentGrid]
    context_lengths: list[int]


@dataclass(frozen=True)
class SurpriseTrace:
    """Per-frame surprise (feature MAE) beyond the context prefix."""

    scores: np.ndarray
    context_len: int

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if np.any(s < 0):
            raise ValueError("surprise scores must be non-negative")
        object.__setattr__(self, "scores", s)


def rollout_autoregressive(
    model, context: LatentGrid, targets: list[float]
) -> RolloutResult:
    """Predict the given future timestamps one by one, feeding each
    prediction back as context for the next."""
    targets = [float(t) for t in targets]
    if not targets:
        raise ValueError("need at least one target timestamp")
    last = float(context.timestamps[-1])
    for a, b in zip([last] + targets, targets):
        if b <= a:
            raise ValueError(f"targets must be strictly increasing and beyond context; got {b} after {a}")
    dtype = next(model.parameters()).dtype
    t, h, w, d = context.shape
    feats = torch.tensor(context.data, dtype=dtype).unsqueeze(0)
    ts = np.asarray(context.timestamps, dtype=np.float64)
    grids, lengths = [], []
    with torch.no_grad():
        for tau in targets:
            lengths.append(feats.shape[1])
            pred = model.direct_predictions(feats, ts, tau)
            frame = pred.view(1, 1, h, w, d)
            grids.append(LatentGrid(frame[0].numpy(), np.array([tau])))
            feats = torch.cat((feats, frame), dim=1)
            ts = np.append(ts, tau)
    return RolloutResult(grids, lengths)


def surprise_trace(model, grid: LatentGrid, context_len: int) -> SurpriseTrace:
    """Teacher-forced one-step surprise with a sliding context window.

    For each frame beyond the first ``context_len``, predict it from the
    previous ``context_len`` ground-truth frames and score the mean
    absolute error over all H*W*D features.
    """
    t = grid.num_frames
    if not (1 <= context_len < t):
        raise ValueError(f"context_len {context_len} must lie in [1, {t - 1}]")
    dtype = next(model.parameters()).dtype
    feats = torch.tensor(grid.data, dtype=dtype)
    scores = []
    with torch.no_grad():
        for idx in range(context_len, t):
            lo = idx - context_len
            ctx = feats[lo:idx].unsqueeze(0)
            pred = model.direct_predictions(
                ctx, grid.timestamps[lo:idx], float(grid.timestamps[idx])
            )
            actual = feats[idx].reshape(1, -1, grid.shape[3])
            scores.append(float((pred - actual).abs().mean()))
    return SurpriseTrace(np.array(scores), context_len)


def relative_accuracy(pairs, aggregator: str = "max") -> float:
    """Fraction of (plausible, implausible) pairs ranked correctly.

    A pair scores 1 when the implausible trace has the higher aggregate
    surprise, 0.5 on ties, 0 otherwise.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    if aggregator not in ("max", "mean"):
        raise ValueError(f"aggregator must be 'max' or 'mean', got {aggregator!r}")
    agg = np.max if aggregator == "max" else np.mean

    def score(trace) -> float:
        arr = trace.scores if isinstance(trace, SurpriseTrace) else np.asarray(trace)
        return float(agg(arr))

    total = 0.0
    for plausible, implausible in pairs:
        sp, si = score(plausible), score(implausible)
        total += 1.0 if si > sp else (0.5 if si == sp else 0.0)
    return total / len(pairs)


@dataclass(frozen=True)
class PcaProjection:
    """3-component PCA fitted on reference patch features; channel ranges
    are frozen from the reference so target images are comparable."""

    mean: np.ndarray
    components: np.ndarray
    channel_min: np.ndarray
    channel_max: np.ndarray
    explained_variance: np.ndarray

    def apply(self, grid: LatentGrid) -> np.ndarray:
        """(T, H, W, 3) float images in [0, 1] using the reference scaling."""
        t, h, w, d = grid.shape
        proj = (grid.data.reshape(-1, d) - self.mean) @ self.components.T
        span = np.maximum(self.channel_max - self.channel_min, 1e-12)
        img = (proj - self.channel_min) / span
        return np.clip(img, 0.0, 1.0).reshape(t, h, w, 3)


def fit_pca(reference: LatentGrid) -> PcaProjection:
    """Fit a 3-component PCA on the reference grid's patch vectors.

    Component signs are fixed (largest-magnitude entry positive) so the fit
    is fully deterministic. Raises when fewer than 3 non-degenerate
    directions exist.
    """
    t, h, w, d = reference.shape
    x = reference.data.reshape(-1, d).astype(np.float64)
    if x.shape[0] < 3 or d < 3:
        raise ValueError("need at least 3 samples and 3 feature dims for PCA")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[2] <= 1e-10 * max(s[0], 1e-30):
        raise ValueError("features have fewer than 3 non-degenerate directions")
    comps = vt[:3]
    for k in range(3):
        lead = np.argmax(np.abs(comps[k]))
        if comps[k, lead] < 0:
            comps[k] = -comps[k]
    proj = xc @ comps.T
    var = (s[:3] ** 2) / x.shape[0]
    return PcaProjection(
        mean=mean,
        components=comps,
        channel_min=proj.min(axis=0),
        channel_max=proj.max(axis=0),
        explained_variance=var,
    )


def pca_visualize(reference: LatentGrid, targets: list[LatentGrid]) -> list[np.ndarray]:
    """RGB images for each target grid under the reference's projection."""
    pca = fit_pca(reference)
    for g in targets:
        if g.shape[3] != reference.shape[3]:
            raise ValueError("target feature dim does not match reference")
    return [pca.apply(g) for g in targets]
