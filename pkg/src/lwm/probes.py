"""Present-time linear probes and the dense forecasting protocol.

A linear head (frozen feature normalization + linear map) is trained on
true encoder features with per-patch class labels, then applied to the
world model's predicted features at short and mid horizons. The copy-last
baseline reuses the last context frame's true features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import LatentGrid
from .envs import CLASS_AGENT, CLASS_BACKGROUND, CLASS_GOAL, CLASS_WALL
from .predictor import QuerySpec
from .rollout import rollout_autoregressive

# Tie-break priority for patch majority labeling (higher wins ties).
_CLASS_PRIORITY = {
    CLASS_WALL: 3,
    CLASS_AGENT: 2,
    CLASS_GOAL: 1,
    CLASS_BACKGROUND: 0,
}


def patch_labels(class_map: np.ndarray, patch_size: int, num_classes: int = 4) -> np.ndarray:
    """Majority pixel class per patch; ties break by fixed class priority."""
    h, w = class_map.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"class map {h}x{w} not divisible by patch size {p}")
    blocks = class_map.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // p, w // p, p * p)
    counts = np.stack(
        [(blocks == c).sum(axis=-1) for c in range(num_classes)], axis=-1
    )
    priority = np.array([_CLASS_PRIORITY.get(c, 0) for c in range(num_classes)])
    score = counts * num_classes + priority
    return np.argmax(score, axis=-1).astype(np.uint8)


@dataclass
class LinearHead:
    """Frozen per-feature normalization followed by a linear classifier."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    missing_classes: list[int]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, feats: np.ndarray) -> np.ndarray:
        x = (feats - self.feature_mean) / self.feature_std
        return x @ self.weight.T + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        """Class map for (..., D) features."""
        return np.argmax(self.logits(feats), axis=-1).astype(np.uint8)


def train_linear_head(
    frames: list[np.ndarray],
    labels: list[np.ndarray],
    num_classes: int,
    steps: int = 2000,
    lr: float = 1e-2,
) -> LinearHead:
    """Cross-entropy training of the probe on (H, W, D) feature frames with
    (H, W) integer label maps. Normalization statistics come from the full
    training set and are frozen. Classes absent from the training set are
    recorded, not an error.
    """
    if len(frames) != len(labels) or not frames:
        raise ValueError("need matching, nonempty frames and labels")
    d = frames[0].shape[-1]
    x = np.concatenate([f.reshape(-1, d) for f in frames]).astype(np.float64)
    y = np.concatenate([l.reshape(-1) for l in labels]).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("feature/label patch counts differ")
    present = set(np.unique(y).tolist())
    missing = sorted(c for c in range(num_classes) if c not in present)

    mean = x.mean(axis=0)
    std = np.sqrt(x.var(axis=0) + 1e-6)
    xn = torch.tensor((x - mean) / std, dtype=torch.float32)
    yt = torch.tensor(y)
    w = torch.zeros((num_classes, d), requires_grad=True)
    b = torch.zeros(num_classes, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=lr)
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(xn @ w.T + b, yt)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return LinearHead(
        feature_mean=mean,
        feature_std=std,
        weight=w.detach().numpy().astype(np.float64),
        bias=b.detach().numpy().astype(np.float64),
        missing_classes=missing,
    )


def miou(pred: np.ndarray, true: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in either map; absent classes are
    excluded from the average."""
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    inter, union = _iou_counts(pred, true, num_classes)
    mask = union > 0
    if not np.any(mask):
        raise ValueError("no classes present in either map")
    return float((inter[mask] / union[mask]).mean())


def _iou_counts(pred, true, num_classes):
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        p, t = pred == c, true == c
        inter[c] = np.logical_and(p, t).sum()
        union[c] = np.logical_or(p, t).sum()
    return inter, union


class MiouAccumulator:
    """Dataset-level mIoU: accumulate intersection/union across samples."""

    def __init__(self, num_classes: int):
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def add(self, pred: np.ndarray, true: np.ndarray) -> None:
        if pred.shape != true.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
        i, u = _iou_counts(pred, true, len(self.inter))
        self.inter += i
        self.union += u

    def value(self) -> float:
        mask = self.union > 0
        return float((self.inter[mask] / self.union[mask]).mean())


@dataclass(frozen=True)
class ForecastProtocol:
    """Index pattern for short/mid forecasting.

    Short: context [t-4s .. t-s], predict t directly. Mid: context
    [t-6s .. t-3s], predict [t-2s, t-s, t] autoregressively and evaluate t.
    Stride 3 with target 19 reproduces the [7,10,13,16] -> 19 and
    [1,4,7,10] -> [13,16,19] patterns.
    """

    stride: int = 3
    target_index: int = 19
    context_frames: int = 4

    def __post_init__(self):
        if self.stride < 1 or self.context_frames < 1:
            raise ValueError("stride and context_frames must be positive")
        if min(self.mid_context()) < 0:
            raise ValueError("protocol indices underflow frame 0")

    def short_context(self) -> list[int]:
        t, s = self.target_index, self.stride
        return [t - k * s for k in range(self.context_frames, 0, -1)]

    def mid_context(self) -> list[int]:
        return [i - 2 * self.stride for i in self.short_context()]

    def mid_targets(self) -> list[int]:
        t, s = self.target_index, self.stride
        return [t - 2 * s, t - s, t]

    @property
    def min_frames(self) -> int:
        return self.target_index + 1


def run_forecast_protocol(
    model,
    head: LinearHead,
    samples: list[tuple[LatentGrid, np.ndarray]],
    protocol: ForecastProtocol,
    num_classes: int = 4,
) -> dict:
    """Evaluate present/short/mid/copy-last mIoU over dataset samples.

    Each sample is (full feature grid, patch label map of the target
    frame). Clips shorter than the protocol are skipped and counted.
    """
    accs = {k: MiouAccumulator(num_classes) for k in
            ("present", "short", "mid", "copy_last_short", "copy_last_mid")}
    skipped = 0
    for grid, target_labels in samples:
        if grid.num_frames < protocol.min_frames:
            skipped += 1
            continue
        sc, mc = protocol.short_context(), protocol.mid_context()
        target = protocol.target_index
        tau = float(grid.timestamps[target])

        accs["present"].add(head.predict(grid.data[target]), target_labels)
        accs["copy_last_short"].add(head.predict(grid.data[sc[-1]]), target_labels)
        accs["copy_last_mid"].add(head.predict(grid.data[mc[-1]]), target_labels)

        short_ctx = LatentGrid(grid.data[sc], grid.timestamps[sc])
        short_pred = model.predict_direct(short_ctx, QuerySpec(tau))
        accs["short"].add(head.predict(short_pred), target_labels)

        mid_ctx = LatentGrid(grid.data[mc], grid.timestamps[mc])
        mid_taus = [float(grid.timestamps[i]) for i in protocol.mid_targets()]
        result = rollout_autoregressive(model, mid_ctx, mid_taus)
        mid_pred = result.grids[-1].data[0]
        accs["mid"].add(head.predict(mid_pred), target_labels)
    out = {k: acc.value() for k, acc in accs.items()}
    out["skipped"] = skipped
    return out
