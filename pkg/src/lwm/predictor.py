"""Cross-attention future predictor.

Context patch tokens (projected encoder features) are fixed; a learnable
query token flows through a stack of residual pre-norm cross-attention
blocks and is finally projected back to feature space. Position enters
only through 3-axial RoPE on queries and keys, so teacher-forced training
runs all (T-1)*H*W predictions in parallel under a block-triangular mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .data import LatentGrid
from .rope import RopeConfig, rope_angles


@dataclass(frozen=True)
class PredictorConfig:
    """Sizes of the cross-attention decoder stack."""

    input_dim: int
    model_dim: int
    num_blocks: int
    num_heads: int
    mlp_ratio: float = 4.0
    rope: RopeConfig = field(default=None)

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by {self.num_heads} heads"
            )
        if self.num_blocks < 1:
            raise ValueError("need at least one block")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.rope is None:
            object.__setattr__(self, "rope", RopeConfig.for_head_dim(self.head_dim))
        elif self.rope.head_dim != self.head_dim:
            raise ValueError(
                f"rope head_dim {self.rope.head_dim} != model head_dim {self.head_dim}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class QuerySpec:
    """A future prediction request: target time plus either the full
    spatial grid (ij=None) or a single (i, j) location in [-1, +1]."""

    tau: float
    ij: tuple[float, float] | None = None

    def __post_init__(self):
        if self.ij is not None:
            i, j = self.ij
            if not (-1.0 <= i <= 1.0 and -1.0 <= j <= 1.0):
                raise ValueError(f"query coords must lie in [-1, 1], got {self.ij}")


def axis_coords(n: int) -> np.ndarray:
    """Patch-center coordinates mapped affinely onto [-1, +1]."""
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


@lru_cache(maxsize=64)
def _spatial_coords(height: int, width: int) -> np.ndarray:
    ii, jj = np.meshgrid(axis_coords(height), axis_coords(width), indexing="ij")
    out = np.stack((ii.ravel(), jj.ravel()), axis=1)
    out.flags.writeable = False
    return out


def grid_coords(tau: float, height: int, width: int) -> np.ndarray:
    """(H*W, 3) coordinate rows for one frame, row-major patch order."""
    hw = height * width
    out = np.empty((hw, 3), dtype=np.float64)
    out[:, 0] = tau
    out[:, 1:] = _spatial_coords(height, width)
    return out


def frames_coords(timestamps: np.ndarray, height: int, width: int) -> np.ndarray:
    """(T*H*W, 3) coordinates for a stack of frames."""
    hw = height * width
    t = len(timestamps)
    out = np.empty((t * hw, 3), dtype=np.float64)
    out[:, 0] = np.repeat(np.asarray(timestamps, dtype=np.float64), hw)
    out[:, 1:] = np.tile(_spatial_coords(height, width), (t, 1))
    return out


def block_triangular_mask(num_frames: int, patches_per_frame: int) -> np.ndarray:
    """Boolean (queries, keys) mask for teacher forcing.

    Queries are the patch tokens of frames 2..T, keys the tokens of frames
    1..T-1; the query block for frame t+1 may attend exactly to key blocks
    of frames 1..t.
    """
    if num_frames < 2:
        raise ValueError("need at least 2 frames for prediction targets")
    groups = num_frames - 1
    block = np.tril(np.ones((groups, groups), dtype=bool))
    return np.kron(block, np.ones((patches_per_frame, patches_per_frame), dtype=bool))


def smooth_l1(pred, target, beta: float = 0.1) -> torch.Tensor:
    """Mean smooth-L1: quadratic below beta, linear above, continuous at beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = (pred - target).abs()
    return torch.where(d < beta, d * d / (2 * beta), d - beta / 2).mean()


def _rope_tables(coords: np.ndarray, cfg: RopeConfig, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables for coordinate rows, computed in float64 then cast."""
    ang = rope_angles(coords, cfg)
    cos = torch.as_tensor(np.cos(ang), dtype=dtype, device=device)
    sin = torch.as_tensor(np.sin(ang), dtype=dtype, device=device)
    return cos, sin


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, rotated: int) -> torch.Tensor:
    """Rotate interleaved pairs of the first ``rotated`` dims of (B, h, L, Dh).

    cos/sin: (L, rotated/2) or (B, L, rotated/2), broadcast over heads.
    """
    if cos.dim() == 2:
        cos, sin = cos[None, None], sin[None, None]
    else:
        cos, sin = cos[:, None], sin[:, None]
    head, tail = x[..., :rotated], x[..., rotated:]
    even, odd = head[..., 0::2], head[..., 1::2]
    re = even * cos - odd * sin
    ro = even * sin + odd * cos
    return torch.cat((torch.stack((re, ro), dim=-1).flatten(-2), tail), dim=-1)


class DecoderBlock(nn.Module):
    """Residual pre-norm cross-attention followed by a residual MLP.

    Only the query stream is normalized and updated; keys and values come
    from the fixed context tokens.
    """

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm_attn = nn.LayerNorm(dim)
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, q_stream, ctx, q_rope, k_rope, attn_bias, rotated):
        b, nq, dim = q_stream.shape
        q = self._heads(self.wq(self.norm_attn(q_stream)))
        k = self._heads(self.wk(ctx))
        v = self._heads(self.wv(ctx))
        q = _apply_rope(q, *q_rope, rotated)
        k = _apply_rope(k, *k_rope, rotated)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if attn_bias is not None:
            logits = logits + attn_bias
        out = (logits.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, nq, dim)
        q_stream = q_stream + self.wo(out)
        h = self.norm_mlp(q_stream)
        return q_stream + self.fc2(nn.functional.gelu(self.fc1(h)))


class Predictor(nn.Module):
    """Future patch-token predictor.

    Public entry points take/return numpy via LatentGrid; the torch-level
    ``decode`` / ``train_predictions`` paths carry gradients and batches.
    """

    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.input_dim, config.model_dim)
        self.query_embed = nn.Parameter(torch.zeros(config.model_dim))
        self.blocks = nn.ModuleList(
            DecoderBlock(config.model_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_blocks)
        )
        self.out_norm = nn.LayerNorm(config.model_dim)
        self.out_proj = nn.Linear(config.model_dim, config.input_dim)

    # -- core torch path ---------------------------------------------------

    @property
    def _dtype(self) -> torch.dtype:
        return self.query_embed.dtype

    def decode(
        self,
        ctx_feats: torch.Tensor,
        ctx_coords: np.ndarray,
        q_coords: np.ndarray,
        attn_mask: np.ndarray | None = None,
        block_hook=None,
    ) -> torch.Tensor:
        """Run the decoder stack.

        ctx_feats: (B, C, D) context tokens in feature space.
        ctx_coords/q_coords: (C, 3) / (Q, 3) shared across the batch, or
        (B, C, 3) / (B, Q, 3) per element.
        attn_mask: optional boolean (Q, C), True where attention is allowed.
        block_hook: optional ``f(block_index, q_stream) -> q_stream`` applied
        after each block (used for action conditioning).

        Returns (B, Q, D) predictions in feature space.
        """
        rope = self.config.rope
        dtype, device = self._dtype, ctx_feats.device
        ctx = self.in_proj(ctx_feats)
        b, _, _ = ctx.shape
        nq = q_coords.shape[-2]
        q = self.query_embed.view(1, 1, -1).expand(b, nq, -1)
        q_rope = _rope_tables(q_coords, rope, dtype, device)
        k_rope = _rope_tables(ctx_coords, rope, dtype, device)
        bias = None
        if attn_mask is not None:
            bias = torch.where(
                torch.as_tensor(attn_mask, device=device),
                torch.zeros((), dtype=dtype, device=device),
                torch.full((), -torch.inf, dtype=dtype, device=device),
            )
        for idx, block in enumerate(self.blocks):
            q = block(q, ctx, q_rope, k_rope, bias, rope.rotated_dims)
            if block_hook is not None:
                q = block_hook(idx, q)
        return self.out_proj(self.out_norm(q))

    def train_predictions(
        self, feats: torch.Tensor, timestamps: np.ndarray, block_hook=None
    ) -> torch.Tensor:
        """Teacher-forced parallel predictions.

        feats: (B, T, H, W, D) with ``timestamps`` (B, T) or (T,) shared.
        Returns (B, T-1, H, W, D): slice t predicts frame t+1 from frames
        up to t. Differentiable.
        """
        b, t, h, w, d = feats.shape
        if t < 2:
            raise ValueError("need at least 2 frames to form prediction targets")
        if not torch.isfinite(feats).all():
            raise ValueError("input features contain NaN/Inf")
        timestamps = np.asarray(timestamps, dtype=np.float64)
        shared_ts = timestamps.ndim == 1
        ctx = feats[:, : t - 1].reshape(b, (t - 1) * h * w, d)
        if shared_ts:
            ctx_coords = frames_coords(timestamps[: t - 1], h, w)
            q_coords = frames_coords(timestamps[1:], h, w)
        else:
            ctx_coords = np.stack([frames_coords(ts[: t - 1], h, w) for ts in timestamps])
            q_coords = np.stack([frames_coords(ts[1:], h, w) for ts in timestamps])
        mask = block_triangular_mask(t, h * w)
        out = self.decode(ctx, ctx_coords, q_coords, mask, block_hook)
        return out.view(b, t - 1, h, w, d)

    def direct_predictions(
        self,
        ctx_feats: torch.Tensor,
        ctx_timestamps: np.ndarray,
        tau: float,
        query_ij: tuple[float, float] | None = None,
        block_hook=None,
    ) -> torch.Tensor:
        """Predict at a single future time from full context.

        ctx_feats: (B, T, H, W, D). Returns (B, H*W, D), or (B, 1, D) for a
        single (i, j) query.
        """
        b, t, h, w, d = ctx_feats.shape
        ctx_timestamps = np.asarray(ctx_timestamps, dtype=np.float64)
        if tau <= float(ctx_timestamps[-1]):
            raise ValueError(
                f"query time {tau} not strictly after last context time "
                f"{float(ctx_timestamps[-1])}"
            )
        ctx = ctx_feats.reshape(b, t * h * w, d)
        ctx_coords = frames_coords(ctx_timestamps, h, w)
        if query_ij is None:
            q_coords = grid_coords(tau, h, w)
        else:
            q_coords = np.array([[tau, query_ij[0], query_ij[1]]], dtype=np.float64)
        return self.decode(ctx, ctx_coords, q_coords, None, block_hook)

    # -- numpy convenience wrappers -----------------------------------------

    def forward_train(self, grid: LatentGrid) -> np.ndarray:
        """Teacher-forced predictions for one clip: (T-1, H, W, D)."""
        feats = torch.tensor(grid.data, dtype=self._dtype).unsqueeze(0)
        with torch.no_grad():
            out = self.train_predictions(feats, grid.timestamps)
        return out.squeeze(0).numpy()

    def predict_direct(self, context: LatentGrid, query: QuerySpec) -> np.ndarray:
        """Prediction at query.tau: (H, W, D), or (D,) for a single location."""
        if context.num_frames < 1:
            raise ValueError("context must be nonempty")
        feats = torch.tensor(context.data, dtype=self._dtype).unsqueeze(0)
        with torch.no_grad():
            out = self.direct_predictions(feats, context.timestamps, query.tau, query.ij)
        out = out.squeeze(0).numpy()
        if query.ij is not None:
            return out[0]
        _, h, w, d = context.shape
        return out.reshape(h, w, d)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _seeded_init(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.weight.shape[1])
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def init_predictor(config: PredictorConfig, seed: int = 0) -> Predictor:
    """Build a predictor with weights drawn deterministically from ``seed``."""
    model = Predictor(config)
    gen = torch.Generator().manual_seed(seed)
    _seeded_init(model, gen)
    with torch.no_grad():
        model.query_embed.normal_(0.0, 0.02, generator=gen)
    return model
