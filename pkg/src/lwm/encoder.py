"""Frozen toy frame encoder: patchify + fixed random projection.

Stands in for a foundation-model encoder at desk scale. Real encoder
features enter the pipeline through LWMF files only; this module never
imports or downloads one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LatentGrid, VideoClip


@dataclass(frozen=True)
class EncoderSpec:
    """Patch geometry and embedding size of the frozen encoder."""

    patch_size: int
    embed_dim: int
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")


def patchify(frame: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a (H', W', 3) frame into a (H'/p, W'/p, 3p^2) grid of raw
    patch vectors, channel-last flattening, pixel values scaled to [0, 1].

    Accepts uint8 or float input; both are divided by 255 so the map is
    linear in the pixel values.
    """
    h, w = frame.shape[0], frame.shape[1]
    p = patch_size
    if h % p != 0:
        raise ValueError(f"height {h} not divisible by patch size {p}")
    if w % p != 0:
        raise ValueError(f"width {w} not divisible by patch size {p}")
    scaled = frame.astype(np.float64) / 255.0
    # (H/p, p, W/p, p, 3) -> (H/p, W/p, p, p, 3) -> flatten per patch
    blocks = scaled.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(h // p, w // p, 3 * p * p))


class ToyEncoder:
    """Deterministic frozen encoder: per-patch linear projection drawn once
    from the spec seed, optionally followed by per-patch standardization.

    The projection matrix is immutable after construction; identical
    (seed, spec) always yields identical weights.
    """

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        in_dim = 3 * spec.patch_size * spec.patch_size
        rng = np.random.default_rng(spec.seed)
        proj = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, spec.embed_dim))
        proj = np.ascontiguousarray(proj)
        proj.flags.writeable = False
        self.projection = proj
        self.frozen = True

    def weight_digest(self) -> str:
        """SHA-256 of the projection bytes; constant for a frozen encoder."""
        return hashlib.sha256(self.projection.tobytes()).hexdigest()

    def encode_frame(self, frame: np.ndarray) -> np.ndarray:
        """Encode one frame to a (H, W, D) float32 feature grid."""
        p = self.spec.patch_size
        h, w = frame.shape[0], frame.shape[1]
        if h % p != 0 or w % p != 0:
            raise ValueError(
                f"frame {h}x{w} incompatible with patch size {p}"
            )
        raw = patchify(frame, p)
        feats = raw @ self.projection
        if self.spec.normalize:
            mu = feats.mean(axis=-1, keepdims=True)
            sd = feats.std(axis=-1, keepdims=True)
            feats = (feats - mu) / (sd + 1e-12)
        return feats.astype(np.float32)

    def encode_clip(self, clip: VideoClip) -> LatentGrid:
        """Encode every frame; order and timestamps carry over."""
        feats = np.stack([self.encode_frame(f) for f in clip.frames])
        return LatentGrid(feats, clip.timestamps)

    def encode_frames(self, frames: np.ndarray, timestamps: np.ndarray) -> LatentGrid:
        """Encode a (T, H', W', 3) frame stack with the given timestamps."""
        feats = np.stack([self.encode_frame(f) for f in frames])
        return LatentGrid(feats, timestamps)


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG/PPM/etc. image as an (H, W, 3) uint8 array."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_frame_dir(path: str | Path, fps: float) -> VideoClip:
    """Read a directory of images (sorted by filename) as a constant-fps clip."""
    files = sorted(p for p in Path(path).iterdir() if p.is_file())
    if not files:
        raise ValueError(f"no image files in {path}")
    frames = [load_image(p) for p in files]
    ts = np.arange(len(frames), dtype=np.float64) / fps
    return VideoClip(frames, ts)
