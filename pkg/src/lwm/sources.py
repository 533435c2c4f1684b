"""Clip sources feeding the pre-training loop.

A source holds full-length feature videos and serves variable-FPS clips:
target timestamps are sampled per the SamplerSpec, snapped to the nearest
stored frames, and the clip carries the frames' actual timestamps.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import (
    LatentGrid,
    SamplerSpec,
    VideoMeta,
    nearest_frame_lookup,
    read_feature_file,
    sample_clip_timestamps,
)


class ClipSource:
    """Serves sampled clips from a pool of encoded videos."""

    def __init__(self, videos: list[LatentGrid], sampler: SamplerSpec):
        if not videos:
            raise ValueError("need at least one video")
        self.videos = videos
        self.sampler = sampler
        self._metas = [
            VideoMeta(duration=float(v.timestamps[-1]), timestamps=v.timestamps)
            for v in videos
        ]

    def sample_clip(self, rng: np.random.Generator, max_tries: int = 100) -> LatentGrid:
        """One clip with strictly increasing snapped timestamps."""
        for _ in range(max_tries):
            vid = int(rng.integers(len(self.videos)))
            video, meta = self.videos[vid], self._metas[vid]
            taus = sample_clip_timestamps(meta, self.sampler, rng)
            idx = [nearest_frame_lookup(meta, t)[0] for t in taus]
            if all(b > a for a, b in zip(idx, idx[1:])):
                return LatentGrid(video.data[idx], video.timestamps[idx])
        raise RuntimeError(
            "could not sample a clip with distinct frames; "
            "delta_min is likely below the video frame spacing"
        )


def source_from_feature_videos(videos: list[LatentGrid], sampler: SamplerSpec) -> ClipSource:
    return ClipSource(videos, sampler)


def source_from_trajectories(dataset, encoder, sampler: SamplerSpec) -> ClipSource:
    """Encode every trajectory's frames once and serve clips from them."""
    videos = [
        encoder.encode_frames(np.stack(t.clip.frames), t.clip.timestamps)
        for t in dataset.trajectories
    ]
    return ClipSource(videos, sampler)


def source_from_feature_dir(path: str | Path, sampler: SamplerSpec) -> ClipSource:
    """Load every LWMF file under a directory as one video."""
    files = sorted(Path(path).glob("*.lwmf"))
    if not files:
        raise ValueError(f"no .lwmf files under {path}")
    return ClipSource([read_feature_file(p) for p in files], sampler)
