import numpy as np
import pytest
from scipy import stats

from lwm.binio import BadMagic, DimensionOverflow, TruncatedFile, VersionMismatch
from lwm.data import (
    LatentGrid,
    SamplerSpec,
    VideoMeta,
    nearest_frame_lookup,
    read_feature_file,
    sample_clip_timestamps,
    write_feature_file,
)

from conftest import random_grid


# -- domain type invariants ----------------------------------------------------


def test_latent_grid_rejects_nan():
    data = np.zeros((1, 2, 2, 3), dtype=np.float32)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        LatentGrid(data, [0.0])


def test_latent_grid_rejects_non_increasing_timestamps():
    data = np.zeros((2, 2, 2, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="strictly increasing"):
        LatentGrid(data, [0.5, 0.5])


def test_latent_grid_immutable(rng):
    g = random_grid(rng)
    with pytest.raises(ValueError):
        g.data[0, 0, 0, 0] = 1.0


def test_sampler_spec_validation():
    with pytest.raises(ValueError):
        SamplerSpec(1, 0.1, 0.5)
    with pytest.raises(ValueError):
        SamplerSpec(4, 0.0, 0.5)
    with pytest.raises(ValueError):
        SamplerSpec(4, 0.6, 0.5)


def test_video_meta_needs_exactly_one_source():
    with pytest.raises(ValueError):
        VideoMeta(duration=1.0)
    with pytest.raises(ValueError):
        VideoMeta(duration=1.0, timestamps=[0.0, 0.5], fps=2.0)


# -- clip sampling ---------------------------------------------------------------


def test_degenerate_range_forces_exact_gaps(rng):
    # video spans [1.0, 2.0]; gaps forced to 0.5 each leave a single start
    meta = VideoMeta(duration=2.0, timestamps=np.linspace(1.0, 2.0, 17))
    spec = SamplerSpec(3, 0.5, 0.5)
    taus = sample_clip_timestamps(meta, spec, rng)
    assert np.allclose(taus, [1.0, 1.5, 2.0])


def test_gap_distribution_uniform(rng):
    meta = VideoMeta(duration=100.0, fps=100.0)
    spec = SamplerSpec(2, 0.1, 0.3)
    gaps = np.array(
        [np.diff(sample_clip_timestamps(meta, spec, rng))[0] for _ in range(10_000)]
    )
    assert gaps.min() >= 0.1 and gaps.max() <= 0.3
    assert abs(gaps.mean() - 0.2) < 0.01
    # KS against Uniform(0.1, 0.3) at significance 0.01
    result = stats.kstest(gaps, stats.uniform(loc=0.1, scale=0.2).cdf)
    assert result.pvalue > 0.01


def test_sampled_sequences_increasing_gaps_in_range():
    meta = VideoMeta(duration=30.0, fps=30.0)
    spec = SamplerSpec(5, 0.05, 0.4)
    for seed in range(10_000):
        taus = sample_clip_timestamps(meta, spec, np.random.default_rng(seed))
        gaps = np.diff(taus)
        assert np.all(gaps > 0)
        assert np.all(gaps >= 0.05 - 1e-12) and np.all(gaps <= 0.4 + 1e-12)
        assert taus[0] >= 0 and taus[-1] <= 30.0 + 1e-9


def test_infeasible_spec_errors(rng):
    meta = VideoMeta(duration=1.0, fps=16.0)
    with pytest.raises(ValueError, match="3.5"):
        sample_clip_timestamps(meta, SamplerSpec(8, 0.1, 0.5), rng)


def test_sampler_deterministic_under_seed():
    meta = VideoMeta(duration=10.0, fps=10.0)
    spec = SamplerSpec(4, 0.1, 0.5)
    a = sample_clip_timestamps(meta, spec, np.random.default_rng(7))
    b = sample_clip_timestamps(meta, spec, np.random.default_rng(7))
    assert np.array_equal(a, b)


# -- nearest frame lookup --------------------------------------------------------


def test_nearest_exact_hit():
    meta = VideoMeta(duration=1.0, fps=16.0)
    idx, ts = nearest_frame_lookup(meta, 0.25)
    assert idx == 4 and ts == 0.25


def test_nearest_16fps_hand_case():
    # frames at k/16: |0.15 - 0.125| = 0.025 < |0.15 - 0.1875| = 0.0375
    meta = VideoMeta(duration=1.0, fps=16.0)
    idx, ts = nearest_frame_lookup(meta, 0.15)
    assert idx == 2
    assert ts == pytest.approx(0.125)


def test_nearest_tie_breaks_earlier():
    meta = VideoMeta(duration=1.0, timestamps=[0.0, 0.2, 0.4])
    idx, ts = nearest_frame_lookup(meta, 0.3)  # midway between frames 1 and 2
    assert idx == 1 and ts == pytest.approx(0.2)


def test_nearest_clamps_out_of_range():
    meta = VideoMeta(duration=1.0, timestamps=[0.1, 0.5, 0.9])
    assert nearest_frame_lookup(meta, -5.0) == (0, 0.1)
    assert nearest_frame_lookup(meta, 5.0) == (2, 0.9)


def test_nearest_idempotent(rng):
    meta = VideoMeta(duration=4.0, timestamps=np.sort(rng.uniform(0, 4, 50)))
    for tau in rng.uniform(-1, 5, 200):
        idx, ts = nearest_frame_lookup(meta, tau)
        idx2, ts2 = nearest_frame_lookup(meta, ts)
        assert (idx2, ts2) == (idx, ts)


# -- LWMF feature files -----------------------------------------------------------


def test_roundtrip_bit_identical(rng, tmp_path):
    g = random_grid(rng, t=2, h=4, w=4, d=8)
    path = tmp_path / "g.lwmf"
    write_feature_file(g, path)
    back = read_feature_file(path)
    assert back.data.tobytes() == g.data.tobytes()
    assert back.timestamps.tobytes() == g.timestamps.tobytes()


def test_payload_size_matches_format(rng, tmp_path):
    # 256 patch tokens of dim 768 per frame, 8 frames
    g = random_grid(rng, t=8, h=16, w=16, d=768)
    path = tmp_path / "g.lwmf"
    write_feature_file(g, path)
    header = 4 + 4 + 4 * 4 + 8 * 8  # magic, version, dims, timestamps
    assert path.stat().st_size == header + 8 * 256 * 768 * 4
    assert 8 * 256 * 768 * 4 == 6_291_456


def test_bad_magic(rng, tmp_path):
    path = tmp_path / "g.lwmf"
    write_feature_file(random_grid(rng), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(raw)
    with pytest.raises(BadMagic):
        read_feature_file(path)


def test_version_mismatch(rng, tmp_path):
    path = tmp_path / "g.lwmf"
    write_feature_file(random_grid(rng), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(raw)
    with pytest.raises(VersionMismatch):
        read_feature_file(path)


def test_truncated_payload(rng, tmp_path):
    path = tmp_path / "g.lwmf"
    write_feature_file(random_grid(rng), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(TruncatedFile):
        read_feature_file(path)


def test_dimension_overflow(rng, tmp_path):
    import struct

    path = tmp_path / "g.lwmf"
    write_feature_file(random_grid(rng), path)
    raw = bytearray(path.read_bytes())
    raw[8:24] = struct.pack("<IIII", 2**30, 2**30, 2**30, 2**30)
    path.write_bytes(raw)
    with pytest.raises(DimensionOverflow):
        read_feature_file(path)
