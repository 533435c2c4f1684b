import numpy as np
import pytest

from lwm.data import VideoClip, read_feature_file, write_feature_file
from lwm.encoder import EncoderSpec, ToyEncoder, patchify
from lwm.envs import EnvSpec, env_render, env_reset


def make_encoder(p=8, d=32, seed=0, normalize=True):
    return ToyEncoder(EncoderSpec(p, d, seed, normalize))


def test_patchify_224_14_gives_256_patches():
    frame = np.zeros((224, 224, 3), dtype=np.uint8)
    grid = patchify(frame, 14)
    assert grid.shape == (16, 16, 588)
    assert 16 * 16 == 256
    assert 14 * 14 * 3 == 588


def test_patchify_block_contents():
    frame = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    grid = patchify(frame, 2)
    # patch (1, 0) must hold rows 2..3, cols 0..1, channel-last flattening
    expect = (frame[2:4, 0:2, :].reshape(-1) / 255.0).astype(np.float64)
    assert np.allclose(grid[1, 0], expect)


def test_patchify_whole_frame_single_patch():
    frame = np.random.default_rng(0).integers(0, 255, (8, 8, 3), dtype=np.uint8)
    grid = patchify(frame, 8)
    assert grid.shape == (1, 1, 192)
    assert np.allclose(grid[0, 0], frame.reshape(-1) / 255.0)


def test_patchify_non_divisible_names_axis():
    frame = np.zeros((10, 8, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="height"):
        patchify(frame, 4)
    with pytest.raises(ValueError, match="width"):
        patchify(np.zeros((8, 10, 3), dtype=np.uint8), 4)


def test_encode_deterministic_and_shaped(rng):
    enc = make_encoder()
    frame = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    a = enc.encode_frame(frame)
    b = make_encoder().encode_frame(frame)
    assert a.shape == (8, 8, 32)
    assert np.array_equal(a, b)


def test_encode_standardization(rng):
    enc = make_encoder()
    frame = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    feats = enc.encode_frame(frame).astype(np.float64)
    mu = feats.mean(axis=-1)
    var = feats.var(axis=-1)
    assert np.abs(mu).max() < 1e-5
    assert np.abs(var - 1.0).max() < 1e-4


def test_encode_linearity_without_normalization(rng):
    enc = make_encoder(normalize=False)
    frame = rng.uniform(0, 255, (64, 64, 3))
    a = enc.encode_frame(frame)
    b = enc.encode_frame(0.5 * frame)
    assert np.allclose(0.5 * a, b, atol=1e-5)


def test_projection_frozen_across_use(rng):
    enc = make_encoder()
    digest = enc.weight_digest()
    for _ in range(5):
        enc.encode_frame(rng.integers(0, 255, (64, 64, 3), dtype=np.uint8))
    assert enc.weight_digest() == digest
    with pytest.raises(ValueError):
        enc.projection[0, 0] = 1.0


def test_resolution_mismatch_errors():
    enc = make_encoder(p=8)
    with pytest.raises(ValueError, match="incompatible"):
        enc.encode_frame(np.zeros((60, 64, 3), dtype=np.uint8))


def test_encode_clip_preserves_order_and_timestamps(rng):
    enc = make_encoder()
    frames = [rng.integers(0, 255, (64, 64, 3), dtype=np.uint8) for _ in range(3)]
    clip = VideoClip(frames, [0.0, 0.5, 1.25])
    grid = enc.encode_clip(clip)
    assert grid.num_frames == 3
    assert np.array_equal(grid.timestamps, [0.0, 0.5, 1.25])
    for t, frame in enumerate(frames):
        assert np.array_equal(grid.data[t], enc.encode_frame(frame))


def test_encode_clip_single_frame(rng):
    enc = make_encoder()
    clip = VideoClip([rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)], [0.0])
    assert enc.encode_clip(clip).num_frames == 1


def test_identical_frames_identical_features(rng):
    enc = make_encoder()
    frame = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    clip = VideoClip([frame, frame.copy()], [0.0, 0.5])
    grid = enc.encode_clip(clip)
    assert np.array_equal(grid.data[0], grid.data[1])


def test_encode_roundtrip_through_file(rng, tmp_path):
    enc = make_encoder()
    frames = [rng.integers(0, 255, (64, 64, 3), dtype=np.uint8) for _ in range(2)]
    grid = enc.encode_clip(VideoClip(frames, [0.0, 0.5]))
    path = tmp_path / "clip.lwmf"
    write_feature_file(grid, path)
    back = read_feature_file(path)
    assert back.data.tobytes() == grid.data.tobytes()


def test_distinct_env_states_distinct_features():
    spec = EnvSpec(kind="wall")
    enc = make_encoder()
    rng = np.random.default_rng(3)
    states = [env_reset(spec, rng) for _ in range(1000)]
    feats = [enc.encode_frame(env_render(spec, s)) for s in states[:45]]
    # check pairwise over a subsample (45 states -> 990 pairs)
    seen = 0
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            if not np.allclose(states[i].pos, states[j].pos, atol=1e-3):
                assert np.linalg.norm(feats[i] - feats[j]) > 0
                seen += 1
    assert seen >= 900
