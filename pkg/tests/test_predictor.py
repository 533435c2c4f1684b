import numpy as np
import pytest
import torch

from lwm.data import LatentGrid
from lwm.predictor import (
    Predictor,
    PredictorConfig,
    QuerySpec,
    block_triangular_mask,
    init_predictor,
    smooth_l1,
)

from conftest import random_grid

TINY = PredictorConfig(input_dim=8, model_dim=16, num_blocks=1, num_heads=2, mlp_ratio=2.0)
SMALL = PredictorConfig(input_dim=8, model_dim=16, num_blocks=2, num_heads=2, mlp_ratio=2.0)


def small_model(seed=1):
    return init_predictor(SMALL, seed)


# -- construction ----------------------------------------------------------------


def test_same_seed_bit_identical_weights():
    a, b = init_predictor(SMALL, 7), init_predictor(SMALL, 7)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)


def test_different_seed_differs():
    a, b = init_predictor(SMALL, 7), init_predictor(SMALL, 8)
    assert any(
        not torch.equal(pa, pb)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
    )


def test_divisibility_guard():
    with pytest.raises(ValueError, match="divisible"):
        PredictorConfig(input_dim=8, model_dim=1537, num_blocks=1, num_heads=24)


def test_base_config_parameter_count():
    base = PredictorConfig(768, 768, 12, 12, 4.0)
    n = Predictor(base).num_parameters()
    assert abs(n - 86e6) / 86e6 < 0.05


# -- block triangular mask ---------------------------------------------------------


def test_mask_hand_count_t3_hw2():
    m = block_triangular_mask(3, 2)
    assert m.shape == (4, 4)
    assert m[:2].sum() == 4  # frame-2 queries see 2 keys each
    assert m[2:].sum() == 8  # frame-3 queries see 4 keys each
    assert m.sum() == 12


def test_mask_first_block_sees_only_first_frame():
    hw = 3
    m = block_triangular_mask(5, hw)
    assert np.all(m[:hw].sum(axis=1) == hw)


def test_mask_closed_form_total():
    for t in range(2, 7):
        for hw in (1, 2, 4):
            m = block_triangular_mask(t, hw)
            assert m.sum() == hw * hw * (t - 1) * t // 2
            brute = sum(
                1
                for qg in range(t - 1)
                for kg in range(t - 1)
                for _ in range(hw * hw)
                if kg <= qg
            )
            assert m.sum() == brute


def test_mask_needs_two_frames():
    with pytest.raises(ValueError):
        block_triangular_mask(1, 4)


# -- forward contracts ---------------------------------------------------------------


def test_forward_train_shape(rng):
    g = random_grid(rng, t=5, h=2, w=3, d=8)
    out = small_model().forward_train(g)
    assert out.shape == (4, 2, 3, 8)


def test_forward_train_needs_two_frames(rng):
    g = random_grid(rng, t=1)
    with pytest.raises(ValueError):
        small_model().forward_train(g)


def test_causality_perturbation(rng):
    m = small_model()
    data = rng.standard_normal((5, 2, 2, 8)).astype(np.float32)
    ts = np.array([0.0, 0.2, 0.5, 0.7, 1.1])
    base = m.forward_train(LatentGrid(data, ts))
    pert = data.copy()
    pert[3:] = rng.standard_normal(pert[3:].shape).astype(np.float32)
    out = m.forward_train(LatentGrid(pert, ts))
    # predictions for frames 2..4 (slices 0..2) depend only on frames <= 3
    assert np.abs(out[:3] - base[:3]).max() <= 1e-6
    assert np.abs(out[3] - base[3]).max() > 1e-4


def test_predict_direct_consistent_with_forward_train(rng):
    m = small_model()
    g = random_grid(rng, t=4, h=2, w=2, d=8)
    full = m.forward_train(g)
    for t in range(1, 4):
        ctx = LatentGrid(g.data[:t], g.timestamps[:t])
        direct = m.predict_direct(ctx, QuerySpec(float(g.timestamps[t])))
        assert np.abs(direct - full[t - 1]).max() <= 1e-5


def test_predict_direct_deterministic(rng):
    m = small_model()
    g = random_grid(rng, t=3)
    q = QuerySpec(2.0)
    a = m.predict_direct(g, q)
    b = m.predict_direct(g, q)
    assert np.array_equal(a, b)


def test_predict_direct_strict_future_guard(rng):
    m = small_model()
    g = random_grid(rng, t=3, dt=0.5)
    with pytest.raises(ValueError, match="strictly after"):
        m.predict_direct(g, QuerySpec(float(g.timestamps[-1])))


def test_single_coordinate_query_matches_grid(rng):
    m = small_model()
    g = random_grid(rng, t=3, h=2, w=2, d=8)
    grid_pred = m.predict_direct(g, QuerySpec(2.0))
    # patch (0, 1) of a 2x2 grid sits at coords (-1, +1)
    single = m.predict_direct(g, QuerySpec(2.0, ij=(-1.0, 1.0)))
    assert np.abs(single - grid_pred[0, 1]).max() <= 1e-5


def test_query_independence(rng):
    # removing other queries does not change a query's prediction
    m = small_model()
    g = random_grid(rng, t=3, h=2, w=2, d=8)
    grid_pred = m.predict_direct(g, QuerySpec(2.0))
    for (i, j), (ci, cj) in zip(
        [(0, 0), (1, 1)], [(-1.0, -1.0), (1.0, 1.0)]
    ):
        single = m.predict_direct(g, QuerySpec(2.0, ij=(ci, cj)))
        assert np.abs(single - grid_pred[i, j]).max() <= 1e-5


def test_context_permutation_equivariance(rng):
    # permuting context tokens together with their coordinates is a no-op:
    # attention is set-based, position lives only in RoPE
    m = small_model()
    g = random_grid(rng, t=3, h=2, w=2, d=8)
    base = m.predict_direct(g, QuerySpec(2.0))

    feats = torch.tensor(g.data, dtype=torch.float32).reshape(1, -1, 8)
    from lwm.predictor import frames_coords, grid_coords

    coords = frames_coords(g.timestamps, 2, 2)
    perm = np.random.default_rng(0).permutation(feats.shape[1])
    with torch.no_grad():
        out = m.decode(feats[:, perm], coords[perm], grid_coords(2.0, 2, 2))
    assert np.abs(out[0].numpy().reshape(2, 2, 8) - base).max() <= 1e-5


def test_nan_input_rejected(rng):
    m = small_model()
    feats = torch.full((1, 2, 2, 2, 8), torch.nan)
    with pytest.raises(ValueError, match="NaN"):
        m.train_predictions(feats, np.array([0.0, 1.0]))


# -- smooth L1 --------------------------------------------------------------------


def test_smooth_l1_unit_values():
    def val(d):
        return float(smooth_l1(torch.tensor([d], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)))

    assert val(0.0) == pytest.approx(0.0, abs=1e-9)
    assert val(0.05) == pytest.approx(0.0125, abs=1e-9)
    assert val(1.0) == pytest.approx(0.95, abs=1e-9)
    assert val(0.1) == pytest.approx(0.05, abs=1e-9)  # continuity at beta
    assert val(0.1 - 1e-9) == pytest.approx(0.05, abs=1e-8)


def test_smooth_l1_mean_reduction():
    pred = torch.tensor([0.05, 1.0], dtype=torch.float64)
    target = torch.zeros(2, dtype=torch.float64)
    assert float(smooth_l1(pred, target)) == pytest.approx((0.0125 + 0.95) / 2)


def test_smooth_l1_shape_guard():
    with pytest.raises(ValueError, match="shape"):
        smooth_l1(torch.zeros(2), torch.zeros(3))


def test_smooth_l1_beta_guard():
    with pytest.raises(ValueError, match="beta"):
        smooth_l1(torch.zeros(2), torch.zeros(2), beta=0.0)


# -- gradient check ------------------------------------------------------------------


def grad_check(model, feats, ts, eps, probes=6):
    """Worst per-tensor relative error between autograd and central finite
    differences, aggregated over probed coordinates (L2-normalized so the
    f32 loss-rounding floor on near-zero entries does not dominate)."""
    preds = model.train_predictions(feats, ts)
    loss = smooth_l1(preds, feats[:, 1:])
    model.zero_grad()
    loss.backward()

    def fd_loss():
        with torch.no_grad():
            return float(smooth_l1(model.train_predictions(feats, ts), feats[:, 1:]))

    worst = 0.0
    rng = np.random.default_rng(0)
    for _, p in model.named_parameters():
        g = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        idx = rng.choice(len(flat), size=min(probes, len(flat)), replace=False)
        fd_vals, an_vals = [], []
        for k in idx:
            orig = float(flat[k])
            flat[k] = orig + eps
            up = fd_loss()
            flat[k] = orig - eps
            dn = fd_loss()
            flat[k] = orig
            fd_vals.append((up - dn) / (2 * eps))
            an_vals.append(float(g[k]))
        fd_vals, an_vals = np.array(fd_vals), np.array(an_vals)
        denom = max(np.linalg.norm(fd_vals), np.linalg.norm(an_vals), 1e-12)
        worst = max(worst, np.linalg.norm(fd_vals - an_vals) / denom)
    return worst


def test_gradient_matches_finite_differences_f64(rng):
    model = init_predictor(TINY, 3).double()
    assert model.num_parameters() <= 5000
    feats = torch.tensor(rng.standard_normal((1, 3, 2, 2, 8)), dtype=torch.float64)
    ts = np.array([0.0, 0.4, 0.9])
    worst = grad_check(model, feats, ts, eps=1e-6)
    assert worst <= 1e-4


def test_gradient_matches_finite_differences_f32(rng):
    model = init_predictor(TINY, 3)
    feats = torch.tensor(rng.standard_normal((1, 3, 2, 2, 8)), dtype=torch.float32)
    ts = np.array([0.0, 0.4, 0.9])
    worst = grad_check(model, feats, ts, eps=1e-2)
    assert worst <= 1e-2
