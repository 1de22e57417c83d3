import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import objective_gradient_error, tiny_model
from unq.data_io import synth_dataset
from unq.model import gumbel_noise, save_checkpoint
from unq.search import exact_knn
from unq.training import (NumericalAbort, OptimizerState, TrainConfig, cv_squared, fit,
                          negative_window, one_cycle_lr, qhadam_step, reconstruction_loss,
                          sample_triplets, total_loss, triplet_hinge)


def test_reconstruction_loss_example():
    assert reconstruction_loss(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 25.0
    value, grad = reconstruction_loss(np.zeros((2, 2)), np.array([[3.0, 4.0], [0.0, 0.0]]), True)
    assert value == 12.5
    np.testing.assert_array_equal(grad, [[3.0, 4.0], [0.0, 0.0]])


def test_triplet_hinge_equal_codes_gives_margin():
    logits = np.random.default_rng(0).normal(size=(5, 3, 4))
    codes = np.zeros((5, 3), dtype=int)
    assert triplet_hinge(logits, codes, codes, 0.25) == pytest.approx(0.25)


def test_triplet_hinge_zero_when_margin_met():
    logits = np.zeros((1, 2, 3))
    logits[0, :, 0] = 5.0
    assert triplet_hinge(logits, [[0, 0]], [[1, 1]], 1.0) == 0.0
    assert triplet_hinge(logits, [[1, 1]], [[0, 0]], 1.0) == pytest.approx(11.0)


def test_cv_squared_examples():
    assert cv_squared(np.array([[0.75, 0.25]]))[0] == pytest.approx(0.25)
    assert cv_squared(np.full((7, 3, 5), 0.2)) == pytest.approx(np.zeros(3), abs=1e-10)
    # per-row non-uniform but uniform on average
    p = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert cv_squared(p)[0] == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_cv_squared_scale_invariant(seed, c):
    p = np.random.default_rng(seed).random((4, 2, 6)) + 1e-3
    np.testing.assert_allclose(cv_squared(c * p), cv_squared(p), rtol=1e-9)


def test_beta_schedule_endpoints():
    cfg = TrainConfig()
    assert cfg.beta_at(0.0) == 1.0
    assert cfg.beta_at(1.0) == pytest.approx(0.05)
    assert cfg.beta_at(0.5) == pytest.approx(0.525)
    assert TrainConfig(no_regularizer=True).weights(0.0) == (1.0, 0.01, 0.0)
    assert TrainConfig(no_triplet=True).weights(0.0)[1] == 0.0
    assert TrainConfig(triplet_only=True).weights(1.0)[:2] == (0.0, 1.0)


def test_config_validation():
    for bad in (dict(alpha=-1), dict(batch_size=1), dict(epochs=-1), dict(beta_end=0),
                dict(no_triplet=True, triplet_only=True)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(peak_lr=0.5).min_lr == 0.02


def test_total_is_weighted_sum_of_terms():
    rng = np.random.default_rng(3)
    model = tiny_model(3, dtype=np.float64)
    x = rng.normal(size=(6, 8))
    noise = gumbel_noise((6, 2, 8), rng, np.float64)
    pos = rng.integers(0, 8, (6, 2))
    neg = rng.integers(0, 8, (6, 2))
    cfg = TrainConfig(alpha=0.3, batch_size=6)
    model.train()
    terms = total_loss(model, x, pos, neg, cfg, 0.25, noise)
    beta = cfg.beta_at(0.25)
    assert terms.total == pytest.approx(terms.reconstruction + 0.3 * terms.triplet + beta * terms.regularizer)
    # terms recomputed independently of the training path
    tp = model.train_forward(x, noise, hard=True)
    assert terms.reconstruction == pytest.approx(((tp.reconstruction - x) ** 2).sum(1).mean())
    assert terms.regularizer == pytest.approx(cv_squared(tp.probs).mean())
    d = lambda codes: -np.take_along_axis(tp.logits, codes[:, :, None], axis=2)[..., 0].sum(1)
    assert terms.triplet == pytest.approx(np.maximum(0, 0.1 + d(pos) - d(neg)).mean())


@pytest.mark.parametrize("weights", [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.3, 0.7)],
                         ids=["reconstruction", "triplet", "regularizer", "combined"])
@pytest.mark.parametrize("seed", range(5))
def test_objective_gradients_match_finite_differences(seed, weights):
    assert objective_gradient_error(seed, weights) < 1e-4


def test_triplet_ranks():
    x = np.random.default_rng(0).normal(size=(400, 5))
    gt = exact_knn(x, x, 200, exclude_self=True).ids
    tb = sample_triplets(gt, np.random.default_rng(1))
    full = np.argsort(((x[:, None] - x[None]) ** 2).sum(-1), axis=1, kind="stable")
    rank = np.argsort(full, axis=1)
    for i, p, n in zip(tb.anchor, tb.positive, tb.negative):
        assert p != i and n != i
        assert 1 <= rank[i, p] <= 3
        assert 100 <= rank[i, n] <= 200


def test_triplet_window_clamps_for_small_sets():
    x = np.random.default_rng(2).normal(size=(150, 3))
    gt = exact_knn(x, x, 149, exclude_self=True).ids
    assert negative_window(149) == (100, 149)
    with pytest.warns(UserWarning, match="clamped"):
        tb = sample_triplets(gt, np.random.default_rng(0))
    cols = [list(gt[i]).index(n) + 1 for i, n in zip(tb.anchor, tb.negative)]
    assert min(cols) >= 100 and max(cols) <= 149
    assert negative_window(50) == (50, 50)
    with pytest.raises(ValueError):
        negative_window(3)


def test_triplet_sampling_is_seeded():
    gt = np.tile(np.arange(1, 201), (10, 1))
    a = sample_triplets(gt, np.random.default_rng(5))
    b = sample_triplets(gt, np.random.default_rng(5))
    assert np.array_equal(a.positive, b.positive) and np.array_equal(a.negative, b.negative)


def test_qhadam_zero_gradient_is_fixed_point():
    p = np.array([1.0, -2.0, 3.0])
    state = OptimizerState.zeros_like([p])
    for _ in range(5):
        qhadam_step([p], [np.zeros(3)], state, lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_qhadam_with_unit_nu_is_adam():
    rng = np.random.default_rng(0)
    p = rng.normal(size=4)
    ref = p.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = OptimizerState.zeros_like([p])
    b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
    for t in range(1, 21):
        g = rng.normal(size=4)
        qhadam_step([p], [g], state, lr, beta1=b1, beta2=b2, nu1=1.0, nu2=1.0, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p, ref, atol=1e-10, rtol=0)


def test_qhadam_moves_against_gradient():
    p = np.zeros(3)
    qhadam_step([p], [np.array([1.0, -1.0, 2.0])], OptimizerState.zeros_like([p]), lr=0.01)
    assert p[0] < 0 and p[1] > 0 and p[2] < 0


def test_one_cycle_schedule():
    assert one_cycle_lr(0, 100, 1.0, 0.04) == pytest.approx(0.04)
    assert one_cycle_lr(30, 100, 1.0, 0.04) == pytest.approx(1.0)
    assert one_cycle_lr(100, 100, 1.0, 0.04) == pytest.approx(0.004)
    lrs = [one_cycle_lr(s, 100, 1.0, 0.04) for s in range(101)]
    assert max(lrs) == lrs[30]
    assert all(a <= b for a, b in zip(lrs[:31], lrs[1:31]))
    assert all(a >= b for a, b in zip(lrs[30:], lrs[31:]))


def test_fit_zero_epochs_is_noop(tmp_path):
    model = tiny_model(0, dtype=np.float32)
    save_checkpoint(model, tmp_path / "a")
    result = fit(model, np.ones((10, 8)), TrainConfig(epochs=0))
    save_checkpoint(model, tmp_path / "b")
    assert result.history == []
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def toy_fit(seed=0, epochs=50):
    data = synth_dataset(256, 1, 1, 8, n_components=2, seed=seed).train
    model = tiny_model(seed, M=2, K=4, dtype=np.float32)
    cfg = TrainConfig(epochs=epochs, batch_size=32, peak_lr=1e-2, n_neighbors=200)
    result = fit(model, data, cfg, rng=seed)
    return model, result


def test_fit_reduces_reconstruction_on_toy_mixture():
    _, result = toy_fit()
    assert len(result.history) == 50
    assert result.history[-1].reconstruction < result.history[0].reconstruction
    assert result.history[-1].beta == pytest.approx(0.05)
    assert result.history[0].beta == 1.0


def test_fit_is_deterministic(tmp_path):
    a, ra = toy_fit(epochs=3)
    b, rb = toy_fit(epochs=3)
    save_checkpoint(a, tmp_path / "a")
    save_checkpoint(b, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert [r.line() for r in ra.history] == [r.line() for r in rb.history]


def test_fit_aborts_on_non_finite_loss():
    x = np.random.default_rng(0).normal(size=(16, 8)).astype(np.float32)
    x[3, 2] = np.nan
    with pytest.raises(NumericalAbort):
        fit(tiny_model(0, dtype=np.float32), x, TrainConfig(epochs=1, batch_size=16, alpha=0.0))
