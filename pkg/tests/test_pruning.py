import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopprune.autodiff import LabeledBatch, ParameterSet, evaluate, gradients, numeric_gradient
from dopprune.model_zoo import Mask, NetworkSpec, apply_mask, init_params, mlp
from dopprune.pruning import (
    ScoreMap,
    SparsityTarget,
    TrainSchedule,
    TrainingDiverged,
    accuracy,
    compute_scores,
    finetune,
    gradient_flow_scores,
    grasp_scores,
    layer_stats,
    snip_scores,
    top_kappa_mask,
)

from conftest import random_batch, tiny_cnn, tiny_mlp

# -- SNIP -------------------------------------------------------------------


def test_snip_matches_numeric_connection_sensitivity(cnn_case):
    spec, params, batch = cnn_case
    theta = params.vector()
    g = numeric_gradient(lambda t: evaluate(spec, params.from_vector(t), batch)[0], theta)
    expected = np.abs(g[:params.n_weights] * theta[:params.n_weights])
    np.testing.assert_allclose(snip_scores(spec, params, batch).scores, expected, rtol=1e-4, atol=1e-10)


def test_snip_zero_weight_scores_zero(mlp_case):
    spec, params, batch = mlp_case
    flat = params.flat_weights()
    flat[[0, 5, 17]] = 0.0
    s = snip_scores(spec, params.with_flat_weights(flat), batch)
    assert np.all(s.scores[[0, 5, 17]] == 0.0)


def test_snip_invariant_under_batch_duplication(cnn_case):
    spec, params, batch = cnn_case
    doubled = LabeledBatch(np.concatenate([batch.images] * 2), np.concatenate([batch.labels] * 2))
    np.testing.assert_allclose(snip_scores(spec, params, doubled).scores,
                               snip_scores(spec, params, batch).scores, rtol=1e-12)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_snip_loss_scaling(cnn_case, c):
    spec, params, batch = cnn_case
    base = snip_scores(spec, params, batch)
    scaled = snip_scores(spec, params, batch, loss_scale=c)
    np.testing.assert_allclose(scaled.scores, c * base.scores, rtol=1e-12)
    kappa = len(base) // 4
    assert top_kappa_mask(scaled, kappa).array_equal(top_kappa_mask(base, kappa))


# -- GraSP ------------------------------------------------------------------


def test_grasp_quadratic_oracle():
    # L = 0.5 (t1^2 + 2 t2^2), theta=(1,1): g=(1,2), Hg=(1,4)
    s = gradient_flow_scores(np.array([1.0, 1.0]), lambda t: np.array([t[0], 2 * t[1]]))
    np.testing.assert_allclose(s, [-1.0, -4.0], rtol=1e-3)


def test_grasp_zero_curvature_gives_zero():
    s = gradient_flow_scores(np.array([0.3, -2.0, 1.0]), lambda t: np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(s, 0.0, atol=1e-9)


def test_grasp_zero_params_gives_zero(mlp_case):
    spec, params, batch = mlp_case
    s = grasp_scores(spec, params.map(np.zeros_like), batch)
    assert np.all(s.scores == 0.0)


def test_grasp_matches_explicit_hessian(mlp_case):
    spec, params, batch = mlp_case
    theta = params.vector()

    def grad_fn(t):
        return gradients(spec, params.from_vector(t), batch).vector()

    n = theta.size
    hess = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1e-5
        hess[:, i] = (grad_fn(theta + e) - grad_fn(theta - e)) / 2e-5
    expected = (-theta * (hess @ grad_fn(theta)))[:params.n_weights]
    got = grasp_scores(spec, params, batch).scores
    np.testing.assert_allclose(got, expected, rtol=1e-3, atol=1e-3 * np.abs(expected).max())


def test_compute_scores_sums_batches(mlp_case):
    spec, params, batch = mlp_case
    other = random_batch(spec, seed=9)
    total = compute_scores("snip", spec, params, [batch, other])
    np.testing.assert_allclose(total.scores, snip_scores(spec, params, batch).scores
                               + snip_scores(spec, params, other).scores)
    with pytest.raises(ValueError):
        compute_scores("synflow", spec, params, batch)


# -- masks ------------------------------------------------------------------


def test_top_kappa_examples():
    assert top_kappa_mask(ScoreMap([3, 1, 2], "snip"), 2).flat().tolist() == [1, 0, 1]
    assert top_kappa_mask(ScoreMap([3, 1, 2], "snip"), 3).flat().tolist() == [1, 1, 1]
    assert top_kappa_mask(ScoreMap([1, 1, 1], "snip"), 2).flat().tolist() == [1, 1, 0]
    m = top_kappa_mask(ScoreMap([5, -1, 2, 2], "grasp"), 2)
    assert m.flat().tolist() == [1, 0, 1, 0] and m.threshold == 2.0


def test_top_kappa_range_errors():
    with pytest.raises(ValueError):
        top_kappa_mask(ScoreMap([1, 2], "snip"), 3)
    with pytest.raises(ValueError):
        top_kappa_mask(ScoreMap([1, 2], "snip"), 0)
    with pytest.raises(ValueError):
        SparsityTarget(total=10, sparsity=1.0)


def test_sparsity_target_rounding():
    assert SparsityTarget(total=1000, sparsity=0.95).kept == 50
    assert SparsityTarget(total=7, sparsity=0.5).kept == 4
    assert SparsityTarget(total=7, kappa=3).kept == 3


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=60), st.data())
def test_top_kappa_brute_force(values, data):
    kappa = data.draw(st.integers(1, len(values)))
    mask = top_kappa_mask(ScoreMap(values, "snip"), kappa).flat()
    expected = sorted(range(len(values)), key=lambda i: (-values[i], i))[:kappa]
    assert int(mask.sum()) == kappa
    assert set(np.flatnonzero(mask)) == set(expected)


def test_mask_split_per_layer():
    params = init_params(tiny_cnn(), 0)
    s = ScoreMap(np.arange(params.n_weights, dtype=float), "snip")
    m = top_kappa_mask(s, SparsityTarget(total=params.n_weights, sparsity=0.5), like=params)
    assert [t.shape for t in m.tensors] == [w.shape for w in params.weights]
    assert m.kept == round(0.5 * params.n_weights)


def test_layer_stats():
    spec = tiny_cnn()
    params = init_params(spec, 0)
    ones = Mask.ones_like(params)
    assert layer_stats(ones, spec)["collapsed"] == []
    t = list(ones.tensors)
    t[1] = np.zeros_like(t[1])
    assert layer_stats(Mask(tuple(t)), spec)["collapsed"] == [spec.prunable_layers()[1]]
    # kappa equal to the first layer's size, all concentrated there
    sizes = [w.size for w in params.weights]
    scores = np.concatenate([np.full(sizes[0], 10.0)] + [np.zeros(s) for s in sizes[1:]])
    m = top_kappa_mask(ScoreMap(scores, "snip"), sizes[0], like=params)
    assert layer_stats(m, spec)["collapsed"] == spec.prunable_layers()[1:]


# -- fine-tuning ------------------------------------------------------------


def _random_mask(params, keep, seed=0):
    rng = np.random.default_rng(seed)
    return Mask(tuple((rng.random(w.shape) < keep).astype(float) for w in params.weights))


def test_finetune_zero_epochs_is_masking():
    spec = tiny_cnn()
    params = init_params(spec, 0)
    mask = _random_mask(params, 0.3)
    batch = random_batch(spec, n=8)
    out = finetune(spec, params, mask, batch.images, batch.labels, TrainSchedule(epochs=0), seed=0)
    assert out.array_equal(apply_mask(params, mask))


def test_finetune_keeps_masked_weights_zero():
    spec = tiny_cnn()
    params = init_params(spec, 0)
    mask = _random_mask(params, 0.2)
    batch = random_batch(spec, n=40)
    sched = TrainSchedule(epochs=20, batch_size=8, lr=0.05, milestones=(10,))
    out = finetune(spec, params, mask, batch.images, batch.labels, sched, seed=1)  # 100 steps
    assert apply_mask(out, mask).array_equal(out)
    changed = [np.any(o[m == 1] != p[m == 1]) for o, p, m in zip(out.weights, params.weights, mask.tensors)]
    assert all(changed)


def test_finetune_deterministic():
    spec = tiny_mlp()
    params = init_params(spec, 0)
    batch = random_batch(spec, n=30)
    sched = TrainSchedule(epochs=3, batch_size=8, lr=0.05)
    a = finetune(spec, params, Mask.ones_like(params), batch.images, batch.labels, sched, seed=3,
                 augment_fn=lambda x, rng: x)
    b = finetune(spec, params, Mask.ones_like(params), batch.images, batch.labels, sched, seed=3,
                 augment_fn=lambda x, rng: x)
    assert a.array_equal(b)


def test_dense_mlp_learns_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4, 4, 1))
    direction = rng.normal(size=16)
    y = (x.reshape(200, -1) @ direction > 0).astype(int)
    spec = mlp(input_shape=(4, 4, 1), hidden=(16, 8), classes=2)
    params = init_params(spec, 0)
    sched = TrainSchedule(epochs=50, batch_size=32, lr=0.05, milestones=(40,), augment=False)
    out = finetune(spec, params, Mask.ones_like(params), x, y, sched, seed=0)
    assert accuracy(spec, out, x, y) >= 0.95


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_finetune_divergence_reports_step():
    spec = tiny_mlp()
    params = init_params(spec, 0)
    batch = random_batch(spec, n=16)
    sched = TrainSchedule(epochs=50, batch_size=16, lr=1e6, momentum=0.9, augment=False)
    with pytest.raises((TrainingDiverged, ValueError)) as info:
        finetune(spec, params, Mask.ones_like(params), batch.images * 100, batch.labels, sched, seed=0)
    assert "step" in str(info.value) or "layer" in str(info.value)
