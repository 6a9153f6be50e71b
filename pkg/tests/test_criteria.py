import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresight import autodiff as ad
from foresight.criteria import (
    Mask,
    Polarity,
    ScoreVector,
    baseline_scores,
    compute_mask,
    compute_scores,
    dataset_gradient_flow,
    gradient_flow,
    grasp_scores,
    removal_count,
    snip_scores,
    taylor_flow_change,
    weight_gradient,
)
from foresight.data import ScoringBatchPolicy, sample_scoring_batch
from foresight.nn import ParamSet, init_params, loss_fn, reference_spec

A = np.array([[2.0, 1.0], [1.0, 3.0]])


def quad_hg(theta, a):
    loss = lambda vs, b: 0.5 * ad.sum(vs[0] * ad.matmul(ad.constant(a), vs[0].reshape(-1, 1)).reshape(-1))
    return ad.hessian_gradient_product(loss, [theta], None, return_grad=True)


def test_quadratic_scores_and_flow():
    theta = np.array([1.0, 1.0])
    (hg,), (g,), _ = quad_hg(theta, A)
    assert float(g @ g) == 25.0
    grasp = ScoreVector(-theta * hg, "grasp", [("w", (2,), True)])
    assert np.allclose(grasp.values, [-10.0, -15.0])
    mask = compute_mask(grasp, 0.5)
    assert np.array_equal(mask.tensors[0], [0.0, 1.0])
    assert np.allclose(np.abs(theta * g), [3.0, 4.0])


def test_flow_scales_quadratically():
    theta = np.array([0.3, -1.2])
    _, (g,), _ = quad_hg(theta, A)
    _, (g3,), _ = quad_hg(theta, 3 * A)
    assert float(g3 @ g3) == pytest.approx(9 * float(g @ g))


def test_identity_hessian_recovers_snip():
    rng = np.random.default_rng(0)
    theta, c = rng.normal(size=40), rng.normal(size=40)
    loss = lambda vs, b: 0.5 * ad.sum((vs[0] - b) * (vs[0] - b))
    (hg,), (g,), _ = ad.hessian_gradient_product(loss, [theta], c, return_grad=True)
    assert np.allclose(np.abs(-theta * hg), np.abs(theta * g), atol=1e-8, rtol=0)


def test_grasp_zero_weight_and_critical_point(small_spec, small_params, small_data):
    batch = sample_scoring_batch(small_data, ScoringBatchPolicy(5))
    p = small_params.copy()
    p["l1.weight"][0, 0] = 0.0
    s = grasp_scores(small_spec, p, batch)
    assert s.values[0] == 0.0
    assert snip_scores(small_spec, p, batch).values[0] == 0.0


def test_snip_is_abs_theta_times_gradient(small_spec, small_params, small_data):
    batch = sample_scoring_batch(small_data, ScoringBatchPolicy(5))
    g = small_params.flatten(weight_gradient(small_spec, small_params, batch))
    theta = small_params.flatten()
    s = snip_scores(small_spec, small_params, batch).values
    assert np.array_equal(s, np.abs(theta * g))
    assert np.array_equal(s, np.abs(-theta * g))


def test_multi_batch_scores_sum(small_spec, small_params, small_data):
    b1 = sample_scoring_batch(small_data, ScoringBatchPolicy(5, seed=1))
    b2 = sample_scoring_batch(small_data, ScoringBatchPolicy(5, seed=2))
    both = grasp_scores(small_spec, small_params, [b1, b2]).values
    parts = grasp_scores(small_spec, small_params, b1).values + grasp_scores(small_spec, small_params, b2).values
    assert np.allclose(both, parts, rtol=1e-12, atol=1e-15)


def test_baselines():
    p = ParamSet([("w", np.array([-3.0, 0.5]), True), ("b", np.zeros(1), False)])
    assert np.array_equal(baseline_scores("magnitude", p).values, [3.0, 0.5])
    assert np.array_equal(baseline_scores("random", p, 5).values, baseline_scores("random", p, 5).values)
    with pytest.raises(ValueError):
        baseline_scores("taylor", p)
    with pytest.raises(ValueError):
        compute_scores("obd", None, p, None, 1.0)


def test_random_mask_exact_count():
    p = ParamSet([("w", np.ones(1000), True)])
    m = compute_mask(baseline_scores("random", p, 0), 0.9)
    assert m.zeros() == 900


def test_mask_examples():
    layout = [("w", (4,), True)]
    m = compute_mask(ScoreVector([3.0, 1.0, -2.0, 0.0], "grasp", layout), 0.5)
    assert np.array_equal(m.tensors[0], [0.0, 0.0, 1.0, 1.0])
    m = compute_mask(ScoreVector(np.arange(4.0), "snip", layout), 0.0)
    assert m.zeros() == 0
    ties = compute_mask(ScoreVector(np.ones(8), "snip", [("w", (8,), True)]), 0.25)
    assert np.array_equal(np.flatnonzero(ties.tensors[0] == 0), [0, 1])
    with pytest.raises(ValueError):
        compute_mask(ScoreVector(np.ones(3), "snip", [("w", (3,), True)]), 1.0)


def test_non_finite_scores_rejected():
    with pytest.raises(ad.NumericalError):
        ScoreVector([1.0, np.nan], "grasp")


def test_removal_count_is_exact():
    assert removal_count(0.95, 20) == 19  # 0.95 * 20 is 18.999... in binary floating point
    assert removal_count(0.98, 266200) == 260876
    assert removal_count(0.5, 7) == 4


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 400), ratio=st.floats(0.0, 0.999), seed=st.integers(0, 1000))
def test_sparsity_exactness(d, ratio, seed):
    scores = np.random.default_rng(seed).normal(size=d).round(1)  # rounding forces ties
    for crit in ("grasp", "snip"):
        m = compute_mask(ScoreVector(scores, crit, [("w", (d,), True)]), ratio)
        assert m.zeros() == removal_count(ratio, d)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 200), ratio=st.floats(0.0, 0.99), seed=st.integers(0, 1000))
def test_polarity_flip_gives_same_mask(d, ratio, seed):
    s = np.random.default_rng(seed).integers(-5, 5, size=d).astype(float)
    layout = [("w", (d,), True)]
    a = compute_mask(ScoreVector(s, "grasp", layout), ratio, Polarity.REMOVE_LARGEST)
    b = compute_mask(ScoreVector(-s, "grasp", layout), ratio, Polarity.KEEP_LARGEST)
    assert np.array_equal(a.tensors[0], b.tensors[0])


def test_global_ranking_across_layers_and_bias_untouched(small_params):
    scores = ScoreVector(np.arange(small_params.d, dtype=float), "snip", small_params.layout())
    m = compute_mask(scores, 0.5)
    first = m.tensors[small_params.names.index("l1.weight")]
    assert not first.any()  # the lowest scores all live in the first layer
    assert all(np.all(t == 1) for t, p in zip(m.tensors, small_params.prunable) if not p)
    assert m.zeros() == removal_count(0.5, small_params.d)


def test_mask_determinism_and_roundtrip(tmp_path, small_spec, small_params, small_data):
    batch = sample_scoring_batch(small_data, ScoringBatchPolicy(5))
    a = compute_mask(grasp_scores(small_spec, small_params, batch), 0.8)
    b = compute_mask(grasp_scores(small_spec, small_params, batch), 0.8)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors, b.tensors))
    back = Mask.load(a.save(tmp_path / "m.fsct"))
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors, back.tensors))
    assert back.zeros() == a.zeros() and back.criterion == "grasp"


def test_random_survival_per_layer_is_binomial():
    p = init_params(reference_spec("mlp"), seed=0)
    m = compute_mask(baseline_scores("random", p, 3), 0.9)
    for name, kept, size in m.survival():
        sigma = math.sqrt(size * 0.1 * 0.9)
        assert abs(kept - 0.1 * size) <= 3 * sigma, name


def test_taylor_prediction_converges_for_small_perturbations(small_spec, small_params, small_data):
    """Shrinking the removal step makes the first-order prediction exact."""
    batch = sample_scoring_batch(small_data, ScoringBatchPolicy(5))
    hg = small_params.flatten(
        ad.hessian_gradient_product(loss_fn(small_spec), small_params.tensors, batch, wrt=small_params.prunable))
    base = gradient_flow(small_spec, small_params, batch)
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        q = int(np.argmax(np.abs(small_params.flatten() * hg)))
        name, idx = small_params.locate(q)
        p = small_params.copy()
        p[name][idx] *= 1 - eps
        actual = gradient_flow(small_spec, p, batch) - base
        errs.append(abs(eps * taylor_flow_change(hg, small_params, q) - actual) / abs(actual))
    assert errs[2] < 1e-3 and errs[2] < errs[1] < errs[0]


def test_dataset_flow_equals_single_batch_flow(small_spec, small_params, small_data):
    whole = next(small_data.batches(len(small_data)))
    assert dataset_gradient_flow(small_spec, small_params, small_data, batch_size=7) == pytest.approx(
        gradient_flow(small_spec, small_params, whole), rel=1e-12)
