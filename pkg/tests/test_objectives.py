import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sceneforge import numerics as nx
from sceneforge.config import LR_SWEEP, LossWeights, RunConfig
from sceneforge.numerics import ContractError, DimensionError, ParameterStore, Tensor
from sceneforge.objectives import distill_loss, multilabel_ce, positives_mask, stream_loss, total_objective
from sceneforge.temporal import ScoreSheet
from sceneforge.training import TrainState, adamw_step
from tests.oracles import ce_direct


def sheet(level1, level2):
    a, b = Tensor(np.asarray(level1, float)), Tensor(np.asarray(level2, float))
    return ScoreSheet(a, b, a, b)


def test_ce_all_zero_closed_form():
    assert abs(multilabel_ce(np.zeros(5), [0, 1]).item() - (math.log(4) + math.log(3))) <= 1e-12


def test_ce_saturation():
    s = np.array([50.0, 50.0, -50.0, -50.0, -50.0])
    assert multilabel_ce(s, [0, 1]).item() < 1e-20


@given(st.integers(0, 2**32 - 1))
def test_ce_matches_direct_formula(seed):
    r = np.random.default_rng(seed)
    s = r.normal(scale=3.0, size=6)
    pos = [int(i) for i in np.flatnonzero(r.random(6) < 0.4)]
    assert abs(multilabel_ce(s, pos).item() - ce_direct(s, pos)) <= 1e-10


def test_ce_is_stable_far_from_zero():
    v = multilabel_ce(np.array([1000.0, -1000.0]), [1]).item()
    assert math.isfinite(v) and abs(v - 2000.0) < 1e-9


def test_ce_batch_mean():
    s = np.array([[0.0, 0.0], [3.0, -1.0]])
    mask = np.array([[True, False], [False, True]])
    want = np.mean([ce_direct(s[0], [0]), ce_direct(s[1], [1])])
    assert abs(multilabel_ce(s, mask).item() - want) < 1e-12


def test_ce_mask_errors():
    with pytest.raises(DimensionError):
        multilabel_ce(np.zeros((2, 3)), np.zeros((2, 4), bool))
    with pytest.raises(IndexError):
        positives_mask([5], 3)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 2.0))
def test_ce_monotone_in_each_score(seed, delta):
    r = np.random.default_rng(seed)
    s = r.normal(size=7)
    pos = [0, 3]
    base = multilabel_ce(s, pos).item()
    assert base >= 0
    for i in range(7):
        up = s.copy()
        up[i] += delta
        moved = multilabel_ce(up, pos).item()
        assert (moved < base) if i in pos else (moved > base)


def test_stream_loss_level_weights():
    s = sheet([0.3, -1.0], [2.0, 0.1, -0.5])
    p1, p2 = positives_mask([0], 2), positives_mask([0, 2], 3)
    j1, j2 = multilabel_ce(s.refined_level1, p1).item(), multilabel_ce(s.refined_level2, p2).item()
    assert abs(stream_loss(s, p1, p2, LossWeights()).item() - (j1 + j2)) < 1e-15
    assert abs(stream_loss(s, p1, p2, LossWeights(beta_level_1=0.0)).item() - j2) < 1e-15


def test_stream_loss_saturated():
    s = sheet([50.0, -50.0], [-50.0, 50.0, -50.0])
    assert stream_loss(s, positives_mask([0], 2), positives_mask([1], 3), LossWeights()).item() < 1e-19


def test_distill_examples():
    w = LossWeights()
    a = sheet([[0.0, 0.0]], [[1.0, 2.0]])
    b = sheet([[3.0, 4.0]], [[1.0, 2.0]])
    assert distill_loss(a, a, w).item() == 0.0
    assert abs(distill_loss(a, b, w).item() - 5.0) < 1e-15
    two_a = sheet([[0.0], [0.0]], [[0.0], [0.0]])
    two_b = sheet([[0.0], [0.0]], [[2.0], [4.0]])
    assert abs(distill_loss(two_a, two_b, w).item() - 3.0) < 1e-15


@given(st.integers(0, 2**32 - 1))
def test_distill_symmetric_and_zero_iff_equal(seed):
    r = np.random.default_rng(seed)
    a = sheet(r.normal(size=(3, 2)), r.normal(size=(3, 5)))
    b = sheet(r.normal(size=(3, 2)), r.normal(size=(3, 5)))
    w = LossWeights()
    assert distill_loss(a, b, w).item() == distill_loss(b, a, w).item() > 0
    assert distill_loss(a, sheet(a.refined_level1.data.copy(), a.refined_level2.data.copy()), w).item() == 0.0


def test_distill_gradient_reaches_both_sheets():
    a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    b = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
    distill_loss(ScoreSheet(a, a, a, a), ScoreSheet(b, b, b, b), LossWeights()).backward()
    assert np.abs(a.grad).sum() > 0 and np.allclose(a.grad, -b.grad)


def test_distill_rejects_mismatched_sheets():
    with pytest.raises(DimensionError):
        distill_loss(sheet([0.0], [0.0, 1.0]), sheet([0.0], [0.0]), LossWeights())


def test_total_objective():
    w = LossWeights(beta_t=2.0, beta_nt=1.0, beta_distill=0.5)
    assert total_objective(1.0, 2.0, 3.0, w).item() == 5.5
    assert total_objective(1.0, 2.0, 3.0, LossWeights()).item() == 6.0
    assert total_objective(1.0, 2.0, 3.0, LossWeights(beta_distill=0.0)).item() == 3.0


def _store_with(values, grad=None, seed=0):
    s = ParameterStore(seed)
    t = s.register("w", np.asarray(values, float))
    if grad is not None:
        t.grad = np.asarray(grad, float)
    return s, t


def test_adamw_pure_decay():
    s, t = _store_with([1.0, -2.0, 3.5], grad=[0.0, 0.0, 0.0])
    before = t.data.copy()
    state = TrainState.fresh(s)
    adamw_step(s, state, lr=1e-3, weight_decay=0.01)
    assert np.array_equal(t.data, before * (1 - 1e-5))
    assert not state.m["w"].any() and not state.v["w"].any()


@given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=6))
def test_adamw_first_step_is_signed_lr(g):
    s, t = _store_with(np.zeros(len(g)), grad=g)
    adamw_step(s, TrainState.fresh(s), lr=1e-3)
    np.testing.assert_allclose(t.data, -1e-3 * np.sign(g), rtol=1e-4)


def test_adamw_zero_grad_no_decay_is_noop():
    s, t = _store_with(np.random.default_rng(0).normal(size=(3, 4)), grad=np.zeros((3, 4)))
    before = t.data.copy()
    state = TrainState.fresh(s)
    for _ in range(3):
        adamw_step(s, state, lr=0.1)
    assert np.array_equal(t.data, before)


def test_adamw_skips_frozen_and_requires_grads():
    s, t = _store_with([1.0, 2.0], grad=[1.0, 1.0])
    frozen = s.register("frozen", np.ones(2))
    frozen.requires_grad = False
    adamw_step(s, TrainState.fresh(s), lr=0.1, weight_decay=0.5)
    assert frozen.data.tolist() == [1.0, 1.0]
    assert not np.array_equal(t.data, [1.0, 2.0])
    s2, t2 = _store_with([1.0])
    t2.grad = None
    with pytest.raises(ContractError):
        adamw_step(s2, TrainState.fresh(s2), lr=0.1)


def test_adamw_matches_reference_over_steps():
    r = np.random.default_rng(3)
    theta = r.normal(size=4)
    s, t = _store_with(theta.copy())
    state = TrainState.fresh(s)
    m = v = np.zeros(4)
    lr, wd, b1, b2, eps = 1e-2, 0.1, 0.9, 0.999, 1e-8
    for k in range(1, 6):
        g = r.normal(size=4)
        t.grad = g.copy()
        adamw_step(s, state, lr, (b1, b2), eps, wd)
        theta = theta * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    np.testing.assert_allclose(t.data, theta, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("lr", LR_SWEEP)
def test_sweep_learning_rates_validate(lr):
    cfg = RunConfig()
    cfg.train.lr = lr
    cfg.validate()


def test_total_objective_gradient_on_micro_batch(model, corpus):
    from sceneforge.data import FeatureCache
    from sceneforge.model import make_batch
    from sceneforge.training import forward_losses
    from tests.conftest import small_config

    b = make_batch(corpus.records[:2], FeatureCache(), corpus.header.hierarchy)
    w = small_config().weights
    inert = [n for n in model.store.names() if n.startswith("gen.c.")]
    names = [n for n in model.store.names() if n not in inert]
    err = nx.finite_diff_check(lambda _: forward_losses(model, b, w, train=False)[0], model.store, names=names, samples_per_param=2)
    assert err < 1e-3
