import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbdistill.losses import (DistillConfig, cbd_loss, classifier_distill_loss,
                              classifier_distill_term, concat_teacher_features, cross_entropy,
                              ensemble_loss, feature_distance, hybrid_loss, training_loss)
from cbdistill.model import ProjectionHead, project
from cbdistill.tensor import ShapeError, Tensor, gradcheck


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def test_cross_entropy_examples():
    assert cross_entropy(t([[100.0, 0.0, 0.0]]), [0]).item() < 1e-6
    assert cross_entropy(t([[0.0, 0.0, 0.0]]), [2]).item() == pytest.approx(math.log(3), abs=1e-12)
    # -log(e^2 / (e^1 + e^2)) = log(1 + e^-1)
    expected = math.log(1 + math.exp(-1))
    assert cross_entropy(t([[1.0, 2.0]]), [1]).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.31326, abs=1e-4)


def test_feature_distance_anchors():
    v = t([[1.0, 2.0]])
    assert feature_distance(v, [[1.0, 2.0]]).item() == pytest.approx(0.0, abs=1e-12)
    assert feature_distance(t([[1.0, 0.0]]), [[0.0, 3.0]]).item() == pytest.approx(1.0, abs=1e-12)
    assert feature_distance(t([[1.0, 2.0]]), [[-2.0, -4.0]]).item() == pytest.approx(2.0, abs=1e-12)


def test_feature_distance_width_mismatch():
    with pytest.raises(ShapeError):
        feature_distance(t([[1.0, 2.0]]), [[1.0, 2.0, 3.0]])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), d=st.integers(1, 6))
def test_feature_distance_range(seed, d):
    rng = np.random.default_rng(seed)
    v, w = rng.standard_normal((3, d)), rng.standard_normal((3, d))
    fd = feature_distance(t(v), w).item()
    assert -1e-12 <= fd <= 2 + 1e-12
    assert feature_distance(t(v), 3.0 * v).item() <= 1e-9


def _batch(seed, b=4, c=3, d=5):
    rng = np.random.default_rng(seed)
    return (t(rng.standard_normal((b, c)) * 3, True), rng.integers(0, c, b),
            t(rng.standard_normal((b, d)), True), rng.standard_normal((b, d)),
            rng.standard_normal((b, c)) * 3)


def test_cbd_alpha_endpoints():
    z, y, v, vh, _ = _batch(0)
    ce = cross_entropy(z, y).item()
    fd = feature_distance(v, vh).item()
    assert cbd_loss(z, y, v, vh, DistillConfig(alpha=0.0, mode="feature")).item() == ce
    assert cbd_loss(z, y, v, vh, DistillConfig(alpha=1.0, beta=100, mode="feature")).item() == 100 * fd


@pytest.mark.parametrize("alpha", [0.0, 0.1, 0.4, 0.75, 1.0])
def test_cbd_linear_in_alpha(alpha):
    z, y, v, vh, _ = _batch(1)
    ce = cross_entropy(z, y).item()
    fd = feature_distance(v, vh).item()
    got = cbd_loss(z, y, v, vh, DistillConfig(alpha=alpha, beta=100, mode="feature")).item()
    assert got == pytest.approx(ce + alpha * (100 * fd - ce), rel=1e-12, abs=1e-12)


def test_cbd_worked_example():
    ce, fd, alpha, beta = 1.0, 0.25, 0.4, 100.0
    assert (1 - alpha) * ce + alpha * beta * fd == pytest.approx(10.6, abs=1e-12)
    # same arithmetic through the real loss; uniform 2-class logits give CE = ln 2
    z = t([[0.0, 0.0]])
    v = t([[1.0, 0.0]])
    vh = [[0.75, math.sqrt(1 - 0.75 ** 2)]]  # cos = 0.75, so l_F = 0.25
    got = cbd_loss(z, [0], v, vh, DistillConfig(alpha=0.4, beta=100, mode="feature")).item()
    assert got == pytest.approx(0.6 * math.log(2) + 0.4 * 25, abs=1e-12)


def test_classifier_distill_stationary_at_teacher():
    rng = np.random.default_rng(3)
    zh = rng.standard_normal((4, 5)) * 2
    for shift in (0.0, 3.7):
        z = t(zh + shift, True)
        classifier_distill_term(z, zh, T=2.0).backward()
        assert np.linalg.norm(z.grad) < 1e-8


def test_classifier_distill_t1_alpha1_is_soft_ce():
    z, y, _, _, zh = _batch(4)
    p = np.exp(zh - zh.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    logq = z.data - z.data.max(1, keepdims=True)
    logq -= np.log(np.exp(logq).sum(1, keepdims=True))
    expected = -(p * logq).sum(1).mean()
    got = classifier_distill_loss(z, y, zh, DistillConfig(alpha=1.0, temperature=1.0,
                                                          mode="classifier")).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_default_temperature_is_two():
    assert DistillConfig().temperature == 2.0
    assert DistillConfig().alpha == 0.4 and DistillConfig().beta == 100.0


def test_hybrid_decomposition():
    z, y, v, _, zh = _batch(5)
    cfg = DistillConfig(alpha=0.4, beta=100, temperature=2.0, mode="hybrid")
    assert hybrid_loss(z, y, v, v.data, zh, replace_alpha(cfg, 0.0)).item() == pytest.approx(
        cross_entropy(z, y).item(), abs=1e-12)
    ce = cross_entropy(z, y).item()
    kd = classifier_distill_term(z, zh, 2.0).item()
    got = hybrid_loss(z, y, v, v.data, zh, cfg).item()
    assert got == pytest.approx(0.6 * ce + 0.4 * kd / 2, abs=1e-10)


def replace_alpha(cfg, alpha):
    return DistillConfig(alpha=alpha, beta=cfg.beta, temperature=cfg.temperature, mode=cfg.mode)


def test_ensemble_k1_identity_equals_cbd():
    z, y, v, vh, _ = _batch(6)
    head = ProjectionHead.block_identity(5, 1)
    hv = project(head, v)
    a = ensemble_loss(z, y, hv, concat_teacher_features([vh]),
                      DistillConfig(mode="ensemble", K=1), d=5).item()
    b = cbd_loss(z, y, v, vh, DistillConfig(mode="feature")).item()
    assert abs(a - b) <= 1e-12


def test_ensemble_parallel_target_zero_distillation():
    V = np.array([[1.0, 2.0, -1.0, 0.5]])
    hv = t(V * 4.0, True)
    assert feature_distance(hv, V).item() == pytest.approx(0.0, abs=1e-12)


def test_ensemble_brute_force_cosine():
    # two hand-built 2-d teachers; brute-force the cosine of the 4-d concatenations
    t1, t2 = np.array([[3.0, 4.0]]), np.array([[0.0, -2.0]])
    V = concat_teacher_features([t1, t2])
    assert np.allclose(V, [[0.6, 0.8, 0.0, -1.0]])
    hv = np.array([[1.0, 0.0, 2.0, -1.0]])
    dot = sum(a * b for a, b in zip(hv[0], V[0]))
    na = math.sqrt(sum(a * a for a in hv[0]))
    nb = math.sqrt(sum(b * b for b in V[0]))
    expected_fd = 1 - dot / (na * nb)
    z, y = t([[0.3, -0.2]]), [1]
    cfg = DistillConfig(alpha=0.4, beta=100, mode="ensemble", K=2)
    got = ensemble_loss(z, y, t(hv, True), V, cfg, d=2).item()
    assert got == pytest.approx(0.6 * cross_entropy(z, y).item() + 40 * expected_fd, abs=1e-12)


def test_ensemble_width_check():
    z, y = t([[0.0, 1.0]]), [0]
    with pytest.raises(ShapeError):
        ensemble_loss(z, y, t(np.ones((1, 6))), np.ones((1, 6)), DistillConfig(mode="ensemble", K=2), d=2)


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradchecks(seed):
    z, y, v, vh, zh = _batch(seed + 10)
    rng = np.random.default_rng(seed)
    cases = [
        (lambda: cross_entropy(z, y), [z]),
        (lambda: feature_distance(v, vh), [v]),
        (lambda: cbd_loss(z, y, v, vh, DistillConfig(mode="feature")), [z, v]),
        (lambda: classifier_distill_loss(z, y, zh, DistillConfig(mode="classifier")), [z]),
        (lambda: hybrid_loss(z, y, v, vh, zh, DistillConfig(mode="hybrid")), [z, v]),
    ]
    hv = t(rng.standard_normal((4, 10)), True)
    V = concat_teacher_features([rng.standard_normal((4, 5)), rng.standard_normal((4, 5))])
    cases.append((lambda: ensemble_loss(z, y, hv, V, DistillConfig(mode="ensemble", K=2), d=5),
                  [z, hv]))
    for fn, inputs in cases:
        assert gradcheck(fn, inputs) < 1e-4


def test_teacher_side_detached():
    z, y, v, vh, zh = _batch(20)
    teacher_v = t(vh, True)
    teacher_z = t(zh, True)
    for mode in ("feature", "classifier", "hybrid"):
        loss = training_loss(DistillConfig(mode=mode), z, y, features=v,
                             teacher_features=teacher_v, teacher_logits=teacher_z)
        loss.backward()
    assert teacher_v.grad is None and teacher_z.grad is None
    assert z.grad is not None and v.grad is not None


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        DistillConfig(mode="kl")
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
