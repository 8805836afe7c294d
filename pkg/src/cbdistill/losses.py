"""Training objectives: cross-entropy and the feature, classifier, hybrid and
ensemble distillation losses.

All losses are batch means. Teacher descriptors and logits enter as plain
arrays (or are detached if passed as tensors), so no gradient ever reaches a
teacher.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import (ShapeError, Tensor, l2_normalize, log_softmax, mean, mul, pick, scale,
                     softmax_np, tsum)

DistillMode = Literal["none", "feature", "classifier", "hybrid", "ensemble"]
MODES = ("none", "feature", "classifier", "hybrid", "ensemble")

NORM_EPS = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.4
    beta: float = 100.0
    temperature: float = 2.0
    mode: DistillMode = "none"
    K: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta <= 0 or self.temperature <= 0:
            raise ValueError("beta and temperature must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def _const(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return scale(mean(pick(log_softmax(logits), labels)), -1.0)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Batch mean of -sum_j p_j log softmax(z)_j for fixed targets p."""
    p = Tensor(_const(target_probs))
    if p.shape != logits.shape:
        raise ShapeError(f"targets {p.shape} do not match logits {logits.shape}")
    return scale(tsum(mul(p, log_softmax(logits))), -1.0 / logits.shape[0])


def feature_distance(v: Tensor, v_hat) -> Tensor:
    """Mean cosine distance 1 - cos(v_i, v_hat_i), in [0, 2]."""
    t = _const(v_hat)
    if t.shape != v.shape:
        raise ShapeError(f"student {v.shape} and teacher {t.shape} widths differ")
    t_bar = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), NORM_EPS)
    cos = tsum(mul(l2_normalize(v, NORM_EPS), Tensor(t_bar)), axis=1)
    return scale(mean(cos), -1.0) + 1.0


def classifier_distill_term(logits: Tensor, z_hat, T: float) -> Tensor:
    """T^2 * CE(softmax(z/T), softmax(z_hat/T))."""
    target = softmax_np(_const(z_hat) / T)
    return scale(soft_cross_entropy(scale(logits, 1.0 / T), target), T * T)


def cbd_loss(logits: Tensor, labels, v: Tensor, v_hat, cfg: DistillConfig) -> Tensor:
    ce = cross_entropy(logits, labels)
    if cfg.alpha == 0.0:
        return ce
    fd = feature_distance(v, v_hat)
    if cfg.alpha == 1.0:
        return scale(fd, cfg.beta)
    return scale(ce, 1.0 - cfg.alpha) + scale(fd, cfg.alpha * cfg.beta)


def classifier_distill_loss(logits: Tensor, labels, z_hat, cfg: DistillConfig) -> Tensor:
    ce = cross_entropy(logits, labels)
    kd = classifier_distill_term(logits, z_hat, cfg.temperature)
    return scale(ce, 1.0 - cfg.alpha) + scale(kd, cfg.alpha)


def hybrid_loss(logits: Tensor, labels, v: Tensor, v_hat, z_hat, cfg: DistillConfig) -> Tensor:
    """Feature and classifier distillation with equal inner weights."""
    ce = cross_entropy(logits, labels)
    fd = feature_distance(v, v_hat)
    kd = classifier_distill_term(logits, z_hat, cfg.temperature)
    inner = scale(fd, cfg.beta) + kd
    return scale(ce, 1.0 - cfg.alpha) + scale(inner, cfg.alpha / 2.0)


def concat_teacher_features(per_teacher: list[np.ndarray]) -> np.ndarray:
    """Stack K teacher descriptors, each l2-normalized, into one b x dK target."""
    return np.concatenate(
        [f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), NORM_EPS) for f in per_teacher],
        axis=1)


def ensemble_loss(logits: Tensor, labels, hv: Tensor, V_hat, cfg: DistillConfig,
                  d: int | None = None) -> Tensor:
    """Cosine distillation of h(v) toward the concatenated teacher descriptors.

    ``d`` is the per-teacher width; when given, both sides must be exactly d*K wide.
    """
    target = _const(V_hat)
    if d is not None and (hv.shape[1] != d * cfg.K or target.shape[1] != d * cfg.K):
        raise ShapeError(f"ensemble widths {hv.shape[1]}, {target.shape[1]} != d*K = {d * cfg.K}")
    ce = cross_entropy(logits, labels)
    fd = feature_distance(hv, target)
    return scale(ce, 1.0 - cfg.alpha) + scale(fd, cfg.alpha * cfg.beta)


def training_loss(cfg: DistillConfig, logits: Tensor, labels, *, features: Tensor | None = None,
                  embedding: Tensor | None = None, teacher_features=None,
                  teacher_logits=None) -> Tensor:
    """Route to the objective selected by ``cfg.mode``."""
    if cfg.mode == "none":
        return cross_entropy(logits, labels)
    if cfg.mode == "feature":
        return cbd_loss(logits, labels, features, teacher_features, cfg)
    if cfg.mode == "classifier":
        return classifier_distill_loss(logits, labels, teacher_logits, cfg)
    if cfg.mode == "hybrid":
        return hybrid_loss(logits, labels, features, teacher_features, teacher_logits, cfg)
    return ensemble_loss(logits, labels, embedding, teacher_features, cfg, d=features.shape[1])
