"""SGD with momentum, cosine schedule, the training loop, and the two-stage
recipes built on it: cRT, fine-tuning, CBD, CBD_K and the teacher ensemble.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np

from .data import Dataset, augment
from .losses import DistillConfig, concat_teacher_features, training_loss
from .model import DEFAULT_GAMMA, Model, unit_columns, rng_for
from .sampling import BatchIterator, SamplingStrategy, steps_per_epoch
from .tensor import Tensor, softmax_np

log = logging.getLogger(__name__)

TeacherKind = Literal["standard", "data_aug"]
METHODS = ("instance", "class_balanced", "crt", "finetune", "cbd", "cbd_k", "teacher_ensemble")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, lr: float, terms: dict):
        self.step, self.lr, self.terms = step, lr, terms
        super().__init__(f"non-finite loss at step {step} (lr={lr:.6g}, terms={terms})")


@dataclass(frozen=True)
class Arch:
    widths: tuple[int, ...] = (16, 64, 32)
    gamma: float = DEFAULT_GAMMA


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr0: float = 0.2
    momentum: float = 0.9
    seed: int = 0
    sampling: str = "instance"
    distill: DistillConfig = field(default_factory=DistillConfig)
    augment_sigma: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr0 < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("need lr0 >= 0 and momentum in [0, 1)")
        if self.augment_sigma < 0:
            raise ValueError("augment_sigma must be >= 0")


def derive_seed(base: int, *tags: int) -> int:
    """Deterministic child seed; distinct tag tuples give independent streams."""
    return int(np.random.SeedSequence([base, *tags]).generate_state(1)[0])


# --- optimiser -----------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
             velocity: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """In place: v <- momentum * v + g; p <- p - lr * v."""
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        v *= momentum
        v += g
        p -= lr * v


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params],
                 self.velocity, lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --- teachers as fixed targets -------------------------------------------

@dataclass(frozen=True)
class TeacherSpec:
    kind: TeacherKind
    seed: int


@dataclass
class TeacherTargets:
    """Frozen teacher outputs for every training instance."""
    features: np.ndarray | None  # n x d (single) or n x dK (concatenated, unit blocks)
    logits: np.ndarray | None    # n x c, first teacher

    @classmethod
    def from_models(cls, teachers: Sequence[Model], x: np.ndarray, ensemble: bool) -> "TeacherTargets":
        # teachers see clean inputs in stage 2 regardless of how they were trained
        feats = [t.descriptors(x) for t in teachers]
        f = concat_teacher_features(feats) if ensemble else feats[0]
        return cls(f, teachers[0].logits(x))


# --- training loop -------------------------------------------------------

@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    eval_acc: list[float | None] = field(default_factory=list)
    steps: int = 0


def train_single_stage(model: Model, data: Dataset, cfg: TrainConfig,
                       teachers: TeacherTargets | None = None,
                       trainable: Sequence[Tensor] | None = None,
                       eval_data: Dataset | None = None) -> History:
    """Train ``model`` in place and return per-epoch history.

    Parameters outside ``trainable`` get no gradient and stay bit-identical.
    """
    mode = cfg.distill.mode
    if mode != "none" and teachers is None:
        raise ValueError(f"distillation mode {mode!r} needs teacher targets")
    all_params = model.parameters()
    trainable = all_params if trainable is None else list(trainable)
    train_ids = {id(p) for p in trainable}
    saved_flags = [p.requires_grad for p in all_params]
    for p in all_params:
        p.requires_grad = id(p) in train_ids
        p.grad = None

    sampler_seed, noise_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    it = BatchIterator(data, cfg.batch_size, SamplingStrategy(cfg.sampling, int(sampler_seed)))
    noise_rng = rng_for(int(noise_seed))
    opt = SGD(trainable, cfg.momentum)
    per_epoch = steps_per_epoch(len(data), cfg.batch_size)
    total = cfg.epochs * per_epoch
    hist = History()
    step = 0
    try:
        for _ in range(cfg.epochs):
            epoch_loss = 0.0
            for _ in range(per_epoch):
                idx = it.next_batch()
                x = augment(data.features[idx], cfg.augment_sigma, noise_rng)
                out = model.forward(Tensor(x))
                loss = training_loss(
                    cfg.distill, out.logits, data.labels[idx],
                    features=out.features, embedding=out.embedding,
                    teacher_features=None if teachers is None or teachers.features is None
                    else teachers.features[idx],
                    teacher_logits=None if teachers is None or teachers.logits is None
                    else teachers.logits[idx])
                lr = cosine_lr(step, total, cfg.lr0)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(step, lr, {"loss": value, "mode": mode,
                                                      "alpha": cfg.distill.alpha,
                                                      "beta": cfg.distill.beta})
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                epoch_loss += value
                step += 1
            hist.train_loss.append(epoch_loss / per_epoch)
            if eval_data is not None:
                hist.eval_acc.append(float(np.mean(model.predict(eval_data.features) == eval_data.labels)))
            else:
                hist.eval_acc.append(None)
    finally:
        for p, flag in zip(all_params, saved_flags):
            p.requires_grad = flag
    hist.steps = step
    log.debug("trained %d steps, final loss %.4f", step, hist.train_loss[-1])
    return hist


# --- recipes -------------------------------------------------------------

@dataclass
class RunResult:
    model: Model | None
    histories: dict[str, History] = field(default_factory=dict)
    teachers: list[Model] = field(default_factory=list)
    stage1: Model | None = None


TeacherCache = dict


def train_teacher(spec: TeacherSpec, data: Dataset, stage1: TrainConfig, arch: Arch,
                  cache: TeacherCache | None = None) -> tuple[Model, History | None]:
    """Stage-1 model trained from scratch with instance sampling.

    ``data_aug`` teachers see Gaussian input noise at ``stage1.augment_sigma``;
    ``standard`` teachers see clean inputs.
    """
    sigma = stage1.augment_sigma if spec.kind == "data_aug" else 0.0
    cfg = replace(stage1, seed=spec.seed, sampling="instance", augment_sigma=sigma,
                  distill=DistillConfig(mode="none"))
    key = (id(data), spec.kind, arch, cfg)
    if cache is not None and key in cache:
        return cache[key].copy(), None
    m = Model.init(list(arch.widths), data.num_classes, spec.seed, arch.gamma)
    hist = train_single_stage(m, data, cfg)
    if cache is not None:
        cache[key] = m.copy()
    return m, hist


def train_teachers(specs: Sequence[TeacherSpec], data: Dataset, stage1: TrainConfig, arch: Arch,
                   cache: TeacherCache | None = None, jobs: int = 1) -> list[Model]:
    """Teachers are independent, so they may train concurrently; all finish before returning."""
    fn: Callable = lambda s: train_teacher(s, data, stage1, arch, cache)[0]  # noqa: E731
    if jobs <= 1 or len(specs) <= 1:
        return [fn(s) for s in specs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, specs))


def run_single(data: Dataset, cfg: TrainConfig, arch: Arch, seed: int,
               eval_data: Dataset | None = None) -> RunResult:
    """One-stage baseline under ``cfg.sampling``."""
    m = Model.init(list(arch.widths), data.num_classes, seed, arch.gamma)
    h = train_single_stage(m, data, replace(cfg, seed=seed), eval_data=eval_data)
    return RunResult(m, {"stage1": h})


def _check_teacher_dims(teachers: Sequence[Model], arch: Arch) -> None:
    for t in teachers:
        if t.extractor.out_dim != arch.widths[-1]:
            raise ValueError(f"teacher descriptor width {t.extractor.out_dim} "
                             f"!= student width {arch.widths[-1]}")


@dataclass
class StagePlan:
    method: str
    teacher_specs: list[TeacherSpec]
    stage1: TrainConfig
    stage2: TrainConfig
    arch: Arch = field(default_factory=Arch)
    student_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "cbd" and len(self.teacher_specs) != 1:
            raise ValueError("cbd needs exactly one teacher")
        if self.method in ("cbd_k", "teacher_ensemble") and not self.teacher_specs:
            raise ValueError(f"{self.method} needs at least one teacher")


def run_cbd(plan: StagePlan, data: Dataset, cache: TeacherCache | None = None, jobs: int = 1,
            eval_data: Dataset | None = None) -> RunResult:
    """Teachers with instance sampling, then a fresh class-balanced student distilled from them."""
    if plan.method not in ("cbd", "cbd_k"):
        raise ValueError(f"run_cbd cannot run method {plan.method!r}")
    teachers = train_teachers(plan.teacher_specs, data, plan.stage1, plan.arch, cache, jobs)
    _check_teacher_dims(teachers, plan.arch)
    ensemble = plan.method == "cbd_k"
    K = len(teachers)
    distill = plan.stage2.distill
    if ensemble:
        distill = replace(distill, mode="ensemble", K=K)
    elif distill.mode in ("none", "ensemble"):
        distill = replace(distill, mode="feature")
    student = Model.init(list(plan.arch.widths), data.num_classes, plan.student_seed,
                         plan.arch.gamma, K=K if ensemble else None)
    targets = TeacherTargets.from_models(teachers, data.features, ensemble)
    cfg = replace(plan.stage2, sampling="class_balanced", augment_sigma=0.0, distill=distill,
                  seed=derive_seed(plan.student_seed, 2))
    h = train_single_stage(student, data, cfg, teachers=targets, eval_data=eval_data)
    return RunResult(student, {"stage2": h}, teachers)


def run_crt(stage1_model: Model, stage2: TrainConfig, data: Dataset, seed: int,
            eval_data: Dataset | None = None) -> RunResult:
    """Freeze the extractor, re-initialise W and train it alone class-balanced."""
    m = stage1_model.copy()
    c = data.num_classes
    m.classifier.W = Tensor(unit_columns(m.classifier.W.shape[0], c, rng_for(derive_seed(seed, 3))),
                            requires_grad=True)
    cfg = replace(stage2, sampling="class_balanced", distill=DistillConfig(mode="none"),
                  augment_sigma=0.0, seed=derive_seed(seed, 4))
    h = train_single_stage(m, data, cfg, trainable=m.classifier.parameters(), eval_data=eval_data)
    return RunResult(m, {"stage2": h}, stage1=stage1_model)


def finetune_config(stage1: TrainConfig, epochs: int = 10, lr_ratio: float = 1 / 20) -> TrainConfig:
    return replace(stage1, epochs=epochs, lr0=stage1.lr0 * lr_ratio)


def run_finetune(stage1_model: Model, stage2: TrainConfig, data: Dataset, seed: int,
                 eval_data: Dataset | None = None) -> RunResult:
    """Continue training every parameter with class-balanced sampling."""
    m = stage1_model.copy()
    cfg = replace(stage2, sampling="class_balanced", distill=DistillConfig(mode="none"),
                  augment_sigma=0.0, seed=derive_seed(seed, 5))
    h = train_single_stage(m, data, cfg, eval_data=eval_data)
    return RunResult(m, {"stage2": h}, stage1=stage1_model)


def ensemble_probabilities(teachers: Sequence[Model], x: np.ndarray) -> np.ndarray:
    return np.mean([softmax_np(t.logits(x)) for t in teachers], axis=0)


def ensemble_predict(teachers: Sequence[Model], x: np.ndarray) -> np.ndarray:
    return np.argmax(ensemble_probabilities(teachers, x), axis=1)


def run_teacher_ensemble(teachers: Sequence[Model], x: np.ndarray) -> np.ndarray:
    """Test-time averaging of teacher softmax outputs; returns predicted classes."""
    if len(teachers) < 2:
        raise ValueError("a teacher ensemble needs at least two teachers")
    if len({t.classifier.num_classes for t in teachers}) != 1:
        raise ValueError("teachers disagree on the number of classes")
    return ensemble_predict(teachers, x)
