"""Map a :class:`RunConfig` onto the training recipes and produce a report."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig
from .data import Dataset, ShotSplit, load, synthesize
from .eval import EvalReport, evaluate, split_accuracies
from .losses import DistillConfig
from .model import Model
from .train import (Arch, StagePlan, TeacherCache, TeacherSpec, TrainConfig, derive_seed,
                    finetune_config, run_cbd, run_crt, run_finetune, run_single,
                    run_teacher_ensemble, train_teacher, train_teachers)

log = logging.getLogger(__name__)

RNG_NOTE = "numpy PCG64 seeded through SeedSequence"


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset_path is not None:
        root = Path(cfg.dataset_path)
        train = load(root / "train.csv")
        return train, load(root / "test.csv", num_classes=train.num_classes)
    return synthesize(cfg.profile)


def shot_split(cfg: RunConfig, train: Dataset) -> ShotSplit:
    if cfg.split_thresholds:
        default = ShotSplit.relative(int(train.class_counts.max()))
        return ShotSplit(cfg.split_thresholds.get("many", default.many_threshold),
                         cfg.split_thresholds.get("few", default.few_threshold))
    return ShotSplit.relative(int(train.class_counts.max()))


def teacher_specs(kinds: list[str], seed: int) -> list[TeacherSpec]:
    # teacher k always gets the same seed, so teacher 0 doubles as the instance baseline
    return [TeacherSpec(kind, derive_seed(seed, 1, k)) for k, kind in enumerate(kinds)]


def stage_configs(cfg: RunConfig) -> tuple[TrainConfig, TrainConfig]:
    distill = DistillConfig(alpha=cfg.alpha, beta=cfg.beta, temperature=cfg.temperature,
                            mode=cfg.distill_mode or "none")
    s1 = TrainConfig(epochs=cfg.epochs_stage1, batch_size=cfg.batch_size, lr0=cfg.lr0,
                     momentum=cfg.momentum, augment_sigma=cfg.augment_sigma)
    s2 = replace(s1, epochs=cfg.epochs_stage2, distill=distill, augment_sigma=0.0)
    return s1, s2


@dataclass
class RunOutcome:
    report: EvalReport
    model: Model | None
    teachers: list[Model] = field(default_factory=list)


def run(cfg: RunConfig, train: Dataset, test: Dataset, cache: TeacherCache | None = None,
        jobs: int = 1) -> RunOutcome:
    """Train and evaluate ``cfg.method`` end to end."""
    cfg.validate()
    cache = {} if cache is None else cache
    arch = Arch(widths=(train.dim, 64, 32), gamma=cfg.gamma)
    s1, s2 = stage_configs(cfg)
    split = shot_split(cfg, train)
    base = teacher_specs(["standard"], cfg.seed)[0]
    echo = cfg.to_dict() | {"rng": RNG_NOTE}
    method = cfg.method
    log.info("running %s (seed %d)", method, cfg.seed)

    teachers: list[Model] = []
    if method == "instance":
        model = train_teacher(base, train, s1, arch, cache)[0]
    elif method == "class_balanced":
        model = run_single(train, replace(s1, sampling="class_balanced", augment_sigma=0.0),
                           arch, base.seed).model
    elif method == "crt":
        stage1 = train_teacher(base, train, s1, arch, cache)[0]
        model = run_crt(stage1, replace(s2, distill=DistillConfig()), train, cfg.seed).model
    elif method == "finetune":
        stage1 = train_teacher(base, train, s1, arch, cache)[0]
        model = run_finetune(stage1, finetune_config(s1), train, cfg.seed).model
    elif method in ("cbd", "cbd_k"):
        plan = StagePlan(method, teacher_specs(cfg.teachers(), cfg.seed), s1, s2, arch,
                         student_seed=derive_seed(cfg.seed, 2))
        result = run_cbd(plan, train, cache, jobs)
        model, teachers = result.model, result.teachers
    else:
        teachers = train_teachers(teacher_specs(cfg.teachers(), cfg.seed), train, s1, arch,
                                  cache, jobs)
        model = None
        pred = run_teacher_ensemble(teachers, test.features)
        tags = [split.tag(int(n)) for n in train.class_counts]
        acc = split_accuracies(pred, test, tags)
        report = EvalReport(method, cfg.seed, acc["overall"], acc["many"], acc["mid"], acc["few"],
                            None, config=echo, split_thresholds=split.as_dict())
        return RunOutcome(report, None, teachers)

    report = evaluate(model, method, cfg.seed, train, test, split, ncm=True, config=echo)
    return RunOutcome(report, model, teachers)
