"""Dual-branch alternating training with text-token KL distillation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .decoder import masked_cross_entropy
from .errors import ContractError, DimensionError, ParameterError
from .nn import SGD
from .rng import rng_for
from .tensor import Tensor

LARGE = "large"
SMALL = "small"


@dataclass(frozen=True)
class DclConfig:
    temperature: float = 1.0
    kd_weight: float = 1.0
    period: int = 1
    lr: float = 0.05
    batch_size: int = 4
    # "student_teacher" is KL(p_s || p_t); "teacher_student" flips it for ablations
    direction: str = "student_teacher"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.kd_weight < 0:
            raise ParameterError(f"kd_weight must be >= 0, got {self.kd_weight}")
        if self.period < 1:
            raise ParameterError(f"period must be >= 1, got {self.period}")
        if self.direction not in ("student_teacher", "teacher_student"):
            raise ParameterError(f"unknown KL direction {self.direction!r}")


def kd_loss(student_logits: Tensor, teacher_logits, text_mask, T: float = 1.0,
            direction: str = "student_teacher") -> Tensor:
    """Mean over masked rows of KL(softmax(s/T) || softmax(t/T)); no gradient reaches the teacher."""
    if not T > 0:
        raise ParameterError(f"temperature must be > 0, got {T}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=float)
    if teacher.shape != student_logits.shape:
        raise DimensionError(f"student {student_logits.shape} vs teacher {teacher.shape}")
    mask = np.asarray(text_mask, dtype=bool)
    if mask.shape != (student_logits.shape[0],):
        raise DimensionError(f"mask length {mask.shape} != rows {student_logits.shape[0]}")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ContractError("kd_loss: mask selects no text positions")
    log_s = tt.log_softmax(student_logits[idx], T)
    log_t = tt.log_softmax(Tensor(teacher[idx]), T)
    if direction == "student_teacher":
        rows = tt.sum_(tt.mul(tt.exp(log_s), tt.sub(log_s, log_t)), axis=-1)
    else:
        rows = tt.sum_(tt.mul(tt.exp(log_t), tt.sub(log_t, log_s)), axis=-1)
    return tt.mean(rows)


def active_branch(step: int, config: DclConfig) -> str:
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    return LARGE if (step // config.period) % 2 == 0 else SMALL


def dcl_train_step(batch: Sequence, step: int, engine, config: DclConfig, optimizer) -> dict:
    """One alternating step. Large steps: CE only. Small steps: CE + λ·KD against the large branch."""
    branch = active_branch(step, config)
    optimizer.zero_grad()
    use_kd = branch == SMALL and config.kd_weight > 0
    ce_total = kd_total = 0.0
    inv = 1.0 / len(batch)
    for sample in batch:
        ex = engine.example(sample, branch)
        logits = engine.logits(ex)
        ce = masked_cross_entropy(logits, ex.targets, ex.answer_mask)
        loss = ce
        if use_kd:
            with tt.no_grad():
                teacher = engine.logits(engine.example(sample, LARGE))
            kd = kd_loss(logits, teacher, ex.text_mask, config.temperature, config.direction)
            kd_total += kd.item() * inv
            loss = tt.add(ce, tt.scale(kd, config.kd_weight))
        ce_total += ce.item() * inv
        tt.backward(tt.scale(loss, inv))
    optimizer.step()
    return {"step": step, "branch": branch, "ce": ce_total, "kd": kd_total}


def make_optimizer(engine, config: DclConfig) -> SGD:
    # one list over everything: the inactive branch carries no grad and is skipped
    return SGD(engine.parameters(), config.lr)


def train_dcl(engine, samples: Sequence, steps: int, config: DclConfig, seed: int = 0,
              log: Callable[[dict], None] | None = None) -> list[dict]:
    if not samples:
        raise ContractError("train_dcl needs samples")
    opt = make_optimizer(engine, config)
    rng = rng_for(seed, "dcl", "batches")
    records = []
    n = len(samples)
    bs = min(config.batch_size, n)
    for step in range(steps):
        idx = rng.choice(n, size=bs, replace=False)
        rec = dcl_train_step([samples[i] for i in idx], step, engine, config, opt)
        records.append(rec)
        if log is not None:
            log(rec)
    return records


def branch_kl(engine, samples: Sequence, T: float = 1.0, direction: str = "student_teacher") -> float:
    """Mean text-position KL between the small (student) and large (teacher) branch outputs."""
    vals = []
    with tt.no_grad():
        for s in samples:
            ex_s = engine.example(s, SMALL)
            ex_l = engine.example(s, LARGE)
            vals.append(kd_loss(engine.logits(ex_s), engine.logits(ex_l), ex_s.text_mask, T, direction).item())
    return float(np.mean(vals))


def held_out_ce(engine, samples: Sequence, branch: str) -> float:
    with tt.no_grad():
        return float(np.mean([engine.answer_loss(s, branch).item() for s in samples]))


LOSS_FIELDS = ("step", "branch", "ce", "kd")


def write_loss_csv(path, records: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_FIELDS)
        for r in records:
            w.writerow([r["step"], r["branch"], repr(float(r["ce"])), repr(float(r["kd"]))])
