"""Visual resolution compressor: label oracle, predictor, training and inference.

Labels come from a frozen reference engine. For each sample the answer loss is
measured at every area ratio of the grid and divided by the full-resolution
loss; the smallest ratio whose loss ratio stays within ``eps`` is the label.
The label is rescaled to the predictor's fixed ``r x r`` input (``α' = w·h·α*/r²``)
with exact rational arithmetic so the rescaling inverts exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tt
from .errors import ContractError, ParameterError
from .image import Image, resize_bilinear
from .nn import Adam, Linear, Module, init_normal
from .rng import rng_for
from .tensor import Tensor

ALPHA_GRID: tuple[float, ...] = tuple(k / 10 for k in range(1, 11))
ALPHA_MIN = ALPHA_GRID[0]
DEFAULT_EPS = 1.05
DEFAULT_R = 64


def grid_fraction(alpha: float) -> Fraction:
    """The exact rational k/10 for a grid ratio."""
    k = round(alpha * 10)
    if not 1 <= k <= 10 or k / 10 != alpha:
        raise ParameterError(f"{alpha} is not a ratio on the grid {ALPHA_GRID}")
    return Fraction(k, 10)


def snap_to_grid(alpha: float) -> float:
    """Clamp to [0.1, 1.0] and round to the nearest tenth, ties toward 1.0."""
    a = min(max(float(alpha), ALPHA_MIN), 1.0)
    return ALPHA_GRID[int(math.floor(a * 10 + 0.5)) - 1]


# --------------------------------------------------------------------------
# label oracle


def delta_ratio(sample, alpha: float, ref_model, branch: str = "small", baseline: float | None = None) -> float:
    """Answer loss at area ratio ``alpha`` over the loss at full resolution."""
    grid_fraction(alpha)
    with tt.no_grad():
        if baseline is None:
            baseline = ref_model.answer_loss(sample, branch).item()
        if not baseline > 0.0:
            raise ContractError(f"sample {sample.id!r}: baseline loss is {baseline}, ratio undefined")
        return ref_model.answer_loss(sample, branch, alpha).item() / baseline


def delta_table(sample, ref_model, branch: str = "small", grid: Sequence[float] = ALPHA_GRID) -> dict[float, float]:
    with tt.no_grad():
        baseline = ref_model.answer_loss(sample, branch).item()
    return {a: delta_ratio(sample, a, ref_model, branch, baseline) for a in grid}


def select_alpha_star(deltas: Mapping[float, float], eps: float = DEFAULT_EPS) -> float:
    """Smallest grid ratio whose loss ratio is within ``eps``."""
    if eps < 1.0:
        raise ParameterError(f"eps must be >= 1, got {eps}")
    missing = [a for a in ALPHA_GRID if a not in deltas]
    if missing:
        raise ContractError(f"delta table is missing ratios {missing}")
    for a in ALPHA_GRID:
        if deltas[a] <= eps:
            return a
    return 1.0


def normalize_label(w: int, h: int, alpha_star: float, r: int) -> Fraction:
    if min(w, h, r) < 1:
        raise ParameterError(f"w, h, r must be >= 1, got {w}, {h}, {r}")
    try:
        a = grid_fraction(alpha_star)
    except ParameterError:
        a = Fraction(alpha_star)
    return Fraction(w * h) * a / (r * r)


def recover_alpha(alpha_prime, w: int, h: int, r: int):
    """Inverse of ``normalize_label`` (exact for Fraction input), before clamping."""
    if isinstance(alpha_prime, Fraction):
        return alpha_prime * (r * r) / (w * h)
    return float(alpha_prime) * (r * r) / (w * h)


@dataclass(frozen=True)
class CompressionLabel:
    sample_id: str
    w: int
    h: int
    alpha_star: float
    alpha_prime: Fraction
    r: int

    def __post_init__(self):
        grid_fraction(self.alpha_star)
        if self.alpha_prime != normalize_label(self.w, self.h, self.alpha_star, self.r):
            raise ContractError(f"label {self.sample_id}: alpha_prime inconsistent with w·h·α*/r²")

    @property
    def target(self) -> float:
        return float(self.alpha_prime)

    def to_json(self) -> str:
        return json.dumps({
            "id": self.sample_id,
            "w": self.w,
            "h": self.h,
            "alpha_star": self.alpha_star,
            "alpha_prime": float(self.alpha_prime),
            "alpha_prime_exact": f"{self.alpha_prime.numerator}/{self.alpha_prime.denominator}",
            "r": self.r,
        })

    @classmethod
    def from_json(cls, line: str) -> "CompressionLabel":
        d = json.loads(line)
        return cls(d["id"], int(d["w"]), int(d["h"]), float(d["alpha_star"]),
                   Fraction(d["alpha_prime_exact"]), int(d["r"]))


def make_label(sample, ref_model, eps: float = DEFAULT_EPS, r: int = DEFAULT_R,
               branch: str = "small") -> tuple[CompressionLabel, dict[float, float]]:
    deltas = delta_table(sample, ref_model, branch)
    a = select_alpha_star(deltas, eps)
    w, h = sample.image.size
    return CompressionLabel(sample.id, w, h, a, normalize_label(w, h, a, r), r), deltas


def build_labels(samples, ref_model, eps: float = DEFAULT_EPS, r: int = DEFAULT_R,
                 branch: str = "small") -> list[CompressionLabel]:
    return [make_label(s, ref_model, eps, r, branch)[0] for s in samples]


def write_labels(path, labels: Iterable[CompressionLabel]) -> None:
    Path(path).write_text("".join(lab.to_json() + "\n" for lab in labels))


def read_labels(path) -> list[CompressionLabel]:
    return [CompressionLabel.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# reference model


def train_reference(engine, samples: Sequence, steps: int, branch: str = "small", lr: float = 2e-3,
                    batch_size: int = 8, seed: int = 0, rescalable=None, rescale_prob: float = 0.5) -> list[float]:
    """Fit the engine that later scores Δ(α); returns the per-step mean loss.

    ``rescalable(sample)`` marks samples whose answer stays true after
    downscaling; those are shown at a random grid ratio with probability
    ``rescale_prob``. Augmenting anything else would teach wrong answers.
    """
    if not samples:
        raise ContractError("train_reference needs samples")
    opt = Adam(engine.branch_parameters(branch) + engine.shared_parameters(), lr=lr)
    rng = rng_for(seed, "vrc", "reference")
    bs = min(batch_size, len(samples))
    history = []
    for _ in range(steps):
        opt.zero_grad()
        total = 0.0
        for i in rng.choice(len(samples), size=bs, replace=False):
            s = samples[i]
            alpha = None
            if rescalable is not None and rescalable(s) and rng.random() < rescale_prob:
                alpha = ALPHA_GRID[int(rng.integers(len(ALPHA_GRID)))]
            loss = tt.scale(engine.answer_loss(s, branch, alpha), 1.0 / bs)
            tt.backward(loss)
            total += loss.item()
        opt.step()
        history.append(total)
    return history


# --------------------------------------------------------------------------
# predictor


class SeparableBlock(Module):
    """3x3 depthwise conv (stride 2) -> GELU -> 1x1 pointwise conv -> GELU."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.dw_weight = init_normal(rng, (c_in, 3, 3), 1.0 / 3.0)
        self.dw_bias = tt.parameter(np.zeros(c_in))
        self.pw_weight = init_normal(rng, (c_out, c_in), c_in**-0.5)
        self.pw_bias = tt.parameter(np.zeros((c_out, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        x = tt.gelu(tt.depthwise_conv2d(x, self.dw_weight, self.dw_bias, stride=2, pad=1))
        B, C, H, W = x.shape
        y = tt.matmul(self.pw_weight, tt.reshape(x, (B, C, H * W)))
        y = tt.gelu(tt.add(y, self.pw_bias))
        return tt.reshape(y, (B, self.pw_weight.shape[0], H, W))


class VrcModel(Module):
    """Separable conv backbone, softmax-weighted spatial pooling, MLP head with softplus."""

    def __init__(self, r: int = DEFAULT_R, channels: Sequence[int] = (3, 16, 24, 32, 32), hidden: int = 32,
                 seed: int = 0):
        if r % 16:
            raise ParameterError(f"r must be a multiple of 16 for four stride-2 blocks, got {r}")
        rng = rng_for(seed, "init", "vrc")
        self.r = r
        self.channels = tuple(channels)
        self.hidden = hidden
        self.blocks = [SeparableBlock(rng, a, b) for a, b in zip(channels[:-1], channels[1:])]
        side = r // 2 ** (len(channels) - 1)
        self.pool_logits = tt.parameter(np.zeros(side * side))
        self.fc1 = Linear(rng, channels[-1], hidden)
        self.fc2 = Linear(rng, hidden, 1)

    def pool_weights(self) -> np.ndarray:
        z = self.pool_logits.data - self.pool_logits.data.max()
        return np.exp(z) / np.exp(z).sum()

    def __call__(self, x: Tensor) -> Tensor:
        """x: [B, 3, r, r] in [0, 1] -> α̂' of shape [B]."""
        x = tt.scale(tt.sub(x, 0.5), 2.0)
        for block in self.blocks:
            x = block(x)
        B, C, H, W = x.shape
        w = tt.softmax(self.pool_logits)
        pooled = tt.matmul(tt.reshape(x, (B, C, H * W)), tt.reshape(w, (H * W, 1)))
        h = tt.gelu(self.fc1(tt.reshape(pooled, (B, C))))
        return tt.reshape(tt.softplus(self.fc2(h)), (B,))


def predictor_input(images: Sequence[Image], r: int) -> np.ndarray:
    return np.stack([resize_bilinear(img, r, r).pixels.transpose(2, 0, 1) for img in images])


def predict_alpha_prime(images: Sequence[Image], model: VrcModel) -> np.ndarray:
    with tt.no_grad():
        return model(Tensor(predictor_input(images, model.r))).data.copy()


def vrc_predict(img: Image, model: VrcModel, r: int | None = None) -> float:
    """Predicted grid ratio for ``img``."""
    r = model.r if r is None else r
    if r != model.r:
        raise ParameterError(f"model expects r={model.r}, got {r}")
    ap = float(predict_alpha_prime([img], model)[0])
    return alpha_from_prediction(ap, img.width, img.height, r)


def alpha_from_prediction(alpha_prime_hat: float, w: int, h: int, r: int) -> float:
    return snap_to_grid(recover_alpha(alpha_prime_hat, w, h, r))


def mse(model: VrcModel, images: Sequence[Image], targets: np.ndarray) -> float:
    pred = predict_alpha_prime(images, model)
    return float(np.mean((pred - targets) ** 2))


def train_vrc(images: Sequence[Image], labels: Sequence[CompressionLabel], model: VrcModel, epochs: int = 30,
              lr: float = 3e-3, batch_size: int = 32, seed: int = 0, log=None) -> VrcModel:
    """Adam on the MSE between α̂' and α'; returns the same (updated) model."""
    if not labels:
        raise ContractError("train_vrc needs at least one label")
    if len(images) != len(labels):
        raise ContractError(f"{len(images)} images for {len(labels)} labels")
    x_all = predictor_input(images, model.r)
    y_all = np.array([lab.target for lab in labels])
    opt = Adam(model.parameters(), lr=lr)
    rng = rng_for(seed, "train-vrc")
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            pred = model(Tensor(x_all[idx]))
            diff = tt.sub(pred, y_all[idx])
            loss = tt.mean(tt.mul(diff, diff))
            tt.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log(epoch, total / n)
    return model
