"""Inference pipeline with the resolution compressor as an optional front stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .decoder import Vocab
from .image import Image, resize_area_ratio
from .model import Engine, text_ids
from .vrc import VrcModel, grid_fraction, vrc_predict
from .vision import TokenSequence


@dataclass
class InferResult:
    alpha: float
    image_tokens: TokenSequence
    prompt_logits: np.ndarray
    output_ids: list[int]

    @property
    def text(self) -> str:
        return Vocab.decode([i for i in self.output_ids if i < 256])


def compress(img: Image, vrc: VrcModel | None = None, alpha: float | None = None) -> tuple[Image, float]:
    """Pick the area ratio (forced, predicted, or 1.0 without a compressor) and apply it."""
    if alpha is None:
        alpha = 1.0 if vrc is None else vrc_predict(img, vrc)
    grid_fraction(alpha)
    return resize_area_ratio(img, alpha), alpha


def infer(engine: Engine, img: Image, prompt: str, branch: str, vrc: VrcModel | None = None,
          alpha: float | None = None, max_new: int = 16) -> InferResult:
    """Compress, encode, score the prompt in parallel, then decode greedily."""
    img, alpha = compress(img, vrc, alpha)
    with tt.no_grad():
        image_part = engine.encode(img, branch)
        ids, _ = text_ids(prompt, "")
        seq = TokenSequence.join(image_part, engine.decoder.embed_text(ids[:-1]))
        logits = engine.decoder.forward(seq).data
    out = engine.generate(img, prompt, branch, max_new=max_new)
    return InferResult(alpha, image_part, logits, out)
