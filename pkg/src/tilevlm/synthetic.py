"""Synthetic captioning data: flat colour fields and fine 1-pixel textures.

Captions read ``"<article> <kind> <colour>"``. The article is drawn at random
per sample, so no model can predict it from the image; it sets a loss floor
the same way free phrasing does in real captions. ``kind`` names the texture
(``flat``, ``chk`` for a 1-pixel checkerboard, ``str`` for 1-pixel vertical
stripes) and can only be read at full resolution.
"""

from __future__ import annotations

import numpy as np

from .image import Image
from .model import Sample
from .rng import rng_for

PROMPT = "what?"
ARTICLES = ("a", "an", "the", "one")
COLOURS = ("red", "grn", "blu")
KINDS = ("flat", "chk", "str")


def colour_word(rgb) -> str:
    return COLOURS[int(np.argmax(rgb))]


def _base_colour(rng) -> np.ndarray:
    c = rng.uniform(0.15, 0.45, size=3)
    c[rng.integers(3)] += 0.4
    return c


def flat_image(rng, width: int, height: int) -> tuple[Image, np.ndarray]:
    c = _base_colour(rng)
    ramp = rng.uniform(-0.05, 0.05, size=3)
    ys = np.linspace(0.0, 1.0, height)[:, None, None]
    px = np.clip(c[None, None, :] + ramp[None, None, :] * ys + np.zeros((height, width, 3)), 0.0, 1.0)
    return Image(px), c


def textured_image(rng, width: int, height: int, kind: str) -> tuple[Image, np.ndarray]:
    c = _base_colour(rng)
    amp = rng.uniform(0.25, 0.35)
    yy, xx = np.mgrid[0:height, 0:width]
    phase = int(rng.integers(2))
    if kind == "chk":
        sign = ((xx + yy + phase) % 2) * 2 - 1
    elif kind == "str":
        sign = ((xx + phase) % 2) * 2 - 1
    else:
        raise ValueError(kind)
    px = np.clip(c[None, None, :] + amp * sign[:, :, None], 0.0, 1.0)
    return Image(px), c


def make_sample(rng, width: int, height: int, kind: str, sample_id: str = "") -> Sample:
    if kind == "flat":
        img, c = flat_image(rng, width, height)
    else:
        img, c = textured_image(rng, width, height, kind)
    article = ARTICLES[int(rng.integers(len(ARTICLES)))]
    return Sample(img, PROMPT, f"{article} {kind} {colour_word(c)}", sample_id)


def captioning_set(seed: int, n: int, width: int = 32, height: int = 32, tag: str = "caption",
                   textured_fraction: float = 2 / 3) -> list[Sample]:
    """``n`` samples; kinds are balanced so a fixed fraction is textured."""
    rng = rng_for(seed, "data", tag, width, height)
    out = []
    for i in range(n):
        if rng.random() < textured_fraction:
            kind = KINDS[1 + int(rng.integers(2))]
        else:
            kind = "flat"
        out.append(make_sample(rng, width, height, kind, f"{tag}-{i:04d}"))
    return out


def is_textured(sample: Sample) -> bool:
    return sample.answer.split()[1] != "flat"


def survives_downscale(sample: Sample) -> bool:
    """Flat captions stay true at any resolution; 1-pixel textures do not."""
    return not is_textured(sample)
