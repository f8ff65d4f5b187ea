"""The multimodal engine: two vision branches sharing one projector tail and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .decoder import Decoder, DecoderConfig, Vocab, masked_cross_entropy
from .errors import ContractError
from .image import Image, resize_area_ratio
from .nn import Linear, Module
from .rng import rng_for
from .tensor import Tensor
from .vision import LARGE, SMALL, BranchConfig, TokenSequence, VisionBranch, encode_image


@dataclass(frozen=True)
class EngineConfig:
    tile_size: int = 32
    max_tiles: int = 8
    shuffle: int = 2
    small: BranchConfig = SMALL
    large: BranchConfig = LARGE
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def branch(self, name: str) -> BranchConfig:
        if name not in ("small", "large"):
            raise ContractError(f"unknown branch {name!r}; expected 'small' or 'large'")
        return self.small if name == "small" else self.large

    @classmethod
    def tiny(cls) -> "EngineConfig":
        """Cut-down dimensions for fast tests."""
        return cls(
            small=BranchConfig("small", depth=1, dim=16, heads=2),
            large=BranchConfig("large", depth=2, dim=32, heads=2),
            decoder=DecoderConfig(depth=2, dim=32, heads=2, max_len=256),
        )

    def to_dict(self) -> dict:
        def b(c: BranchConfig):
            return {"depth": c.depth, "dim": c.dim, "heads": c.heads, "patch": c.patch}

        d = self.decoder
        return {
            "tile_size": self.tile_size,
            "max_tiles": self.max_tiles,
            "shuffle": self.shuffle,
            "small": b(self.small),
            "large": b(self.large),
            "decoder": {"depth": d.depth, "dim": d.dim, "heads": d.heads, "max_len": d.max_len},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        T = int(d["tile_size"])

        def b(name):
            v = d[name]
            return BranchConfig(name, int(v["depth"]), int(v["dim"]), int(v["heads"]), int(v["patch"]), T)

        dec = d["decoder"]
        return cls(
            tile_size=T,
            max_tiles=int(d["max_tiles"]),
            shuffle=int(d["shuffle"]),
            small=b("small"),
            large=b("large"),
            decoder=DecoderConfig(int(dec["depth"]), int(dec["dim"]), int(dec["heads"]), max_len=int(dec["max_len"])),
        )


@dataclass
class Sample:
    image: Image
    prompt: str
    answer: str
    id: str = ""


@dataclass
class Example:
    """A sample laid out for the decoder."""

    seq: TokenSequence
    targets: np.ndarray
    answer_mask: np.ndarray
    text_mask: np.ndarray


def text_ids(prompt: str, answer: str) -> tuple[list[int], int]:
    """[BOS] prompt answer [EOS]; also returns the index where the answer starts."""
    p = Vocab.encode(prompt)
    return [Vocab.BOS] + p + Vocab.encode(answer) + [Vocab.EOS], 1 + len(p)


class Engine(Module):
    def __init__(self, config: EngineConfig = EngineConfig(), seed: int = 0):
        self.config = config
        d_lm = config.decoder.dim
        self.shared_proj = Linear(rng_for(seed, "init", "projector"), d_lm, d_lm)
        self.small = VisionBranch(config.small, d_lm, config.shuffle, self.shared_proj, seed)
        self.large = VisionBranch(config.large, d_lm, config.shuffle, self.shared_proj, seed)
        self.decoder = Decoder(config.decoder, seed)

    def load_state_dict(self, state) -> None:
        super().load_state_dict(state)
        self.small.set_shared(self.shared_proj)
        self.large.set_shared(self.shared_proj)

    def branch(self, name: str) -> VisionBranch:
        self.config.branch(name)
        return self.small if name == "small" else self.large

    def branch_parameters(self, name: str) -> list[Tensor]:
        return self.branch(name).parameters()

    def shared_parameters(self) -> list[Tensor]:
        return self.shared_proj.parameters() + self.decoder.parameters()

    def encode(self, img: Image, branch: str, alpha: float | None = None) -> TokenSequence:
        if alpha is not None:
            img = resize_area_ratio(img, alpha)
        return encode_image(img, self.branch(branch), self.config.tile_size, self.config.max_tiles)

    def example(self, sample: Sample, branch: str, alpha: float | None = None,
                image_part: TokenSequence | None = None) -> Example:
        if image_part is None:
            image_part = self.encode(sample.image, branch, alpha)
        ids, answer_start = text_ids(sample.prompt, sample.answer)
        seq = TokenSequence.join(image_part, self.decoder.embed_text(ids))
        n_img = image_part.tokens.shape[0]
        n = n_img + len(ids)
        targets = np.full(n, -1, dtype=np.int64)
        targets[n_img:n - 1] = ids[1:]
        if n_img:
            targets[n_img - 1] = ids[0]
        answer_mask = np.zeros(n, dtype=bool)
        answer_mask[n_img + answer_start - 1:n - 1] = True
        text_mask = np.zeros(n, dtype=bool)
        text_mask[n_img:n - 1] = True
        return Example(seq, targets, answer_mask, text_mask)

    def logits(self, ex: Example) -> Tensor:
        return self.decoder.forward(ex.seq)

    def answer_loss(self, sample: Sample, branch: str, alpha: float | None = None) -> Tensor:
        """Mean cross-entropy of the answer tokens given image and prompt."""
        ex = self.example(sample, branch, alpha)
        return masked_cross_entropy(self.logits(ex), ex.targets, ex.answer_mask)

    def generate(self, img: Image, prompt: str, branch: str, alpha: float | None = None,
                 max_new: int = 16) -> list[int]:
        """Greedy decoding through the KV cache."""
        with tt.no_grad():
            image_part = self.encode(img, branch, alpha)
            ids, _ = text_ids(prompt, "")
            ids = ids[:-1]
            cache = self.decoder.new_cache()
            for row in image_part.tokens.data:
                self.decoder.decode_step(Tensor(row[None, :]), cache)
            logits = None
            for i in ids:
                logits = self.decoder.decode_step(self.decoder.embed_text([i]), cache)
            out: list[int] = []
            for _ in range(max_new):
                nxt = int(np.argmax(logits.data[0]))
                out.append(nxt)
                if nxt == Vocab.EOS or cache.length >= self.config.decoder.max_len:
                    break
                logits = self.decoder.decode_step(self.decoder.embed_text([nxt]), cache)
        return out


def with_max_tiles(config: EngineConfig, max_tiles: int) -> EngineConfig:
    return replace(config, max_tiles=max_tiles)
