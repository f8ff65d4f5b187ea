"""ViT branches, pixel shuffle and the vision-language projector.

Each tile is encoded on its own with tile-local learned positions, so the
per-tile outputs do not depend on neighbouring tiles or on processing order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .image import Image, TileGrid, anyres_tile
from .nn import LayerNorm, Linear, Module, init_normal
from .rng import rng_for
from .tensor import Tensor

IMAGE = "image"
TEXT = "text"


@dataclass(frozen=True)
class BranchConfig:
    name: str
    depth: int
    dim: int
    heads: int
    patch: int = 8
    tile: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"branch {self.name}: dim {self.dim} not divisible by heads {self.heads}")
        if self.tile % self.patch:
            raise ContractError(f"branch {self.name}: tile {self.tile} not divisible by patch {self.patch}")

    @property
    def grid(self) -> int:
        return self.tile // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


SMALL = BranchConfig("small", depth=3, dim=32, heads=4)
LARGE = BranchConfig("large", depth=6, dim=64, heads=4)


@dataclass
class TokenSequence:
    tokens: Tensor
    modality: list[str]
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.tokens.shape[0]
        if len(self.modality) != n:
            raise DimensionError(f"modality tags ({len(self.modality)}) != tokens ({n})")
        seen_text = False
        for tag in self.modality:
            if tag == TEXT:
                seen_text = True
            elif tag == IMAGE and seen_text:
                raise ContractError("image tokens must precede text tokens")
            elif tag not in (IMAGE, TEXT):
                raise ContractError(f"unknown modality tag {tag!r}")
        if self.positions is None:
            self.positions = np.arange(n)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def image_count(self) -> int:
        return sum(1 for m in self.modality if m == IMAGE)

    def text_mask(self) -> np.ndarray:
        return np.array([m == TEXT for m in self.modality])

    @classmethod
    def join(cls, image_part: "TokenSequence", text_tokens: Tensor) -> "TokenSequence":
        tokens = tt.concat([image_part.tokens, text_tokens], axis=0)
        return cls(tokens, image_part.modality + [TEXT] * text_tokens.shape[0])


# --------------------------------------------------------------------------
# attention shared by the encoder and (with a causal mask) the decoder


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return tt.transpose(tt.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return tt.reshape(tt.transpose(x, (1, 0, 2)), (n, h * dh))


def self_attention(x: Tensor, qkv: Linear, proj: Linear, heads: int, mask: np.ndarray | None = None) -> Tensor:
    n, d = x.shape
    fused = qkv(x)
    q = split_heads(fused[:, :d], heads)
    k = split_heads(fused[:, d:2 * d], heads)
    v = split_heads(fused[:, 2 * d:], heads)
    scores = tt.attention_scores(q, k, (d // heads) ** -0.5)
    if mask is not None:
        scores = tt.add(scores, tt.constant(mask, op="mask"))
    probs = tt.softmax(scores, axis=-1, op="attn_probs")
    return proj(merge_heads(tt.matmul(probs, v)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)
        self.heads = heads

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + self_attention(self.ln1(x), self.qkv, self.proj, self.heads, mask)
        return x + self.fc2(tt.gelu(self.fc1(self.ln2(x))))


# --------------------------------------------------------------------------
# encoder


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, 3] -> [(H/p)·(W/p), p·p·3], patches row-major, (py, px, c) inside a patch."""
    H, W, C = pixels.shape
    gh, gw = H // patch, W // patch
    x = pixels.reshape(gh, patch, gw, patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch * patch * C)


class ViT(Module):
    def __init__(self, config: BranchConfig, seed: int):
        rng = rng_for(seed, "init", "branch", config.name)
        self.config = config
        self.patch_embed = Linear(rng, config.patch_dim, config.dim)
        self.pos = init_normal(rng, (config.grid**2, config.dim), 0.02)
        self.blocks = [Block(rng, config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        self.ln_f = LayerNorm(config.dim)

    def embed_tile(self, tile: Image) -> Tensor:
        T = self.config.tile
        if tile.size != (T, T):
            raise DimensionError(f"tile must be {T}x{T}, got {tile.width}x{tile.height}")
        patches = tt.constant(patchify(tile.pixels, self.config.patch), op="patchify")
        return tt.add(self.patch_embed(patches), self.pos)

    def run_blocks(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def encode_tile(self, tile: Image) -> Tensor:
        return self.run_blocks(self.embed_tile(tile))


def vit_encode_tile(tile: Image, branch: "VisionBranch") -> Tensor:
    return branch.vit.encode_tile(tile)


def pixel_shuffle(tokens: Tensor, g: int, s: int = 2) -> Tensor:
    """Merge each s×s neighbourhood of a g×g token grid into one token of width s²·d."""
    n, d = tokens.shape
    if n != g * g:
        raise DimensionError(f"pixel_shuffle: {n} tokens is not a {g}x{g} grid")
    if g % s:
        raise DimensionError(f"pixel_shuffle: grid {g} not divisible by factor {s}")
    m = g // s
    x = tt.reshape(tokens, (m, s, m, s, d))
    x = tt.transpose(x, (0, 2, 1, 3, 4))
    return tt.reshape(x, (m * m, s * s * d))


def pixel_unshuffle(tokens: Tensor, g: int, s: int = 2) -> Tensor:
    m = g // s
    d = tokens.shape[1] // (s * s)
    x = tt.reshape(tokens, (m, m, s, s, d))
    x = tt.transpose(x, (0, 2, 1, 3, 4))
    return tt.reshape(x, (g * g, d))


class Projector(Module):
    """Linear -> GELU -> Linear. The first layer is branch-owned, the second shared."""

    def __init__(self, adapter: Linear, shared: Linear):
        if adapter.n_out != shared.n_in:
            raise DimensionError(f"projector: adapter out {adapter.n_out} != shared in {shared.n_in}")
        self.adapter = adapter
        self.shared = shared

    @property
    def n_in(self) -> int:
        return self.adapter.n_in

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.n_in:
            raise DimensionError(f"project: token width {tokens.shape[-1]} != projector input {self.n_in}")
        return self.shared(tt.gelu(self.adapter(tokens)))


def project(tokens: Tensor, projector: Projector) -> Tensor:
    return projector(tokens)


class VisionBranch(Module):
    """A ViT plus its width adapter; ``shared`` is owned by the engine and not walked here."""

    def __init__(self, config: BranchConfig, d_lm: int, shuffle: int, shared: Linear, seed: int):
        self.vit = ViT(config, seed)
        rng = rng_for(seed, "init", "adapter", config.name)
        self.adapter = Linear(rng, shuffle * shuffle * config.dim, d_lm)
        self._shared = shared
        self.config = config
        self.shuffle = shuffle

    @property
    def projector(self) -> Projector:
        return Projector(self.adapter, self._shared)

    def set_shared(self, shared: Linear) -> None:
        self._shared = shared

    def tokens_per_tile(self) -> int:
        return (self.config.grid // self.shuffle) ** 2

    def encode_tile_tokens(self, tile: Image) -> Tensor:
        """ViT -> pixel shuffle -> projector for one tile."""
        feats = self.vit.encode_tile(tile)
        return self.projector(pixel_shuffle(feats, self.config.grid, self.shuffle))


def encode_tiles(grid: TileGrid, branch: VisionBranch, order: Sequence[int] | None = None) -> list[Tensor]:
    """Encode each tile independently; results are returned in tile row-major order."""
    order = range(grid.count) if order is None else order
    out: list[Tensor | None] = [None] * grid.count
    for idx in order:
        out[idx] = branch.encode_tile_tokens(grid.tiles[idx])
    return out


def image_token_count(grid: TileGrid, branch: VisionBranch) -> int:
    return grid.count * branch.tokens_per_tile()


def encode_image(img: Image, branch: VisionBranch, T: int, max_tiles: int) -> TokenSequence:
    if T != branch.config.tile:
        raise DimensionError(f"tile size {T} does not match branch tile {branch.config.tile}")
    grid = anyres_tile(img, T, max_tiles)
    parts = encode_tiles(grid, branch)
    tokens = parts[0] if len(parts) == 1 else tt.concat(parts, axis=0)
    return TokenSequence(tokens, [IMAGE] * tokens.shape[0])
