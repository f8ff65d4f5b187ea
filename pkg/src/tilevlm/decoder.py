"""Byte-level causal decoder with an append-only KV cache."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, init_normal
from .rng import rng_for
from .tensor import Tensor
from .vision import Block, TokenSequence, merge_heads, split_heads


class Vocab:
    """Bytes 0..255 plus BOS, EOS and IMG."""

    BOS = 256
    EOS = 257
    IMG = 258
    size = 259

    @staticmethod
    def encode(text: str) -> list[int]:
        return list(text.encode("utf-8"))

    @classmethod
    def decode(cls, ids) -> str:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i == cls.EOS:
                break
            if 0 <= i < 256:
                out.append(i)
        return out.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    vocab: int = Vocab.size
    max_len: int = 512
    mlp_ratio: int = 4


class KVCache:
    """Per-layer keys/values stored [heads, t, d_head]; grows by appending only."""

    def __init__(self, depth: int):
        self.keys: list[np.ndarray | None] = [None] * depth
        self.values: list[np.ndarray | None] = [None] * depth
        self.length = 0

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=1)
        return self.keys[layer], self.values[layer]

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys + self.values if a is not None)


def causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


class Decoder(Module):
    def __init__(self, config: DecoderConfig, seed: int):
        rng = rng_for(seed, "init", "decoder")
        self.config = config
        self.tok_emb = init_normal(rng, (config.vocab, config.dim), 0.5)
        self.pos = init_normal(rng, (config.max_len, config.dim), 0.02)
        self.blocks = [Block(rng, config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        self.ln_f = LayerNorm(config.dim)
        self.head = Linear(rng, config.dim, config.vocab)

    def embed_text(self, ids) -> Tensor:
        return tt.embedding(self.tok_emb, ids)

    def forward(self, seq: TokenSequence) -> Tensor:
        """Parallel causal forward: logits [n, V]."""
        n, d = seq.tokens.shape
        if d != self.config.dim:
            raise DimensionError(f"decoder width {self.config.dim} != token width {d}")
        if n > self.config.max_len:
            raise ContractError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = tt.add(seq.tokens, self.pos[:n])
        mask = causal_mask(n)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x))

    def decode_step(self, embedding: Tensor, cache: KVCache) -> Tensor:
        """One position of causal attention over the cache; extends the cache by one."""
        if embedding.shape != (1, self.config.dim):
            raise DimensionError(f"decode_step expects [1, {self.config.dim}], got {embedding.shape}")
        t = cache.length
        if t >= self.config.max_len:
            raise ContractError(f"cache full at max_len {self.config.max_len}")
        d = self.config.dim
        x = tt.add(embedding, self.pos[t:t + 1])
        for i, block in enumerate(self.blocks):
            fused = block.qkv(block.ln1(x))
            q = split_heads(fused[:, :d], block.heads)
            k_new = split_heads(fused[:, d:2 * d], block.heads)
            v_new = split_heads(fused[:, 2 * d:], block.heads)
            keys, values = cache.append(i, k_new.data, v_new.data)
            scores = tt.attention_scores(q, tt.constant(keys), (d // block.heads) ** -0.5)
            probs = tt.softmax(scores, axis=-1, op="attn_probs")
            x = x + block.proj(merge_heads(tt.matmul(probs, tt.constant(values))))
            x = x + block.fc2(tt.gelu(block.fc1(block.ln2(x))))
        cache.length = t + 1
        return self.head(self.ln_f(x))

    def new_cache(self) -> KVCache:
        return KVCache(self.config.depth)

    def sequence_loss(self, seq: TokenSequence, targets, answer_mask) -> Tensor:
        answer_mask = np.asarray(answer_mask, dtype=bool)
        if answer_mask.shape != (len(seq),):
            raise DimensionError(f"mask length {answer_mask.shape} != sequence length {len(seq)}")
        if np.any(answer_mask & ~seq.text_mask()):
            raise ContractError("loss mask may only select text positions")
        return masked_cross_entropy(self.forward(seq), targets, answer_mask)


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ContractError("loss mask selects no positions; the mean is undefined")
    logp = tt.log_softmax(logits[idx])
    return tt.neg(tt.mean(tt.pick(logp, targets[idx])))
