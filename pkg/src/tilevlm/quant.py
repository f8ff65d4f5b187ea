"""W4A16: 4-bit group-wise affine weight quantization, full-precision activations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor

DEFAULT_GROUP = 32
QMAX = 15


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two codes per byte, low nibble first; odd lengths pad a zero nibble."""
    flat = codes.reshape(-1).astype(np.uint8)
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, int]
    group_size: int
    packed: np.ndarray  # uint8, two codes per byte
    scales: np.ndarray  # float64 [m, k // G]
    zeros: np.ndarray  # uint8 [m, k // G], each in [0, 15]

    def __post_init__(self):
        m, k = self.shape
        if k % self.group_size:
            raise DimensionError(f"k={k} not divisible by group size {self.group_size}")
        groups = (m, k // self.group_size)
        if self.scales.shape != groups or self.zeros.shape != groups:
            raise DimensionError(f"scales/zeros must be {groups}")
        if self.packed.size != (m * k + 1) // 2:
            raise DimensionError(f"packed payload has {self.packed.size} bytes, expected {(m * k + 1) // 2}")
        if self.zeros.size and self.zeros.max() > QMAX:
            raise ContractError("zero points must lie in [0, 15]")

    @property
    def codes(self) -> np.ndarray:
        m, k = self.shape
        return unpack_nibbles(self.packed, m * k).reshape(m, k)

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes + self.zeros.nbytes


def quantize(w, group_size: int = DEFAULT_GROUP) -> QuantizedTensor:
    """Affine min/max quantization per contiguous group of ``group_size`` along k.

    The group range is widened to contain 0 so the zero point always lands in
    [0, 15]; that is what keeps every element within scale/2 of its
    dequantized value. scale = (hi − lo)/15, zero = round(−lo/scale),
    code = clamp(round(w/scale) + zero, 0, 15). A constant group c uses
    scale |c| (1 when c is 0) and dequantizes to c exactly.
    """
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"quantize expects a matrix, got shape {w.shape}")
    if group_size < 1:
        raise ParameterError(f"group size must be >= 1, got {group_size}")
    m, k = w.shape
    if k % group_size:
        raise DimensionError(f"k={k} not divisible by group size {group_size}; pad the input first")
    g = w.reshape(m, k // group_size, group_size)
    gmin = g.min(axis=-1)
    gmax = g.max(axis=-1)
    lo = np.minimum(gmin, 0.0)
    hi = np.maximum(gmax, 0.0)
    flat = gmin == gmax
    scales = np.where(flat, np.abs(gmin), (hi - lo) / QMAX)
    scales = np.where(scales == 0.0, 1.0, scales)
    zeros = np.clip(np.round(-lo / scales), 0, QMAX)
    codes = np.clip(np.round(g / scales[..., None]) + zeros[..., None], 0, QMAX).astype(np.uint8)
    return QuantizedTensor((m, k), group_size, pack_nibbles(codes), scales, zeros.astype(np.uint8))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    m, k = q.shape
    G = q.group_size
    codes = q.codes.reshape(m, k // G, G).astype(np.float64)
    return ((codes - q.zeros[..., None]) * q.scales[..., None]).reshape(m, k)


def _dequantized_t(q: QuantizedTensor) -> np.ndarray:
    # contiguous like tensor.transpose, so the product takes the same BLAS path as the float layer
    return np.ascontiguousarray(dequantize(q).T)


def qmatmul(x, q: QuantizedTensor) -> Tensor:
    """x [n, k] times dequantize(q)ᵀ; numerically the same product as the float path."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.shape[-1] != q.shape[1]:
        raise DimensionError(f"qmatmul: activations {xd.shape} vs weights {q.shape}")
    out = xd @ _dequantized_t(q)
    rows = int(np.prod(xd.shape[:-1]))
    return tt._result(out, "qmatmul", (), None, 2 * rows * q.shape[0] * q.shape[1])


def qlinear(x: Tensor, q: QuantizedTensor, bias: Tensor | None) -> Tensor:
    """Inference-only linear layer over a quantized weight."""
    if tt.grad_enabled() and x.requires_grad:
        raise ContractError("quantized layers are inference-only; run under no_grad")
    xd = x.data
    out = xd @ _dequantized_t(q)
    if bias is not None:
        out = out + bias.data
    rows = int(np.prod(xd.shape[:-1]))
    return tt._result(out, "linear", (), None, 2 * rows * q.shape[0] * q.shape[1] + rows * q.shape[0])


def quantizable(name: str, value) -> bool:
    """Linear weights only; norms, biases, embeddings and positions stay in float."""
    return isinstance(value, Tensor) and value.ndim == 2 and name.endswith(".weight")


def quantize_module(module, group_size: int = DEFAULT_GROUP) -> list[str]:
    """Swap every linear weight of ``module`` for its quantized form in place."""
    from .nn import _assign

    done = []
    for name, value in list(module.named_parameters()):
        if quantizable(name, value) and value.shape[1] % group_size == 0:
            _assign(module, name, quantize(value, group_size))
            done.append(name)
    return done
