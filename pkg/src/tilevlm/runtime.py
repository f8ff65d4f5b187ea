"""Serial tile scheduler, activation accounting, FLOP counting and the bench harness.

Memory here is accounted, not measured: every tensor an op produces while the
ledger observes is a logical buffer of ``nbytes``. A tile runs inside a
workspace scope; leaving the scope frees everything allocated in it, so the
workspace peak of a serial encode is the peak of one tile. The token buffer
that collects tile outputs is tracked on a separate output account.
"""

from __future__ import annotations

import contextlib
import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .errors import BudgetError, ContractError, DimensionError, ParameterError
from .image import Image, anyres_tile
from .rng import rng_for
from .tensor import Tensor
from .vision import IMAGE, TokenSequence, VisionBranch, pixel_shuffle

ATTENTION_OPS = ("attn_scores", "attn_probs")
DEFAULT_ATTENTION_CAP = 256 * 2**20


class MemoryLedger:
    """Observer that books op outputs as workspace allocations.

    ``events`` is the full (op, ±bytes) log; every allocation gets a matching
    release by the time the owning scope or encode finishes.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.output_bytes = 0
        self.output_peak = 0
        self.events: list[tuple[str, int]] = []
        self.op_peak: dict[str, int] = {}
        self._scopes: list[list[tuple[str, int]]] = []

    def on_op(self, op: str, out: Tensor, flops: int) -> None:
        if not self._scopes:
            return
        n = int(out.data.nbytes)
        self._scopes[-1].append((op, n))
        self.events.append((op, n))
        self.live_bytes += n
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        self.op_peak[op] = max(self.op_peak.get(op, 0), n)

    @contextlib.contextmanager
    def workspace(self):
        """Everything allocated inside the block is released when it exits."""
        allocs: list[tuple[str, int]] = []
        self._scopes.append(allocs)
        try:
            with tt.observe(self):
                yield self
        finally:
            self._scopes.pop()
            for op, n in reversed(allocs):
                self.events.append((op, -n))
                self.live_bytes -= n

    def reserve_output(self, nbytes: int) -> None:
        self.events.append(("output", nbytes))
        self.output_bytes += nbytes
        self.output_peak = max(self.output_peak, self.output_bytes)

    def release_output(self) -> None:
        if self.output_bytes:
            self.events.append(("output", -self.output_bytes))
            self.output_bytes = 0

    @property
    def attention_peak_bytes(self) -> int:
        """Score plus probability buffers of the largest attention call."""
        return sum(self.op_peak.get(op, 0) for op in ATTENTION_OPS)

    def balanced(self) -> bool:
        return self.live_bytes == 0 and self.output_bytes == 0 and sum(d for _, d in self.events) == 0

    def replay_peak(self) -> int:
        """Workspace peak recomputed from the event log prefix sums."""
        live = peak = 0
        for op, d in self.events:
            if op == "output":
                continue
            live += d
            peak = max(peak, live)
        return peak


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def on_op(self, op: str, out: Tensor, flops: int) -> None:
        self.total += flops
        self.by_op[op] = self.by_op.get(op, 0) + flops


def _check_tile(branch: VisionBranch, T: int) -> None:
    if T != branch.config.tile:
        raise DimensionError(f"tile size {T} does not match branch tile {branch.config.tile}")


def serial_encode(img: Image, branch: VisionBranch, T: int, max_tiles: int,
                  ledger: MemoryLedger | None = None) -> TokenSequence:
    """Encode tiles one at a time into a preallocated token buffer.

    Same values as ``vision.encode_image``; tile outputs are copied into the
    buffer and the tile's workspace is dropped before the next tile starts.
    """
    _check_tile(branch, T)
    ledger = MemoryLedger() if ledger is None else ledger
    grid = anyres_tile(img, T, max_tiles)
    per_tile = branch.tokens_per_tile()
    width = branch.adapter.n_out
    buf = np.empty((grid.count * per_tile, width))
    ledger.reserve_output(buf.nbytes)
    with tt.no_grad():
        for i, tile in enumerate(grid.tiles):
            with ledger.workspace():
                out = branch.encode_tile_tokens(tile)
                buf[i * per_tile:(i + 1) * per_tile] = out.data
            del out
    ledger.release_output()
    return TokenSequence(Tensor(buf), [IMAGE] * buf.shape[0])


def global_attention_bytes(branch: VisionBranch, n_tokens: int) -> int:
    """Score and probability buffers of one full-attention layer over ``n_tokens``."""
    return 2 * branch.config.heads * n_tokens * n_tokens * np.dtype(np.float64).itemsize


def global_encode_reference(img: Image, branch: VisionBranch, T: int, max_tiles: int,
                            ledger: MemoryLedger | None = None,
                            attention_cap: int = DEFAULT_ATTENTION_CAP) -> TokenSequence:
    """One ViT pass with attention across every patch of every tile.

    Each tile keeps its tile-local position table (repeated per tile), so a
    one-tile image yields exactly the serial result. Pixel shuffle and the
    projector still act per tile on the tile's slice of the output.
    """
    _check_tile(branch, T)
    ledger = MemoryLedger() if ledger is None else ledger
    grid = anyres_tile(img, T, max_tiles)
    g2 = branch.config.grid**2
    n = grid.count * g2
    need = global_attention_bytes(branch, n)
    if need > attention_cap:
        raise BudgetError(f"global attention over {n} tokens needs {need} bytes, cap is {attention_cap}")
    vit = branch.vit
    with tt.no_grad(), ledger.workspace():
        embedded = [vit.embed_tile(tile) for tile in grid.tiles]
        x = embedded[0] if len(embedded) == 1 else tt.concat(embedded, axis=0)
        feats = vit.run_blocks(x)
        parts = []
        for i in range(grid.count):
            f = feats if grid.count == 1 else feats[i * g2:(i + 1) * g2]
            parts.append(branch.projector(pixel_shuffle(f, branch.config.grid, branch.shuffle)))
        tokens = parts[0] if len(parts) == 1 else tt.concat(parts, axis=0)
        out = tokens.data.copy()
    ledger.reserve_output(out.nbytes)
    ledger.release_output()
    return TokenSequence(Tensor(out), [IMAGE] * out.shape[0])


def kv_cache_bytes(decoder_config, n_tokens: int) -> int:
    """Keys plus values for every decoder layer, float64."""
    return 2 * decoder_config.depth * n_tokens * decoder_config.dim * np.dtype(np.float64).itemsize


# --------------------------------------------------------------------------
# bench


BENCH_FIELDS = (
    "mode", "width", "height", "tiles", "image_tokens", "flops", "workspace_peak_bytes",
    "attention_peak_bytes", "output_bytes", "kv_cache_bytes", "wall_ms", "status",
)
MODES = ("serial", "global")


@dataclass
class BenchRow:
    mode: str
    width: int
    height: int
    tiles: int
    image_tokens: int | None = None
    flops: int | None = None
    workspace_peak_bytes: int | None = None
    attention_peak_bytes: int | None = None
    output_bytes: int | None = None
    kv_cache_bytes: int | None = None
    wall_ms: float | None = None
    status: str = "ok"

    def values(self) -> list:
        out = []
        for name in BENCH_FIELDS:
            v = getattr(self, name)
            out.append("" if v is None else (f"{v:.3f}" if isinstance(v, float) else v))
        return out


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def select(self, mode: str) -> list[BenchRow]:
        return [r for r in self.rows if r.mode == mode]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for r in self.rows:
            w.writerow(r.values())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def parse_resolution(text: str) -> tuple[int, int]:
    """``"64"`` is 64x64; ``"96x64"`` is width 96, height 64."""
    t = text.strip().lower()
    try:
        if "x" in t:
            w, h = (int(p) for p in t.split("x"))
        else:
            w = h = int(t)
    except ValueError:
        raise ParameterError(f"bad resolution {text!r}; use N or WxH") from None
    if w < 1 or h < 1:
        raise ParameterError(f"resolution must be positive, got {text!r}")
    return w, h


def tiles_needed(w: int, h: int, T: int) -> int:
    return math.ceil(w / T) * math.ceil(h / T)


def bench_image(w: int, h: int, seed: int = 0) -> Image:
    return Image(rng_for(seed, "bench", w, h).random((h, w, 3)))


def _run_mode(mode: str, img: Image, branch: VisionBranch, T: int, max_tiles: int, attention_cap: int,
              timing: bool):
    ledger = MemoryLedger()
    counter = FlopCounter()
    start = time.perf_counter()
    with tt.observe(counter):
        if mode == "serial":
            seq = serial_encode(img, branch, T, max_tiles, ledger)
        else:
            seq = global_encode_reference(img, branch, T, max_tiles, ledger, attention_cap)
    wall = (time.perf_counter() - start) * 1e3 if timing else None
    return seq, ledger, counter, wall


def bench(resolutions: Sequence, modes: Iterable[str], branch: VisionBranch, decoder_config, T: int,
          max_tiles: int | None = None, attention_cap: int = DEFAULT_ATTENTION_CAP, seed: int = 0,
          timing: bool = False) -> BenchReport:
    """One row per (resolution, mode), sorted by pixel count.

    ``max_tiles=None`` gives each resolution enough tiles to avoid any
    downscaling. Global rows over the attention cap are kept with status
    ``over-budget`` and empty counters.
    """
    res = [parse_resolution(r) if isinstance(r, str) else tuple(r) for r in resolutions]
    if not res:
        raise ParameterError("bench needs at least one resolution")
    modes = list(modes)
    for m in modes:
        if m not in MODES:
            raise ParameterError(f"unknown bench mode {m!r}; expected one of {MODES}")
    res = sorted(set(res), key=lambda wh: (wh[0] * wh[1], wh[0], wh[1]))
    report = BenchReport()
    for w, h in res:
        img = bench_image(w, h, seed)
        mt = tiles_needed(w, h, T) if max_tiles is None else max_tiles
        for mode in (m for m in MODES if m in modes):
            tiles = anyres_tile(img, T, mt).count
            try:
                seq, ledger, counter, wall = _run_mode(mode, img, branch, T, mt, attention_cap, timing)
            except BudgetError:
                report.rows.append(BenchRow(mode, w, h, tiles, status="over-budget"))
                continue
            if not ledger.balanced():
                raise ContractError(f"ledger leak in {mode} encode at {w}x{h}")
            n_img = seq.tokens.shape[0]
            report.rows.append(BenchRow(
                mode, w, h, tiles, n_img, counter.total, ledger.peak_bytes, ledger.attention_peak_bytes,
                ledger.output_peak, kv_cache_bytes(decoder_config, n_img), wall,
            ))
    return report


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 if ss_tot == 0.0 else 1.0 - float((resid**2).sum()) / ss_tot
