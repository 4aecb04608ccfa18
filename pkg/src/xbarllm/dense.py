"""High-capacity weight store built from multi-level memristor cells.

A bank is organised like a memory array: one column is enabled at a time
(1-bit DAC per column), every row is sensed by a low-resolution ADC, and each
cell stores ``bits_per_cell`` bits. Signed weights are stored as two's
complement split into cells, most significant cell first.

Read noise uses a fixed geometry: levels are spaced 1 apart, the sensed value
is the nearest level, and a read is perturbed by additive truncated-Gaussian
noise whose bound is ``noise_amp`` times the mean signal level (half of the
full-scale window of ``2**bits_per_cell - 1`` spacings). Decoding is exact
whenever that bound stays below half a spacing, so 2-bit cells survive
amplitudes below 1/3 and 1-bit cells below 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .decomposer import MultiplyKind, Program, dense_weights, rhs_matrix
from .errors import CapacityError, LayoutError, SchemaError
from .modelir import QuantTensor, WeightSet, quantize

DEFAULT_READ_NOISE = 0.05


@dataclass(frozen=True)
class DenseConfig:
    rows: int = 1024
    cols: int = 65536
    bits_per_cell: int = 2
    n_banks: int = 1
    weight_bits: int = 8

    def __post_init__(self):
        for name in ("rows", "cols", "bits_per_cell", "n_banks", "weight_bits"):
            if getattr(self, name) < 1:
                raise SchemaError(f"dense.{name} must be >= 1", field=f"dense.{name}")

    @property
    def capacity_bits(self) -> int:
        return self.rows * self.cols * self.bits_per_cell

    @property
    def cells_per_weight(self) -> int:
        return math.ceil(self.weight_bits / self.bits_per_cell)


class DenseBank:
    """One rows x cols bank. Columns are allocated lazily; unwritten cells read as 0."""

    def __init__(self, rows: int = 1024, cols: int = 65536, bits_per_cell: int = 2):
        self.rows, self.cols, self.bits_per_cell = rows, cols, bits_per_cell
        self._columns: dict[int, np.ndarray] = {}

    @property
    def capacity_bits(self) -> int:
        return self.rows * self.cols * self.bits_per_cell

    @property
    def levels(self) -> int:
        return 2 ** self.bits_per_cell

    def column(self, col: int) -> np.ndarray:
        if not 0 <= col < self.cols:
            raise LayoutError(f"column {col} outside bank of {self.cols} columns")
        c = self._columns.get(col)
        return c.astype(np.int64) if c is not None else np.zeros(self.rows, dtype=np.int64)

    def write(self, col: int, row: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.int64)
        if values.size and (values.min() < 0 or values.max() >= self.levels):
            raise SchemaError(f"cell values must lie in [0, {self.levels - 1}]")
        if row + values.size > self.rows:
            raise LayoutError(f"write of {values.size} cells at row {row} overruns column")
        buf = self._columns.setdefault(col, np.zeros(self.rows, dtype=np.uint8))
        buf[row:row + values.size] = values

    def used_columns(self) -> int:
        return len(self._columns)


def read_noise(rng: np.random.Generator, size, noise_amp: float, levels: int) -> np.ndarray:
    """Additive sensing noise in level-spacing units, truncated at 3 sigma."""
    bound = noise_amp * (levels - 1) / 2
    if bound <= 0:
        return np.zeros(size)
    return truncnorm.rvs(-3.0, 3.0, scale=bound / 3.0, size=size, random_state=rng)


def read_column(bank: DenseBank, column: int, rng: np.random.Generator | None = None,
                noise_amp: float = 0.0) -> np.ndarray:
    """Sense one column: analog level plus noise, then nearest-level decision."""
    stored = bank.column(column)
    if noise_amp <= 0 or rng is None:
        return stored
    analog = stored + read_noise(rng, stored.shape, noise_amp, bank.levels)
    return np.clip(np.rint(analog), 0, bank.levels - 1).astype(np.int64)


# -- weight <-> cells ---------------------------------------------------------------

def weights_to_cells(q: np.ndarray, weight_bits: int, bits_per_cell: int) -> np.ndarray:
    """Signed ints of shape (k,) -> cell values of shape (k * cells_per_weight,)."""
    n_cells = math.ceil(weight_bits / bits_per_cell)
    u = np.asarray(q, dtype=np.int64) & ((1 << weight_bits) - 1)
    mask = (1 << bits_per_cell) - 1
    shifts = bits_per_cell * np.arange(n_cells - 1, -1, -1)
    return ((u[:, None] >> shifts[None, :]) & mask).reshape(-1)


def cells_to_weights(cells: np.ndarray, weight_bits: int, bits_per_cell: int) -> np.ndarray:
    n_cells = math.ceil(weight_bits / bits_per_cell)
    c = np.asarray(cells, dtype=np.int64).reshape(-1, n_cells)
    shifts = bits_per_cell * np.arange(n_cells - 1, -1, -1)
    u = np.sum(c << shifts[None, :], axis=1) & ((1 << weight_bits) - 1)
    sign = 1 << (weight_bits - 1)
    return np.where(u & sign, u - (1 << weight_bits), u)


# -- layout ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    bank: int
    col: int
    row: int
    n_cells: int
    n_weights: int

    def spans(self, rows: int) -> list[tuple[int, int, int]]:
        """(column, first row, cell count) pieces, in storage order."""
        out, col, row, left = [], self.col, self.row, self.n_cells
        while left > 0:
            take = min(left, rows - row)
            out.append((col, row, take))
            left -= take
            col, row = col + 1, 0
        return out


@dataclass
class WeightLayout:
    config: DenseConfig
    placements: dict[tuple[int, int], Placement] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)
    banks_used: int = 0

    @property
    def bits_per_weight(self) -> int:
        return self.config.weight_bits

    @property
    def mapped_weights(self) -> int:
        return sum(p.n_weights for p in self.placements.values())

    @property
    def mapped_bits(self) -> int:
        return self.mapped_weights * self.config.weight_bits

    @property
    def utilization(self) -> float:
        cap = self.config.capacity_bits * self.config.n_banks
        return self.mapped_bits / cap

    def placement(self, subop_id: int, t: int) -> Placement:
        try:
            return self.placements[(subop_id, t)]
        except KeyError:
            raise LayoutError(f"no weight column mapped for sub-op {subop_id}, session {t}",
                              subop=subop_id, session=t) from None

    def to_dict(self) -> dict:
        rows = self.config.rows
        entries = []
        for (sid, t), p in sorted(self.placements.items()):
            entries.append({"subop": sid, "session": t, "bank": p.bank,
                            "columns": [p.col, p.spans(rows)[-1][0]],
                            "rows": [p.row, (p.row + p.n_cells - 1) % rows],
                            "cells": p.n_cells, "weights": p.n_weights})
        return {"bits_per_weight": self.config.weight_bits,
                "bits_per_cell": self.config.bits_per_cell,
                "bank_geometry": [self.config.rows, self.config.cols],
                "entries": entries,
                "summary": {"mapped_weights": self.mapped_weights, "mapped_bits": self.mapped_bits,
                            "banks_configured": self.config.n_banks, "banks_used": self.banks_used,
                            "capacity_bits": self.config.capacity_bits * self.config.n_banks,
                            "utilization": self.utilization}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Cursor:
    def __init__(self, cfg: DenseConfig):
        self.cfg, self.bank, self.col, self.row = cfg, 0, 0, 0

    def _next_column(self):
        self.col, self.row = self.col + 1, 0

    def place(self, n_cells: int) -> tuple[int, int, int]:
        rows, cols = self.cfg.rows, self.cfg.cols
        if n_cells <= rows:
            if self.row + n_cells > rows:
                self._next_column()
            need_cols = 1
        else:
            if self.row:
                self._next_column()
            need_cols = math.ceil(n_cells / rows)
        if need_cols > cols:
            raise LayoutError(f"weight column of {n_cells} cells exceeds one bank")
        if self.col + need_cols > cols:
            self.bank, self.col, self.row = self.bank + 1, 0, 0
        if self.bank >= self.cfg.n_banks:
            raise CapacityError("dense crossbar capacity exceeded")
        at = (self.bank, self.col, self.row)
        end = self.row + n_cells
        self.col += (end - 1) // rows if end else 0
        self.row = end - ((end - 1) // rows) * rows if end else 0
        if self.row == rows:
            self._next_column()
        return at


class DenseCrossbar:
    """Banks plus the layout of every weight-stationary session's weight column."""

    def __init__(self, config: DenseConfig | None = None):
        self.config = config or DenseConfig()
        self.banks = [DenseBank(self.config.rows, self.config.cols, self.config.bits_per_cell)
                      for _ in range(self.config.n_banks)]
        self.layout = WeightLayout(self.config)
        self.quantized: dict[int, QuantTensor] = {}

    def session_weights(self, subop_id: int, t: int, rng: np.random.Generator | None = None,
                        noise_amp: float = 0.0) -> np.ndarray:
        """Read back the integer weight column of one session (one column fetch per span)."""
        p = self.layout.placement(subop_id, t)
        bank = self.banks[p.bank]
        cells = [read_column(bank, col, rng, noise_amp)[row:row + n]
                 for col, row, n in p.spans(self.config.rows)]
        cells = np.concatenate(cells) if cells else np.zeros(0, dtype=np.int64)
        return cells_to_weights(cells, self.config.weight_bits, self.config.bits_per_cell)


def store_weights(program: Program, weights: WeightSet, config: DenseConfig | None = None) -> DenseCrossbar:
    """Quantize each weight-stationary operand and pack its session columns column-major."""
    dense = DenseCrossbar(config)
    cfg = dense.config
    wmats = dense_weights(weights)
    ws_ops = [op for op in program.subops if op.multiply_kind is MultiplyKind.WS]

    required = 0
    operands = []
    for op in ws_ops:
        y = rhs_matrix(op, {}, wmats, k=0)
        operands.append((op, y))
        required += y.size * cfg.weight_bits
    available = cfg.capacity_bits * cfg.n_banks
    if required > available:
        raise CapacityError(f"weights need {required} bits but the dense crossbar holds {available}",
                            required_bits=required, available_bits=available)

    cursor = _Cursor(cfg)
    try:
        for op, y in operands:
            q = quantize(y, cfg.weight_bits)
            dense.quantized[op.id] = q
            dense.layout.scales[op.id] = q.scale
            for j, t in enumerate(op.sessions()):
                cells = weights_to_cells(q.data[:, j], cfg.weight_bits, cfg.bits_per_cell)
                bank, col, row = cursor.place(cells.size)
                p = Placement(bank, col, row, int(cells.size), int(q.data.shape[0]))
                dense.layout.placements[(op.id, t)] = p
                offset = 0
                for c, r, n in p.spans(cfg.rows):
                    dense.banks[bank].write(c, r, cells[offset:offset + n])
                    offset += n
    except CapacityError as exc:
        raise CapacityError(f"{exc}: weights need {required} bits (with column packing more) "
                            f"but {available} are available",
                            required_bits=required, available_bits=available) from None
    dense.layout.banks_used = (max(p.bank for p in dense.layout.placements.values()) + 1
                               if dense.layout.placements else 0)
    return dense


def stream_weight_column(layout: WeightLayout, subop_id: int, t: int, bandwidth_bps: float) -> tuple[float, int]:
    """Latency (s) and bit count of moving one session's weights to the computation crossbar."""
    if not bandwidth_bps > 0:
        raise SchemaError("weight bandwidth must be > 0")
    p = layout.placement(subop_id, t)
    bits = p.n_weights * layout.bits_per_weight
    return bits / bandwidth_bps, bits


def banks_needed(n_params: int, config: DenseConfig | None = None) -> int:
    cfg = config or DenseConfig()
    return math.ceil(n_params * cfg.weight_bits / cfg.capacity_bits)
