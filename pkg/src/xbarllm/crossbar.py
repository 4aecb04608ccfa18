"""Digit-serial computation crossbar.

Weights drive the rows, activations (encoded into balanced digits) switch
fixed resistors on or off, and each column read yields sum_i w_i * digit_i for
one digit position. Column reads pass through multiplicative analog noise and
the ADC, then a shift-and-add unit folds them most-significant digit first:
acc <- (acc << (S+1)) - acc + code, i.e. acc * base + code.

A contraction longer than ``rows // S`` inputs is split across tiles; each
tile is an independent column read and the tile partial sums are added
digitally.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .decomposer import (AdditionalFn, FnKind, MultiplyKind, NormEpilogue, Program, SubOp,
                         dense_weights, run_epilogue, run_subop_with)
from .cache import CacheConfig
from .dense import DEFAULT_READ_NOISE, DenseConfig, DenseCrossbar, store_weights
from .encoding import DigitCode, EncodingScheme, encode_array
from .errors import DataError, EncodingError, NumericError, SchemaError
from .modelir import WeightSet, quantize

EVENT_KINDS = ("compute_steps", "column_reads", "adc_conversions", "dac_conversions",
               "resistor_on", "shift_add", "sample_hold", "register_bit_writes", "encoder",
               "f_unit", "cache_read_bits", "cache_write_bits", "dense_read_bits",
               "dense_column_reads", "dense_cell_reads")


@dataclass(frozen=True)
class CrossbarConfig:
    rows: int = 128
    cols: int = 128
    dup_factor: int = 1
    scheme: EncodingScheme = field(default_factory=EncodingScheme)
    adc_bits: int | None = 8
    dac_bits: int = 8
    noise_fraction: float = 0.05
    rng_seed: int = 0
    weight_bits: int = 8
    adc_range: str = "calibrated"
    dense_noise: float = DEFAULT_READ_NOISE
    cache_bits: int = 8

    def __post_init__(self):
        if self.dup_factor < 1 or self.dup_factor > self.cols:
            raise SchemaError(f"dup_factor must be in [1, cols={self.cols}], got {self.dup_factor}",
                              field="crossbar.dup_factor")
        if self.rows < self.scheme.scale_factor:
            raise SchemaError("crossbar needs at least S rows per activation", field="crossbar.rows")
        if not 0 <= self.noise_fraction < 1:
            raise SchemaError(f"noise_fraction must be in [0, 1), got {self.noise_fraction}",
                              field="crossbar.noise_fraction")
        if self.adc_range not in ("calibrated", "worst_case"):
            raise SchemaError(f"adc_range must be 'calibrated' or 'worst_case', got {self.adc_range!r}",
                              field="crossbar.adc_range")
        if self.adc_bits is not None and self.adc_bits < 2:
            raise SchemaError("adc_bits must be >= 2 or unset", field="crossbar.adc_bits")

    @property
    def inputs_per_tile(self) -> int:
        return self.rows // self.scheme.scale_factor

    def steps_per_session(self, n_rows: int) -> int:
        return self.scheme.n_digits * math.ceil(n_rows / self.dup_factor)


@dataclass
class SessionTrace:
    session_index: int
    weights_loaded: int
    steps_executed: int
    outputs: np.ndarray
    energy_events: dict[str, int]


# -- noise and ADC ------------------------------------------------------------------

def noise_samples(rng: np.random.Generator, size, noise_fraction: float) -> np.ndarray:
    """Relative perturbations, Normal(0, nf/3) truncated to +-nf."""
    if noise_fraction <= 0:
        return np.zeros(size)
    return truncnorm.rvs(-3.0, 3.0, scale=noise_fraction / 3.0, size=size, random_state=rng)


def _adc(analog: np.ndarray, full_scale: np.ndarray | float, adc_bits: int | None):
    """Return (integer codes, lsb). Unset ``adc_bits`` means a 1-unit LSB with no saturation."""
    if adc_bits is None:
        return np.rint(analog).astype(np.int64), np.ones_like(np.asarray(full_scale, dtype=float))
    qmax = 2 ** (adc_bits - 1) - 1
    fs = np.asarray(full_scale, dtype=np.float64)
    lsb = np.where(fs > 0, fs / qmax, 1.0)
    codes = np.clip(np.rint(analog / lsb), -qmax, qmax).astype(np.int64)
    return codes, lsb


def apply_noise_and_adc(analog_sum, cfg: CrossbarConfig, rng: np.random.Generator | None = None,
                        full_scale=None):
    """Perturb a column sum by the truncated multiplicative noise, then digitise it.

    ``full_scale`` sets the ADC range when ``cfg.adc_bits`` is set (defaults to
    the noiseless magnitude plus the noise headroom). Returns the sensed value
    in sum units.
    """
    a = np.asarray(analog_sum, dtype=np.float64)
    if rng is not None and cfg.noise_fraction > 0:
        a = a * (1.0 + noise_samples(rng, a.shape, cfg.noise_fraction))
    fs = (np.abs(np.asarray(analog_sum, dtype=np.float64)) * (1.0 + cfg.noise_fraction)
          if full_scale is None else full_scale)
    codes, lsb = _adc(a, fs, cfg.adc_bits)
    out = codes * lsb if cfg.adc_bits is not None else codes
    return out if out.ndim else out.item()


# -- MAC ----------------------------------------------------------------------------

def _as_digits(activation_codes, scheme: EncodingScheme) -> np.ndarray:
    if isinstance(activation_codes, np.ndarray):
        d = activation_codes.astype(np.int64)
    else:
        rows = []
        for row in activation_codes:
            codes = [row] if isinstance(row, DigitCode) else list(row)
            rows.append([list(c) for c in codes])
        d = np.asarray(rows, dtype=np.int64)
    if d.ndim != 3 or d.shape[-1] != scheme.n_digits:
        raise EncodingError(f"activation codes must have {scheme.n_digits} digits for base {scheme.base}")
    if d.size and int(np.abs(d).max()) > scheme.digit_bound:
        raise EncodingError(f"digit outside +-{scheme.digit_bound}")
    return d


def digit_serial(digits: np.ndarray, w: np.ndarray, cfg: CrossbarConfig,
                 eps: np.ndarray | None = None, record: list | None = None) -> np.ndarray:
    """Core MAC. ``digits`` is (R, K, n_digits), ``w`` is (K, T) signed ints.

    ``eps`` holds one relative noise sample per column read, shape
    (T, tiles, n_digits, R). Returns (R, T): exact int64 sums when the ADC is
    unbounded, otherwise float sums in the same units.
    """
    R, K, nd = digits.shape
    S = cfg.scheme.scale_factor
    tile = cfg.inputs_per_tile
    n_tiles = max(1, math.ceil(K / tile))
    exact = cfg.adc_bits is None
    total = np.zeros((R, w.shape[1]), dtype=np.int64 if exact else np.float64)
    for ti in range(n_tiles):
        sl = slice(ti * tile, (ti + 1) * tile)
        wt = w[sl]
        acc = np.zeros_like(total)
        for k in range(nd):
            clean = digits[:, sl, k] @ wt  # (R, T), exact ints
            analog = clean if eps is None else clean * (1.0 + eps[:, ti, k, :].T)
            codes, lsb = _adc(analog, _full_scale(clean, wt, cfg), cfg.adc_bits)
            if exact:
                acc = (acc << (S + 1)) - acc + codes  # acc * base + code
            else:
                acc = acc * cfg.scheme.base + codes * lsb
            if record is not None:
                record.append(acc.copy())
        total += acc
    return total


def _full_scale(clean: np.ndarray, wt: np.ndarray, cfg: CrossbarConfig) -> np.ndarray:
    """ADC range per output column for one digit step of one tile."""
    if cfg.adc_range == "worst_case":
        return (cfg.scheme.digit_bound * np.abs(wt).sum(axis=0))[None, :]
    # ranged to the largest noiseless sum in this read group, with noise headroom
    return np.abs(clean).max(axis=0, keepdims=True) * (1.0 + cfg.noise_fraction)


def mac_digit_serial(weights, activation_codes, cfg: CrossbarConfig,
                     rng: np.random.Generator | None = None, record: list | None = None) -> np.ndarray:
    """Accumulated integer per activation row.

    ``activation_codes`` holds, per row, one DigitCode per weight (or a bare
    DigitCode for a single weight), or an (R, K, n_digits) digit array.
    """
    w = np.asarray(weights, dtype=np.int64).reshape(-1, 1)
    digits = _as_digits(activation_codes, cfg.scheme)
    if digits.shape[1] != w.shape[0]:
        raise EncodingError(f"{digits.shape[1]} activations per row but {w.shape[0]} weights")
    eps = None
    if rng is not None and cfg.noise_fraction > 0:
        n_tiles = max(1, math.ceil(w.shape[0] / cfg.inputs_per_tile))
        eps = noise_samples(rng, (1, n_tiles, cfg.scheme.n_digits, digits.shape[0]), cfg.noise_fraction)
    return digit_serial(digits, w, cfg, eps, record)[:, 0]


def apply_additional_fn(fn: AdditionalFn, col, context: dict | None = None) -> np.ndarray:
    """F epilogue on one output column; ``context`` supplies d_k, m, row_scalar, residual."""
    context = context or {}
    col = np.asarray(col, dtype=np.float64)
    z = col.reshape(-1, 1)
    kw = {"d_k": context.get("d_k", 1), "m": context.get("m", 1)}
    if fn.kind is FnKind.DIVIDE_ROW:
        if context.get("row_scalar") is None:
            raise SchemaError("DivideByRowScalar needs the a-register (row_scalar)")
        kw["row_scalar"] = context["row_scalar"]
    if fn.kind is FnKind.ADD_RESIDUAL:
        if context.get("residual") is None:
            raise SchemaError("AddResidualColumn needs the residual column")
        kw["residual"] = np.asarray(context["residual"], dtype=np.float64).reshape(-1, 1)
    return fn.apply(z, **kw).reshape(col.shape)


# -- sub-op execution -----------------------------------------------------------------

def _session_rng(seed: int, op_id: int, t: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2 ** 64 - 1), op_id, t, stream]))


def _popcount_digits(digits: np.ndarray) -> int:
    a = np.abs(digits)
    count = np.zeros_like(a)
    while np.any(a):
        count += a & 1
        a >>= 1
    return int(count.sum())


class CrossbarEngine:
    """Linear stage of every sub-op, executed on the computation crossbar.

    ``mode="direct"`` computes the same quantized products with an integer
    matmul instead (no digits, no noise, no ADC); it is the reference the
    digit-serial path must match bit-for-bit when noise is off and the ADC is
    unbounded.
    """

    def __init__(self, cfg: CrossbarConfig, dense: DenseCrossbar, mode: str = "crossbar",
                 keep_sessions: bool = False):
        if mode not in ("crossbar", "direct"):
            raise SchemaError(f"unknown engine mode {mode!r}")
        self.cfg, self.dense, self.mode = cfg, dense, mode
        self.keep_sessions = keep_sessions
        self.traces: dict[int, list[SessionTrace]] = {}
        self.summaries: list[dict] = []

    def _weights(self, op: SubOp, rhs: np.ndarray) -> tuple[np.ndarray, float]:
        if op.multiply_kind is MultiplyKind.WS:
            q = self.dense.quantized[op.id]
            if self.mode == "direct":
                return q.data, q.scale
            cols = []
            for t in op.sessions():
                rng = _session_rng(self.cfg.rng_seed, op.id, t, 1)
                cols.append(self.dense.session_weights(op.id, t, rng, self.cfg.dense_noise))
            return np.stack(cols, axis=1), q.scale
        q = quantize(rhs, self.cfg.weight_bits)
        return q.data, q.scale

    def _eps(self, op: SubOp, n_rows: int, n_tiles: int, sessions) -> np.ndarray | None:
        if self.mode == "direct" or self.cfg.noise_fraction <= 0:
            return None
        nd = self.cfg.scheme.n_digits
        return np.stack([noise_samples(_session_rng(self.cfg.rng_seed, op.id, t, 0),
                                       (n_tiles, nd, n_rows), self.cfg.noise_fraction)
                         for t in sessions])

    def __call__(self, op: SubOp, lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        qx = quantize(lhs, cfg.scheme.bits)
        w, w_scale = self._weights(op, rhs)
        K = lhs.shape[1]
        n_tiles = max(1, math.ceil(K / cfg.inputs_per_tile))
        sessions = list(op.sessions())
        if op.lhs.row_wise:
            lo, hi = op.session_range
            rows = qx.data[lo - 1:hi]  # session j uses row j
            acc = np.empty((1, len(sessions)), dtype=np.float64)
            digits_all = encode_array(rows, cfg.scheme)
            for j, t in enumerate(sessions):
                d = digits_all[j:j + 1]
                if self.mode == "direct":
                    acc[0, j] = rows[j] @ w[:, j]
                else:
                    eps = self._eps(op, 1, n_tiles, [t])
                    acc[0, j] = digit_serial(d, w[:, j:j + 1], cfg, eps)[0, 0]
            n_rows_session = 1
        else:
            digits_all = encode_array(qx.data, cfg.scheme)
            if self.mode == "direct":
                acc = qx.data @ w
            else:
                acc = digit_serial(digits_all, w, cfg, self._eps(op, lhs.shape[0], n_tiles, sessions))
            n_rows_session = lhs.shape[0]
        z = acc * (qx.scale * w_scale)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"sub-op {op.id} produced non-finite values")
        self._record(op, z, digits_all, K, n_tiles, n_rows_session, sessions)
        return z

    def _record(self, op, z, digits, K, n_tiles, n_rows, sessions):
        cfg = self.cfg
        S, nd = cfg.scheme.scale_factor, cfg.scheme.n_digits
        steps = cfg.steps_per_session(n_rows)
        reads = nd * n_rows * n_tiles
        ws = op.multiply_kind is MultiplyKind.WS
        per_session = {
            "compute_steps": steps,
            "column_reads": reads,
            "adc_conversions": reads,
            "dac_conversions": steps * K * S,
            "shift_add": reads,
            "sample_hold": reads,
            "register_bit_writes": nd * n_rows * K * (S + 1),
            "encoder": n_rows * K,
            "f_unit": n_rows if op.fn.kind is not FnKind.NONE else 0,
            "cache_read_bits": (n_rows * K + (0 if ws or op.rhs.source == "ones" else K)) * cfg.cache_bits,
            "cache_write_bits": n_rows * cfg.cache_bits,
            "dense_read_bits": K * cfg.weight_bits if ws else 0,
            "dense_column_reads": 0,
            "dense_cell_reads": 0,
        }
        totals = {k: v * len(sessions) for k, v in per_session.items()}
        if ws:
            rows = self.dense.config.rows
            spans = [len(self.dense.layout.placement(op.id, t).spans(rows)) for t in sessions]
            cells = [self.dense.layout.placement(op.id, t).n_cells for t in sessions]
            totals["dense_column_reads"] = sum(spans)
            totals["dense_cell_reads"] = sum(spans) * rows  # every row is sensed per column fetch
        if op.lhs.row_wise:
            totals["resistor_on"] = _popcount_digits(digits)
        else:
            totals["resistor_on"] = _popcount_digits(digits) * len(sessions)
        summary = {"id": op.id, "template": op.template, "block": op.block, "head": op.head,
                   "multiply_kind": op.multiply_kind.value, "sessions": len(sessions),
                   "rows": n_rows, "k": K, "tiles": n_tiles, "n_digits": nd,
                   "dup_factor": cfg.dup_factor, "steps": totals["compute_steps"],
                   "weight_bits_streamed": totals["dense_read_bits"],
                   "activation_bits_read": totals["cache_read_bits"], "events": totals}
        self.summaries.append(summary)
        if self.keep_sessions:
            self.traces[op.id] = [
                SessionTrace(t, K, steps, z[:, j].copy(),
                             dict(per_session, resistor_on=totals["resistor_on"] // len(sessions)))
                for j, t in enumerate(sessions)]


def run_subop(op: SubOp, store: dict, cfg: CrossbarConfig, dense: DenseCrossbar | None, spec,
              weights: WeightSet | None = None,
              mode: str = "crossbar") -> tuple[list[SessionTrace], np.ndarray]:
    """Execute one sub-op against ``store`` (the caches) and write its destination."""
    engine = CrossbarEngine(cfg, dense, mode=mode, keep_sessions=True)
    wmats = dense_weights(weights) if weights is not None else {}
    out = run_subop_with(op, store, wmats, spec, engine)
    return engine.traces[op.id], out


@dataclass
class SimulationResult:
    output: np.ndarray
    store: dict
    subops: list[dict]
    dense: DenseCrossbar
    config: CrossbarConfig
    program: Program
    epilogue_ops: int = 0

    def trace_dict(self, cache=None) -> dict:
        """Everything the cost model needs, as plain JSON-able values."""
        cache = cache or CacheConfig.for_spec(self.program.spec, c_k=min(64, self.program.spec.head_width))
        layout = self.dense.layout.to_dict()["summary"]
        layout.update(bank_geometry=[self.dense.config.rows, self.dense.config.cols],
                      bits_per_cell=self.dense.config.bits_per_cell)
        return {"layer": self.program.spec.to_dict(), "crossbar": config_dict(self.config),
                "dense": layout, "cache": {"total_bits": cache.total_bits, "capacity": cache.sizes(),
                                           "c_k": cache.c_k, "element_bits": cache.element_bits},
                "subops": self.subops, "totals": self.totals(),
                "predicted_steps": predicted_steps(self.program, self.config)}

    @property
    def total_steps(self) -> int:
        return sum(s["steps"] for s in self.subops)

    def totals(self) -> dict[str, int]:
        out = {k: 0 for k in EVENT_KINDS}
        for s in self.subops:
            for k, v in s["events"].items():
                out[k] += v
        out["norm_epilogue"] = self.epilogue_ops
        return out


def simulate_layer(program: Program, x: np.ndarray, weights: WeightSet, cfg: CrossbarConfig | None = None,
                   dense: DenseCrossbar | None = None, dense_config: DenseConfig | None = None,
                   mode: str = "crossbar") -> SimulationResult:
    """Run the whole decomposed layer on the crossbar model."""
    cfg = cfg or CrossbarConfig()
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite values")
    if dense is None:
        dense_config = dense_config or DenseConfig(weight_bits=cfg.weight_bits)
        dense = store_weights(program, weights, dense_config)
    engine = CrossbarEngine(cfg, dense, mode=mode)
    wmats = dense_weights(weights)  # shapes only; WS products read the dense crossbar
    store = {"X": x}
    epilogue_ops = 0
    for item in program:
        if isinstance(item, NormEpilogue):
            run_epilogue(item, store, weights)
            epilogue_ops += program.spec.n_tokens
        else:
            run_subop_with(item, store, wmats, program.spec, engine)
    out = store[program.output]
    if not np.all(np.isfinite(out)):
        raise NumericError("layer output contains non-finite values")
    return SimulationResult(out, store, engine.summaries, dense, cfg, program, epilogue_ops)


def config_dict(cfg: CrossbarConfig) -> dict:
    d = asdict(cfg)
    d["scheme"] = {"scale_factor": cfg.scheme.scale_factor, "bits": cfg.scheme.bits,
                   "base": cfg.scheme.base, "n_digits": cfg.scheme.n_digits}
    return d


def predicted_steps(program: Program, cfg: CrossbarConfig) -> int:
    """Analytic compute-step count: sessions x digits x ceil(rows / d_c) per sub-op."""
    n = program.spec.n_tokens
    total = 0
    for op in program.subops:
        rows = 1 if op.lhs.row_wise else n
        total += op.n_sessions * cfg.steps_per_session(rows)
    return total
