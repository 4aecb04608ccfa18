"""Compile a transformer layer into standardized sub-operations F(X . col_t(Y)).

Each sub-operation multiplies an activation matrix X by one column of Y per
session t and passes the resulting column through an additional function F.
Attention becomes seven templates per head (the softmax split across three of
them), the feed-forward block two (biases folded in through an appended ones
column), and each layer norm two row-wise reductions plus a scalar epilogue.

Tensor names used in the cache store:

    X      layer input              Q, Ks, V   projections (Ks already / sqrt(d_k))
    EXP.h  exp of scores, head h    a.h        row sums of EXP.h
    Yattn  concatenated head outputs
    U1     attention output + X     H          first norm output (FF input)
    Yff    ReLU(X W_a + b_a)        U2         FF output + input
    E.*, E2.*  row means of u and u^2           OUT        layer output
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterator

import numpy as np

from .errors import NumericError, SchedulingError, SchemaError
from .modelir import LayerSpec, WeightSet


class MultiplyKind(str, Enum):
    WS = "WeightStationary"
    NW = "NonWeightStationary"


class FnKind(str, Enum):
    NONE = "None"
    SCALE_INV_SQRT_DK = "ScaleByInvSqrtDk"
    EXP = "Exp"
    DIVIDE_ROW = "DivideByRowScalar"
    ADD_RESIDUAL = "AddResidualColumn"
    RELU = "ReLU"
    SCALE_INV_M = "ScaleByInvM"


_PAYLOAD_KINDS = {FnKind.DIVIDE_ROW, FnKind.ADD_RESIDUAL}


@dataclass(frozen=True)
class AdditionalFn:
    kind: FnKind = FnKind.NONE
    payload: str | None = None

    def __post_init__(self):
        if (self.payload is not None) != (self.kind in _PAYLOAD_KINDS):
            raise SchemaError(f"F kind {self.kind.value} "
                              f"{'requires' if self.kind in _PAYLOAD_KINDS else 'takes no'} payload")

    def apply(self, z: np.ndarray, *, d_k: int = 1, m: int = 1,
              row_scalar: np.ndarray | None = None, residual: np.ndarray | None = None) -> np.ndarray:
        """Apply F to a block of output columns ``z`` (rows x sessions)."""
        k = self.kind
        if k is FnKind.NONE:
            return z
        if k is FnKind.SCALE_INV_SQRT_DK:
            return z / np.sqrt(d_k)
        if k is FnKind.EXP:
            return np.exp(z)
        if k is FnKind.DIVIDE_ROW:
            a = np.asarray(row_scalar, dtype=np.float64).reshape(-1, 1)
            if np.any(a <= 0):
                raise NumericError("row-scalar divisor a_i <= 0")
            return z / a
        if k is FnKind.ADD_RESIDUAL:
            return z + residual
        if k is FnKind.RELU:
            return np.maximum(z, 0.0)
        if k is FnKind.SCALE_INV_M:
            return z / m
        raise SchemaError(f"unknown F kind {k}")


@dataclass(frozen=True)
class Operand:
    """Where one side of the product comes from.

    ``source`` is "cache" (intermediate tensor), "dense" (weight id in the dense
    crossbar) or "ones". ``cols`` restricts a stored matrix to a column span
    (used for per-head slices). For the right-hand side, ``transpose`` makes
    session t use row t instead of column t. ``row_wise`` on the left-hand side
    means session t uses only row t of the tensor (layer-norm reductions); on
    the right-hand side it means column t is row t of the tensor.
    ``append_ones`` adds the all-ones column that folds biases into the product.
    """

    source: str
    name: str | None = None
    cols: tuple[int, int] | None = None
    transpose: bool = False
    row_wise: bool = False
    append_ones: bool = False


@dataclass(frozen=True)
class SubOp:
    id: int
    template: str
    block: str
    multiply_kind: MultiplyKind
    lhs: Operand
    rhs: Operand
    session_range: tuple[int, int]
    fn: AdditionalFn
    dest: str
    dest_width: int
    dest_offset: int = 0
    head: int | None = None

    def __post_init__(self):
        if (self.multiply_kind is MultiplyKind.WS) != (self.rhs.source == "dense"):
            raise SchemaError(f"sub-op {self.id}: weight-stationary iff rhs is a dense-crossbar weight")
        lo, hi = self.session_range
        if lo < 1 or hi < lo:
            raise SchemaError(f"sub-op {self.id}: bad session range {self.session_range}")

    @property
    def n_sessions(self) -> int:
        return self.session_range[1] - self.session_range[0] + 1

    def sessions(self) -> Iterator[int]:
        return iter(range(self.session_range[0], self.session_range[1] + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multiply_kind"] = self.multiply_kind.value
        d["fn"] = {"kind": self.fn.kind.value, "payload": self.fn.payload}
        d["session_range"] = list(self.session_range)
        for side in ("lhs", "rhs"):
            if d[side]["cols"] is not None:
                d[side]["cols"] = list(d[side]["cols"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubOp":
        def operand(o):
            o = dict(o)
            if o.get("cols") is not None:
                o["cols"] = tuple(o["cols"])
            return Operand(**o)
        return cls(id=d["id"], template=d["template"], block=d["block"],
                   multiply_kind=MultiplyKind(d["multiply_kind"]), lhs=operand(d["lhs"]),
                   rhs=operand(d["rhs"]), session_range=tuple(d["session_range"]),
                   fn=AdditionalFn(FnKind(d["fn"]["kind"]), d["fn"]["payload"]), dest=d["dest"],
                   dest_width=d["dest_width"], dest_offset=d.get("dest_offset", 0), head=d.get("head"))


@dataclass(frozen=True)
class NormEpilogue:
    """Scalar unit finishing a layer norm: Var = E(u^2) - E(u)^2, alpha = gamma / sqrt(Var + eps)."""

    block: str
    source: str
    mean: str
    mean_sq: str
    gamma: str
    beta: str
    dest: str
    after: int  # id of the sub-op this runs after

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Program:
    spec: LayerSpec
    subops: list[SubOp] = field(default_factory=list)
    epilogues: list[NormEpilogue] = field(default_factory=list)
    output: str = "OUT"

    def __iter__(self):
        after = {e.after: e for e in self.epilogues}
        for op in self.subops:
            yield op
            if op.id in after:
                yield after[op.id]

    def to_dict(self) -> dict:
        return {"layer": self.spec.to_dict(), "output": self.output,
                "subops": [op.to_dict() for op in self.subops],
                "epilogues": [e.to_dict() for e in self.epilogues]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Program":
        return cls(spec=LayerSpec(**d["layer"]), subops=[SubOp.from_dict(o) for o in d["subops"]],
                   epilogues=[NormEpilogue(**e) for e in d["epilogues"]], output=d["output"])

    def weight_ids(self) -> list[str]:
        return sorted({op.rhs.name for op in self.subops if op.multiply_kind is MultiplyKind.WS})


# -- decomposition ------------------------------------------------------------------

class _Ids:
    def __init__(self, start: int = 1):
        self.next = start

    def __call__(self) -> int:
        self.next += 1
        return self.next - 1


def decompose_attention(spec: LayerSpec, ids: _Ids | None = None, src: str = "X",
                        dest: str = "U1") -> list[SubOp]:
    """Rows 1-6 once per head, then one shared output projection with the residual add."""
    if not spec.has_attention:
        return []
    ids = ids or _Ids()
    n, m, dk = spec.n_tokens, spec.hidden, spec.head_width
    WS, NW = MultiplyKind.WS, MultiplyKind.NW
    ops: list[SubOp] = []
    for h in range(spec.n_heads):
        span = (h * dk, (h + 1) * dk)
        x = Operand("cache", src)
        ops += [
            SubOp(ids(), "MHA.1", "mha", WS, x, Operand("dense", "W_q", cols=span), (1, dk),
                  AdditionalFn(), "Q", m, h * dk, h),
            SubOp(ids(), "MHA.2", "mha", WS, x, Operand("dense", "W_k", cols=span), (1, dk),
                  AdditionalFn(FnKind.SCALE_INV_SQRT_DK), "Ks", m, h * dk, h),
            SubOp(ids(), "MHA.3", "mha", WS, x, Operand("dense", "W_v", cols=span), (1, dk),
                  AdditionalFn(), "V", m, h * dk, h),
            SubOp(ids(), "MHA.4", "mha", NW, Operand("cache", "Q", cols=span),
                  Operand("cache", "Ks", cols=span, transpose=True), (1, n),
                  AdditionalFn(FnKind.EXP), f"EXP.{h}", n, 0, h),
            SubOp(ids(), "MHA.5", "mha", NW, Operand("cache", f"EXP.{h}"), Operand("ones"), (1, 1),
                  AdditionalFn(), f"a.{h}", 1, 0, h),
            SubOp(ids(), "MHA.6", "mha", NW, Operand("cache", f"EXP.{h}"),
                  Operand("cache", "V", cols=span), (1, dk),
                  AdditionalFn(FnKind.DIVIDE_ROW, f"a.{h}"), "Yattn", m, h * dk, h),
        ]
    ops.append(SubOp(ids(), "MHA.7", "mha", WS, Operand("cache", "Yattn"), Operand("dense", "W_o"),
                     (1, m), AdditionalFn(FnKind.ADD_RESIDUAL, src), dest, m))
    return ops


def decompose_feedforward(spec: LayerSpec, ids: _Ids | None = None, src: str = "X",
                          dest: str = "U2") -> list[SubOp]:
    ids = ids or _Ids()
    m, h = spec.hidden, spec.ff_width
    WS = MultiplyKind.WS
    return [
        SubOp(ids(), "FF.1", "ff", WS, Operand("cache", src, append_ones=True),
              Operand("dense", "W_a|b_a"), (1, h), AdditionalFn(FnKind.RELU), "Yff", h),
        SubOp(ids(), "FF.2", "ff", WS, Operand("cache", "Yff", append_ones=True),
              Operand("dense", "W_b|b_b"), (1, m), AdditionalFn(FnKind.ADD_RESIDUAL, src), dest, m),
    ]


def decompose_layernorm(spec: LayerSpec, ids: _Ids | None = None, src: str = "U1",
                        dest: str = "H", tag: str = "1") -> tuple[list[SubOp], NormEpilogue]:
    ids = ids or _Ids()
    n = spec.n_tokens
    NW = MultiplyKind.NW
    row = Operand("cache", src, row_wise=True)
    block = f"norm{tag}"
    ops = [
        SubOp(ids(), f"LN{tag}.1", block, NW, row, Operand("ones"), (1, n),
              AdditionalFn(FnKind.SCALE_INV_M), f"E.{tag}", 1),
        SubOp(ids(), f"LN{tag}.2", block, NW, row, Operand("cache", src, row_wise=True), (1, n),
              AdditionalFn(FnKind.SCALE_INV_M), f"E2.{tag}", 1),
    ]
    epi = NormEpilogue(block, src, f"E.{tag}", f"E2.{tag}", f"gamma{tag}", f"beta{tag}", dest, ops[-1].id)
    return ops, epi


def decompose_layer(spec: LayerSpec) -> Program:
    ids = _Ids()
    prog = Program(spec)
    ff_src = "X"
    if spec.has_attention:
        prog.subops += decompose_attention(spec, ids, "X", "U1")
        ops, epi = decompose_layernorm(spec, ids, "U1", "H", "1")
        prog.subops += ops
        prog.epilogues.append(epi)
        ff_src = "H"
    prog.subops += decompose_feedforward(spec, ids, ff_src, "U2")
    ops, epi = decompose_layernorm(spec, ids, "U2", "OUT", "2")
    prog.subops += ops
    prog.epilogues.append(epi)
    return prog


# -- execution ----------------------------------------------------------------------

def dense_weights(weights: WeightSet) -> dict[str, np.ndarray]:
    """Weight matrices as held by the dense crossbar, biases appended as a last row."""
    d = {"W_a|b_a": np.vstack([weights.W_a, weights.b_a[None, :]]),
         "W_b|b_b": np.vstack([weights.W_b, weights.b_b[None, :]])}
    for name in ("W_q", "W_k", "W_v", "W_o"):
        if getattr(weights, name) is not None:
            d[name] = getattr(weights, name)
    return d


def _fetch(store: dict, name: str, op: SubOp) -> np.ndarray:
    if name not in store:
        raise SchedulingError(f"sub-op {op.id} ({op.template}) needs '{name}' which is not resident",
                              subop=op.id, operand=name)
    return store[name]


def lhs_matrix(op: SubOp, store: dict) -> np.ndarray:
    """Activation matrix of ``op``; for row-wise ops row t is the session-t activation."""
    x = _fetch(store, op.lhs.name, op)
    if op.lhs.cols is not None:
        x = x[:, op.lhs.cols[0]:op.lhs.cols[1]]
    if op.lhs.append_ones:
        x = np.hstack([x, np.ones((x.shape[0], 1))])
    return x


def rhs_matrix(op: SubOp, store: dict, weights: dict[str, np.ndarray], k: int) -> np.ndarray:
    """The K x T matrix whose column j is col_t(Y) for the j-th session of ``op``."""
    lo, hi = op.session_range
    if op.rhs.source == "ones":
        return np.ones((k, op.n_sessions))
    src = weights if op.rhs.source == "dense" else store
    y = _fetch(src, op.rhs.name, op)
    if op.rhs.cols is not None:
        y = y[:, op.rhs.cols[0]:op.rhs.cols[1]]
    if op.rhs.transpose or op.rhs.row_wise:
        y = y.T
    return y[:, lo - 1:hi]


LinearFn = Callable[[SubOp, np.ndarray, np.ndarray], np.ndarray]


def real_linear(op: SubOp, lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if op.lhs.row_wise:
        lo, hi = op.session_range
        return np.einsum("tk,kt->t", lhs[lo - 1:hi], rhs)[None, :]
    return lhs @ rhs


def apply_fn(op: SubOp, z: np.ndarray, store: dict, spec: LayerSpec, k: int) -> np.ndarray:
    ctx = {"d_k": spec.head_width, "m": k}
    if op.fn.kind is FnKind.DIVIDE_ROW:
        ctx["row_scalar"] = _fetch(store, op.fn.payload, op)
    elif op.fn.kind is FnKind.ADD_RESIDUAL:
        lo, hi = op.session_range
        res = _fetch(store, op.fn.payload, op)
        ctx["residual"] = res[:, op.dest_offset + lo - 1:op.dest_offset + hi]
    return op.fn.apply(z, **ctx)


def write_dest(op: SubOp, out: np.ndarray, store: dict, n_rows: int) -> None:
    if op.lhs.row_wise:
        buf = store.setdefault(op.dest, np.zeros((n_rows, 1)))
        lo, hi = op.session_range
        buf[lo - 1:hi, 0] = out.ravel()
        return
    buf = store.setdefault(op.dest, np.zeros((out.shape[0], op.dest_width)))
    lo, hi = op.session_range
    buf[:, op.dest_offset + lo - 1:op.dest_offset + hi] = out


def run_epilogue(epi: NormEpilogue, store: dict, weights: WeightSet) -> None:
    u = store[epi.source]
    mean = store[epi.mean][:, 0:1]
    var = np.maximum(store[epi.mean_sq][:, 0:1] - mean ** 2, 0.0)
    alpha = getattr(weights, epi.gamma) / np.sqrt(var + weights.epsilon)
    store[epi.dest] = (u - mean) * alpha + getattr(weights, epi.beta)


def run_subop_with(op: SubOp, store: dict, wmats: dict, spec: LayerSpec, linear: LinearFn) -> np.ndarray:
    lhs = lhs_matrix(op, store)
    k = lhs.shape[1]
    rhs = rhs_matrix(op, store, wmats, k)
    z = linear(op, lhs, rhs)
    out = apply_fn(op, z, store, spec, k)
    write_dest(op, out, store, lhs.shape[0])
    return out


def run_program(program: Program, x: np.ndarray, weights: WeightSet,
                linear: LinearFn = real_linear, store: dict | None = None) -> dict[str, np.ndarray]:
    """Execute every sub-op and epilogue in order; returns the final cache store."""
    store = {} if store is None else store
    store["X"] = np.asarray(x, dtype=np.float64)
    wmats = dense_weights(weights)
    for item in program:
        if isinstance(item, NormEpilogue):
            run_epilogue(item, store, weights)
        else:
            run_subop_with(item, store, wmats, program.spec, linear)
    return store


def execute_exact(program: Program, x: np.ndarray, weights: WeightSet) -> np.ndarray:
    """Run the decomposed program in float64 arithmetic and return the layer output."""
    return run_program(program, x, weights)[program.output]


def execute_subops(ops: list[SubOp], store: dict, spec: LayerSpec, weights: dict | None = None,
                   linear: LinearFn = real_linear) -> dict:
    for op in ops:
        run_subop_with(op, store, weights or {}, spec, linear)
    return store
