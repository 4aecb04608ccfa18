"""Five-cache intermediate storage (D1, D2, T1, T2, S) and its static plans.

Attention runs per head in two parts. Part (a) computes Q and K/sqrt(d_k) in
chunks of c_k columns (T1, T2) and accumulates the partial score products in
S, applying exp after the last chunk. Part (b) forms the row sums, then per
chunk computes V (T1) and the normalised head output R (T2) and accumulates
R @ W_o into D2. The input X stays in D1 throughout and is added to D2 at the
end. Feed-forward touches only D1 and D2: each hidden column is produced and
consumed immediately.

Plans are produced by running the same flow as execution on zero tensors, so a
plan is exactly the sequence of cache writes that execution performs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, SchedulingError, SchemaError
from .modelir import LayerSpec, WeightSet, zero_layer

CACHE_NAMES = ("D1", "D2", "T1", "T2", "S")


@dataclass(frozen=True)
class CacheConfig:
    """Capacities in elements. ``c_k`` is the number of columns a T cache holds."""

    D1: int
    D2: int
    T1: int
    T2: int
    S: int
    c_k: int
    element_bits: int = 8
    sizing: str = "typical"

    def __post_init__(self):
        for name in CACHE_NAMES:
            if getattr(self, name) < 0:
                raise SchemaError(f"cache {name} size must be >= 0", field=f"cache.{name}")
        if self.c_k < 1:
            raise SchemaError("c_k must be >= 1", field="cache.c_k")
        if self.element_bits < 1:
            raise SchemaError("element_bits must be >= 1", field="cache.element_bits")
        if self.sizing not in ("typical", "maximum", "custom"):
            raise SchemaError(f"unknown sizing {self.sizing!r}", field="cache.sizing")

    @classmethod
    def typical(cls, n_tokens: int, width: int, c_k: int, element_bits: int = 8) -> "CacheConfig":
        return cls(D1=n_tokens * width, D2=n_tokens * width, T1=n_tokens * c_k, T2=n_tokens * c_k,
                   S=n_tokens * n_tokens, c_k=c_k, element_bits=element_bits, sizing="typical")

    @classmethod
    def maximum(cls, n_tokens: int, width: int, head_width: int, element_bits: int = 8) -> "CacheConfig":
        return cls(D1=n_tokens * width, D2=n_tokens * width, T1=n_tokens * head_width,
                   T2=n_tokens * head_width, S=n_tokens * n_tokens, c_k=head_width,
                   element_bits=element_bits, sizing="maximum")

    @classmethod
    def for_spec(cls, spec: LayerSpec, c_k: int | None = None, sizing: str = "typical",
                 element_bits: int = 8) -> "CacheConfig":
        if sizing == "maximum":
            return cls.maximum(spec.n_tokens, spec.hidden, spec.head_width, element_bits)
        return cls.typical(spec.n_tokens, spec.hidden, c_k or spec.head_width, element_bits)

    def sizes(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in CACHE_NAMES}

    def size_bytes(self) -> dict[str, float]:
        return {name: n * self.element_bits / 8 for name, n in self.sizes().items()}

    def size_kb(self) -> dict[str, float]:
        """Sizes in kilobytes of 1024 bytes."""
        return {name: b / 1024 for name, b in self.size_bytes().items()}

    @property
    def total_bits(self) -> int:
        return sum(self.sizes().values()) * self.element_bits


@dataclass
class PlanStep:
    index: int
    part: str
    op: str
    head: int | None = None
    phase: int | None = None
    sessions: int = 0
    partial: bool = False
    reads: list[tuple[str, str]] = field(default_factory=list)
    writes: list[tuple[str, str, int]] = field(default_factory=list)
    frees: list[tuple[str, str]] = field(default_factory=list)
    occupancy: dict[str, int] = field(default_factory=dict)  # after the step
    peak: dict[str, int] = field(default_factory=dict)  # largest during the step

    def to_dict(self) -> dict:
        return {"index": self.index, "part": self.part, "op": self.op, "head": self.head,
                "phase": self.phase, "sessions": self.sessions, "partial": self.partial,
                "reads": [list(r) for r in self.reads], "writes": [list(w) for w in self.writes],
                "frees": [list(f) for f in self.frees], "occupancy": dict(self.occupancy), "peak": dict(self.peak)}


@dataclass
class CachePlan:
    kind: str
    config: CacheConfig
    phases: int
    steps: list[PlanStep] = field(default_factory=list)

    @property
    def high_water(self) -> dict[str, int]:
        hw = {name: 0 for name in CACHE_NAMES}
        for s in self.steps:
            for name, n in s.peak.items():
                hw[name] = max(hw[name], n)
        return hw

    def sessions(self, op: str) -> int:
        return sum(s.sessions for s in self.steps if s.op == op)

    def to_dict(self) -> dict:
        cfg = self.config
        return {"kind": self.kind, "phases": self.phases, "sizing": cfg.sizing, "c_k": cfg.c_k,
                "element_bits": cfg.element_bits, "capacity": cfg.sizes(),
                "capacity_bytes": cfg.size_bytes(), "capacity_kb": cfg.size_kb(), "high_water": self.high_water,
                "steps": [s.to_dict() for s in self.steps]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Caches:
    """Cache contents with capacity enforcement, recording each step into a plan."""

    def __init__(self, plan: CachePlan):
        self.plan = plan
        self.cfg = plan.config
        self.contents: dict[str, dict[str, np.ndarray]] = {name: {} for name in CACHE_NAMES}
        self.step: PlanStep | None = None

    def begin(self, part: str, op: str, head=None, phase=None, sessions=0, partial=False):
        self.step = PlanStep(len(self.plan.steps), part, op, head, phase, sessions, partial,
                             occupancy=self.occupancy(), peak=self.occupancy())
        self.plan.steps.append(self.step)

    def occupancy(self) -> dict[str, int]:
        return {name: sum(v.size for v in c.values()) for name, c in self.contents.items()}

    def write(self, cache: str, tensor: str, value: np.ndarray) -> None:
        self.contents[cache][tensor] = value
        used = self.occupancy()[cache]
        cap = getattr(self.cfg, cache)
        self.step.writes.append((cache, tensor, int(value.size)))
        self.step.occupancy = self.occupancy()
        self.step.peak = {k: max(v, self.step.peak[k]) for k, v in self.step.occupancy.items()}
        if used > cap:
            raise CapacityError(f"cache {cache} needs {used} elements at step {self.step.index} "
                                f"({self.step.op}) but holds {cap}",
                                cache=cache, step=self.step.index, required=used, capacity=cap)

    def read(self, cache: str, tensor: str) -> np.ndarray:
        try:
            value = self.contents[cache][tensor]
        except KeyError:
            raise SchedulingError(f"{tensor} is not resident in {cache} at step {self.step.index}",
                                  cache=cache, tensor=tensor) from None
        self.step.reads.append((cache, tensor))
        return value

    def free(self, cache: str, tensor: str) -> None:
        del self.contents[cache][tensor]
        self.step.frees.append((cache, tensor))
        self.step.occupancy = self.occupancy()


def _chunks(width: int, c_k: int) -> list[tuple[int, int]]:
    return [(c, min(c + c_k, width)) for c in range(0, width, c_k)]


def _check_mha_config(spec: LayerSpec, cfg: CacheConfig, dup_factor: int) -> int:
    if not spec.has_attention:
        raise SchemaError("layer has no attention block")
    if cfg.c_k > spec.head_width:
        raise SchemaError(f"c_k={cfg.c_k} exceeds head width d_k={spec.head_width}", field="cache.c_k")
    if cfg.sizing == "typical" and dup_factor > cfg.c_k:
        raise CapacityError(f"duplication factor {dup_factor} exceeds c_k={cfg.c_k}; "
                            "typical cache sizing is too small, use maximum sizing",
                            dup_factor=dup_factor, c_k=cfg.c_k)
    return math.ceil(spec.head_width / cfg.c_k)


def _mha_flow(spec: LayerSpec, cfg: CacheConfig, x: np.ndarray, w: WeightSet,
              dup_factor: int = 1) -> tuple[CachePlan, np.ndarray]:
    phases = _check_mha_config(spec, cfg, dup_factor)
    plan = CachePlan("mha", cfg, phases)
    c = _Caches(plan)
    n, dk = spec.n_tokens, spec.head_width
    chunks = _chunks(dk, cfg.c_k)

    c.begin("load", "X")
    c.write("D1", "X", x)
    for h in range(spec.n_heads):
        base = h * dk
        for p, (lo, hi) in enumerate(chunks, start=1):
            cols = slice(base + lo, base + hi)
            c.begin("a", "MHA.1", h, p, hi - lo)
            c.write("T1", "Q", c.read("D1", "X") @ w.W_q[:, cols])
            c.begin("a", "MHA.2", h, p, hi - lo)
            c.write("T2", "Ks", c.read("D1", "X") @ w.W_k[:, cols] / math.sqrt(dk))
            c.begin("a", "MHA.4", h, p, n, partial=True)
            part = c.read("T1", "Q") @ c.read("T2", "Ks").T
            acc = part if p == 1 else c.read("S", "EXP") + part
            if p == len(chunks):
                acc = np.exp(acc)
            c.write("S", "EXP", acc)
            c.free("T1", "Q")
            c.free("T2", "Ks")
        c.begin("b", "MHA.5", h, None, 1)
        a = c.read("S", "EXP").sum(axis=1, keepdims=True)  # row-scalar register, not a cache
        for p, (lo, hi) in enumerate(chunks, start=1):
            cols = slice(base + lo, base + hi)
            c.begin("b", "MHA.3", h, p, hi - lo)
            c.write("T1", "V", c.read("D1", "X") @ w.W_v[:, cols])
            c.begin("b", "MHA.6", h, p, hi - lo)
            c.write("T2", "R", c.read("S", "EXP") @ c.read("T1", "V") / a)
            c.begin("b", "MHA.7", h, p, spec.hidden, partial=True)
            part = c.read("T2", "R") @ w.W_o[cols, :]
            first = h == 0 and p == 1
            c.write("D2", "Z", part if first else c.read("D2", "Z") + part)
            c.free("T1", "V")
            c.free("T2", "R")
        c.free("S", "EXP")
    c.begin("final", "residual")
    c.write("D2", "Z", c.read("D2", "Z") + c.read("D1", "X"))
    return plan, c.contents["D2"]["Z"]


def _ff_flow(spec: LayerSpec, cfg: CacheConfig, x: np.ndarray, w: WeightSet) -> tuple[CachePlan, np.ndarray]:
    plan = CachePlan("ff", cfg, 1)
    c = _Caches(plan)
    c.begin("load", "X")
    c.write("D1", "X", x)
    # each hidden column y_j goes straight from FF.1's output into FF.2's accumulation
    c.begin("ff", "FF.1", sessions=spec.ff_width)
    y = np.maximum(c.read("D1", "X") @ w.W_a + w.b_a, 0.0)
    c.begin("ff", "FF.2", sessions=spec.hidden, partial=True)
    c.write("D2", "Z", y @ w.W_b + w.b_b)
    c.begin("final", "residual")
    c.write("D2", "Z", c.read("D2", "Z") + c.read("D1", "X"))
    return plan, c.contents["D2"]["Z"]


def plan_mha(spec: LayerSpec, cfg: CacheConfig, dup_factor: int = 1) -> CachePlan:
    return _mha_flow(spec, cfg, np.zeros((spec.n_tokens, spec.hidden)), zero_layer(spec), dup_factor)[0]


def plan_ff(spec: LayerSpec, cfg: CacheConfig) -> CachePlan:
    return _ff_flow(spec, cfg, np.zeros((spec.n_tokens, spec.hidden)), zero_layer(spec))[0]


def execute_mha_plan(spec: LayerSpec, cfg: CacheConfig, x, w: WeightSet, dup_factor: int = 1) -> np.ndarray:
    """Attention output plus residual, computed under the cache plan's residency rules."""
    return _mha_flow(spec, cfg, np.asarray(x, dtype=np.float64), w, dup_factor)[1]


def execute_ff_plan(spec: LayerSpec, cfg: CacheConfig, x, w: WeightSet) -> np.ndarray:
    return _ff_flow(spec, cfg, np.asarray(x, dtype=np.float64), w)[1]


def check_residency(plan: CachePlan, step: int | None = None) -> dict[str, int]:
    """Peak occupancy during ``step`` (or high-water marks for the whole plan), checked against capacity."""
    if step is None:
        occ = plan.high_water
    else:
        if not 0 <= step < len(plan.steps):
            raise SchemaError(f"plan has no step {step}")
        occ = {name: plan.steps[step].peak.get(name, 0) for name in CACHE_NAMES}
    caps = plan.config.sizes()
    for name in CACHE_NAMES:
        if occ[name] > caps[name]:
            raise CapacityError(f"cache {name} holds {occ[name]} elements, capacity {caps[name]}",
                                cache=name, step=step)
    return occ


def plan_layer(spec: LayerSpec, cfg: CacheConfig, dup_factor: int = 1) -> dict:
    out = {"ff": plan_ff(spec, cfg).to_dict()}
    if spec.has_attention:
        out["mha"] = plan_mha(spec, cfg, dup_factor).to_dict()
    return out
