"""Transformer layer description, weights, quantized tensors and the on-disk format.

On disk a layer is two files: a raw blob of little-endian float32 tensors
(row-major, concatenated) and a JSON sidecar::

    {"layer": {"n_tokens": 4, "hidden": 8, "ff_width": 32, "head_width": 4,
               "n_heads": 2, "has_attention": true, "epsilon": 1e-5},
     "tensors": [{"name": "W_q", "shape": [8, 8], "offset_bytes": 0}, ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, RangeError, SchemaError

ATTENTION_TENSORS = ("W_q", "W_k", "W_v", "W_o", "gamma1", "beta1")
FF_TENSORS = ("W_a", "b_a", "W_b", "b_b", "gamma2", "beta2")
DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    n_tokens: int
    hidden: int
    ff_width: int
    head_width: int
    n_heads: int
    has_attention: bool = True

    def __post_init__(self):
        for name in ("n_tokens", "hidden", "ff_width", "head_width", "n_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise SchemaError(f"layer.{name} must be a positive integer, got {value!r}",
                                  field=f"layer.{name}")
        if self.n_heads * self.head_width != self.hidden:
            raise DimensionError(
                f"n_heads * head_width = {self.n_heads}*{self.head_width} != hidden = {self.hidden}",
                field="layer.head_width")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        m, h = self.hidden, self.ff_width
        shapes: dict[str, tuple[int, ...]] = {}
        if self.has_attention:
            shapes.update(W_q=(m, m), W_k=(m, m), W_v=(m, m), W_o=(m, m),
                          gamma1=(m,), beta1=(m,))
        shapes.update(W_a=(m, h), b_a=(h,), W_b=(h, m), b_b=(m,), gamma2=(m,), beta2=(m,))
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.tensor_shapes().values())

    def to_dict(self) -> dict:
        return {"n_tokens": self.n_tokens, "hidden": self.hidden, "ff_width": self.ff_width,
                "head_width": self.head_width, "n_heads": self.n_heads,
                "has_attention": self.has_attention}


@dataclass
class WeightSet:
    """Weights of one layer. Attention entries are None when the block is masked."""

    W_a: np.ndarray
    b_a: np.ndarray
    W_b: np.ndarray
    b_b: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    W_q: np.ndarray | None = None
    W_k: np.ndarray | None = None
    W_v: np.ndarray | None = None
    W_o: np.ndarray | None = None
    gamma1: np.ndarray | None = None
    beta1: np.ndarray | None = None
    epsilon: float = DEFAULT_EPSILON

    def validate(self, spec: LayerSpec) -> None:
        if not self.epsilon > 0:
            raise SchemaError(f"epsilon must be > 0, got {self.epsilon}", field="layer.epsilon")
        for name, shape in spec.tensor_shapes().items():
            t = getattr(self, name)
            if t is None:
                raise SchemaError(f"missing tensor {name}", tensor=name)
            if t.shape != shape:
                raise DimensionError(f"tensor {name} has shape {list(t.shape)}, expected {list(shape)}",
                                     tensor=name)
            if not np.all(np.isfinite(t)):
                raise DataError(f"tensor {name} contains non-finite values", tensor=name)

    def tensors(self, spec: LayerSpec) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in spec.tensor_shapes()}


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray  # int64
    scale: float
    bits: int = 8

    def __post_init__(self):
        if not self.scale > 0:
            raise DataError(f"quantization scale must be > 0, got {self.scale}")
        d = np.asarray(self.data)
        if d.size and int(np.max(np.abs(d))) > self.qmax:
            raise RangeError(f"quantized values exceed +-{self.qmax} for {self.bits} bits")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(t, bits: int = 8) -> QuantTensor:
    """Symmetric per-tensor quantization; the code -2**(bits-1) is never produced."""
    if not 2 <= bits <= 16:
        raise SchemaError(f"bits must be in [2, 16], got {bits}")
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise DataError("cannot quantize non-finite values")
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(t))) if t.size else 0.0
    scale = peak / qmax if peak > 0 else 1.0
    data = np.clip(round_half_away(t / scale), -qmax, qmax).astype(np.int64)
    return QuantTensor(data=data, scale=scale, bits=bits)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


# -- on-disk format ---------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field {where}{key}", field=f"{where}{key}")
    return obj[key]


def parse_layer_spec(layer: dict) -> tuple[LayerSpec, float]:
    if not isinstance(layer, dict):
        raise SchemaError("field 'layer' must be an object", field="layer")
    kwargs = {k: _require(layer, k, "layer.")
              for k in ("n_tokens", "hidden", "ff_width", "head_width", "n_heads")}
    has_attention = layer.get("has_attention", True)
    if not isinstance(has_attention, bool):
        raise SchemaError("layer.has_attention must be a boolean", field="layer.has_attention")
    eps = layer.get("epsilon", DEFAULT_EPSILON)
    if isinstance(eps, bool) or not isinstance(eps, (int, float)):
        raise SchemaError("layer.epsilon must be a number", field="layer.epsilon")
    return LayerSpec(has_attention=has_attention, **kwargs), float(eps)


def load_layer(weights_path, meta_path) -> tuple[LayerSpec, WeightSet]:
    weights_path, meta_path = Path(weights_path), Path(meta_path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{meta_path}: invalid JSON ({exc})", file=str(meta_path)) from exc
    except OSError as exc:
        raise SchemaError(f"{meta_path}: cannot read ({exc})", file=str(meta_path)) from exc
    spec, eps = parse_layer_spec(_require(meta, "layer", ""))
    entries = _require(meta, "tensors", "")
    if not isinstance(entries, list):
        raise SchemaError("field 'tensors' must be a list", field="tensors")
    try:
        blob = weights_path.read_bytes()
    except OSError as exc:
        raise SchemaError(f"{weights_path}: cannot read ({exc})", file=str(weights_path)) from exc

    expected = spec.tensor_shapes()
    found: dict[str, np.ndarray] = {}
    for i, entry in enumerate(entries):
        name = _require(entry, "name", f"tensors[{i}].")
        shape = _require(entry, "shape", f"tensors[{i}].")
        offset = _require(entry, "offset_bytes", f"tensors[{i}].")
        if name not in expected:
            continue
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise SchemaError(f"tensors[{i}].shape must be a list of non-negative ints", tensor=name)
        if tuple(shape) != expected[name]:
            raise DimensionError(f"tensor {name} declared with shape {shape}, "
                                 f"expected {list(expected[name])}", tensor=name)
        if not isinstance(offset, int) or offset < 0:
            raise SchemaError(f"tensors[{i}].offset_bytes must be a non-negative int", tensor=name)
        nbytes = 4 * math.prod(shape)
        if offset + nbytes > len(blob):
            raise SchemaError(f"tensor {name} runs past end of {weights_path.name} "
                              f"({offset}+{nbytes} > {len(blob)})", tensor=name)
        arr = np.frombuffer(blob, dtype="<f4", count=math.prod(shape), offset=offset)
        found[name] = arr.reshape(shape).astype(np.float64)

    for name in expected:
        if name not in found:
            raise SchemaError(f"missing tensor {name}", tensor=name)
    weights = WeightSet(epsilon=eps, **found)
    weights.validate(spec)
    return spec, weights


def layer_bytes(spec: LayerSpec, weights: WeightSet) -> tuple[bytes, bytes]:
    """Serialize a layer to (raw f32 blob, sidecar JSON bytes)."""
    weights.validate(spec)
    entries, chunks, offset = [], [], 0
    for name, t in weights.tensors(spec).items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset_bytes": offset})
        chunks.append(raw)
        offset += len(raw)
    layer = spec.to_dict() | {"epsilon": weights.epsilon}
    meta = json.dumps({"layer": layer, "tensors": entries}, indent=2, sort_keys=True) + "\n"
    return b"".join(chunks), meta.encode()


def save_layer(spec: LayerSpec, weights: WeightSet, weights_path, meta_path) -> None:
    blob, meta = layer_bytes(spec, weights)
    Path(weights_path).write_bytes(blob)
    Path(meta_path).write_bytes(meta)


def load_matrix(data_path, meta_path) -> np.ndarray:
    """Load an input/output matrix stored as raw f32 plus ``{"shape": [rows, cols]}``."""
    try:
        meta = json.loads(Path(meta_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{meta_path}: cannot parse matrix sidecar ({exc})") from exc
    shape = _require(meta, "shape", "")
    if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(s, int) for s in shape)):
        raise SchemaError("matrix shape must be [rows, cols]", field="shape")
    try:
        blob = Path(data_path).read_bytes()
    except OSError as exc:
        raise SchemaError(f"{data_path}: cannot read ({exc})", file=str(data_path)) from exc
    if len(blob) != 4 * shape[0] * shape[1]:
        raise DimensionError(f"{data_path}: {len(blob)} bytes does not match shape {shape}")
    arr = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{data_path}: non-finite values")
    return arr


def matrix_bytes(x: np.ndarray) -> tuple[bytes, bytes]:
    """Serialize a matrix to (raw f32 blob, sidecar JSON bytes)."""
    x = np.asarray(x)
    meta = json.dumps({"shape": list(x.shape), "dtype": "float32"}, sort_keys=True) + "\n"
    return np.ascontiguousarray(x, dtype="<f4").tobytes(), meta.encode()


def random_layer(spec: LayerSpec, seed: int = 0, weight_scale: float | None = None,
                 epsilon: float = DEFAULT_EPSILON) -> WeightSet:
    """Gaussian weights scaled like a freshly initialised layer (std 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    m, h = spec.hidden, spec.ff_width

    def mat(rows, cols):
        std = weight_scale if weight_scale is not None else 1.0 / math.sqrt(rows)
        return rng.normal(0.0, std, size=(rows, cols))

    kw = {}
    if spec.has_attention:
        kw.update(W_q=mat(m, m), W_k=mat(m, m), W_v=mat(m, m), W_o=mat(m, m),
                  gamma1=1.0 + 0.1 * rng.standard_normal(m), beta1=0.1 * rng.standard_normal(m))
    kw.update(W_a=mat(m, h), b_a=0.1 * rng.standard_normal(h), W_b=mat(h, m),
              b_b=0.1 * rng.standard_normal(m), gamma2=1.0 + 0.1 * rng.standard_normal(m),
              beta2=0.1 * rng.standard_normal(m))
    # round-trip through float32 so in-memory and on-disk layers are identical
    kw = {k: v.astype(np.float32).astype(np.float64) for k, v in kw.items()}
    return WeightSet(epsilon=epsilon, **kw)


def zero_layer(spec: LayerSpec, epsilon: float = DEFAULT_EPSILON) -> WeightSet:
    return WeightSet(epsilon=epsilon, **{k: np.zeros(s) for k, s in spec.tensor_shapes().items()})
