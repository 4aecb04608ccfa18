import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xbarllm.errors import DataError, DimensionError, RangeError, SchemaError, XbarError
from xbarllm.modelir import (LayerSpec, QuantTensor, dequantize, load_layer, load_matrix, matrix_bytes,
                             quantize, random_layer, round_half_away, save_layer, zero_layer)

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


def write_layer(tmp_path, spec, weights):
    w, m = tmp_path / "l.f32", tmp_path / "l.json"
    save_layer(spec, weights, w, m)
    return w, m


def test_layer_spec_invariants():
    with pytest.raises(SchemaError):
        LayerSpec(4, 4, 8, 3, 2)  # heads * d_k != hidden
    with pytest.raises(SchemaError):
        LayerSpec(0, 4, 8, 2, 2)


def test_zero_layer_loads(tmp_path):
    spec = LayerSpec(1, 4, 8, 2, 2)
    w, m = write_layer(tmp_path, spec, zero_layer(spec))
    spec2, weights = load_layer(w, m)
    assert spec2 == spec
    assert all(not np.any(t) for t in weights.tensors(spec).values())


def test_shape_mismatch_names_tensor(tmp_path):
    spec = LayerSpec(1, 4, 8, 2, 2)
    w, m = write_layer(tmp_path, spec, zero_layer(spec))
    meta = json.loads(m.read_text())
    for t in meta["tensors"]:
        if t["name"] == "W_q":
            t["shape"] = [4, 3]
    m.write_text(json.dumps(meta))
    with pytest.raises(DimensionError, match="W_q"):
        load_layer(w, m)


def test_missing_tensor(tmp_path):
    spec = LayerSpec(1, 4, 8, 2, 2)
    w, m = write_layer(tmp_path, spec, zero_layer(spec))
    meta = json.loads(m.read_text())
    meta["tensors"] = [t for t in meta["tensors"] if t["name"] != "b_a"]
    m.write_text(json.dumps(meta))
    with pytest.raises(SchemaError, match="b_a"):
        load_layer(w, m)


def test_non_finite_weights(tmp_path):
    spec = LayerSpec(1, 4, 8, 2, 2)
    weights = zero_layer(spec)
    w, m = write_layer(tmp_path, spec, weights)
    blob = bytearray(w.read_bytes())
    blob[0:4] = np.array([np.nan], dtype="<f4").tobytes()
    w.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_layer(w, m)


def test_bert_large_parameter_count(tmp_path):
    spec = LayerSpec(8, 1024, 4096, 64, 16)
    w, m = write_layer(tmp_path, spec, random_layer(spec, 0))
    spec2, weights = load_layer(w, m)
    # direct summation over the declared shapes
    declared = sum(math.prod(t["shape"]) for t in json.loads(m.read_text())["tensors"])
    assert spec2.parameter_count() == declared
    assert declared == 4 * 1024**2 + 2 * 1024 * 4096 + 4096 + 1024 + 4 * 1024


def test_random_layer_round_trips_exactly(tmp_path):
    spec = LayerSpec(2, 4, 6, 2, 2)
    weights = random_layer(spec, 5)
    w, m = write_layer(tmp_path, spec, weights)
    _, back = load_layer(w, m)
    for name, t in weights.tensors(spec).items():
        assert np.array_equal(t, back.tensors(spec)[name])


def test_matrix_round_trip(tmp_path):
    x = np.arange(6, dtype=np.float64).reshape(2, 3) / 4
    blob, meta = matrix_bytes(x)
    (tmp_path / "x.f32").write_bytes(blob)
    (tmp_path / "x.json").write_bytes(meta)
    assert np.array_equal(load_matrix(tmp_path / "x.f32", tmp_path / "x.json"), x)


def test_quantize_examples():
    q = quantize(np.zeros((2, 2)), 8)
    assert q.scale == 1.0 and not np.any(q.data)
    q = quantize(np.array([[127.0, -127.0]]), 8)
    assert q.scale == 1.0 and q.data.tolist() == [[127, -127]]
    q = quantize(np.array([[0.5, -1.0, 0.25]]), 8)
    assert q.scale == pytest.approx(1 / 127)
    # 0.5*127 = 63.5 rounds away from zero to 64; 0.25*127 = 31.75 -> 32
    assert q.data.tolist() == [[64, -127, 32]]


def test_quantize_rejects_bad_input():
    with pytest.raises(DataError):
        quantize(np.array([np.inf]), 8)
    with pytest.raises(SchemaError):
        quantize(np.ones(2), 1)


def test_round_half_away():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]


def test_quant_tensor_invariants():
    with pytest.raises(RangeError):
        QuantTensor(np.array([-128]), 1.0, 8)
    with pytest.raises(DataError):
        QuantTensor(np.array([1]), 0.0, 8)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite),
       st.integers(2, 16))
def test_quantize_round_trip(t, bits):
    q = quantize(t, bits)
    assert np.all(np.abs(q.data) <= 2 ** (bits - 1) - 1)
    err = np.abs(dequantize(q) - t)
    assert np.all(err <= q.scale / 2 + 1e-9 * max(1.0, np.abs(t).max()))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite),
       st.integers(2, 16))
def test_quantize_symmetric(t, bits):
    assert np.array_equal(quantize(-t, bits).data, -quantize(t, bits).data)


sidecar_values = st.recursive(
    st.none() | st.booleans() | st.integers(-3, 20) | st.floats(allow_nan=False) | st.text(max_size=4),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=12)


@given(st.dictionaries(st.sampled_from(["layer", "tensors", "x"]), sidecar_values, max_size=3),
       st.binary(max_size=64))
def test_loader_is_total(tmp_path_factory, meta, blob):
    d = tmp_path_factory.mktemp("fuzz")
    (d / "m.json").write_text(json.dumps(meta))
    (d / "w.f32").write_bytes(blob)
    try:
        load_layer(d / "w.f32", d / "m.json")
    except XbarError:
        pass


def test_loader_total_on_mutated_layer(tmp_path):
    spec = LayerSpec(1, 2, 2, 1, 2)
    w, m = write_layer(tmp_path, spec, zero_layer(spec))
    good = json.loads(m.read_text())
    mutations = [
        lambda d: d["layer"].pop("hidden"),
        lambda d: d["layer"].update(hidden="4"),
        lambda d: d["layer"].update(has_attention="yes"),
        lambda d: d["tensors"][0].update(offset_bytes=10**9),
        lambda d: d["tensors"][0].update(shape="2x2"),
        lambda d: d.update(tensors={}),
        lambda d: d["layer"].update(epsilon=0),
    ]
    for mutate in mutations:
        d = json.loads(json.dumps(good))
        mutate(d)
        m.write_text(json.dumps(d))
        with pytest.raises(XbarError):
            load_layer(w, m)
