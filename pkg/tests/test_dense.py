import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xbarllm.decomposer import Program, decompose_layer
from xbarllm.dense import (DenseBank, DenseConfig, banks_needed, cells_to_weights, read_column, store_weights,
                           stream_weight_column, weights_to_cells)
from xbarllm.errors import CapacityError, LayoutError, SchemaError
from xbarllm.modelir import LayerSpec, random_layer


def test_cells_per_weight():
    assert DenseConfig().cells_per_weight == 4
    assert DenseConfig(bits_per_cell=1).cells_per_weight == 8
    assert DenseConfig(bits_per_cell=3).cells_per_weight == 3


def test_cell_examples():
    assert weights_to_cells(np.array([-1]), 8, 2).tolist() == [3, 3, 3, 3]
    assert weights_to_cells(np.array([78]), 8, 2).tolist() == [1, 0, 3, 2]
    assert cells_to_weights(np.array([2, 0, 0, 0]), 8, 2).tolist() == [-128]


@given(st.integers(1, 4), st.data())
def test_cell_round_trip(bpc, data):
    q = data.draw(arrays(np.int64, st.integers(0, 40), elements=st.integers(-128, 127)))
    cells = weights_to_cells(q, 8, bpc)
    assert cells.min(initial=0) >= 0 and cells.max(initial=0) < 2 ** bpc
    assert np.array_equal(cells_to_weights(cells, 8, bpc), q)


def _bank_with_all_levels(bpc, rows=4096):
    bank = DenseBank(rows, 4, bpc)
    bank.write(0, 0, np.arange(rows) % bank.levels)
    return bank


@pytest.mark.parametrize("bpc,amp", [(2, 0.25), (1, 0.9)])
def test_reads_error_free_inside_margin(bpc, amp):
    bank = _bank_with_all_levels(bpc)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert np.array_equal(read_column(bank, 0, rng, amp), bank.column(0))


def test_reads_fail_beyond_margin():
    bank = _bank_with_all_levels(2)
    got = read_column(bank, 0, np.random.default_rng(0), 0.6)
    assert np.any(got != bank.column(0))
    assert got.min() >= 0 and got.max() <= 3


def test_columns_are_independent():
    bank = DenseBank(8, 4, 2)
    bank.write(1, 0, np.full(8, 3))
    assert bank.column(0).tolist() == [0] * 8
    assert bank.column(1).tolist() == [3] * 8
    col = bank.column(1)
    col[:] = 0
    assert bank.column(1).tolist() == [3] * 8


def test_bank_errors():
    bank = DenseBank(8, 4, 2)
    with pytest.raises(SchemaError):
        bank.write(0, 0, np.array([4]))
    with pytest.raises(LayoutError):
        bank.write(0, 6, np.zeros(3, dtype=int))
    with pytest.raises(LayoutError):
        bank.column(4)
    with pytest.raises(SchemaError):
        DenseConfig(rows=0)


def test_store_and_read_back_exact():
    spec = LayerSpec(2, 8, 12, 4, 2)
    prog = decompose_layer(spec)
    dense = store_weights(prog, random_layer(spec, 3), DenseConfig(rows=16, cols=256))
    for op in prog.subops:
        if op.id not in dense.quantized:
            continue
        q = dense.quantized[op.id].data
        for j, t in enumerate(op.sessions()):
            assert np.array_equal(dense.session_weights(op.id, t), q[:, j])
    summary = dense.layout.to_dict()["summary"]
    assert summary["mapped_weights"] == spec.parameter_count() - 4 * spec.hidden
    assert summary["mapped_bits"] == 8 * summary["mapped_weights"]


def test_weight_columns_longer_than_bank_rows():
    spec = LayerSpec(1, 4, 40, 2, 2, has_attention=False)
    prog = decompose_layer(spec)
    dense = store_weights(prog, random_layer(spec, 0), DenseConfig(rows=16, cols=512))
    ff2 = prog.subops[1]
    assert dense.layout.placement(ff2.id, 1).n_cells == 41 * 4
    assert np.array_equal(dense.session_weights(ff2.id, 3), dense.quantized[ff2.id].data[:, 2])


def test_capacity_error():
    spec = LayerSpec(2, 8, 16, 4, 2)
    with pytest.raises(CapacityError) as exc:
        store_weights(decompose_layer(spec), random_layer(spec, 0), DenseConfig(rows=8, cols=8))
    assert exc.value.detail["required_bits"] > exc.value.detail["available_bits"]


def test_empty_layout():
    spec = LayerSpec(1, 2, 2, 1, 2)
    dense = store_weights(Program(spec), random_layer(spec, 0))
    summary = dense.layout.to_dict()["summary"]
    assert summary["mapped_weights"] == 0 and summary["banks_used"] == 0


def test_stream_latency():
    spec = LayerSpec(1, 128, 128, 64, 2, has_attention=False)
    prog = decompose_layer(spec)
    dense = store_weights(prog, random_layer(spec, 0))
    # FF.1 weight column: 128 weights plus its bias
    secs, bits = stream_weight_column(dense.layout, prog.subops[0].id, 1, 819e9)
    assert bits == 129 * 8
    assert secs == pytest.approx(129 * 8 / 819e9)
    assert 1024 / 819e9 == pytest.approx(1.25031e-9, rel=1e-5)
    with pytest.raises(SchemaError):
        stream_weight_column(dense.layout, prog.subops[0].id, 1, 0.0)


def test_bert_large_fits_one_bank():
    assert banks_needed(12_588_032) == 1
    spec = LayerSpec(2, 1024, 4096, 64, 16)
    dense = store_weights(decompose_layer(spec), random_layer(spec, 0))
    summary = dense.layout.to_dict()["summary"]
    assert summary["banks_used"] == 1
    assert summary["mapped_weights"] == 12_588_032
