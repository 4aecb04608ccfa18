import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xbarllm.cache import (CACHE_NAMES, CacheConfig, CachePlan, check_residency, execute_ff_plan,
                           execute_mha_plan, plan_ff, plan_layer, plan_mha)
from xbarllm.errors import CapacityError, SchemaError
from xbarllm.modelir import LayerSpec, random_layer
from xbarllm.oracle import attention_forward, feedforward_forward


def test_two_phase_example():
    spec = LayerSpec(2, 6, 6, 6, 1)
    cfg = CacheConfig.typical(2, 6, c_k=3)
    plan = plan_mha(spec, cfg)
    assert plan.phases == 2
    assert plan.high_water == {"D1": 12, "D2": 12, "T1": 6, "T2": 6, "S": 4}
    assert check_residency(plan) == plan.high_water
    for i in range(len(plan.steps)):
        check_residency(plan, i)


def test_typical_sizes_256_by_1024():
    cfg = CacheConfig.typical(256, 1024, c_k=64)
    assert cfg.size_bytes() == {"D1": 262144, "D2": 262144, "T1": 16384, "T2": 16384, "S": 65536}
    assert cfg.size_kb() == {"D1": 256, "D2": 256, "T1": 16, "T2": 16, "S": 64}
    assert CacheConfig.typical(256, 1024, 64, element_bits=16).size_kb()["S"] == 128


@pytest.mark.parametrize("dk,c_k", [(6, 1), (6, 2), (6, 4), (6, 6), (8, 3), (1, 1)])
def test_phase_law(dk, c_k):
    spec = LayerSpec(3, 2 * dk, 4, dk, 2)
    plan = plan_mha(spec, CacheConfig.typical(3, 2 * dk, c_k))
    assert plan.phases == math.ceil(dk / c_k)
    assert plan.sessions("MHA.1") == plan.sessions("MHA.3") == plan.sessions("MHA.6") == 2 * dk
    phases = {s.phase for s in plan.steps if s.op == "MHA.4"}
    assert phases == set(range(1, plan.phases + 1))


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 6), st.data())
def test_planned_execution_matches_oracle(n, heads, dk, data):
    c_k = data.draw(st.integers(1, dk))
    seed = data.draw(st.integers(0, 1000))
    spec = LayerSpec(n, heads * dk, 5, dk, heads)
    w = random_layer(spec, seed)
    x = np.random.default_rng(seed).normal(size=(n, spec.hidden))
    cfg = CacheConfig.typical(n, spec.hidden, c_k)
    assert np.allclose(execute_mha_plan(spec, cfg, x, w), attention_forward(x, w, spec) + x, atol=1e-9)
    assert np.allclose(execute_ff_plan(spec, cfg, x, w), feedforward_forward(x, w, spec) + x, atol=1e-9)
    check_residency(plan_mha(spec, cfg))


def test_repurposed_caches_are_freed_before_reuse():
    spec = LayerSpec(3, 8, 4, 4, 2)
    plan = plan_mha(spec, CacheConfig.typical(3, 8, 2))
    live = {name: set() for name in CACHE_NAMES}
    for step in plan.steps:
        for cache, tensor in step.reads:
            assert tensor in live[cache]
        for cache, tensor, _ in step.writes:
            if tensor not in live[cache]:
                # T caches hold one tensor at a time; S only the current head
                assert cache in ("D1", "D2") or not live[cache]
            live[cache].add(tensor)
        for cache, tensor in step.frees:
            live[cache].remove(tensor)
    assert live["T1"] == live["T2"] == live["S"] == set()


def test_dup_factor_larger_than_c_k():
    spec = LayerSpec(4, 8, 4, 4, 2)
    with pytest.raises(CapacityError):
        plan_mha(spec, CacheConfig.typical(4, 8, 2), dup_factor=4)
    plan = plan_mha(spec, CacheConfig.maximum(4, 8, 4), dup_factor=4)
    assert plan.high_water["T1"] == 4 * 4


def test_c_k_larger_than_head_width():
    with pytest.raises(SchemaError):
        plan_mha(LayerSpec(2, 4, 4, 2, 2), CacheConfig.typical(2, 4, 3))


def test_undersized_cache_fails():
    spec = LayerSpec(2, 6, 6, 6, 1)
    cfg = CacheConfig(D1=12, D2=12, T1=6, T2=6, S=3, c_k=3, sizing="custom")
    with pytest.raises(CapacityError) as exc:
        plan_mha(spec, cfg)
    assert exc.value.detail["cache"] == "S"


def test_feedforward_uses_only_d1_d2():
    spec = LayerSpec(2, 6, 10, 3, 2)
    plan = plan_ff(spec, CacheConfig.typical(2, 6, 3))
    assert plan.high_water == {"D1": 12, "D2": 12, "T1": 0, "T2": 0, "S": 0}


def test_maximum_sizing_high_water():
    spec = LayerSpec(4, 8, 4, 4, 2)
    cfg = CacheConfig.maximum(4, 8, 4)
    plan = plan_mha(spec, cfg)
    assert plan.phases == 1
    assert plan.high_water == cfg.sizes()


def test_empty_plan_and_json():
    plan = CachePlan("mha", CacheConfig.typical(1, 1, 1), 0)
    assert plan.high_water == {name: 0 for name in CACHE_NAMES}
    assert check_residency(plan) == plan.high_water
    spec = LayerSpec(2, 4, 4, 2, 2)
    d = plan_layer(spec, CacheConfig.typical(2, 4, 2))
    assert set(d) == {"ff", "mha"}
    text = plan_mha(spec, CacheConfig.typical(2, 4, 2)).to_json()
    assert json.loads(text)["phases"] == 1
    with pytest.raises(SchemaError):
        check_residency(plan, 0)


def test_config_validation():
    with pytest.raises(SchemaError):
        CacheConfig(1, 1, 1, 1, 1, c_k=0)
    with pytest.raises(SchemaError):
        CacheConfig(-1, 1, 1, 1, 1, c_k=1)
    with pytest.raises(SchemaError):
        plan_mha(LayerSpec(2, 4, 4, 2, 2, has_attention=False), CacheConfig.typical(2, 4, 2))
