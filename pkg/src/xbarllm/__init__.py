"""Functional and cost simulator for a dual-crossbar memristor transformer accelerator."""

from .cache import CacheConfig, CachePlan, check_residency, plan_ff, plan_mha
from .cost import ComponentCosts, CostReport, baseline_cost, cost_from_trace, latency_lower_bound, load_costs
from .crossbar import CrossbarConfig, SessionTrace, mac_digit_serial, simulate_layer
from .decomposer import Program, SubOp, decompose_layer, execute_exact
from .dense import DenseConfig, DenseCrossbar, store_weights
from .encoding import DigitCode, EncodingScheme, decode, encode
from .errors import XbarError
from .modelir import LayerSpec, QuantTensor, WeightSet, load_layer, quantize
from .oracle import layer_forward

__version__ = "0.1.0"

__all__ = [
    "CacheConfig", "CachePlan", "ComponentCosts", "CostReport", "CrossbarConfig", "DenseConfig",
    "DenseCrossbar", "DigitCode", "EncodingScheme", "LayerSpec", "Program", "QuantTensor",
    "SessionTrace", "SubOp", "WeightSet", "XbarError", "baseline_cost", "check_residency",
    "cost_from_trace", "decode", "decompose_layer", "encode", "execute_exact", "latency_lower_bound",
    "layer_forward", "load_costs", "load_layer", "mac_digit_serial", "plan_ff", "plan_mha",
    "quantize", "simulate_layer", "store_weights",
]
