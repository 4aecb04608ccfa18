"""Area, energy and latency accounting.

Unit costs come from a TOML table (see data/default_costs.toml). Energy is the
sum over trace event counters of count x per-operation energy; area is the
instantiated hardware (computation crossbars, dense banks, caches, scalar
units) times unit areas; latency sums, per session, the slowest of compute,
weight streaming and activation reads, so it can never undercut the transfer
lower bound.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import AccountingError, ConfigError, SchemaError

ARCHES = ("MultiBit", "SingleBit", "Traditional")
GPT3_PARAMS = 175e9

# published comparative figures, echoed next to the model's own numbers
REFERENCE_RATIOS = {
    "area_vs_multi_bit": 6.0,
    "area_vs_single_bit": 39.0,
    "energy_vs_single_bit": 18.0,
    "adp_vs_tpu_gpu": 68.0,
    "energy_saving_vs_tpu_gpu": 0.69,
    "gpt3_area_fraction_vs_baseline": 1 / 51,
    "gpt3_baseline_chips": 2777,
}


@dataclass(frozen=True)
class Unit:
    area_mm2: float
    energy_pj: float


@dataclass(frozen=True)
class Timing:
    cycle_time_s: float = 100e-9
    adc_share: int = 128
    norm_cycle_s: float = 100e-9
    weight_bandwidth_bps: float = 819e9
    cache_bandwidth_bps: float = 8e12


@dataclass(frozen=True)
class ArchParams:
    compute_crossbars: int = 16
    compute_rows: int = 128
    compute_cols: int = 128
    compute_dac_bits: int = 8
    compute_adc_bits: int = 8
    compute_register_bits: int = 6
    compute_register_rows: int = 128
    compute_register_cols: int = 64
    dense_dac_bits: int = 1
    dense_adc_bits: int = 2
    dense_register_bits: int = 8
    dense_register_count: int = 256


@dataclass(frozen=True)
class BaselineParams:
    rows: int = 128
    cols: int = 128
    crossbars_per_chip: int = 16128
    chip_area_mm2: float = 85.4
    cells_per_param: dict = field(default_factory=lambda: {"MultiBit": 1, "SingleBit": 8, "Traditional": 4})
    dac_bits: dict = field(default_factory=lambda: {"MultiBit": 8, "SingleBit": 1, "Traditional": 8})
    adc_bits: dict = field(default_factory=lambda: {"MultiBit": 8, "SingleBit": 8, "Traditional": 8})
    input_cycles: dict = field(default_factory=lambda: {"MultiBit": 1, "SingleBit": 8, "Traditional": 1})
    register_bits: int = 1024


_UNITS = ("memristor_cell", "fixed_resistor", "register_bit", "shift_add", "sample_hold",
          "f_unit", "encoder", "norm_unit", "cache_bit")


@dataclass(frozen=True)
class ComponentCosts:
    technology: str
    dac: dict[int, Unit]
    adc: dict[int, Unit]
    memristor_cell: Unit
    fixed_resistor: Unit
    register_bit: Unit
    shift_add: Unit
    sample_hold: Unit
    f_unit: Unit
    encoder: Unit
    norm_unit: Unit
    cache_bit: Unit
    timing: Timing = field(default_factory=Timing)
    arch: ArchParams = field(default_factory=ArchParams)
    baseline: BaselineParams = field(default_factory=BaselineParams)

    def __post_init__(self):
        for kind in ("dac", "adc"):
            table = getattr(self, kind)
            prev = None
            for bits in sorted(table):
                u = table[bits]
                _check_unit(u, f"{kind}.{bits}")
                if prev is not None and (u.area_mm2 < prev.area_mm2 or u.energy_pj < prev.energy_pj):
                    raise SchemaError(f"{kind} costs must not decrease with bit width", field=f"{kind}.{bits}")
                prev = u
        for name in _UNITS:
            _check_unit(getattr(self, name), name)
        t = self.timing
        if t.cycle_time_s <= 0 or t.norm_cycle_s < 0 or t.adc_share < 1:
            raise SchemaError("timing values must be positive", field="timing")
        if t.weight_bandwidth_bps <= 0 or t.cache_bandwidth_bps <= 0:
            raise ConfigError("bandwidths must be > 0", field="timing")

    def converter(self, kind: str, bits: int) -> Unit:
        table = getattr(self, kind)
        if bits not in table:
            raise ConfigError(f"cost table has no {bits}-bit {kind.upper()}", field=f"{kind}.{bits}")
        return table[bits]


def _check_unit(u: Unit, name: str) -> None:
    if u.area_mm2 < 0 or u.energy_pj < 0 or not (math.isfinite(u.area_mm2) and math.isfinite(u.energy_pj)):
        raise SchemaError(f"{name}: costs must be finite and >= 0", field=name)


def _unit(d: dict, path: str) -> Unit:
    if not isinstance(d, dict):
        raise SchemaError(f"{path} must be a table", field=path)
    try:
        return Unit(float(d["area_mm2"]), float(d["energy_pj"]))
    except KeyError as exc:
        raise SchemaError(f"{path}.{exc.args[0]} is missing", field=f"{path}.{exc.args[0]}") from None
    except (TypeError, ValueError):
        raise SchemaError(f"{path} values must be numbers", field=path) from None


def _section(cls, d: dict | None, path: str):
    d = d or {}
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise SchemaError(f"unknown key {path}.{sorted(extra)[0]}", field=f"{path}.{sorted(extra)[0]}")
    return cls(**d)


def costs_from_dict(d: dict) -> ComponentCosts:
    def converters(kind):
        table = d.get(kind)
        if not table:
            raise SchemaError(f"{kind} table is missing", field=kind)
        try:
            return {int(bits): _unit(u, f"{kind}.{bits}") for bits, u in table.items()}
        except ValueError:
            raise SchemaError(f"{kind} keys must be bit widths", field=kind) from None

    missing = [n for n in _UNITS if n not in d]
    if missing:
        raise SchemaError(f"{missing[0]} is missing from the cost table", field=missing[0])
    return ComponentCosts(
        technology=str(d.get("technology", "unlabelled")),
        dac=converters("dac"), adc=converters("adc"),
        **{n: _unit(d[n], n) for n in _UNITS},
        timing=_section(Timing, d.get("timing"), "timing"),
        arch=_section(ArchParams, d.get("architecture"), "architecture"),
        baseline=_section(BaselineParams, d.get("baseline"), "baseline"),
    )


def load_costs(path: str | Path | None = None) -> ComponentCosts:
    """Read a cost table; ``None`` loads the bundled ISAAC-like defaults."""
    try:
        if path is None:
            text = resources.files("xbarllm").joinpath("data/default_costs.toml").read_text()
        else:
            text = Path(path).read_text()
        return costs_from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"cost table is not valid TOML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read cost table: {exc}") from None


# -- reports ------------------------------------------------------------------------

@dataclass
class CostReport:
    area_mm2: float
    area_breakdown: dict[str, float]
    energy_mj: float
    energy_breakdown: dict[str, float]
    latency_s: float
    adp_mm2_s: float
    t_lb_a: float = 0.0
    t_lb_w: float = 0.0
    alpha_a: float = 0.0
    compute_steps: int = 0
    label: str = ""
    annotations: dict = field(default_factory=dict)

    @property
    def t_lb(self) -> float:
        return max(self.t_lb_a, self.t_lb_w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_lb"] = self.t_lb
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def breakdown_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "component", "value", "fraction"])
        for kind, table, total in (("area_mm2", self.area_breakdown, self.area_mm2),
                                   ("energy_mj", self.energy_breakdown, self.energy_mj)):
            for name, v in table.items():
                w.writerow([kind, name, repr(v), repr(v / total) if total else "0.0"])
        return buf.getvalue()


def _closed(table: dict[str, float]) -> tuple[dict[str, float], float]:
    """Sorted breakdown and its total, summed in the same order so they agree exactly."""
    ordered = {k: table[k] for k in sorted(table)}
    return ordered, sum(ordered.values())


def latency_lower_bound(alpha_a: float, S_a: float, b_a: float, B_a: float,
                        N_w: float, b_w: float, B_w: float) -> tuple[float, float, float]:
    """(activation bound, weight bound, their max) in seconds."""
    if not (B_a > 0 and B_w > 0):
        raise ConfigError("bandwidths must be > 0", B_a=B_a, B_w=B_w)
    t_a = alpha_a * S_a * b_a / B_a
    t_w = N_w * b_w / B_w
    return t_a, t_w, max(t_a, t_w)


# -- proposed architecture -------------------------------------------------------

def compute_crossbar_area(costs: ComponentCosts) -> dict[str, float]:
    a = costs.arch
    shared = math.ceil(a.compute_cols / costs.timing.adc_share)
    reg_bits = a.compute_register_bits * a.compute_register_rows * a.compute_register_cols
    per = {
        "compute.dac": a.compute_rows * costs.converter("dac", a.compute_dac_bits).area_mm2,
        "compute.adc": shared * costs.converter("adc", a.compute_adc_bits).area_mm2,
        "compute.resistors": a.compute_rows * a.compute_cols * costs.fixed_resistor.area_mm2,
        "compute.sample_hold": a.compute_cols * costs.sample_hold.area_mm2,
        "compute.shift_add": shared * costs.shift_add.area_mm2,
        "compute.registers": reg_bits * costs.register_bit.area_mm2,
        "compute.f_unit": costs.f_unit.area_mm2,
        "compute.encoder": costs.encoder.area_mm2,
    }
    return {k: v * a.compute_crossbars for k, v in per.items()}


def dense_bank_area(costs: ComponentCosts, rows: int = 1024, cols: int = 65536) -> dict[str, float]:
    a = costs.arch
    return {
        "dense.dac": cols * costs.converter("dac", a.dense_dac_bits).area_mm2,
        "dense.adc": rows * costs.converter("adc", a.dense_adc_bits).area_mm2,
        "dense.cells": rows * cols * costs.memristor_cell.area_mm2,
        "dense.registers": a.dense_register_bits * a.dense_register_count * costs.register_bit.area_mm2,
    }


def proposed_area(costs: ComponentCosts, n_banks: int, cache_bits: int,
                  bank_rows: int = 1024, bank_cols: int = 65536) -> dict[str, float]:
    area = compute_crossbar_area(costs)
    for k, v in dense_bank_area(costs, bank_rows, bank_cols).items():
        area[k] = v * n_banks
    area["cache"] = cache_bits * costs.cache_bit.area_mm2
    area["norm_unit"] = costs.norm_unit.area_mm2
    return area


def _event_energy(costs: ComponentCosts) -> dict[str, list[tuple[str, float]]]:
    a = costs.arch
    adc = costs.converter("adc", a.compute_adc_bits).energy_pj
    dac = costs.converter("dac", a.compute_dac_bits).energy_pj
    return {
        "compute_steps": [], "column_reads": [], "dense_read_bits": [],
        "adc_conversions": [("compute.adc", adc)],
        "dac_conversions": [("compute.dac", dac)],
        "resistor_on": [("compute.resistors", costs.fixed_resistor.energy_pj)],
        "shift_add": [("compute.shift_add", costs.shift_add.energy_pj)],
        "sample_hold": [("compute.sample_hold", costs.sample_hold.energy_pj)],
        "register_bit_writes": [("compute.registers", costs.register_bit.energy_pj)],
        "encoder": [("compute.encoder", costs.encoder.energy_pj)],
        "f_unit": [("compute.f_unit", costs.f_unit.energy_pj)],
        "norm_epilogue": [("norm_unit", costs.norm_unit.energy_pj)],
        "cache_read_bits": [("cache", costs.cache_bit.energy_pj)],
        "cache_write_bits": [("cache", costs.cache_bit.energy_pj)],
        "dense_column_reads": [("dense.dac", costs.converter("dac", a.dense_dac_bits).energy_pj)],
        "dense_cell_reads": [("dense.cells", costs.memristor_cell.energy_pj),
                             ("dense.adc", costs.converter("adc", a.dense_adc_bits).energy_pj)],
    }


def _session_time(summary: dict, trace: dict, costs: ComponentCosts) -> float:
    t = costs.timing
    sessions = summary["sessions"]
    dup = trace["crossbar"]["dup_factor"]
    steps_per_session = summary["steps"] // sessions
    tile_rounds = math.ceil(summary["tiles"] / costs.arch.compute_crossbars)
    adc_rounds = math.ceil(dup / t.adc_share)
    compute = steps_per_session * tile_rounds * adc_rounds * t.cycle_time_s
    weights = summary["weight_bits_streamed"] / sessions / t.weight_bandwidth_bps
    acts = summary["activation_bits_read"] / sessions / t.cache_bandwidth_bps
    return max(compute, weights, acts)


def cost_from_trace(traces: dict | list[dict], costs: ComponentCosts | None = None) -> CostReport:
    """Cost of one or more simulated layers (trace dicts from the simulator)."""
    costs = costs or load_costs()
    traces = [traces] if isinstance(traces, dict) else list(traces)
    energy_of = _event_energy(costs)
    energy: dict[str, float] = {}
    latency = 0.0
    cache_read_bits = weight_bits = steps = 0
    act_elements = 0
    mapped_bits, banks_cfg, cache_bits = 0, 1, 0
    bank_rows, bank_cols, b_a, b_w = 1024, 65536, 8, 8
    for tr in traces:
        try:
            for name, count in tr["totals"].items():
                if name not in energy_of:
                    raise AccountingError(f"trace has unknown component counter {name!r}", component=name)
                for comp, pj in energy_of[name]:
                    energy[comp] = energy.get(comp, 0.0) + count * pj * 1e-9
            for s in tr["subops"]:
                if s["sessions"]:
                    latency += s["sessions"] * _session_time(s, tr, costs)
            latency += tr["totals"].get("norm_epilogue", 0) * costs.timing.norm_cycle_s
            cache_read_bits += tr["totals"]["cache_read_bits"]
            weight_bits += tr["totals"]["dense_read_bits"]
            steps += tr["totals"]["compute_steps"]
            layer = tr["layer"]
            act_elements += layer["n_tokens"] * layer["hidden"]
            dense = tr["dense"]
            mapped_bits += dense["mapped_bits"]
            banks_cfg = max(banks_cfg, dense["banks_configured"])
            bank_rows, bank_cols = dense["bank_geometry"]
            cache_bits = max(cache_bits, tr["cache"]["total_bits"])
            b_a, b_w = tr["crossbar"]["cache_bits"], tr["crossbar"]["weight_bits"]
        except KeyError as exc:
            raise SchemaError(f"trace is missing field {exc.args[0]!r}", field=str(exc.args[0])) from None

    capacity = bank_rows * bank_cols * (tr["dense"]["bits_per_cell"] if traces else 2)
    n_banks = max(banks_cfg, math.ceil(mapped_bits / capacity))
    area, area_total = _closed(proposed_area(costs, n_banks, cache_bits, bank_rows, bank_cols))
    energy, energy_total = _closed(energy)

    alpha_a = cache_read_bits / (b_a * act_elements) if act_elements else 0.0
    t_a, t_w, t_lb = latency_lower_bound(alpha_a, act_elements, b_a, costs.timing.cache_bandwidth_bps,
                                         weight_bits / b_w, b_w, costs.timing.weight_bandwidth_bps)
    if latency < t_lb * (1 - 1e-12):
        raise AccountingError(f"simulated latency {latency} s undercuts the lower bound {t_lb} s")
    report = CostReport(area_total, area, energy_total, energy, latency, area_total * latency,
                        t_a, t_w, alpha_a, steps, label="proposed")
    report.annotations = annotations(report, traces, costs)
    return report


# -- baselines ------------------------------------------------------------------------

def baseline_crossbars(n_params: float, arch: str, costs: ComponentCosts) -> int:
    b = costs.baseline
    if arch not in ARCHES:
        raise ConfigError(f"unknown baseline architecture {arch!r}")
    try:
        cells = b.cells_per_param[arch]
    except KeyError:
        raise ConfigError(f"cost table has no cells_per_param entry for {arch}",
                          field=f"baseline.cells_per_param.{arch}") from None
    return math.ceil(n_params * cells / (b.rows * b.cols))


def baseline_crossbar_area(arch: str, costs: ComponentCosts) -> dict[str, float]:
    b = costs.baseline
    try:
        dac, adc = costs.converter("dac", b.dac_bits[arch]), costs.converter("adc", b.adc_bits[arch])
    except KeyError:
        raise ConfigError(f"cost table lacks converter widths for {arch}", field="baseline") from None
    shared = math.ceil(b.cols / costs.timing.adc_share)
    return {
        "dac": b.rows * dac.area_mm2,
        "adc": shared * adc.area_mm2,
        "cells": b.rows * b.cols * costs.memristor_cell.area_mm2,
        "sample_hold": b.cols * costs.sample_hold.area_mm2,
        "shift_add": shared * costs.shift_add.area_mm2,
        "registers": b.register_bits * costs.register_bit.area_mm2,
    }


def baseline_cost(model, arch: str, costs: ComponentCosts | None = None, n_tokens: int | None = None) -> CostReport:
    """All parameters resident in conventional crossbars; every crossbar sees every token.

    ``model`` is a parameter count or a list of LayerSpec (whose token count is
    used unless ``n_tokens`` is given).
    """
    costs = costs or load_costs()
    if isinstance(model, (int, float)):
        n_params, tokens = float(model), n_tokens or 1
    else:
        specs = list(model)
        n_params = float(sum(s.parameter_count() for s in specs))
        tokens = n_tokens or (specs[0].n_tokens if specs else 1)
    b = costs.baseline
    n_xbar = baseline_crossbars(n_params, arch, costs)
    per = baseline_crossbar_area(arch, costs)
    area, area_total = _closed({k: v * n_xbar for k, v in per.items()})

    cycles = b.input_cycles[arch]
    shared = math.ceil(b.cols / costs.timing.adc_share)
    dac = costs.converter("dac", b.dac_bits[arch]).energy_pj
    adc = costs.converter("adc", b.adc_bits[arch]).energy_pj
    passes = n_xbar * tokens * cycles
    energy, energy_total = _closed({
        "dac": passes * b.rows * dac * 1e-9,
        "adc": passes * b.cols * adc * 1e-9,
        "cells": passes * b.rows * b.cols * costs.memristor_cell.energy_pj * 1e-9,
        "sample_hold": passes * b.cols * costs.sample_hold.energy_pj * 1e-9,
        "shift_add": passes * b.cols * costs.shift_add.energy_pj * 1e-9,
    })
    latency = tokens * cycles * shared * costs.timing.cycle_time_s if n_xbar else 0.0
    return CostReport(area_total, area, energy_total, energy, latency, area_total * latency,
                      label=arch, annotations={"crossbars": n_xbar,
                                               "chips": n_xbar / b.crossbars_per_chip})


def proposed_area_for(n_params: float, costs: ComponentCosts, cache_bits: int | None = None,
                      weight_bits: int = 8) -> float:
    """Area of the proposed architecture holding ``n_params`` weights in 1k x 64k 2-bit banks."""
    if cache_bits is None:
        # typical cache sizing for 256 tokens x 1024 dims at 8 bits, c_k = 64
        cache_bits = (2 * 256 * 1024 + 2 * 256 * 64 + 256 * 256) * 8
    banks = max(1, math.ceil(n_params * weight_bits / (1024 * 65536 * 2)))
    return sum(proposed_area(costs, banks, cache_bits).values())


def scaling_sweep(param_counts, arches=ARCHES, costs: ComponentCosts | None = None) -> list[dict]:
    """Area versus model size for each baseline and the proposed architecture."""
    costs = costs or load_costs()
    rows = []
    for n in param_counts:
        for arch in arches:
            rows.append({"params": n, "arch": arch, "area_mm2": baseline_cost(n, arch, costs).area_mm2})
        rows.append({"params": n, "arch": "Proposed", "area_mm2": proposed_area_for(n, costs)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["params", "arch", "area_mm2"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def annotations(report: CostReport, traces: list[dict], costs: ComponentCosts) -> dict:
    """The model's comparative ratios next to the published reference values (not asserted)."""
    params = sum(t["dense"]["mapped_weights"] for t in traces)
    tokens = traces[0]["layer"]["n_tokens"] if traces else 1
    out = {}
    if params:
        mb = baseline_cost(params, "MultiBit", costs, tokens)
        sb = baseline_cost(params, "SingleBit", costs, tokens)
        out["area_vs_multi_bit"] = mb.area_mm2 / report.area_mm2
        out["area_vs_single_bit"] = sb.area_mm2 / report.area_mm2
        out["energy_vs_single_bit"] = sb.energy_mj / report.energy_mj if report.energy_mj else None
    gpt3 = baseline_cost(GPT3_PARAMS, "Traditional", costs)
    out["gpt3_area_fraction_vs_baseline"] = proposed_area_for(GPT3_PARAMS, costs) / gpt3.area_mm2
    out["gpt3_baseline_chips"] = gpt3.annotations["chips"]
    out["adp_vs_tpu_gpu"] = None  # TPU/GPU costs are not modelled
    out["energy_saving_vs_tpu_gpu"] = None
    return {k: {"model": v, "reference": REFERENCE_RATIOS[k]} for k, v in sorted(out.items())}
