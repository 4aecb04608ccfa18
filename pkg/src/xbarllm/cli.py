"""Command-line entry point: decompose, simulate, cost, sweep-base (plus helpers)."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cache import CacheConfig, plan_layer
from .cost import ARCHES, cost_from_trace, load_costs, scaling_sweep, sweep_csv
from .crossbar import CrossbarConfig, simulate_layer
from .decomposer import decompose_layer
from .dense import DenseConfig, store_weights
from .encoding import EncodingScheme, base_table
from .errors import ConfigError, SchemaError, XbarError
from .modelir import LayerSpec, layer_bytes, load_layer, load_matrix, matrix_bytes, random_layer

CONFIG_SECTIONS = {
    "crossbar": {"rows", "cols", "dup_factor", "scale_factor", "activation_bits", "adc_bits", "adc_range",
                 "dac_bits", "noise_fraction", "weight_bits", "dense_noise", "cache_bits", "mode"},
    "dense": {f.name for f in fields(DenseConfig)},
    "cache": {"c_k", "sizing", "element_bits"},
    "cost": {"table"},
}


def write_atomic(path: Path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename, so readers never see partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_all(out_dir: Path, files: dict[str, bytes]) -> None:
    for name in sorted(files):
        write_atomic(out_dir / name, files[name])


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", file=str(path)) from None
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: invalid TOML ({exc})", file=str(path)) from None
    for section, body in data.items():
        if section not in CONFIG_SECTIONS:
            raise SchemaError(f"unknown config section [{section}]", field=section)
        if not isinstance(body, dict):
            raise SchemaError(f"[{section}] must be a table", field=section)
        for key in body:
            if key not in CONFIG_SECTIONS[section]:
                raise SchemaError(f"unknown config key {section}.{key}", field=f"{section}.{key}")
    return data


def _adc_bits(value):
    if value in (None, 0, "none", "None", "wide"):
        return None
    try:
        return int(value)
    except (TypeError, ValueError):
        raise SchemaError(f"adc_bits must be an integer or 'none', got {value!r}",
                          field="crossbar.adc_bits") from None


def crossbar_config(conf: dict, args) -> tuple[CrossbarConfig, str]:
    c = dict(conf.get("crossbar", {}))
    for flag, key in (("noise", "noise_fraction"), ("dc", "dup_factor"), ("adc_bits", "adc_bits"),
                      ("scale_factor", "scale_factor"), ("mode", "mode")):
        if getattr(args, flag, None) is not None:
            c[key] = getattr(args, flag)
    mode = c.pop("mode", "crossbar")
    scheme = EncodingScheme(int(c.pop("scale_factor", 2)), int(c.pop("activation_bits", 8)))
    if "adc_bits" in c:
        c["adc_bits"] = _adc_bits(c["adc_bits"])
    try:
        cfg = CrossbarConfig(scheme=scheme, rng_seed=args.seed if args.seed is not None else 0, **c)
    except TypeError as exc:
        raise SchemaError(f"bad [crossbar] config: {exc}") from None
    return cfg, mode


def _cache_config(conf: dict, spec: LayerSpec) -> CacheConfig:
    c = conf.get("cache", {})
    sizing = c.get("sizing", "typical")
    c_k = c.get("c_k", min(64, spec.head_width))
    return CacheConfig.for_spec(spec, c_k=c_k, sizing=sizing, element_bits=c.get("element_bits", 8))


# -- subcommands --------------------------------------------------------------------

def cmd_decompose(args, conf) -> int:
    spec, _ = load_layer(args.weights, args.meta)
    program = decompose_layer(spec)
    write_all(args.out_dir, {"program.json": program.to_json().encode()})
    print(f"{len(program.subops)} sub-ops, {len(program.epilogues)} norm epilogues -> "
          f"{args.out_dir / 'program.json'}")
    return 0


def cmd_simulate(args, conf) -> int:
    if os.environ.get("CI") and args.seed is None:
        raise ConfigError("--seed is required when CI is set")
    spec, weights = load_layer(args.weights, args.meta)
    x = load_matrix(args.input, args.input_meta)
    if x.shape != (spec.n_tokens, spec.hidden):
        raise SchemaError(f"input has shape {list(x.shape)}, layer expects "
                          f"[{spec.n_tokens}, {spec.hidden}]", field="input")
    cfg, mode = crossbar_config(conf, args)
    dense_cfg = DenseConfig(**{"weight_bits": cfg.weight_bits, **conf.get("dense", {})})
    cache_cfg = _cache_config(conf, spec)
    program = decompose_layer(spec)

    files = {}
    if args.emit_cache_plan:
        files["cache_plan.json"] = _json_bytes(plan_layer(spec, cache_cfg, cfg.dup_factor))
    dense = store_weights(program, weights, dense_cfg)
    result = simulate_layer(program, x, weights, cfg, dense=dense, mode=mode)
    trace = result.trace_dict(cache_cfg)
    trace["mode"] = mode
    if args.compare:
        ref = simulate_layer(program, x, weights, cfg, dense=dense, mode="direct").output
        diff = np.abs(result.output - ref)
        trace["comparison"] = {"reference": "direct", "bit_identical": bool(np.array_equal(result.output, ref)),
                               "max_abs_diff": float(diff.max()) if diff.size else 0.0}
    blob, meta = matrix_bytes(result.output)
    files.update({"output.f32": blob, "output.json": meta, "trace.json": _json_bytes(trace)})
    if args.emit_layout:
        files["layout.json"] = dense.layout.to_json().encode()
    write_all(args.out_dir, files)
    print(f"simulated {len(program.subops)} sub-ops, {result.total_steps} compute steps -> {args.out_dir}")
    return 0


def cmd_cost(args, conf) -> int:
    table = args.costs or conf.get("cost", {}).get("table")
    costs = load_costs(table)
    traces = []
    for path in args.trace:
        try:
            traces.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read trace {path}: {exc}", file=str(path)) from None
    report = cost_from_trace(traces, costs)
    write_all(args.out_dir, {"cost_report.json": report.to_json().encode(),
                             "cost_breakdown.csv": report.breakdown_csv().encode()})
    print(f"area {report.area_mm2:.6g} mm^2, energy {report.energy_mj:.6g} mJ, "
          f"latency {report.latency_s:.6g} s (lower bound {report.t_lb:.6g} s)")
    return 0


def cmd_sweep_base(args, conf) -> int:
    rows = base_table(args.bits)
    print("base,scale_factor,digits,scale_cycle_product")
    for r in rows:
        print(f"{r['base']},{r['scale_factor']},{r['digits']},{r['scale_cycle_product']}")
    return 0


def cmd_sweep_area(args, conf) -> int:
    costs = load_costs(args.costs or conf.get("cost", {}).get("table"))
    sys.stdout.write(sweep_csv(scaling_sweep(args.params, ARCHES, costs)))
    return 0


def cmd_make_toy(args, conf) -> int:
    spec = LayerSpec(args.tokens, args.hidden, args.ff, args.hidden // args.heads, args.heads,
                     has_attention=not args.no_attention)
    seed = args.seed if args.seed is not None else 0
    weights = random_layer(spec, seed)
    x = np.random.default_rng([seed, 1]).uniform(-1.0, 1.0, (spec.n_tokens, spec.hidden))
    wb, wm = layer_bytes(spec, weights)
    xb, xm = matrix_bytes(x)
    write_all(args.out_dir, {"layer.f32": wb, "layer.json": wm, "input.f32": xb, "input.json": xm})
    print(f"wrote toy layer and input to {args.out_dir}")
    return 0


# -- parser -------------------------------------------------------------------------

def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    def default(v):
        return argparse.SUPPRESS if suppress else v
    p.add_argument("--config", type=Path, default=default(None), help="TOML config file")
    p.add_argument("--seed", type=int, default=default(None), help="RNG seed (required when CI is set)")
    p.add_argument("--out-dir", type=Path, default=default(Path(".")), help="output directory")
    p.add_argument("--emit-layout", action="store_true", default=default(False),
                   help="also write the dense-crossbar weight layout")
    p.add_argument("--emit-cache-plan", action="store_true", default=default(False),
                   help="also write the cache plan")
    p.add_argument("--json-errors", action="store_true", default=default(False),
                   help="print errors as one JSON line on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xbarllm", description="Dual-crossbar transformer inference simulator")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, fn):
        p = sub.add_parser(name, help=help_text)
        _add_globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = command("decompose", "compile a layer into sub-operations (JSON)", cmd_decompose)
    p.add_argument("--weights", type=Path, required=True, help="raw f32 weight file")
    p.add_argument("--meta", type=Path, required=True, help="JSON sidecar for the weights")

    p = command("simulate", "run a layer on the crossbar model", cmd_simulate)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="raw f32 input matrix")
    p.add_argument("--input-meta", type=Path, required=True, help="JSON sidecar with the input shape")
    p.add_argument("--noise", type=float, default=None, help="relative column-read noise bound")
    p.add_argument("--dc", type=int, default=None, help="column duplication factor")
    p.add_argument("--adc-bits", default=None, help="ADC resolution, or 'none' for an unbounded ADC")
    p.add_argument("--scale-factor", type=int, default=None, help="encoding scale factor S")
    p.add_argument("--mode", choices=("crossbar", "direct"), default=None)
    p.add_argument("--compare", action="store_true",
                   help="record the difference against the direct quantized engine in the trace")

    p = command("cost", "area/energy/latency report from traces", cmd_cost)
    p.add_argument("--trace", type=Path, action="append", required=True, help="trace JSON (repeatable)")
    p.add_argument("--costs", type=Path, default=None, help="cost table TOML (default: bundled)")

    p = command("sweep-base", "digits and scale-cycle product per encoding base (CSV)", cmd_sweep_base)
    p.add_argument("--bits", type=int, default=8)

    p = command("sweep-area", "area versus parameter count per architecture (CSV)", cmd_sweep_area)
    p.add_argument("--params", type=float, nargs="+", default=[1.5e9, 11e9, 65e9, 175e9])
    p.add_argument("--costs", type=Path, default=None)

    p = command("make-toy", "write a random toy layer and input", cmd_make_toy)
    p.add_argument("--tokens", type=int, default=4)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--ff", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--no-attention", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "make-toy" and args.hidden % args.heads:
            raise SchemaError("--hidden must be divisible by --heads")
        conf = load_config(args.config)
        return args.func(args, conf)
    except XbarError as exc:
        if args.json_errors:
            print(json.dumps(exc.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
