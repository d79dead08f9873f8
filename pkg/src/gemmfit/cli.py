"""``gemmfit`` command line.

Exit codes: 0 success (lint: clean), 1 lint warnings, 2 errors (lint:
ill-formed config), 64 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import logging
import os
import sys
from fractions import Fraction
from typing import Any, Callable, Sequence

from . import __version__
from .calibration import (
    CalibrationError,
    Interpolation,
    SweepSpec,
    emit_bench_plan,
    export_sweep,
    ingest_measurements,
    run_sweep,
    write_measurements,
    write_plan,
)
from .gemm import (
    DEFAULT_COST_MODEL,
    GemmShape,
    analyze,
    is_wave_free,
    load_cost_model,
    select_tile,
    tile_waste,
    wave_stats,
)
from .hardware import GpuSpecError, TileSpec, resolve_gpu
from .optimizer import SearchSpace, suggest, swiglu_dff_search
from .rules import DEFAULT_WAVE_THRESHOLD, explain, lint
from .transformer import (
    CONFIG_FIELDS,
    ConfigError,
    GemmRole,
    config_from_mapping,
    config_to_dict,
    decompose,
    decomposed_layer_flops,
    forward_flops_per_layer,
    kernel_flops,
    kernel_latency_us,
    latency_proportions,
    param_count,
)
from ._toml import TOMLDecodeError, read_toml

EXIT_OK, EXIT_WARN, EXIT_ERROR, EXIT_USAGE = 0, 1, 2, 64
DEFAULT_GPU_ENV = "GEMMFIT_GPU"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs) -> None:
        # model flags like --v and --a must never prefix-match other options
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- output helpers ---------------------------------------------------------------


def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, dict):
        return {str(_jsonable(k)): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _emit_json(obj: Any, out) -> None:
    json.dump(_jsonable(obj), out, indent=2, sort_keys=False)
    out.write("\n")


def _table(headers: Sequence[str], rows: Sequence[Sequence[Any]], out) -> None:
    cells = [[str(h) for h in headers]] + [[_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    for i, r in enumerate(cells):
        out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
        if i == 0:
            out.write("  ".join("-" * w for w in widths) + "\n")


def _cell(c: Any) -> str:
    if isinstance(c, float):
        return f"{c:.4g}" if abs(c) < 1e5 else f"{c:.4e}"
    return str(c)


def _csv(headers: Sequence[str], rows: Sequence[Sequence[Any]], out) -> None:
    import csv

    w = csv.writer(out, lineterminator="\n")
    w.writerow(headers)
    for r in rows:
        w.writerow([repr(c) if isinstance(c, float) else c for c in r])


def _render(args, headers, rows, payload, out) -> None:
    if args.format == "json":
        _emit_json(payload, out)
    elif args.format == "csv":
        _csv(headers, rows, out)
    else:
        _table(headers, rows, out)


# -- argument groups ----------------------------------------------------------------

_INT_FIELDS = ("a", "b", "h", "L", "s", "t", "v", "d_ff", "pipeline_stages")
_CHOICE_FIELDS = {
    "activation": ("glu_like", "swiglu"),
    "attention_impl": ("standard", "flash"),
    "layer_layout": ("sequential", "parallel"),
    "positional": ("learned", "rotary", "alibi"),
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration (inline flags override --config)")
    g.add_argument("--config", help="model config file (TOML, keys = field names)")
    for name in _INT_FIELDS:
        flag = "--" + name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{name}", type=int, metavar="N")
    g.add_argument("--mlp-ratio", dest="cfg_mlp_ratio", metavar="R", help="e.g. 4 or 8/3")
    for name, choices in _CHOICE_FIELDS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=f"cfg_{name}", choices=choices)
    g.add_argument("--dtype", dest="cfg_dtype")
    g.add_argument("--vocab-parallel", dest="cfg_vocab_parallel", action="store_const", const=True)


def _add_gpu_args(p: argparse.ArgumentParser, calibration: bool = True) -> None:
    p.add_argument(
        "--gpu",
        default=os.environ.get(DEFAULT_GPU_ENV, "A100"),
        help="built-in name (V100, A100, H100, MI250X) or spec file path (default: A100)",
    )
    if calibration:
        p.add_argument("--calibration", metavar="CSV", help="measured throughputs to use")
        p.add_argument(
            "--interpolation",
            choices=[i.value for i in Interpolation],
            default=Interpolation.NEAREST_LOG_SHAPE.value,
        )
        p.add_argument("--cost-model", metavar="TOML", help="override alignment penalty constants")


def _add_format(p: argparse.ArgumentParser, choices=("table", "csv", "json")) -> None:
    p.add_argument("--format", choices=choices, default="table")


def _add_sweep_args(p: argparse.ArgumentParser, required: bool) -> None:
    g = p.add_argument_group("sweep")
    g.add_argument("--sweep-dim", required=required, help="config field to vary (h, a, b, s, t, v, d_ff)")
    g.add_argument("--start", type=int, required=required)
    g.add_argument("--stop", type=int, required=required)
    g.add_argument("--step", type=int, default=64)
    g.add_argument("--roles", help="comma-separated kernel roles, e.g. MlpUp,QkvTransform")
    g.add_argument("--head-dim", type=int, help="hold h/a fixed while sweeping")


def _build_config(args):
    data: dict[str, Any] = {}
    if args.config:
        try:
            data.update(read_toml(args.config))
        except (OSError, TOMLDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    for name in CONFIG_FIELDS:
        value = getattr(args, f"cfg_{name}", None)
        if value is not None:
            data[name] = value
    if "h" not in data:
        raise UsageError("model hidden size is required (--h or --config)")
    return config_from_mapping(data, source=args.config or "<flags>")


def _gpu(args):
    return resolve_gpu(args.gpu)


def _calibration(args):
    if not getattr(args, "calibration", None):
        return None
    return ingest_measurements(args.calibration, args.interpolation)


def _cost(args):
    path = getattr(args, "cost_model", None)
    return load_cost_model(path) if path else DEFAULT_COST_MODEL


def _roles(text: str | None):
    if not text:
        return None
    try:
        return tuple(GemmRole(r.strip()) for r in text.split(",") if r.strip())
    except ValueError:
        raise UsageError(
            f"bad role list {text!r}; roles: {', '.join(r.value for r in GemmRole)}"
        ) from None


def _sweep_spec(args, cfg) -> SweepSpec:
    return SweepSpec(
        base=cfg,
        dim=args.sweep_dim,
        start=args.start,
        stop=args.stop,
        step=args.step,
        roles=_roles(args.roles),
        head_dim=args.head_dim,
    )


# -- subcommands ----------------------------------------------------------------------


def cmd_lint(args, out) -> int:
    cfg = _build_config(args)
    report = lint(cfg, _gpu(args), args.wave_threshold)
    headers = ("rule", "severity", "subject", "observed", "suggestion", "message")
    rows = [
        (d.rule_id, d.severity.value, d.subject, d.observed,
         (f"{d.fix_field}=" + "|".join(map(str, d.suggestion))) if d.suggestion else "", d.message)
        for d in report.diagnostics
    ]
    if args.format == "json":
        _emit_json(
            {
                "config": config_to_dict(cfg),
                "gpu": report.gpu_name,
                "pass": report.passed,
                "counts": report.counts,
                "diagnostics": report.diagnostics,
                "notes": report.notes,
            },
            out,
        )
    elif args.format == "csv":
        _csv(headers, rows, out)
    else:
        if rows:
            _table(headers, rows, out)
        c = report.counts
        verdict = "PASS" if report.passed else "FAIL"
        out.write(f"{verdict}: {c['error']} error(s), {c['warn']} warning(s), {c['info']} info\n")
        for note in report.notes:
            out.write(f"note: {note}\n")
    return report.exit_code


def cmd_decompose(args, out) -> int:
    cfg = _build_config(args)
    gpu = _gpu(args)
    cal, cost = _calibration(args), _cost(args)
    dec = decompose(cfg)
    fractions = latency_proportions(cfg, gpu, cal, cost)
    headers = ("role", "batch", "m", "k", "n", "flops", "tile", "waves", "wave_eff",
               "aligned", "tflops", "latency_us", "latency_share")
    rows = []
    for role, g in dec.all_kernels():
        if role is GemmRole.FusedFlashAttention:
            lat = kernel_latency_us(role, g, gpu, cal, cost)
            f = kernel_flops(role, g)
            rows.append((role.value, g.batch, g.m, g.k, g.n, f, "-", "-", "-", "-",
                         f / (lat * 1e6), lat, fractions.get(role, 0.0)))
            continue
        a = analyze(g, gpu, cal, cost)
        share = fractions.get(role, "-") if role is not GemmRole.LogitOutput else "-"
        rows.append((role.value, g.batch, g.m, g.k, g.n, a.flops, str(a.chosen_tile),
                     a.waves.wave_count, a.waves.wave_efficiency, a.alignment.aligned,
                     a.predicted_tflops, a.predicted_latency_us, share))
    payload = {
        "config": config_to_dict(cfg),
        "gpu": gpu.name,
        "layer": [dict(zip(headers, r)) for r in rows],
        "markers": [op.name for op in dec.ops if op.role is None],
    }
    _render(args, headers, rows, payload, out)
    return EXIT_OK


def cmd_params(args, out) -> int:
    cfg = _build_config(args)
    pc = param_count(cfg)
    rows = [("exact", pc.exact), ("approx_12h2L", pc.approx)]
    if pc.closed_form is not None:
        rows.append(("closed_form", pc.closed_form))
    rows += [(f"breakdown.{k}", v) for k, v in pc.breakdown.items()]
    _render(args, ("quantity", "value"), rows, pc, out)
    return EXIT_OK


def cmd_flops(args, out) -> int:
    cfg = _build_config(args)
    dec = decompose(cfg)
    per_gpu = decomposed_layer_flops(cfg)
    rows = [
        ("forward_flops_per_layer", forward_flops_per_layer(cfg)),
        ("decomposed_per_gpu_layer", per_gpu),
        ("decomposed_all_ranks_layer", per_gpu * cfg.t),
        ("forward_flops_model_layers", forward_flops_per_layer(cfg) * cfg.L),
        ("logit_gemm", kernel_flops(GemmRole.LogitOutput, dec.logit)),
    ]
    rows += [(f"kernel.{r.value}", kernel_flops(r, g)) for r, g in dec.gemms()]
    _render(args, ("quantity", "flops"), rows, dict(rows), out)
    return EXIT_OK


def cmd_wave(args, out) -> int:
    gpu = None
    sms = args.sms
    if sms is None or args.tile is None:
        gpu = _gpu(args)
        sms = sms or gpu.sm_count
    shape = GemmShape(args.m, args.k, args.n, batch=args.batch, dtype=args.dtype)
    tile = TileSpec.parse(args.tile) if args.tile else select_tile(shape, gpu)
    ws = wave_stats(shape, tile, sms)
    rows = [
        ("tile", str(tile)),
        ("sm_count", sms),
        ("grid", f"{ws.grid_rows}x{ws.grid_cols}"),
        ("total_blocks", ws.total_blocks),
        ("waves", ws.wave_count),
        ("full_waves", ws.full_waves),
        ("tail_blocks", ws.tail_blocks),
        ("wave_efficiency", ws.wave_efficiency),
        ("tile_waste", tile_waste(args.m, args.n, tile)),
        ("wave_free_either_orientation", is_wave_free(args.m, args.n, tile, sms)),
    ]
    _render(args, ("quantity", "value"), rows, dict(rows), out)
    return EXIT_OK


def cmd_suggest(args, out) -> int:
    cfg = _build_config(args)
    gpu = _gpu(args)
    vary = frozenset(v.strip() for v in args.vary.split(",") if v.strip())
    space = SearchSpace(
        vary=vary,
        h_step=args.h_step,
        d_ff_window=args.d_ff_window,
        budget_tolerance=args.budget_tolerance,
    )
    cands = suggest(cfg, gpu, space, _calibration(args), _cost(args), args.wave_threshold)
    if not cands:
        out.write("no candidate in the search space satisfies the rules and parameter budget\n")
        return EXIT_OK
    cands = cands[: args.top]
    headers = ("rank", "changes", "h", "a", "d_ff", "v", "t", "warns", "param_delta",
               "layer_latency_us")
    rows = [
        (c.rank,
         ", ".join(f"{k}:{o}->{n}" for k, (o, n) in c.changes.items()) or "(baseline)",
         c.config.h, c.config.a, c.config.ffn_dim, c.config.v, c.config.t,
         c.warn_count, c.param_delta_fraction, c.predicted_layer_latency_us)
        for c in cands
    ]
    payload = [dict(zip(headers, r)) for r in rows]
    _render(args, headers, rows, payload, out)
    if args.format == "table" and "a" in vary:
        out.write("caveat: fewer attention heads can cost model quality\n")
    return EXIT_OK


def cmd_swiglu(args, out) -> int:
    gpu = _gpu(args)
    cfg = _build_config(args)
    h = cfg.h
    ratio = Fraction(args.ratio)
    results = swiglu_dff_search(h, ratio, args.window, gpu, cfg, _calibration(args), _cost(args))
    target = round(ratio * h)
    rows = [(i + 1, r.d_ff, f"{r.d_ff / h:.4f}", r.d_ff - target, r.pow2_divisor, r.aligned,
             r.mlp_latency_us) for i, r in enumerate(results[: args.top])]
    headers = ("rank", "d_ff", "ratio", "offset", "pow2_divisor", "aligned", "mlp_latency_us")
    _render(args, headers, rows, [dict(zip(headers, r)) for r in rows], out)
    return EXIT_OK


def cmd_bench_plan(args, out) -> int:
    cfg = _build_config(args)
    gpu = _gpu(args)
    source = _sweep_spec(args, cfg) if args.sweep_dim else cfg
    rows = emit_bench_plan(source, gpu)
    if args.out:
        write_plan(rows, args.out)
        out.write(f"wrote {len(rows)} plan rows to {args.out}\n")
    else:
        write_plan(rows, out)
    return EXIT_OK


def cmd_ingest(args, out) -> int:
    table = ingest_measurements(args.path, args.interpolation)
    if args.format == "csv":
        write_measurements(table.records.values(), out)
    elif args.format == "json":
        _emit_json(
            {"records": list(table.records.values()), "skipped": table.skipped,
             "policy": table.policy}, out)
    else:
        out.write(f"{len(table)} measurement(s) loaded, {len(table.skipped)} row(s) skipped\n")
        for s in table.skipped:
            out.write(f"{s}\n")
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    cfg = _build_config(args)
    gpu = _gpu(args)
    spec = _sweep_spec(args, cfg)
    points = run_sweep(spec, gpu, _calibration(args), _cost(args))
    if args.out:
        export_sweep(points, args.out, x_name=args.sweep_dim)
        out.write(f"wrote {len(points)} sweep rows to {args.out}\n")
        return EXIT_OK
    if args.format == "csv":
        export_sweep(points, out, x_name=args.sweep_dim)
        return EXIT_OK
    headers = (args.sweep_dim, "role", "tflops", "latency_us", "wave_eff", "aligned")
    rows = [(p.x, p.role, p.predicted_tflops, p.predicted_latency_us, p.wave_efficiency,
             p.aligned) for p in points]
    _render(args, headers, rows, points, out)
    return EXIT_OK


def cmd_explain(args, out) -> int:
    try:
        text = explain(args.rule)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    out.write(f"{args.rule.upper()}: {text}\n")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gemmfit", description=__doc__.splitlines()[0].strip("`") if __doc__ else None)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=func)
        return sp

    sp = add("lint", cmd_lint, "check a model config against the shape rules")
    _add_config_args(sp)
    _add_gpu_args(sp, calibration=False)
    sp.add_argument("--wave-threshold", type=float, default=DEFAULT_WAVE_THRESHOLD)
    _add_format(sp)

    sp = add("decompose", cmd_decompose, "list a layer's GEMMs with tiling and predicted latency")
    _add_config_args(sp)
    _add_gpu_args(sp)
    _add_format(sp)

    sp = add("params", cmd_params, "parameter count")
    _add_config_args(sp)
    _add_format(sp)

    sp = add("flops", cmd_flops, "forward FLOPs per layer and per kernel")
    _add_config_args(sp)
    _add_format(sp)

    sp = add("wave", cmd_wave, "tile grid and wave quantization of one GEMM")
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--k", type=int, default=4096)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--dtype", default="fp16")
    sp.add_argument("--tile", help="e.g. 128x256; default: choose from the GPU's candidates")
    sp.add_argument("--sms", type=int, help="SM count (default: from --gpu)")
    _add_gpu_args(sp, calibration=False)
    _add_format(sp)

    sp = add("suggest", cmd_suggest, "search nearby parameter-preserving configs")
    _add_config_args(sp)
    _add_gpu_args(sp)
    sp.add_argument("--vary", default="a", help="comma-separated subset of a,h,d_ff,v,t")
    sp.add_argument("--h-step", type=int, default=64)
    sp.add_argument("--d-ff-window", type=int, default=1024)
    sp.add_argument("--budget-tolerance", type=float, default=0.02)
    sp.add_argument("--wave-threshold", type=float, default=DEFAULT_WAVE_THRESHOLD)
    sp.add_argument("--top", type=int, default=10)
    _add_format(sp)

    sp = add("swiglu-search", cmd_swiglu, "brute-force SwiGLU MLP width near ratio*h")
    _add_config_args(sp)
    _add_gpu_args(sp)
    sp.add_argument("--ratio", default="8/3")
    sp.add_argument("--window", type=int, default=512)
    sp.add_argument("--top", type=int, default=20)
    _add_format(sp)

    sp = add("bench-plan", cmd_bench_plan, "emit GEMM shapes to benchmark (CSV)")
    _add_config_args(sp)
    _add_gpu_args(sp, calibration=False)
    _add_sweep_args(sp, required=False)
    sp.add_argument("--out", help="write plan CSV here instead of stdout")

    sp = add("ingest", cmd_ingest, "load and validate a measurement CSV")
    sp.add_argument("path")
    sp.add_argument(
        "--interpolation",
        choices=[i.value for i in Interpolation],
        default=Interpolation.NEAREST_LOG_SHAPE.value,
    )
    _add_format(sp)

    sp = add("sweep", cmd_sweep, "predicted throughput over a swept config field")
    _add_config_args(sp)
    _add_gpu_args(sp)
    _add_sweep_args(sp, required=True)
    sp.add_argument("--out", help="write sweep CSV here")
    _add_format(sp)

    sp = add("explain", cmd_explain, "rationale behind a lint rule")
    sp.add_argument("rule", help="R1 ... R12")
    return p


def run(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args, out)
    except UsageError as exc:
        sys.stderr.write(f"gemmfit {args.command}: usage error: {exc}\n")
        return EXIT_USAGE
    except (ConfigError, GpuSpecError, CalibrationError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"gemmfit {args.command}: error: {msg}\n")
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
