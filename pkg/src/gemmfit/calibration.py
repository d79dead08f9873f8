"""Benchmark plans, measurement ingestion and sweep export.

Wire formats are CSV (UTF-8, header row, ``.`` decimal separator) with a
fixed column order so the measuring side can be a few lines of PyTorch on
any GPU host:

    plan:         gpu,dtype,batch,m,k,n
    measurements: gpu,dtype,batch,m,k,n,tflops,repeats
    sweep export: <x_name>,role,predicted_tflops,predicted_latency_us,wave_efficiency,aligned
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, TextIO

from .gemm import (
    DEFAULT_COST_MODEL,
    CostModel,
    GemmShape,
    ThroughputLookup,
    alignment_report,
    analyze,
)
from .hardware import GpuSpec, get_dtype
from .transformer import (
    ConfigError,
    GemmRole,
    TransformerConfig,
    decompose,
    kernel_flops,
    kernel_latency_us,
)

log = logging.getLogger(__name__)

PLAN_COLUMNS = ("gpu", "dtype", "batch", "m", "k", "n")
MEASUREMENT_COLUMNS = PLAN_COLUMNS + ("tflops", "repeats")
SWEEP_COLUMNS = ("role", "predicted_tflops", "predicted_latency_us", "wave_efficiency", "aligned")


class CalibrationError(ValueError):
    """A CSV file does not follow the expected schema."""


Key = tuple[str, str, int, int, int, int]


def _key(gpu_name: str, dtype: str, batch: int, m: int, k: int, n: int) -> Key:
    return (gpu_name.lower(), get_dtype(dtype).name, batch, m, k, n)


@dataclass(frozen=True)
class MeasurementRecord:
    gpu_name: str
    dtype: str
    m: int
    k: int
    n: int
    batch: int
    measured_tflops: float
    repeats: int = 1

    def __post_init__(self) -> None:
        for name in ("m", "k", "n", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.measured_tflops > 0 or math.isinf(self.measured_tflops):
            raise ValueError(f"tflops must be positive and finite, got {self.measured_tflops}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        object.__setattr__(self, "dtype", get_dtype(self.dtype).name)

    @property
    def key(self) -> Key:
        return _key(self.gpu_name, self.dtype, self.batch, self.m, self.k, self.n)


class Interpolation(str, enum.Enum):
    EXACT_ONLY = "exact_only"
    NEAREST_LOG_SHAPE = "nearest_log_shape"


@dataclass(frozen=True)
class SkippedRow:
    line: int
    reason: str

    def __str__(self) -> str:
        return f"row {self.line} skipped: {self.reason}"


def _log_distance(a: Key, b: Key) -> float:
    # batch, m, k, n live at positions 2..5
    return sum(abs(math.log(x) - math.log(y)) for x, y in zip(a[2:], b[2:]))


@dataclass(frozen=True)
class CalibrationTable:
    """Measured GEMM throughputs keyed by (gpu, dtype, batch, m, k, n).

    With ``NEAREST_LOG_SHAPE`` a miss falls back to the stored shape closest
    in summed absolute log-dimension distance on the same GPU and dtype; the
    returned value is always one that was measured, never a blend.
    """

    records: Mapping[Key, MeasurementRecord]
    policy: Interpolation = Interpolation.NEAREST_LOG_SHAPE
    skipped: tuple[SkippedRow, ...] = ()
    _by_device: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy", Interpolation(self.policy))
        by_device: dict[tuple[str, str], list[Key]] = {}
        for key in sorted(self.records):
            by_device.setdefault(key[:2], []).append(key)
        object.__setattr__(self, "_by_device", by_device)

    @classmethod
    def from_records(
        cls,
        records: Iterable[MeasurementRecord],
        policy: Interpolation | str = Interpolation.NEAREST_LOG_SHAPE,
        skipped: Iterable[SkippedRow] = (),
    ) -> "CalibrationTable":
        """Build a table; on duplicate keys more repeats win, ties go to the later record."""
        table: dict[Key, MeasurementRecord] = {}
        for rec in records:
            prev = table.get(rec.key)
            if prev is None or rec.repeats >= prev.repeats:
                table[rec.key] = rec
        return cls(table, Interpolation(policy), tuple(skipped))

    def __len__(self) -> int:
        return len(self.records)

    def get(self, gpu_name: str, shape: GemmShape) -> MeasurementRecord | None:
        key = _key(gpu_name, shape.dtype, shape.batch, shape.m, shape.k, shape.n)
        hit = self.records.get(key)
        if hit is not None or self.policy is Interpolation.EXACT_ONLY:
            return hit
        pool = self._by_device.get(key[:2])
        if not pool:
            return None
        nearest = min(pool, key=lambda k: _log_distance(k, key))
        return self.records[nearest]

    def lookup(self, gpu_name: str, shape: GemmShape) -> float | None:
        rec = self.get(gpu_name, shape)
        return None if rec is None else rec.measured_tflops


# -- plans --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanRow:
    gpu: str
    dtype: str
    batch: int
    m: int
    k: int
    n: int

    @property
    def shape(self) -> GemmShape:
        return GemmShape(self.m, self.k, self.n, batch=self.batch, dtype=self.dtype)


SWEEPABLE = ("h", "a", "b", "s", "t", "v", "d_ff")


@dataclass(frozen=True)
class SweepSpec:
    """Vary one config field over ``range(start, stop + 1, step)``.

    ``head_dim`` pins h/a by recomputing ``a = h // head_dim`` at every
    point. Points whose config does not decompose are skipped.
    """

    base: TransformerConfig
    dim: str
    start: int
    stop: int
    step: int = 1
    roles: tuple[GemmRole, ...] | None = None
    head_dim: int | None = None

    def __post_init__(self) -> None:
        if self.dim not in SWEEPABLE:
            raise ValueError(f"cannot sweep {self.dim!r}; choose from {', '.join(SWEEPABLE)}")
        if self.step < 1:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.roles is not None:
            object.__setattr__(self, "roles", tuple(GemmRole(r) for r in self.roles))

    def points(self) -> list[tuple[int, TransformerConfig]]:
        out = []
        for x in range(self.start, self.stop + 1, self.step):
            if x < 1:
                continue
            changes = {self.dim: x}
            if self.head_dim is not None:
                h = x if self.dim == "h" else self.base.h
                if h % self.head_dim:
                    continue
                changes["a"] = h // self.head_dim
            try:
                cfg = self.base.replace(**changes)
                decompose(cfg)
            except ConfigError as exc:
                log.debug("sweep point %s=%d skipped: %s", self.dim, x, exc)
                continue
            out.append((x, cfg))
        return out

    def kernels(self, cfg: TransformerConfig) -> list[tuple[GemmRole, GemmShape]]:
        dec = decompose(cfg)
        found = dec.all_kernels()
        if self.roles is None:
            return found
        return [(r, g) for r, g in found if r in self.roles]


def emit_bench_plan(source: TransformerConfig | SweepSpec, gpu: GpuSpec | str) -> list[PlanRow]:
    """Distinct GEMM shapes to measure, in first-seen order.

    Fused flash attention is not a plain GEMM and is left out.
    """
    gpu_name = gpu if isinstance(gpu, str) else gpu.name
    if isinstance(source, SweepSpec):
        kernels = [kg for _, cfg in source.points() for kg in source.kernels(cfg)]
    else:
        kernels = decompose(source).all_kernels()
    rows: dict[Key, PlanRow] = {}
    for role, g in kernels:
        if role is GemmRole.FusedFlashAttention:
            continue
        key = _key(gpu_name, g.dtype, g.batch, g.m, g.k, g.n)
        if key not in rows:
            rows[key] = PlanRow(gpu_name, g.dtype, g.batch, g.m, g.k, g.n)
    return list(rows.values())


def _open_out(target: str | Path | TextIO):
    if isinstance(target, (str, Path)):
        return open(target, "w", newline="", encoding="utf-8"), True
    return target, False


def write_plan(rows: Iterable[PlanRow], target: str | Path | TextIO) -> None:
    fh, close = _open_out(target)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_COLUMNS)
        for r in rows:
            w.writerow((r.gpu, r.dtype, r.batch, r.m, r.k, r.n))
    finally:
        if close:
            fh.close()


def write_measurements(records: Iterable[MeasurementRecord], target: str | Path | TextIO) -> None:
    fh, close = _open_out(target)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_COLUMNS)
        for r in records:
            w.writerow((r.gpu_name, r.dtype, r.batch, r.m, r.k, r.n, repr(r.measured_tflops),
                        r.repeats))
    finally:
        if close:
            fh.close()


def _read_rows(source: str | Path | TextIO, columns: tuple[str, ...]):
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise CalibrationError("empty file: header row required")
    if tuple(h.strip() for h in header) != columns:
        raise CalibrationError(
            f"row 1: header must be {','.join(columns)}, got {','.join(header)}"
        )
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        yield reader.line_num, [c.strip() for c in row]


def read_plan(source: str | Path | TextIO) -> list[PlanRow]:
    rows = []
    for line, row in _read_rows(source, PLAN_COLUMNS):
        if len(row) != len(PLAN_COLUMNS):
            raise CalibrationError(f"row {line}: expected {len(PLAN_COLUMNS)} fields, got {len(row)}")
        try:
            gpu, dtype, batch, m, k, n = row
            rows.append(PlanRow(gpu, get_dtype(dtype).name, int(batch), int(m), int(k), int(n)))
        except (ValueError, KeyError) as exc:
            raise CalibrationError(f"row {line}: {exc}") from None
    return rows


def ingest_measurements(
    source: str | Path | TextIO,
    policy: Interpolation | str = Interpolation.NEAREST_LOG_SHAPE,
) -> CalibrationTable:
    """Load a measurement CSV.

    A bad header raises :class:`CalibrationError`. Individual malformed rows
    (wrong field count, unparsable numbers, unknown dtype, non-positive
    throughput) are skipped and listed in ``table.skipped``.
    """
    records = []
    skipped = []
    for line, row in _read_rows(source, MEASUREMENT_COLUMNS):
        if len(row) != len(MEASUREMENT_COLUMNS):
            skipped.append(SkippedRow(line, f"expected {len(MEASUREMENT_COLUMNS)} fields, got {len(row)}"))
            continue
        gpu, dtype, batch, m, k, n, tflops, repeats = row
        try:
            rec = MeasurementRecord(
                gpu_name=gpu,
                dtype=dtype,
                m=int(m),
                k=int(k),
                n=int(n),
                batch=int(batch),
                measured_tflops=float(tflops),
                repeats=int(repeats),
            )
        except (ValueError, KeyError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            skipped.append(SkippedRow(line, str(msg)))
            continue
        records.append(rec)
    for s in skipped:
        log.warning("%s", s)
    return CalibrationTable.from_records(records, policy, skipped)


# -- sweeps ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    x: int
    role: str
    predicted_tflops: float
    predicted_latency_us: float
    wave_efficiency: float
    aligned: bool


def run_sweep(
    spec: SweepSpec,
    gpu: GpuSpec,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> list[SweepPoint]:
    """Predicted throughput of each selected kernel at every sweep point.

    Fused attention has no tile grid; it reports wave efficiency 1.0 and
    ``aligned=True`` because only its roofline is modeled.
    """
    out = []
    for x, cfg in spec.points():
        for role, g in spec.kernels(cfg):
            if role is GemmRole.FusedFlashAttention:
                lat = kernel_latency_us(role, g, gpu, calibration, cost)
                tflops = kernel_flops(role, g) / (lat * 1e6)
                out.append(SweepPoint(x, role.value, tflops, lat, 1.0, True))
                continue
            a = analyze(g, gpu, calibration, cost)
            out.append(
                SweepPoint(
                    x,
                    role.value,
                    a.predicted_tflops,
                    a.predicted_latency_us,
                    a.waves.wave_efficiency,
                    alignment_report(g, gpu).aligned,
                )
            )
    return out


def export_sweep(
    results: list[SweepPoint],
    target: str | Path | TextIO,
    x_name: str = "x",
) -> None:
    if not results:
        raise ValueError("nothing to export: sweep produced no points")
    fh, close = _open_out(target)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((x_name,) + SWEEP_COLUMNS)
        for p in results:
            w.writerow(
                (
                    p.x,
                    p.role,
                    repr(p.predicted_tflops),
                    repr(p.predicted_latency_us),
                    repr(p.wave_efficiency),
                    "true" if p.aligned else "false",
                )
            )
    finally:
        if close:
            fh.close()


def read_sweep(source: str | Path | TextIO) -> tuple[str, list[SweepPoint]]:
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header[1:]) != SWEEP_COLUMNS:
        raise CalibrationError(f"row 1: not a sweep export header: {header}")
    points = []
    for row in reader:
        if not row:
            continue
        x, role, tf, lat, eff, aligned = row
        points.append(SweepPoint(int(x), role, float(tf), float(lat), float(eff), aligned == "true"))
    return header[0], points
