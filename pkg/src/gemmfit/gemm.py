"""GEMM/BMM arithmetic: FLOPs, bytes, tiling, wave quantization, roofline.

All block and FLOP counting is exact integer arithmetic. A batched problem
of ``batch`` independent ``(m, k) x (k, n)`` products is one kernel launch,
so its thread blocks from every batch entry share the same waves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from ._toml import TOMLDecodeError, read_toml
from .hardware import GpuSpec, TileSpec, alignment_elements, get_dtype

log = logging.getLogger(__name__)


class ThroughputLookup(Protocol):
    def lookup(self, gpu_name: str, shape: "GemmShape") -> float | None: ...


@dataclass(frozen=True)
class GemmShape:
    """``batch`` stacked products ``C_i = alpha * A_i @ B_i + beta * C_i``
    with ``A_i`` of shape (m, k) and ``B_i`` of shape (k, n)."""

    m: int
    k: int
    n: int
    batch: int = 1
    dtype: str = "fp16"
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        for name in ("m", "k", "n", "batch"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"GemmShape.{name} must be a positive integer, got {value!r}")
        object.__setattr__(self, "dtype", get_dtype(self.dtype).name)

    def __str__(self) -> str:
        prefix = f"{self.batch} x " if self.batch != 1 else ""
        return f"{prefix}({self.m}, {self.k}) x ({self.k}, {self.n})"


@dataclass(frozen=True)
class WaveStats:
    tile: TileSpec
    grid_rows: int
    grid_cols: int
    total_blocks: int
    full_waves: int
    tail_blocks: int
    wave_count: int
    wave_efficiency: float


@dataclass(frozen=True)
class DimAlignment:
    dim: str
    value: int
    pow2_divisor: int
    required: int
    aligned: bool


@dataclass(frozen=True)
class AlignmentReport:
    dims: tuple[DimAlignment, ...]

    @property
    def aligned(self) -> bool:
        return all(d.aligned for d in self.dims)

    def __getitem__(self, dim: str) -> DimAlignment:
        for d in self.dims:
            if d.dim == dim:
                return d
        raise KeyError(dim)


@dataclass(frozen=True)
class CostModel:
    """Heuristic multipliers layered on the roofline.

    ``alignment_floor`` bounds how hard a misaligned dimension is punished;
    the other two switches exist so the quantization terms can be isolated.
    """

    alignment_floor: float = 0.5
    apply_wave_quantization: bool = True
    apply_tile_quantization: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.alignment_floor <= 1:
            raise ValueError(f"alignment_floor must be in (0, 1], got {self.alignment_floor}")


DEFAULT_COST_MODEL = CostModel()


def load_cost_model(path: str | Path) -> CostModel:
    try:
        data = read_toml(path)
    except TOMLDecodeError as exc:
        raise ValueError(f"{path}: parse error: {exc}") from None
    data = data.get("cost_model", data)
    allowed = set(CostModel.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown cost-model field(s) {', '.join(sorted(unknown))}")
    return CostModel(**data)


@dataclass(frozen=True)
class GemmAnalysis:
    shape: GemmShape
    flops: int
    bytes: int
    arithmetic_intensity: float
    alignment: AlignmentReport
    chosen_tile: TileSpec
    waves: WaveStats
    tile_waste_fraction: float
    predicted_tflops: float
    predicted_latency_us: float
    calibrated: bool = False


# -- counting -------------------------------------------------------------------


def flops(g: GemmShape) -> int:
    return 2 * g.batch * g.m * g.k * g.n


def bytes_moved(g: GemmShape) -> int:
    bpe = get_dtype(g.dtype).bytes_per_element
    elems = g.m * g.k + g.k * g.n + g.m * g.n
    if g.beta != 0:
        elems += g.m * g.n
    return g.batch * elems * bpe


def arithmetic_intensity(g: GemmShape) -> float:
    return flops(g) / bytes_moved(g)


# -- tiling and waves -------------------------------------------------------------


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


def tile_grid(m: int, n: int, tile: TileSpec) -> tuple[int, int]:
    return _cdiv(m, tile.t1), _cdiv(n, tile.t2)


def tile_waste(m: int, n: int, tile: TileSpec) -> float:
    """Fraction of the launched tile area that computes padding."""
    rows, cols = tile_grid(m, n, tile)
    return 1.0 - (m * n) / (rows * tile.t1 * cols * tile.t2)


def wave_stats(g: GemmShape, tile: TileSpec, sm_count: int) -> WaveStats:
    if sm_count < 1:
        raise ValueError(f"sm_count must be >= 1, got {sm_count}")
    rows, cols = tile_grid(g.m, g.n, tile)
    total = g.batch * rows * cols
    full, tail = divmod(total, sm_count)
    waves = full + (1 if tail else 0)
    return WaveStats(
        tile=tile,
        grid_rows=rows,
        grid_cols=cols,
        total_blocks=total,
        full_waves=full,
        tail_blocks=tail,
        wave_count=waves,
        wave_efficiency=total / (waves * sm_count),
    )


def is_wave_free(m: int, n: int, tile: TileSpec, sm_count: int) -> bool:
    """True when either tile orientation yields a whole number of waves."""
    if sm_count < 1:
        raise ValueError(f"sm_count must be >= 1, got {sm_count}")
    r1, c1 = tile_grid(m, n, tile)
    r2, c2 = tile_grid(m, n, tile.transposed())
    return (r1 * c1) % sm_count == 0 or (r2 * c2) % sm_count == 0


def pow2_divisor(x: int) -> int:
    """Largest power of two dividing ``x`` (``x`` > 0)."""
    if x < 1:
        raise ValueError(f"expected a positive integer, got {x}")
    return x & -x


def alignment_report(g: GemmShape, gpu: GpuSpec) -> AlignmentReport:
    required = alignment_elements(gpu, g.dtype)
    return AlignmentReport(
        tuple(
            DimAlignment(
                dim=name,
                value=value,
                pow2_divisor=pow2_divisor(value),
                required=required,
                aligned=value % required == 0,
            )
            for name, value in (("m", g.m), ("k", g.k), ("n", g.n))
        )
    )


def select_tile(g: GemmShape, gpu: GpuSpec) -> TileSpec:
    """Pick the tile a library would plausibly launch for ``g``.

    Every wave is assumed to cost time proportional to ``t1 * t2 * k``
    (a tail wave costs as much as a full one), so the candidate with the
    fewest wave-weighted tile areas wins. Ties go to the larger tile, then
    to the earlier entry in ``gpu.tile_candidates``.
    """
    best = None
    best_key = None
    for idx, tile in enumerate(gpu.tile_candidates):
        ws = wave_stats(g, tile, gpu.sm_count)
        key = (ws.wave_count * tile.area * g.k, -tile.area, idx)
        if best_key is None or key < best_key:
            best, best_key = tile, key
    assert best is not None
    return best


def alignment_penalty(report: AlignmentReport, cost: CostModel = DEFAULT_COST_MODEL) -> float:
    if report.aligned:
        return 1.0
    worst = min(d.pow2_divisor / d.required for d in report.dims if not d.aligned)
    return max(cost.alignment_floor, worst)


def roofline_tflops(flop_count: int, byte_count: int, peak: float, bandwidth_gbps: float) -> float:
    # GB/s * FLOP/byte = GFLOP/s
    return min(peak, flop_count / byte_count * bandwidth_gbps / 1000.0)


def _require_usable(gpu: GpuSpec) -> None:
    if gpu.placeholder:
        raise ValueError(
            f"{gpu.name} is a placeholder entry; pass a spec file with measured rates via --gpu"
        )


def analyze(
    g: GemmShape,
    gpu: GpuSpec,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> GemmAnalysis:
    """Full single-GEMM analysis including the throughput estimate."""
    _require_usable(gpu)
    peak = gpu.peak_tflops(g.dtype)
    f = flops(g)
    nbytes = bytes_moved(g)
    align = alignment_report(g, gpu)
    tile = select_tile(g, gpu)
    waves = wave_stats(g, tile, gpu.sm_count)
    waste = tile_waste(g.m, g.n, tile)

    measured = calibration.lookup(gpu.name, g) if calibration is not None else None
    if measured is not None:
        if measured > peak:
            log.warning("calibrated %.1f TFLOP/s for %s exceeds %s peak %.1f",
                        measured, g, gpu.name, peak)
        tflops = measured
    else:
        tflops = roofline_tflops(f, nbytes, peak, gpu.mem_bandwidth_gbps)
        if cost.apply_wave_quantization:
            tflops *= waves.wave_efficiency
        if cost.apply_tile_quantization:
            tflops *= 1.0 - waste
        tflops *= alignment_penalty(align, cost)

    return GemmAnalysis(
        shape=g,
        flops=f,
        bytes=nbytes,
        arithmetic_intensity=f / nbytes,
        alignment=align,
        chosen_tile=tile,
        waves=waves,
        tile_waste_fraction=waste,
        predicted_tflops=tflops,
        predicted_latency_us=f / (tflops * 1e6),
        calibrated=measured is not None,
    )


def estimate_throughput(
    g: GemmShape,
    gpu: GpuSpec,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> tuple[float, float]:
    """Return ``(predicted_tflops, predicted_latency_us)`` for ``g`` on ``gpu``."""
    a = analyze(g, gpu, calibration, cost)
    return a.predicted_tflops, a.predicted_latency_us
