"""Map transformer shapes onto GEMM kernels and check them against GPU
tiling, wave-quantization and tensor-core alignment constraints."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationTable,
    MeasurementRecord,
    SweepSpec,
    emit_bench_plan,
    export_sweep,
    ingest_measurements,
    run_sweep,
)
from .gemm import (
    CostModel,
    GemmShape,
    WaveStats,
    alignment_report,
    analyze,
    bytes_moved,
    estimate_throughput,
    flops,
    is_wave_free,
    select_tile,
    tile_grid,
    tile_waste,
    wave_stats,
)
from .hardware import (
    DTypeSpec,
    GpuSpec,
    TileSpec,
    alignment_elements,
    builtin_gpus,
    load_gpu_spec,
    resolve_gpu,
    save_gpu_spec,
)
from .optimizer import SearchSpace, fix_heads, pad_vocab, suggest, swiglu_dff_search
from .rules import Diagnostic, RuleReport, Severity, explain, lint
from .transformer import (
    GemmRole,
    TransformerConfig,
    decompose,
    forward_flops_per_layer,
    latency_proportions,
    param_count,
)
