"""GPU and numeric-format descriptors.

Peak rates and bandwidths in the built-in entries are vendor datasheet
numbers and exist only so the roofline has something to work with. They are
data, not constants: override them with a spec file (``--gpu path.toml``)
for the card you actually run on.

Spec file schema (TOML)::

    name = "A100"
    sm_count = 108
    tc_alignment_bytes = 128
    mem_bandwidth_gbps = 1555.0
    tile_candidates = ["256x128", "128x256", "128x128"]

    [peak_matmul_tflops]
    fp16 = 312.0
    bf16 = 312.0

Optional key: ``placeholder = true`` marks an entry whose rates are not to be
trusted; throughput estimation refuses to run on it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from ._toml import TOMLDecodeError, dumps_toml, read_toml

GPU_DIR_ENV = "GEMMFIT_GPU_DIR"


class GpuSpecError(ValueError):
    """A GPU spec is malformed or violates an invariant."""


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class DTypeSpec:
    name: str
    bytes_per_element: int

    def __post_init__(self) -> None:
        if self.bytes_per_element not in (1, 2, 4, 8):
            raise ValueError(
                f"bytes_per_element must be 1, 2, 4 or 8, got {self.bytes_per_element}"
            )


DTYPES: dict[str, DTypeSpec] = {
    d.name: d
    for d in (
        DTypeSpec("fp8", 1),
        DTypeSpec("int8", 1),
        DTypeSpec("fp16", 2),
        DTypeSpec("bf16", 2),
        DTypeSpec("tf32", 4),
        DTypeSpec("fp32", 4),
        DTypeSpec("fp64", 8),
    )
}


def get_dtype(name: str | DTypeSpec) -> DTypeSpec:
    if isinstance(name, DTypeSpec):
        return name
    try:
        return DTYPES[name.lower()]
    except KeyError:
        raise KeyError(f"unknown dtype {name!r}; known: {', '.join(DTYPES)}") from None


@dataclass(frozen=True, order=True)
class TileSpec:
    """Thread-block tile covering ``t1`` output rows by ``t2`` output columns."""

    t1: int
    t2: int

    def __post_init__(self) -> None:
        if not (_is_pow2(self.t1) and _is_pow2(self.t2)):
            raise ValueError(f"tile dims must be powers of two, got {self.t1}x{self.t2}")

    @classmethod
    def parse(cls, text: str) -> "TileSpec":
        try:
            a, b = text.lower().split("x")
            return cls(int(a), int(b))
        except ValueError as exc:
            raise ValueError(f"bad tile {text!r}, expected e.g. '128x256': {exc}") from None

    @property
    def area(self) -> int:
        return self.t1 * self.t2

    def transposed(self) -> "TileSpec":
        return TileSpec(self.t2, self.t1)

    def __str__(self) -> str:
        return f"{self.t1}x{self.t2}"


DEFAULT_TILES: tuple[TileSpec, ...] = tuple(
    TileSpec.parse(t)
    for t in ("256x128", "128x256", "128x128", "256x64", "64x256", "128x64", "64x128", "64x64")
)


@dataclass(frozen=True)
class GpuSpec:
    name: str
    sm_count: int
    tc_alignment_bytes: int
    tile_candidates: tuple[TileSpec, ...]
    peak_matmul_tflops: Mapping[str, float]
    mem_bandwidth_gbps: float
    placeholder: bool = False

    def __post_init__(self) -> None:
        # normalise containers so a GpuSpec stays immutable
        object.__setattr__(self, "tile_candidates", tuple(self.tile_candidates))
        object.__setattr__(
            self,
            "peak_matmul_tflops",
            {k.lower(): float(v) for k, v in dict(self.peak_matmul_tflops).items()},
        )
        if not isinstance(self.sm_count, int) or self.sm_count <= 0:
            raise GpuSpecError(f"sm_count must be a positive integer, got {self.sm_count!r}")
        if not _is_pow2(self.tc_alignment_bytes):
            raise GpuSpecError(
                f"tc_alignment_bytes must be a power of two, got {self.tc_alignment_bytes!r}"
            )
        if not self.tile_candidates:
            raise GpuSpecError("tile_candidates must be non-empty")
        if not self.mem_bandwidth_gbps > 0:
            raise GpuSpecError(
                f"mem_bandwidth_gbps must be positive, got {self.mem_bandwidth_gbps!r}"
            )
        for dt, rate in self.peak_matmul_tflops.items():
            if not rate > 0:
                raise GpuSpecError(f"peak_matmul_tflops.{dt} must be positive, got {rate!r}")

    def peak_tflops(self, dtype: str | DTypeSpec) -> float:
        key = get_dtype(dtype).name
        try:
            return self.peak_matmul_tflops[key]
        except KeyError:
            raise GpuSpecError(f"{self.name}: no peak_matmul_tflops entry for {key}") from None


def _builtin() -> dict[str, GpuSpec]:
    entries = [
        GpuSpec(
            name="V100",
            sm_count=80,
            tc_alignment_bytes=16,
            tile_candidates=DEFAULT_TILES,
            peak_matmul_tflops={"fp16": 125.0, "fp32": 15.7},
            mem_bandwidth_gbps=900.0,
        ),
        GpuSpec(
            name="A100",
            sm_count=108,
            tc_alignment_bytes=128,
            tile_candidates=DEFAULT_TILES,
            peak_matmul_tflops={"fp16": 312.0, "bf16": 312.0, "tf32": 156.0, "fp32": 19.5},
            mem_bandwidth_gbps=1555.0,
        ),
        # No alignment figure is published for H100; reuse A100's 128 bytes.
        GpuSpec(
            name="H100",
            sm_count=144,
            tc_alignment_bytes=128,
            tile_candidates=DEFAULT_TILES,
            peak_matmul_tflops={
                "fp16": 989.4,
                "bf16": 989.4,
                "tf32": 494.7,
                "fp32": 66.9,
                "fp8": 1978.9,
            },
            mem_bandwidth_gbps=3350.0,
        ),
        # Stub: values are per-GCD guesses. Supply a spec file before estimating.
        GpuSpec(
            name="MI250X",
            sm_count=110,
            tc_alignment_bytes=128,
            tile_candidates=DEFAULT_TILES,
            peak_matmul_tflops={"fp16": 191.5, "bf16": 191.5, "fp32": 47.9},
            mem_bandwidth_gbps=1638.0,
            placeholder=True,
        ),
    ]
    return {g.name.lower(): g for g in entries}


_BUILTIN = _builtin()


def builtin_gpus() -> list[GpuSpec]:
    return list(_BUILTIN.values())


def alignment_elements(gpu: GpuSpec, dtype: str | DTypeSpec) -> int:
    """Dimension multiple (in elements) that keeps tensor cores fully fed."""
    bpe = get_dtype(dtype).bytes_per_element
    return max(1, gpu.tc_alignment_bytes // bpe)


# -- spec files ---------------------------------------------------------------

_REQUIRED = ("name", "sm_count", "tc_alignment_bytes", "mem_bandwidth_gbps", "peak_matmul_tflops")


def gpu_from_dict(data: Mapping, source: str = "<dict>") -> GpuSpec:
    for key in _REQUIRED:
        if key not in data:
            raise GpuSpecError(f"{source}: missing required field '{key}'")
    unknown = set(data) - set(_REQUIRED) - {"tile_candidates", "placeholder"}
    if unknown:
        raise GpuSpecError(f"{source}: unknown field(s) {', '.join(sorted(unknown))}")

    def typed(key: str, kind: type | tuple[type, ...]):
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, kind):
            raise GpuSpecError(f"{source}: field '{key}' has wrong type {type(value).__name__}")
        return value

    peaks = typed("peak_matmul_tflops", dict)
    for dt, rate in peaks.items():
        if isinstance(rate, bool) or not isinstance(rate, (int, float)):
            raise GpuSpecError(f"{source}: field 'peak_matmul_tflops.{dt}' must be a number")
        get_dtype(dt)
    raw_tiles = data.get("tile_candidates")
    if raw_tiles is None:
        tiles = DEFAULT_TILES
    else:
        try:
            tiles = tuple(TileSpec.parse(str(t)) for t in raw_tiles)
        except ValueError as exc:
            raise GpuSpecError(f"{source}: field 'tile_candidates': {exc}") from None
    try:
        return GpuSpec(
            name=str(typed("name", str)),
            sm_count=typed("sm_count", int),
            tc_alignment_bytes=typed("tc_alignment_bytes", int),
            tile_candidates=tiles,
            peak_matmul_tflops=peaks,
            mem_bandwidth_gbps=float(typed("mem_bandwidth_gbps", (int, float))),
            placeholder=bool(data.get("placeholder", False)),
        )
    except GpuSpecError as exc:
        raise GpuSpecError(f"{source}: {exc}") from None


def load_gpu_spec(path: str | Path) -> GpuSpec:
    """Read and validate a GPU spec file.

    Raises
    ------
    GpuSpecError
        On TOML syntax errors (message carries line and column) or when a
        field is missing, mistyped or violates a GpuSpec invariant.
    """
    try:
        data = read_toml(path)
    except TOMLDecodeError as exc:
        raise GpuSpecError(f"{path}: parse error: {exc}") from None
    return gpu_from_dict(data, source=str(path))


def gpu_to_dict(gpu: GpuSpec) -> dict:
    out = {
        "name": gpu.name,
        "sm_count": gpu.sm_count,
        "tc_alignment_bytes": gpu.tc_alignment_bytes,
        "mem_bandwidth_gbps": float(gpu.mem_bandwidth_gbps),
        "tile_candidates": [str(t) for t in gpu.tile_candidates],
    }
    if gpu.placeholder:
        out["placeholder"] = True
    out["peak_matmul_tflops"] = dict(gpu.peak_matmul_tflops)
    return out


def save_gpu_spec(gpu: GpuSpec, path: str | Path) -> None:
    Path(path).write_text(dumps_toml(gpu_to_dict(gpu)), encoding="utf-8")


def resolve_gpu(selector: str | GpuSpec) -> GpuSpec:
    """Resolve ``--gpu`` values: an existing file path, a file in
    ``$GEMMFIT_GPU_DIR`` named ``<selector>.toml``, or a built-in name."""
    if isinstance(selector, GpuSpec):
        return selector
    path = Path(selector)
    if path.is_file():
        return load_gpu_spec(path)
    gpu_dir = os.environ.get(GPU_DIR_ENV)
    if gpu_dir:
        candidate = Path(gpu_dir) / f"{selector}.toml"
        if candidate.is_file():
            return load_gpu_spec(candidate)
    try:
        return _BUILTIN[selector.lower()]
    except KeyError:
        known = ", ".join(g.name for g in _BUILTIN.values())
        raise GpuSpecError(f"unknown GPU {selector!r} (built-ins: {known})") from None
