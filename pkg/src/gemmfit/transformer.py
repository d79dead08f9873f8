"""Decoder-only transformer layer expressed as the GEMMs/BMMs it launches.

Shapes are per GPU under ``t``-way tensor parallelism. Variable names follow
the usual Megatron convention:

    a  attention heads        s  sequence length
    b  microbatch size        t  tensor-parallel size
    h  hidden size            v  vocabulary size
    L  number of layers
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from ._toml import TOMLDecodeError, dumps_toml, read_toml
from .gemm import (
    DEFAULT_COST_MODEL,
    CostModel,
    GemmShape,
    ThroughputLookup,
    analyze,
    flops,
    roofline_tflops,
)
from .hardware import GpuSpec, get_dtype


class ConfigError(ValueError):
    """A transformer configuration cannot be decomposed into integral GEMMs."""


class Activation(str, enum.Enum):
    GLU_LIKE = "glu_like"
    SWIGLU = "swiglu"


class AttentionImpl(str, enum.Enum):
    STANDARD = "standard"
    FLASH = "flash"


class LayerLayout(str, enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


class Positional(str, enum.Enum):
    LEARNED = "learned"
    ROTARY = "rotary"
    ALIBI = "alibi"


class GemmRole(str, enum.Enum):
    QkvTransform = "QkvTransform"
    AttentionScore = "AttentionScore"
    AttentionOverValue = "AttentionOverValue"
    LinearProjection = "LinearProjection"
    MlpUp = "MlpUp"
    MlpGate = "MlpGate"
    MlpDown = "MlpDown"
    LogitOutput = "LogitOutput"
    FusedFlashAttention = "FusedFlashAttention"

    def __str__(self) -> str:
        return self.value


_ENUM_FIELDS = {
    "activation": Activation,
    "attention_impl": AttentionImpl,
    "layer_layout": LayerLayout,
    "positional": Positional,
}


@dataclass(frozen=True, kw_only=True)
class TransformerConfig:
    h: int
    a: int = 1
    b: int = 1
    L: int = 1
    s: int = 2048
    t: int = 1
    v: int = 50304
    mlp_ratio: Fraction = Fraction(4)
    d_ff: int | None = None
    activation: Activation = Activation.GLU_LIKE
    attention_impl: AttentionImpl = AttentionImpl.STANDARD
    layer_layout: LayerLayout = LayerLayout.SEQUENTIAL
    positional: Positional = Positional.LEARNED
    pipeline_stages: int | None = None
    dtype: str = "fp16"
    vocab_parallel: bool = False

    def __post_init__(self) -> None:
        for name in ("a", "b", "h", "L", "s", "t", "v"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("d_ff", "pipeline_stages"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name, kind in _ENUM_FIELDS.items():
            value = getattr(self, name)
            try:
                object.__setattr__(self, name, kind(value))
            except ValueError:
                choices = ", ".join(k.value for k in kind)
                raise ConfigError(f"{name} must be one of {choices}, got {value!r}") from None
        ratio = Fraction(self.mlp_ratio)
        if ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        object.__setattr__(self, "mlp_ratio", ratio)
        try:
            object.__setattr__(self, "dtype", get_dtype(self.dtype).name)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None

    @property
    def ffn_dim(self) -> int:
        """MLP intermediate width actually used."""
        if self.d_ff is not None:
            return self.d_ff
        if self.activation is Activation.SWIGLU and self.mlp_ratio == 4:
            return round(Fraction(8, 3) * self.h)
        return round(self.mlp_ratio * self.h)

    @property
    def ffn_dim_defaulted(self) -> bool:
        return self.d_ff is None and self.activation is Activation.SWIGLU and self.mlp_ratio == 4

    @property
    def canonical(self) -> bool:
        """GPT-2 style block: two-matrix MLP of width 4h."""
        return self.activation is Activation.GLU_LIKE and self.ffn_dim == 4 * self.h

    def replace(self, **changes: Any) -> "TransformerConfig":
        return dataclasses.replace(self, **changes)


# -- config files ---------------------------------------------------------------

CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(TransformerConfig))


def _coerce_ratio(value: Any) -> Fraction:
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 20)
    return Fraction(value)


def config_from_mapping(data: Mapping[str, Any], source: str = "<config>") -> TransformerConfig:
    unknown = set(data) - set(CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {', '.join(sorted(unknown))}")
    if "h" not in data:
        raise ConfigError(f"{source}: missing required field 'h'")
    kwargs = dict(data)
    if "mlp_ratio" in kwargs:
        try:
            kwargs["mlp_ratio"] = _coerce_ratio(kwargs["mlp_ratio"])
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{source}: bad mlp_ratio {data['mlp_ratio']!r}") from None
    try:
        return TransformerConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_model_config(path: str | Path) -> TransformerConfig:
    try:
        data = read_toml(path)
    except TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return config_from_mapping(data, source=str(path))


def config_to_dict(cfg: TransformerConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name in CONFIG_FIELDS:
        value = getattr(cfg, name)
        if value is None:
            continue
        if isinstance(value, enum.Enum):
            value = value.value
        elif isinstance(value, Fraction):
            value = str(value)
        out[name] = value
    return out


def save_model_config(cfg: TransformerConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_toml(config_to_dict(cfg)), encoding="utf-8")


# -- decomposition ----------------------------------------------------------------


@dataclass(frozen=True)
class LayerOp:
    """One row of the layer: a GEMM/BMM with its shape, or a marker for a
    non-GEMM operator (embedding lookup, layer norm) with ``role=None``."""

    name: str
    role: GemmRole | None
    shape: GemmShape | None


@dataclass(frozen=True)
class LayerDecomposition:
    config: TransformerConfig
    ops: tuple[LayerOp, ...]
    logit: GemmShape

    def gemms(self) -> list[tuple[GemmRole, GemmShape]]:
        """Per-layer kernels in execution order, markers dropped."""
        return [(op.role, op.shape) for op in self.ops if op.role is not None]

    def shape_of(self, role: GemmRole) -> GemmShape:
        if role is GemmRole.LogitOutput:
            return self.logit
        for op in self.ops:
            if op.role is role:
                return op.shape
        raise KeyError(role)

    def all_kernels(self) -> list[tuple[GemmRole, GemmShape]]:
        return self.gemms() + [(GemmRole.LogitOutput, self.logit)]


def _quotient(num: int, den: int, label: str) -> int:
    q, r = divmod(num, den)
    if r:
        raise ConfigError(f"{label} not integral ({num}/{den})")
    return q


def decompose(cfg: TransformerConfig) -> LayerDecomposition:
    """Break one layer of ``cfg`` into its per-GPU kernels.

    The logit GEMM is model-level and returned separately in ``logit``; it
    is oriented ``(b*s, h) x (h, v)`` and split over ``t`` only when
    ``cfg.vocab_parallel`` is set.

    Raises
    ------
    ConfigError
        When any of h/a, h/t, 3h/t, d_ff/t or (b*a)/t is not an integer.
    """
    b, s, h, a, t = cfg.b, cfg.s, cfg.h, cfg.a, cfg.t
    head_dim = _quotient(h, a, "h/a")
    h_t = _quotient(h, t, "h/t")
    qkv_t = _quotient(3 * h, t, "3h/t")
    ff_t = _quotient(cfg.ffn_dim, t, "d_ff/t")
    bmm_batch = _quotient(b * a, t, "(b*a)/t")
    dt = cfg.dtype
    bs = b * s

    ops: list[LayerOp] = [
        LayerOp("Input Embedding", None, None),
        LayerOp("Layer Norm 1", None, None),
        LayerOp("QKV Transform", GemmRole.QkvTransform, GemmShape(bs, h, qkv_t, dtype=dt)),
    ]
    if cfg.attention_impl is AttentionImpl.FLASH:
        # score-BMM geometry; costed as both BMMs fused under a roofline
        ops.append(
            LayerOp(
                "Flash Attention",
                GemmRole.FusedFlashAttention,
                GemmShape(s, head_dim, s, batch=bmm_batch, dtype=dt),
            )
        )
    else:
        ops += [
            LayerOp(
                "Attention Score",
                GemmRole.AttentionScore,
                GemmShape(s, head_dim, s, batch=bmm_batch, dtype=dt),
            ),
            LayerOp(
                "Attn over Value",
                GemmRole.AttentionOverValue,
                GemmShape(s, s, head_dim, batch=bmm_batch, dtype=dt),
            ),
        ]
    ops += [
        LayerOp("Linear Projection", GemmRole.LinearProjection, GemmShape(bs, h_t, h, dtype=dt)),
        LayerOp("Layer Norm 2", None, None),
        LayerOp("MLP Up", GemmRole.MlpUp, GemmShape(bs, h, ff_t, dtype=dt)),
    ]
    if cfg.activation is Activation.SWIGLU:
        ops.append(LayerOp("MLP Gate", GemmRole.MlpGate, GemmShape(bs, h, ff_t, dtype=dt)))
    ops.append(LayerOp("MLP Down", GemmRole.MlpDown, GemmShape(bs, ff_t, h, dtype=dt)))

    vocab = _quotient(cfg.v, t, "v/t") if cfg.vocab_parallel else cfg.v
    logit = GemmShape(bs, h, vocab, dtype=dt)
    return LayerDecomposition(cfg, tuple(ops), logit)


# -- per-kernel costing -------------------------------------------------------------


def kernel_flops(role: GemmRole, shape: GemmShape) -> int:
    if role is GemmRole.FusedFlashAttention:
        return 2 * flops(shape)
    return flops(shape)


def kernel_latency_us(
    role: GemmRole,
    shape: GemmShape,
    gpu: GpuSpec,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> float:
    if role is GemmRole.FusedFlashAttention:
        if gpu.placeholder:
            raise ValueError(f"{gpu.name} is a placeholder entry; supply a spec file")
        # reads Q, K, V and writes O once; the s x s scores never leave the SM
        bpe = get_dtype(shape.dtype).bytes_per_element
        nbytes = 4 * shape.batch * shape.m * shape.k * bpe
        f = kernel_flops(role, shape)
        tflops = roofline_tflops(f, nbytes, gpu.peak_tflops(shape.dtype), gpu.mem_bandwidth_gbps)
        return f / (tflops * 1e6)
    return analyze(shape, gpu, calibration, cost).predicted_latency_us


def layer_latency_us(
    cfg: TransformerConfig,
    gpu: GpuSpec,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> float:
    """Predicted latency of one layer (logit GEMM excluded)."""
    dec = decompose(cfg)
    return sum(kernel_latency_us(r, g, gpu, calibration, cost) for r, g in dec.gemms())


def latency_proportions(
    cfg: TransformerConfig,
    gpu: GpuSpec,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> dict[GemmRole, float]:
    """Share of predicted layer latency spent in each kernel role.

    Parallel attention/MLP layouts launch the same GEMMs as sequential ones,
    so both layouts produce the same proportions.
    """
    per_role: dict[GemmRole, float] = {}
    for role, shape in decompose(cfg).gemms():
        per_role[role] = per_role.get(role, 0.0) + kernel_latency_us(
            role, shape, gpu, calibration, cost
        )
    total = sum(per_role.values())
    return {role: lat / total for role, lat in per_role.items()}


# -- closed forms -----------------------------------------------------------------


@dataclass(frozen=True)
class ParamCount:
    exact: int
    approx: int
    breakdown: dict[str, int]
    closed_form: int | None

    @property
    def total(self) -> int:
        return self.exact


def param_breakdown(cfg: TransformerConfig) -> dict[str, int]:
    h, L, d_ff = cfg.h, cfg.L, cfg.ffn_dim
    n_mlp_in = 2 if cfg.activation is Activation.SWIGLU else 1
    mlp_weights = (n_mlp_in + 1) * h * d_ff
    # qkv bias 3h, proj bias h, mlp biases, two layer norms (gain + bias) 4h
    biases_norms = 3 * h + h + n_mlp_in * d_ff + h + 4 * h
    positional = cfg.s * h if cfg.positional is Positional.LEARNED else 0
    return {
        "attention_qkv": 3 * h * h * L,
        "attention_proj": h * h * L,
        "mlp": mlp_weights * L,
        "biases_norms": biases_norms * L,
        "token_embedding": cfg.v * h,
        "position_embedding": positional,
    }


def param_count_closed_form(h: int, L: int, v: int, s: int) -> int:
    return 12 * h * h * L + 13 * h * L + (v + s) * h


def param_count(cfg: TransformerConfig) -> ParamCount:
    """Parameter count from per-matrix sums, plus the closed form when the
    architecture is canonical (4h MLP, learned positions).

    The input embedding is assumed tied with the output projection.
    """
    breakdown = param_breakdown(cfg)
    closed = None
    if cfg.canonical and cfg.positional is Positional.LEARNED:
        closed = param_count_closed_form(cfg.h, cfg.L, cfg.v, cfg.s)
    return ParamCount(
        exact=sum(breakdown.values()),
        approx=12 * cfg.h * cfg.h * cfg.L,
        breakdown=breakdown,
        closed_form=closed,
    )


def forward_flops_per_layer(cfg: TransformerConfig) -> int:
    """Forward FLOPs of one canonical layer across all tensor-parallel ranks."""
    b, s, h = cfg.b, cfg.s, cfg.h
    return 24 * b * s * h * h + 4 * b * s * s * h


def decomposed_layer_flops(cfg: TransformerConfig) -> int:
    """Sum of per-GPU kernel FLOPs for one layer (logit excluded)."""
    return sum(kernel_flops(r, g) for r, g in decompose(cfg).gemms())
