"""Shape lint for transformer configurations.

Each rule yields graded :class:`Diagnostic` objects. ``error`` is reserved
for configurations whose GEMMs cannot be formed with integral dimensions;
inefficiencies are ``warn`` and advice is ``info``. Rules report and
suggest, they never modify the configuration.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import gcd

from ._divisibility import divisors, fix_heads, nearest_multiples, pad_vocab, round_up
from .gemm import alignment_report, pow2_divisor, select_tile, wave_stats
from .hardware import GpuSpec
from .transformer import (
    Activation,
    AttentionImpl,
    ConfigError,
    GemmRole,
    TransformerConfig,
    decompose,
)

DEFAULT_WAVE_THRESHOLD = 0.9
TARGET_MULTIPLE = 64


class Severity(str, enum.Enum):
    INFO = "info"
    WARN = "warn"
    ERROR = "error"

    @property
    def rank(self) -> int:
        return _RANK[self]


_RANK = {Severity.INFO: 0, Severity.WARN: 1, Severity.ERROR: 2}


@dataclass(frozen=True)
class Diagnostic:
    rule_id: str
    severity: Severity
    subject: str
    observed: str
    message: str
    suggestion: tuple[int, ...] = ()
    fix_field: str | None = None


@dataclass(frozen=True)
class RuleReport:
    config: TransformerConfig
    gpu_name: str
    diagnostics: tuple[Diagnostic, ...]
    notes: tuple[str, ...] = ()
    counts: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        counts = {s.value: 0 for s in Severity}
        for d in self.diagnostics:
            counts[d.severity.value] += 1
        object.__setattr__(self, "counts", counts)

    @property
    def passed(self) -> bool:
        return self.counts["error"] == 0 and self.counts["warn"] == 0

    @property
    def exit_code(self) -> int:
        if self.counts["error"]:
            return 2
        return 1 if self.counts["warn"] else 0

    def by_rule(self, rule_id: str) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.rule_id == rule_id]


def _divisor_grade(value: int) -> tuple[Severity | None, str]:
    d = pow2_divisor(value)
    if d >= TARGET_MULTIPLE:
        return None, ""
    if d >= 8:
        return Severity.WARN, f"largest power-of-two divisor is {d}; 64 is the target"
    return (
        Severity.WARN,
        f"largest power-of-two divisor is only {d}; expect severe tensor-core slowdown",
    )


def _r1_vocab(cfg: TransformerConfig) -> list[Diagnostic]:
    multiple = TARGET_MULTIPLE * (cfg.t if cfg.vocab_parallel else 1)
    if cfg.vocab_parallel and cfg.v % cfg.t:
        return [
            Diagnostic(
                "R1", Severity.ERROR, "v", str(cfg.v),
                f"v/t not integral ({cfg.v}/{cfg.t}) with a vocab-parallel output layer",
                (pad_vocab(cfg.v, multiple),), "v",
            )
        ]
    if cfg.v % multiple:
        return [
            Diagnostic(
                "R1", Severity.WARN, "v", str(cfg.v),
                f"vocabulary size is not a multiple of {multiple}; pad it",
                (pad_vocab(cfg.v, multiple),), "v",
            )
        ]
    return []


def _r2_tokens(cfg: TransformerConfig) -> list[Diagnostic]:
    bs = cfg.b * cfg.s
    sev, why = _divisor_grade(bs)
    if sev is None:
        return []
    return [
        Diagnostic(
            "R2", sev, "b*s", str(bs),
            f"b*s = {bs}: {why}",
            tuple(nearest_multiples(cfg.s, TARGET_MULTIPLE)), "s",
        )
    ]


def _head_suggestions(h: int, a: int) -> tuple[int, ...]:
    full = fix_heads(h, a)
    near = [ap for ap in full if a / 2 <= ap <= 1.5 * a]
    return tuple(near or full)


def _r3_head_dim(cfg: TransformerConfig) -> list[Diagnostic]:
    h, a = cfg.h, cfg.a
    if h % a:
        options = fix_heads(h, a) or sorted(divisors(h), key=lambda d: (abs(d - a), d))[:8]
        return [
            Diagnostic(
                "R3", Severity.ERROR, "h/a", f"{h}/{a}",
                f"h/a not integral ({h}/{a})",
                tuple(options), "a",
            )
        ]
    head_dim = h // a
    sev, why = _divisor_grade(head_dim)
    if sev is None:
        return []
    flash = cfg.attention_impl is AttentionImpl.FLASH
    msg = (
        f"head dimension h/a = {head_dim}: {why} "
        "(no further gain past 64)"
    )
    if flash:
        sev = Severity.INFO
        msg += "; fused attention is bandwidth-bound in h, see R11"
    if h % TARGET_MULTIPLE:
        msg += f"; h={h} is not a multiple of 64 so no head count fixes this"
    return [Diagnostic("R3", sev, "h/a", str(head_dim), msg, _head_suggestions(h, a), "a")]


def _r4_hidden_per_rank(cfg: TransformerConfig) -> list[Diagnostic]:
    h, t = cfg.h, cfg.t
    if h % t:
        options = [d for d in range(1, max(8, t) + 1) if h % d == 0]
        options.sort(key=lambda d: (abs(d - t), d))
        return [
            Diagnostic(
                "R4", Severity.ERROR, "h/t", f"{h}/{t}",
                f"h/t not integral ({h}/{t})",
                tuple(options[:4]), "t",
            )
        ]
    sev, why = _divisor_grade(h // t)
    if sev is None:
        return []
    smaller_t = [d for d in range(t - 1, 0, -1) if h % d == 0 and (h // d) % TARGET_MULTIPLE == 0]
    if smaller_t:
        options, fix = tuple(smaller_t[:4]), "t"
    else:
        options, fix = tuple(nearest_multiples(h, TARGET_MULTIPLE * t)), "h"
    return [
        Diagnostic("R4", sev, "h/t", str(h // t), f"per-rank hidden size h/t = {h // t}: {why}",
                   options, fix)
    ]


def _r5_bmm_batch(cfg: TransformerConfig) -> list[Diagnostic]:
    if (cfg.b * cfg.a) % cfg.t == 0:
        return []
    step = cfg.t // gcd(cfg.a, cfg.t)
    first = round_up(cfg.b, step)
    return [
        Diagnostic(
            "R5", Severity.ERROR, "(b*a)/t", f"{cfg.b * cfg.a}/{cfg.t}",
            f"(b*a)/t not integral ({cfg.b}*{cfg.a}/{cfg.t}); attention BMM batch is fractional",
            (first, first + step), "b",
        )
    ]


def _r6_tp_size(cfg: TransformerConfig) -> list[Diagnostic]:
    if cfg.t == 1:
        return []
    return [
        Diagnostic("R6", Severity.INFO, "t", str(cfg.t),
                   "keep tensor-parallel size as small as memory allows; "
                   "every split shrinks the per-GPU GEMMs")
    ]


def _r7_pipeline(cfg: TransformerConfig) -> list[Diagnostic]:
    p = cfg.pipeline_stages
    if p is None or cfg.L % p == 0:
        return []
    return [
        Diagnostic(
            "R7", Severity.WARN, "L", str(cfg.L),
            f"L={cfg.L} layers do not split evenly over {p} pipeline stages",
            tuple(nearest_multiples(cfg.L, p)), "L",
        )
    ]


def _kernels(cfg: TransformerConfig):
    try:
        dec = decompose(cfg)
    except ConfigError:
        return None
    return [(r, g) for r, g in dec.all_kernels() if r is not GemmRole.FusedFlashAttention]


def _r8_tensor_cores(cfg: TransformerConfig, gpu: GpuSpec, kernels) -> list[Diagnostic]:
    out = []
    for role, shape in kernels:
        report = alignment_report(shape, gpu)
        bad = [d for d in report.dims if not d.aligned]
        if not bad:
            continue
        worst = min(d.pow2_divisor for d in bad)
        observed = ", ".join(f"{d.dim}={d.value} (2^{d.pow2_divisor.bit_length() - 1})" for d in bad)
        msg = f"{role} {shape}: {observed} not a multiple of {bad[0].required} elements"
        if worst < 8:
            msg += "; tensor cores will be badly underused"
        out.append(Diagnostic("R8", Severity.WARN, str(role), observed, msg))
    return out


def _r9_waves(cfg: TransformerConfig, gpu: GpuSpec, kernels, threshold: float) -> list[Diagnostic]:
    out = []
    for role, shape in kernels:
        tile = select_tile(shape, gpu)
        ws = wave_stats(shape, tile, gpu.sm_count)
        if ws.wave_efficiency >= threshold:
            continue
        observed = f"{ws.wave_efficiency:.3f}"
        out.append(
            Diagnostic(
                "R9", Severity.WARN, str(role), observed,
                f"{role} {shape}: {ws.total_blocks} blocks of {tile} on {gpu.sm_count} SMs "
                f"-> {ws.wave_count} waves, last one {ws.tail_blocks or gpu.sm_count}/"
                f"{gpu.sm_count} full (efficiency {observed} < {threshold})",
            )
        )
    return out


def _r10_mlp_width(cfg: TransformerConfig) -> list[Diagnostic]:
    if cfg.canonical:
        return []
    d_ff, t = cfg.ffn_dim, cfg.t
    options = tuple(nearest_multiples(d_ff, TARGET_MULTIPLE * t))
    if d_ff % t:
        return [
            Diagnostic("R10", Severity.ERROR, "d_ff/t", f"{d_ff}/{t}",
                       f"d_ff/t not integral ({d_ff}/{t})", options, "d_ff")
        ]
    sev, why = _divisor_grade(d_ff // t)
    if sev is None:
        return []
    msg = f"MLP width d_ff/t = {d_ff // t}: {why}"
    if cfg.ffn_dim_defaulted:
        msg += f"; d_ff defaulted to round(8h/3) = {d_ff}, a third of h breaks alignment"
    return [Diagnostic("R10", sev, "d_ff/t", str(d_ff // t), msg, options, "d_ff")]


def _r11_flash(cfg: TransformerConfig) -> list[Diagnostic]:
    if cfg.attention_impl is not AttentionImpl.FLASH:
        return []
    return [
        Diagnostic("R11", Severity.INFO, "attention_impl", "flash",
                   "fused attention tracks a roofline in h; head-dim alignment matters little, "
                   "prefer making h as large as the budget allows")
    ]


def _r12_odd_tp(cfg: TransformerConfig) -> list[Diagnostic]:
    t, h = cfg.t, cfg.h
    if t & (t - 1) == 0 or h % t:
        return []
    need = TARGET_MULTIPLE * t
    if h % need:
        return [
            Diagnostic(
                "R12", Severity.WARN, "h", str(h),
                f"t={t} is not a power of two: h must be divisible by {t} and 64 "
                f"(i.e. by {need}) to keep h/t aligned",
                tuple(nearest_multiples(h, need)), "h",
            )
        ]
    others = [tp for tp in (2, 4, 8) if h % tp or (h // tp) % TARGET_MULTIPLE]
    if others:
        return [
            Diagnostic(
                "R12", Severity.INFO, "h", str(h),
                f"h={h} suits t={t} but h/t is misaligned for t in {others}; "
                "consider where the model will be fine-tuned or served",
            )
        ]
    return []


def lint(
    cfg: TransformerConfig,
    gpu: GpuSpec,
    wave_threshold: float = DEFAULT_WAVE_THRESHOLD,
) -> RuleReport:
    """Run R1-R12 against ``cfg`` on ``gpu``.

    Ill-formed configs produce error diagnostics instead of raising. The
    per-GEMM rules (R8, R9) only run when the layer decomposes.
    """
    diags: list[Diagnostic] = []
    diags += _r1_vocab(cfg)
    diags += _r2_tokens(cfg)
    diags += _r3_head_dim(cfg)
    diags += _r4_hidden_per_rank(cfg)
    diags += _r5_bmm_batch(cfg)
    diags += _r6_tp_size(cfg)
    diags += _r7_pipeline(cfg)
    kernels = _kernels(cfg)
    if kernels is not None:
        diags += _r8_tensor_cores(cfg, gpu, kernels)
        diags += _r9_waves(cfg, gpu, kernels, wave_threshold)
    diags += _r10_mlp_width(cfg)
    diags += _r11_flash(cfg)
    diags += _r12_odd_tp(cfg)
    notes = ("use the largest microbatch b that fits in memory",)
    return RuleReport(cfg, gpu.name, tuple(diags), notes)


def apply_suggestion(cfg: TransformerConfig, diag: Diagnostic, option: int = 0) -> TransformerConfig:
    if diag.fix_field is None or not diag.suggestion:
        raise ValueError(f"{diag.rule_id} diagnostic carries no suggestion")
    return cfg.replace(**{diag.fix_field: diag.suggestion[option]})


EXPLANATIONS: dict[str, str] = {
    "R1": (
        "The output (logit) layer is a GEMM with the vocabulary size as one dimension. "
        "A vocabulary that is not a multiple of 64 leaves that dimension misaligned for "
        "tensor cores on every step. Padding with a few unused tokens costs almost nothing."
    ),
    "R2": (
        "Every dense GEMM in the layer has b*s rows. Tensor cores want that dimension to be "
        "a multiple of 64 FP16 elements; smaller power-of-two factors degrade progressively. "
        "With s a power of two this holds automatically, so b itself need not be."
    ),
    "R3": (
        "The attention score and attention-over-value BMMs have the head dimension h/a as "
        "their inner or output dimension. These BMMs are small and memory-bound, and a head "
        "dimension without a factor of 64 also loses tensor-core efficiency. Beyond 64 there "
        "is no additional alignment benefit. Fewer heads (larger h/a) is usually the cheapest "
        "fix and leaves the parameter count unchanged."
    ),
    "R4": (
        "Under tensor parallelism each GPU sees h/t as a GEMM dimension of the projection and "
        "MLP matrices. It should carry a power-of-two factor of at least 64."
    ),
    "R5": (
        "The attention BMMs run (b*a)/t independent products on each GPU. If that is not an "
        "integer the heads cannot be split evenly across tensor-parallel ranks."
    ),
    "R6": (
        "Tensor parallelism divides GEMM dimensions by t, shrinking each kernel and adding "
        "communication. Use the smallest t that fits the model in memory."
    ),
    "R7": (
        "Pipeline stages should each own the same number of layers; otherwise the slowest "
        "stage sets the pace and the others idle."
    ),
    "R8": (
        "Tensor cores are fully used only when m, k and n are multiples of the GPU's alignment "
        "(16 bytes on V100, 128 bytes on A100, i.e. 8 or 64 FP16 elements). Larger "
        "power-of-two factors degrade more gracefully than small ones."
    ),
    "R9": (
        "A GEMM's output is split into thread-block tiles scheduled onto the SMs in waves. "
        "If the tile count is just above a multiple of the SM count, the final wave runs "
        "nearly empty yet takes about as long as a full one (wave quantization)."
    ),
    "R10": (
        "SwiGLU MLPs conventionally use d_ff = 8h/3 to keep the parameter count of a 4h MLP. "
        "Dividing by three destroys the power-of-two factors of h, so all three MLP GEMMs "
        "become misaligned. Pick a nearby d_ff with d_ff/t a multiple of 64."
    ),
    "R11": (
        "Fused attention kernels do not materialize the score matrix; their throughput grows "
        "smoothly with h rather than depending on the head dimension's divisibility. Head-dim "
        "alignment findings are downgraded to advice."
    ),
    "R12": (
        "With a tensor-parallel size that is not a power of two (e.g. 6 GPUs per node), h "
        "must be divisible by t and by 64 for h/t to stay aligned. Such a choice may then be "
        "misaligned on the 2, 4 or 8 GPU nodes used for fine-tuning or inference."
    ),
}


def explain(rule_id: str) -> str:
    try:
        return EXPLANATIONS[rule_id.upper()]
    except KeyError:
        raise KeyError(f"unknown rule {rule_id!r}; known: {', '.join(EXPLANATIONS)}") from None
