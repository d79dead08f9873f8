"""Search for nearby, parameter-preserving configurations with better shapes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

from ._divisibility import fix_heads, pad_vocab, round_up
from .gemm import DEFAULT_COST_MODEL, CostModel, GemmShape, ThroughputLookup, analyze, pow2_divisor
from .hardware import GpuSpec
from .rules import DEFAULT_WAVE_THRESHOLD, RuleReport, lint
from .transformer import (
    ConfigError,
    TransformerConfig,
    decompose,
    layer_latency_us,
    param_count,
)

__all__ = [
    "SearchSpace",
    "Candidate",
    "DffResult",
    "suggest",
    "swiglu_dff_search",
    "pad_vocab",
    "fix_heads",
]

VARIABLE_FIELDS = frozenset({"a", "h", "d_ff", "v", "t"})

ACCURACY_CAVEAT = (
    "fewer attention heads can cost model quality; validate before committing"
)


@dataclass(frozen=True)
class SearchSpace:
    vary: frozenset[str] = frozenset({"a"})
    h_step: int = 64
    h_range_steps: int = 8
    a_candidates: tuple[int, ...] | None = None
    a_window: float = 0.5
    d_ff_window: int = 1024
    d_ff_step: int = 64
    budget_tolerance: float = 0.02

    def __post_init__(self) -> None:
        vary = frozenset(self.vary)
        unknown = vary - VARIABLE_FIELDS
        if unknown:
            raise ValueError(f"cannot vary {sorted(unknown)}; choose from {sorted(VARIABLE_FIELDS)}")
        object.__setattr__(self, "vary", vary)
        if self.h_step < 1 or self.d_ff_step < 1:
            raise ValueError("steps must be positive")
        if self.budget_tolerance < 0:
            raise ValueError("budget_tolerance must be non-negative")


@dataclass(frozen=True)
class Candidate:
    config: TransformerConfig
    param_delta_fraction: float
    predicted_layer_latency_us: float
    report: RuleReport
    rank: int
    changes: dict[str, tuple[int, int]] = field(default_factory=dict)
    distance: float = 0.0

    @property
    def warn_count(self) -> int:
        return self.report.counts["warn"]

    @property
    def is_baseline(self) -> bool:
        return not self.changes


def _values_h(cfg: TransformerConfig, space: SearchSpace) -> list[int]:
    if "h" not in space.vary:
        return [cfg.h]
    span = space.h_step * space.h_range_steps
    lo = max(space.h_step, round_up(cfg.h - span, space.h_step))
    values = set(range(lo, cfg.h + span + 1, space.h_step))
    values.add(cfg.h)
    return sorted(values)


def _values_a(cfg: TransformerConfig, h: int, space: SearchSpace) -> list[int]:
    if "a" not in space.vary:
        return [cfg.a]
    if space.a_candidates is not None:
        pool = set(space.a_candidates)
    else:
        lo = max(1, math.ceil(cfg.a * (1 - space.a_window)))
        hi = math.floor(cfg.a * (1 + space.a_window))
        pool = set(range(lo, hi + 1))
    pool.add(cfg.a)
    return sorted(ap for ap in pool if ap >= 1 and h % ap == 0)


def _values_d_ff(cfg: TransformerConfig, h: int, space: SearchSpace) -> list[int | None]:
    if "d_ff" not in space.vary:
        return [cfg.d_ff]
    base = cfg.d_ff if cfg.d_ff is not None else cfg.replace(h=h).ffn_dim
    step, w = space.d_ff_step, space.d_ff_window
    values: set[int | None] = set(range(max(step, round_up(base - w, step)), base + w + 1, step))
    values.add(base)
    return sorted(values)


def _values_v(cfg: TransformerConfig, space: SearchSpace) -> list[int]:
    if "v" not in space.vary:
        return [cfg.v]
    return sorted({cfg.v, pad_vocab(cfg.v)})


def _values_t(cfg: TransformerConfig, space: SearchSpace) -> list[int]:
    if "t" not in space.vary:
        return [cfg.t]
    values = {cfg.t}
    p = 1
    while p < cfg.t:
        values.add(p)
        p *= 2
    return sorted(values)


def _enumerate(cfg: TransformerConfig, space: SearchSpace):
    seen = set()
    for h in _values_h(cfg, space):
        combos = itertools.product(
            _values_a(cfg, h, space),
            _values_d_ff(cfg, h, space),
            _values_v(cfg, space),
            _values_t(cfg, space),
        )
        for a, d_ff, v, t in combos:
            try:
                cand = cfg.replace(h=h, a=a, d_ff=d_ff, v=v, t=t)
            except ConfigError:
                continue
            if cfg.d_ff is None and cand.d_ff is not None and cand.d_ff == cfg.replace(h=h).ffn_dim:
                cand = cand.replace(d_ff=None)
            key = (cand.h, cand.a, cand.ffn_dim, cand.v, cand.t)
            if key in seen:
                continue
            seen.add(key)
            yield cand


def _changes(base: TransformerConfig, cand: TransformerConfig) -> dict[str, tuple[int, int]]:
    out = {}
    for name in ("h", "a", "v", "t"):
        old, new = getattr(base, name), getattr(cand, name)
        if old != new:
            out[name] = (old, new)
    if base.ffn_dim != cand.ffn_dim:
        out["d_ff"] = (base.ffn_dim, cand.ffn_dim)
    return out


def suggest(
    cfg: TransformerConfig,
    gpu: GpuSpec,
    space: SearchSpace = SearchSpace(),
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
    wave_threshold: float = DEFAULT_WAVE_THRESHOLD,
) -> list[Candidate]:
    """Rank every configuration in ``space`` around ``cfg``.

    Candidates must decompose, lint without errors and stay within the
    parameter budget. Ordering is lexicographic: fewest lint warnings, then
    the smallest change from ``cfg`` (sum of |log ratio| over changed fields),
    then predicted layer latency, then parameter drift. An empty list means
    nothing in the space qualifies.
    """
    base_params = param_count(cfg).exact
    scored = []
    for cand in _enumerate(cfg, space):
        try:
            decompose(cand)
        except ConfigError:
            continue
        delta = (param_count(cand).exact - base_params) / base_params
        if abs(delta) > space.budget_tolerance + 1e-12:
            continue
        report = lint(cand, gpu, wave_threshold)
        if report.counts["error"]:
            continue
        latency = layer_latency_us(cand, gpu, calibration, cost)
        changes = _changes(cfg, cand)
        distance = sum(abs(math.log(new / old)) for old, new in changes.values())
        scored.append((cand, delta, latency, report, changes, distance))

    def key(item):
        cand, delta, latency, report, _, distance = item
        return (
            report.counts["warn"],
            round(distance, 12),
            latency,
            abs(delta),
            (cand.h, cand.a, cand.ffn_dim, cand.v, cand.t),
        )

    scored.sort(key=key)
    return [
        Candidate(cand, delta, latency, report, rank, changes, distance)
        for rank, (cand, delta, latency, report, changes, distance) in enumerate(scored, 1)
    ]


@dataclass(frozen=True)
class DffResult:
    d_ff: int
    mlp_latency_us: float
    pow2_divisor: int

    @property
    def aligned(self) -> bool:
        return self.pow2_divisor >= 64


def swiglu_dff_search(
    h: int,
    target_ratio: Fraction | float = Fraction(8, 3),
    window: int = 512,
    gpu: GpuSpec | None = None,
    cfg: TransformerConfig | None = None,
    calibration: ThroughputLookup | None = None,
    cost: CostModel = DEFAULT_COST_MODEL,
) -> list[DffResult]:
    """Brute-force every MLP width within ``window`` of ``target_ratio * h``.

    Each width is scored by the predicted latency of the up, gate and down
    GEMMs. Results put widths whose per-GPU size has a power-of-two factor
    of 64 first, then sort by latency and by distance from the target.
    ``cfg`` supplies b, s, t and dtype (defaults: b=1, s=2048, t=1, fp16).
    """
    if h < 64:
        raise ValueError(f"h must be >= 64, got {h}")
    if gpu is None:
        raise ValueError("gpu is required")
    ctx = cfg or TransformerConfig(h=h)
    bs, t, dt = ctx.b * ctx.s, ctx.t, ctx.dtype
    ratio = Fraction(target_ratio) if not isinstance(target_ratio, float) else Fraction(
        target_ratio
    ).limit_denominator(1 << 20)
    target = round(ratio * h)
    results = []
    for d_ff in range(max(1, target - window), target + window + 1):
        if d_ff % t:
            continue
        ff = d_ff // t
        up = analyze(GemmShape(bs, h, ff, dtype=dt), gpu, calibration, cost)
        down = analyze(GemmShape(bs, ff, h, dtype=dt), gpu, calibration, cost)
        latency = 2 * up.predicted_latency_us + down.predicted_latency_us
        results.append((DffResult(d_ff, latency, pow2_divisor(ff)), abs(d_ff - target)))
    results.sort(key=lambda r: (not r[0].aligned, r[0].mlp_latency_us, r[1], r[0].d_ff))
    return [r for r, _ in results]
