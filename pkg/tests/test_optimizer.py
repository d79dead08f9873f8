from fractions import Fraction

import pytest

from gemmfit.hardware import resolve_gpu
from gemmfit.optimizer import SearchSpace, fix_heads, pad_vocab, suggest, swiglu_dff_search
from gemmfit.transformer import TransformerConfig, param_count

A100 = resolve_gpu("A100")
GPT3_27B = TransformerConfig(h=2560, a=32, b=4, s=2048, L=32, v=50304)


def test_pad_vocab():
    assert pad_vocab(50257) == 50304
    assert pad_vocab(50304) == 50304
    assert pad_vocab(50257, 128) == 50304
    with pytest.raises(ValueError):
        pad_vocab(0)


def test_fix_heads():
    assert fix_heads(2560, 32)[:2] == [40, 20]
    assert all(2560 % ap == 0 and (2560 // ap) % 64 == 0 for ap in fix_heads(2560, 32))
    assert fix_heads(2500, 32) == []


def test_suggest_heads_for_gpt3():
    ranked = suggest(GPT3_27B, A100)
    assert ranked[0].config.a == 40
    assert ranked[0].warn_count == 0
    assert ranked[0].changes == {"a": (32, 40)}
    assert ranked[0].param_delta_fraction == 0.0
    assert [c.rank for c in ranked] == list(range(1, len(ranked) + 1))
    baseline = next(c for c in ranked if c.is_baseline)
    assert baseline.warn_count == 3


def test_suggest_respects_budget():
    space = SearchSpace(vary={"h", "a"}, budget_tolerance=0.01)
    base = param_count(GPT3_27B).exact
    ranked = suggest(GPT3_27B, A100, space)
    assert ranked
    for c in ranked:
        assert abs(param_count(c.config).exact - base) / base <= 0.01 + 1e-12
        assert c.report.counts["error"] == 0


def test_suggest_ordering_key():
    ranked = suggest(GPT3_27B, A100, SearchSpace(vary={"a", "v"}))
    keys = [(c.warn_count, round(c.distance, 12)) for c in ranked]
    assert keys == sorted(keys)


def test_search_space_validation():
    with pytest.raises(ValueError, match="cannot vary"):
        SearchSpace(vary={"L"})


def test_swiglu_search_llama():
    results = swiglu_dff_search(4096, Fraction(8, 3), 512, gpu=A100)
    assert len(results) == 1025
    aligned = [r for r in results if r.aligned]
    assert results[: len(aligned)] == aligned
    assert 11008 in [r.d_ff for r in aligned]
    assert all(r.d_ff % 64 == 0 for r in aligned)
    lats = [r.mlp_latency_us for r in aligned]
    assert lats == sorted(lats)


def test_swiglu_search_respects_tensor_parallel():
    cfg = TransformerConfig(h=4096, a=32, t=4)
    results = swiglu_dff_search(4096, gpu=A100, cfg=cfg, window=64)
    assert all(r.d_ff % 4 == 0 for r in results)
    assert all(r.aligned == ((r.d_ff // 4) % 64 == 0) for r in results)


def test_swiglu_search_large_model():
    (r,) = swiglu_dff_search(8192, Fraction(28672, 8192), 0, gpu=A100)
    assert r.d_ff == 28672 and r.pow2_divisor == 4096


def test_swiglu_search_argument_checks():
    with pytest.raises(ValueError):
        swiglu_dff_search(32, gpu=A100)
    with pytest.raises(ValueError):
        swiglu_dff_search(4096)


def test_optimal_config_is_its_own_best_suggestion():
    ranked = suggest(GPT3_27B.replace(a=40), A100)
    assert ranked[0].is_baseline
    assert ranked[0].changes == {}


def test_suggest_is_deterministic():
    space = SearchSpace(vary={"a", "h"})
    first = [(c.config, c.predicted_layer_latency_us) for c in suggest(GPT3_27B, A100, space)]
    second = [(c.config, c.predicted_layer_latency_us) for c in suggest(GPT3_27B, A100, space)]
    assert first == second
