from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from config_family import config_family
from gemmfit.hardware import resolve_gpu
from gemmfit.transformer import (
    ConfigError,
    GemmRole,
    TransformerConfig,
    config_from_mapping,
    decompose,
    decomposed_layer_flops,
    forward_flops_per_layer,
    latency_proportions,
    layer_latency_us,
    load_model_config,
    param_count,
    save_model_config,
)

A100 = resolve_gpu("A100")
GPT3_27B = TransformerConfig(h=2560, a=32, b=4, s=2048, L=32, v=50304)


def test_gpt3_shapes():
    dec = decompose(GPT3_27B)
    got = {r: (g.batch, g.m, g.k, g.n) for r, g in dec.gemms()}
    assert got == {
        GemmRole.QkvTransform: (1, 8192, 2560, 7680),
        GemmRole.AttentionScore: (128, 2048, 80, 2048),
        GemmRole.AttentionOverValue: (128, 2048, 2048, 80),
        GemmRole.LinearProjection: (1, 8192, 2560, 2560),
        GemmRole.MlpUp: (1, 8192, 2560, 10240),
        GemmRole.MlpDown: (1, 8192, 10240, 2560),
    }
    logit = dec.logit
    assert (logit.m, logit.k, logit.n) == (8192, 2560, 50304)


def test_layer_order_includes_markers():
    names = [op.name for op in decompose(GPT3_27B).ops]
    assert names == [
        "Input Embedding", "Layer Norm 1", "QKV Transform", "Attention Score",
        "Attn over Value", "Linear Projection", "Layer Norm 2", "MLP Up", "MLP Down",
    ]


def test_tensor_parallel_split():
    dec = decompose(GPT3_27B.replace(t=4))
    assert dec.shape_of(GemmRole.QkvTransform).n == 1920
    assert dec.shape_of(GemmRole.AttentionScore).batch == 32
    assert dec.shape_of(GemmRole.LinearProjection).k == 640
    assert dec.shape_of(GemmRole.MlpDown).k == 2560
    # logit stays full width unless the vocab is split
    assert dec.logit.n == 50304
    assert decompose(GPT3_27B.replace(t=4, vocab_parallel=True)).logit.n == 12576


def test_swiglu_adds_gate():
    cfg = TransformerConfig(h=4096, a=32, activation="swiglu")
    assert cfg.ffn_dim == 10923
    dec = decompose(cfg.replace(d_ff=11008))
    assert dec.shape_of(GemmRole.MlpGate) == dec.shape_of(GemmRole.MlpUp)
    assert dec.shape_of(GemmRole.MlpUp).n == 11008


def test_flash_single_kernel():
    dec = decompose(GPT3_27B.replace(attention_impl="flash"))
    roles = [r for r, _ in dec.gemms()]
    assert GemmRole.FusedFlashAttention in roles
    assert GemmRole.AttentionScore not in roles
    # two BMMs' worth of FLOPs in one kernel keeps the identity intact
    assert decomposed_layer_flops(dec.config) == forward_flops_per_layer(GPT3_27B)


@pytest.mark.parametrize(
    "changes, quotient",
    [
        ({"a": 30}, "h/a not integral (2560/30)"),
        ({"t": 3}, "h/t"),
        ({"t": 8, "a": 20, "b": 1}, "(b*a)/t"),
        ({"t": 4, "v": 50305, "vocab_parallel": True}, "v/t"),
        ({"t": 4, "d_ff": 10242}, "d_ff/t"),
    ],
)
def test_decompose_names_failing_quotient(changes, quotient):
    with pytest.raises(ConfigError) as info:
        decompose(GPT3_27B.replace(**changes))
    assert quotient in str(info.value)


def test_config_validation():
    with pytest.raises(ConfigError, match="h must be"):
        TransformerConfig(h=0)
    with pytest.raises(ConfigError, match="activation"):
        TransformerConfig(h=64, activation="relu6")
    with pytest.raises(ConfigError):
        TransformerConfig(h=64, dtype="fp7")


def test_config_file_round_trip(tmp_path):
    cfg = GPT3_27B.replace(activation="swiglu", d_ff=6912, mlp_ratio=Fraction(8, 3), pipeline_stages=4)
    path = tmp_path / "model.toml"
    save_model_config(cfg, path)
    assert load_model_config(path) == cfg


def test_config_unknown_field():
    with pytest.raises(ConfigError, match="heads"):
        config_from_mapping({"h": 64, "heads": 2})


def test_params_gpt3():
    pc = param_count(GPT3_27B)
    expected = 12 * 2560**2 * 32 + 13 * 2560 * 32 + (50304 + 2048) * 2560
    assert pc.exact == pc.closed_form == expected
    assert pc.approx == 12 * 2560**2 * 32
    assert pc.exact == 2_651_668_480


def test_params_tiny_closed_form():
    assert param_count(TransformerConfig(h=1, L=1, v=1, s=1)).exact == 27


def test_params_non_canonical():
    rope = param_count(GPT3_27B.replace(positional="rotary"))
    assert rope.closed_form is None
    assert rope.exact == param_count(GPT3_27B).exact - 2048 * 2560
    swiglu = GPT3_27B.replace(activation="swiglu", d_ff=6912)
    assert param_count(swiglu).breakdown["mlp"] == 3 * 2560 * 6912 * 32


@pytest.mark.parametrize("cfg", config_family(50, seed=7))
def test_flop_identity(cfg):
    assert cfg.t * decomposed_layer_flops(cfg) == forward_flops_per_layer(cfg)


@settings(max_examples=100, deadline=None)
@given(
    h64=st.integers(1, 128),
    log_heads=st.integers(0, 6),
    b=st.integers(1, 8),
    s=st.sampled_from([512, 1024, 2048]),
    layout=st.sampled_from(["sequential", "parallel"]),
)
def test_proportions_sum_to_one(h64, log_heads, b, s, layout):
    h = 64 * h64
    a = 2**log_heads
    if h % a:
        return
    cfg = TransformerConfig(h=h, a=a, b=b, s=s, layer_layout=layout)
    props = latency_proportions(cfg, A100)
    assert sum(props.values()) == pytest.approx(1.0)
    assert all(p > 0 for p in props.values())
    assert layer_latency_us(cfg, A100) > 0


def test_layout_does_not_change_proportions():
    par = latency_proportions(GPT3_27B.replace(layer_layout="parallel"), A100)
    assert par == latency_proportions(GPT3_27B, A100)
