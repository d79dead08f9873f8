import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gemmfit.gemm import (
    CostModel,
    GemmShape,
    alignment_penalty,
    alignment_report,
    analyze,
    arithmetic_intensity,
    bytes_moved,
    estimate_throughput,
    flops,
    is_wave_free,
    load_cost_model,
    pow2_divisor,
    roofline_tflops,
    select_tile,
    tile_grid,
    tile_waste,
    wave_stats,
)
from gemmfit.hardware import TileSpec, resolve_gpu

A100 = resolve_gpu("A100")
dims = st.integers(min_value=1, max_value=20000)
tiles = st.sampled_from(A100.tile_candidates)


def test_flops_and_bytes():
    g = GemmShape(8192, 2560, 7680)
    assert flops(g) == 322_122_547_200
    assert bytes_moved(g) == (8192 * 2560 + 2560 * 7680 + 8192 * 7680) * 2
    # beta != 0 reads C as well
    g2 = GemmShape(8192, 2560, 7680, beta=1.0)
    assert bytes_moved(g2) == bytes_moved(g) + 8192 * 7680 * 2
    bmm = GemmShape(2048, 80, 2048, batch=128)
    assert flops(bmm) == 2 * 128 * 2048 * 80 * 2048


def test_shape_validation():
    with pytest.raises(ValueError, match="GemmShape.k"):
        GemmShape(1, 0, 1)
    with pytest.raises(ValueError):
        GemmShape(1, 1, 1, batch=True)
    with pytest.raises(KeyError):
        GemmShape(1, 1, 1, dtype="fp7")


def test_tile_grid_and_waste():
    t = TileSpec(128, 256)
    assert tile_grid(13952, 13824, t) == (109, 54)
    assert tile_waste(256, 512, t) == 0.0
    assert tile_waste(129, 256, t) == pytest.approx(1 - 129 / 256)


def test_worked_wave_example():
    ws = wave_stats(GemmShape(128, 64, 109 * 256), TileSpec(128, 256), 108)
    assert (ws.total_blocks, ws.full_waves, ws.tail_blocks, ws.wave_count) == (109, 1, 1, 2)
    assert ws.wave_efficiency == pytest.approx(109 / 216)


def test_wave_free_uses_either_orientation():
    t = TileSpec(128, 256)
    # 109 x 54 blocks leaves a tail; 55 x 108 does not
    assert wave_stats(GemmShape(13952, 1, 13824), t, 108).tail_blocks != 0
    assert wave_stats(GemmShape(13952, 1, 13824), t.transposed(), 108).tail_blocks == 0
    assert is_wave_free(13952, 13824, t, 108)
    assert not is_wave_free(128, 109 * 256, t, 108)


def test_pow2_divisor():
    assert [pow2_divisor(x) for x in (1, 2, 80, 96, 2560, 50257, 50304)] == [1, 2, 16, 32, 512, 1, 128]
    with pytest.raises(ValueError):
        pow2_divisor(0)


def test_alignment_report():
    rep = alignment_report(GemmShape(2048, 80, 2048, batch=128), A100)
    assert not rep.aligned
    assert rep["k"].pow2_divisor == 16 and rep["k"].required == 64
    assert rep["m"].aligned and rep["n"].aligned
    assert alignment_penalty(rep) == 0.5
    assert alignment_penalty(rep, CostModel(alignment_floor=0.1)) == 0.25
    assert alignment_report(GemmShape(2048, 80, 2048), resolve_gpu("V100")).aligned


def test_select_tile_examples():
    assert select_tile(GemmShape(13824, 4096, 13824), A100) == TileSpec(256, 128)
    assert select_tile(GemmShape(64, 64, 64), A100) == TileSpec(64, 64)
    assert select_tile(GemmShape(1, 64, 1), A100) == TileSpec(64, 64)


def _select_tile_oracle(g, gpu):
    costs = []
    for idx, t in enumerate(gpu.tile_candidates):
        blocks = g.batch * math.ceil(g.m / t.t1) * math.ceil(g.n / t.t2)
        waves = math.ceil(blocks / gpu.sm_count)
        costs.append((waves * t.t1 * t.t2 * g.k, -t.t1 * t.t2, idx, t))
    return min(costs)[3]


@settings(max_examples=200, deadline=None)
@given(m=dims, k=st.integers(1, 8192), n=dims, batch=st.integers(1, 64))
def test_select_tile_matches_oracle(m, k, n, batch):
    g = GemmShape(m, k, n, batch)
    assert select_tile(g, A100) == _select_tile_oracle(g, A100)


@settings(max_examples=300, deadline=None)
@given(m=dims, n=dims, batch=st.integers(1, 64), tile=tiles, sms=st.integers(1, 200))
def test_wave_invariants(m, n, batch, tile, sms):
    ws = wave_stats(GemmShape(m, 1, n, batch), tile, sms)
    assert ws.full_waves * sms + ws.tail_blocks == ws.total_blocks
    assert 0 <= ws.tail_blocks < sms
    assert ws.wave_count == math.ceil(ws.total_blocks / sms)
    assert 0 < ws.wave_efficiency <= 1
    assert (ws.wave_efficiency == 1) == (ws.tail_blocks == 0)


@settings(max_examples=300, deadline=None)
@given(m=dims, n=dims, tile=tiles)
def test_tile_waste_bounds(m, n, tile):
    w = tile_waste(m, n, tile)
    assert 0 <= w < 1
    assert (w == 0) == (m % tile.t1 == 0 and n % tile.t2 == 0)


@settings(max_examples=300, deadline=None)
@given(m=dims, k=dims, n=dims, batch=st.integers(1, 256), dtype=st.sampled_from(["fp16", "bf16", "fp32", "tf32"]))
def test_prediction_never_exceeds_peak(m, k, n, batch, dtype):
    g = GemmShape(m, k, n, batch, dtype=dtype)
    a = analyze(g, A100)
    assert 0 < a.predicted_tflops <= A100.peak_tflops(dtype)
    assert a.predicted_latency_us == pytest.approx(a.flops / (a.predicted_tflops * 1e6))
    assert a.arithmetic_intensity == pytest.approx(arithmetic_intensity(g))


def test_roofline_regimes():
    # memory bound: AI of 1 FLOP/byte on 1555 GB/s is 1.555 TFLOP/s
    assert roofline_tflops(1000, 1000, 312.0, 1555.0) == pytest.approx(1.555)
    assert roofline_tflops(10**9, 1, 312.0, 1555.0) == 312.0


def test_analyze_frozen_values():
    # independent hand computation for an aligned, wave-free case
    g = GemmShape(108 * 256, 4096, 128)
    a = analyze(g, A100)
    f = 2 * 108 * 256 * 4096 * 128
    b = (108 * 256 * 4096 + 4096 * 128 + 108 * 256 * 128) * 2
    bound = min(312.0, f / b * 1555.0 / 1000)
    assert a.waves.tail_blocks == 0 and a.tile_waste_fraction == 0 and a.alignment.aligned
    assert a.predicted_tflops == pytest.approx(bound)


def test_cost_model_switches():
    g = GemmShape(8192, 2560, 7680)
    full = analyze(g, A100).predicted_tflops
    raw = analyze(g, A100, cost=CostModel(apply_wave_quantization=False, apply_tile_quantization=False))
    assert raw.predicted_tflops >= full
    with pytest.raises(ValueError):
        CostModel(alignment_floor=0)


def test_load_cost_model(tmp_path):
    path = tmp_path / "cost.toml"
    path.write_text("[cost_model]\nalignment_floor = 0.25\n")
    assert load_cost_model(path).alignment_floor == 0.25
    path.write_text("bogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        load_cost_model(path)


class _Table:
    def __init__(self, value):
        self.value = value

    def lookup(self, gpu_name, shape):
        return self.value


def test_calibration_overrides_and_warns_above_peak(caplog):
    g = GemmShape(4096, 4096, 4096)
    tflops, latency = estimate_throughput(g, A100, _Table(123.456))
    assert tflops == 123.456
    assert latency == pytest.approx(flops(g) / 123.456e6)
    assert analyze(g, A100, _Table(None)).calibrated is False
    with caplog.at_level("WARNING"):
        assert analyze(g, A100, _Table(400.0)).predicted_tflops == 400.0
    assert "exceeds" in caplog.text


def test_placeholder_gpu_refuses_estimates():
    with pytest.raises(ValueError, match="placeholder"):
        analyze(GemmShape(64, 64, 64), resolve_gpu("MI250X"))
