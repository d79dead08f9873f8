import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gemmfit.calibration import (
    MEASUREMENT_COLUMNS,
    CalibrationError,
    CalibrationTable,
    MeasurementRecord,
    SweepSpec,
    emit_bench_plan,
    export_sweep,
    ingest_measurements,
    read_plan,
    read_sweep,
    run_sweep,
    write_measurements,
    write_plan,
)
from gemmfit.gemm import GemmShape, analyze
from gemmfit.hardware import resolve_gpu
from gemmfit.transformer import GemmRole, TransformerConfig

A100 = resolve_gpu("A100")
GPT3_27B = TransformerConfig(h=2560, a=32, b=4, s=2048, L=32, v=50304)
HEADER = ",".join(MEASUREMENT_COLUMNS)


def _csv(*rows: str) -> io.StringIO:
    return io.StringIO("\n".join((HEADER,) + rows) + "\n")


def test_bench_plan_contents():
    plan = emit_bench_plan(GPT3_27B, A100)
    shapes = {(p.batch, p.m, p.k, p.n) for p in plan}
    assert (128, 2048, 80, 2048) in shapes
    assert (1, 8192, 2560, 50304) in shapes
    assert len(plan) == len(shapes)  # deduplicated
    # the fused attention kernel is not a plain GEMM, so no BMM rows remain
    flash = emit_bench_plan(GPT3_27B.replace(attention_impl="flash"), "A100")
    assert all(p.batch == 1 for p in flash) and len(flash) == len(plan) - 2


def test_plan_round_trip(tmp_path):
    plan = emit_bench_plan(GPT3_27B, A100)
    path = tmp_path / "plan.csv"
    write_plan(plan, path)
    assert read_plan(path) == plan
    assert path.read_text().splitlines()[0] == "gpu,dtype,batch,m,k,n"


def test_malformed_rows_are_skipped_with_line_numbers(caplog):
    src = _csv(
        "A100,fp16,1,64,64,64,10.0,1",
        "A100,fp16,1,128,64,64,11.0,1",
        "A100,fp16,1,256,64,64,12.0,1",
        "A100,fp16,1,512,64,64,13.0,1",
        "A100,fp16,1,1024,64,64,14.0,1",
        "A100,fp16,1,oops,64,64,15.0,1",
        "A100,fp7,1,64,64,64,1.0,1",
        "A100,fp16,1,64,64",
        "A100,fp16,1,64,64,64,-3,1",
    )
    with caplog.at_level("WARNING"):
        table = ingest_measurements(src)
    assert len(table) == 5
    assert [s.line for s in table.skipped] == [7, 8, 9, 10]
    assert str(table.skipped[0]).startswith("row 7 skipped:")
    assert "row 7 skipped" in caplog.text


def test_bad_header_raises():
    with pytest.raises(CalibrationError, match="header"):
        ingest_measurements(io.StringIO("gpu,m,k,n\nA100,1,1,1\n"))
    with pytest.raises(CalibrationError, match="empty"):
        ingest_measurements(io.StringIO(""))


def test_duplicates_more_repeats_win_then_last_row():
    src = _csv(
        "A100,fp16,1,64,64,64,10.0,5",
        "A100,fp16,1,64,64,64,20.0,2",
        "A100,fp16,1,64,64,64,30.0,5",
    )
    assert ingest_measurements(src).lookup("A100", GemmShape(64, 64, 64)) == 30.0


def test_interpolation_policies():
    src = _csv("A100,fp16,1,1024,1024,1024,100.0,1", "A100,fp16,1,8192,8192,8192,250.0,1")
    text = src.getvalue()
    near = ingest_measurements(io.StringIO(text))
    assert near.lookup("A100", GemmShape(6000, 6000, 6000)) == 250.0
    assert near.lookup("A100", GemmShape(1500, 1500, 1500)) == 100.0
    assert near.lookup("A100", GemmShape(1500, 1500, 1500, dtype="bf16")) is None
    assert near.lookup("V100", GemmShape(1024, 1024, 1024)) is None
    exact = ingest_measurements(io.StringIO(text), "exact_only")
    assert exact.lookup("A100", GemmShape(1500, 1500, 1500)) is None


finite = st.floats(min_value=1e-6, max_value=1e4, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(1, 64), st.integers(1, 9000), st.integers(1, 9000), st.integers(1, 9000), finite),
        min_size=1,
        max_size=20,
        unique_by=lambda t: t[:4],
    )
)
def test_measurement_round_trip_is_bit_exact(rows):
    records = [MeasurementRecord("A100", "fp16", m, k, n, b, tf) for b, m, k, n, tf in rows]
    buf = io.StringIO()
    write_measurements(records, buf)
    buf.seek(0)
    table = ingest_measurements(buf, "exact_only")
    for r in records:
        shape = GemmShape(r.m, r.k, r.n, r.batch)
        assert table.lookup("A100", shape) == r.measured_tflops
        assert analyze(shape, A100, table).predicted_tflops == r.measured_tflops


def test_record_validation():
    with pytest.raises(ValueError):
        MeasurementRecord("A100", "fp16", 1, 1, 1, 1, 0.0)
    with pytest.raises(ValueError):
        MeasurementRecord("A100", "fp16", 1, 1, 1, 1, float("nan"))
    with pytest.raises(ValueError):
        MeasurementRecord("A100", "fp16", 0, 1, 1, 1, 1.0)


def test_sweep_points_and_export(tmp_path):
    spec = SweepSpec(GPT3_27B, "h", 2048, 4096, 64, roles=("MlpUp",), head_dim=64)
    points = run_sweep(spec, A100)
    assert [p.x for p in points] == list(range(2048, 4097, 64))
    assert all(p.role == "MlpUp" for p in points)
    path = tmp_path / "sweep.csv"
    export_sweep(points, path, x_name="h")
    name, back = read_sweep(path)
    assert name == "h" and back == points


def test_sweep_skips_invalid_points():
    spec = SweepSpec(GPT3_27B, "a", 30, 34)
    assert [x for x, _ in spec.points()] == [32]


def test_sweep_flash_roofline_only():
    spec = SweepSpec(GPT3_27B.replace(attention_impl="flash"), "h", 2560, 2560, roles=[GemmRole.FusedFlashAttention])
    (p,) = run_sweep(spec, A100)
    assert p.wave_efficiency == 1.0 and p.predicted_tflops <= 312.0


def test_sweep_validation():
    with pytest.raises(ValueError, match="cannot sweep"):
        SweepSpec(GPT3_27B, "L", 1, 2)
    with pytest.raises(ValueError, match="nothing to export"):
        export_sweep([], io.StringIO())


def test_plan_from_sweep():
    spec = SweepSpec(GPT3_27B, "b", 1, 4)
    plan = emit_bench_plan(spec, A100)
    assert {p.m for p in plan if p.batch == 1 and p.k == 2560 and p.n == 7680} == {2048, 4096, 6144, 8192}


def test_table_from_records_len():
    recs = [MeasurementRecord("A100", "fp16", 64, 64, 64, 1, 1.0), MeasurementRecord("A100", "FP16", 64, 64, 64, 1, 2.0)]
    table = CalibrationTable.from_records(recs)
    assert len(table) == 1
    assert table.lookup("A100", GemmShape(64, 64, 64)) == 2.0
