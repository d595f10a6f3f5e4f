import numpy as np
import pytest

from entropy_steer.analysis import compare, mra, peak_index, segment_phases, summarize
from entropy_steer.trace import CSV_COLUMNS, StepRecord, Trace, dumps, export, loads, read_trace


def make_trace(emas, optimized_every=2):
    records = []
    for i, e in enumerate(emas):
        opt = (i + 1) % optimized_every == 0
        records.append(
            StepRecord(step=i + 1, token=i % 5, entropy=e + 0.01, ema=e, alpha=1 if i < 2 else -1,
                       loss=-(e + 0.01) if opt else None, grad_norm=0.5 if opt else None,
                       optimized=opt, optimizer_steps=(i + 1) // optimized_every)
        )
    return Trace(header={"note": "x", "n": len(emas)}, records=records)


def test_segmentation_example():
    seg = segment_phases([0.5, 0.6, 0.4, 0.9, 0.7])
    assert seg.peak_index == 3
    assert seg.micro_cycles == [(2, 3)]
    assert seg.macro_exploration == (0, 3)
    assert seg.macro_exploitation == (4, 4)


def test_segmentation_persistence_filters_noise():
    ema = [0.0, 1.0, 0.995, 1.001, 0.5, 2.0]
    small = segment_phases(ema, persistence=0.01)
    assert all(ema[hi] - ema[lo] >= 0.01 for lo, hi in small.micro_cycles)
    assert (2, 3) not in small.micro_cycles
    assert (2, 3) in segment_phases(ema, persistence=0.001).micro_cycles


def test_monotone_series_has_no_cycles():
    seg = segment_phases(np.linspace(0, 1, 20))
    assert seg.micro_cycles == []
    assert seg.peak_index == 19
    assert seg.macro_exploitation == ()


def test_peak_index_first_argmax():
    assert peak_index([1.0, 3.0, 3.0, 2.0]) == 1
    with pytest.raises(ValueError):
        peak_index([])


def test_mra_examples():
    assert mra(100, 100) == 1.0
    assert mra(200, 100) == 0.0
    assert mra(130, 100) == pytest.approx(0.4)


def test_mra_threshold_is_strict():
    # relative error exactly 0.05 misses the tightest band
    assert mra(105, 100) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        mra(1, 0)


def test_summary():
    tr = make_trace([0.1, 0.5, 0.3, 0.4])
    s = summarize(tr)
    assert s.peak_index == 1 and s.peak_value == 0.5
    assert s.final_entropy == 0.4
    assert s.total_tokens == 4 and s.optimizer_steps == 2
    assert s.alpha_plus_before_peak == 1 and s.alpha_minus_before_peak == 0
    assert s.mean_loss == pytest.approx(-(0.51 + 0.41) / 2)


def test_compare():
    a = make_trace([0.1, 0.5, 0.3])
    b = make_trace([0.1, 0.2, 0.3, 0.6, 0.4])
    d = compare(a, b)
    assert d["delta_peak"] == 2 and d["delta_tokens"] == 2
    assert d["delta_final_entropy"] == pytest.approx(0.1)


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_trace_round_trip(tmp_path, fmt):
    tr = make_trace([0.1, 1 / 3, 0.3, 2 / 7])
    path = tmp_path / f"t.{fmt}"
    export(tr, path, fmt)
    back = read_trace(path)
    assert back.same_records(tr)
    assert back.header == tr.header


def test_csv_layout():
    text = dumps(make_trace([0.1, 0.2]), "csv")
    lines = text.splitlines()
    assert lines[0].startswith("# {")
    assert lines[1] == ",".join(CSV_COLUMNS)
    assert len(lines) == 4


def test_jsonl_kinds():
    import json

    objs = [json.loads(line) for line in dumps(make_trace([0.1, 0.2]), "jsonl").splitlines()]
    assert [o["kind"] for o in objs] == ["header", "step", "step"]


def test_unknown_format():
    with pytest.raises(ValueError):
        dumps(make_trace([0.1]), "xml")
    with pytest.raises(ValueError):
        loads("", "xml")


def test_export_summary_csv():
    text = dumps(summarize(make_trace([0.1, 0.2])), "csv")
    assert "final_entropy" in text.splitlines()[1]


def test_export_unwritable(tmp_path):
    with pytest.raises(OSError):
        export(make_trace([0.1]), tmp_path / "missing" / "t.jsonl")
