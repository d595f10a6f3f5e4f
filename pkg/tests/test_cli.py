import json

import pytest

from entropy_steer.cli import main
from entropy_steer.trace import read_trace

PROMPT = ["--prompt-tokens", "3,1,4,1,5,9,2,6,5,3,5,8", "--video-span", "2:10"]


@pytest.fixture
def weights_file(tmp_path):
    path = tmp_path / "w.bin"
    assert main(["init", "--out", str(path)]) == 0
    return path


def gen(weights_file, out, *extra):
    return main(["generate", "--weights", str(weights_file), *PROMPT, "--trace-out", str(out), "--eos", "-1", "--max-len", "30", *extra])


def test_generate_writes_trace_and_manifest(tmp_path, weights_file, capsys):
    assert gen(weights_file, tmp_path / "t.jsonl") == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(out["tokens"]) == 30
    trace = read_trace(tmp_path / "t.jsonl")
    assert trace.tokens == out["tokens"]
    manifest = json.loads((tmp_path / "t.jsonl.manifest.json").read_text())
    assert manifest["weights_hash"] == trace.header["model_hash"]
    assert manifest["seeds"]["sampler_seed"] == 0


def test_replay_is_bit_identical(tmp_path, weights_file, monkeypatch):
    assert gen(weights_file, tmp_path / "a.jsonl", "--lr", "5e-4", "--temperature", "1.0", "--top-p", "0.9") == 0
    monkeypatch.chdir(tmp_path.parent)
    assert main(["replay", "--manifest", str(tmp_path / "a.jsonl.manifest.json"), "--trace-out", str(tmp_path / "b.jsonl")]) == 0
    assert read_trace(tmp_path / "a.jsonl").same_records(read_trace(tmp_path / "b.jsonl"))


def test_replay_detects_changed_weights(tmp_path, weights_file):
    assert gen(weights_file, tmp_path / "a.jsonl") == 0
    assert main(["init", "--out", str(weights_file), "--seed", "9"]) == 0
    assert main(["replay", "--manifest", str(tmp_path / "a.jsonl.manifest.json"), "--trace-out", str(tmp_path / "b.jsonl")]) == 3


def test_csv_trace_and_analyze(tmp_path, weights_file, capsys):
    assert gen(weights_file, tmp_path / "t.csv", "--trace-format", "csv") == 0
    capsys.readouterr()
    assert main(["analyze", "--trace", str(tmp_path / "t.csv"), "--output-dir", str(tmp_path / "o")]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [x["kind"] for x in lines] == ["summary", "segmentation"]
    assert lines[0]["total_tokens"] == 30
    assert (tmp_path / "o" / "analysis.jsonl").exists()


def test_compare(tmp_path, weights_file, capsys):
    gen(weights_file, tmp_path / "a.jsonl", "--mode", "baseline")
    gen(weights_file, tmp_path / "b.jsonl")
    capsys.readouterr()
    assert main(["compare", "--trace-a", str(tmp_path / "a.jsonl"), "--trace-b", str(tmp_path / "b.jsonl")]) == 0
    assert "delta_peak" in json.loads(capsys.readouterr().out)


def test_controller_dump(tmp_path, weights_file):
    from entropy_steer.controller import ValueCacheController

    assert gen(weights_file, tmp_path / "t.jsonl", "--controller-dump", str(tmp_path / "c.bin")) == 0
    c = ValueCacheController.load(tmp_path / "c.bin")
    assert c.shape == (2, 8, 4)
    assert c.opt_step_count == read_trace(tmp_path / "t.jsonl").optimizer_steps


def test_baseline_lr_warns(tmp_path, weights_file, caplog):
    assert gen(weights_file, tmp_path / "t.jsonl", "--mode", "baseline", "--lr", "1e-3") == 0
    assert any("ignored" in r.message for r in caplog.records)


@pytest.mark.parametrize(
    "argv, code",
    [
        (["generate", "--weights", "w", "--prompt-tokens", "1,2,3", "--video-span", "6:2"], 2),
        (["frobnicate"], 2),
        (["generate", "--weights", "/nonexistent/w.bin", *PROMPT], 3),
    ],
)
def test_exit_codes(argv, code):
    assert main(argv) == code


def test_bad_config_is_usage_error(weights_file):
    assert main(["generate", "--weights", str(weights_file), *PROMPT, "--k", "1"]) == 2


def test_corrupt_weights_is_input_error(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b'{"format": "nope"}\n')
    assert main(["generate", "--weights", str(bad), *PROMPT]) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"]
    assert main(["gradcheck", "--tolerance", "0"]) == 1


def test_props_command(capsys):
    assert main(["props", "--kind", "peak_delay", "--seeds", "10"]) == 0
    assert json.loads(capsys.readouterr().out)["peak_delay"]["passed"]


def test_sweep_thread_invariance(tmp_path, capsys):
    args = ["sweep", "--axis", "lr", "--values", "1e-4,5e-4", "--seeds", "3", "--max-len", "20", "--eos", "-1"]
    assert main(args + ["--threads", "1"]) == 0
    one = capsys.readouterr().out
    assert main(args + ["--threads", "4", "--output-dir", str(tmp_path)]) == 0
    four = capsys.readouterr().out
    assert one == four
    assert (tmp_path / "sweep.csv").read_text() == four
    assert one.splitlines()[0].startswith("axis,value,runs")


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "entropy_steer", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


def test_sweep_manifest_records_spacing(tmp_path):
    args = ["sweep", "--axis", "lr", "--seeds", "1", "--max-len", "5", "--output-dir", str(tmp_path)]
    assert main(args) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "sweep"
    assert manifest["lr_spacing"] == "linear"
    assert len(manifest["sweep_values"]) == 10


def test_analyze_empty_trace(tmp_path, capsys):
    from entropy_steer.trace import Trace, export

    export(Trace(header={"x": 1}), tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text().count("\n") == 1
    assert main(["analyze", "--trace", str(tmp_path / "e.jsonl")]) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_weights_exit_numeric(tmp_path):
    import numpy as np

    from entropy_steer.experiments import toy_instance
    from entropy_steer.model import Weights, save_weights

    weights, _ = toy_instance(0)
    tensors = dict(weights.tensors)
    tensors["lm_head"] = np.full_like(tensors["lm_head"], np.inf)
    save_weights(Weights(weights.config, tensors), tmp_path / "inf.bin")
    assert main(["generate", "--weights", str(tmp_path / "inf.bin"), *PROMPT]) == 4
