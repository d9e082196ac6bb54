import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stfmerge.cli import main
from stfmerge.synthetic import write_transformer_checkpoints
from stfmerge.tensor_store import MemoryStore, TensorRecord, open_checkpoint, write_checkpoint


@pytest.fixture
def ckpts(tmp_path):
    base, tasks = write_transformer_checkpoints(tmp_path / "in", n_tasks=2, n_layers=2, hidden=8, seed=3)
    return tmp_path, base, tasks


def run(argv):
    return main([str(a) for a in argv])


def test_merge_happy_path(ckpts, capsys):
    tmp, base, (a, b) = ckpts
    out = tmp / "merged.safetensors"
    code = run(["merge", "--base", base, "--task", a, "--task", b, "--eta", 0.2, "--gamma", 0.8, "--out", out])
    assert code == 0
    captured = capsys.readouterr()
    assert captured.out == ""
    with open_checkpoint(out) as merged, open_checkpoint(base) as pre:
        assert merged.names() == pre.names()
    report = json.loads((tmp / "merged.safetensors.report.json").read_text())
    assert report["config"]["eta"] == 0.2 and report["config"]["gamma"] == 0.8
    assert report["totals"]["layers_merged"] == 12
    assert [t["id"] for t in report["inputs"]["tasks"]] == ["task0", "task1"]


def test_merge_eta_out_of_range(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    assert run(["merge", "--base", base, "--task", a, "--eta", 1.5, "--out", tmp / "o.st"]) == 1
    assert "eta" in capsys.readouterr().err


def test_merge_missing_tensor(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    with open_checkpoint(a) as store:
        recs = [store.read_raw(n) for n in store.names() if n != "layers.1.mlp.fc2.bias"]
    broken = tmp / "broken.safetensors"
    write_checkpoint(broken, recs)
    assert run(["merge", "--base", base, "--task", a, "--task", broken, "--out", tmp / "o.st"]) == 2
    err = capsys.readouterr().err
    assert "layers.1.mlp.fc2.bias" in err and len(err.strip().splitlines()) == 1


def test_merge_numeric_failure(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    with open_checkpoint(a) as store:
        recs = {n: store.read(n).copy() for n in store.names()}
    recs["layers.0.mlp.fc1.weight"][0, 0] = np.inf
    bad = tmp / "bad.safetensors"
    write_checkpoint(bad, MemoryStore.from_arrays(recs).records())
    assert run(["merge", "--base", base, "--task", bad, "--out", tmp / "o.st"]) == 3
    assert "layers.0.mlp.fc1.weight" in capsys.readouterr().err


def test_merge_bad_flag_exits_1(ckpts):
    tmp, base, (a, _) = ckpts
    with pytest.raises(SystemExit) as exc:
        run(["merge", "--base", base, "--task", a, "--eta", "abc"])
    assert exc.value.code == 1


def test_merge_missing_inputs(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    assert run(["merge", "--task", a, "--out", tmp / "o.st"]) == 1
    assert run(["merge", "--base", tmp / "nope.st", "--task", a, "--out", tmp / "o.st"]) == 2


def test_merge_deterministic(ckpts):
    tmp, base, (a, b) = ckpts
    outs = []
    for i in range(2):
        out = tmp / f"det{i}.safetensors"
        assert run(["merge", "--base", base, "--task", a, "--task", b, "--out", out, "--threads", 2]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_config_file_and_override(ckpts):
    tmp, base, (a, b) = ckpts
    cfg = tmp / "merge.ini"
    cfg.write_text(
        "[merge]\n"
        f"base = {base}\n"
        "out = from_config.safetensors\n"
        "preset = adapter\n"
        "[tasks]\n"
        f"qa = {a}\n"
        f"nli = {b}\n"
        "[roles]\n"
        "*q_proj.weight = ignore\n"
    )
    assert run(["merge", "--config", cfg, "--gamma", 0.9]) == 0
    report = json.loads((tmp / "from_config.safetensors.report.json").read_text())
    assert report["config"]["eta"] == 0.3 and report["config"]["gamma"] == 0.9
    assert [t["id"] for t in report["inputs"]["tasks"]] == ["qa", "nli"]
    assert "layers.0.attn.q_proj.weight" not in {layer["name"] for layer in report["layers"]}


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[merge]\nbogus = 1\n")
    assert run(["merge", "--config", cfg]) == 1
    cfg.write_text("[merge]\neta = lots\n")
    assert run(["merge", "--config", cfg]) == 1
    cfg.write_text("[roles]\nre:( = ignore\n[merge]\nbase = x\n")
    assert run(["inspect", tmp_path / "x", "--config", tmp_path / "missing.ini"]) == 1


def test_threads_env(ckpts, monkeypatch):
    tmp, base, (a, _) = ckpts
    monkeypatch.setenv("STFMERGE_THREADS", "0")
    assert run(["merge", "--base", base, "--task", a, "--out", tmp / "o.st"]) == 1
    assert run(["merge", "--base", base, "--task", a, "--out", tmp / "o.st", "--threads", 2]) == 0


def test_inspect(ckpts, capsys):
    tmp, base, _ = ckpts
    assert run(["inspect", base]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["name", "shape", "dtype", "role"]
    rows = {line.split()[0]: line.split()[1:] for line in out[1:]}
    assert rows["layers.0.mlp.fc1.weight"] == ["32x8", "F32", "linear"]
    assert rows["layers.0.ln_1.weight"] == ["8", "F32", "normalization"]
    assert rows["layers.0.attn.bias"][-1] == "ignore"
    assert rows["embed_tokens.weight"][-1] == "embedding"


def test_inspect_malformed(tmp_path, capsys):
    p = tmp_path / "junk.safetensors"
    p.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{")
    assert run(["inspect", p]) == 2


def test_preserve_report(ckpts):
    tmp, base, (a, b) = ckpts
    j, c = tmp / "p.json", tmp / "p.csv"
    code = run(["preserve-report", "--base", base, "--task", a, "--task", b, "--eta", 1.0,
                "--methods", "stf,average,ta", "--json", j, "--csv", c])
    assert code == 0
    rows = list(csv.DictReader(c.open()))
    assert {r["method"] for r in rows} == {"stf", "average", "ta"}
    doc = json.loads(j.read_text())
    agg = {m: v["mean_abs_preservation"] for m, v in doc["methods"].items()}
    assert agg["stf"] < min(agg["average"], agg["ta"])


def test_preserve_report_unknown_method(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    assert run(["preserve-report", "--base", base, "--task", a, "--methods", "stf,ties",
                "--json", tmp / "x.json", "--csv", tmp / "x.csv"]) == 1
    assert "ties" in capsys.readouterr().err


def test_ablate(ckpts):
    tmp, base, (a, b) = ckpts
    j, c = tmp / "a.json", tmp / "a.csv"
    code = run(["ablate", "--base", base, "--task", a, "--task", b, "--target", "smallest",
                "--fraction", 0.5, "--fraction", 0.8, "--eta", 1.0, "--json", j, "--csv", c])
    assert code == 0
    rows = list(csv.DictReader(c.open()))
    assert [r["fraction"] for r in rows] == ["0.5", "0.8"]
    assert all(r["target"] == "smallest" for r in rows)
    assert run(["ablate", "--base", base, "--task", a, "--fraction", 1.0, "--json", j, "--csv", c]) == 1


def test_lora_mode(tmp_path):
    rng = np.random.default_rng(0)
    base = {"q.weight": rng.standard_normal((6, 5)).astype(np.float32), "q.bias": np.zeros(6, np.float32)}
    write_checkpoint(tmp_path / "base.st", MemoryStore.from_arrays(base).records())
    for i in range(2):
        adapter = {
            "base_model.model.q.lora_A.weight": rng.standard_normal((2, 5)),
            "base_model.model.q.lora_B.weight": rng.standard_normal((6, 2)),
        }
        write_checkpoint(tmp_path / f"ad{i}.st", MemoryStore.from_arrays(adapter).records())
    code = run(["merge", "--base", tmp_path / "base.st", "--task", tmp_path / "ad0.st", "--task", tmp_path / "ad1.st",
                "--lora", "--lora-scale", 0.5, "--preset", "adapter", "--out", tmp_path / "m.st"])
    assert code == 0
    with open_checkpoint(tmp_path / "m.st") as store:
        assert not np.allclose(store.read("q.weight"), base["q.weight"])
        assert (store.read("q.bias") == 0).all()


def test_entry_point_subprocess(ckpts):
    tmp, base, _ = ckpts
    proc = subprocess.run([sys.executable, "-m", "stfmerge.cli", "inspect", str(base)], capture_output=True, text=True)
    assert proc.returncode == 0 and "embed_tokens.weight" in proc.stdout


def test_diagnostics_section_errors(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    cfg = tmp / "diag.ini"
    cfg.write_text(f"[merge]\nbase = {base}\n[tasks]\nt = {a}\n[diagnostics]\nreference_eta = high\n")
    assert run(["preserve-report", "--config", cfg]) == 1
    assert "reference_eta" in capsys.readouterr().err
    cfg.write_text(f"[merge]\nbase = {base}\n[tasks]\nt = {a}\n[diagnostics]\ntarget = middle\nfractions = 0.5\n")
    assert run(["ablate", "--config", cfg]) == 1
    assert "target" in capsys.readouterr().err


def test_unwritable_report_path(ckpts, capsys):
    tmp, base, (a, _) = ckpts
    code = run(["preserve-report", "--base", base, "--task", a, "--json", tmp / "no" / "dir" / "p.json",
                "--csv", tmp / "p.csv"])
    assert code == 2
    assert "p.json" in capsys.readouterr().err
