from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from fmexpert import checkpoint
from fmexpert.cli import main
from fmexpert.config import from_dict, load, to_dict
from fmexpert.foundation import ConfigError

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.cfg"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["run", "--config", str(SMOKE), "--out", str(out), "--harness-mode"]) == 0
    return out


def _write_cfg(tmp_path, obj) -> Path:
    p = tmp_path / "bad.cfg"
    p.write_text(json.dumps(obj))
    return p


def test_unknown_key_exits_with_key_name(tmp_path):
    base = json.loads(SMOKE.read_text())
    for obj, key in (({**base, "bogus": 1}, "bogus"),
                     ({**base, "stream": {**base["stream"], "n_userz": 3}}, "stream.n_userz")):
        p = subprocess.run([sys.executable, "-m", "fmexpert.cli", "run", "--config", str(_write_cfg(tmp_path, obj)),
                            "--out", str(tmp_path / "o")], capture_output=True, text=True, timeout=120)
        assert p.returncode == 2
        assert f"unknown config key '{key}'" in p.stderr
        assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("patch,needle", [
    ({"sync": {"fraction": 0.0}}, "sync.fraction"),
    ({"sync": {"period": -1}}, "sync.period"),
    ({"downsample": {"0": 1.5}}, "downsample.0"),
    ({"downsample": {"9": 0.5}}, "downsample.9"),
    ({"experiments": ["transfer", "nope"]}, "experiments"),
    ({"generalization": {"fm_aux_task": "surface_D_task_1"}}, "cannot also be withheld"),
    ({"join_latency": "soon"}, "join_latency"),
    ({"stream": {"seed": 3}}, "stream.seed"),
    ({"transfer": {"seeds": []}}, "transfer.seeds"),
])
def test_config_validation(patch, needle):
    base = json.loads(SMOKE.read_text())
    for k, v in patch.items():
        base[k] = {**base[k], **v} if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        from_dict(base)


def test_config_roundtrip():
    cfg = load(SMOKE)
    assert from_dict(json.loads(json.dumps(to_dict(cfg)))) == cfg


def test_run_layout_and_reports(smoke_run):
    for d in ("checkpoints", "logs", "reports"):
        assert (smoke_run / d).is_dir()
    names = {p.stem for p in (smoke_run / "reports").glob("*.jsonl")}
    assert {"sync", "join", "fm", "transfer", "ablation", "generalization", "compute", "summary"} <= names


def test_inspect_checkpoints_full_vs_pruned(smoke_run, capsys):
    assert main(["inspect", str(smoke_run / "checkpoints" / "fm-large.ckpt")]) == 0
    full = capsys.readouterr().out
    assert "block set: full" in full and "head." in full
    assert main(["inspect", str(smoke_run / "checkpoints" / "fm-large.pruned.ckpt")]) == 0
    pruned = capsys.readouterr().out
    assert "block set: pruned (inference subgraph)" in pruned
    assert "head." not in pruned and "align." not in pruned
    expert = next((smoke_run / "checkpoints").glob("expert-transfer-fm-large.*.ckpt"))
    assert main(["inspect", str(expert)]) == 0
    assert "fm_version_selected: fm-large" in capsys.readouterr().out


def test_inspect_embedding_log_counts(smoke_run, capsys):
    path = smoke_run / "logs" / "embeddings.jsonl"
    counts: dict[str, int] = {}
    for line in path.read_text().splitlines():
        v = json.loads(line)["ctx"]["version"]
        counts[v] = counts.get(v, 0) + 1
    assert main(["inspect", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].endswith(f"{sum(counts.values())} records")
    assert out[1:] == [f"  version {v}: {c}" for v, c in sorted(counts.items())]
    assert len(counts) >= 2


def test_inspect_truncated_files_error_cleanly(smoke_run, tmp_path):
    ck = (smoke_run / "checkpoints" / "fm-small.pruned.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(ck[: len(ck) // 2])
    log = (smoke_run / "logs" / "embeddings.jsonl").read_bytes()
    (tmp_path / "cut.jsonl").write_bytes(log[:2000] + log[2000:2050].split(b"\n")[0])
    (tmp_path / "junk.bin").write_bytes(b"\x00\x01junk")
    for name, needle in (("cut.ckpt", "truncated"), ("cut.jsonl", "truncated file"), ("junk.bin", "unrecognized")):
        p = subprocess.run([sys.executable, "-m", "fmexpert.cli", "inspect", str(tmp_path / name)],
                           capture_output=True, text=True, timeout=60)
        assert p.returncode == 1, (name, p.stderr)
        assert needle in p.stderr and "Traceback" not in p.stderr
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "cut.ckpt")


def test_eval_subcommand_writes_one_report(tmp_path, capsys):
    out = tmp_path / "transfer.jsonl"
    assert main(["eval", "transfer", "--config", str(SMOKE), "--out", str(out), "--harness-mode"]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows and all("tr" in r and "ne_expert_fm_large" in r for r in rows)
    assert capsys.readouterr().out.splitlines() == out.read_text().splitlines()
