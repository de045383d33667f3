import csv
import json
import subprocess
import sys

import pytest
from PIL import Image

from refseg.cli import build_parser, main


def run_args(ds, out, cache):
    return ["--manifest", str(ds.manifest), "--proposals", str(ds.proposals_dir), "--config", str(ds.config),
            "--out", str(out), "--cache-dir", str(cache)]


def call(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_missing_manifest_is_usage_error(capsys, tmp_path):
    with pytest.raises(SystemExit) as ei:
        main(["run", "--proposals", "p", "--out", str(tmp_path)])
    assert ei.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_run_and_rerun(planted, tmp_path, capsys):
    code, out, _ = call(["run", *run_args(planted, tmp_path / "out", tmp_path / "cache")], capsys)
    assert code == 0
    metrics = json.loads(out)
    assert metrics["oIoU"] == 1.0 and metrics["mIoU"] == 1.0 and metrics["n"] == 10
    code2, out2, _ = call(["run", *run_args(planted, tmp_path / "out", tmp_path / "cache")], capsys)
    assert code2 == 0 and out2 == out


def test_eval_recomputes(planted, tmp_path, capsys):
    call(["run", *run_args(planted, tmp_path / "out", tmp_path / "cache")], capsys)
    code, out, _ = call(["eval", "--run", str(tmp_path / "out"), "--manifest", str(planted.manifest)], capsys)
    assert code == 0
    assert json.loads(out) == {"oIoU": 1.0, "mIoU": 1.0, "n": 10}


def test_sweep_single_cell_matches_run(planted, tmp_path, capsys):
    _, run_out, _ = call(["run", *run_args(planted, tmp_path / "run", tmp_path / "cache"), "--alpha", "0.5",
                          "--beta", "1.0"], capsys)
    code, _, _ = call(["sweep", *run_args(planted, tmp_path / "sw", tmp_path / "cache"), "--alphas", "0.5",
                       "--betas", "1.0"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "sw" / "sweep.csv")))
    assert len(rows) == 1
    m = json.loads(run_out)
    assert float(rows[0]["oIoU"]) == m["oIoU"] and float(rows[0]["mIoU"]) == m["mIoU"]


@pytest.mark.parametrize("bad", ["0.5,,", "a,b", "-1", "nan"])
def test_sweep_malformed_list(planted, tmp_path, bad):
    with pytest.raises(SystemExit) as ei:
        main(["sweep", *run_args(planted, tmp_path / "sw", tmp_path / "c"), "--alphas", bad, "--betas", "1"])
    assert ei.value.code == 2


def test_sweep_requires_betas_with_alphas(planted, tmp_path):
    with pytest.raises(SystemExit) as ei:
        main(["sweep", *run_args(planted, tmp_path / "sw", tmp_path / "c"), "--alphas", "0.5"])
    assert ei.value.code == 2


def test_sweep_default_grid(planted, tmp_path, capsys):
    code, out, _ = call(["sweep", *run_args(planted, tmp_path / "sw", tmp_path / "c"), "--default-grid"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "sw" / "sweep.csv")))
    assert len(rows) == 11 * 9
    assert set(json.loads(out)) == {"best_by_oIoU", "best_by_mIoU"}


def test_ablate(planted, tmp_path, capsys):
    code, out, _ = call(["ablate", *run_args(planted, tmp_path / "ab", tmp_path / "c")], capsys)
    assert code == 0
    rows = json.loads(out)
    assert [r["config"] for r in rows] == ["S_van", "S_van + S_sur", "S_van + S_att", "S_van + S_att + S_sur"]
    assert rows[-1]["oIoU"] == 1.0
    assert (tmp_path / "ab" / "ablation.csv").read_text().startswith("use_att,use_sur,oIoU,mIoU\n")


def test_visualize(planted, tmp_path, capsys):
    call(["run", *run_args(planted, tmp_path / "out", tmp_path / "c")], capsys)
    png = tmp_path / "viz.png"
    code, _, _ = call(["visualize", "--run", str(tmp_path / "out"), "--sample", "s001", "--out", str(png)], capsys)
    assert code == 0
    with Image.open(png) as im, Image.open(planted.root / "images" / "img001.png") as src:
        assert im.size == src.size


def test_visualize_unknown_sample(planted, tmp_path, capsys):
    call(["run", *run_args(planted, tmp_path / "out", tmp_path / "c")], capsys)
    code, _, err = call(["visualize", "--run", str(tmp_path / "out"), "--sample", "zzz", "--out",
                         str(tmp_path / "x.png")], capsys)
    assert code == 1
    assert "zzz" in err


def test_runtime_error_exits_one(tmp_path, capsys):
    code, _, err = call(["run", "--manifest", str(tmp_path / "none.jsonl"), "--proposals", str(tmp_path),
                         "--out", str(tmp_path / "o"), "--cache-dir", str(tmp_path / "c")], capsys)
    assert code == 1
    assert "NotFound" in err


def test_prompts_show(capsys):
    code, out, _ = call(["prompts", "show"], capsys)
    assert code == 0
    assert "surrounded by (entities)" in out and "(attribute)" in out
    assert call(["prompts-show"], capsys)[1] == out


def test_cache_commands(planted, tmp_path, capsys):
    call(["run", *run_args(planted, tmp_path / "out", tmp_path / "c")], capsys)
    code, out, _ = call(["cache-stats", "--cache-dir", str(tmp_path / "c")], capsys)
    stats = json.loads(out)
    assert code == 0 and stats["mllm"]["entries"] == 20
    code, out, _ = call(["cache-gc", "--cache-dir", str(tmp_path / "c"), "--kind", "mllm", "--all"], capsys)
    assert code == 0 and json.loads(out)["removed"] == 20
    assert json.loads(call(["cache-stats", "--cache-dir", str(tmp_path / "c")], capsys)[1])["mllm"]["entries"] == 0


def test_cache_dir_from_environment(planted, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("REFSEG_CACHE_DIR", str(tmp_path / "envcache"))
    args = ["run", "--manifest", str(planted.manifest), "--proposals", str(planted.proposals_dir),
            "--config", str(planted.config), "--out", str(tmp_path / "out")]
    assert call(args, capsys)[0] == 0
    assert any((tmp_path / "envcache" / "mllm").iterdir())


def test_dataset_tag_sets_alpha(planted, tmp_path, capsys):
    call(["run", *run_args(planted, tmp_path / "out", tmp_path / "c"), "--dataset-tag", "refcocog"], capsys)
    cfg = json.loads((tmp_path / "out" / "run_config.json").read_text())["config"]
    assert cfg["weights"] == {"alpha": 0.3, "beta": 1.0}
    assert cfg["dataset_tag"] == "refcocog"


def _subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return sorted(action.choices)


@pytest.mark.parametrize("cmd", [[]] + [[c] for c in _subcommands()] + [["prompts", "show"]])
def test_help(cmd):
    with pytest.raises(SystemExit) as ei:
        main([*cmd, "--help"])
    assert ei.value.code == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "refseg", "prompts", "show"], capture_output=True, text=True)
    assert r.returncode == 0 and "(attribute)" in r.stdout
