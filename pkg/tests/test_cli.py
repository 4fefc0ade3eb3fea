import json
import time
from dataclasses import fields
from pathlib import Path

import pytest

from iouesa import checks, cli, geometry, runs
from iouesa.errors import ContractError

TINY = ["--set", "image_size=64", "--set", "channels=8", "--set", "size_min=12", "--set", "size_max=30",
        "--set", "num_queries=4", "--set", "d_model=16", "--set", "heads=2", "--set", "pool_size=3",
        "--set", "log_every=1", "--set", "objects_max=3"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_selftest_passes_within_a_minute(capsys):
    start = time.perf_counter()
    code, out, _ = run(["selftest"], capsys)
    assert code == 0, out
    assert time.perf_counter() - start < 60
    for module, _ in checks.SELFTEST_MODULES:
        assert module in out


def test_selftest_names_a_sign_error_in_giou(monkeypatch, capsys):
    real = geometry.giou
    monkeypatch.setattr(geometry, "giou", lambda a, b: -real(a, b))
    # the grad check is slow and unrelated to the injected fault
    monkeypatch.setattr(checks, "full_model_grad_error", lambda: 0.0)
    code, out, _ = run(["selftest"], capsys)
    assert code == 1
    assert "FAIL geometry.giou" in out
    assert "geometry.iou:" not in out


def test_usage_errors_exit_2(capsys):
    assert run(["gradcheck", "everything"], capsys)[0] == 2
    assert run(["frobnicate"], capsys)[0] == 2
    assert run(["train", "--set", "no_such_key=1"], capsys)[0] == 2
    assert run(["train", "--set", "steps"], capsys)[0] == 2
    assert run(["train", "--attn-mode", "sideways"], capsys)[0] == 2


def test_gradcheck_primitives_passes(capsys):
    code, out, _ = run(["gradcheck", "primitives"], capsys)
    assert code == 0 and "scope primitives" in out


def test_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nsteps = 7\nlr = 0.5\nseed = 3  # trailing\n", encoding="utf-8")
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--set", "lr=0.25", "--seed", "9"])
    cfg = cli.effective_config(args)
    assert (cfg.steps, cfg.lr, cfg.seed) == (7, 0.25, 9)
    assert cfg.d_model == runs.RunConfig().d_model


def test_config_rejects_malformed_lines(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("steps 7\n", encoding="utf-8")
    with pytest.raises(ContractError):
        runs.load_config(path)


def test_train_writes_records_and_is_byte_reproducible(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(["train", *TINY, "--steps", "3", "--scenes", "2", "--out", str(tmp_path / name)],
                           capsys)
        assert code == 0
        assert out.startswith("# iouesa train\n# effective config:")
        outs.append((tmp_path / name / "run.jsonl").read_bytes())
    assert outs[0] == outs[1]
    records = [json.loads(line) for line in outs[0].decode().splitlines()]
    assert records[0]["type"] == "config" and records[-1]["type"] == "eval"
    steps = [r["step"] for r in records if r["type"] == "step"]
    assert steps == [1, 2, 3]
    assert (tmp_path / "a" / "checkpoint.bin").exists() and (tmp_path / "a" / "timing.json").exists()


def test_eval_reloads_the_checkpoint(tmp_path, capsys):
    out_dir = tmp_path / "r"
    code, out, _ = run(["train", *TINY, "--steps", "2", "--scenes", "3", "--out", str(out_dir)], capsys)
    assert code == 0
    trained = [line for line in out.splitlines() if line.startswith("AP@0.5")][0].split()[1]
    code, out, _ = run(["eval", *TINY, "--scenes", "3", "--out", str(out_dir)], capsys)
    assert code == 0
    assert [line for line in out.splitlines() if line.startswith("AP@0.5")][0].split()[1] == trained


def test_eval_missing_checkpoint_is_a_usage_error(tmp_path, capsys):
    assert run(["eval", *TINY, "--checkpoint", str(tmp_path / "none.bin")], capsys)[0] == 2


def test_ablation_table_shape(tmp_path, capsys):
    grid = ["--set", "ablate_modes=full:off,full:on,iou-esa:off,iou-esa:on", "--set", "ablate_seeds=5",
            "--set", "ablate_steps=1", "--set", "ablate_eval_scenes=1"]
    code, out, _ = run(["ablate", *TINY, *grid, "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = [line for line in (tmp_path / "ablation.csv").read_text().splitlines() if not line.startswith("#")]
    assert rows[0].startswith("attn_mode,dcw,seeds,median_ap50")
    assert len(rows) == 5
    assert all(r.split(",")[2] == "5" and len(r.split(",")[4].split()) == 5 for r in rows[1:])
    assert "direction checks" in out


def test_ablation_merge_ignores_execution_order():
    cfg = runs.load_config(None, [("image_size", "64"), ("channels", "8"), ("size_min", "12"), ("size_max", "30"),
                                  ("num_queries", "4"), ("d_model", "16"), ("heads", "2"), ("pool_size", "3"),
                                  ("objects_max", "3"), ("ablate_steps", "1"), ("ablate_eval_scenes", "1")])
    cells = runs.parse_grid("none:off,iou-esa:on", 2)
    forward = runs.run_grid(cfg, cells)
    backward = runs.run_grid(cfg, cells[::-1])
    assert forward == backward


def test_duplicate_ablation_cells_rejected():
    with pytest.raises(ContractError):
        runs.parse_grid("full:off,full:off", 1)


def test_reference_config_file_matches_the_defaults():
    path = Path(__file__).resolve().parent.parent / "configs" / "reference.cfg"
    loaded = runs.load_config(path)
    differing = {f.name for f in fields(runs.RunConfig)
                 if getattr(loaded, f.name) != getattr(runs.RunConfig(), f.name)}
    assert differing == set()
