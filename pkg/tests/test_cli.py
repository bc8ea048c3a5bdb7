"""Tests for the `transpro` command-line entry point."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from cli.main import build_parser, main
from core.checkpoints import save_checkpoint
from core.config import load_config
from core.networks import build_generator
from core.volumes import load_volume

from .conftest import tiny_config_dict


def _write_toml(path: Path, data: dict) -> Path:
    """Minimal TOML writer for the nested tables the tiny config uses."""
    lines: list[str] = []

    def emit(prefix: str, table: dict) -> None:
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        nested = {k: v for k, v in table.items() if isinstance(v, dict)}
        if prefix:
            lines.append(f"[{prefix}]")
        for key, value in scalars.items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
        for key, value in nested.items():
            emit(f"{prefix}.{key}" if prefix else key, value)

    emit("", data)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


@pytest.fixture
def tiny_toml(tmp_path) -> Path:
    return _write_toml(tmp_path / "tiny.toml", tiny_config_dict(tmp_path))


def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in root.rglob("*") if p.is_file()}


def _last_record(err: str) -> dict:
    return json.loads([line for line in err.splitlines() if line.startswith("{")][-1])


def test_parser_knows_every_command() -> None:
    parser = build_parser()
    for command in ("phantom", "pretrain-vpg", "pretrain-hcg", "train", "evaluate", "ablate", "sweep-gamma", "sweep-weights"):
        assert parser.parse_args([command]).command == command
    assert parser.parse_args(["translate", "--input", "a.raw", "--output", "b.raw"]).command == "translate"
    assert parser.parse_args(["report", "r1", "r2"]).runs == [Path("r1"), Path("r2")]


def test_phantom_twice_gives_identical_datasets(tiny_toml, tmp_path) -> None:
    assert main(["phantom", "--config", str(tiny_toml), "--out", str(tmp_path / "d1")]) == 0
    assert main(["phantom", "--config", str(tiny_toml), "--out", str(tmp_path / "d2")]) == 0
    first, second = _tree(tmp_path / "d1"), _tree(tmp_path / "d2")
    assert "manifest.json" in first
    assert first == second
    assert not any(name.startswith(("logs/", "manifests/")) for name in first)
    run_dir = tmp_path / "runs" / "tiny"
    assert (run_dir / "logs" / "phantom.log").exists()
    assert (run_dir / "manifests" / "phantom.json").exists()


def test_evaluate_identity_predictions(tiny_toml, tmp_path, capsys) -> None:
    data_dir = tmp_path / "data"
    assert main(["phantom", "--config", str(tiny_toml), "--out", str(data_dir)]) == 0
    capsys.readouterr()
    code = main(
        [
            "evaluate",
            "--config",
            str(tiny_toml),
            "--pred-dir",
            str(data_dir / "test"),
            "--report-dir",
            str(tmp_path / "report"),
        ]
    )
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["mae"] == 0.0
    assert printed["vde"] == 0.0
    assert printed["vdc"] == pytest.approx(1.0)
    assert (tmp_path / "report" / "metrics.json").exists()
    assert (tmp_path / "runs" / "tiny" / "manifests" / "evaluate.json").exists()


def test_sweep_gamma_writes_ten_points(tiny_toml, tmp_path) -> None:
    data_dir = tmp_path / "data"
    assert main(["phantom", "--config", str(tiny_toml), "--out", str(data_dir)]) == 0
    out = tmp_path / "sweep"
    assert main(["sweep-gamma", "--config", str(tiny_toml), "--pred-dir", str(data_dir / "test"), "--report-dir", str(out)]) == 0
    sweep = json.loads((out / "gamma_sweep.json").read_text())
    assert sweep["gamma"] == [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
    assert (out / "gamma_sweep.png").exists()


def test_failure_writes_error_record(tiny_toml, tmp_path, capsys) -> None:
    out = tmp_path / "fail_out"
    code = main(["evaluate", "--config", str(tiny_toml), "--out", str(out), "--dataset", str(tmp_path / "absent")])
    assert code == 1
    err_line = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")][-1]
    record = json.loads(err_line)
    assert record["command"] == "evaluate"
    assert record["error"] == "FileNotFoundError"
    assert record["status"] == 1
    stored = [json.loads(line) for line in (out / "tiny" / "errors.jsonl").read_text().splitlines()]
    assert stored[-1] == record


def test_unknown_config_key_fails_cleanly(tmp_path, capsys) -> None:
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nseed = 0\nflavour = \"x\"\n")
    code = main(["train", "--config", str(bad), "--out", str(tmp_path / "out")])
    assert code == 1
    record = json.loads([line for line in capsys.readouterr().err.splitlines() if line.startswith("{")][-1])
    assert record["error"] == "ConfigError"
    assert "flavour" in record["message"]
    assert (tmp_path / "out" / "errors.jsonl").exists()


def test_usage_errors_exit_2_with_a_record(tmp_path, capsys) -> None:
    out = tmp_path / "usage_out"
    assert main(["evaluate", "--no-such-flag", "--out", str(out)]) == 2
    record = _last_record(capsys.readouterr().err)
    assert (record["command"], record["error"], record["status"]) == ("evaluate", "UsageError", 2)
    assert "--no-such-flag" in record["message"]
    assert json.loads((out / "errors.jsonl").read_text().splitlines()[-1]) == record

    assert main(["no-such-command"]) == 2
    record = _last_record(capsys.readouterr().err)
    assert record["status"] == 2
    assert (tmp_path / "default_runs" / "errors.jsonl").exists()


def test_unwritable_output_fails_with_a_record(tiny_toml, tmp_path, capsys) -> None:
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("")
    assert main(["train", "--config", str(tiny_toml), "--out", str(blocker / "runs")]) == 1
    record = _last_record(capsys.readouterr().err)
    assert record["command"] == "train"
    assert record["error"] in ("NotADirectoryError", "FileExistsError")
    assert record["status"] == 1



def test_translate_command(tiny_toml, tmp_path) -> None:
    config = load_config(tiny_toml)
    ckpt = tmp_path / "g3d"
    save_checkpoint(build_generator(config.models.g3d), ckpt, role="g3d", spec=config.models.g3d, epoch=1)
    data_dir = tmp_path / "data"
    assert main(["phantom", "--config", str(tiny_toml), "--out", str(data_dir)]) == 0

    source = data_dir / "test" / "sample_0000" / "oct.raw"
    target = tmp_path / "translated" / "octa.raw"
    assert main(["translate", "--config", str(tiny_toml), "--ckpt", str(ckpt), "--input", str(source), "--output", str(target)]) == 0
    assert load_volume(target).shape == load_volume(source).shape
