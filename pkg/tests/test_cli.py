import json
from pathlib import Path

import pytest

from padiff import cli
from padiff.manifest import sha256_file

SMALL = {
    "green": ["--kernel", "srw3"],
    "bm": ["--kernel", "srw3", "--m", "3", "--boxes", "1,2"],
    "chi": ["--kernel", "srw1", "--m", "2", "--b", "0:1:0.5", "--L", "6"],
    "support-count": ["--m", "3", "--L", "1", "--dim", "1"],
    "mc-moment": ["--kernel", "srw3", "--b", "0,0.3", "--t", "2,4", "--replicas", "2000"],
    "mc-quenched": ["--kernel", "srw3", "--b", "0.5", "--t", "2,4", "--replicas", "2000"],
    "simulate": ["--kernel", "srw1", "--torus", "6", "--t", "0.5", "--dt", "0.05", "--replicas", "50"],
    "duality-check": ["--kernel", "srw1", "--torus", "5", "--t", "0.2", "--dt", "0.05", "--replicas", "50"],
    "palm": ["--kernel", "srw1", "--torus", "5", "--T", "0.5", "--dt", "0.05", "--replicas", "50", "--walk-replicas", "2000"],
    "phase-diagram": ["--dims", "1,3", "--ms", "2", "--b", "0:2:1", "--max-states", "2000"],
}


def files_under(root: Path) -> set[Path]:
    return {p for p in root.rglob("*") if p.is_file()}


def csv_digests(d: Path) -> dict[str, str]:
    return {p.name: sha256_file(p) for p in sorted(d.glob("*.csv"))}


@pytest.mark.parametrize("cmd", sorted(SMALL))
def test_subcommand_runs_and_replays(cmd, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out1 = tmp_path / "run1"
    assert cli.main([cmd, *SMALL[cmd], "--seed", "3", "--out", str(out1)]) == 0
    # nothing written outside the declared directory
    assert all(out1 in p.parents for p in files_under(tmp_path))
    man = json.loads((out1 / "manifest.json").read_text())
    assert man["subcommand"] == cmd
    for name, digest in man["outputs"].items():
        assert sha256_file(out1 / name) == digest
    out2 = tmp_path / "run2"
    assert cli.main([cmd, "--config", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
    assert csv_digests(out1) == csv_digests(out2)
    assert csv_digests(out1)


def test_green_values(tmp_path, capsys):
    assert cli.main(["green", "--kernel", "srw3", "--out", str(tmp_path)]) == 0
    assert "1.5163" in capsys.readouterr().out
    assert cli.main(["green", "--kernel", "srw1", "--out", str(tmp_path)]) == 0
    assert "DIVERGENT" in (tmp_path / "green.csv").read_text()


def test_phase_diagram_labels(tmp_path):
    assert cli.main(["phase-diagram", *SMALL["phase-diagram"], "--out", str(tmp_path)]) == 0
    idx = json.loads((tmp_path / "phase_diagram.json").read_text())
    panels = {p["dim"]: p for p in idx["panels"]}
    assert panels[1]["regime"] == "extinction for all b"
    b2 = panels[3]["thresholds"]["2"]
    assert b2["value"] == pytest.approx(1.3189, abs=2e-4)
    assert b2["error"] < 2e-4


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"m": 3, "L": 2, "dim": 1, "seed": 9}))
    args = cli.build_parser().parse_args(["support-count", "--config", str(cfg), "--L", "1"])
    params, seed = cli.effective_params("support-count", args)
    assert params == {"m": 3, "L": 1, "dim": 1} and seed == 9
    args = cli.build_parser().parse_args(["support-count"])
    assert cli.effective_params("support-count", args) == ({"m": 3, "L": 1, "dim": 1}, 0)


def test_seed_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["mc-moment", *SMALL["mc-moment"], "--seed", "1", "--out", str(a)])
    cli.main(["mc-moment", *SMALL["mc-moment"], "--seed", "2", "--out", str(b)])
    assert csv_digests(a) != csv_digests(b)


@pytest.mark.parametrize(
    "argv",
    [
        ["green", "--kernel", "nonsense"],
        ["bm", "--kernel", "drift(0.7)"],
        ["support-count", "--m", "4", "--L", "30", "--dim", "3"],
        ["simulate", "--torus", "2", "--kernel", "srw1"],
        ["green", "--m", "x"],
        ["nosuchcommand"],
        ["chi", "--config", "/nonexistent.json"],
        ["verify", "--suite", "huge"],
    ],
)
def test_validation_errors_exit_1(argv, tmp_path):
    full = argv if argv[0] == "nosuchcommand" else [*argv, "--out", str(tmp_path)]
    try:
        code = cli.main(full)
    except SystemExit as exc:  # argparse exits directly
        code = exc.code
    assert code == 1


def test_manifest_for_other_command_is_rejected(tmp_path):
    out = tmp_path / "g"
    cli.main(["green", "--out", str(out)])
    assert cli.main(["bm", "--config", str(out / "manifest.json"), "--out", str(tmp_path / "b")]) == 1


def test_internal_failure_exit_2(tmp_path, monkeypatch):
    def boom(*a):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.HANDLERS, "support-count", boom)
    assert cli.main(["support-count", "--out", str(tmp_path)]) == 2


def test_verify_only_and_negative_control(tmp_path):
    assert cli.main(["verify", "--only", "C1,NC", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify_report.json").read_text())
    assert [c["status"] for c in rep["checks"]] == ["PASS", "PASS"]


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "padiff", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "padiff" in r.stdout
