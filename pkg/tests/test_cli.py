"""CLI dispatch, exit codes, overrides, exports and config-echo closure."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from fingeropt.campaign import load_manifest, pareto_front
from fingeropt.cli import main
from fingeropt.export import read_exported_csv

TINY_CFG = """
# tiny test configuration
[domain]
height_mm = 100
width_top_mm = 60
width_bottom_mm = 24
element_size_mm = 5

[optimizer]
formulation = passive
volume_fraction = 0.35
seed = 3
max_iters = 6

[campaign]
volume_fractions = 0.25, 0.45
seeds_per_point = 2
"""


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("explode")
    assert exc.value.code == 2


def test_unreadable_config_exits_3(tmp_path, capsys):
    code = run_cli("optimize", "--config", tmp_path / "missing.cfg",
                   "--output-dir", tmp_path / "out")
    assert code == 3
    assert "fingeropt: error: config:" in capsys.readouterr().err


def test_unparsable_config_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("not an ini file at all [[[")
    code = run_cli("optimize", "--config", bad, "--output-dir", tmp_path / "out")
    assert code == 3


def test_schema_violation_exits_4(cfg_file, tmp_path, capsys):
    code = run_cli("optimize", "--config", cfg_file, "--output-dir", tmp_path / "o",
                   "--override", "optimizer.mystery_knob=3")
    assert code == 4
    err = capsys.readouterr().err
    assert err.startswith("fingeropt: error: schema:")
    assert err.count("\n") == 1  # one-line machine-parsable error


def test_bad_value_exits_4(cfg_file, tmp_path):
    code = run_cli("optimize", "--config", cfg_file, "--output-dir", tmp_path / "o",
                   "--override", "optimizer.volume_fraction=2.0")
    assert code == 4


def test_optimize_creates_run_dir(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = run_cli("optimize", "--config", cfg_file, "--output-dir", out,
                   "--log-level", "WARNING")
    assert code == 0
    assert (out / "runs" / "vf0.350_s0003" / "result").is_file()


def test_pareto_empty_dir_exits_0(tmp_path, capsys):
    (tmp_path / "runs").mkdir()
    code = run_cli("pareto", tmp_path)
    assert code == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err.lower()
    assert "empty front" in captured.out


def test_sweep_override_count_arithmetic(cfg_file, tmp_path, capsys):
    out = tmp_path / "camp"
    code = run_cli("sweep", "--config", cfg_file, "--output-dir", out,
                   "--override", "campaign.seeds_per_point=3",
                   "--override", "optimizer.max_iters=2",
                   "--log-level", "WARNING")
    assert code == 0
    manifest = load_manifest(out)
    assert len(manifest["runs"]) == 2 * 3  # 2 sweep points x 3 seeds
    assert manifest["campaign"]["seeds_per_point"] == 3


def test_config_echo_closure(cfg_file, tmp_path):
    out1 = tmp_path / "first"
    assert run_cli("optimize", "--config", cfg_file, "--output-dir", out1,
                   "--log-level", "WARNING") == 0
    echo = out1 / "runs" / "vf0.350_s0003" / "config"

    out2 = tmp_path / "second"
    assert run_cli("optimize", "--config", echo, "--output-dir", out2,
                   "--log-level", "WARNING") == 0
    for name in ("config", "history.csv", "final_density.pgm", "result"):
        a = (out1 / "runs" / "vf0.350_s0003" / name).read_bytes()
        b = (out2 / "runs" / "vf0.350_s0003" / name).read_bytes()
        assert a == b, name


def test_export_csv_roundtrip_front(cfg_file, tmp_path):
    out = tmp_path / "camp"
    assert run_cli("sweep", "--config", cfg_file, "--output-dir", out,
                   "--override", "optimizer.max_iters=3",
                   "--log-level", "WARNING") == 0
    csv_path = tmp_path / "runs.csv"
    assert run_cli("export", out, "--format", "csv", "--out", csv_path) == 0

    rows = read_exported_csv(csv_path)
    manifest = load_manifest(out)
    assert len(rows) == len(manifest["runs"])
    reimported = {p.run_id for p in pareto_front(
        [(r["run_id"], r["mean_output_disp"], r["strain_energy"]) for r in rows])
        if not p.dominated}
    from_manifest = {p.run_id for p in pareto_front(
        [r for r in manifest["runs"] if r["status"] == "completed"]) if not p.dominated}
    assert reimported == from_manifest
    exported_front = {r["run_id"] for r in rows if r["on_front"] == "true"}
    assert exported_front == from_manifest


def test_export_svg_structure(cfg_file, tmp_path):
    out = tmp_path / "camp"
    assert run_cli("sweep", "--config", cfg_file, "--output-dir", out,
                   "--override", "optimizer.max_iters=3",
                   "--log-level", "WARNING") == 0
    svg_path = tmp_path / "front.svg"
    assert run_cli("export", out, "--format", "front_svg", "--out", svg_path) == 0
    svg = svg_path.read_text()
    manifest = load_manifest(out)
    n_runs = len(manifest["runs"])
    front = {p.run_id for p in pareto_front(manifest["runs"]) if not p.dominated}
    # run markers (r=4), front rings (r=7), legend dots (r=5)
    assert svg.count('r="4"') == n_runs
    assert svg.count('r="7"') == len(front)
    assert "mean output displacement (mm)" in svg
    assert "strain energy (N&#183;mm)" in svg
    polyline = [ln for ln in svg.splitlines() if "<polyline" in ln]
    assert len(polyline) == 1
    points_attr = polyline[0].split('points="')[1].split('"')[0]
    assert len(points_attr.split()) == len(front)  # one vertex per front member


def test_export_skips_corrupt_record(cfg_file, tmp_path, caplog):
    out = tmp_path / "camp"
    assert run_cli("sweep", "--config", cfg_file, "--output-dir", out,
                   "--override", "optimizer.max_iters=2",
                   "--log-level", "WARNING") == 0
    victim = next((out / "runs").iterdir())
    (victim / "result").write_text("{ sabotaged json")
    csv_path = tmp_path / "runs.csv"
    assert run_cli("export", out, "--format", "csv", "--out", csv_path) == 0
    rows = read_exported_csv(csv_path)
    assert len(rows) == 3  # one of four skipped
    assert any("corrupt" in rec.message for rec in caplog.records)


def test_export_pgm_bundle(cfg_file, tmp_path):
    out = tmp_path / "camp"
    assert run_cli("sweep", "--config", cfg_file, "--output-dir", out,
                   "--override", "optimizer.max_iters=3",
                   "--log-level", "WARNING") == 0
    bundle = tmp_path / "pgms"
    assert run_cli("export", out, "--format", "pgm_bundle", "--out", bundle) == 0
    manifest = load_manifest(out)
    assert len(list(bundle.glob("*.pgm"))) == len(manifest["runs"])


def test_verify_command(cfg_file, tmp_path, capsys):
    out = tmp_path / "camp"
    assert run_cli("sweep", "--config", cfg_file, "--output-dir", out,
                   "--override", "optimizer.max_iters=8",
                   "--override", "campaign.seeds_per_point=1",
                   "--log-level", "WARNING") == 0
    code = run_cli("verify", out, "--log-level", "WARNING")
    assert code == 0
    table = capsys.readouterr().out
    assert "k_tip" in table
    manifest = load_manifest(out)
    for rec in manifest["runs"]:
        report = out / "runs" / rec["run_id"] / "report"
        assert report.is_file()
        payload = json.loads(report.read_text())
        assert "tip_stiffness_N_per_mm" in payload


def test_paper_config_override_run_count(tmp_path):
    # shipped paper-scale sweep, shrunk via overrides: 2 seeds x 7 V_f = 14 runs
    paper_cfg = Path(__file__).resolve().parent.parent / "configs" / "paper_passive.cfg"
    out = tmp_path / "paper"
    code = run_cli("sweep", "--config", paper_cfg, "--output-dir", out,
                   "--override", "campaign.seeds_per_point=2",
                   "--override", "domain.width_top_mm=60",
                   "--override", "domain.width_bottom_mm=24",
                   "--override", "domain.element_size_mm=5",
                   "--override", "optimizer.max_iters=1",
                   "--log-level", "WARNING")
    assert code == 0
    manifest = load_manifest(out)
    assert len(manifest["runs"]) == 2 * 7
    assert all(r["status"] == "completed" for r in manifest["runs"])


def test_help_documents_schema_with_units():
    result = subprocess.run(
        [sys.executable, "-m", "fingeropt", "--help"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    for key in ("element_size_mm [mm]", "volume_fraction [-]", "output_weight [-]",
                "input_displacements_mm [mm]", "poisson_ratio [-]"):
        assert key in result.stdout, key


def test_parallelism_env_default(cfg_file, tmp_path, monkeypatch):
    from fingeropt.config import load_config, resolve_parallelism
    values = load_config(str(cfg_file))
    monkeypatch.setenv("FINGEROPT_PARALLELISM", "3")
    assert resolve_parallelism(values, None, overridden=False) == 3
    # config file beats env
    values.set_raw("campaign", "parallelism", "2")
    assert resolve_parallelism(values, None, overridden=False) == 2
    # override beats everything
    values.set_raw("campaign", "parallelism", "5")
    assert resolve_parallelism(values, None, overridden=True) == 5
