import json
import math

import numpy as np
import pytest

from clickrecon.cli import EXIT_IO, EXIT_SATURATION, EXIT_VALIDATION, main
from clickrecon.dataio import ShotFile, read_report, read_shots, write_shots
from clickrecon.forward_model import ShotBatch


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def simulate(capsys, out, *extra):
    return run(capsys, "simulate", "--n-bins", 4, "--eta", 0.608, "--out", out, *extra)


@pytest.mark.slow
def test_simulate_spec_example(tmp_path, capsys):
    code, out, _ = simulate(capsys, tmp_path / "a", "--nbar", 0.84, "--shots", 10**6, "--seed", 7)
    assert code == 0
    (path,) = json.loads(out)["files"]
    sf = read_shots(path)
    assert len(sf) == 10**6 and sf.n_bins == 4 and sf.nbar == 0.84


def test_simulate_is_byte_identical(tmp_path, capsys):
    args = ("--nbar", 0.84, "--nbar", 0.3, "--shots", 20000, "--seed", 7)
    simulate(capsys, tmp_path / "a", *args)
    simulate(capsys, tmp_path / "b", *args, "--workers", 2)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 2
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_vacuum(tmp_path, capsys):
    code, out, _ = simulate(capsys, tmp_path, "--nbar", 0, "--shots", 1000)
    assert code == 0
    sf = read_shots(json.loads(out)["files"][0])
    assert not sf.shots.patterns.any()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"shots": 300, "seed": 3, "nbar": [0.5], "n-bins": [8]}))
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--out", tmp_path / "o")
    sf = read_shots(json.loads(out)["files"][0])
    assert code == 0 and len(sf) == 300 and sf.n_bins == 8
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--shots", 50, "--out", tmp_path / "p")
    assert len(read_shots(json.loads(out)["files"][0])) == 50


def test_exit_codes(tmp_path, capsys):
    code, _, err = simulate(capsys, tmp_path, "--nbar", 0.5, "--shots", 0)
    assert code == EXIT_VALIDATION and "shots" in err
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"colour": 1}))
    assert run(capsys, "simulate", "--config", bad_cfg)[0] == EXIT_VALIDATION
    assert run(capsys, "tomography", tmp_path / "missing.csv")[0] == EXIT_IO
    broken = tmp_path / "broken.csv"
    broken.write_text("# version=1,N=4\n0,01102\n")
    code, _, err = run(capsys, "tomography", broken)
    assert code == EXIT_IO and "broken.csv:2" in err

    # the brightest point clicks in every bin on every shot: Gamma diverges
    rng = np.random.default_rng(0)
    saturated = []
    for i, nb in enumerate([0.1, 0.2, 0.3, 50.0]):
        pats = np.ones((10, 4), dtype=bool) if nb > 1 else rng.random((10, 4)) < 0.3
        path = tmp_path / f"s{i}.csv"
        write_shots(path, ShotFile(4, ShotBatch(np.arange(10), pats), nbar=nb))
        saturated.append(path)
    code, _, err = run(capsys, "tomography", *saturated, "--out", tmp_path / "t")
    assert code == EXIT_SATURATION and "N=4" in err


def test_tomography_invert_deconvolve_chain(tmp_path, capsys):
    shots_dir = tmp_path / "shots"
    nbars = [0.85, 0.5, 0.27, 0.1, 0.05]
    args = [x for nb in nbars for x in ("--nbar", nb)]
    code, out, _ = run(capsys, "simulate", "--n-bins", 8, "--eta", 0.605, "--shots", 50000, "--out", shots_dir, *args)
    files = json.loads(out)["files"]

    code, out, _ = run(capsys, "tomography", *files, "--out", tmp_path / "tomo", "--fit-order", "linear")
    assert code == 0
    summary = json.loads(out)
    assert summary["order"] == "linear" and abs(summary["eta"] - 0.605) < 5 * summary["sigma"][1]
    assert (tmp_path / "tomo" / "tomography_N8.json").exists()
    assert (tmp_path / "tomo" / "response_N8.csv").exists()

    fit_report = tmp_path / "tomo" / "tomography_N8.json"
    code, out, _ = run(
        capsys, "invert", files[0], "--fit-report", fit_report, "--fit-order", "linear",
        "--bootstrap", 50, "--out", tmp_path / "inv",
    )
    assert code == 0
    inv = read_report(tmp_path / "inv" / "invert_N8.json")
    assert inv.tables["eta"] == pytest.approx(summary["eta"])
    assert "N8_00.q_mandel" in json.loads(out)

    code, out, _ = run(
        capsys, "deconvolve", tmp_path / "inv" / "invert_N8.json", "--eta-to", 0.8, "--eta-to", 1.0,
        "--out", tmp_path / "dec",
    )
    assert code == 0
    dec = read_report(tmp_path / "dec" / "deconvolve.json")
    keys = [k for k in dec.photon_distributions if k.startswith("N8_00@")]
    assert {"N8_00@0.8", "N8_00@1", "N8_00@ideal"} <= set(keys)
    assert dec.photon_distributions["N8_00@1"].deconvolved
    tv = json.loads(out)["total_variation_vs_ideal"]["N8_00"]["1"]
    assert tv < 0.05

    code, out, _ = run(capsys, "qparams", tmp_path / "dec" / "deconvolve.json")
    assert code == 0 and "N8_00@1" in json.loads(out)


def test_deconvolve_rejects_lower_efficiency(tmp_path, capsys):
    run(capsys, "simulate", "--n-bins", 4, "--nbar", 0.5, "--shots", 2000, "--out", tmp_path)
    files = sorted(str(p) for p in tmp_path.glob("shots_*.csv"))
    run(capsys, "invert", *files, "--bootstrap", 10, "--out", tmp_path / "inv")
    code, _, err = run(capsys, "deconvolve", tmp_path / "inv" / "invert_N4.json", "--eta-to", 0.3, "--out", tmp_path)
    assert code == EXIT_VALIDATION and "below" in err


def test_qparams_analytic_csv_format(tmp_path, capsys):
    code, out, _ = run(
        capsys, "qparams", "--analytic", "--n-bins", 4, "--eta", 1.0, "--nbar", 0.85, "--nbar", 0.1,
        "--out", tmp_path, "--format", "csv",
    )
    assert code == 0
    assert out.splitlines() == ["points,2", "n_bins,4"]
    rows = (tmp_path / "qparams_analytic_N4.csv").read_text().splitlines()
    assert rows[0] == "nbar,poisson_qm,poisson_qb,clicks_qm,clicks_qb"
    nbar, qm, qb, cqm, cqb = map(float, rows[1].split(","))
    assert abs(qm) < 1e-8 and abs(qb - 0.85 / 3.15) < 1e-3
    assert cqm == pytest.approx(math.exp(-0.85 / 4) - 1, abs=1e-12) and abs(cqb) < 1e-12


def test_paper_pipeline_small_run(tmp_path, capsys):
    code, out, _ = run(
        capsys, "paper-pipeline", "--shots", 20000, "--bootstrap", 20, "--no-shot-files", "--out", tmp_path,
    )
    assert code == 0
    tables = json.loads(out)
    assert set(tables) == {"N4", "N8"}
    assert (tmp_path / "summary.json").exists()
    assert not list((tmp_path / "N4").glob("shots_*.csv"))
    assert (tmp_path / "N8" / "deconvolve.json").exists()
