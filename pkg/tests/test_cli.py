import json

import pytest

from poroeg.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main, parse_sweep
from poroeg.config import ConfigError

TERZ = "scenario = terzaghi\nmesh.ny = 8\ntime.dt = 5 s\ntime.tau = 25 s\ntime.outputs = 25 s\n"
RANDOM = ("scenario = random_2d\nmesh.nx = 6\nmesh.ny = 6\ntime.dt = 1 s\ntime.tau = 3 s\n"
          "time.outputs = 3 s\noutput.vtk = false\n")


def _cfg(tmp_path, text, name="c.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "o"
    assert main(["run", _cfg(tmp_path, TERZ), "--out", str(out)]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"config.txt", "manifest.json", "diagnostics.csv", "fields_t25s.vtk"} <= names
    man = json.loads((out / "manifest.json").read_text())
    assert man["scenario"] == "terzaghi" and man["method"] == "EG"


def test_random_run_is_byte_reproducible(tmp_path):
    cfg = _cfg(tmp_path, RANDOM)
    for name in ("a", "b"):
        assert main(["run", cfg, "--out", str(tmp_path / name), "--seed", "17"]) == EXIT_OK
    for f in ("diagnostics.csv", "fields.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["run", cfg, "--out", str(tmp_path / "c"), "--seed", "18"]) == EXIT_OK
    assert (tmp_path / "a" / "fields.csv").read_bytes() != (tmp_path / "c" / "fields.csv").read_bytes()


def test_sweep_directories(tmp_path):
    out = tmp_path / "s"
    assert main(["run", _cfg(tmp_path, TERZ), "--out", str(out), "--sweep", "material.K=1 MPa,2 MPa"]) == EXIT_OK
    dirs = sorted(p.name for p in out.iterdir())
    assert dirs == ["material.K=1MPa", "material.K=2MPa"]
    assert "material.K = 2000000.0 Pa" in (out / "material.K=2MPa" / "config.txt").read_text().splitlines()


def test_parse_sweep():
    assert parse_sweep("method=CG, EG") == ("method", ["CG", "EG"])
    for bad in ("method", "method=", "material.K=1 furlong", "nokey=1"):
        with pytest.raises(ConfigError):
            parse_sweep(bad)


@pytest.mark.parametrize("text", ["scenario = terzaghi\nbogus = 1\n", "scenario = terzaghi\ntime.dt = -1 s\n"])
def test_config_errors_exit_2(tmp_path, text, capsys):
    assert main(["run", _cfg(tmp_path, text), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_missing_file_exits_2(tmp_path):
    assert main(["run", str(tmp_path / "none.cfg")]) == EXIT_CONFIG


def test_bad_sweep_exits_2(tmp_path):
    assert main(["run", _cfg(tmp_path, TERZ), "--out", str(tmp_path / "o"), "--sweep", "material.K=1"]) == EXIT_CONFIG


def test_picard_cap_exits_3(tmp_path):
    text = ("scenario = structured_2d\nmesh.nx = 4\nmesh.ny = 4\ntime.tau = 1 s\ntime.outputs = 1 s\n"
            "coupling = dependent\nsolver.max_iter = 1\nsolver.xi = 1e-30\nmaterial.K = 1 GPa\n")
    out = tmp_path / "o"
    assert main(["run", _cfg(tmp_path, text), "--out", str(out)]) == EXIT_SOLVER
    report = json.loads((out / "error.json").read_text())
    assert report["error"] == "SolverError"


def test_poisson_scenario(tmp_path):
    text = "scenario = poisson_convergence\nmesh.levels = 2, 4\npoisson.methods = EG\npoisson.degrees = 1\n"
    out = tmp_path / "p"
    assert main(["run", _cfg(tmp_path, text), "--out", str(out)]) == EXIT_OK
    assert (out / "convergence_EG1.csv").exists()


def test_verify_subset(tmp_path, capsys):
    assert main(["verify", "--only", "8,10", "--out", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("[PASS] criterion  8") and lines[1].startswith("[PASS] criterion 10")
    assert lines[-1].startswith("2/2 criteria passed")
    assert (tmp_path / "acceptance.txt").read_text().splitlines() == lines


def test_verify_bad_only():
    assert main(["verify", "--only", "x"]) == EXIT_CONFIG


def test_exit_code_values():
    assert (EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE) == (0, 2, 3, 4)
