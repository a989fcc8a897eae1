import io
import json
import subprocess
import sys

import pytest

from framelangevin.cli import KEYS, main, parse_config, run
from framelangevin.engine import ConfigError, Trajectory


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_config_fills_defaults(tmp_path):
    path = write(tmp_path, 'experiment = "simulate"\nmodel = "bm"\nmanifold = "sphere2"\n')
    cfg = parse_config(["--config", path])
    assert cfg.experiment == "simulate" and cfg.manifold == "sphere2"
    assert cfg.T == 1.0 and cfg.dt == 1e-3 and cfg.seed == 0
    assert set(cfg.values) == set(KEYS)


def test_sections_and_flag_override(tmp_path):
    path = write(tmp_path, '[run]\nexperiment = "converge"\nseed = 3\n[ensemble]\nT = 0.5\n'
                           'masses = [0.1, 0.01]\n[params]\nsigma_amp = 0.25\n')
    cfg = parse_config(["--config", path, "--seed=7", "--param", "gamma_amp=0.1"])
    assert cfg.seed == 7 and cfg.T == 0.5 and cfg.masses == [0.1, 0.01]
    assert cfg.params == {"sigma_amp": 0.25, "gamma_amp": 0.1}
    assert parse_config(["--config", path]).seed == 3


def test_malformed_numeric_names_key_and_line(tmp_path):
    path = write(tmp_path, 'experiment = "simulate"\n\ndt = "abc"\n')
    with pytest.raises(ConfigError, match=r"run.toml:3.*'dt'"):
        parse_config(["--config", path])
    with pytest.raises(ConfigError, match="dt"):
        parse_config(["--dt", "fast"])
    bad = write(tmp_path, 'experiment = "simulate"\nT = 1.0.0\n', "bad.toml")
    with pytest.raises(ConfigError, match="T"):
        parse_config(["--config", bad])


def test_unknown_key_lists_valid_keys(tmp_path):
    path = write(tmp_path, 'experiment = "simulate"\ntemperature = 3\n')
    with pytest.raises(ConfigError) as err:
        parse_config(["--config", path])
    msg = str(err.value)
    assert "temperature" in msg and "ensemble.dt" in msg and "run.seed" in msg


def test_main_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["validate", "--model", "bm", "--param", "gamma=0", "--out", out]) == 2
    assert main(["converge", "--scheme", "em", "--masses", "1e-6,1e-7,1e-8", "--out", out]) == 3
    assert "required steps:" in capsys.readouterr().err
    assert main(["simulate", "--T", "-1", "--out", out]) == 1
    assert main(["validate", "--manifold", "torus2", "--model", "anisotropic_drag", "--out", out]) == 0
    rec = [json.loads(x) for x in open(tmp_path / "o" / "validate.jsonl")]
    assert rec[0]["provenance"]["model"] == "anisotropic_drag" and rec[-1]["verdict"] == "pass"


def _outputs(tmp_path, tag, argv, threads):
    out = tmp_path / tag
    stream = io.StringIO()
    assert run(parse_config(argv + ["--out", str(out), "--threads", str(threads)]), stream) == 0
    return {p.name: p.read_bytes() for p in out.iterdir()}, stream.getvalue()


@pytest.mark.parametrize("argv", [
    ["simulate", "--manifold", "sphere2", "--model", "anisotropic_drag", "--mass", "0.05", "--T", "0.05"],
    ["simulate", "--manifold", "sphere2", "--model", "fd_particle", "--T", "0.05", "--path-index", "3"],
    ["converge", "--manifold", "torus2", "--model", "scalar_drag_noise", "--masses", "0.1,0.01,0.001",
     "--T", "0.05", "--n-paths", "24", "--block-size", "5", "--dt-check", "true"],
    ["momentum", "--T", "0.05", "--n-paths", "24", "--block-size", "5"],
    ["drift", "--manifold", "sphere2", "--model", "anisotropic_drag", "--grid-points", "20"],
    ["bm-check", "--manifold", "torus2", "--T", "0.02", "--n-paths", "24", "--block-size", "5"],
])
def test_outputs_byte_identical(tmp_path, argv):
    a, line = _outputs(tmp_path, "a", argv, 1)
    b, _ = _outputs(tmp_path, "b", argv, 4)
    c, _ = _outputs(tmp_path, "c", argv, 8)
    assert a == b == c and a
    assert "->" in line
    for name, data in a.items():
        text = data.decode()
        if name.endswith(".jsonl"):
            first = json.loads(text.splitlines()[0])
            assert first["provenance"]["seed"] == 0 and "out" not in first["provenance"]
        else:
            assert text.startswith("# framelangevin") and "# config {" in text


def test_simulate_csv_parses(tmp_path):
    files, _ = _outputs(tmp_path, "s", ["simulate", "--manifold", "torus2", "--mass", "0.1", "--T", "0.01"], 1)
    tr = Trajectory.from_csv(files["simulate.csv"].decode())
    assert len(tr) == 11 and tr.v is not None


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "framelangevin.cli", "validate", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "validate" in res.stdout
    res = subprocess.run([sys.executable, "-m", "framelangevin.cli", "--bogus", "1"], capture_output=True, text=True)
    assert res.returncode != 0
