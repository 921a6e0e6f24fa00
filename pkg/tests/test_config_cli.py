import csv
import json
import os

import pytest

from spinlimit.cli import atomic_write, main
from spinlimit.config import ConfigError, parse_config, validate

SMALL = """\
[lattice]
topology = "ring"
n_sites = 3

[bath]
beta = 1.0
spectral = "asymmetric"

[dynamics]
t_final = 1.0
n_grid = 5

[trajectories]
n_traj = 20
seed = 3

[kmc]
n_sites = 50
t_final = 1.0
n_grid = 5

[verify]
n_pairs = 10
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(SMALL)
    return p


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_materialized():
    c = parse_config(None)
    assert c["bath"]["flat"]["lower"] == 0.5
    assert c["dynamics"]["tol"] == 1e-9
    assert c.graph().n_sites == 4


def test_hash_stable_and_ignores_output(tmp_path):
    a = parse_config(write(tmp_path, SMALL, "a.toml"))
    b = parse_config(write(tmp_path, "# comment\n" + SMALL + '\n[output]\ndir = "elsewhere"\n', "b.toml"))
    assert a.hash == b.hash
    c = parse_config(write(tmp_path, SMALL.replace("beta = 1.0", "beta = 2.0"), "c.toml"))
    assert c.hash != a.hash
    assert len(a.hash) == 64


def test_int_and_float_hash_equal(tmp_path):
    a = parse_config(write(tmp_path, "[bath]\nbeta = 1\n", "a.toml"))
    b = parse_config(write(tmp_path, "[bath]\nbeta = 1.0\n", "b.toml"))
    assert a.hash == b.hash


def test_bad_value_reports_key_and_line(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, "[bath]\nbeta = -1\n"))
    assert exc.value.key == "bath.beta" and exc.value.line == 2
    assert "violates constraint" in str(exc.value)


def test_unknown_key_suggests(tmp_path):
    with pytest.raises(ConfigError, match="did you mean 'beta'"):
        parse_config(write(tmp_path, "[bath]\nbetta = 1\n"))


@pytest.mark.parametrize("text,key", [
    ('[lattice]\ntopology = "torus"\n', "lattice.topology"),
    ("[lattice]\nn_sites = 2\n", "lattice.n_sites"),
    ('[lattice]\ntopology = "grid"\n', "lattice.shape"),
    ("[bath]\nmu = 0.7\n", "bath.mu"),
    ("[bath.flat]\nlower = 0.0\n", "bath.flat.lower"),
    ('[bath]\nspectral = "table"\n', "bath.table.path"),
    ("[dynamics]\nn_grid = 1.5\n", "dynamics.n_grid"),
    ("[lattice]\nperiodic = 1\n", "lattice.periodic"),
    ("[[coupling]]\nr = 0\ns = 1\nj = 1.0\n", "lattice.topology"),
])
def test_invalid_configs(tmp_path, text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, text))
    assert exc.value.key == key


def test_explicit_couplings(tmp_path):
    text = '[lattice]\ntopology = "explicit"\nn_sites = 3\n\n[[coupling]]\nr = 0\ns = 1\nj = 1.5\n\n[[coupling]]\nr = 1\ns = 2\nj = -0.5\n'
    g = parse_config(write(tmp_path, text)).graph()
    assert g.bonds() == [(0, 1, 1.5), (1, 2, -0.5)]


def test_coupling_missing_field_line(tmp_path):
    text = '[lattice]\ntopology = "explicit"\n\n[[coupling]]\nr = 0\nj = 1.0\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, text))
    assert exc.value.key == "coupling[0]" and exc.value.line == 4


def test_toml_syntax_error(tmp_path):
    with pytest.raises(ConfigError, match="TOML"):
        parse_config(write(tmp_path, "[bath\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.toml")


def test_with_seed_overrides_all_streams():
    c = validate({}).with_seed(9)
    assert c["trajectories"]["seed"] == c["kmc"]["seed"] == c["verify"]["seed"] == 9
    with pytest.raises(ConfigError):
        validate({}).with_seed(-1)


def test_cli_config_echo(cfg, capsys):
    assert main(["config", "--config", str(cfg)]) == 0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["lattice"]["n_sites"] == 3 and echoed["bath"]["pv"]["panels"] == 4096


def test_cli_config_error_exit_code(tmp_path):
    assert main(["verify", "--quiet", "--config", str(write(tmp_path, "[bath]\nbeta = -1\n"))]) == 2


def test_cli_verify(cfg, tmp_path):
    out = tmp_path / "out"
    assert main(["--quiet", "verify", "--config", str(cfg), "--out", str(out)]) == 0
    records = [json.loads(line) for line in (out / "verify.jsonl").read_text().splitlines()]
    names = {r["identity"] for r in records}
    assert {"lemma1", "theorem1", "kms", "duality", "classical_rates", "detailed_balance"} <= names
    for r in records:
        assert set(r) == {"identity", "n_sites", "residual", "tolerance", "pass"}
        assert r["pass"] is True
    meta = json.loads((out / "verify.jsonl.meta.json").read_text())
    assert meta["config_hash"] == parse_config(cfg).hash


def test_cli_rates_null_rate_zero(cfg, tmp_path):
    out = tmp_path / "out"
    assert main(["rates", "--classical", "--quiet", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "rates.csv").open()))
    assert len(rows) == 12
    null = [r for r in rows if r["sign_class"] == "null"]
    assert null and all(float(r["gamma_minus"]) == 0.0 == float(r["gamma_plus"]) for r in null)
    classical = list(csv.DictReader((out / "classical_rates.csv").open()))
    assert {r["kind"] for r in classical} == {"emission", "absorption", "blocked"}
    meta = json.loads((out / "classical_rates.csv.meta.json").read_text())
    assert meta["blocked_classes"] == 6
    assert meta["detailed_balance_violation"] < 1e-10


def test_cli_evolve_t_final_zero(tmp_path):
    cfg = write(tmp_path, SMALL.replace("t_final = 1.0\nn_grid = 5", "t_final = 0.0\nn_grid = 5\nobservables = [\"energy\"]", 1))
    out = tmp_path / "out"
    assert main(["evolve", "--quiet", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "evolve.csv").open()))
    assert len(rows) == 1
    assert float(rows[0]["time"]) == 0.0 and float(rows[0]["mean"]) == pytest.approx(-3.0)


@pytest.mark.parametrize("command,name", [("trajectories", "trajectories.csv"), ("kmc", "kmc.csv"),
                                          ("evolve", "evolve.csv"), ("steady", "steady.json")])
def test_cli_outputs_bit_reproducible(cfg, tmp_path, command, name):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--quiet", "--config", str(cfg), "--out", str(a)]) == 0
    assert main([command, "--quiet", "--config", str(cfg), "--out", str(b)]) == 0
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_cli_seed_changes_kmc(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["kmc", "--quiet", "--config", str(cfg), "--out", str(a), "--seed", "1"])
    main(["kmc", "--quiet", "--config", str(cfg), "--out", str(b), "--seed", "2"])
    assert (a / "kmc.csv").read_bytes() != (b / "kmc.csv").read_bytes()
    assert json.loads((a / "kmc.csv.meta.json").read_text())["seed"] == 1


def test_cli_steady_reports_reducible(cfg, tmp_path):
    out = tmp_path / "out"
    assert main(["steady", "--quiet", "--config", str(cfg), "--out", str(out)]) == 0
    result = json.loads((out / "steady.json").read_text())
    assert result["reducible"] is True and result["nullity"] > 1


def test_atomic_write_leaves_no_temp_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "x.txt"
    atomic_write(target, "old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, "new")
    assert target.read_text() == "old"
    assert os.listdir(tmp_path) == ["x.txt"]


def test_cli_verify_default_config(tmp_path):
    # no --config: the built-in defaults (four-site ring) are used
    out = tmp_path / "out"
    assert main(["--quiet", "verify", "--out", str(out)]) == 0
    records = [json.loads(line) for line in (out / "verify.jsonl").read_text().splitlines()]
    assert {"lemma1", "theorem1", "unitality", "duality", "kms"} <= {r["identity"] for r in records}
    assert all(r["pass"] and r["n_sites"] == 4 for r in records)
