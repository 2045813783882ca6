import csv
import json
import math
import shutil
import textwrap
import time
from pathlib import Path

import pytest

from parorb.cli import LOG_COLUMNS, main
from parorb.config import ConfigError, config_from_dict, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """
[problem]
dimension = 1
extents = [20.0]
points_per_axis = [120]
n_orbitals = 2
atoms = [{ position = [10.0], charge = 2.0 }]
"""


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    o = cfg.optimizer
    assert o.algorithm == "opt_par_mod"
    assert (o.rho1, o.delta, o.eta, o.n_diag, o.n_org) == (1e-4, 0.1, 0.85, 100, 1)
    assert cfg.io.log == tmp_path / "iterations.csv"
    assert cfg.threads == 1 and cfg.seed == 0


def test_period_settings_accepted(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL + "[optimizer]\nn_diag = 50\nn_org = 2\n"))
    assert (cfg.optimizer.n_diag, cfg.optimizer.n_org) == (50, 2)
    cfg = parse_config(write(tmp_path, MINIMAL + '[optimizer]\nn_diag = "inf"\n'))
    assert cfg.optimizer.n_diag is None


@pytest.mark.parametrize(
    "extra,key",
    [
        ("[optimizer]\ndelta = 1.5\n", "optimizer.delta"),
        ("[optimizer]\nbogus = 1\n", "optimizer.bogus"),
        ("[optimizer]\nn_org = 1.5\n", "optimizer.n_org"),
        ("[io]\nlog_every = 0\n", "io.log_every"),
        ("threads = 0\n", "threads"),
    ],
)
def test_validation_names_key(tmp_path, extra, key):
    text = MINIMAL + extra if extra.startswith("[") else extra + MINIMAL
    with pytest.raises(ConfigError) as info:
        parse_config(write(tmp_path, text))
    assert info.value.key == key


def test_problem_validation():
    base = dict(dimension=1, extents=[10.0], points_per_axis=[5], n_orbitals=2)
    with pytest.raises(ConfigError):
        config_from_dict({"problem": base | {"n_orbitals": 6}})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": base | {"atoms": [{"position": [11.0], "charge": 1.0}]}})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": base | {"hartree": True, "hartree_mode": "poisson"}})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": {k: v for k, v in base.items() if k != "extents"}})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": base, "extra": 1})


def test_syntax_error_has_position(tmp_path, capsys):
    path = write(tmp_path, "[problem\ndimension = 1\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert "line 1" in str(info.value)
    assert main(["run", str(path)]) == 4
    assert "invalid config" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert main(["run", str(tmp_path / "absent.toml")]) == 5


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    path = write(tmp_path, MINIMAL + '[io]\nlog = "blocker/log.csv"\n')
    assert main(["run", str(path)]) == 5


def test_linear_demo_run(tmp_path):
    shutil.copy(CONFIGS / "linear_1d.toml", tmp_path / "linear_1d.toml")
    t0 = time.perf_counter()
    code = main(["run", str(tmp_path / "linear_1d.toml"), "--oracle-check", "--emit-reduction"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    assert elapsed < 60.0
    out = tmp_path / "out"
    summary = json.loads((out / "linear_1d_summary.json").read_text())
    assert summary["status"] == "converged"
    assert summary["oracle"]["dense_energy_error"] <= 1e-8
    assert summary["ks_residual"] <= 1e-5
    assert 0.0 <= summary["parallel_fraction"] <= 1.0
    rows = read_log(out / "linear_1d_log.csv")
    assert tuple(rows[0].keys()) == LOG_COLUMNS
    assert summary["iterations"] == sum(1 for r in rows if float(r["tau"]) > 0.0)
    assert summary["logged_wall_ms"] == pytest.approx(sum(float(r["wall_ms"]) for r in rows))
    assert float(rows[-1]["energy"]) == summary["energy"]["total"]
    keys = [(int(r["level"]), int(r["iter"])) for r in rows]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)
    red = read_log(out / "linear_1d_reduction.csv")
    assert list(red[0].keys()) == ["iter", "energy_minus_min"]
    assert float(red[-1]["energy_minus_min"]) == 0.0


def test_max_inner_one_not_converged(tmp_path):
    path = write(tmp_path, MINIMAL + "[optimizer]\nmax_inner = 1\n")
    assert main(["run", str(path)]) == 2
    rows = read_log(tmp_path / "iterations.csv")
    assert len(rows) == 2
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "not_converged"


def test_stagnation_exit_code(tmp_path):
    path = write(tmp_path, MINIMAL + "[optimizer]\nmax_backtracks = 0\nrho1 = 1e6\n")
    assert main(["run", str(path)]) == 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "stagnation"
    assert summary["trial_energies"]
    assert (tmp_path / "iterations.csv").exists()


def test_log_every(tmp_path):
    path = write(tmp_path, MINIMAL + "[optimizer]\nmax_inner = 25\n")
    assert main(["run", str(path), "--log-every", "10"]) == 2
    iters = [int(r["iter"]) for r in read_log(tmp_path / "iterations.csv")]
    assert iters == [0, 10, 20, 25]


def test_threads_and_seed_override(tmp_path):
    logs = {}
    for threads in (1, 8):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        path = write(d, MINIMAL + "[optimizer]\nmax_inner = 200\n")
        main(["run", str(path), "--threads", str(threads), "--seed", "3"])
        rows = read_log(d / "iterations.csv")
        logs[threads] = [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
        summary = json.loads((d / "summary.json").read_text())
        assert summary["config"]["seed"] == 3 and summary["config"]["threads"] == threads
    assert logs[1] == logs[8]


def test_log_float_format(tmp_path):
    path = write(tmp_path, MINIMAL + "[optimizer]\nmax_inner = 5\nalgorithm = \"opt_par_mod\"\nn_org = 2\n")
    main(["run", str(path)])
    rows = read_log(tmp_path / "iterations.csv")
    assert rows[2]["energy"] == "nan"
    assert rows[0]["did_orth"] == "1" and rows[1]["did_orth"] == "0"
    e = rows[0]["energy"]
    assert repr(float(e)) == e
    assert math.isfinite(float(e))
