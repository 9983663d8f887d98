from __future__ import annotations

import csv
import json

import pytest

from ratchet_qsd.cli import main
from ratchet_qsd.config import parse_config, parse_config_text
from ratchet_qsd.errors import ParseError, ValidationError

BASE = {"model": "diffusion", "alpha": 1, "lambda": 1, "d": 15, "seed": 42}


def write(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


def test_minimal_config(tmp_path):
    cfg = parse_config(write(tmp_path, BASE))
    assert (cfg.alpha, cfg.lam, cfg.d, cfg.seed, cfg.model) == (1.0, 1.0, 15, 42, "diffusion")


def test_negative_alpha():
    with pytest.raises(ValidationError) as exc:
        parse_config_text(json.dumps({**BASE, "alpha": -1}))
    assert exc.value.field == "alpha"


def test_unknown_key():
    text = json.dumps({**BASE, "lamda": 1}, indent=1)
    with pytest.raises(ValidationError) as exc:
        parse_config_text(text)
    assert exc.value.field == "lamda" and "unknown key" in str(exc.value)
    assert exc.value.line is not None


def test_parse_errors():
    with pytest.raises(ParseError) as exc:
        parse_config_text('{"alpha": 1,\n "d": 3 "seed": 1}')
    assert exc.value.line == 2
    with pytest.raises(ParseError):
        parse_config_text('{"alpha": 1, "alpha": 2}')
    with pytest.raises(ParseError):
        parse_config_text("[1, 2]")
    with pytest.raises(ParseError):
        parse_config("/nonexistent/config.json")


@pytest.mark.parametrize("key,value", [("d", 0), ("seed", 2**64), ("dt", 0), ("quantile", 1.0),
                                       ("model", "lattice"), ("x0", [0.5, 0.5]), ("burn_in", 1.0),
                                       ("replicates", 1.5), ("full", 1)])
def test_range_checks(key, value):
    with pytest.raises(ValidationError) as exc:
        parse_config_text(json.dumps({**BASE, key: value}))
    assert exc.value.field == key


def test_missing_required():
    cfg = dict(BASE)
    del cfg["seed"]
    with pytest.raises(ValidationError) as exc:
        parse_config_text(json.dumps(cfg))
    assert exc.value.field == "seed"


def test_digest_ignores_threads_and_out():
    a = parse_config_text(json.dumps(BASE))
    assert a.digest() == a.with_(threads=4, out="x").digest()
    assert a.digest() != a.with_(seed=43).digest()


def test_simulate_is_byte_identical(tmp_path):
    path = write(tmp_path, {**BASE, "replicates": 100, "t_max": 0.5})
    outs = []
    for i, threads in enumerate((1, 3)):
        out = tmp_path / f"o{i}"
        assert main(["simulate", "--config", path, "--out", str(out), "--threads", str(threads)]) == 0
        outs.append(out)
    for name in ("series.csv", "summary.json", "config.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = list(csv.reader((outs[0] / "series.csv").open()))
    assert rows[0] == ["time", "x0", "m1", "m2", "m3", "survivors"]
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert summary["schema_version"] == 1 and len(summary["config_digest"]) == 64


def test_seed_override_changes_output(tmp_path):
    path = write(tmp_path, {**BASE, "replicates": 50, "t_max": 0.2})
    main(["simulate", "--config", path, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", path, "--out", str(tmp_path / "b"), "--seed", "7"])
    assert (tmp_path / "a" / "series.csv").read_bytes() != (tmp_path / "b" / "series.csv").read_bytes()


def test_qsd_with_one_particle_fails(tmp_path):
    path = write(tmp_path, {**BASE, "particles": 1, "horizon": 1.0})
    assert main(["qsd", "--config", path, "--out", str(tmp_path / "o")]) == 1
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["error"] in ("ValidationError", "Extinct")


def test_statistical_floor_exit_code(tmp_path):
    path = write(tmp_path, {**BASE, "replicates": 20, "t_max": 0.5})
    assert main(["clickstats", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "StatisticalFloor"


def test_bad_config_exit_code(tmp_path):
    path = write(tmp_path, {**BASE, "lamda": 1})
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == 1


def test_experiment_mismatch(tmp_path):
    path = write(tmp_path, {**BASE, "experiment": "qsd"})
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == 1


def test_tightness_table(tmp_path):
    path = write(tmp_path, {**BASE, "d_list": [6, 8], "particles": 100, "horizon": 4.0})
    assert main(["tightness", "--config", path, "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    table = summary["tables"]["tightness"]
    assert [row["d"] for row in table] == [6, 8]
    assert all(row["quantile_stderr"] is not None for row in table)


SMOKE = {
    "simulate": {"model": "discrete", "population": 100, "replicates": 20, "t_max": 0.5, "record_stride": 10},
    "qsd": {"particles": 100, "horizon": 4.0, "checks": False},
    "eta": {"particles": 100, "horizon": 4.0, "replicates": 500, "t_max": 1.0},
    "qprocess": {"replicates": 300, "t": 0.5, "guard": 0.2, "x0": "poisson"},
    "correlations": {"particles": 100, "horizon": 4.0, "replicates": 1000, "t_end": 0.1,
                     "t_step": 0.05, "n_boot": 10},
    "relaxation": {"replicates": 1000, "t_end": 1.0, "t_step": 0.2, "n_boot": 5},
    "autonomy": {"k": 3, "replicates": 200, "t": 0.3},
    "compare": {"population": 100, "replicates": 100, "t": 0.2},
    "clickstats": {"replicates": 300, "t_max": 10.0, "x0": "poisson"},
}


@pytest.mark.parametrize("experiment", sorted(SMOKE))
def test_experiment_smoke(tmp_path, experiment):
    path = write(tmp_path, {**BASE, **SMOKE[experiment]})
    assert main([experiment, "--config", path, "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["experiment"] == experiment
    assert (tmp_path / "o" / "series.csv").stat().st_size > 0
    resolved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert parse_config_text(json.dumps(resolved)).digest() == summary["config_digest"]
