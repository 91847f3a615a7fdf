import json

import pytest
import yaml

from randombsde import cli
from randombsde.checks import CheckResult
from randombsde.errors import NonMonotone


def _write(tmp_path, cfg, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def _cfg(**over):
    cfg = {"schema": 1, "benchmark": {"name": "uncertain-volatility"}, "initial": {"kind": "constant", "value": 1.0},
           "numerics": {"paths": 3000, "steps": 16, "seed": 4}, "schedule": {"levels": [1, 2, 4]},
           "checks": {"samples": 1500}}
    cfg.update(over)
    return cfg


def test_bsde_on_mark_independent_problem(tmp_path):
    cfg = _cfg(benchmark={"name": "mark-independent"}, initial={"kind": "constant", "value": 0.5},
               schedule={"levels": [1, 2, 4, 8], "stop_tol": 0.01})
    out = tmp_path / "out"
    assert cli.main(["bsde", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["converged_level"] == 1.0 and rep["stopped_early"]
    assert abs(rep["y0"] - 0.5) <= 3 * rep["stderr"]
    lines = (out / "convergence.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=") and lines[1].startswith("level,")
    assert len(lines) == 2 + 2  # levels 1 and 2: the stop rule compares consecutive levels


def test_duality_on_uncertain_volatility_passes(tmp_path):
    cfg = _cfg(numerics={"paths": 10_000, "steps": 50, "seed": 1},
               schedule={"levels": [1, 2, 4, 8, 16, 32, 64, 128]})
    out = tmp_path / "out"
    assert cli.main(["duality", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["passed"] and all(link["passed"] for link in rep["links"])
    assert abs(rep["bsde"]["value"] - 1.16) <= 3 * rep["bsde"]["stderr"] + 0.01


def test_negative_paths_exit_two_without_files(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["bsde", "--config", _write(tmp_path, _cfg(numerics={"paths": -5})), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    assert "paths" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [
    {"schema": 1, "typo": 1},
    {"schema": 2},
    {"benchmark": {"name": "uncertain-volatility"}},
    {"schema": 1, "benchmark": {"name": "nope"}},
    {"schema": 1, "numerics": {"paths": 10, "extra": 1}},
    {"schema": 1, "initial": {"kind": "spline"}},
    {"schema": 1, "mark": 0.3},
    {"schema": 1, "schedule": {"levels": [4, 2]}},
    {"schema": 1, "dual": {"kind": "constant", "value": -1}},
    {"schema": 1, "lambda_scale": 0},
])
def test_invalid_configs_exit_two(tmp_path, cfg):
    out = tmp_path / "out"
    assert cli.main(["primal", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_unreadable_config_exits_two(tmp_path):
    assert cli.main(["bsde", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exits_three_without_files(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NonMonotone("Y0 dropped")

    monkeypatch.setattr(cli, "minimal_solution", boom)
    out = tmp_path / "out"
    assert cli.main(["bsde", "--config", _write(tmp_path, _cfg()), "--out", str(out)]) == 3
    assert not out.exists()


def test_failed_check_exits_four(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_all", lambda samples, seed: [CheckResult("x", False, 1.0, 0.0, 0.1)])
    out = tmp_path / "out"
    assert cli.main(["check", "--config", _write(tmp_path, _cfg()), "--out", str(out)]) == 4
    assert json.loads((out / "report.json").read_text())["passed"] is False


def test_check_subcommand_runs_all_suites(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["check", "--config", _write(tmp_path, _cfg()), "--out", str(out)]) == 0
    names = [c["name"] for c in json.loads((out / "report.json").read_text())["checks"]]
    assert any(n.startswith("compensator/") for n in names)
    assert any(n.startswith("girsanov/") for n in names)
    assert any(n.startswith("kernel/") for n in names)


def test_simulate_dumps_paths_and_events(tmp_path):
    out = tmp_path / "out"
    cfg = _cfg(simulate={"dump": 3})
    assert cli.main(["simulate", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = (out / "paths.csv").read_text().splitlines()
    assert rows[1] == "path,time,x0,mark"
    assert len(rows) == 2 + 3 * 17
    assert (out / "mpp.csv").read_text().splitlines()[1] == "path,epoch,mark"


def test_outputs_are_reproducible_and_seed_override_is_recorded(tmp_path):
    path = _write(tmp_path, _cfg())
    for name in ("a", "b"):
        assert cli.main(["primal", "--config", path, "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "values.csv").read_bytes()
    assert a == (tmp_path / "b" / "values.csv").read_bytes()
    assert cli.main(["primal", "--config", path, "--seed", "9", "--out", str(tmp_path / "c")]) == 0
    header = (tmp_path / "c" / "values.csv").read_text().splitlines()[0]
    assert header.endswith("seed=9")
    assert header != a.decode().splitlines()[0]


def test_results_do_not_depend_on_workers(tmp_path):
    path = _write(tmp_path, _cfg(numerics={"paths": 20_000, "steps": 8, "seed": 4}))
    assert cli.main(["dual", "--config", path, "--out", str(tmp_path / "one")]) == 0
    assert cli.main(["dual", "--config", path, "--workers", "3", "--out", str(tmp_path / "three")]) == 0
    body = lambda d: (tmp_path / d / "values.csv").read_text().splitlines()[1:]
    assert body("one") == body("three")


def test_json_config_is_accepted(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(_cfg()))
    assert cli.main(["dual", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
