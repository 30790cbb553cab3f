import json

import pytest

from srlab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main


def run(tmp_path, command, config=None, *extra, name="cfg.json"):
    args = [command, "--out", str(tmp_path / "out")]
    if config is not None:
        path = tmp_path / name
        path.write_text(config if isinstance(config, str) else json.dumps(config))
        args += ["--config", str(path)]
    return main(args + list(extra))


def report(tmp_path, command):
    return json.loads((tmp_path / "out" / f"{command}_report.json").read_text())


def test_brackets_pass_and_report(tmp_path):
    cfg = {"model": "engel", "params": {"depth": 3, "expect": [2, 1, 1]}}
    assert run(tmp_path, "brackets", cfg) == EXIT_OK
    rep = report(tmp_path, "brackets")
    assert rep["passed"] and rep["results"]["ranks"] == [2, 1, 1]
    assert {"numpy", "scipy", "python", "seed"} <= set(rep["provenance"])
    assert (tmp_path / "out" / "brackets.csv").read_text().startswith("layer,rank")


def test_failed_assertion_exits_one(tmp_path):
    cfg = {"model": "engel", "params": {"depth": 3, "expect": [2, 2]}}
    assert run(tmp_path, "brackets", cfg) == EXIT_FAIL
    assert not report(tmp_path, "brackets")["passed"]


def test_shoot_conserves_hamiltonian(tmp_path):
    cfg = {"model": "heisenberg3", "params": {"p0": [1.0, 0.0, 6.283185307179586], "steps": 2000}}
    assert run(tmp_path, "shoot", cfg, "--tol-drift", "1e-10") == EXIT_OK
    assert report(tmp_path, "shoot")["config"]["tolerances"]["drift"] == 1e-10


@pytest.mark.parametrize("config,extra", [
    ({"model": "heisenberg3", "colour": 1}, []),
    ({"params": {"q1": [0, 0, 1], "bogus": 2}}, []),
    ({"tolerances": {"ep": -1}}, []),
    ({"tolerances": {"speed": 1}}, []),
    ('{"model": "heisenberg3",\n "params": {', []),
    ({"model": "nonesuch", "params": {"q": [0, 0, 0]}}, []),
    (None, ["--tol-ep"]),
    (None, ["--frobnicate"]),
], ids=["unknown-key", "unknown-param", "negative-tol", "unknown-tol", "bad-json", "bad-model",
        "flag-without-value", "unknown-flag"])
def test_usage_errors_exit_two(tmp_path, capsys, config, extra):
    assert run(tmp_path, "brackets", config, *extra) == EXIT_USAGE


def test_json_error_reports_position(tmp_path, capsys):
    run(tmp_path, "brackets", '{"model": "heisenberg3",\n "params": {')
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_distance_is_deterministic(tmp_path):
    cfg = {"model": "heisenberg3", "seed": 3,
           "params": {"q1": [0.3, 0.0, 0.05], "classify": True}}
    assert run(tmp_path, "distance", cfg) == EXIT_OK
    first = (tmp_path / "out" / "distance.csv").read_bytes()
    assert report(tmp_path, "distance")["results"]["certificate"]["kind"] == "normal"
    assert run(tmp_path, "distance", cfg) == EXIT_OK
    assert (tmp_path / "out" / "distance.csv").read_bytes() == first


def test_steer_and_spectrum(tmp_path):
    assert run(tmp_path, "steer", {"model": "engel", "params": {"q1": [0, 0, 0, 0.1]}}) == EXIT_OK
    assert report(tmp_path, "steer")["results"]["plan"]["success"]
    assert run(tmp_path, "spectrum", {"params": {"N": [1, 2, 4]}}) == EXIT_OK


def test_verify_subset(tmp_path, capsys):
    assert run(tmp_path, "verify", {"params": {"criteria": [1, 4]}}) == EXIT_OK
    out = capsys.readouterr().out
    assert "[PASS] criterion  1" in out and "[PASS] criterion  4" in out
    assert run(tmp_path, "verify", {"params": {"criteria": [13]}}) == EXIT_USAGE
