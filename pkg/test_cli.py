#!/usr/bin/env python3

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from coag_cli import EXIT_CHECKS, EXIT_OK, EXIT_USAGE, _clean, main
from coag_config import parse_config
from coag_errors import ConfigError
from grid import build_geometric

SMALL = {
    "kernel": {"type": "sum_power", "lambda": 0.0, "k": 1.0},
    "source": {"family": "indicator", "c": 1.0, "a": 1.0, "b": 2.0},
    "grid": {"x_min": 1e-2, "x_max": 1e3, "bins_per_decade": 4},
    "evolution": {"delta": 0.1},
    "diagnostics": {"checks": ["residuals", "trajectory"]},
    "seed": 0,
}


def _config(**sections):
    data = json.loads(json.dumps(SMALL))
    for name, value in sections.items():
        if value is None:
            data.pop(name)
        else:
            data[name] = value
    return json.dumps(data, indent=2)


def _line_of(text, needle):
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    raise AssertionError(needle)


def _write(tmp_path, text, name="config.json"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------- configuration

def test_valid_config():
    config = parse_config(_config())
    assert config.deltas == [0.1]
    assert config.build_grid().size == 20
    assert config.evolve_params().delta == 0.1
    assert config.diagnostic_settings().checks == ("residuals", "trajectory")


def test_tail_tolerance_is_configurable():
    config = parse_config(_config(diagnostics={"checks": ["tail"], "tail_tol": 0.2, "tail_decades": 2}))
    settings = config.diagnostic_settings()
    assert settings.tail_tol == 0.2 and settings.tail_decades == 2.0


def test_missing_section():
    with pytest.raises(ConfigError) as err:
        parse_config(_config(grid=None), "run.json")
    assert str(err.value) == "run.json:1: missing section 'grid'"


def test_json_syntax_error_line():
    text = '{\n  "kernel": {"type": "sum_power", "lambda": 0.0, "k": 1.0},\n  "seed": 0,\n}\n'
    with pytest.raises(ConfigError) as err:
        parse_config(text, "broken.json")
    assert err.value.line == 4
    assert str(err.value).startswith("broken.json:4: invalid JSON")


@pytest.mark.parametrize("sections,needle,fragment", [
    ({"grid": {"x_min": 1e-2, "x_max": -5.0, "bins_per_decade": 4}}, '"x_max"', "grid.x_max"),
    ({"grid": {"x_min": 1e-2, "x_max": 1e3, "bins_per_decade": 2.5}}, '"bins_per_decade"', "integer"),
    ({"kernel": {"type": "sum_power", "lambda": 0.3, "k1": 2.0, "k2": 1.0}}, '"k1"', "must not exceed"),
    ({"kernel": {"type": "sum_power", "lambda": 0.3, "k": 1.0, "k1": 1.0}}, '"k"', "excludes"),
    ({"source": {"family": "gaussian", "c": 1.0}}, '"family"', "source.family"),
    ({"evolution": {"deltas": [0.01, 0.1]}}, '"deltas"', "strictly decreasing"),
    ({"evolution": {"delta": 0.1, "deltas": [0.1]}}, '"evolution"', "exactly one"),
    ({"evolution": {"delta": 0.1, "max_steps": 0}}, '"max_steps"', "integer"),
    ({"diagnostics": {"checks": ["d2a", "vibes"]}}, '"checks"', "diagnostics.checks"),
    ({"source": {"family": "indicator", "c": 1.0, "a": 3.0, "b": 2.0}}, '"source"', "section 'source'"),
])
def test_config_errors_point_at_the_offending_line(sections, needle, fragment):
    text = _config(**sections)
    with pytest.raises(ConfigError) as err:
        parse_config(text, "bad.json")
    assert err.value.line == _line_of(text, needle)
    assert fragment in err.value.message


def test_unknown_top_level_key():
    data = json.loads(_config())
    data["extras"] = 1
    text = json.dumps(data, indent=2)
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == _line_of(text, '"extras"')


def test_negative_seed():
    with pytest.raises(ConfigError, match="seed"):
        parse_config(_config(seed=-1))


def test_shipped_configs_parse():
    for path in sorted(Path(__file__).parent.joinpath("configs").glob("*.json")):
        parse_config(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------- command line

def test_usage_errors_exit_with_one(tmp_path):
    for argv in ([], ["run"], ["verify", "--suite", "nope", "--out", str(tmp_path)], ["explode"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == EXIT_USAGE


def test_config_error_exits_with_one(tmp_path, capsys):
    path = _write(tmp_path, _config(grid=None))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_USAGE
    assert f"{path}:1: missing section 'grid'" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_config_file(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "out")])
    assert code == EXIT_USAGE
    assert "cannot read configuration" in capsys.readouterr().err


def test_run_writes_three_files(tmp_path):
    path = _write(tmp_path, _config())
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["distribution.csv", "report.json", "trajectory.csv"]

    with open(out / "distribution.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["x", "dx", "phi"]
    grid = build_geometric(1e-2, 1e3, 4)
    assert len(rows) == grid.size + 1
    np.testing.assert_array_equal([float(r[0]) for r in rows[1:]], grid.pivots)
    assert all(float(r[2]) >= 0.0 for r in rows[1:])

    with open(out / "trajectory.csv", newline="") as f:
        header = next(csv.reader(f))
    assert header == ["t", "M0", "Mlambda", "M1", "M1plambda", "overflow_mass"]

    report = json.loads((out / "report.json").read_text())
    assert report["converged"] and report["pass"]
    assert report["delta"] == 0.1
    assert report["steps"] > 0


def test_failed_checks_exit_with_two(tmp_path):
    # three decades at four bins per decade leave no usable tail window
    path = _write(tmp_path, _config(diagnostics={"checks": ["tail"]}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CHECKS
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(report["failures"]) == 1 and report["failures"][0].startswith("tail")


def test_large_delta_number_sandwich_passes(tmp_path):
    path = _write(tmp_path, _config(diagnostics={"checks": ["d2a", "d2b"]}, evolution={"delta": 0.5}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["d2a"]["pass"] and report["failures"] == []


def test_continue_writes_every_stage(tmp_path):
    path = _write(tmp_path, _config(evolution={"deltas": [0.2, 0.1]}))
    out = tmp_path / "family"
    assert main(["continue", "--config", str(path), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "continuation.json").read_text())
    assert [e["delta"] for e in summary["entries"]] == [0.2, 0.1]
    assert summary["flags"] == [] and summary["pass"]
    for stage in ("delta_00", "delta_01"):
        assert (out / "family" / stage / "report.json").exists()


PRODUCT = {"type": "product_power", "gamma": -0.5, "alpha": 0.25, "k": 1.0}


def test_reduction_run_reports_original_residuals(tmp_path):
    path = _write(tmp_path, _config(kernel=PRODUCT, diagnostics={"checks": ["residuals"]},
                                    evolution={"deltas": [0.1, 0.01, 0.001, 0.0001]}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    reduction = report["reduction"]
    assert reduction["theta"] == pytest.approx(-0.25)
    assert reduction["reduced_lambda"] == pytest.approx(0.0)
    one = reduction["original_residuals"][0]
    assert one["theta"] == "one" and one["value"] <= 1e-3
    assert reduction["pass"]
    assert report["hypotheses"]["pass"]


def test_reduction_residual_above_tolerance_exits_with_two(tmp_path, capsys):
    # the efflux at delta=0.1 leaves a residual of order 2 delta
    path = _write(tmp_path, _config(kernel=PRODUCT, diagnostics={"checks": ["residuals"]}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_CHECKS
    reduction = json.loads((out / "report.json").read_text())["reduction"]
    assert reduction["original_residuals"][0]["value"] > reduction["residual_tol"] == 1e-3
    assert not reduction["pass"]
    assert "original-kernel residual above 0.001" in capsys.readouterr().out


def test_shipped_constant_kernel_continuation_passes(tmp_path):
    path = Path(__file__).parent / "configs" / "constant_kernel.json"
    out = tmp_path / "family"
    assert main(["continue", "--config", str(path), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "continuation.json").read_text())
    assert summary["pass"] and summary["flags"] == []
    for index in range(3):
        report = json.loads((out / "family" / f"delta_{index:02d}" / "report.json").read_text())
        assert report["failures"] == []
        assert report["d2a"]["pass"] and report["d2b"]["pass"]
    assert report["moments"]["0"] == pytest.approx(1.0, abs=0.02)


def test_run_records_the_seeded_kernel_check(tmp_path):
    reports = []
    for seed in (0, 5):
        text = _config(seed=seed, kernel={"type": "sum_power", "lambda": 0.5, "k": 1.0},
                       diagnostics={"checks": ["residuals"]})
        path = _write(tmp_path, text, name=f"seed_{seed}.json")
        out = tmp_path / f"out_{seed}"
        assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
        reports.append(json.loads((out / "report.json").read_text()))
    assert all(r["hypotheses"]["pass"] for r in reports)
    assert reports[0]["hypotheses"] != reports[1]["hypotheses"]


def test_verify_is_independent_of_thread_count(tmp_path, monkeypatch):
    payloads = []
    for threads in ("1", "3"):
        monkeypatch.setenv("COAGSTAT_THREADS", threads)
        out = tmp_path / f"verify_{threads}"
        assert main(["verify", "--suite", "operator", "--seed", "7", "--out", str(out)]) == EXIT_OK
        payloads.append((out / "verify.json").read_bytes())
    assert payloads[0] == payloads[1]
    data = json.loads(payloads[0])
    assert data["suite"] == "operator" and data["seed"] == 7 and data["pass"]


def test_probe_zero_source(tmp_path):
    text = _config(
        kernel={"type": "sum_power", "lambda": 1.5, "k": 1.0},
        source={"family": "zero"},
        probe={"x_maxes": [1e2, 1e3], "deltas": [0.1], "x_min": 0.1, "bins_per_decade": 4},
    )
    path = _write(tmp_path, text)
    out = tmp_path / "probe"
    assert main(["probe", "--config", str(path), "--out", str(out)]) == EXIT_OK
    probe = json.loads((out / "probe.json").read_text())
    assert probe["verdict"] == "EXISTS" and probe["zero_solution"]
    assert [r["x_max"] for r in probe["rungs"]] == [100.0, 1000.0]


def test_clean_maps_non_finite_values_to_null():
    cleaned = _clean({"a": math.nan, "b": [np.float64(math.inf), np.int64(3)], "c": np.bool_(True)})
    assert cleaned == {"a": None, "b": [None, 3], "c": True}
    assert json.dumps(cleaned, allow_nan=False)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
