import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selftune import cli
from selftune.errors import ConfigError, DomainViolation
from selftune.scenario import (InitialState, Scenario, SystemSpec, dumps, load, loads,
                               preset_names, resolve_param)


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# -- configuration ---------------------------------------------------------------------

def test_presets_listed():
    assert set(preset_names()) >= {"neural-integrator", "hair-cell", "hair-cell-forced"}


@pytest.mark.parametrize("name", ["neural-integrator", "hair-cell", "hair-cell-forced"])
def test_preset_round_trip(name):
    sc = load(name)
    assert loads(dumps(sc)) == sc


@settings(max_examples=40, deadline=None)
@given(mu0=st.floats(-2, 2), a=st.floats(0.1, 5), b=st.floats(0.1, 5), x=st.floats(0.01, 10),
       seed=st.integers(0, 2**31), band=st.floats(1e-8, 1e-1))
def test_config_round_trip(mu0, a, b, x, seed, band):
    sc = load("neural-integrator")
    sc = (sc.with_value("mu0", mu0).with_value("a", a).with_value("b", b)
            .with_value("initial.x", x).with_value("seed", seed).with_value("settle_band", band))
    assert loads(dumps(sc)) == sc


@pytest.mark.parametrize("text", [
    "[scenario]\nname='x'\ncolour='red'\n",
    "[scenario]\nname='x'\n[system]\nkind='first_order'\nfoo=1\n",
    "[scenario]\nname='x'\n[bogus]\n",
    "[scenario]\nname='x'\n[system]\nmu0='high'\n",
])
def test_unknown_or_bad_keys(text):
    with pytest.raises(ConfigError):
        loads(text)


@pytest.mark.parametrize("param, expected", [
    ("mu0", ("system", "mu0")), ("system.lambda", ("system", "lam")),
    ("lambda", ("system", "lam")), ("initial.mu", ("initial", "mu")),
    ("seed", (None, "seed")), ("x", ("initial", "x")), ("epsilon", ("perturbation", "epsilon")),
])
def test_resolve_param(param, expected):
    assert resolve_param(param) == expected


@pytest.mark.parametrize("param", ["expr", "kind", "nope", "law.zeta", "void.a"])
def test_resolve_param_rejects(param):
    # expr and kind exist in several sections; the rest do not exist at all
    with pytest.raises(ConfigError):
        resolve_param(param)


@pytest.mark.parametrize("changes", [
    {"system": SystemSpec(kind="second_order")},
    {"system": SystemSpec(kind="oscillator", lam=1.0)},
    {"system": SystemSpec(kind="oscillator_full", lam=0.0)},
    {"system": SystemSpec(kind="first_order", frozen_mu=True)},
    {"settle_band": 0.0},
    {"chart": "polar"},
])
def test_validate_rejects(changes):
    from dataclasses import replace
    with pytest.raises(ConfigError):
        replace(Scenario(name="bad"), **changes).validate()


def test_validate_initial_state_domain():
    from dataclasses import replace
    with pytest.raises(DomainViolation):
        replace(Scenario(name="bad"), initial=InitialState(x=0.0)).validate()


# -- output formatting -----------------------------------------------------------------

@given(st.floats(allow_nan=False, allow_infinity=False))
def test_seventeen_digits_round_trip(v):
    assert float(cli.fmt(v)) == v


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((20, 3)) * 10.0 ** rng.integers(-300, 300, (20, 3))
    cli.write_table(tmp_path / "t.csv", ("a", "b", "c"), [list(r) for r in data])
    header, back = cli.read_csv(tmp_path / "t.csv")
    assert header == ["a", "b", "c"] and np.array_equal(back, data)


def test_json_cleaning():
    out = json.loads(cli.dump_json({"x": np.float64(math.inf), "n": np.int64(3),
                                    "b": np.bool_(True), "z": 1 + 2j}))
    assert out == {"b": True, "n": 3, "x": "inf", "z": [1.0, 2.0]}


def test_settle_time():
    t = np.arange(6.0)
    assert cli.settle_time(t, [1, 1, 0, 1, 0, 0], 0.5) == 4.0
    assert cli.settle_time(t, np.zeros(6), 0.5) == 0.0
    assert cli.settle_time(t, [0, 0, 0, 0, 0, 1], 0.5) is None


# -- simulate --------------------------------------------------------------------------

def test_neural_integrator(tmp_path):
    rep = cli.run_scenario(load("neural-integrator"), tmp_path)
    assert rep.final_mu_error <= 1e-6 and rep.settled
    assert rep.target_amplitude == pytest.approx(math.exp(-0.5))
    header, data = cli.read_csv(tmp_path / "neural-integrator.csv")
    assert header == ["t", "x", "mu"] and data[-1, 0] == pytest.approx(50.0)
    report = json.loads((tmp_path / "neural-integrator-report.json").read_text())
    assert report["analyses"]["lyapunov_max_increase"] <= 1e-8


def test_hair_cell(tmp_path):
    rep = cli.run_scenario(load("hair-cell"), tmp_path)
    assert rep.final_mu_error <= 1e-5
    assert abs(rep.final_amplitude - math.exp(-0.3)) <= 1e-4
    assert rep.analyses["floquet_spectral_radius"] < 1


def test_simulate_cli_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        code, out, _ = run(["simulate", "neural-integrator", "--output-dir", str(tmp_path / d)],
                           capsys)
        assert code == 0 and "wrote" in out
    for name in ("neural-integrator.csv", "neural-integrator-report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    code, _, _ = run(["simulate", "neural-integrator", "--format", "json"], capsys)
    assert code == 0
    table = json.loads((tmp_path / "env" / "neural-integrator.json").read_text())
    assert table["columns"] == ["t", "x", "mu"]


def test_config_file_and_seed_override(tmp_path, capsys):
    path = tmp_path / "run.toml"
    path.write_text(dumps(load("neural-integrator").with_value("horizon", 5.0)))
    code, _, _ = run(["simulate", str(path), "--seed", "9", "--output-dir", str(tmp_path)],
                     capsys)
    assert code == 0
    assert json.loads((tmp_path / "neural-integrator-report.json").read_text())["seed"] == 9


# -- exit codes ------------------------------------------------------------------------

def _error_line(err):
    line = json.loads(err.strip().splitlines()[-1])
    assert set(line) == {"code", "error", "message"}
    return line


@pytest.mark.parametrize("argv", [
    ["simulate", "no-such-preset"],
    ["simulate"],
    ["frobnicate", "hair-cell"],
    ["sweep", "hair-cell", "--param", "nope", "--values", "1"],
    ["sweep", "hair-cell", "--param", "a", "--values", "one"],
    ["certify", "hair-cell", "--epsilons", "-1"],
    ["gain-curve", "hair-cell", "--amplitudes", "0.1"],
])
def test_invalid_input_exit_2(argv, tmp_path, capsys):
    code, _, err = run(argv + ["--output-dir", str(tmp_path)], capsys)
    assert code == 2 and _error_line(err)["code"] == 2


def test_inadmissible_initial_state_exit_2(tmp_path, capsys):
    path = tmp_path / "zero.toml"
    path.write_text("[scenario]\nname='zero'\n[system]\nkind='oscillator'\n"
                    "[initial]\nx=0.0\nxdot=0.0\n")
    code, _, err = run(["simulate", str(path), "--output-dir", str(tmp_path)], capsys)
    assert code == 2 and _error_line(err)["error"] == "DomainViolation"


def test_integration_failure_exit_3(tmp_path, capsys):
    path = tmp_path / "steps.toml"
    path.write_text("[scenario]\nname='steps'\n[system]\nkind='first_order'\nmu0=0.5\n"
                    "[integrator]\nmax_steps=5\n")
    code, _, err = run(["simulate", str(path), "--output-dir", str(tmp_path)], capsys)
    line = _error_line(err)
    assert code == 3 and line == {"code": 3, "error": "StepUnderflow", "message": line["message"]}


# -- sweeps ----------------------------------------------------------------------------

def test_sweep_gain(tmp_path):
    sc = load("hair-cell").with_value("horizon", 150.0)
    rows, path = cli.run_sweep(sc, "a", [0.5, 1.0], tmp_path)
    assert [r["a"] for r in rows] == [0.5, 1.0]
    assert all(r["status"] == "ok" and r["hypotheses_passed"] for r in rows)
    assert all(r["floquet_spectral_radius"] < 1 for r in rows)
    assert path.name == "hair-cell-sweep-a.csv"


def test_sweep_epsilon_residual_decreases(tmp_path):
    sc = load("neural-integrator").with_value("perturbation.expr", "sin(t)")
    rows, _ = cli.run_sweep(sc, "epsilon", [1e-1, 1e-2, 1e-3], tmp_path)
    res = [r["residual"] for r in rows]
    assert res[0] > res[1] > res[2] > 0


def test_sweep_records_failures(tmp_path):
    rows, _ = cli.run_sweep(load("hair-cell"), "b", [-1.0], tmp_path)
    assert rows[0]["status"] == "error" and "ConfigError" in rows[0]["error"]


def test_sweep_cli_json(tmp_path, capsys):
    code, out, _ = run(["sweep", "neural-integrator", "--param", "mu0", "--values", "0,1",
                        "--format", "json", "--output-dir", str(tmp_path)], capsys)
    assert code == 0 and "2 rows (0 failed)" in out
    table = json.loads((tmp_path / "neural-integrator-sweep-mu0.json").read_text())
    assert [r["mu0"] for r in table["rows"]] == [0.0, 1.0]


# -- gain curve ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def forced_curve(tmp_path_factory):
    rows, _ = cli.gain_curve(load("hair-cell-forced"), [0.0, 0.02, 0.04],
                             out=tmp_path_factory.mktemp("gain"))
    return rows


def test_gain_curve_unforced_matches_averaged_orbit(forced_curve):
    # averaged fixed point of the full oscillator: r**2 = 4 (-ln r - mu0) / (3 lambda omega**2)
    r = float(__import__("scipy.optimize", fromlist=["brentq"]).brentq(
        lambda r: r * r - 4 * (-math.log(r) - 0.3) / 3, 0.1, 1.0))
    assert forced_curve[0]["response"] == pytest.approx(r, rel=0.02)


def test_gain_curve_compressive(forced_curve):
    _, f1, f2 = forced_curve
    assert f2["response"] / f1["response"] < 2
    assert 0 < f2["slope"] < 1
    assert f1["slope"] is None or f1["slope"] >= 0
    assert not any(r["unsettled"] for r in forced_curve)


def test_gain_curve_detuned_is_linear(tmp_path):
    sc = (load("hair-cell-forced").with_value("frozen_mu", True)
          .with_value("initial.mu", -0.7))
    rows, _ = cli.gain_curve(sc, [1e-3, 2e-3], out=tmp_path)
    assert rows[1]["slope"] == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("amps", [[0.2, 0.1], [-0.1], []])
def test_gain_curve_rejects(amps, tmp_path):
    with pytest.raises(ConfigError):
        cli.gain_curve(load("hair-cell-forced"), amps, out=tmp_path)


# -- certify and analyze ---------------------------------------------------------------

def test_certify_cli(tmp_path, capsys):
    argv = ["certify", "neural-integrator", "--epsilons", "1e-2", "--points-per-shell", "4",
            "--shells", "1", "--horizon", "80", "--residual-sweep", "1e-1,1e-2",
            "--output-dir", str(tmp_path)]
    code, out, _ = run(argv, capsys)
    assert code == 0 and "not_falsified" in out
    first = (tmp_path / "neural-integrator-certify-practical.json").read_bytes()
    record = json.loads(first)
    assert record["perturbation"] == "sin(t)" and record["seed"] == 0
    r = [row["residual"] for row in record["residual_sweep"]]
    assert r[0] > r[1]
    run(argv, capsys)
    assert (tmp_path / "neural-integrator-certify-practical.json").read_bytes() == first


def test_certify_semiglobal_box(tmp_path, capsys):
    code, out, _ = run(["certify", "neural-integrator", "--clause", "semiglobal",
                        "--k-box", "0.1:10,-2:2", "--epsilons", "1e-3", "--points-per-shell",
                        "4", "--shells", "1", "--horizon", "120", "--format", "csv",
                        "--output-dir", str(tmp_path)], capsys)
    assert code == 0 and "not_falsified" in out
    assert (tmp_path / "neural-integrator-certify-semiglobal.csv").read_text().startswith("key,value")


@pytest.mark.parametrize("preset, what", [
    ("neural-integrator", "lyapunov"), ("neural-integrator", "linearize"),
    ("hair-cell", "kyp"), ("hair-cell", "positive-real"), ("hair-cell", "floquet"),
    ("neural-integrator", "kyp"),
])
def test_analyze(preset, what, tmp_path, capsys):
    code, _, _ = run(["analyze", preset, "--what", what, "--output-dir", str(tmp_path)],
                     capsys)
    assert code == 0
    assert json.loads((tmp_path / f"{preset}-{what}.json").read_text())


@pytest.mark.parametrize("preset, what", [("hair-cell", "lyapunov"),
                                          ("neural-integrator", "floquet")])
def test_analyze_wrong_system(preset, what, tmp_path, capsys):
    code, _, err = run(["analyze", preset, "--what", what, "--output-dir", str(tmp_path)],
                       capsys)
    assert code == 2 and _error_line(err)["error"] == "ConfigError"


def test_analyze_kyp_storage(tmp_path):
    rec = cli.analyze(load("hair-cell"), "kyp")
    assert rec["feasible"]
    assert np.allclose(rec["P"], [[2.0, 1.0], [1.0, 1.0]], atol=1e-6)


def test_analyze_sector():
    rec = cli.analyze(load("neural-integrator"), "sector", samples=1000)
    assert rec["max_relative_error"] <= 1e-12
