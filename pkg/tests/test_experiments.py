import math
from dataclasses import replace

import numpy as np
import pytest

from ucgrid import cli
from ucgrid import experiments as ex
from ucgrid.dynamics import TurbineModel

TWO_BUS = {
    "name": "t", "grid": "two_bus.toml", "horizon": 20.0, "step": 0.001, "record": 0.01,
    "outputs": ["omega[1]", "omega[2]", "lam[1]", "flow[1-2]", "p[2]"],
    "controller": {"kind": "DUC", "K_lambda": 1.0, "K_phi": 1.0},
    "disturbance": [{"t": 1.0, "bus": 2, "dr": -0.2}],
}


def scenario(**changes):
    return ex.scenario_from_dict({**TWO_BUS, **changes})


def write_toml(path, text):
    path.write_text(text)
    return str(path)


# -- metrics -----------------------------------------------------------------

def test_decaying_exponential_is_not_oscillating():
    t = np.linspace(0, 40, 4001)
    flag, ratio = ex.detect_oscillation(t, np.exp(-0.5 * t), window=10.0, tol=1e-6)
    assert not flag and ratio < 0.05


def test_sinusoid_is_oscillating():
    t = np.linspace(0, 40, 4001)
    flag, ratio = ex.detect_oscillation(t, np.sin(2 * np.pi * t), window=10.0, tol=1e-6)
    assert flag and ratio == pytest.approx(1.0, abs=1e-3)


def test_tiny_sinusoid_is_below_amplitude_floor():
    t = np.linspace(0, 40, 4001)
    flag, _ = ex.detect_oscillation(t, 1e-9 * np.sin(t), window=10.0, tol=1e-6)
    assert not flag


def test_oscillation_needs_two_windows():
    t = np.linspace(0, 10, 101)
    with pytest.raises(ValueError):
        ex.detect_oscillation(t, np.sin(t), window=6.0, tol=1e-3)


def test_settling_time_and_overshoot():
    t = np.arange(6.0)
    y = np.array([0.0, 1.3, 0.9, 1.05, 1.0, 1.0])
    assert ex.settling_time(t, y, y, 1.0, 0.1) == 1.0
    assert ex.settling_time(t, y, y, 1.0, 0.01) == 3.0
    assert ex.settling_time(t, y, y, 5.0, 0.1) is None
    assert ex.overshoot(y) == pytest.approx(0.3)


# -- scenarios -----------------------------------------------------------------

def test_zero_disturbance_is_settled_from_start():
    res = ex.run_scenario(scenario(disturbance=[]))
    assert res.settled and res.settling_time == 0.0
    for label, y in res.series.items():
        assert np.all(y == y[0]), label


def test_series_length_and_time_grid():
    sc = scenario(horizon=5.0, record=0.05)
    res = ex.run_scenario(sc)
    assert len(res.t) == 101
    assert np.allclose(res.t, np.arange(101) * 0.05)
    assert all(len(y) == 101 for y in res.series.values())


def test_runs_are_deterministic(tmp_path):
    sc = scenario()
    ex.run_scenario(sc).to_csv(tmp_path / "a.csv")
    ex.run_scenario(sc).to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_two_bus_step_settles_at_oracle_point():
    res, sol, report = ex.verify_scenario(scenario(horizon=40.0))
    assert res.settled and report.passed


def test_absent_block_gives_nan_column():
    res = ex.run_scenario(scenario(disturbance=[], controller={"kind": "AGC"}))
    assert np.all(np.isnan(res.series["lam[1]"]))
    assert res.settled


@pytest.mark.parametrize("changes, match", [
    ({"step": 0.5}, "horizon/100"),
    ({"record": 0.005, "step": 0.001}, "at least"),
    ({"record": 0.015, "step": 0.01}, "multiple"),
    ({"horizon": -1.0}, "horizon"),
    ({"outputs": []}, "output"),
    ({"bogus": 1}, "unknown scenario keys"),
    ({"controller": {"kind": "PID"}}, "unknown controller kind"),
    ({"controller": {"gain": 1.0}}, "controller"),
    ({"grid": "missing.toml"}, "not found"),
    ({"emulator_factors": [0.0, 1.0]}, "emulator_factors"),
])
def test_invalid_scenarios(changes, match):
    with pytest.raises(ex.ScenarioError, match=match):
        scenario(**changes)


def test_bad_selectors_and_buses():
    with pytest.raises(ex.ScenarioError, match="no such bus"):
        ex.run_scenario(scenario(outputs=["omega[99]"]))
    with pytest.raises(ex.ScenarioError, match="unknown variable"):
        ex.run_scenario(scenario(outputs=["speed[1]"]))
    with pytest.raises(ex.ScenarioError, match="unknown bus"):
        scenario(disturbance=[{"t": 0.0, "bus": 9, "dr": 0.1}]).system()


def test_packaged_scenarios_load():
    for name in ("fig4", "step_loss", "congested", "uncongested", "limit_binding", "eigen39", "robustness",
                 "two_bus_step"):
        sc = ex.load_scenario(f"{name}.toml")
        assert sc.horizon > 0 and sc.outputs


def test_duc_with_fast_emulator_matches_uc_on_first_order_plant():
    base = scenario(horizon=40.0, turbine="first-order",
                    outputs=["omega[1]", "omega[2]", "lam[1]", "lam[2]", "flow[1-2]", "p[1]", "p[2]"])
    uc = ex.run_scenario(base.with_controller(kind="UC"))
    duc = ex.run_scenario(base.with_controller(kind="DUC", Tg_hat=1e-3))
    assert uc.settled and duc.settled
    assert not any(flag for flag, _ in uc.oscillation.values())
    assert not any(flag for flag, _ in duc.oscillation.values())
    for label in uc.series:
        assert abs(uc.series[label][-1] - duc.series[label][-1]) <= 1e-3, label


def test_sweep_requires_duc_and_second_order():
    with pytest.raises(ex.ScenarioError, match="DUC"):
        ex.run_robustness_sweep(scenario().with_controller(kind="UC"))
    with pytest.raises(ex.ScenarioError, match="second-order"):
        ex.run_robustness_sweep(replace(scenario(), turbine=TurbineModel.FIRST_ORDER))


def test_sweep_rows():
    rows = ex.run_robustness_sweep(scenario(horizon=30.0), factors=[0.5, 1.0])
    assert [r["factor"] for r in rows] == [0.5, 1.0]
    assert all(r["error"] is None and r["settled"] for r in rows)


# -- command line ----------------------------------------------------------------

SMALL = """
name = "small"
grid = "two_bus.toml"
horizon = 20.0
step = 0.001
record = 0.01
outputs = ["omega[1]", "lam[1]", "flow[1-2]"]
focus = "lam[1]"

[controller]
kind = "DUC"

[[disturbance]]
t = 1.0
bus = 2
dr = -0.2
"""


def test_cli_run(tmp_path, capsys):
    path = write_toml(tmp_path / "s.toml", SMALL)
    out = tmp_path / "out.csv"
    assert cli.main(["run", path, "-o", str(out)]) == cli.EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "t,omega[1],lam[1],flow[1-2]"
    assert len(lines) == 1 + 2001
    assert "settled=True" in capsys.readouterr().out


def test_cli_controller_override(tmp_path):
    path = write_toml(tmp_path / "s.toml", SMALL)
    out = tmp_path / "agc.csv"
    assert cli.main(["run", path, "--controller", "AGC", "-o", str(out)]) == cli.EXIT_OK
    assert "nan" in out.read_text().splitlines()[1]


def test_cli_invalid_input(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.toml")]) == cli.EXIT_INVALID
    bad = write_toml(tmp_path / "bad.toml", SMALL.replace("step = 0.001", "step = 0.5"))
    assert cli.main(["run", bad]) == cli.EXIT_INVALID
    assert cli.main(["frobnicate"]) == cli.EXIT_INVALID
    assert "invalid input" in capsys.readouterr().err


def test_cli_numerical_abort_keeps_partial_output(tmp_path):
    # no control band and a step far outside the RK4 stability region of the stiff droop loop
    grid = (tmp_path / "free.toml")
    grid.write_text(ex.data_path("two_bus.toml").read_text()
                    .replace("p_min = -1.0\n", "").replace("p_max = 1.0\n", "")
                    .replace("alpha = 1.0", "alpha = 1000.0"))
    text = SMALL.replace("two_bus.toml", str(grid)).replace("horizon = 20.0", "horizon = 100.0") \
        .replace("step = 0.001", "step = 0.05").replace("record = 0.01", "record = 0.1")
    path = write_toml(tmp_path / "blow.toml", text)
    out = tmp_path / "blow.csv"
    assert cli.main(["run", path, "-o", str(out)]) == cli.EXIT_NUMERIC
    body = out.read_text()
    assert body.rstrip().splitlines()[-1].startswith("# ERROR")
    assert len(body.splitlines()) > 2


def test_cli_verify(tmp_path, capsys):
    path = write_toml(tmp_path / "s.toml", SMALL.replace("horizon = 20.0", "horizon = 40.0"))
    sol = tmp_path / "sol.json"
    assert cli.main(["verify", path, "--solution", str(sol)]) == cli.EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert sol.exists()


def test_cli_sweep(tmp_path):
    path = write_toml(tmp_path / "s.toml", SMALL)
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", path, "--factors", "0.5", "1", "-o", str(out)]) == cli.EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0].startswith("factor,settled") and len(rows) == 3


def test_cli_eigen(tmp_path):
    out = tmp_path / "eig"
    assert cli.main(["eigen", "eigen39.toml", "-o", str(out)]) == cli.EXIT_OK
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 4
    first = (out / "eigen_UC_first-order.csv").read_text().splitlines()
    assert first[0].startswith("# UC first-order abscissa=") and first[1] == "re,im"
    re0 = float(first[2].split(",")[0])
    assert math.isfinite(re0)
