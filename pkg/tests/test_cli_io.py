import filecmp

import numpy as np
import pytest
import yaml

from adpower.cli import main
from adpower.cli_io import (
    EXIT_ABORT,
    EXIT_CONFIG,
    EXIT_INSTABILITY,
    EXIT_OK,
    ConfigError,
    ParamRef,
    ReferenceSeries,
    add_noise,
    config_from_dict,
    load_config,
    load_reference,
    resample,
    resolve_param,
    run_experiment,
    write_reference,
)
from adpower.optimizer import loss_mse
from adpower.simulator import run

from conftest import DT

MINIMAL = {"schema": "adpower-experiment/1", "experiment": "simulate", "system": "builtin:kundur_smib"}


def _write_cfg(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def _identify(**extra):
    doc = dict(MINIMAL, experiment="identify",
               parameters=[{"name": "H_gen", "generator": 1, "initial": 5.0, "bounds": [0.1, 50]}],
               reference={"truth": {"G1.H": 3.5}}, optimizer={"max_iter": 3})
    doc.update(extra)
    return doc


# config

def test_minimal_config_gets_documented_defaults():
    cfg = config_from_dict(MINIMAL)
    assert (cfg.dt, cfg.t_end, cfg.noise, cfg.seed) == (0.005, 10.0, 0.0, 0)
    assert cfg.loss["kind"] == "mse" and cfg.signal == "G1.speed"
    assert cfg.optimizer["learning_rate"] == 0.05 and cfg.optimizer["epsilon"] == 1e-6
    assert cfg.schedule.step_indices(cfg.dt) and str(cfg.out_dir) == "out"


@pytest.mark.parametrize("bad, key", [
    ({"schema": "v0"}, "schema"),
    ({"experiment": "fit"}, "experiment"),
    ({"nosie": 0.1}, "nosie"),
    ({"noise": -0.1}, "noise"),
    ({"integrator": {"dt": 0.0, "t_end": 1.0}}, "dt"),
    ({"events": [{"kind": "short_circuit", "t_on": 1.0012, "t_off": 1.05}]}, "events"),
    ({"optimizer": {"lr": 1.0}}, "lr"),
])
def test_bad_config_names_the_key(bad, key):
    with pytest.raises(ConfigError, match=key):
        config_from_dict(dict(MINIMAL, **bad))


def test_parameter_name_mapping(smib, smib_pss):
    assert resolve_param(smib, "H_gen", 1) == ParamRef("G1", "gen", "H")
    assert resolve_param(smib, "H", "G1") == resolve_param(smib, "G1.H")
    assert resolve_param(smib, "x_d_st", 1).field == "X_d_st"
    assert resolve_param(smib_pss, "G1.pss.T_w") == ParamRef("G1", "pss", "T_w")
    assert resolve_param(smib_pss, "T_w", 1).device == "pss"
    with pytest.raises(ConfigError, match="ambiguous"):
        resolve_param(smib_pss, "K", 1)
    assert resolve_param(smib_pss, "K_pss", 1) == ParamRef("G1", "pss", "K")
    with pytest.raises(ConfigError, match="unknown"):
        resolve_param(smib, "H_bogus", 1)
    with pytest.raises(ConfigError):
        config_from_dict(_identify(parameters=[{"name": "Hx", "generator": 1, "initial": 5.0}]))


def test_multistart_initial_spec():
    cfg = config_from_dict(_identify(parameters=[
        {"name": "H_gen", "generator": 1, "initial": {"logspace": [1.75, 7.0, 8]}}]))
    init = cfg.params[0][1]
    assert init.size == 8 and init[0] == pytest.approx(1.75) and init[-1] == pytest.approx(7.0)
    np.testing.assert_allclose(np.diff(np.log(init)), np.log(4) / 7)


# reference files

def test_reference_round_trip_is_exact(tmp_path):
    s = ReferenceSeries(np.arange(5) * 0.1, np.array([0.0, 1e-17, -3.3e-4, 1 / 3, 2.0]))
    write_reference(tmp_path / "r.csv", s)
    back = load_reference(tmp_path / "r.csv")
    np.testing.assert_array_equal(back.times, s.times)
    np.testing.assert_array_equal(back.values, s.values)


def test_non_monotone_time_rejected_with_line(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("time_s,delta_omega_pu\n0.0,0\n0.005,1e-4\n0.005,2e-4\n0.010,0\n")
    with pytest.raises(ConfigError, match="line 4"):
        load_reference(p)


def test_bad_header_and_bad_number(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("t,w\n0,0\n1,1\n")
    with pytest.raises(ConfigError, match="header"):
        load_reference(p)
    p.write_text("time_s,delta_omega_pu\n0,0\n1,x\n")
    with pytest.raises(ConfigError, match="line 3"):
        load_reference(p)


def test_resample_on_grid_is_identity_and_interpolates_linearly():
    t = np.arange(0, 1.0 + DT / 2, DT)
    s = ReferenceSeries(t, np.sin(7 * t))
    np.testing.assert_array_equal(resample(s, t), s.values)
    coarse = ReferenceSeries([0.0, 1.0], [0.0, 2.0])
    np.testing.assert_allclose(resample(coarse, [0.25, 0.5]), [0.5, 1.0])
    with pytest.raises(ValueError, match="beyond"):
        resample(coarse, [0.0, 1.5])


# noise

def test_zero_noise_is_identity():
    s = ReferenceSeries(np.arange(10.0), np.arange(10.0) ** 2)
    n = add_noise(s, 0.0, 123)
    np.testing.assert_array_equal(n.values, s.values)


def test_noise_std_follows_rms_and_seed():
    t = np.arange(4000) * DT
    s = ReferenceSeries(t, 0.01 * np.sin(2 * np.pi * t))
    rms = np.sqrt(np.mean(s.values**2))
    a, b, c = add_noise(s, 0.2, 7), add_noise(s, 0.2, 7), add_noise(s, 0.2, 8)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert np.std(a.values - s.values) == pytest.approx(0.2 * rms, rel=0.05)
    with pytest.raises(ValueError):
        add_noise(s, -0.1, 0)


# the command line

def test_cli_config_error_exit(tmp_path):
    p = _write_cfg(tmp_path / "c.yaml", dict(MINIMAL, schema="wrong"))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_instability_exit_keeps_partial_trajectory(tmp_path):
    doc = dict(MINIMAL, parameters=[{"name": "G1.T_d0_st", "initial": 0.001}])
    p = _write_cfg(tmp_path / "c.yaml", doc)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == EXIT_INSTABILITY
    summary = yaml.safe_load((out / "summary.yaml").read_text())
    assert summary["status"] == "unstable" and summary["exit_code"] == 3
    assert 0 < summary["unstable_time_s"] <= 10.0
    assert load_reference(out / "trajectory.csv").times[-1] <= summary["unstable_time_s"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_optimizer_abort_exit(tmp_path):
    # every start makes the explicit integrator blow up, so no lane survives
    doc = _identify(parameters=[{"name": "G1.T_d0_st", "initial": [0.001, 0.0012]}],
                    reference={"truth": {"G1.H": 3.5}})
    p = _write_cfg(tmp_path / "c.yaml", doc)
    out = tmp_path / "o"
    assert main(["identify", "--config", str(p), "--out", str(out)]) == EXIT_ABORT
    summary = yaml.safe_load((out / "summary.yaml").read_text())
    assert summary["status"] == "aborted"
    assert (out / "trace.csv").exists()


def test_subcommand_selects_experiment(tmp_path):
    p = _write_cfg(tmp_path / "c.yaml", _identify())
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == EXIT_OK
    assert (out / "trajectory.csv").exists() and not (out / "trace.csv").exists()


def test_identify_writes_artifacts_and_reports_error(tmp_path):
    cfg = load_config(_write_cfg(tmp_path / "c.yaml", _identify()), {"out": tmp_path / "o"})
    assert run_experiment(cfg) == EXIT_OK
    out = tmp_path / "o"
    summary = yaml.safe_load((out / "summary.yaml").read_text())
    for key in ("final_params", "relative_error_pct", "iterations", "wall_time_s", "simulations"):
        assert key in summary
    assert summary["iterations"] == 3 and summary["simulations"] == 4
    rows = (out / "trace.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 and "loss" in rows[0] and "G1.H" in rows[0]
    assert rows[0].split(",")[-1] == "learning_rate"
    assert (out / "reference.csv").exists() and (out / "trajectory_final.csv").exists()
    assert (out / "trajectories" / "final.csv").exists()


def test_same_seed_gives_byte_identical_csvs(tmp_path):
    p = _write_cfg(tmp_path / "c.yaml", _identify(noise=0.1))
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["identify", "--config", str(p), "--out", str(o), "--seed", "5"]) == EXIT_OK
    csvs = sorted(q.relative_to(outs[0]) for q in outs[0].rglob("*.csv"))
    assert len(csvs) >= 4
    match, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], [str(c) for c in csvs], shallow=False)
    assert not mismatch and not errors
    main(["identify", "--config", str(p), "--out", str(tmp_path / "c"), "--seed", "6"])
    assert not filecmp.cmp(outs[0] / "reference.csv", tmp_path / "c" / "reference.csv", shallow=False)


def test_exported_trajectory_reimports_with_zero_loss(tmp_path, smib, fault):
    p = _write_cfg(tmp_path / "c.yaml", MINIMAL)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == EXIT_OK
    ref = load_reference(out / "trajectory.csv")
    tr = run(smib, fault, 10.0, DT)
    assert loss_mse(tr.values("G1.speed")[:, 0], resample(ref, tr.times)) == 0.0

    # and as the reference of an identification started at the truth
    doc = _identify(parameters=[{"name": "H_gen", "generator": 1, "initial": 3.5}],
                    reference={"csv": str(out / "trajectory.csv")})
    cfg_path = _write_cfg(tmp_path / "id.yaml", doc)
    assert main(["identify", "--config", str(cfg_path), "--out", str(tmp_path / "id")]) == EXIT_OK
    summary = yaml.safe_load((tmp_path / "id" / "summary.yaml").read_text())
    assert summary["initial_loss"][0] < 1e-30


@pytest.mark.parametrize("argv", [["--help"], ["scan", "--help"]])
def test_help_renders(argv, capsys):
    with pytest.raises(SystemExit) as ei:
        main(argv)
    assert ei.value.code == 0 and "scan" in capsys.readouterr().out
