"""Tests for config parsing, the CLI subcommands, and the SVG renderer."""

import json
import os

import pytest

from safeguard.cli import (ConfigParseError, ConfigValidationError, RunConfig,
                           dispatch, parse_config, serialize_config)

# fast synthesis settings for CLI round trips (sampling kept small)
FAST_SYNTH = {"cert_samples": 100, "bundle_samples": 256,
              "alpha_gain": 20.0, "error_directions": "position"}


def write_cfg(tmp_path, name="cfg.json", **overrides):
    payload = {"controller": "bs_qp", "duration": 0.5,
               "synthesis": dict(FAST_SYNTH),
               "cache": str(tmp_path / "cache.json"),
               "output_dir": str(tmp_path)}
    payload.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


class TestParseConfig:
    def test_empty_object_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("{}")
        cfg = parse_config(str(path))
        assert cfg == RunConfig()
        assert cfg.control_rate == 250.0
        assert cfg.epsilon == 0.4
        assert cfg.settings().horizon == 1.0
        assert cfg.settings().n_constraints == 4
        assert cfg.settings().dt_int == 5e-3
        assert cfg.params().torque_limit == 20.0

    def test_negative_control_rate_names_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"control_rate": -1}')
        with pytest.raises(ConfigValidationError, match="control_rate"):
            parse_config(str(path))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"no_such_key": 1}')
        with pytest.raises(ConfigParseError, match="no_such_key"):
            parse_config(str(path))

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "controller": bs_qp\n}')
        with pytest.raises(ConfigParseError, match="line 2"):
            parse_config(str(path))

    def test_missing_params_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"segway_params": "/nonexistent.json"}')
        with pytest.raises(ConfigValidationError, match="segway_params"):
            parse_config(str(path))

    def test_epsilon_must_cover_bias(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({
            "error_model": {"kind": "constant_bias",
                            "offset": [-0.4, 0, 0, 0]},
            "epsilon": 0.1}))
        with pytest.raises(ConfigValidationError, match="epsilon"):
            parse_config(str(path))

    def test_shipped_scenario_a(self):
        cfg = parse_config("configs/scenario_a.json")
        assert cfg.controller == "bs_qp"
        kind, offset, _, _ = cfg.error_model
        assert kind == "constant_bias"
        assert list(offset) == [-0.4, 0.0, 0.0, 0.0]
        assert cfg.v_desired == ((0.0, 1.0),)
        assert cfg.epsilon == 0.4
        assert cfg.duration == 8.0

    def test_shipped_scenario_b(self):
        cfg = parse_config("configs/scenario_b.json")
        assert cfg.controller == "mr_bs_op"
        assert cfg.settings().alpha_gain == 20.0

    def test_round_trip(self, tmp_path):
        src = write_cfg(tmp_path, error_model={
            "kind": "constant_bias", "offset": [-0.4, 0, 0, 0]})
        cfg = parse_config(src)
        path = tmp_path / "rt.json"
        path.write_text(json.dumps(serialize_config(cfg)))
        assert parse_config(str(path)) == cfg


class TestDispatch:
    def test_unknown_subcommand(self, capsys):
        code = dispatch(["frobnicate"])
        assert code == 64
        assert "usage" in capsys.readouterr().err

    def test_no_arguments_prints_usage(self, capsys):
        assert dispatch([]) == 64

    def test_parse_error_exit_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"no_such_key": 1}')
        assert dispatch(["simulate", str(path)]) == 2

    def test_validation_error_exit_3(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"control_rate": -1}')
        assert dispatch(["simulate", str(path)]) == 3

    def test_missing_file_exit_2(self, tmp_path):
        assert dispatch(["simulate", str(tmp_path / "nope.json")]) == 2

    def test_synthesize_then_simulate(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        assert dispatch(["synthesize", cfg_path]) == 0
        assert os.path.exists(tmp_path / "cache.json")
        assert dispatch(["simulate", cfg_path]) == 0
        assert os.path.exists(tmp_path / "cfg_log.csv")
        assert os.path.exists(tmp_path / "cfg_report.json")
        report = json.loads((tmp_path / "cfg_report.json").read_text())
        assert report["ticks"] == 125

    def test_simulate_twice_byte_identical(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert dispatch(["simulate", cfg_path]) == 0
        first = (tmp_path / "cfg_log.csv").read_bytes()
        assert dispatch(["simulate", cfg_path]) == 0
        assert (tmp_path / "cfg_log.csv").read_bytes() == first

    def test_stale_cache_rebuilt(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert dispatch(["synthesize", cfg_path]) == 0
        cache = json.loads((tmp_path / "cache.json").read_text())
        cache["settings"]["alpha_gain"] = 123.0
        (tmp_path / "cache.json").write_text(json.dumps(cache))
        # simulate must detect the mismatch and rebuild rather than use it
        assert dispatch(["simulate", cfg_path]) == 0
        rebuilt = json.loads((tmp_path / "cache.json").read_text())
        assert rebuilt["settings"]["alpha_gain"] == FAST_SYNTH["alpha_gain"]

    def test_sweep(self, tmp_path):
        cfg_path = write_cfg(tmp_path, controller="mr_bs_op", error_model={
            "kind": "constant_bias", "offset": [-0.4, 0, 0, 0]})
        assert dispatch(["sweep", cfg_path, "--eps", "0.0", "0.4"]) == 0
        payload = json.loads((tmp_path / "cfg_sweep.json").read_text())
        assert [entry["epsilon"] for entry in payload] == [0.0, 0.4]

    def test_lipschitz(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert dispatch(["lipschitz", cfg_path]) == 0
        bundle = json.loads((tmp_path / "cfg_lipschitz.json").read_text())
        assert set(bundle["rows"]) == {"tau0", "tau1", "tau2", "tau3", "B"}


class TestPlot:
    def test_minimal_two_row_csv(self, tmp_path):
        csv_path = tmp_path / "tiny.csv"
        header = ",".join(["t", "x_true", "v_true", "pitch_true",
                           "pitchrate_true", "x_est", "v_est", "pitch_est",
                           "pitchrate_est", "u_des", "u_applied", "slack",
                           "status", "h_true", "h_est", "hB_true"])
        rows = ["0.0,0.0,0,0,0,-0.4,0,0,0,0,0,0,optimal,2.0,2.4,0.01",
                "1.0,1.0,0,0,0,0.6,0,0,0,0,0,0,optimal,1.0,1.4,0.01"]
        csv_path.write_text(header + "\n" + "\n".join(rows) + "\n")
        out = tmp_path / "fig.svg"
        assert dispatch(["plot", str(csv_path), "--out", str(out)]) == 0
        svg = out.read_text()
        assert svg.count("<polyline") == 2
        assert "robustness-band" in svg and "safe-band" in svg
        assert svg.startswith("<svg")

    def test_empty_csv_fails(self, tmp_path):
        csv_path = tmp_path / "empty.csv"
        csv_path.write_text("t,x_true,x_est\n")
        assert dispatch(["plot", str(csv_path)]) == 3

    def test_simulated_log_plots(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert dispatch(["simulate", cfg_path]) == 0
        assert dispatch(["plot", str(tmp_path / "cfg_log.csv"),
                         "--out", str(tmp_path / "fig.svg")]) == 0
        assert (tmp_path / "fig.svg").exists()


def test_shipped_scenario_b_end_to_end(tmp_path):
    """The shipped robust scenario must finish clean with no violation."""
    shipped = json.loads(open("configs/scenario_b.json").read())
    shipped["cache"] = str(tmp_path / "cache.json")
    shipped["output_dir"] = str(tmp_path)
    path = tmp_path / "scenario_b.json"
    path.write_text(json.dumps(shipped))
    assert dispatch(["simulate", str(path)]) == 0
    report = json.loads((tmp_path / "scenario_b_report.json").read_text())
    assert report["min_h_true"] >= -1e-6
    assert report["first_violation_time"] is None
    assert report["relaxed_tick_count"] == 0
