"""Command-line front end: config parsing, synthesis caching, runs, plots.

Configs are JSON with defaults for every field; unknown keys are rejected.
Exit codes: 0 success, 1 runtime failure (the failing stage is named),
2 config parse error, 3 semantic validation error, 64 usage error.
"""

import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import SafeguardError
from .robustness import (EpsilonProvider, ErrorModel, bundle_to_dict,
                         validate_epsilon_pairing)
from .segway import SegwayParams
from .simulate import (ScenarioConfig, evaluate_safety, log_to_csv,
                       run_scenario, sweep_epsilon)
from .synthesis import (SynthesisSettings, build_context, result_from_dict,
                        result_to_dict, settings_from_dict, settings_to_dict)

USAGE = """usage: safeguard <command> [args]

commands:
  synthesize <config.json>        build and cache the filter context
  simulate   <config.json>        run the scenario; write CSV log + report
  sweep      <config.json> --eps V [V ...] [--parallel]
                                  rerun the scenario across error bounds
  lipschitz  <config.json>        estimate and write the Lipschitz bundle
  plot       <log.csv> [--out F] [--eps V]
                                  render the position-vs-time SVG
"""

_SCENARIO_KEYS = {"controller", "error_model", "epsilon", "v_desired",
                  "duration", "control_rate", "truth_dt", "initial_state",
                  "pd_gains", "seed"}
_TOP_KEYS = _SCENARIO_KEYS | {"segway_params", "synthesis", "cache",
                              "output_dir"}


class ConfigParseError(SafeguardError):
    pass


class ConfigValidationError(SafeguardError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully-defaulted run configuration (plain values only)."""

    controller: str = "mr_bs_op"
    error_model: tuple = ("identity", (0.0, 0.0, 0.0, 0.0), 0.0, 0)
    epsilon: float = 0.4
    v_desired: tuple = ((0.0, 1.0),)
    duration: float = 8.0
    control_rate: float = 250.0
    truth_dt: float = 1e-3
    initial_state: tuple = (0.0, 0.0, 0.0, 0.0)
    pd_gains: tuple = (5.0, 160.0, 30.0)
    seed: int = 0
    segway_params: tuple = tuple(sorted(asdict(SegwayParams()).items()))
    synthesis: tuple = tuple(sorted(settings_to_dict(SynthesisSettings()).items(),
                                    key=lambda kv: kv[0]))
    cache: str | None = None
    output_dir: str = "."

    def params(self):
        return SegwayParams(**dict(self.segway_params))

    def settings(self):
        raw = {k: v for k, v in self.synthesis}
        raw["lqr_weights"] = list(raw["lqr_weights"])
        raw["lyapunov_weights"] = list(raw["lyapunov_weights"])
        raw["bundle_box"] = [list(b) for b in raw["bundle_box"]]
        raw["speed_box"] = [list(b) for b in raw["speed_box"]]
        return settings_from_dict(raw)

    def scenario(self):
        kind, offset, radius, seed = self.error_model
        model = ErrorModel(kind=kind, offset=np.array(offset), radius=radius,
                           seed=int(seed))
        return ScenarioConfig(controller=self.controller, error_model=model,
                              epsilon=EpsilonProvider(self.epsilon),
                              v_desired=self.v_desired, duration=self.duration,
                              control_rate=self.control_rate,
                              truth_dt=self.truth_dt,
                              initial_state=np.array(self.initial_state),
                              pd_gains=self.pd_gains, seed=self.seed)


def _freeze(value):
    if isinstance(value, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


def parse_config(path):
    """Load, default, and validate a run configuration.

    Raises ConfigParseError for malformed JSON or unknown keys (exit 2) and
    ConfigValidationError for semantically invalid values (exit 3).
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigParseError(
            f"malformed JSON in {path} at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}")
    if not isinstance(raw, dict):
        raise ConfigParseError(f"config root must be a JSON object in {path}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigParseError(
            f"unknown config key(s) in {path}: {', '.join(sorted(unknown))}")

    values = {}
    if "segway_params" in raw:
        ppath = raw["segway_params"]
        if not os.path.exists(ppath):
            raise ConfigValidationError(
                f"segway_params file does not exist: {ppath}")
        with open(ppath) as fh:
            try:
                pdata = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigParseError(
                    f"malformed JSON in {ppath} at line {exc.lineno}: {exc.msg}")
        known = {f.name for f in fields(SegwayParams)}
        bad = set(pdata) - known
        if bad:
            raise ConfigParseError(
                f"unknown segway parameter(s): {', '.join(sorted(bad))}")
        try:
            params = SegwayParams(**{k: float(v) for k, v in pdata.items()})
        except ValueError as exc:
            raise ConfigValidationError(f"segway_params: {exc}")
        values["segway_params"] = tuple(sorted(asdict(params).items()))

    if "error_model" in raw:
        em = raw["error_model"]
        bad = set(em) - {"kind", "offset", "radius", "seed"}
        if bad:
            raise ConfigParseError(
                f"unknown error_model key(s): {', '.join(sorted(bad))}")
        kind = em.get("kind", "identity")
        offset = tuple(float(v) for v in em.get("offset", (0.0,) * 4))
        radius = float(em.get("radius", 0.0))
        seed = int(em.get("seed", 0))
        if kind not in ("identity", "constant_bias", "bounded_uniform"):
            raise ConfigValidationError(f"error_model.kind invalid: {kind!r}")
        if len(offset) != 4:
            raise ConfigValidationError("error_model.offset must have 4 entries")
        if radius < 0:
            raise ConfigValidationError("error_model.radius must be nonnegative")
        values["error_model"] = (kind, offset, radius, seed)

    if "synthesis" in raw:
        base = settings_to_dict(SynthesisSettings())
        bad = set(raw["synthesis"]) - set(base)
        if bad:
            raise ConfigParseError(
                f"unknown synthesis key(s): {', '.join(sorted(bad))}")
        base.update(raw["synthesis"])
        try:
            settings = settings_from_dict(base)
            settings.directions_matrix()
        except (ValueError, TypeError) as exc:
            raise ConfigValidationError(f"synthesis: {exc}")
        values["synthesis"] = _freeze(settings_to_dict(settings))

    for key in ("controller", "epsilon", "duration", "control_rate",
                "truth_dt", "seed", "cache", "output_dir"):
        if key in raw:
            values[key] = raw[key]
    for key in ("v_desired", "initial_state", "pd_gains"):
        if key in raw:
            values[key] = _freeze(raw[key])

    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigParseError(f"bad config structure: {exc}")

    # semantic checks, one clear message per offending key
    if cfg.controller not in ("cbf_qp", "bs_qp", "mr_bs_op", "none"):
        raise ConfigValidationError(f"controller invalid: {cfg.controller!r}")
    if not cfg.duration > 0:
        raise ConfigValidationError("duration must be positive")
    if not cfg.control_rate > 0:
        raise ConfigValidationError("control_rate must be positive")
    if not cfg.truth_dt > 0:
        raise ConfigValidationError("truth_dt must be positive")
    if cfg.epsilon < 0:
        raise ConfigValidationError("epsilon must be nonnegative")
    if len(cfg.initial_state) != 4:
        raise ConfigValidationError("initial_state must have 4 entries")
    if len(cfg.pd_gains) != 3:
        raise ConfigValidationError("pd_gains must have 3 entries")
    if not cfg.v_desired or any(len(seg) != 2 for seg in cfg.v_desired):
        raise ConfigValidationError("v_desired must be [[t_from, value], ...]")
    try:
        scenario = cfg.scenario()
    except ValueError as exc:
        raise ConfigValidationError(str(exc))
    if scenario.error_model.kind != "identity":
        try:
            validate_epsilon_pairing(scenario.epsilon, scenario.error_model)
        except ValueError as exc:
            raise ConfigValidationError(f"epsilon: {exc}")
    return cfg


def serialize_config(cfg):
    """Inverse of parse_config up to defaults: a JSON-ready dict."""
    def thaw(value):
        if isinstance(value, tuple):
            if value and isinstance(value[0], tuple) and len(value[0]) == 2 \
                    and isinstance(value[0][0], str):
                return {k: thaw(v) for k, v in value}
            return [thaw(v) for v in value]
        return value

    kind, offset, radius, seed = cfg.error_model
    return {
        "controller": cfg.controller,
        "error_model": {"kind": kind, "offset": list(offset),
                        "radius": radius, "seed": seed},
        "epsilon": cfg.epsilon,
        "v_desired": [list(seg) for seg in cfg.v_desired],
        "duration": cfg.duration,
        "control_rate": cfg.control_rate,
        "truth_dt": cfg.truth_dt,
        "initial_state": list(cfg.initial_state),
        "pd_gains": list(cfg.pd_gains),
        "seed": cfg.seed,
        "synthesis": thaw(cfg.synthesis),
        "cache": cfg.cache,
        "output_dir": cfg.output_dir,
    }


def _load_or_build(cfg, write_cache=True):
    """Use the synthesis cache when it matches the config, else rebuild."""
    params = cfg.params()
    settings = cfg.settings()
    if cfg.cache and os.path.exists(cfg.cache):
        with open(cfg.cache) as fh:
            cached = json.load(fh)
        if cached.get("settings") == settings_to_dict(settings) \
                and cached.get("segway_params") == asdict(params):
            return result_from_dict(cached, params)
    result = build_context(params, settings)
    if cfg.cache and write_cache:
        payload = result_to_dict(result)
        payload["segway_params"] = asdict(params)
        os.makedirs(os.path.dirname(cfg.cache) or ".", exist_ok=True)
        with open(cfg.cache, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return result


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_synthesize(args):
    cfg = parse_config(args[0])
    if cfg.cache is None:
        cfg = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                           "cache": os.path.join(cfg.output_dir, "synthesis.json")})
    result = _load_or_build(cfg)
    print(f"synthesized: mu={result.context.mu:.6g} "
          f"level={result.context.backup_set.level:.6g} "
          f"sup_speed={result.sup_speed:.6g} cache={cfg.cache}")
    return 0


def cmd_simulate(args):
    cfg = parse_config(args[0])
    result = _load_or_build(cfg)
    log = run_scenario(cfg.scenario(), result.context)
    report = evaluate_safety(log)
    os.makedirs(cfg.output_dir, exist_ok=True)
    stem = _stem(args[0])
    csv_path = os.path.join(cfg.output_dir, f"{stem}_log.csv")
    report_path = os.path.join(cfg.output_dir, f"{stem}_report.json")
    log_to_csv(log, csv_path)
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    print(f"log: {csv_path}")
    print(f"report: {report_path}")
    for key, value in report.to_dict().items():
        print(f"  {key}: {value}")
    if log.error:
        return 1
    return 0


def cmd_sweep(args):
    paths = [a for a in args if not a.startswith("--")]
    if not paths:
        raise ConfigParseError("sweep needs a config path")
    cfg = parse_config(paths[0])
    eps_values = []
    parallel = "--parallel" in args
    if "--eps" in args:
        i = args.index("--eps") + 1
        while i < len(args) and not args[i].startswith("--"):
            eps_values.append(float(args[i]))
            i += 1
    if not eps_values:
        raise ConfigValidationError("sweep needs --eps values")
    result = _load_or_build(cfg)
    reports = sweep_epsilon(cfg.scenario(), result.context, eps_values,
                            parallel=parallel)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out = os.path.join(cfg.output_dir, f"{_stem(paths[0])}_sweep.json")
    payload = [{"epsilon": e, **rep.to_dict()} for e, rep in reports]
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    for entry in payload:
        print(f"  eps={entry['epsilon']}: min_h_true={entry['min_h_true']:.6g} "
              f"relaxed={entry['relaxed_tick_count']}")
    print(f"sweep report: {out}")
    return 0


def cmd_lipschitz(args):
    cfg = parse_config(args[0])
    result = _load_or_build(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out = os.path.join(cfg.output_dir, f"{_stem(args[0])}_lipschitz.json")
    with open(out, "w") as fh:
        json.dump(bundle_to_dict(result.context.bundle), fh, indent=2,
                  sort_keys=True)
    print(f"lipschitz bundle: {out}")
    return 0


def _svg_polyline(points, color, dash=None):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"{dash_attr}/>')


def plot_svg(t, x_true, x_est, eps=0.4, x_max=2.0, width=640, height=360):
    """Position-vs-time figure: safe band, true/estimated traces, eps band."""
    t = np.asarray(t, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    x_est = np.asarray(x_est, dtype=float)
    pad = 48
    y_all = np.concatenate([x_true, x_est - eps, x_est + eps, [x_max]])
    y_lo, y_hi = float(np.min(y_all)) - 0.2, float(np.max(y_all)) + 0.2
    t_lo, t_hi = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0

    def sx(tv):
        return pad + (tv - t_lo) / (t_hi - t_lo) * (width - 2 * pad)

    def sy(yv):
        return height - pad - (yv - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    # safe region: positions below x_max
    parts.append(f'<rect x="{sx(t_lo):.2f}" y="{sy(x_max):.2f}" '
                 f'width="{sx(t_hi) - sx(t_lo):.2f}" '
                 f'height="{sy(y_lo) - sy(x_max):.2f}" fill="#d2ecd2" '
                 f'class="safe-band"/>')
    # robustness band around the estimate
    upper = [(sx(tv), sy(xv + eps)) for tv, xv in zip(t, x_est)]
    lower = [(sx(tv), sy(xv - eps)) for tv, xv in zip(t[::-1], x_est[::-1])]
    band = " ".join(f"{x:.2f},{y:.2f}" for x, y in upper + lower)
    parts.append(f'<polygon points="{band}" fill="#c5d8f1" opacity="0.7" '
                 f'class="robustness-band"/>')
    parts.append(f'<line x1="{sx(t_lo):.2f}" y1="{sy(x_max):.2f}" '
                 f'x2="{sx(t_hi):.2f}" y2="{sy(x_max):.2f}" stroke="red"/>')
    parts.append(_svg_polyline([(sx(tv), sy(xv)) for tv, xv in zip(t, x_est)],
                               "#4477cc", dash="6,4"))
    parts.append(_svg_polyline([(sx(tv), sy(xv)) for tv, xv in zip(t, x_true)],
                               "#222222"))
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" '
                 f'text-anchor="middle" font-size="12">time [s]</text>')
    parts.append(f'<text x="14" y="{height / 2:.0f}" font-size="12" '
                 f'transform="rotate(-90 14 {height / 2:.0f})" '
                 f'text-anchor="middle">position [m]</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_plot(args):
    import csv as csv_mod
    paths = [a for a in args if not a.startswith("--")]
    if not paths:
        raise ConfigParseError("plot needs a CSV path")
    eps = 0.4
    out = None
    if "--eps" in args:
        eps = float(args[args.index("--eps") + 1])
    if "--out" in args:
        out = args[args.index("--out") + 1]
    with open(paths[0]) as fh:
        reader = csv_mod.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not rows:
        raise ConfigValidationError("log CSV has no data rows")
    it = header.index("t")
    itrue = header.index("x_true")
    iest = header.index("x_est")
    t = [float(r[it]) for r in rows]
    x_true = [float(r[itrue]) for r in rows]
    x_est = [float(r[iest]) for r in rows]
    svg = plot_svg(t, x_true, x_est, eps=eps)
    out = out or os.path.splitext(paths[0])[0] + ".svg"
    with open(out, "w") as fh:
        fh.write(svg)
    print(f"figure: {out}")
    return 0


_COMMANDS = {"synthesize": cmd_synthesize, "simulate": cmd_simulate,
             "sweep": cmd_sweep, "lipschitz": cmd_lipschitz, "plot": cmd_plot}


def dispatch(argv):
    """Run one subcommand; returns the process exit code."""
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0 if argv else 64
    name, args = argv[0], argv[1:]
    command = _COMMANDS.get(name)
    if command is None:
        sys.stderr.write(f"unknown command: {name}\n{USAGE}")
        return 64
    if not args:
        sys.stderr.write(f"{name} needs a path argument\n{USAGE}")
        return 64
    try:
        return command(args)
    except ConfigParseError as exc:
        sys.stderr.write(f"config parse error: {exc}\n")
        return 2
    except ConfigValidationError as exc:
        sys.stderr.write(f"config validation error: {exc}\n")
        return 3
    except SafeguardError as exc:
        sys.stderr.write(f"error in {name}: {type(exc).__name__}: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(f"error in {name}: {type(exc).__name__}: {exc}\n")
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
