"""Experiment runner: config parsing, subcommands, sweeps, file emission.

Configs are flat `key = value` text files; unknown keys are hard errors so a
typo cannot silently change an experiment.  Every run echoes its fully
resolved configuration into the output directory, and outputs are
deterministic given the config and seed.  Exit codes: 0 success, 1 usage or
configuration error, 2 numerical-contract failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
from dataclasses import dataclass, fields, replace

from .annealer import AnnealSchedule, anneal
from .baselines import linear_scheme, projection_baseline_2to1, resolve_lambda
from .errors import AnalogMdError, ConfigurationError
from .md2to1 import (
    anneal_2to1,
    build_source_2d_grid,
    evaluate_with_optimal_decoders_2to1,
    format_mapping_2d,
    parse_mapping_2d,
)
from .numerics import build_source_grid
from .opta import OptaQuery, opta_min_cost
from .system import (
    Mode,
    SystemConfig,
    evaluate_with_optimal_decoders,
    format_mapping,
    format_metrics,
    parse_mapping,
)

_MODE_DEFAULTS = {
    Mode.ONE_TO_ONE: {"source_points": 401, "source_half_range": 5.0,
                      "channel_points": 129, "model_count": 16, "beta": 1.0},
    Mode.TWO_TO_ONE: {"source_points": 61, "source_half_range": 4.0,
                      "channel_points": 101, "model_count": 24, "beta": 0.5},
}


@dataclass
class RunConfig:
    source_variance: float = 1.0
    noise_variance_1: float = 1.0
    noise_variance_2: float = 1.0
    epsilon: float = 0.01
    lam: float = 0.0
    mode: Mode = Mode.ONE_TO_ONE
    power_target: float | None = None
    source_points: int | None = None
    source_half_range: float | None = None
    channel_points: int | None = None
    model_count: int | None = None
    update_steps: int = 4
    t_init_scale: float = 1.0
    alpha: float = 0.95
    t_min_ratio: float = 1e-5
    max_outer: int = 400
    inner_tol: float = 1e-6
    inner_max: int = 200
    restarts: int = 4
    seed: int = 0
    sweep_epsilons: tuple = ()
    sweep_csnrs: tuple = ()
    figures: bool = True

    def resolved(self) -> "RunConfig":
        d = _MODE_DEFAULTS[self.mode]
        out = replace(self)
        for key in ("source_points", "source_half_range", "channel_points", "model_count"):
            if getattr(out, key) is None:
                setattr(out, key, d[key])
        return out

    def system(self) -> SystemConfig:
        return SystemConfig(source_variance=self.source_variance,
                            noise_variance_1=self.noise_variance_1,
                            noise_variance_2=self.noise_variance_2,
                            epsilon=self.epsilon, lam=self.lam, mode=self.mode,
                            power_target=self.power_target)

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(t_init_scale=self.t_init_scale, alpha=self.alpha,
                              t_min_ratio=self.t_min_ratio, max_outer=self.max_outer,
                              inner_tol=self.inner_tol, inner_max=self.inner_max,
                              restarts=self.restarts)

    @property
    def beta(self) -> float:
        return _MODE_DEFAULTS[self.mode]["beta"]


def _parse_bool(raw: str, lineno: int) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"config: line {lineno}: expected a boolean, got '{raw}'")


def _parse_float_list(raw: str, lineno: int) -> tuple:
    try:
        return tuple(float(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConfigurationError(f"config: line {lineno}: bad number list '{raw}'") from None


_KEY_PARSERS = {
    "source_variance": float, "noise_variance_1": float, "noise_variance_2": float,
    "epsilon": float, "lambda": float, "power_target": float, "csnr_db": float,
    "source_points": int, "source_half_range": float, "channel_points": int,
    "model_count": int, "update_steps": int,
    "t_init_scale": float, "alpha": float, "t_min_ratio": float,
    "max_outer": int, "inner_tol": float, "inner_max": int, "restarts": int,
    "seed": int, "mode": str, "sweep_epsilons": None, "sweep_csnrs": None,
    "figures": None,
}


def parse_config_text(text: str) -> RunConfig:
    """Strict parser for the flat key-value config format."""
    values: dict = {}
    csnr_db = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"config: line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEY_PARSERS:
            raise ConfigurationError(f"config: line {lineno}: unknown key '{key}'")
        if key in values or (key == "csnr_db" and csnr_db is not None):
            raise ConfigurationError(f"config: line {lineno}: duplicate key '{key}'")
        if key == "mode":
            try:
                values["mode"] = Mode(raw)
            except ValueError:
                raise ConfigurationError(
                    f"config: line {lineno}: mode must be '1to1' or '2to1', got '{raw}'"
                ) from None
        elif key == "figures":
            values["figures"] = _parse_bool(raw, lineno)
        elif key in ("sweep_epsilons", "sweep_csnrs"):
            values[key] = _parse_float_list(raw, lineno)
        elif key == "csnr_db":
            csnr_db = float(raw)
        elif key == "lambda":
            try:
                values["lam"] = float(raw)
            except ValueError:
                raise ConfigurationError(f"config: line {lineno}: bad number '{raw}'") from None
        else:
            parser = _KEY_PARSERS[key]
            try:
                values[key] = parser(raw)
            except ValueError:
                raise ConfigurationError(
                    f"config: line {lineno}: bad value '{raw}' for '{key}'") from None
    if csnr_db is not None:
        if "power_target" in values:
            raise ConfigurationError("config: set either power_target or csnr_db, not both")
        values["power_target"] = 10.0 ** (csnr_db / 10.0)
    return RunConfig(**values)


def load_config(path: str | None, seed: int | None, mode: str | None) -> RunConfig:
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                rc = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config '{path}': {exc}") from None
    else:
        rc = RunConfig()
    if seed is not None:
        rc.seed = seed
    if mode is not None:
        rc.mode = Mode(mode)
    rc = rc.resolved()
    rc.system()  # validate the physical parameters early
    return rc


def format_config(rc: RunConfig) -> str:
    rc = rc.resolved()
    lines = []
    for f in fields(rc):
        value = getattr(rc, f.name)
        if value is None:
            continue
        key = "lambda" if f.name == "lam" else f.name
        if isinstance(value, Mode):
            value = value.value
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = f"{value:.17g}"
        elif isinstance(value, tuple):
            if not value:
                continue
            value = ",".join(f"{v:.17g}" for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_atomic(path: str, text: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _echo_config(rc: RunConfig, out_dir: str) -> None:
    write_atomic(os.path.join(out_dir, "config_echo.txt"), format_config(rc))


def format_trace(trace) -> str:
    lines = ["step,temperature,free_energy,cost_j,entropy"]
    rows = zip(trace.temperature, trace.free_energy, trace.cost_j, trace.entropy)
    for step, (t, f, j, h) in enumerate(rows):
        lines.append(f"{step},{t:.17g},{f:.17g},{j:.17g},{h:.17g}")
    return "\n".join(lines) + "\n"


OPTA_HEADER = "epsilon,d1,d2,d0,nu,d_total,snr_db"
SWEEP_HEADER = "epsilon,snr_opta,snr_linear,snr_optimized,d0,d1,d2,p1,p2"


def _opta_row(eps: float, point) -> str:
    return (f"{eps:.17g},{point.d1:.17g},{point.d2:.17g},{point.d0:.17g},"
            f"{point.nu:.17g},{point.d_total:.17g},{point.snr_db:.17g}")


def _require_power(rc: RunConfig) -> float:
    if rc.power_target is None:
        raise ConfigurationError(
            "this command needs a power: set power_target or csnr_db in the config")
    return rc.power_target


def run_opta(rc: RunConfig, out_dir: str) -> str:
    power = _require_power(rc)
    cfg = rc.system()
    eps_list = rc.sweep_epsilons or (rc.epsilon,)
    rows = [OPTA_HEADER]
    for eps in eps_list:
        q = OptaQuery(p1=power, p2=power, beta1=rc.beta, beta2=rc.beta,
                      sigma2=cfg.source_variance, epsilon=eps)
        rows.append(_opta_row(eps, opta_min_cost(q)))
    path = write_atomic(os.path.join(out_dir, "opta.csv"), "\n".join(rows) + "\n")
    _echo_config(rc, out_dir)
    return path


def run_linear(rc: RunConfig, out_dir: str) -> str:
    power = _require_power(rc)
    cfg = rc.system()
    grid = build_source_grid(rc.source_points, rc.source_half_range, cfg.source_variance)
    cfg = resolve_lambda(cfg, grid)
    result = linear_scheme(cfg, power, power, grid=grid,
                           n_channel_points=rc.channel_points)
    path = write_atomic(os.path.join(out_dir, "metrics.txt"),
                        format_metrics(result.metrics))
    write_atomic(os.path.join(out_dir, "mapping.csv"), format_mapping(result.mapping))
    _echo_config(rc, out_dir)
    return path


def _optimize(rc: RunConfig):
    cfg = rc.system()
    schedule = rc.schedule()
    if rc.mode is Mode.ONE_TO_ONE:
        return anneal(cfg, schedule, seed=rc.seed, source_points=rc.source_points,
                      source_half_range=rc.source_half_range,
                      channel_points=rc.channel_points, model_count=rc.model_count,
                      update_steps=rc.update_steps)
    return anneal_2to1(cfg, schedule, seed=rc.seed, source_points=rc.source_points,
                       source_half_range=rc.source_half_range,
                       channel_points=rc.channel_points, model_count=rc.model_count,
                       update_steps=rc.update_steps)


def run_optimize(rc: RunConfig, out_dir: str) -> str:
    mapping, metrics, trace = _optimize(rc)
    if rc.mode is Mode.ONE_TO_ONE:
        write_atomic(os.path.join(out_dir, "mapping.csv"), format_mapping(mapping))
    else:
        write_atomic(os.path.join(out_dir, "mapping.csv"), format_mapping_2d(mapping))
    path = write_atomic(os.path.join(out_dir, "metrics.txt"), format_metrics(metrics))
    write_atomic(os.path.join(out_dir, "trace.csv"), format_trace(trace))
    _echo_config(rc, out_dir)
    if rc.figures:
        from .figures import render_optimize_report
        render_optimize_report(out_dir, mapping, metrics, trace)
    return path


def run_evaluate(mapping_path: str, rc: RunConfig, out_dir: str) -> str:
    cfg = rc.system()
    try:
        with open(mapping_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read mapping '{mapping_path}': {exc}") from None
    if rc.mode is Mode.ONE_TO_ONE:
        grid = build_source_grid(rc.source_points, rc.source_half_range,
                                 cfg.source_variance)
        mapping = parse_mapping(text, grid)
        metrics = evaluate_with_optimal_decoders(mapping, cfg, rc.channel_points)
    else:
        grid2d = build_source_2d_grid(rc.source_points, rc.source_half_range,
                                      cfg.source_variance)
        mapping = parse_mapping_2d(text, grid2d)
        metrics = evaluate_with_optimal_decoders_2to1(mapping, cfg, rc.channel_points)
    path = write_atomic(os.path.join(out_dir, "metrics.txt"), format_metrics(metrics))
    _echo_config(rc, out_dir)
    if rc.figures:
        from .figures import render_optimize_report
        render_optimize_report(out_dir, mapping, metrics, None)
    return path


def _eps_dir_name(eps: float) -> str:
    return f"eps_{eps:g}".replace(".", "p")


def run_sweep(rc: RunConfig, out_dir: str) -> str:
    """Per failure probability: optimize, linear reference and bound; one row
    and one subdirectory of artifacts per point."""
    power = _require_power(rc)
    if not rc.sweep_epsilons:
        raise ConfigurationError("sweep needs a non-empty sweep_epsilons list")
    cfg_template = rc.system()
    rows = [SWEEP_HEADER]
    row_dicts = []
    for eps in rc.sweep_epsilons:
        point_rc = replace(rc, epsilon=eps, sweep_epsilons=())
        point_dir = os.path.join(out_dir, _eps_dir_name(eps))
        run_optimize(point_rc, point_dir)
        metrics = _read_metrics(os.path.join(point_dir, "metrics.txt"))
        lin_cfg = SystemConfig(source_variance=cfg_template.source_variance,
                               noise_variance_1=cfg_template.noise_variance_1,
                               noise_variance_2=cfg_template.noise_variance_2,
                               epsilon=eps, lam=metrics.lam, mode=rc.mode,
                               power_target=power)
        if rc.mode is Mode.ONE_TO_ONE:
            grid = build_source_grid(rc.source_points, rc.source_half_range,
                                     cfg_template.source_variance)
            lin = linear_scheme(lin_cfg, power, power, grid=grid,
                                n_channel_points=rc.channel_points).metrics
        else:
            _m, lin = projection_baseline_2to1(lin_cfg, power, rc.source_points,
                                               rc.source_half_range, rc.channel_points)
        write_atomic(os.path.join(point_dir, "baseline_metrics.txt"), format_metrics(lin))
        q = OptaQuery(p1=max(metrics.p1, 1e-12), p2=max(metrics.p2, 1e-12),
                      beta1=rc.beta, beta2=rc.beta,
                      sigma2=cfg_template.source_variance, epsilon=eps)
        bound = opta_min_cost(q)
        row = {"epsilon": eps, "snr_opta": bound.snr_db, "snr_linear": lin.snr_db,
               "snr_optimized": metrics.snr_db, "d0": metrics.d0, "d1": metrics.d1,
               "d2": metrics.d2, "p1": metrics.p1, "p2": metrics.p2}
        row_dicts.append(row)
        rows.append(",".join(f"{row[k]:.17g}" for k in SWEEP_HEADER.split(",")))
    path = write_atomic(os.path.join(out_dir, "sweep.csv"), "\n".join(rows) + "\n")
    _echo_config(rc, out_dir)
    if rc.figures:
        from .figures import plot_sweep
        plot_sweep(row_dicts, os.path.join(out_dir, "sweep.png"))
    return path


def _read_metrics(path: str):
    from .system import parse_metrics
    with open(path, "r", encoding="utf-8") as fh:
        return parse_metrics(fh.read())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="analogmd",
                     description="Design and evaluate zero-delay analog "
                                 "multiple-description mappings.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("opta", "tabulate the information-theoretic bound"),
                            ("linear", "evaluate the linear reference scheme"),
                            ("optimize", "anneal an encoder pair"),
                            ("evaluate", "evaluate a mapping file"),
                            ("sweep", "optimize/linear/bound per failure probability")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="64-bit run seed")
        p.add_argument("--out", type=str, default=".", help="output directory")
        p.add_argument("--mode", type=str, default=None, choices=["1to1", "2to1"])
        if name == "evaluate":
            p.add_argument("mapping", type=str, help="mapping csv to evaluate")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        rc = load_config(args.config, args.seed, args.mode)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "opta":
            run_opta(rc, args.out)
        elif args.command == "linear":
            run_linear(rc, args.out)
        elif args.command == "optimize":
            run_optimize(rc, args.out)
        elif args.command == "evaluate":
            run_evaluate(args.mapping, rc, args.out)
        elif args.command == "sweep":
            run_sweep(rc, args.out)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AnalogMdError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
