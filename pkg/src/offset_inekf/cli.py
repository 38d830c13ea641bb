"""Command line entry point.

Subcommands
-----------
``simulate``
    Write the sensor table of one seeded squat run, ``sensors_<seed>.csv``.
``filter``
    Replay a sensor CSV through one or both filters and write
    ``estimates_<filter>.csv``.
``experiment``
    Run the Monte Carlo study and write ``summary.json`` plus one
    ``trial_<seed>_<filter>.csv`` per trial.
``compare``
    Like ``experiment`` with both filters, plus ``compare.csv`` holding the
    RMSE curves side by side and a table on stdout.

Settings come from an optional TOML file (``--config``) and are overridden by
flags.  Failures exit nonzero with a one-line JSON message on stderr and leave
no output files behind: everything is written to a staging directory first
and moved into ``--out-dir`` only on success.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import NoiseSpec
from .estimators import ContactInEKF, FilterDivergenceError, OffsetInEKF
from .harness import FILTERS, TrialConfig, run_experiment, simulate, write_summary_json
from .simulator import FrameOffsets, MotionProfile, read_sensor_csv, write_sensor_csv

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DIGITS = 9
EXIT_CODES = {"usage": 2, "config": 2, "missing_file": 3, "input": 4, "non_finite": 5, "io": 6}

ESTIMATE_COLUMNS = {
    "proposed": ("t", "vx", "vy", "vz", "px", "py", "pz", "rx", "ry", "rz",
                 "dRx", "dRy", "dRz", "dpx", "dpy", "dpz"),  # fmt: skip
    "baseline": ("t", "vx", "vy", "vz", "px", "py", "pz", "rx", "ry", "rz", "dx", "dy", "dz"),
}
TRIAL_COLUMNS = (
    "t", "vel_err_x", "vel_err_y", "vel_err_z", "roll_err", "pitch_err", "yaw_err",
    "dR_err", "dp_err_x", "dp_err_y", "dp_err_z", "dR_est_x", "dR_est_y", "dR_est_z",
    "dp_est_x", "dp_est_y", "dp_est_z",
)  # fmt: skip


class CliError(Exception):
    """Failure reported to the user with a category and an exit code."""

    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind
        self.message = message

    @property
    def exit_code(self):
        return EXIT_CODES[self.kind]


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one invocation."""

    subcommand: str
    trial: TrialConfig = field(default_factory=TrialConfig)
    trials: int = 50
    filter: str = "both"
    out_dir: str = "."
    input: str | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.filter not in FILTERS + ("both",):
            raise ValueError(f"filter must be one of {FILTERS + ('both',)}, got {self.filter!r}")

    @property
    def filters(self):
        return FILTERS if self.filter == "both" else (self.filter,)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser():
    parser = _Parser(prog="offset-inekf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name, help_text in (
        ("simulate", "write the sensor table of one simulated run"),
        ("filter", "replay a sensor CSV through the filters"),
        ("experiment", "run the Monte Carlo study"),
        ("compare", "run the study with both filters side by side"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML settings file")
        p.add_argument("--seed", type=int, help="seed of the run (first seed of a study)")
        p.add_argument("--trials", type=int, help="number of trials")
        p.add_argument("--filter", choices=FILTERS + ("both",), help="filters to run")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--offset-deg", type=float, help="true offset rotation angle [deg]")
        p.add_argument("--offset-m", type=float, help="true offset distance [m]")
        p.add_argument("--duration", type=float, help="run length [s]")
        p.add_argument("--rate", type=float, help="sample rate [Hz]")
        p.add_argument("--jobs", type=int, help="parallel worker processes")
        if name == "filter":
            p.add_argument("--input", help="sensor CSV to replay")
    return parser


def _section(doc, name):
    value = doc.pop(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"[{name}] must be a table")
    return dict(value)


def _build(cls, values, section):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    return cls(**values)


def load_config(args):
    """Merge the TOML file named by ``args.config`` with the flags."""
    doc = {}
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise CliError("missing_file", f"config file not found: {args.config}")
        try:
            with open(args.config, "rb") as fh:
                doc = tomllib.load(fh)
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise CliError("config", f"{args.config}: {exc}") from None
    try:
        return _resolve(args, doc)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None


def _resolve(args, doc):
    doc = dict(doc)
    profile = _section(doc, "profile")
    offsets = _section(doc, "offsets")
    noises = {k: _section(doc, k) for k in ("sensor_noise", "proposed_noise", "baseline_noise")}
    trial = _section(doc, "trial")
    top = {k: doc.pop(k) for k in ("seed", "trials", "filter", "out_dir", "input", "jobs") if k in doc}
    if doc:
        raise ValueError(f"unknown config keys: {', '.join(sorted(doc))}")

    for key, flag in (("seed", args.seed), ("trials", args.trials), ("filter", args.filter),
                      ("out_dir", args.out_dir), ("jobs", args.jobs),
                      ("input", getattr(args, "input", None))):  # fmt: skip
        if flag is not None:
            top[key] = flag
    if args.rate is not None:
        profile["sample_rate"] = args.rate
    if args.offset_deg is not None:
        offsets["angle_deg"] = args.offset_deg
    if args.offset_m is not None:
        offsets["distance_m"] = args.offset_m

    unknown = sorted(set(offsets) - {"angle_deg", "distance_m"})
    if unknown:
        raise ValueError(f"unknown keys in [offsets]: {', '.join(unknown)}")
    motion = _build(MotionProfile, profile, "profile")
    if args.duration is not None:
        if not args.duration > 0:
            raise ValueError("duration must be positive")
        motion = motion.with_duration(args.duration)
    seed = top.pop("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValueError(f"seed must be a nonnegative integer, got {seed!r}")
    defaults = TrialConfig()
    cfg = replace(
        _build(TrialConfig, trial, "trial"),
        seed=seed,
        profile=motion,
        offsets=FrameOffsets.from_magnitudes(**offsets),
        sensor_noise=_noise(noises["sensor_noise"], defaults.sensor_noise, "sensor_noise"),
        proposed_noise=_noise(noises["proposed_noise"], defaults.proposed_noise, "proposed_noise"),
        baseline_noise=_noise(noises["baseline_noise"], defaults.baseline_noise, "baseline_noise"),
    )
    return RunConfig(subcommand=args.subcommand, trial=cfg, **top)


def _noise(values, default, section):
    names = {f.name for f in fields(NoiseSpec)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    return replace(default, **values)


def _check_finite(table, what, time_column=0):
    bad = ~np.all(np.isfinite(table), axis=1)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        t = table[k, time_column]
        raise CliError("non_finite", f"non-finite value in {what} at step {k} (t = {t:.6g})")


def _write_csv(path, header, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in table:
            writer.writerow([format(x, f".{DIGITS}g") for x in row])


def _trial_table(res):
    return np.column_stack(
        [res.t, res.vel_err, res.rpy_err, res.dR_err, res.dp_err, res.dR_est, res.dp_est]
    )


def cmd_simulate(cfg, stage):
    run = simulate(cfg.trial)
    _check_finite(run.sensors, "simulated sensors")
    write_sensor_csv(os.path.join(stage, f"sensors_{cfg.trial.seed}.csv"), run.sensors, DIGITS)
    print(f"simulated {len(run.sensors)} samples (seed {cfg.trial.seed})")


def cmd_filter(cfg, stage):
    if cfg.input is None:
        raise CliError("config", "filter needs --input (or input in the config file)")
    if not os.path.isfile(cfg.input):
        raise CliError("missing_file", f"input file not found: {cfg.input}")
    try:
        X = read_sensor_csv(cfg.input)
    except ValueError as exc:
        raise CliError("input", str(exc)) from None
    t = cfg.trial
    for name in cfg.filters:
        if name == "proposed":
            n = t.proposed_noise
            est = OffsetInEKF(
                sd_accel=n.sd_accel, sd_gyro=n.sd_gyro, sd_kin_meas=n.sd_kin_meas,
                sd_offset_p=n.sd_offset_p, sd_offset_R=n.sd_offset_R,
                rate_halfwidth=t.rate_halfwidth, rate_bias_correction=t.rate_bias_correction,
                excitation_gate=t.excitation_gate,
            )  # fmt: skip
        else:
            n = t.baseline_noise
            est = ContactInEKF(
                sd_accel=n.sd_accel, sd_gyro=n.sd_gyro, sd_kin_meas=n.sd_kin_meas,
                sd_contact=n.sd_contact,
            )  # fmt: skip
        try:
            est.fit(X)
        except FilterDivergenceError as exc:
            raise CliError("non_finite", f"{name} filter: {exc}") from None
        except ValueError as exc:
            raise CliError("input", f"{cfg.input}: {exc}") from None
        _check_finite(est.estimates_, f"{name} estimates")
        _write_csv(os.path.join(stage, f"estimates_{name}.csv"), ESTIMATE_COLUMNS[name], est.estimates_)
        print(f"{name}: {len(X)} rows, {est.n_updates_} updates, {est.n_rejected_} rejected")


def _study(cfg, stage, filters):
    summary = run_experiment(
        cfg.trials, cfg.trial, filters, first_seed=cfg.trial.seed, n_jobs=cfg.jobs
    )
    for name in filters:
        for res in summary.trials[name]:
            table = _trial_table(res)
            _check_finite(table, f"trial {res.seed} ({name})")
            _write_csv(os.path.join(stage, f"trial_{res.seed}_{name}.csv"), TRIAL_COLUMNS, table)
    write_summary_json(summary, os.path.join(stage, "summary.json"))
    return summary


def _report(summary):
    for name, s in summary.filters.items():
        med = s.median_convergence
        print(f"{name}: median convergence {med:.3f} s, final velocity RMSE "
              f"{s.rmse_vel[-1]:.4f} m/s, diverged {s.n_diverged}/{s.n_trials}")  # fmt: skip
    if summary.speedup is not None:
        print(f"speedup (baseline / proposed median): {summary.speedup:.3f}")


def cmd_experiment(cfg, stage):
    _report(_study(cfg, stage, cfg.filters))


def cmd_compare(cfg, stage):
    summary = _study(cfg, stage, FILTERS)
    P, B = summary.filters["proposed"], summary.filters["baseline"]
    header = ("t", "rmse_vel_proposed", "rmse_vel_baseline", "rmse_roll_proposed",
              "rmse_roll_baseline", "rmse_pitch_proposed", "rmse_pitch_baseline")  # fmt: skip
    table = np.column_stack(
        [P.t, P.rmse_vel, B.rmse_vel, P.rmse_rpy[:, 0], B.rmse_rpy[:, 0],
         P.rmse_rpy[:, 1], B.rmse_rpy[:, 1]]
    )  # fmt: skip
    _check_finite(table, "RMSE curves")
    _write_csv(os.path.join(stage, "compare.csv"), header, table)
    rows = [
        ("median convergence [s]", P.median_convergence, B.median_convergence),
        ("final velocity RMSE [m/s]", P.rmse_vel[-1], B.rmse_vel[-1]),
        ("final roll RMSE [deg]", np.degrees(P.rmse_rpy[-1, 0]), np.degrees(B.rmse_rpy[-1, 0])),
        ("final pitch RMSE [deg]", np.degrees(P.rmse_rpy[-1, 1]), np.degrees(B.rmse_rpy[-1, 1])),
        ("diverged trials", P.n_diverged, B.n_diverged),
    ]
    print(f"{'':28s}{'proposed':>12s}{'baseline':>12s}")
    for label, a, b in rows:
        print(f"{label:28s}{a:12.4g}{b:12.4g}")
    print(f"speedup (baseline / proposed median): {summary.speedup:.3f}")


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "experiment": cmd_experiment,
    "compare": cmd_compare,
}


def _commit(stage, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(os.listdir(stage)):
        shutil.move(os.path.join(stage, name), os.path.join(out_dir, name))


def run(config):
    """Execute a resolved :class:`RunConfig`; returns the exit status."""
    stage = tempfile.mkdtemp(prefix="offset-inekf-")
    try:
        COMMANDS[config.subcommand](config, stage)
        _commit(stage, config.out_dir)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return run(load_config(args))
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": exc.message}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
