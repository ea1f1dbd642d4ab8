"""Command-line driver: ``simulate``, ``run`` and ``eval``.

Exit codes: 0 success, 1 usage/schema/I-O error, 2 filter divergence or too
few applied updates.

Override precedence for ``run``: command-line flags > config.json > built-in
defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from . import metrics as M
from .filter import FilterConfig, FilterState, initial_state
from .liegroup import group_compose, group_exp
from .simulate import ground_truth, scenario_from_dict, synthesize_imu, synthesize_tracks
from .vio import run_dataset

log = logging.getLogger("lsckf")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
MIN_UPDATE_RATIO = 0.95


class UsageError(Exception):
    pass


# --- simulate -------------------------------------------------------------------


def cmd_simulate(spec_path, out_dir) -> dict:
    spec_path = Path(spec_path)
    try:
        raw = json.loads(spec_path.read_text())
    except OSError as e:
        raise io.ParseError(spec_path, None, f"cannot read: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise io.ParseError(spec_path, e.lineno, f"invalid JSON: {e.msg}") from None
    spec, filter_overrides = scenario_from_dict(raw)
    fc = FilterConfig(sigma_px=spec.sigma_px)
    cfg = io.config_to_dict(spec.camera, spec.noise, fc)
    for k, v in filter_overrides.items():
        cfg[f"filter.{k}"] = v
    _, _, fc = io.config_from_dict(cfg)  # validates the overrides

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (io.IMU_FILE, io.TRACKS_FILE, io.CONFIG_FILE, io.GROUNDTRUTH_FILE)}
    io.write_imu_csv(paths[io.IMU_FILE], synthesize_imu(spec))
    io.write_line_tracks(paths[io.TRACKS_FILE], synthesize_tracks(spec))
    io.write_config(paths[io.CONFIG_FILE], spec.camera, spec.noise, fc)
    gt = [io.TrajectoryRecord(t, x.p, x.R, x.v) for t, x in ground_truth(spec)]
    io.write_trajectory(paths[io.GROUNDTRUTH_FILE], gt)
    return {k: str(v) for k, v in paths.items()}


# --- run ------------------------------------------------------------------------


def perturbed_initial_state(fs: FilterState, seed: int) -> FilterState:
    """Mean drawn from N(mean, S S^T) in the filter's own (left) error convention."""
    rng = np.random.default_rng(seed)
    xi = fs.S @ rng.standard_normal(fs.S.shape[0])
    d = fs.mean.tangent_dim
    mean = group_compose(group_exp(xi[:d], fs.mean.num_lines), fs.mean)
    return replace(fs, mean=mean, bias=fs.bias + xi[d:])


def apply_overrides(fc: FilterConfig, args) -> FilterConfig:
    kw = {}
    if args.max_lines is not None:
        if not 0 <= args.max_lines <= 20:
            raise UsageError("--max-lines must be within 0..20")
        kw["max_lines"] = args.max_lines
    if args.sigma_px is not None:
        if not args.sigma_px > 0:
            raise UsageError("--sigma-px must be positive")
        kw["sigma_px"] = args.sigma_px
    if args.gate_chi2 is not None:
        kw["gate_chi2"] = None if args.gate_chi2 <= 0 else args.gate_chi2
    return replace(fc, **kw)


def cmd_run(dataset_dir, out_dir, args) -> tuple[int, dict]:
    bundle = io.load_bundle(dataset_dir)
    bundle.config = apply_overrides(bundle.config, args)
    if bundle.groundtruth is None:
        log.warning("no %s; initial pose is the identity at rest", io.GROUNDTRUTH_FILE)

    init = None
    if args.seed is not None:
        t0 = bundle.imu[0].t_ns
        ref = min(bundle.groundtruth or [], key=lambda r: abs(r.t_ns - t0), default=None)
        if ref is None:
            raise UsageError("--seed needs groundtruth.csv to draw the initial state around")
        c = bundle.config
        fs0 = initial_state(
            ref.R, ref.v, ref.p,
            sigma_rot=c.init_sigma_rot, sigma_vel=c.init_sigma_vel, sigma_pos=c.init_sigma_pos,
            sigma_bg=c.init_sigma_bg, sigma_ba=c.init_sigma_ba,
        )
        init = perturbed_initial_state(fs0, args.seed)

    result = run_dataset(bundle, update=not args.no_update, initial_state=init)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.csv", "diagnostics": out / "diagnostics.csv"}
    io.write_trajectory(paths["trajectory"], result.trajectory)
    io.write_rows(
        paths["diagnostics"],
        ["t_ns", "active_lines", "measured", "gated", "applied", "initialized", "removed", "trace_P"],
        [
            (d.t_ns, d.active_lines, d.measured, d.gated, int(d.applied), d.initialized, d.removed, d.trace_P)
            for d in result.diagnostics
        ],
    )
    if bundle.groundtruth:
        m = M.evaluate(result.trajectory, bundle.groundtruth, result.body_states or None)
        paths["metrics"] = out / "metrics.json"
        io.write_metrics(
            paths["metrics"],
            {
                "rmse_pos_m": m.rmse_pos,
                "rmse_att_rad": m.rmse_att,
                "nees_mean": m.nees_mean,
                "runtime_s": result.runtime_s,
            },
        )

    code = EXIT_OK
    if result.diverged:
        paths["last_good_state"] = out / "last_good_state.json"
        with open(paths["last_good_state"], "w") as fh:
            json.dump(result.last_good, fh, indent=2)
        log.error("filter diverged: %s", result.error)
        code = EXIT_DIVERGED
    elif not args.no_update and result.update_ratio < MIN_UPDATE_RATIO:
        log.error("only %.1f%% of attempted updates were applied", 100 * result.update_ratio)
        code = EXIT_DIVERGED

    report = {
        "paths": {k: str(v) for k, v in paths.items()},
        "runtime_s": result.runtime_s,
        "frames": len(result.diagnostics),
        "update_ratio": result.update_ratio,
        "diverged": result.diverged,
        "exit_code": code,
    }
    paths["report"] = out / "run_report.json"
    report["paths"]["report"] = str(paths["report"])
    io.write_metrics(paths["report"], report)
    return code, report


# --- eval -----------------------------------------------------------------------


def cmd_eval(est_path, gt_path, out_path, align: bool = False) -> dict:
    start = time.perf_counter()
    est = io.parse_trajectory(est_path)
    gt = io.parse_trajectory(gt_path)
    if align:
        est = M.align_yaw_translation(est, gt)
    m = M.evaluate(est, gt)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _, j = M.match_timestamps([r.t_ns for r in est], [r.t_ns for r in gt])
    doc = {
        "rmse_pos_m": m.rmse_pos,
        "rmse_att_rad": m.rmse_att,
        "nees_mean": m.nees_mean,
        "runtime_s": time.perf_counter() - start,
    }
    io.write_metrics(out, doc)
    err_path = out.with_name(out.stem + "_errors.csv")
    io.write_rows(
        err_path,
        ["t_ns", "pos_err_m", "att_err_rad"],
        [(gt[b].t_ns, float(pe), float(ae)) for b, pe, ae in zip(j, m.pos_series, m.att_series)],
    )
    return {"metrics": str(out), "errors": str(err_path), **doc}


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lsckf", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset from a scenario JSON")
    s.add_argument("spec")
    s.add_argument("out_dir")

    r = sub.add_parser("run", help="run the filter on a dataset directory")
    r.add_argument("dataset")
    r.add_argument("out_dir")
    r.add_argument("--max-lines", type=int)
    r.add_argument("--sigma-px", type=float)
    r.add_argument("--gate-chi2", type=float, help="<= 0 disables gating")
    r.add_argument("--seed", type=int, help="draw the initial state from N(ground truth, P0)")
    r.add_argument("--no-update", action="store_true", help="IMU dead reckoning only")

    e = sub.add_parser("eval", help="compare a trajectory with ground truth")
    e.add_argument("est")
    e.add_argument("gt")
    e.add_argument("out", help="metrics JSON; errors go to <stem>_errors.csv")
    e.add_argument("--align", action="store_true", help="fit yaw and translation first")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(message)s")
    try:
        if args.cmd == "simulate":
            out = cmd_simulate(args.spec, args.out_dir)
            print(json.dumps(out, indent=2))
            return EXIT_OK
        if args.cmd == "run":
            code, report = cmd_run(args.dataset, args.out_dir, args)
            print(json.dumps(report, indent=2))
            return code
        out = cmd_eval(args.est, args.gt, args.out, args.align)
        print(json.dumps(out, indent=2))
        return EXIT_OK
    except (io.ParseError, io.SchemaError, UsageError, M.NoMatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
