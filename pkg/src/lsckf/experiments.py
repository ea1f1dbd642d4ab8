"""Seeded closed-loop trials on simulated data, shared by scripts/ and the tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chi2

from .filter import FilterConfig, initial_state
from .io import DatasetBundle, TrajectoryRecord
from .liegroup import group_compose, group_exp
from .metrics import evaluate
from .simulate import ScenarioSpec, ground_truth, synthesize_imu, synthesize_tracks
from .vio import RunResult, run_dataset

BODY_DIM = 9


def simulated_bundle(spec: ScenarioSpec, cfg: FilterConfig | None = None) -> DatasetBundle:
    cfg = cfg or FilterConfig(sigma_px=spec.sigma_px)
    gt = [TrajectoryRecord(t, x.p, x.R, x.v) for t, x in ground_truth(spec)]
    return DatasetBundle(synthesize_imu(spec), synthesize_tracks(spec), spec.camera, spec.noise, cfg, gt)


def sampled_initial_state(bundle: DatasetBundle, seed: int):
    """Initial state whose mean is drawn from N(ground truth, P0)."""
    c = bundle.config
    g = bundle.groundtruth[0]
    fs = initial_state(
        g.R, g.v, g.p,
        sigma_rot=c.init_sigma_rot, sigma_vel=c.init_sigma_vel, sigma_pos=c.init_sigma_pos,
        sigma_bg=c.init_sigma_bg, sigma_ba=c.init_sigma_ba,
    )
    xi = fs.S @ np.random.default_rng(seed).standard_normal(fs.S.shape[0])
    d = fs.mean.tangent_dim
    return replace(fs, mean=group_compose(group_exp(xi[:d], 0), fs.mean), bias=fs.bias + xi[d:])


@dataclass
class Trial:
    seed: int
    final_err: float
    final_err_dr: float
    rmse_pos: float
    rmse_att: float
    nees_mean: float
    max_trace_P: float
    update_ratio: float
    finite: bool
    runtime_s: float
    result: RunResult | None = None


def closed_loop_trial(seed: int, duration: float = 60.0, sample_init: bool = False, keep: bool = False) -> Trial:
    """Filter and dead reckoning on the same simulated circle bundle."""
    spec = ScenarioSpec(family="circle", duration=duration, seed=seed)
    bundle = simulated_bundle(spec)
    init = sampled_initial_state(bundle, 10_000 + seed) if sample_init else None
    res = run_dataset(bundle, initial_state=init)
    dr = run_dataset(bundle, update=False, initial_state=init)
    gt_end = bundle.groundtruth[-1]
    m = evaluate(res.trajectory, bundle.groundtruth, res.body_states)
    finite = not res.diverged and all(np.all(np.isfinite(r.p)) for r in res.trajectory)
    return Trial(
        seed,
        float(np.linalg.norm(res.trajectory[-1].p - gt_end.p)),
        float(np.linalg.norm(dr.trajectory[-1].p - gt_end.p)),
        m.rmse_pos,
        m.rmse_att,
        m.nees_mean if m.nees_mean is not None else float("nan"),
        max((d.trace_P for d in res.diagnostics), default=0.0),
        res.update_ratio,
        finite,
        res.runtime_s,
        res if keep else None,
    )


def anees_interval(runs: int, dim: int = BODY_DIM, level: float = 0.95):
    """Two-sided interval for the run-averaged NEES of a consistent filter."""
    a = (1 - level) / 2
    return chi2.ppf(a, dim * runs) / runs, chi2.ppf(1 - a, dim * runs) / runs
