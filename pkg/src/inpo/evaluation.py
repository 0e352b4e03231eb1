"""Quantitative evaluation: win rates, inversion round trips, a reference
ODE integrator, and report emission.

Win rates feed both compared models the same initial latent per trial, which
keeps the comparison semantics while cutting variance; ties count one half so
identical models score exactly 0.5.

The reference integrator is classical fourth-order Runge-Kutta on the
reverse-process ODE in the rescaled variable, integrating over the noise
level with the timestep recovered by monotone interpolation of the schedule.
It shares nothing with the product sampler beyond the noise prediction and
schedule lookups, and exists only as a test oracle.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import RewardSpec, score
from .denoiser import NULL_CONDITION, predict_noise
from .errors import InvalidArgument, NumericError
from .sampler import SamplerConfig, ddim_invert, ddim_sample
from .schedule import NoiseSchedule, check_timestep


@dataclass
class EvalReport:
    win_rate: float = 0.5
    n_trials: int = 0
    mean_reward_a: float = 0.0
    mean_reward_b: float = 0.0
    median_reward_a: float = 0.0
    median_reward_b: float = 0.0
    roundtrip_errors: dict = field(default_factory=dict)  # n -> mean error
    roundtrip_std: dict = field(default_factory=dict)  # n -> std error of mean
    wall_times: dict = field(default_factory=dict)  # config id -> seconds
    seeds: dict = field(default_factory=dict)
    trials: list = field(default_factory=list)  # (trial, condition, r_a, r_b, outcome)


def win_rate(model_a, model_b, s: NoiseSchedule, spec: RewardSpec, conditions,
             n_trials: int, sampler_cfg: SamplerConfig, seed: int) -> EvalReport:
    """Fraction of shared-latent trials in which A's generation scores higher.

    Per trial one condition and one initial latent are drawn; both models
    sample deterministically from that latent. Ties count 0.5.
    """
    if n_trials < 1:
        raise InvalidArgument("n_trials must be >= 1")
    conditions = np.asarray(list(conditions), dtype=np.int64)
    dim = model_a.arch.input_dim if hasattr(model_a, "arch") else 2
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE7A1]))
    cond_idx = rng.integers(0, len(conditions), size=n_trials)
    cond = conditions[cond_idx]
    latents = rng.standard_normal((n_trials, dim))

    xa = np.empty_like(latents)
    xb = np.empty_like(latents)
    for c in np.unique(cond):
        m = cond == c
        xa[m] = ddim_sample(model_a, s, latents[m], sampler_cfg, int(c))
        xb[m] = ddim_sample(model_b, s, latents[m], sampler_cfg, int(c))

    ra = np.array([score(spec, xa[i], int(cond[i])) for i in range(n_trials)])
    rb = np.array([score(spec, xb[i], int(cond[i])) for i in range(n_trials)])
    outcome = np.where(ra > rb, 1.0, np.where(ra < rb, 0.0, 0.5))
    return EvalReport(
        win_rate=float(outcome.mean()),
        n_trials=n_trials,
        mean_reward_a=float(ra.mean()),
        mean_reward_b=float(rb.mean()),
        median_reward_a=float(np.median(ra)),
        median_reward_b=float(np.median(rb)),
        seeds={"seed": int(seed)},
        trials=[
            (i, int(cond[i]), float(ra[i]), float(rb[i]), float(outcome[i]))
            for i in range(n_trials)
        ],
    )


def roundtrip_errors(model, s: NoiseSchedule, samples, t_target: int, n: int,
                     conditions=None, guidance_w: float = 0.0) -> np.ndarray:
    """Per-sample ||sample_back(invert(x0)) - x0|| at one inversion step count."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    c = NULL_CONDITION if conditions is None else conditions
    res = ddim_invert(model, s, samples, t_target, n, c, guidance_w)
    cfg = SamplerConfig(num_steps=n, guidance_w=guidance_w, t_start=t_target, t_end=0)
    back = ddim_sample(model, s, res.x_t, cfg, c)
    return np.linalg.norm(back - samples, axis=1)


def inversion_roundtrip(model, s: NoiseSchedule, samples, t_target: int, n_grid,
                        conditions=None, guidance_w: float = 0.0) -> dict[int, float]:
    """Mean round-trip error for each inversion step count in ``n_grid``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise InvalidArgument("samples must be nonempty")
    return {
        int(n): float(roundtrip_errors(model, s, samples, t_target, int(n),
                                       conditions, guidance_w).mean())
        for n in n_grid
    }


def oracle_ode_integrate(model, s: NoiseSchedule, x, t_from: int, t_to: int,
                         steps: int, c=NULL_CONDITION, guidance_w: float = 0.0) -> np.ndarray:
    """Reference RK4 integration of the reverse-process ODE between two grid
    times; direction follows the endpoints. Test oracle only."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    t_from = int(check_timestep(s, t_from))
    t_to = int(check_timestep(s, t_to))
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    xbar = np.atleast_2d(x) / np.sqrt(s.alpha_bar[t_from])

    sig_a, sig_b = s.sigma[t_from], s.sigma[t_to]
    t_grid = np.arange(s.T + 1, dtype=np.float64)

    def t_of_sigma(sig):
        return np.interp(sig, s.sigma, t_grid)

    def f(sig, state):
        t_cont = t_of_sigma(sig)
        return predict_noise(model, state / np.sqrt(sig**2 + 1.0), t_cont, c, guidance_w)

    h = (sig_b - sig_a) / steps
    sig = sig_a
    for k in range(steps):
        k1 = f(sig, xbar)
        k2 = f(sig + h / 2, xbar + (h / 2) * k1)
        k3 = f(sig + h / 2, xbar + (h / 2) * k2)
        k4 = f(sig + h, xbar + h * k3)
        xbar = xbar + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        sig += h
        if not np.all(np.isfinite(xbar)):
            raise NumericError(f"non-finite oracle state at step {k}")
    out = xbar * np.sqrt(s.alpha_bar[t_to])
    return out[0] if squeeze else out


def emit_report(report: EvalReport, dir_path) -> None:
    """Write report.json plus flat CSVs (win_rate.csv, roundtrip.csv, timing.csv)."""
    os.makedirs(dir_path, exist_ok=True)
    payload = {
        "win_rate": report.win_rate,
        "n_trials": report.n_trials,
        "mean_reward_a": report.mean_reward_a,
        "mean_reward_b": report.mean_reward_b,
        "median_reward_a": report.median_reward_a,
        "median_reward_b": report.median_reward_b,
        "roundtrip_errors": {str(k): v for k, v in report.roundtrip_errors.items()},
        "roundtrip_std": {str(k): v for k, v in report.roundtrip_std.items()},
        "wall_times": {str(k): v for k, v in report.wall_times.items()},
        "seeds": report.seeds,
    }
    with open(os.path.join(dir_path, "report.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(dir_path, "win_rate.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "condition", "reward_a", "reward_b", "outcome"])
        for row in report.trials:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4]])
    with open(os.path.join(dir_path, "roundtrip.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "mean_err", "std_err"])
        for n in sorted(report.roundtrip_errors):
            w.writerow([n, repr(report.roundtrip_errors[n]),
                        repr(report.roundtrip_std.get(n, 0.0))])
    with open(os.path.join(dir_path, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "seconds"])
        for k in sorted(report.wall_times):
            w.writerow([k, repr(report.wall_times[k])])


def parse_report(dir_path) -> dict:
    with open(os.path.join(dir_path, "report.json")) as fh:
        return json.load(fh)
