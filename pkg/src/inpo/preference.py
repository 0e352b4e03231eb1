"""Training objectives.

Three losses share one pairwise core:

  - the standard denoising objective (pretraining, SFT baseline),
  - the forward-noising preference loss (the DPO baseline), and
  - the inversion preference loss, which regresses the model toward the
    target tau = (x0_t - x0) / sigma_t + delta_t at latents recovered by
    inversion instead of drawn from the forward process.

All preference losses take the form -log sigmoid(-beta * w(t) * D) with D the
difference of four squared prediction errors (winner/loser under the trained
and the frozen reference model). The pairwise core accepts either plain
parameters or tape parameters; reference-model terms are always computed
outside the tape, so the reference never receives gradient.

Delta strategies decide how the noise estimate paired with a clean sample is
produced: "inversion" runs the sampler's inversion, "gaussian" draws i.i.d.
noise (which reduces the loss exactly to the DPO baseline), and
"fixed_point" solves the self-consistency equation for the noise directly by
damped iteration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Var, softplus
from .denoiser import DenoiserParams, TapeParams, _cond_rows, eps_forward, predict_noise
from .errors import InvalidArgument, NumericError
from .sampler import ddim_invert, reconstruct_xt
from .schedule import NoiseSchedule, check_timestep, forward_diffuse

DELTA_KINDS = ("inversion", "gaussian", "fixed_point")


@dataclass(frozen=True)
class DeltaStrategy:
    kind: str
    n: int = 10
    guidance_w_inv: float = 0.0
    max_iters: int = 50
    tol: float = 1e-8
    damping: float = 1.0

    def __post_init__(self):
        if self.kind not in DELTA_KINDS:
            raise InvalidArgument(f"unknown delta strategy {self.kind!r}")
        if self.n < 1:
            raise InvalidArgument("inversion step count must be >= 1")
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if self.tol <= 0:
            raise InvalidArgument("tol must be positive")
        if not (0 < self.damping <= 1):
            raise InvalidArgument("damping must be in (0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    sigmoid_arg: float
    term_w_theta: float
    term_w_ref: float
    term_l_theta: float
    term_l_ref: float
    t: int


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def sft_loss(model, s: NoiseSchedule, batch, t_draws, eps_draws) -> float:
    """Mean over the batch of w(t) * ||eps_hat(noised x0, t, c) - eps||^2."""
    x0, c = batch
    x0 = _as_rows(x0)
    if x0.shape[0] == 0:
        raise InvalidArgument("empty batch")
    t = np.broadcast_to(np.asarray(t_draws), (x0.shape[0],))
    eps = _as_rows(eps_draws)
    if eps.shape != x0.shape:
        raise InvalidArgument("eps draws must be congruent with the batch")
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (x0.shape[0],))
    rows = _cond_rows(c, _num_conditions(model))
    x_t = forward_diffuse(s, x0, t, eps)
    out = sft_terms(model, s, x_t, t, c, rows, eps)
    return float(out.data if isinstance(out, Var) else out)


def sft_terms(model, s: NoiseSchedule, x_t, t, c, rows, eps):
    """Tape-compatible body of the denoising objective; mean over the batch."""
    pred = _eval_eps(model, x_t, t, c, rows)
    d = pred - eps
    per = (d * d).sum(axis=1)
    w = s.loss_weight[np.asarray(t)]
    return (per * w).mean()


def _num_conditions(model) -> int:
    if isinstance(model, (DenoiserParams, TapeParams)):
        return model.arch.num_conditions
    return 1 << 30  # probe callables accept any id


def _eval_eps(model, x, t, c, rows):
    """Conditional prediction for params, tape params, or probe callables."""
    if isinstance(model, (DenoiserParams, TapeParams)):
        return eps_forward(model, x, t, rows)
    if callable(model):
        return np.asarray(model(x, t, c, 1.0), dtype=np.float64)
    raise InvalidArgument(f"model must be parameters or a callable, got {type(model)}")


def solve_delta_fixed_point(model, s: NoiseSchedule, x0_t, t, c, cfg: DeltaStrategy, rng):
    """Damped iteration for the noise consistent with a denoised estimate.

    Iterates delta <- (1 - damping) * delta + damping * eps_hat(lift(delta))
    from a standard-normal start, per row, freezing rows whose residual
    ||delta - eps_hat|| drops to tol. Returns (delta, converged, residual).
    """
    x0a, squeeze = (x0_t[None, :], True) if np.ndim(x0_t) == 1 else (np.asarray(x0_t, float), False)
    B = x0a.shape[0]
    tt = np.broadcast_to(np.asarray(check_timestep(s, t, min_t=1)), (B,))
    ab = s.alpha_bar[tt][:, None]
    sq_ab, sq_1ab = np.sqrt(ab), np.sqrt(1.0 - ab)

    delta = rng.standard_normal(x0a.shape)
    converged = np.zeros(B, dtype=bool)
    resid = np.full(B, np.inf)
    for k in range(cfg.max_iters):
        eps = predict_noise(model, sq_ab * x0a + sq_1ab * delta, tt, c, guidance_w=1.0)
        r = np.linalg.norm(delta - eps, axis=1)
        resid = np.where(converged, resid, r)
        converged |= r <= cfg.tol
        if converged.all():
            break
        upd = (1.0 - cfg.damping) * delta + cfg.damping * eps
        delta = np.where(converged[:, None], delta, upd)
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"non-finite fixed-point iterate at iteration {k}")
    if not converged.all():
        eps = predict_noise(model, sq_ab * x0a + sq_1ab * delta, tt, c, guidance_w=1.0)
        r = np.linalg.norm(delta - eps, axis=1)
        resid = np.where(converged, resid, r)
    if squeeze:
        return delta[0], bool(converged[0]), float(resid[0])
    return delta, converged, resid


def make_targets(model, s: NoiseSchedule, x0, t, c, strategy: DeltaStrategy, rng):
    """Produce the (latent, regression target) pair for one clean sample batch."""
    t = check_timestep(s, t, min_t=1)
    if strategy.kind == "inversion":
        res = ddim_invert(model, s, x0, t, strategy.n, c, strategy.guidance_w_inv)
        return res.x_t, res.tau_t
    if strategy.kind == "gaussian":
        x0 = np.asarray(x0, dtype=np.float64)
        eps = rng.standard_normal(x0.shape)
        return forward_diffuse(s, x0, t, eps), eps
    delta, _, _ = solve_delta_fixed_point(model, s, x0, t, c, strategy, rng)
    return reconstruct_xt(s, x0, delta, t), delta


def pair_loss_terms(theta, ref, s: NoiseSchedule, x_tw, tau_w, x_tl, tau_l, t, c, beta):
    """Batched pairwise loss pieces.

    ``theta`` may be DenoiserParams or TapeParams; ``ref`` must be plain
    DenoiserParams (or a probe callable) and never enters the tape. Returns a
    dict of per-pair arrays plus the scalar mean total.
    """
    x_tw, x_tl = _as_rows(x_tw), _as_rows(x_tl)
    tau_w, tau_l = _as_rows(tau_w), _as_rows(tau_l)
    B = x_tw.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
    rows = _cond_rows(c, _num_conditions(theta))
    x_stack = np.vstack([x_tw, x_tl])
    t_stack = np.concatenate([t, t])
    c_stack = np.concatenate([c, c])
    rows_stack = np.concatenate([rows, rows])

    eps_th = _eval_eps(theta, x_stack, t_stack, c_stack, rows_stack)
    eps_rf = _eval_eps(ref, x_stack, t_stack, c_stack, rows_stack)
    if isinstance(eps_rf, Var):
        raise InvalidArgument("reference model must not be tape parameters")

    dw_t = tau_w - eps_th[:B]
    dl_t = tau_l - eps_th[B:]
    term_w_theta = (dw_t * dw_t).sum(axis=1)
    term_l_theta = (dl_t * dl_t).sum(axis=1)
    dw_r = tau_w - eps_rf[:B]
    dl_r = tau_l - eps_rf[B:]
    term_w_ref = (dw_r * dw_r).sum(axis=1)
    term_l_ref = (dl_r * dl_r).sum(axis=1)

    names = ("term_w_theta", "term_w_ref", "term_l_theta", "term_l_ref")
    for name, term in zip(names, (term_w_theta, term_w_ref, term_l_theta, term_l_ref)):
        vals = term.data if isinstance(term, Var) else term
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"{name} is non-finite")

    scale = -(beta * s.loss_weight[t])
    arg = (term_w_theta - term_w_ref - term_l_theta + term_l_ref) * scale
    totals = softplus(-arg)
    return {
        "term_w_theta": term_w_theta,
        "term_w_ref": term_w_ref,
        "term_l_theta": term_l_theta,
        "term_l_ref": term_l_ref,
        "sigmoid_arg": arg,
        "totals": totals,
        "mean_total": totals.mean(),
    }


def _breakdown(terms, t) -> LossBreakdown:
    def val(x):
        arr = x.data if isinstance(x, Var) else np.asarray(x)
        return float(arr.reshape(-1)[0])

    return LossBreakdown(
        total=val(terms["totals"]),
        sigmoid_arg=val(terms["sigmoid_arg"]),
        term_w_theta=val(terms["term_w_theta"]),
        term_w_ref=val(terms["term_w_ref"]),
        term_l_theta=val(terms["term_l_theta"]),
        term_l_ref=val(terms["term_l_ref"]),
        t=int(t),
    )


def inpo_loss(p, ref, s, pair, t, strategy: DeltaStrategy, beta, rng) -> LossBreakdown:
    """Inversion preference loss for one pair at one timestep.

    Latent/target construction uses the trained parameters and is treated as
    a sampled constant: no gradient flows through it.
    """
    if beta < 0:
        raise InvalidArgument("beta must be >= 0")
    t = int(check_timestep(s, t, min_t=1))
    c = pair.condition
    x_tw, tau_w = make_targets(p, s, pair.winner, t, c, strategy, rng)
    x_tl, tau_l = make_targets(p, s, pair.loser, t, c, strategy, rng)
    terms = pair_loss_terms(p, ref, s, x_tw, tau_w, x_tl, tau_l, t, c, beta)
    return _breakdown(terms, t)


def dpo_diffusion_loss(p, ref, s, pair, t, eps_w, eps_l, beta) -> LossBreakdown:
    """Forward-noising preference loss: latents from the forward process and
    targets equal to the drawn noise. Baseline and reduction oracle."""
    if beta < 0:
        raise InvalidArgument("beta must be >= 0")
    t = int(check_timestep(s, t, min_t=1))
    c = pair.condition
    x_tw = forward_diffuse(s, np.asarray(pair.winner, float), t, np.asarray(eps_w, float))
    x_tl = forward_diffuse(s, np.asarray(pair.loser, float), t, np.asarray(eps_l, float))
    terms = pair_loss_terms(p, ref, s, x_tw, eps_w, x_tl, eps_l, t, c, beta)
    return _breakdown(terms, t)


def implicit_reward(p, ref, s, x0, c, t_draws, strategy: DeltaStrategy, beta, rng) -> float:
    """Monte Carlo estimate of the preference reward of one sample, up to the
    per-timestep normalizer that cancels when rewards are compared."""
    t_draws = np.asarray(t_draws)
    if t_draws.size == 0:
        raise InvalidArgument("t_draws must be nonempty")
    t = check_timestep(s, t_draws, min_t=1)
    x0 = np.asarray(x0, dtype=np.float64)
    X0 = np.tile(x0, (t.size, 1))
    cc = np.full(t.size, int(c), dtype=np.int64)
    x_t, tau = make_targets(p, s, X0, t, cc, strategy, rng)
    rows = _cond_rows(cc, _num_conditions(p))
    eps_p = _eval_eps(p, x_t, t, cc, rows)
    eps_r = _eval_eps(ref, x_t, t, cc, rows)
    term_p = ((tau - eps_p) ** 2).sum(axis=1)
    term_r = ((tau - eps_r) ** 2).sum(axis=1)
    vals = -beta * s.loss_weight[t] * (term_p - term_r)
    return float(vals.mean())
