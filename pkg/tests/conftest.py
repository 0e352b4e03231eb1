"""Shared fixtures: probe models, closed-form oracles, and the slow
session-scoped trained models used by the end-to-end tests."""
import numpy as np
import pytest

from inpo.denoiser import DenoiserArch, init_denoiser
from inpo.schedule import make_schedule


def make_linear_model(A, num_conditions=1, time_embed_dim=4):
    """Exact time-independent linear predictor eps(x) = A x as real params.

    Uses an empty hidden stack so the network is a single linear map; the
    time and condition blocks of the weight matrix are zeroed.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    arch = DenoiserArch(d, (), num_conditions, time_embed_dim)
    p = init_denoiser(arch, 0)
    W = np.zeros_like(p.weights[0])
    W[:d, :] = A.T
    p.weights[0] = W
    p.biases[0] = np.zeros_like(p.biases[0])
    p.cond_embed = np.zeros_like(p.cond_embed)
    return p


def zero_model(d=2, num_conditions=1):
    return make_linear_model(np.zeros((d, d)), num_conditions=num_conditions)


def const_model(v):
    """Probe callable returning a fixed vector for every row."""
    v = np.asarray(v, dtype=np.float64)

    def predict(x, t, c, w):
        x = np.asarray(x)
        if x.ndim == 1:
            return v.copy()
        return np.tile(v, (x.shape[0], 1))

    return predict


def noise_echo_model(eps):
    """Probe callable that always returns the generating noise."""
    return const_model(eps)


def finite_diff(params, loss_np, h=1e-4):
    """Central differences of a plain-numpy scalar loss over every parameter."""
    grads = []
    for arr in params.flat():
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            hi = loss_np(params)
            flat[i] = old - h
            lo = loss_np(params)
            flat[i] = old
            gf[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(ad, fd):
    worst = 0.0
    for a, f in zip(ad, fd):
        worst = max(worst, float(np.max(np.abs(a - f) / (np.abs(f) + 1e-8))))
    return worst


def expm_sym(A, s):
    """Matrix exponential exp(s A) for symmetric A via eigendecomposition."""
    w, Q = np.linalg.eigh(A)
    return (Q * np.exp(s * w)) @ Q.T


def linear_ode_solution(A, schedule, x0, t):
    """Closed-form state of the reverse-process ODE under eps(x) = A x.

    In the rescaled variable the ODE is dxbar/dsigma = A xbar / sqrt(1+s^2),
    so xbar(sigma) = expm(A asinh(sigma)) x0; returned as the latent x_t.
    """
    sg = schedule.sigma[t]
    xbar = expm_sym(A, np.arcsinh(sg)) @ np.asarray(x0, dtype=np.float64)
    return np.sqrt(schedule.alpha_bar[t]) * xbar


@pytest.fixture(scope="session")
def sched1000():
    return make_schedule("cosine", 1000)


@pytest.fixture(scope="session")
def toy_setup(sched1000):
    from inpo.data import default_reward_spec, gen_toy_dataset

    X, cond = gen_toy_dataset("eight_gaussians", 8000, seed=7)
    spec = default_reward_spec("eight_gaussians")
    arch = DenoiserArch(2, (64, 64), 8, 16)
    return {"X": X, "cond": cond, "spec": spec, "arch": arch, "sched": sched1000}


@pytest.fixture(scope="session")
def base_model(toy_setup):
    from inpo.trainer import pretrain_base

    return pretrain_base(
        (toy_setup["X"], toy_setup["cond"]),
        toy_setup["arch"],
        toy_setup["sched"],
        steps=8000,
        lr=1e-3,
        seed=11,
    )


GEN_CFG = dict(num_steps=40, guidance_w=1.0, t_start=950)


@pytest.fixture(scope="session")
def gen_cfg():
    """Generation settings shared by pair creation and win-rate evaluation.

    Starting at 0.95 T skips the top of the noise schedule where sigma grows
    two orders of magnitude over a handful of grid points and coarse DDIM
    steps go unstable; the prior mismatch there is negligible.
    """
    from inpo.sampler import SamplerConfig

    return SamplerConfig(**GEN_CFG)


@pytest.fixture(scope="session")
def pref_pairs(toy_setup, base_model, gen_cfg):
    from inpo.data import make_preference_pairs

    return make_preference_pairs(
        base_model,
        toy_setup["sched"],
        toy_setup["spec"],
        conditions=list(range(8)),
        pairs_per_condition=64,
        sampler_cfg=gen_cfg,
        seed=23,
    )


@pytest.fixture(scope="session")
def aligned_model(toy_setup, base_model, pref_pairs):
    from inpo.preference import DeltaStrategy
    from inpo.trainer import AlignConfig, align

    cfg = AlignConfig(
        method="inpo",
        beta=2000.0,
        delta=DeltaStrategy("inversion", n=10, guidance_w_inv=0.0),
        steps=600,
        batch_pairs=64,
        lr=1e-3,
        warmup_steps=50,
        seed=31,
    )
    return align(base_model, base_model, pref_pairs, toy_setup["sched"], cfg)
