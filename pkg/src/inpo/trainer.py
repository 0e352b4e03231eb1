"""Training loops: pretraining, reference initialization, and alignment.

Every step draws its randomness from a stream derived from (seed, domain,
step index), so a run is a pure function of (config, seed) and resuming from
a checkpoint reproduces the uninterrupted trajectory bit for bit.

The alignment loop accepts three methods sharing one optimizer path:

    inpo  latents/targets built per pair by the configured delta strategy
          (inversion by default) using the current trained parameters,
    dpo   latents from the forward process, targets equal to the drawn
          noise (identical arithmetic to inpo with the gaussian strategy),
    sft   the plain denoising objective on winners only.

Per optimizer step, gradients are averaged over batch_pairs * accum_steps
pair evaluations, each at an independently drawn timestep in {t_min..T}.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .denoiser import (
    DenoiserParams,
    NULL_CONDITION,
    _cond_rows,
    init_denoiser,
    params_from_bytes,
    params_to_bytes,
    value_and_grad,
)
from .errors import ConfigError, InvalidArgument, TrainingError, VersionError
from .preference import DeltaStrategy, make_targets, pair_loss_terms, sft_terms
from .schedule import NoiseSchedule, forward_diffuse

ALIGN_METHODS = ("inpo", "dpo", "sft")
REF_INITS = ("base", "sft_winners")
CKPT_MAGIC = b"INPOCKPT"
CKPT_VERSION = 1

_PRETRAIN_DOMAIN = 101
_ALIGN_DOMAIN = 202
_SFT_REF_DOMAIN = 303


@dataclass(frozen=True)
class AlignConfig:
    method: str = "inpo"
    beta: float = 2000.0
    delta: DeltaStrategy = field(default_factory=lambda: DeltaStrategy("inversion"))
    steps: int = 500
    batch_pairs: int = 64
    accum_steps: int = 1
    lr: float = 1e-3
    warmup_steps: int = 50
    seed: int = 0
    ref_init: str = "base"
    t_min: int = 1

    def __post_init__(self):
        if self.method not in ALIGN_METHODS:
            raise InvalidArgument(f"unknown align method {self.method!r}")
        if self.ref_init not in REF_INITS:
            raise InvalidArgument(f"unknown ref_init {self.ref_init!r}")
        if self.steps < 0 or self.batch_pairs < 1 or self.accum_steps < 1:
            raise InvalidArgument("steps >= 0, batch_pairs >= 1, accum_steps >= 1 required")
        if self.lr <= 0 or self.warmup_steps < 0 or self.t_min < 1:
            raise InvalidArgument("lr > 0, warmup_steps >= 0, t_min >= 1 required")
        if self.beta < 0:
            raise InvalidArgument("beta must be >= 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @staticmethod
    def zeros_like(flat) -> "AdamState":
        return AdamState(m=[np.zeros_like(a) for a in flat], v=[np.zeros_like(a) for a in flat])

    def copy(self) -> "AdamState":
        return AdamState(m=[a.copy() for a in self.m], v=[a.copy() for a in self.v], t=self.t)


@dataclass
class Checkpoint:
    params: DenoiserParams
    adam: AdamState
    step: int
    fingerprint: bytes
    schedule_kind: str
    T: int


def adam_step(flat, grads, state: AdamState, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(flat, grads, state.m, state.v):
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def warmup_lr(lr: float, step: int, warmup_steps: int) -> float:
    if step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    return lr


def _step_rng(seed: int, domain: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), domain, int(step)]))


def _check_grads(grads, step: int):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", step)


def pretrain_base(dataset, arch, schedule: NoiseSchedule, steps: int, lr: float, seed: int,
                  batch: int = 128, cond_drop: float = 0.1) -> DenoiserParams:
    """Train a denoiser from scratch on (samples, condition) data.

    The condition is dropped with probability ``cond_drop`` per example so the
    null-condition branch learns an unconditional prediction.
    """
    X, cond = dataset
    X = np.asarray(X, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.int64)
    if len(X) == 0:
        raise InvalidArgument("dataset must be nonempty")
    params = init_denoiser(arch, seed)
    if steps == 0:
        return params
    adam = AdamState.zeros_like(params.flat())
    for step in range(steps):
        rng = _step_rng(seed, _PRETRAIN_DOMAIN, step)
        idx = rng.integers(0, len(X), size=batch)
        t = rng.integers(1, schedule.T + 1, size=batch)
        eps = rng.standard_normal((batch, arch.input_dim))
        drop = rng.random(batch) < cond_drop
        cc = np.where(drop, NULL_CONDITION, cond[idx])
        rows = _cond_rows(cc, arch.num_conditions)
        x_t = forward_diffuse(schedule, X[idx], t, eps)
        try:
            _, grads = value_and_grad(
                params, lambda tape: sft_terms(tape, schedule, x_t, t, cc, rows, eps)
            )
        except ArithmeticError as e:
            raise TrainingError(str(e), step) from e
        _check_grads(grads, step)
        adam_step(params.flat(), grads, adam, lr)
    return params


def sft_ref_init(base: DenoiserParams, pairs, schedule: NoiseSchedule, steps: int,
                 lr: float, seed: int, batch: int = 64) -> DenoiserParams:
    """Continue denoising training on winner samples only (ties skipped)."""
    usable = [p for p in pairs if not p.tie]
    if not usable:
        raise InvalidArgument("pairs must contain at least one non-tie")
    X = np.stack([p.winner for p in usable])
    cond = np.asarray([p.condition for p in usable], dtype=np.int64)
    params = base.copy()
    arch = params.arch
    adam = AdamState.zeros_like(params.flat())
    for step in range(steps):
        rng = _step_rng(seed, _SFT_REF_DOMAIN, step)
        idx = rng.integers(0, len(X), size=batch)
        t = rng.integers(1, schedule.T + 1, size=batch)
        eps = rng.standard_normal((batch, arch.input_dim))
        cc = cond[idx]
        rows = _cond_rows(cc, arch.num_conditions)
        x_t = forward_diffuse(schedule, X[idx], t, eps)
        try:
            _, grads = value_and_grad(
                params, lambda tape: sft_terms(tape, schedule, x_t, t, cc, rows, eps)
            )
        except ArithmeticError as e:
            raise TrainingError(str(e), step) from e
        _check_grads(grads, step)
        adam_step(params.flat(), grads, adam, lr)
    return params


def config_fingerprint(cfg: AlignConfig) -> bytes:
    canon = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(canon).digest()


def _align_window(params, ref, schedule, winners, losers, conds, cfg, rng):
    """Draw one accumulation window and return (loss_fn, aux dict)."""
    B = cfg.batch_pairs
    idx = rng.integers(0, len(winners), size=B)
    t = rng.integers(cfg.t_min, schedule.T + 1, size=B)
    xw, xl, cc = winners[idx], losers[idx], conds[idx]
    aux = {"idx": idx, "t": t}

    if cfg.method == "sft":
        eps = rng.standard_normal(xw.shape)
        rows = _cond_rows(cc, params.arch.num_conditions)
        x_t = forward_diffuse(schedule, xw, t, eps)

        def loss_fn(tape):
            return sft_terms(tape, schedule, x_t, t, cc, rows, eps)

        return loss_fn, aux

    if cfg.method == "dpo":
        eps_w = rng.standard_normal(xw.shape)
        eps_l = rng.standard_normal(xl.shape)
        x_tw, tau_w = forward_diffuse(schedule, xw, t, eps_w), eps_w
        x_tl, tau_l = forward_diffuse(schedule, xl, t, eps_l), eps_l
    else:
        x_tw, tau_w = make_targets(params, schedule, xw, t, cc, cfg.delta, rng)
        x_tl, tau_l = make_targets(params, schedule, xl, t, cc, cfg.delta, rng)

    def loss_fn(tape):
        terms = pair_loss_terms(tape, ref, schedule, x_tw, tau_w, x_tl, tau_l, t, cc, cfg.beta)
        aux["sigmoid_arg"] = terms["sigmoid_arg"].data
        return terms["mean_total"]

    return loss_fn, aux


def align(base: DenoiserParams, ref: DenoiserParams, pairs, schedule: NoiseSchedule,
          cfg: AlignConfig, log_path=None, resume: Checkpoint | None = None,
          checkpoint_at: int | None = None, on_checkpoint=None) -> DenoiserParams:
    """Run the alignment loop and return the final parameters.

    ``ref`` is frozen: it is only ever read. When ``log_path`` is given a CSV
    with columns step, lr, loss, sigmoid_arg_mean, wall_ms is written. When
    ``checkpoint_at`` is reached, ``on_checkpoint`` receives a Checkpoint that
    ``resume`` accepts to reproduce the rest of the run exactly.
    """
    usable = [p for p in pairs if not p.tie]
    if not usable:
        raise InvalidArgument("no usable (non-tie) pairs")
    winners = np.stack([p.winner for p in usable])
    losers = np.stack([p.loser for p in usable])
    conds = np.asarray([p.condition for p in usable], dtype=np.int64)

    fp = config_fingerprint(cfg)
    if resume is not None:
        if resume.fingerprint != fp:
            raise ConfigError("checkpoint fingerprint does not match this config")
        params = resume.params.copy()
        adam = resume.adam.copy()
        start = resume.step
    else:
        params = base.copy()
        adam = AdamState.zeros_like(base.flat())
        start = 0

    rows_log = []
    for step in range(start, cfg.steps):
        tick = time.perf_counter()
        rng = _step_rng(cfg.seed, _ALIGN_DOMAIN, step)
        gsum = None
        loss_sum = 0.0
        arg_sum = 0.0
        for _ in range(cfg.accum_steps):
            loss_fn, aux = _align_window(
                params, ref, schedule, winners, losers, conds, cfg, rng
            )
            try:
                val, grads = value_and_grad(params, loss_fn)
            except ArithmeticError as e:
                pair_no, t_bad = _locate_bad_pair(aux)
                raise TrainingError(f"{e} (pair {pair_no}, t={t_bad})", step) from e
            _check_grads(grads, step)
            loss_sum += val
            arg = aux.get("sigmoid_arg")
            arg_sum += float(arg.mean()) if arg is not None else 0.0
            gsum = grads if gsum is None else [a + b for a, b in zip(gsum, grads)]
        grads = [g / cfg.accum_steps for g in gsum]
        lr_t = warmup_lr(cfg.lr, step, cfg.warmup_steps)
        adam_step(params.flat(), grads, adam, lr_t)
        wall_ms = (time.perf_counter() - tick) * 1e3
        rows_log.append(
            (step, lr_t, loss_sum / cfg.accum_steps, arg_sum / cfg.accum_steps, wall_ms)
        )
        if checkpoint_at is not None and step + 1 == checkpoint_at and on_checkpoint:
            on_checkpoint(
                Checkpoint(
                    params=params.copy(),
                    adam=adam.copy(),
                    step=step + 1,
                    fingerprint=fp,
                    schedule_kind=schedule.kind,
                    T=schedule.T,
                )
            )
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "sigmoid_arg_mean", "wall_ms"])
            for row in rows_log:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), f"{row[4]:.3f}"])
    return params


def _locate_bad_pair(aux):
    arg = aux.get("sigmoid_arg")
    idx, t = aux["idx"], aux["t"]
    if arg is not None:
        bad = np.flatnonzero(~np.isfinite(arg))
        if bad.size:
            return int(idx[bad[0]]), int(t[bad[0]])
    return int(idx[0]), int(t[0])


# ----------------------------------------------------------- checkpoint file


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob = params_to_bytes(ckpt.params, ckpt.schedule_kind, ckpt.T)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(ckpt.fingerprint)
        fh.write(struct.pack("<Q", ckpt.step))
        fh.write(struct.pack("<Q", ckpt.adam.t))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in ckpt.adam.m + ckpt.adam.v:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise VersionError("truncated checkpoint file")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(8) != CKPT_MAGIC:
        raise VersionError("not a trainer checkpoint")
    version = struct.unpack("<I", take(4))[0]
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    fingerprint = take(32)
    step = struct.unpack("<Q", take(8))[0]
    adam_t = struct.unpack("<Q", take(8))[0]
    blob_len = struct.unpack("<Q", take(8))[0]
    params, kind, T = params_from_bytes(take(blob_len))
    flat = params.flat()
    m, v = [], []
    for dest in (m, v):
        for ref_arr in flat:
            raw = take(ref_arr.size * 8)
            dest.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(ref_arr.shape))
    if pos != len(buf):
        raise VersionError("trailing bytes in checkpoint file")
    return Checkpoint(
        params=params,
        adam=AdamState(m=m, v=v, t=adam_t),
        step=step,
        fingerprint=fingerprint,
        schedule_kind=kind,
        T=T,
    )
