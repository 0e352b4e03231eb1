import csv

import numpy as np
import pytest

from inpo.data import PreferencePair
from inpo.denoiser import DenoiserArch, init_denoiser, params_equal
from inpo.errors import ConfigError, InvalidArgument, VersionError
from inpo.preference import DeltaStrategy, sft_loss
from inpo.schedule import make_schedule
from inpo.trainer import (
    AlignConfig,
    align,
    config_fingerprint,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
    sft_ref_init,
    warmup_lr,
)

ARCH = DenoiserArch(2, (12,), 4, 8)


@pytest.fixture(scope="module")
def s():
    return make_schedule("cosine", 200)


@pytest.fixture(scope="module")
def tiny_pairs():
    rng = np.random.default_rng(0)
    pairs = []
    for i in range(32):
        c = i % 4
        pairs.append(
            PreferencePair(
                condition=c,
                winner=rng.standard_normal(2) * 0.3,
                loser=rng.standard_normal(2) * 0.3 + 1.0,
                reward_w=1.0,
                reward_l=0.0,
                seed=0,
            )
        )
    return pairs


@pytest.fixture(scope="module")
def tiny_data():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((256, 2))
    cond = rng.integers(0, 4, size=256)
    return X, cond


def small_cfg(**kw):
    base = dict(
        method="inpo",
        beta=50.0,
        delta=DeltaStrategy("gaussian"),
        steps=12,
        batch_pairs=8,
        accum_steps=1,
        lr=1e-3,
        warmup_steps=4,
        seed=3,
    )
    base.update(kw)
    return AlignConfig(**base)


def test_pretrain_zero_steps_returns_init(s, tiny_data):
    out = pretrain_base(tiny_data, ARCH, s, steps=0, lr=1e-3, seed=5)
    assert params_equal(out, init_denoiser(ARCH, 5))


def test_pretrain_deterministic(s, tiny_data):
    a = pretrain_base(tiny_data, ARCH, s, steps=15, lr=1e-3, seed=5, batch=32)
    b = pretrain_base(tiny_data, ARCH, s, steps=15, lr=1e-3, seed=5, batch=32)
    for x, y in zip(a.flat(), b.flat()):
        assert x.tobytes() == y.tobytes()


def test_pretrain_reduces_heldout_loss(s):
    from inpo.data import gen_toy_dataset

    X, cond = gen_toy_dataset("eight_gaussians", 1200, seed=6)
    arch = DenoiserArch(2, (32,), 8, 8)
    trained = pretrain_base((X[:1000], cond[:1000]), arch, s, steps=800, lr=1e-3, seed=5, batch=64)
    rng = np.random.default_rng(9)
    t = rng.integers(1, s.T + 1, size=200)
    eps = rng.standard_normal((200, 2))
    hold = (X[1000:], cond[1000:])
    init_loss = sft_loss(init_denoiser(arch, 5), s, hold, t, eps)
    final_loss = sft_loss(trained, s, hold, t, eps)
    assert final_loss < 0.5 * init_loss


def test_sft_ref_init_zero_steps(s, tiny_pairs):
    base = init_denoiser(ARCH, 2)
    out = sft_ref_init(base, tiny_pairs, s, steps=0, lr=1e-3, seed=1)
    assert params_equal(out, base)
    assert out is not base


def test_sft_ref_init_fits_winners(s, tiny_pairs):
    base = init_denoiser(ARCH, 2)
    out = sft_ref_init(base, tiny_pairs, s, steps=300, lr=1e-3, seed=1, batch=32)
    rng = np.random.default_rng(3)
    X = np.stack([p.winner for p in tiny_pairs])
    cond = np.asarray([p.condition for p in tiny_pairs])
    t = rng.integers(1, s.T + 1, size=len(X))
    eps = rng.standard_normal(X.shape)
    assert sft_loss(out, s, (X, cond), t, eps) < sft_loss(base, s, (X, cond), t, eps)


def test_align_zero_steps(s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    out = align(base, base, tiny_pairs, s, small_cfg(steps=0))
    assert params_equal(out, base)


def test_align_deterministic_and_ref_frozen(s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    ref = init_denoiser(ARCH, 8)
    ref_before = [a.copy() for a in ref.flat()]
    a = align(base, ref, tiny_pairs, s, small_cfg())
    b = align(base, ref, tiny_pairs, s, small_cfg())
    for x, y in zip(a.flat(), b.flat()):
        assert x.tobytes() == y.tobytes()
    for x, y in zip(ref.flat(), ref_before):
        assert np.array_equal(x, y)
    assert not params_equal(a, base)


def test_align_dpo_equals_inpo_gaussian_bitwise(s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    a = align(base, base, tiny_pairs, s, small_cfg(method="inpo", delta=DeltaStrategy("gaussian")))
    b = align(base, base, tiny_pairs, s, small_cfg(method="dpo", delta=DeltaStrategy("gaussian")))
    for x, y in zip(a.flat(), b.flat()):
        assert x.tobytes() == y.tobytes()


def test_align_methods_run(s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    for method, delta in (
        ("inpo", DeltaStrategy("inversion", n=3)),
        ("inpo", DeltaStrategy("fixed_point", max_iters=4)),
        ("sft", DeltaStrategy("gaussian")),
    ):
        out = align(base, base, tiny_pairs, s, small_cfg(method=method, delta=delta, steps=3))
        assert not params_equal(out, base)


def test_align_skips_ties(s):
    rng = np.random.default_rng(4)
    x = rng.standard_normal(2)
    only_ties = [PreferencePair(0, x, x.copy(), 0.5, 0.5, 0, tie=True)]
    base = init_denoiser(ARCH, 7)
    with pytest.raises(InvalidArgument):
        align(base, base, only_ties, s, small_cfg())


def test_warmup_schedule_logged(s, tiny_pairs, tmp_path):
    base = init_denoiser(ARCH, 7)
    log = tmp_path / "log.csv"
    align(base, base, tiny_pairs, s, small_cfg(steps=8, warmup_steps=5, lr=2e-3), log_path=log)
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    for k, row in enumerate(rows):
        lr = float(row["lr"])
        assert lr == pytest.approx(warmup_lr(2e-3, k, 5), rel=1e-15)
    assert float(rows[4]["lr"]) == pytest.approx(2e-3, rel=1e-15)


def test_checkpoint_roundtrip(tmp_path, s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    cfg = small_cfg(steps=6)
    grabbed = []
    align(base, base, tiny_pairs, s, cfg, checkpoint_at=3, on_checkpoint=grabbed.append)
    ckpt = grabbed[0]
    path = tmp_path / "run.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.step == 3
    assert loaded.fingerprint == ckpt.fingerprint
    assert loaded.schedule_kind == "cosine" and loaded.T == 200
    assert params_equal(loaded.params, ckpt.params)
    for a, b in zip(loaded.adam.m + loaded.adam.v, ckpt.adam.m + ckpt.adam.v):
        assert a.tobytes() == b.tobytes()
    assert loaded.adam.t == ckpt.adam.t


def test_resume_matches_uninterrupted(s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    cfg = small_cfg(steps=10)
    grabbed = []
    full = align(base, base, tiny_pairs, s, cfg, checkpoint_at=4, on_checkpoint=grabbed.append)
    resumed = align(base, base, tiny_pairs, s, cfg, resume=grabbed[0])
    for x, y in zip(full.flat(), resumed.flat()):
        assert x.tobytes() == y.tobytes()


def test_resume_rejects_fingerprint_mismatch(s, tiny_pairs):
    base = init_denoiser(ARCH, 7)
    grabbed = []
    align(base, base, tiny_pairs, s, small_cfg(steps=6), checkpoint_at=2, on_checkpoint=grabbed.append)
    with pytest.raises(ConfigError):
        align(base, base, tiny_pairs, s, small_cfg(steps=6, beta=51.0), resume=grabbed[0])


def test_checkpoint_corrupt_header(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"GARBAGE!" + b"\x00" * 100)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_fingerprint_depends_on_config():
    a = config_fingerprint(small_cfg())
    b = config_fingerprint(small_cfg(seed=4))
    c = config_fingerprint(small_cfg(delta=DeltaStrategy("inversion", n=5)))
    assert a != b and a != c and len(a) == 32


def test_loss_trend_and_progress(s, tiny_pairs, tmp_path):
    # winners sit in a tight cluster, losers offset; the preference loss must
    # fall below its end-of-warmup level by the end of training
    base = pretrain_base(
        (np.stack([p.winner for p in tiny_pairs] + [p.loser for p in tiny_pairs]),
         np.asarray([p.condition for p in tiny_pairs] * 2)),
        ARCH, s, steps=200, lr=1e-3, seed=2, batch=32,
    )
    log = tmp_path / "trend.csv"
    cfg = small_cfg(steps=120, warmup_steps=10, beta=100.0, lr=5e-4,
                    delta=DeltaStrategy("inversion", n=3), method="inpo")
    align(base, base, tiny_pairs, s, cfg, log_path=log)
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    losses = np.array([float(r["loss"]) for r in rows])
    tail = losses[-20:].mean()
    at_warmup = losses[10:30].mean()
    assert tail < at_warmup
    assert np.all(np.isfinite(losses))
