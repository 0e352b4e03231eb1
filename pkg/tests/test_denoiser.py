import numpy as np
import pytest

from inpo.denoiser import (
    NULL_CONDITION,
    DenoiserArch,
    DenoiserParams,
    eps_forward,
    init_denoiser,
    load_params,
    loss_gradient,
    params_equal,
    params_from_bytes,
    params_to_bytes,
    predict_noise,
    save_params,
    value_and_grad,
)
from inpo.errors import InvalidArgument, NumericError, VersionError

ARCH = DenoiserArch(2, (16,), 4, 8)


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
        worst = max(worst, np.max(np.abs(a - f) / (np.abs(f) + 1e-8)))
    return worst


def test_init_deterministic():
    a = init_denoiser(ARCH, 5)
    b = init_denoiser(ARCH, 5)
    assert params_equal(a, b)
    for x, y in zip(a.flat(), b.flat()):
        assert x.tobytes() == y.tobytes()


def test_init_seed_changes_params():
    a = init_denoiser(ARCH, 5)
    b = init_denoiser(ARCH, 6)
    assert not params_equal(a, b)


def test_param_count_closed_form():
    arch = DenoiserArch(2, (64, 64), 8, 16)
    p = init_denoiser(arch, 0)
    d_in = 2 + 16 + 16
    expect = (d_in * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2) + (8 + 1) * 16
    assert p.n_params() == expect == arch.param_count()


def test_arch_validation():
    with pytest.raises(InvalidArgument):
        DenoiserArch(0, (4,), 1, 8)
    with pytest.raises(InvalidArgument):
        DenoiserArch(2, (4,), 0, 8)
    with pytest.raises(InvalidArgument):
        DenoiserArch(2, (4,), 1, 7)


def make_linear_model(A, num_conditions=1, time_embed_dim=4):
    """Exact linear predictor eps(x) = A x realized as real DenoiserParams."""
    d = A.shape[0]
    arch = DenoiserArch(d, (), num_conditions, time_embed_dim)
    p = init_denoiser(arch, 0)
    W = np.zeros_like(p.weights[0])
    W[:d, :] = np.asarray(A, dtype=np.float64).T
    p.weights[0] = W
    p.biases[0] = np.zeros_like(p.biases[0])
    p.cond_embed = np.zeros_like(p.cond_embed)
    return p


def test_linear_probe_matches_matrix_multiply():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    p = make_linear_model(A)
    x = rng.standard_normal((5, 3))
    out = predict_noise(p, x, 17, 0, guidance_w=1.0)
    assert np.allclose(out, x @ A.T, rtol=0, atol=1e-15)


def test_cfg_w0_equals_null_condition():
    p = init_denoiser(ARCH, 1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2))
    a = predict_noise(p, x, 10, 2, guidance_w=0.0)
    b = predict_noise(p, x, 10, NULL_CONDITION, guidance_w=0.0)
    c = predict_noise(p, x, 10, NULL_CONDITION, guidance_w=5.0)
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_cfg_w1_equals_conditional_branch():
    p = init_denoiser(ARCH, 1)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2))
    rows = np.full(3, 2)
    direct = eps_forward(p, x, np.full(3, 10), rows)
    assert np.array_equal(predict_noise(p, x, 10, 2, guidance_w=1.0), direct)


def test_cfg_affine_in_w():
    p = init_denoiser(ARCH, 3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2))
    ws = (0.3, 0.7, 2.0)
    outs = [predict_noise(p, x, 55, 1, guidance_w=w) for w in ws]
    # three points on a line: out(w1) interpolated from out(w0), out(w2)
    lam = (ws[1] - ws[0]) / (ws[2] - ws[0])
    interp = outs[0] + lam * (outs[2] - outs[0])
    assert np.max(np.abs(outs[1] - interp)) < 1e-10


def test_predict_noise_pure():
    p = init_denoiser(ARCH, 4)
    x = np.random.default_rng(4).standard_normal((2, 2))
    a = predict_noise(p, x, 7, 1, guidance_w=3.0)
    b = predict_noise(p, x, 7, 1, guidance_w=3.0)
    assert a.tobytes() == b.tobytes()


def test_predict_noise_errors():
    p = init_denoiser(ARCH, 4)
    with pytest.raises(InvalidArgument):
        predict_noise(p, np.zeros(3), 0, 0)
    with pytest.raises(NumericError):
        predict_noise(p, np.array([np.nan, 0.0]), 0, 0)
    with pytest.raises(InvalidArgument):
        predict_noise(p, np.zeros(2), 0, 99)


def test_loss_gradient_constant_loss_is_zero():
    p = init_denoiser(ARCH, 5)

    def loss(tape):
        return (tape.weights[0] * 0.0).sum()

    grads = loss_gradient(p, loss)
    assert all(np.all(g == 0) for g in grads)


def test_loss_gradient_quadratic_probe():
    p = init_denoiser(ARCH, 5)
    a = 0.37

    def loss(tape):
        return ((tape.weights[0][0:1, 0:1] - a) ** 2).sum()

    grads = loss_gradient(p, loss)
    expect = 2 * (p.weights[0][0, 0] - a)
    assert grads[0][0, 0] == pytest.approx(expect, rel=1e-12)
    assert np.all(grads[0].reshape(-1)[1:] == 0)
    assert all(np.all(g == 0) for g in grads[1:])


def test_loss_gradient_nonfinite_raises():
    p = init_denoiser(ARCH, 5)
    with pytest.raises(NumericError):
        loss_gradient(p, lambda tape: (tape.weights[0] * np.inf).sum())


def test_gradient_check_prediction_mse():
    # reverse-mode gradients of a squared-error loss through the full network
    # vs central finite differences, 20 random draws
    arch = DenoiserArch(2, (6,), 3, 4)
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        p = init_denoiser(arch, trial)
        x = rng.standard_normal((5, 2))
        t = rng.integers(0, 50, size=5)
        rows = rng.integers(0, 4, size=5)
        target = rng.standard_normal((5, 2))

        def loss_np(params):
            d = eps_forward(params, x, t, rows) - target
            return float((d * d).sum(axis=1).mean())

        def loss_tape(tape):
            d = eps_forward(tape, x, t, rows) - target
            return (d * d).sum(axis=1).mean()

        _, ad = value_and_grad(p, loss_tape)
        fd = finite_diff(p, loss_np)
        worst = max(worst, max_rel_err(ad, fd))
    assert worst < 1e-4


def test_params_file_round_trip(tmp_path):
    p = init_denoiser(DenoiserArch(2, (8, 4), 3, 6), 9)
    path = tmp_path / "model.params"
    save_params(path, p, "cosine", 1000)
    q, kind, T = load_params(path)
    assert kind == "cosine" and T == 1000
    assert params_equal(p, q)
    for a, b in zip(p.flat(), q.flat()):
        assert a.tobytes() == b.tobytes()


def test_params_file_rejects_bad_magic():
    with pytest.raises(VersionError):
        params_from_bytes(b"NOTMAGIC" + b"\x00" * 64)


def test_params_file_rejects_truncation():
    p = init_denoiser(ARCH, 0)
    buf = params_to_bytes(p, "cosine", 100)
    with pytest.raises(VersionError):
        params_from_bytes(buf[:-8])


def test_params_file_rejects_arch_mismatch(tmp_path):
    p = init_denoiser(ARCH, 0)
    path = tmp_path / "m.params"
    save_params(path, p, "cosine", 100)
    with pytest.raises(VersionError):
        load_params(path, expect_arch=DenoiserArch(2, (16,), 5, 8))


def test_params_file_rejects_bad_version():
    p = init_denoiser(ARCH, 0)
    buf = bytearray(params_to_bytes(p, "cosine", 100))
    buf[8] = 99
    with pytest.raises(VersionError):
        params_from_bytes(bytes(buf))
