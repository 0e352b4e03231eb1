"""Conditional noise-prediction network.

A small fully connected network predicts the noise added to a sample. Inputs
are the noisy sample, a sinusoidal embedding of the timestep, and a learned
embedding of the condition id; the three are concatenated and passed through
tanh hidden layers. Condition ids live in [0, num_conditions); the reserved
id NULL_CONDITION selects a learned null embedding used for unconditional
prediction and classifier-free guidance.

The same forward routine runs on plain arrays and on autodiff Vars, so the
differentiated path used in training is arithmetically identical to the fast
path used in sampling.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Var, concat, take_rows, tanh
from .errors import InvalidArgument, NumericError, VersionError

NULL_CONDITION = -1
PARAMS_MAGIC = b"INPODENZ"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class DenoiserArch:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_conditions: int
    time_embed_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise InvalidArgument("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise InvalidArgument("hidden dims must be positive")
        if self.num_conditions < 1:
            raise InvalidArgument("num_conditions must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise InvalidArgument("time_embed_dim must be a positive even integer")

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim + 2 * self.time_embed_dim, *self.hidden_dims, self.input_dim]
        return list(zip(widths[:-1], widths[1:]))

    def param_count(self) -> int:
        n = sum(i * o + o for i, o in self.layer_dims())
        return n + (self.num_conditions + 1) * self.time_embed_dim


@dataclass
class DenoiserParams:
    """Network weights. Treated as an immutable value between update steps."""

    arch: DenoiserArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    cond_embed: np.ndarray
    version: int = PARAMS_VERSION

    def flat(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        out.append(self.cond_embed)
        return out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            cond_embed=self.cond_embed.copy(),
            version=self.version,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.flat())


@dataclass
class TapeParams:
    """Autodiff counterpart of DenoiserParams; same duck shape for the forward."""

    arch: DenoiserArch
    weights: list[Var]
    biases: list[Var]
    cond_embed: Var

    def flat(self) -> list[Var]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        out.append(self.cond_embed)
        return out


def params_to_tape(params: DenoiserParams) -> TapeParams:
    return TapeParams(
        arch=params.arch,
        weights=[Var(w) for w in params.weights],
        biases=[Var(b) for b in params.biases],
        cond_embed=Var(params.cond_embed),
    )


def init_denoiser(arch: DenoiserArch, seed: int) -> DenoiserParams:
    """Deterministic fan-in scaled initialization; same (arch, seed) gives
    bit-identical parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E37]))
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims():
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    cond_embed = 0.5 * rng.standard_normal((arch.num_conditions + 1, arch.time_embed_dim))
    return DenoiserParams(arch=arch, weights=weights, biases=biases, cond_embed=cond_embed)


_FREQ_CACHE: dict[int, np.ndarray] = {}


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    freqs = _FREQ_CACHE.get(dim)
    if freqs is None:
        half = dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        _FREQ_CACHE[dim] = freqs
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _cond_rows(c, num_conditions: int) -> np.ndarray:
    c = np.asarray(c)
    if not np.issubdtype(c.dtype, np.integer):
        raise InvalidArgument("condition ids must be integers")
    if np.any(c >= num_conditions) or np.any(c < NULL_CONDITION):
        raise InvalidArgument(f"condition id out of range [-1, {num_conditions})")
    return np.where(c == NULL_CONDITION, num_conditions, c)


def eps_forward(model, x, t, rows):
    """Single forward pass at explicit embedding rows.

    ``model`` is DenoiserParams or TapeParams; ``x`` is (batch, dim), ``t`` a
    (batch,) array, ``rows`` a (batch,) array of embedding-table rows.
    """
    temb = time_embedding(t, model.arch.time_embed_dim)
    cemb = take_rows(model.cond_embed, rows)
    h = concat([x, temb, cemb], axis=1)
    last = len(model.weights) - 1
    for i in range(last):
        h = tanh(h @ model.weights[i] + model.biases[i])
    return h @ model.weights[last] + model.biases[last]


def _normalize_batch(x, t, c, input_dim):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != input_dim:
        raise InvalidArgument(f"sample dim {x.shape[1]} != input_dim {input_dim}")
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    return x, t, c, squeeze


def predict_noise(model, x_t, t, c, guidance_w: float = 0.0) -> np.ndarray:
    """Evaluate the noise prediction with classifier-free guidance weight w.

    w = 0 returns the null-condition prediction; w = 1 the conditional one;
    any other w the affine combination uncond + w * (cond - uncond). ``model``
    may also be a plain callable (x, t, c, w) -> eps, used by test probes.
    """
    if not isinstance(model, DenoiserParams):
        if callable(model):
            return np.asarray(model(x_t, t, c, guidance_w), dtype=np.float64)
        raise InvalidArgument(f"model must be DenoiserParams or a callable, got {type(model)}")
    arch = model.arch
    x, tv, cv, squeeze = _normalize_batch(x_t, t, c, arch.input_dim)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite sample passed to predict_noise")
    rows = _cond_rows(cv, arch.num_conditions)
    null_rows = np.full_like(rows, arch.num_conditions)
    if guidance_w == 0.0 or np.all(cv == NULL_CONDITION):
        out = eps_forward(model, x, tv, null_rows)
    elif guidance_w == 1.0:
        out = eps_forward(model, x, tv, rows)
    else:
        eps_u = eps_forward(model, x, tv, null_rows)
        eps_c = eps_forward(model, x, tv, rows)
        out = eps_u + guidance_w * (eps_c - eps_u)
    return out[0] if squeeze else out


def loss_gradient(params: DenoiserParams, loss_fn) -> list[np.ndarray]:
    """Exact reverse-mode gradient of a scalar loss with respect to every
    parameter array, in declaration order.

    ``loss_fn`` receives a TapeParams and must return a scalar Var.
    """
    _, grads = value_and_grad(params, loss_fn)
    return grads


def value_and_grad(params: DenoiserParams, loss_fn) -> tuple[float, list[np.ndarray]]:
    tape = params_to_tape(params)
    out = loss_fn(tape)
    if not isinstance(out, Var) or out.data.shape != ():
        raise InvalidArgument("loss_fn must return a scalar Var")
    if not np.isfinite(out.data):
        raise NumericError(f"loss is non-finite: {out.data!r}")
    out.backward()
    grads = [
        v.grad if v.grad is not None else np.zeros_like(v.data) for v in tape.flat()
    ]
    return float(out.data), grads


# ---------------------------------------------------------------------------
# parameter file format: little-endian, versioned header, then float64 arrays
# in declaration order


def _pack_header(params: DenoiserParams, schedule_kind: str, T: int) -> bytes:
    a = params.arch
    kind_b = schedule_kind.encode()
    head = [
        PARAMS_MAGIC,
        struct.pack("<I", PARAMS_VERSION),
        struct.pack("<I", a.input_dim),
        struct.pack("<I", len(a.hidden_dims)),
        struct.pack(f"<{len(a.hidden_dims)}I", *a.hidden_dims) if a.hidden_dims else b"",
        struct.pack("<I", a.num_conditions),
        struct.pack("<I", a.time_embed_dim),
        struct.pack("<B", len(kind_b)),
        kind_b,
        struct.pack("<I", T),
    ]
    return b"".join(head)


def params_to_bytes(params: DenoiserParams, schedule_kind: str, T: int) -> bytes:
    blobs = [_pack_header(params, schedule_kind, T)]
    for arr in params.flat():
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(blobs)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise VersionError("truncated parameter file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def params_from_bytes(buf: bytes) -> tuple[DenoiserParams, str, int]:
    r = _Reader(buf)
    if r.take(len(PARAMS_MAGIC)) != PARAMS_MAGIC:
        raise VersionError("not a denoiser parameter file")
    version = r.u32()
    if version != PARAMS_VERSION:
        raise VersionError(f"unsupported parameter format version {version}")
    input_dim = r.u32()
    n_hidden = r.u32()
    hidden = tuple(r.u32() for _ in range(n_hidden))
    num_conditions = r.u32()
    time_embed_dim = r.u32()
    kind = r.take(r.u8()).decode()
    T = r.u32()
    arch = DenoiserArch(input_dim, hidden, num_conditions, time_embed_dim)

    def read_array(shape):
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(n * 8), dtype="<f8").astype(np.float64).reshape(shape)
        return arr

    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims():
        weights.append(read_array((fan_in, fan_out)))
        biases.append(read_array((fan_out,)))
    cond_embed = read_array((num_conditions + 1, time_embed_dim))
    if r.pos != len(buf):
        raise VersionError("trailing bytes in parameter file")
    params = DenoiserParams(arch=arch, weights=weights, biases=biases, cond_embed=cond_embed)
    for arr in params.flat():
        if not np.all(np.isfinite(arr)):
            raise NumericError("parameter file contains non-finite values")
    return params, kind, T


def save_params(path, params: DenoiserParams, schedule_kind: str, T: int) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params, schedule_kind, T))


def load_params(path, expect_arch: DenoiserArch | None = None):
    with open(path, "rb") as fh:
        params, kind, T = params_from_bytes(fh.read())
    if expect_arch is not None and params.arch != expect_arch:
        raise VersionError(f"architecture mismatch: {params.arch} != {expect_arch}")
    return params, kind, T


def params_equal(a: DenoiserParams, b: DenoiserParams) -> bool:
    return a.arch == b.arch and all(
        np.array_equal(x, y) for x, y in zip(a.flat(), b.flat())
    )
