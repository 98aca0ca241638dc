"""Fully connected ReLU dynamics model with hand-written backprop and Adam.

The network maps normalized (state, control) features to the normalized LOS
angular acceleration.  Weights are stored as ``(n_in, n_out)`` matrices so a
batch ``x`` of shape ``(n, n_in)`` propagates as ``x @ W + b``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, EmptyDataset, ShapeMismatch, VersionMismatch

DEFAULT_HIDDEN = (200, 200)


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def tensors(self) -> list[np.ndarray]:
        """Weights and biases interleaved: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_tensors(cls, tensors: list[np.ndarray]) -> "NetworkParams":
        return cls(list(tensors[0::2]), list(tensors[1::2]))

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams([np.zeros_like(w) for w in self.weights],
                             [np.zeros_like(b) for b in self.biases])

    def check(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: W{w.shape} incompatible with b{b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i}: input dim {w.shape[0]} != previous output")


def init_params(layer_dims, rng: np.random.Generator) -> NetworkParams:
    """Uniform He (fan-in) initialization, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return NetworkParams(weights, biases)


def forward(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Affine layers with ReLU on hidden layers and a linear output."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.weights[0].shape[0]:
        raise ShapeMismatch(f"input dim {h.shape[-1]} != {params.weights[0].shape[0]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w
        h += b
        if i < last:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def mae_loss_and_gradient(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray):
    """Mean absolute error over batch and outputs, and its (sub)gradient.

    The subgradient of ``|r|`` at ``r == 0`` is taken as 0.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    if x.shape[0] == 0:
        raise EmptyDataset("empty batch")
    if x.shape[0] != y.shape[0] or y.shape[1] != params.weights[-1].shape[1]:
        raise ShapeMismatch(f"inputs {x.shape} / targets {y.shape} do not match network")
    if x.shape[1] != params.weights[0].shape[0]:
        raise ShapeMismatch(f"input dim {x.shape[1]} != {params.weights[0].shape[0]}")

    acts = [x]
    last = len(params.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)

    resid = acts[-1] - y
    loss = float(np.abs(resid).mean())
    delta = np.sign(resid) / resid.size

    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0.0)
    return loss, NetworkParams(gw, gb)


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, **kw) -> "AdamState":
        return cls([np.zeros_like(t) for t in params.tensors()],
                   [np.zeros_like(t) for t in params.tensors()], **kw)


def adam_step(params: NetworkParams, adam: AdamState, gradient: NetworkParams):
    """One bias-corrected Adam update, applied in place. Returns ``(params, adam)``."""
    adam.step += 1
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1 ** adam.step
    c2 = 1.0 - b2 ** adam.step
    for p, g, m, v in zip(params.tensors(), gradient.tensors(), adam.m, adam.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    return params, adam


# --- normalization ------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.mean.shape != self.scale.shape:
            raise ShapeMismatch("mean and scale must have the same shape")
        if np.any(self.scale <= 0):
            raise ValueError("normalizer scale must be positive")

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def denormalize(self, y):
        return np.asarray(y, dtype=float) * self.scale + self.mean

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


def fit_normalizer(data, scale_floor: float = 1e-3) -> Normalizer:
    """Per-feature mean and ``max(std, scale_floor)``."""
    x = np.atleast_2d(np.asarray(data, dtype=float))
    if x.size == 0 or x.shape[0] == 0:
        raise EmptyDataset("cannot fit a normalizer on an empty dataset")
    return Normalizer(x.mean(axis=0), np.maximum(x.std(axis=0), scale_floor))


@dataclass
class DynamicsModel:
    """Network plus the input/output normalizers it was trained with."""

    params: NetworkParams
    input_norm: Normalizer
    output_norm: Normalizer
    meta: dict = field(default_factory=dict)

    def with_params(self, params: NetworkParams) -> "DynamicsModel":
        return DynamicsModel(params, self.input_norm, self.output_norm, self.meta)

    def qddot(self, raw_input: np.ndarray, params: NetworkParams | None = None) -> np.ndarray:
        p = self.params if params is None else params
        return self.output_norm.denormalize(forward(p, self.input_norm.normalize(raw_input)))


def predict_next(model: DynamicsModel, q, q_dot, raw_input, dt: float):
    """One Euler step of the extended-state model.

    Returns ``(q_next, q_dot_next, q_ddot)`` with ``q_ddot`` the network output
    in rad/s^2, ``q_dot_next = q_dot + q_ddot*dt`` and ``q_next = q + q_dot*dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    qdd = model.qddot(raw_input)
    q = np.asarray(q, dtype=float)
    q_dot = np.asarray(q_dot, dtype=float)
    return q + q_dot * dt, q_dot + qdd * dt, qdd


# --- persistence ----------------------------------------------------------------

WEIGHTS_MAGIC = b"MGUIDEW\x00"
WEIGHTS_VERSION = 1
_F8 = np.dtype("<f8")


def _pack_arrays(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=_F8).tobytes() for a in arrays)


def save_params(path, model: DynamicsModel, adam: AdamState | None = None) -> Path:
    """Write a single self-describing little-endian weight file."""
    params = model.params
    params.check()
    dims = params.layer_dims
    buf = bytearray(WEIGHTS_MAGIC)
    buf += struct.pack("<II", WEIGHTS_VERSION, len(dims))
    buf += struct.pack(f"<{len(dims)}I", *dims)
    buf += _pack_arrays(params.tensors())
    buf += _pack_arrays([model.input_norm.mean, model.input_norm.scale,
                         model.output_norm.mean, model.output_norm.scale])
    if adam is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<BQdddd", 1, adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps)
        buf += _pack_arrays(adam.m + adam.v)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    path = Path(path)
    path.write_bytes(bytes(buf))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile("unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype=_F8).astype(float).reshape(shape)


def load_params(path) -> tuple[DynamicsModel, AdamState | None]:
    data = Path(path).read_bytes()
    if len(data) < len(WEIGHTS_MAGIC):
        raise CorruptFile(f"{path}: file too short")
    if data[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise VersionMismatch(f"{path}: not a weight file (bad magic)")
    r = _Reader(data)
    r.take(len(WEIGHTS_MAGIC))
    version, n_dims = r.unpack("<II")
    if version != WEIGHTS_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {WEIGHTS_VERSION}")
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptFile(f"{path}: checksum mismatch or truncated")
    dims = list(r.unpack(f"<{n_dims}I"))
    tensors = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        tensors.append(r.array((n_in, n_out)))
        tensors.append(r.array((n_out,)))
    params = NetworkParams.from_tensors(tensors)
    in_norm = Normalizer(r.array((dims[0],)), r.array((dims[0],)))
    out_norm = Normalizer(r.array((dims[-1],)), r.array((dims[-1],)))
    (has_adam,) = r.unpack("<B")
    adam = None
    if has_adam:
        step, lr, b1, b2, eps = r.unpack("<Qdddd")
        m = [r.array(t.shape) for t in tensors]
        v = [r.array(t.shape) for t in tensors]
        adam = AdamState(m, v, step, lr, b1, b2, eps)
    if r.pos != len(data) - 4:
        raise CorruptFile(f"{path}: trailing bytes")
    return DynamicsModel(params, in_norm, out_norm), adam
