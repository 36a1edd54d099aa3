"""Small fully-connected networks with hand-written backpropagation.

Arrays are batch-first: an input of shape ``(batch, in_dim)`` maps to
``(batch, out_dim)``. A 1-D input is treated as a batch of one and the
output is squeezed back to 1-D.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

LEAKY_SLOPE = 0.01
CHECKPOINT_MAGIC = b"DMCE1"


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, stage: str, epoch: int):
        super().__init__(f"{stage}: loss became non-finite at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch


@dataclass
class Mlp:
    """Affine layers with leaky-ReLU on hidden layers and a linear output.

    ``weights[k]`` has shape ``(dims[k+1], dims[k])``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = LEAKY_SLOPE

    @classmethod
    def create(cls, dims: list[int], rng: np.random.Generator) -> "Mlp":
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dims {dims}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order (per layer: weight, bias)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    squeezed: bool


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network and keep what ``backward`` needs."""
    x = np.asarray(x, dtype=float)
    squeezed = x.ndim == 1
    h = x[None, :] if squeezed else x
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise ValueError(f"input shape {x.shape} does not match first layer width {net.in_dim}")
    inputs, preacts = [], []
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = z if k == last else np.where(z > 0, z, net.slope * z)
    return (h[0] if squeezed else h), ForwardCache(inputs, preacts, squeezed)


def backward(
    net: Mlp, cache: ForwardCache | None, upstream: np.ndarray
) -> tuple[Gradients, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * output)``.

    Returns parameter gradients and the gradient with respect to the input.
    """
    if cache is None:
        raise ValueError("backward called without a forward cache")
    g = np.asarray(upstream, dtype=float)
    if cache.squeezed:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {cache.preacts[-1].shape}")
    n = len(net.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for k in range(n - 1, -1, -1):
        if k != n - 1:
            g = g * np.where(cache.preacts[k] > 0, 1.0, net.slope)
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ net.weights[k]
    return Gradients(gw, gb), (g[0] if cache.squeezed else g)


def sgd_step(net: Mlp, grads: Gradients, lr: float) -> None:
    """In-place update ``theta <- theta - lr * grad``."""
    for p, gp in zip(net.params(), grads.params()):
        if p.shape != gp.shape:
            raise ValueError(f"gradient shape {gp.shape} != parameter shape {p.shape}")
    for p, gp in zip(net.params(), grads.params()):
        p -= lr * gp


def sinusoidal_time_embedding(t, dim: int, T: int) -> np.ndarray:
    """Interleaved sin/cos embedding of the diffusion step.

    ``t`` may be a scalar or an integer array; the result has a trailing
    axis of length ``dim``. Divisors run geometrically from 1 to 10000.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ValueError(f"step {t} outside [1, {T}]")
    half = dim // 2
    if half == 1:
        divisors = np.ones(1)
    else:
        divisors = 10000.0 ** (np.arange(half) / (half - 1))
    angles = t_arr.astype(float)[..., None] / divisors
    emb = np.empty(angles.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    decay: float = 0.95
    epochs: int = 100
    batch_size: int = 64
    steps_per_epoch: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs, batch_size and steps_per_epoch must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay**epoch


@dataclass
class NoisePredictor:
    """Time-conditioned noise estimator operating on real CSI vectors.

    ``signal_power`` is the mean per-entry complex power of the training
    channels; ``enhance_csi`` uses it to put the pilot noise variance on the
    same scale as the schedule.
    """

    core: Mlp
    data_dim: int
    embed_dim: int
    steps: int
    signal_power: float
    conditional: bool = False
    shape: tuple[int, int] = (0, 0)

    @classmethod
    def create(
        cls,
        rows: int,
        cols: int,
        steps: int,
        rng: np.random.Generator,
        embed_dim: int = 32,
        hidden: tuple[int, ...] = (128, 128, 128),
        conditional: bool = False,
        signal_power: float = 1.0,
    ) -> "NoisePredictor":
        data_dim = 2 * rows * cols
        in_dim = data_dim * (2 if conditional else 1) + embed_dim
        core = Mlp.create([in_dim, *hidden, data_dim], rng)
        return cls(core, data_dim, embed_dim, steps, signal_power, conditional, (rows, cols))

    def features(self, x_t: np.ndarray, t, cond: np.ndarray | None = None) -> np.ndarray:
        x_t = np.atleast_2d(x_t)
        t_arr = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        parts = [x_t]
        if self.conditional:
            if cond is None:
                raise ValueError("conditional predictor needs the conditioning input")
            parts.append(np.broadcast_to(np.atleast_2d(cond), x_t.shape))
        parts.append(sinusoidal_time_embedding(t_arr, self.embed_dim, self.steps))
        return np.concatenate(parts, axis=1)

    def __call__(self, x_t: np.ndarray, t, cond: np.ndarray | None = None) -> np.ndarray:
        squeeze = np.ndim(x_t) == 1
        if np.shape(x_t)[-1] != self.data_dim:
            raise ValueError(f"predictor expects vectors of length {self.data_dim}, got {np.shape(x_t)[-1]}")
        out = self.core(self.features(x_t, t, cond))
        return out[0] if squeeze else out


def numerical_gradient(f: Callable[[], float], param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + step
        up = f()
        param[idx] = orig - step
        down = f()
        param[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def gradient_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative error with an absolute floor on the denominator."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- checkpoints -------------------------------------------------------------
#
# Layout (little-endian): magic "DMCE1", u32 layer count, u32 dims[layers+1],
# f64 parameters in layer order (weight row-major, then bias), f64 signal
# power, u32 embedding dim. Codec checkpoints reuse the per-network block
# with signal power 0 and embedding dim 0.


def write_mlp(fh: BinaryIO, net: Mlp, signal_power: float = 0.0, embed_dim: int = 0) -> None:
    dims = net.dims
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", len(dims) - 1))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    for p in net.params():
        fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    fh.write(struct.pack("<d", signal_power))
    fh.write(struct.pack("<I", embed_dim))


def read_mlp(fh: BinaryIO) -> tuple[Mlp, float, int]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    (layers,) = struct.unpack("<I", fh.read(4))
    dims = list(struct.unpack(f"<{layers + 1}I", fh.read(4 * (layers + 1))))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in)
        b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    (signal_power,) = struct.unpack("<d", fh.read(8))
    (embed_dim,) = struct.unpack("<I", fh.read(4))
    return Mlp(weights, biases), signal_power, embed_dim


def save_predictor(path, pred: NoisePredictor) -> None:
    with open(path, "wb") as fh:
        write_mlp(fh, pred.core, pred.signal_power, pred.embed_dim)


def load_predictor(path, rows: int, cols: int, steps: int) -> NoisePredictor:
    """Load a predictor, checking it matches an ``rows x cols`` channel."""
    with open(path, "rb") as fh:
        core, power, embed = read_mlp(fh)
    data_dim = 2 * rows * cols
    if core.out_dim != data_dim:
        raise ValueError(f"checkpoint predicts {core.out_dim} values, expected {data_dim} for {rows}x{cols}")
    extra = core.in_dim - embed - data_dim
    if extra not in (0, data_dim):
        raise ValueError(f"checkpoint input width {core.in_dim} inconsistent with {rows}x{cols}")
    return NoisePredictor(core, data_dim, embed, steps, power, extra == data_dim, (rows, cols))


__all__ = [
    "Mlp", "ForwardCache", "Gradients", "TrainConfig", "NoisePredictor", "TrainingDiverged",
    "forward", "backward", "sgd_step", "sinusoidal_time_embedding", "numerical_gradient",
    "gradient_rel_error", "write_mlp", "read_mlp", "save_predictor", "load_predictor",
]
