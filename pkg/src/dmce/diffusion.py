"""DDPM noise schedule, forward noising, reverse sampling and CSI enhancement.

Steps are 1-based throughout (``t`` in ``[1, T]``); schedule arrays are
stored 0-based, so ``beta[t - 1]`` is the variance of step ``t``.

Channel matrices enter the diffusion domain through :func:`to_diffusion`:
real parts then imaginary parts, row-major, scaled by ``sqrt(2 / p)`` where
``p`` is the per-entry complex signal power. Each real coordinate then has
unit power, which is what the schedule's noise-to-signal ratios assume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .channel import CsiEstimate
from .neuralnet import NoisePredictor, TrainConfig, TrainingDiverged, backward, forward, sgd_step


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return self.beta.size

    def noise_ratio(self) -> np.ndarray:
        """``(1 - alpha_bar) / alpha_bar`` for t = 1..T."""
        return (1.0 - self.alpha_bar) / self.alpha_bar

    def posterior_variance(self, t: int) -> float:
        ab_prev = 1.0 if t == 1 else self.alpha_bar[t - 2]
        return float(self.beta[t - 1] * (1.0 - ab_prev) / (1.0 - self.alpha_bar[t - 1]))

    def _check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ValueError(f"step {t} outside [1, {self.steps}]")
        return t


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    t = np.arange(T)
    beta = beta_start + t * (beta_end - beta_start) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    return NoiseSchedule(beta, alpha, alpha_bar)


def to_real(h: np.ndarray) -> np.ndarray:
    """``(..., M, N)`` complex -> ``(..., 2MN)`` real, real parts first."""
    h = np.asarray(h, dtype=np.complex128)
    lead = h.shape[:-2]
    flat = h.reshape(lead + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def from_real(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = rows * cols
    if v.shape[-1] != 2 * n:
        raise ValueError(f"vector length {v.shape[-1]} does not hold a {rows}x{cols} complex matrix")
    c = v[..., :n] + 1j * v[..., n:]
    return c.reshape(v.shape[:-1] + (rows, cols))


def to_diffusion(h: np.ndarray, signal_power: float) -> np.ndarray:
    return to_real(h) * np.sqrt(2.0 / signal_power)


def from_diffusion(v: np.ndarray, rows: int, cols: int, signal_power: float) -> np.ndarray:
    return from_real(np.asarray(v) * np.sqrt(signal_power / 2.0), rows, cols)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Forward-noise ``x0`` to step ``t``; ``t`` may be one step per batch row."""
    x0, eps = np.asarray(x0, dtype=float), np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"signal shape {x0.shape} != noise shape {eps.shape}")
    t = s._check_step(t)
    ab = s.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def select_entry_step(noise_ratio: float, s: NoiseSchedule) -> int:
    """Step whose ``(1 - alpha_bar) / alpha_bar`` is closest to ``noise_ratio``.

    Ties go to the smaller step.
    """
    if noise_ratio < 0:
        raise ValueError("noise ratio must be nonnegative")
    return int(np.argmin(np.abs(noise_ratio - s.noise_ratio()))) + 1


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    s: NoiseSchedule,
    rng: np.random.Generator | None = None,
    z: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}`` with the fixed posterior variance.

    Fresh noise comes from ``z`` when given, else from ``rng``; no noise is
    added at ``t == 1``.
    """
    s._check_step(t)
    x_t, eps_hat = np.asarray(x_t, dtype=float), np.asarray(eps_hat, dtype=float)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"sample shape {x_t.shape} != predicted noise shape {eps_hat.shape}")
    a, b, ab = s.alpha[t - 1], s.beta[t - 1], s.alpha_bar[t - 1]
    mean = (x_t - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if t == 1:
        return mean
    if z is None:
        if rng is None:
            raise ValueError("reverse_step needs rng or z for t > 1")
        z = rng.standard_normal(x_t.shape)
    return mean + np.sqrt(s.posterior_variance(t)) * z


def _noise_blocks(rng, rows: int, steps: int, dim: int) -> np.ndarray:
    """Per-row reverse-chain noise, shape ``(steps, rows, dim)``.

    With a sequence of generators each row owns its stream, so a row's
    output does not depend on how rows are batched.
    """
    if isinstance(rng, np.random.Generator):
        # one generator: row-major over (row, step) matches a 1-row stream
        return np.swapaxes(rng.standard_normal((rows, steps, dim)), 0, 1)
    if len(rng) != rows:
        raise ValueError(f"{len(rng)} generators for {rows} samples")
    return np.stack([g.standard_normal((steps, dim)) for g in rng], axis=1)


def run_reverse_chain(
    predictor: Callable, x_start: np.ndarray, t_start: int, s: NoiseSchedule, rng, cond=None
) -> np.ndarray:
    """Ancestral sampling from ``t_start`` down to 0 for a batch ``(B, D)``."""
    x = np.atleast_2d(np.asarray(x_start, dtype=float))
    noise = _noise_blocks(rng, x.shape[0], max(t_start - 1, 0), x.shape[1])
    for t in range(t_start, 0, -1):
        eps_hat = predictor(x, t, cond) if cond is not None else predictor(x, t)
        x = reverse_step(x, t, eps_hat, s, z=noise[t - 2] if t > 1 else None)
    return x


def enhance_csi(
    predictor: NoisePredictor,
    est: CsiEstimate,
    s: NoiseSchedule,
    rng: np.random.Generator | Sequence[np.random.Generator],
) -> np.ndarray:
    """Denoise a pilot estimate by running the reverse chain from its noise level.

    ``est.h_hat`` may be a single ``(M, N)`` matrix or a stack ``(B, M, N)``
    sharing one noise variance; ``rng`` may then be one generator per row.
    """
    h_hat = np.asarray(est.h_hat, dtype=np.complex128)
    rows, cols = h_hat.shape[-2:]
    if (rows, cols) != tuple(predictor.shape):
        raise ValueError(f"predictor trained for {predictor.shape}, estimate is {rows}x{cols}")
    single = h_hat.ndim == 2
    noise_ratio = est.noise_variance / predictor.signal_power
    t_s = select_entry_step(noise_ratio, s)
    observed = to_diffusion(h_hat.reshape((-1, rows, cols)), predictor.signal_power)
    x = np.sqrt(s.alpha_bar[t_s - 1]) * observed
    cond = observed if predictor.conditional else None
    x0 = run_reverse_chain(predictor, x, t_s, s, rng, cond)
    out = from_diffusion(x0, rows, cols, predictor.signal_power)
    return out[0] if single else out.reshape(h_hat.shape)


def train_noise_predictor(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    s: NoiseSchedule,
    cfg: TrainConfig,
    *,
    embed_dim: int = 32,
    hidden: tuple[int, ...] = (128, 128, 128),
    conditional: bool = False,
    power_samples: int = 8192,
    history: list[float] | None = None,
) -> NoisePredictor:
    """Fit a noise predictor on channels drawn from ``sampler``.

    ``sampler(rng, count)`` returns ``(count, M, N)`` complex matrices. Each
    step draws clean channels, a uniform step per sample and Gaussian noise,
    and takes one SGD step on the mean squared noise-prediction error.
    The per-entry signal power is estimated from ``power_samples`` draws
    before training.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    probe = sampler(rng, power_samples)
    rows, cols = probe.shape[-2:]
    power = float(np.mean(np.abs(probe) ** 2))
    pred = NoisePredictor.create(
        rows, cols, s.steps, rng, embed_dim=embed_dim, hidden=hidden,
        conditional=conditional, signal_power=power,
    )
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        epoch_loss = 0.0
        for _ in range(cfg.steps_per_epoch):
            x0 = to_diffusion(sampler(rng, cfg.batch_size), power)
            t = rng.integers(1, s.steps + 1, cfg.batch_size)
            eps = rng.standard_normal(x0.shape)
            x_t = q_sample(x0, t, eps, s)
            cond = None
            if conditional:
                # observation at an entry step no earlier than t
                t_obs = rng.integers(t, s.steps + 1)
                ratio = np.sqrt(s.noise_ratio()[t_obs - 1])[:, None]
                cond = x0 + ratio * rng.standard_normal(x0.shape)
            out, cache = forward(pred.core, pred.features(x_t, t, cond))
            diff = out - eps
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise TrainingDiverged("noise predictor", epoch)
            grads, _ = backward(pred.core, cache, 2.0 * diff / diff.size)
            sgd_step(pred.core, grads, lr)
            epoch_loss += loss
        if history is not None:
            history.append(epoch_loss / cfg.steps_per_epoch)
    return pred


def noise_prediction_loss(pred: NoisePredictor, x0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> float:
    """Mean squared error between injected and predicted noise."""
    x_t = q_sample(x0, t, eps, s)
    return float(np.mean((pred(x_t, t) - eps) ** 2))
