"""Multipath channel generation, AWGN transmission and pilot CSI noise.

Three channel families are available through ``LinkConfig.channel_mode``:

``ray_tracing``
    every link sums ``L`` independently drawn paths (random gains and
    delays), so entries are i.i.d. and approximately CN(0, 1).
``rayleigh``
    entries drawn i.i.d. CN(0, 1) directly.
``site``
    a fixed deployment: each link has one deterministic line-of-sight path
    whose delay follows the user's bearing on a half-wavelength receive
    array, plus ``L`` random scattered paths. ``rician_k_db`` sets the
    power ratio of the two parts. Unit average link power is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import as_complex_matrix, crandn

SPEED_OF_LIGHT = 299_792_458.0
MAX_DELAY = 1e-6
CHANNEL_MODES = ("ray_tracing", "rayleigh", "site")


@dataclass(frozen=True)
class PathSet:
    gains: np.ndarray  # complex, one per path
    delays: np.ndarray  # seconds
    carrier_frequency: float = 3.5e9
    rx_gain: float = 1.0
    tx_gain: float = 1.0

    def __post_init__(self):
        gains = np.atleast_1d(np.asarray(self.gains, dtype=np.complex128))
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        if gains.size < 1 or gains.shape != delays.shape:
            raise ValueError("need at least one path and one delay per gain")
        if np.any(delays < 0) or not np.all(np.isfinite(gains)):
            raise ValueError("delays must be nonnegative and gains finite")
        if not (self.carrier_frequency > 0 and self.rx_gain > 0 and self.tx_gain > 0):
            raise ValueError("carrier frequency and beam gains must be positive")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "delays", delays)

    @property
    def path_count(self) -> int:
        return self.gains.size


@dataclass
class LinkConfig:
    users: int = 2
    rx_antennas: int = 2
    block_length: int = 128
    power: float = 1.0
    data_noise_variance: float = 0.0
    pilot_noise_variance: float | None = None  # None: sigma^2 / P
    path_count: int = 4
    rng_seed: int = 0
    channel_mode: str = "site"
    carrier_frequency: float = 3.5e9
    rician_k_db: float = 15.0
    user_sines: tuple[float, ...] | None = None
    site_seed: int = 2024

    def __post_init__(self):
        for name in ("users", "rx_antennas", "block_length", "path_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rx_antennas < self.users:
            raise ValueError(f"zero-forcing needs rx_antennas >= users ({self.rx_antennas} < {self.users})")
        if not self.power > 0:
            raise ValueError("power must be positive")
        if self.data_noise_variance < 0 or (self.pilot_noise_variance or 0) < 0:
            raise ValueError("noise variances must be nonnegative")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"unknown channel mode {self.channel_mode!r}; expected one of {CHANNEL_MODES}")
        if self.user_sines is not None and len(self.user_sines) != self.users:
            raise ValueError("user_sines needs one entry per user")

    @property
    def pilot_variance(self) -> float:
        if self.pilot_noise_variance is None:
            return self.data_noise_variance / self.power
        return self.pilot_noise_variance

    @property
    def shape(self) -> tuple[int, int]:
        return self.rx_antennas, self.users


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray
    paths: tuple[tuple[PathSet, ...], ...] = field(default=(), repr=False)  # paths[j][i]


@dataclass(frozen=True)
class CsiEstimate:
    h_hat: np.ndarray
    noise_variance: float


def sample_paths(cfg: LinkConfig, rng: np.random.Generator) -> PathSet:
    """``L`` paths with CN(0, 1/L) gains and delays uniform on [0, 1 us]."""
    gains = crandn(rng, cfg.path_count, 1.0 / cfg.path_count)
    delays = rng.uniform(0.0, MAX_DELAY, cfg.path_count)
    return PathSet(gains, delays, cfg.carrier_frequency)


def link_response(p: PathSet) -> complex:
    """Beam-aligned narrowband response ``sum a_l exp(-j 2 pi tau_l f) G_rx G_tx``."""
    phase = -2.0 * np.pi * (p.delays * p.carrier_frequency)
    return complex(np.sum(p.gains * np.exp(1j * phase)) * p.rx_gain * p.tx_gain)


def user_sines(cfg: LinkConfig) -> np.ndarray:
    """Bearing sines of the users in the fixed site.

    Default spacing ``2/M`` puts users on orthogonal beams of the receive array.
    """
    if cfg.user_sines is not None:
        return np.asarray(cfg.user_sines, dtype=float)
    n, m = cfg.users, cfg.rx_antennas
    return (2.0 * np.arange(n) - (n - 1)) / m


def site_los_delays(cfg: LinkConfig) -> np.ndarray:
    """``(M, N)`` line-of-sight delays of the fixed site.

    User distances are drawn once from ``site_seed`` so every realization of
    the site shares them; antenna ``j`` sits ``j`` half-wavelengths along
    the array.
    """
    site_rng = np.random.default_rng(cfg.site_seed)
    distances = site_rng.uniform(20.0, 200.0, cfg.users)
    half_wave = SPEED_OF_LIGHT / cfg.carrier_frequency / 2.0
    offsets = np.arange(cfg.rx_antennas)[:, None] * half_wave * user_sines(cfg)[None, :]
    return (distances[None, :] - offsets) / SPEED_OF_LIGHT


def _draw_path_arrays(cfg: LinkConfig, rng: np.random.Generator, count: int):
    m, n, L = cfg.rx_antennas, cfg.users, cfg.path_count
    gains = crandn(rng, (count, m, n, L), 1.0 / L)
    delays = rng.uniform(0.0, MAX_DELAY, (count, m, n, L))
    if cfg.channel_mode == "site":
        k = 10.0 ** (cfg.rician_k_db / 10.0)
        los_gain = np.full((count, m, n, 1), np.sqrt(k / (1.0 + k)), dtype=np.complex128)
        los_delay = np.broadcast_to(site_los_delays(cfg)[None, :, :, None], (count, m, n, 1))
        gains = np.concatenate([los_gain, gains * np.sqrt(1.0 / (1.0 + k))], axis=-1)
        delays = np.concatenate([los_delay, delays], axis=-1)
    return gains, delays


def _responses(gains: np.ndarray, delays: np.ndarray, f: float) -> np.ndarray:
    return np.sum(gains * np.exp(-2j * np.pi * (delays * f)), axis=-1)


def sample_channels(cfg: LinkConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``count`` channel matrices at once, shape ``(count, M, N)``."""
    if cfg.channel_mode == "rayleigh":
        return crandn(rng, (count, cfg.rx_antennas, cfg.users))
    gains, delays = _draw_path_arrays(cfg, rng, count)
    return _responses(gains, delays, cfg.carrier_frequency)


def build_channel(cfg: LinkConfig, rng: np.random.Generator) -> ChannelRealization:
    """One ``M x N`` channel; path-based modes keep the per-link path sets."""
    if cfg.channel_mode == "rayleigh":
        return ChannelRealization(crandn(rng, cfg.shape))
    gains, delays = _draw_path_arrays(cfg, rng, 1)
    return channel_from_paths(
        [PathSet(gains[0, j, i], delays[0, j, i], cfg.carrier_frequency) for i in range(cfg.users)]
        for j in range(cfg.rx_antennas)
    )


def channel_from_paths(paths) -> ChannelRealization:
    """Realization from explicit per-link path sets, ``paths[j][i]`` for antenna j, user i."""
    paths = tuple(tuple(row) for row in paths)
    h = np.array([[link_response(p) for p in row] for row in paths])
    return ChannelRealization(h, paths)


def transmit(h, x, noise_variance: float, rng: np.random.Generator) -> np.ndarray:
    """``Y = H X + Z`` with i.i.d. CN(0, noise_variance) noise."""
    h, x = as_complex_matrix(h), as_complex_matrix(x)
    if h.shape[-1] != x.shape[-2]:
        raise ValueError(f"channel {h.shape[-2:]} cannot act on symbols {x.shape[-2:]}")
    clean = h @ x
    if noise_variance == 0:
        return clean
    return clean + crandn(rng, clean.shape, noise_variance)


def estimate_csi(truth, noise_variance: float, rng: np.random.Generator) -> CsiEstimate:
    """Pilot-based estimate ``H + Z_H`` with ``Z_H`` i.i.d. CN(0, noise_variance)."""
    if noise_variance < 0:
        raise ValueError("pilot noise variance must be nonnegative")
    h = truth.h if isinstance(truth, ChannelRealization) else as_complex_matrix(truth)
    if noise_variance == 0:
        return CsiEstimate(h.copy(), 0.0)
    return CsiEstimate(h + crandn(rng, h.shape, noise_variance), float(noise_variance))
