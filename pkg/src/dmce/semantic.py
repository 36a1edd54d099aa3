"""Toy multi-source segmentation task, learned codecs and the link pipeline.

Each scene is a class map built from a few rectangles over background. User
``i`` observes it through its own modality: a class-to-intensity table plus
pixel noise. Modality 0 renders the last two classes with low contrast; the
other modalities separate them clearly, but each hides one rectangle. Fusing users is therefore
needed for a good segmentation.

Symbol packing: a JSCC encoder emits ``2K`` reals read as interleaved
``(re, im)`` pairs. The JSCC decoder input is the equalized symbols of every
user in ascending user order, each unpacked the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .channel import CsiEstimate, LinkConfig, sample_channels
from .diffusion import NoiseSchedule, enhance_csi
from .linalg import crandn, solve_least_squares
from .neuralnet import Mlp, NoisePredictor, TrainConfig, TrainingDiverged, backward, forward, read_mlp, sgd_step, write_mlp

PROB_CLAMP = 1e-12
MODES = ("dmce", "no_dmce", "perfect_csi", "y_oriented")


class PowerNormalizationError(ValueError):
    """Encoder produced an all-zero symbol block."""


@dataclass
class SceneConfig:
    height: int = 16
    width: int = 16
    classes: int = 4
    rectangles: int = 3
    min_size: int = 3
    max_size: int = 8
    pixel_noise: float = 0.3
    occlude: bool = True
    block: int = 2  # rectangle corners and sides snap to multiples of this

    @property
    def cells(self) -> int:
        return self.height * self.width


@dataclass
class Scene:
    truth: np.ndarray  # (height, width) labels
    modalities: np.ndarray  # (users, height * width)


def intensity_table(modality: int, classes: int) -> np.ndarray:
    """Class -> pixel intensity for one modality; background is always 0."""
    g = np.arange(1, classes)
    distinct = np.concatenate([[0.0], (-1.0) ** g * (0.5 + 0.5 * (g - 1) / max(classes - 2, 1))])
    if modality == 0:
        if classes > 2:
            # low contrast between the last two classes
            distinct[-1] = distinct[-2] + 0.5 * np.sign(distinct[-2])
        return distinct
    fg = np.roll(distinct[1:][::-1], modality - 1)
    return np.concatenate([[0.0], fg])


def generate_scene(rng: np.random.Generator, cfg: SceneConfig, users: int = 2) -> Scene:
    """Random rectangles painted in order over background, rendered per modality."""
    b = cfg.block
    rows, cols = cfg.height // b, cfg.width // b
    lo, hi = -(-cfg.min_size // b), cfg.max_size // b
    truth = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    boxes = []
    for _ in range(cfg.rectangles):
        h = rng.integers(lo, hi + 1)
        w = rng.integers(lo, hi + 1)
        y = rng.integers(0, rows - h + 1)
        x = rng.integers(0, cols - w + 1)
        label = rng.integers(1, cfg.classes)
        box = (y * b, x * b, h * b, w * b)
        truth[box[0] : box[0] + box[2], box[1] : box[1] + box[3]] = label
        boxes.append(box)
    images = np.empty((users, cfg.cells))
    for k in range(users):
        labels = truth
        if k > 0 and cfg.occlude and boxes:
            y, x, h, w = boxes[rng.integers(len(boxes))]
            labels = truth.copy()
            labels[y : y + h, x : x + w] = 0
        clean = intensity_table(k, cfg.classes)[labels].ravel()
        images[k] = clean + cfg.pixel_noise * rng.standard_normal(cfg.cells)
    return Scene(truth, images)


def expected_background_fraction(cfg: SceneConfig) -> float:
    """Mean fraction of background cells, by enumerating rectangle placements."""
    b = cfg.block
    rows, cols = cfg.height // b, cfg.width // b
    sizes = range(-(-cfg.min_size // b), cfg.max_size // b + 1)
    cover = np.zeros((rows, cols))
    for h in sizes:
        for w in sizes:
            placements = np.zeros((rows, cols))
            for y in range(rows - h + 1):
                for x in range(cols - w + 1):
                    placements[y : y + h, x : x + w] += 1
            cover += placements / ((rows - h + 1) * (cols - w + 1))
    cover /= len(sizes) ** 2
    return float(np.mean((1.0 - cover) ** cfg.rectangles))


# -- codecs ------------------------------------------------------------------


@dataclass
class Codecs:
    sem_enc: list[Mlp]
    jscc_enc: list[Mlp]
    jscc_dec: Mlp
    sem_dec: Mlp
    classes: int
    cells: int

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        users: int = 2,
        block_length: int = 128,
        features: int = 64,
        scene: SceneConfig | None = None,
        hidden: int = 256,
    ) -> "Codecs":
        scene = scene or SceneConfig()
        sem_enc = [Mlp.create([scene.cells, hidden, features], rng) for _ in range(users)]
        # the channel codecs are single affine maps; a hidden layer there
        # slowed plain-SGD training without improving the decoded maps
        jscc_enc = [Mlp.create([features, 2 * block_length], rng) for _ in range(users)]
        jscc_dec = Mlp.create([2 * users * block_length, users * features], rng)
        sem_dec = Mlp.create([users * features, hidden, scene.classes * scene.cells], rng)
        return cls(sem_enc, jscc_enc, jscc_dec, sem_dec, scene.classes, scene.cells)

    @property
    def users(self) -> int:
        return len(self.sem_enc)

    @property
    def block_length(self) -> int:
        return self.jscc_enc[0].out_dim // 2

    def networks(self) -> list[Mlp]:
        return [*self.sem_enc, *self.jscc_enc, self.jscc_dec, self.sem_dec]

    def copy(self) -> "Codecs":
        return Codecs(
            [n.copy() for n in self.sem_enc], [n.copy() for n in self.jscc_enc],
            self.jscc_dec.copy(), self.sem_dec.copy(), self.classes, self.cells,
        )

    def manifest(self) -> dict:
        return {
            "users": self.users,
            "classes": self.classes,
            "cells": self.cells,
            "order": ["sem_enc"] * self.users + ["jscc_enc"] * self.users + ["jscc_dec", "sem_dec"],
            "dims": [n.dims for n in self.networks()],
        }

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            header = json.dumps(self.manifest(), sort_keys=True).encode()
            fh.write(len(header).to_bytes(4, "little"))
            fh.write(header)
            for net in self.networks():
                write_mlp(fh, net)

    @classmethod
    def load(cls, path) -> "Codecs":
        with open(path, "rb") as fh:
            size = int.from_bytes(fh.read(4), "little")
            manifest = json.loads(fh.read(size))
            nets = [read_mlp(fh)[0] for _ in manifest["dims"]]
        for net, dims in zip(nets, manifest["dims"]):
            if net.dims != dims:
                raise ValueError(f"codec checkpoint network dims {net.dims} disagree with manifest {dims}")
        n = manifest["users"]
        return cls(nets[:n], nets[n : 2 * n], nets[2 * n], nets[2 * n + 1], manifest["classes"], manifest["cells"])


def semantic_encode(enc: Mlp, image: np.ndarray) -> np.ndarray:
    return forward(enc, image)[0]


def normalize_power(raw: np.ndarray, power: float) -> np.ndarray:
    """Scale each row of interleaved reals to total power ``power * K``."""
    raw = np.asarray(raw, dtype=float)
    k = raw.shape[-1] // 2
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise PowerNormalizationError("cannot normalize an all-zero symbol block")
    return raw * (np.sqrt(power * k) / norm)


def normalize_power_backward(raw: np.ndarray, power: float, upstream: np.ndarray) -> np.ndarray:
    k = raw.shape[-1] // 2
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / norm
    return (np.sqrt(power * k) / norm) * (upstream - u * np.sum(u * upstream, axis=-1, keepdims=True))


def pack_symbols(reals: np.ndarray) -> np.ndarray:
    """Interleaved ``(re, im)`` reals -> complex symbols."""
    return reals[..., 0::2] + 1j * reals[..., 1::2]


def unpack_symbols(symbols: np.ndarray) -> np.ndarray:
    out = np.empty(symbols.shape[:-1] + (2 * symbols.shape[-1],))
    out[..., 0::2] = symbols.real
    out[..., 1::2] = symbols.imag
    return out


def jscc_encode(enc: Mlp, features: np.ndarray, power: float, block_length: int) -> np.ndarray:
    """Features -> ``K`` complex symbols with ``||x||^2 = P K``."""
    raw = forward(enc, features)[0]
    if raw.shape[-1] != 2 * block_length:
        raise ValueError(f"encoder emits {raw.shape[-1]} reals, need {2 * block_length}")
    return pack_symbols(normalize_power(raw, power))


def jscc_decode(dec: Mlp, x_hat: np.ndarray) -> np.ndarray:
    """Fuse equalized symbols ``(..., N, K)`` of all users into one feature vector."""
    x_hat = np.asarray(x_hat)
    reals = unpack_symbols(x_hat).reshape(x_hat.shape[:-2] + (-1,))
    return forward(dec, reals)[0]


def softmax_cells(logits: np.ndarray, classes: int) -> np.ndarray:
    z = logits.reshape(logits.shape[:-1] + (-1, classes))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def semantic_decode(dec: Mlp, features: np.ndarray, classes: int) -> np.ndarray:
    """Per-cell class probabilities, shape ``(..., cells, classes)``."""
    return softmax_cells(forward(dec, features)[0], classes)


def predict_map(probs: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.argmax(probs, axis=-1).reshape(probs.shape[:-2] + (height, width))


def cross_entropy(probs: np.ndarray, truth: np.ndarray) -> float:
    """Per-class binary cross-entropy on one-hot targets, summed over classes, mean over cells."""
    probs = np.asarray(probs, dtype=float)
    classes = probs.shape[-1]
    onehot = np.eye(classes)[np.asarray(truth).reshape(probs.shape[:-1])]
    if onehot.shape != probs.shape:
        raise ValueError(f"prediction {probs.shape} and truth {np.shape(truth)} disagree")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_cell = -np.sum(onehot * np.log(p) + (1.0 - onehot) * np.log(1.0 - p), axis=-1)
    return float(np.mean(per_cell))


def cross_entropy_grad_logits(probs: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to the flat logits."""
    classes = probs.shape[-1]
    onehot = np.eye(classes)[np.asarray(truth).reshape(probs.shape[:-1])]
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    dp = np.where(inside, -onehot / p + (1.0 - onehot) / (1.0 - p), 0.0)
    dz = probs * (dp - np.sum(probs * dp, axis=-1, keepdims=True))
    dz /= np.prod(probs.shape[:-1])
    return dz.reshape(probs.shape[:-2] + (-1,))


# -- forward/backward through the whole codec chain -------------------------


@dataclass
class EncodeResult:
    x: np.ndarray  # (B, N, K) complex
    caches: list = field(repr=False, default_factory=list)


def encode_batch(codecs: Codecs, images: np.ndarray, power: float, keep_cache: bool = False) -> EncodeResult:
    """``images`` is ``(B, N, cells)``; returns normalized symbols ``(B, N, K)``."""
    xs, caches = [], []
    for i in range(codecs.users):
        f, c1 = forward(codecs.sem_enc[i], images[:, i])
        raw, c2 = forward(codecs.jscc_enc[i], f)
        xs.append(pack_symbols(normalize_power(raw, power)))
        if keep_cache:
            caches.append((c1, c2, raw))
    return EncodeResult(np.stack(xs, axis=1), caches)


def decoder_loss_and_grads(codecs: Codecs, x_hat: np.ndarray, truth: np.ndarray):
    """Loss, decoder gradients and the gradient w.r.t. the decoder input reals."""
    reals = unpack_symbols(x_hat).reshape(x_hat.shape[0], -1)
    f_hat, c3 = forward(codecs.jscc_dec, reals)
    logits, c4 = forward(codecs.sem_dec, f_hat)
    probs = softmax_cells(logits, codecs.classes)
    loss = cross_entropy(probs, truth)
    g_sem, g_f = backward(codecs.sem_dec, c4, cross_entropy_grad_logits(probs, truth))
    g_jscc, g_in = backward(codecs.jscc_dec, c3, g_f)
    return loss, g_jscc, g_sem, g_in


def stage1_loss_and_grads(codecs: Codecs, images: np.ndarray, truth: np.ndarray, power: float):
    """Identity-channel loss and gradients for all four networks, in ``networks()`` order."""
    enc = encode_batch(codecs, images, power, keep_cache=True)
    loss, g_jscc, g_sem, g_in = decoder_loss_and_grads(codecs, enc.x, truth)
    two_k = 2 * codecs.block_length
    sem_grads, jscc_grads = [], []
    for i, (c1, c2, raw) in enumerate(enc.caches):
        g_x = g_in[:, i * two_k : (i + 1) * two_k]
        g_raw = normalize_power_backward(raw, power, g_x)
        g_je, g_f = backward(codecs.jscc_enc[i], c2, g_raw)
        g_se, _ = backward(codecs.sem_enc[i], c1, g_f)
        sem_grads.append(g_se)
        jscc_grads.append(g_je)
    return loss, [*sem_grads, *jscc_grads, g_jscc, g_sem]


def scene_batch(rng: np.random.Generator, cfg: SceneConfig, users: int, count: int):
    scenes = [generate_scene(rng, cfg, users) for _ in range(count)]
    return np.stack([s.modalities for s in scenes]), np.stack([s.truth for s in scenes])


def train_stage1(
    codecs: Codecs, scene_cfg: SceneConfig, cfg: TrainConfig, power: float = 1.0,
    history: list[float] | None = None,
) -> Codecs:
    """Train all codec networks end to end through a noiseless identity channel (in place)."""
    rng = np.random.default_rng(cfg.rng_seed)
    nets = codecs.networks()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            images, truth = scene_batch(rng, scene_cfg, codecs.users, cfg.batch_size)
            loss, grads = stage1_loss_and_grads(codecs, images, truth, power)
            if not np.isfinite(loss):
                raise TrainingDiverged("stage 1", epoch)
            for net, g in zip(nets, grads):
                sgd_step(net, g, lr)
            total += loss
        if history is not None:
            history.append(total / cfg.steps_per_epoch)
    return codecs


# -- link pipeline -----------------------------------------------------------


@dataclass
class Trial:
    """Random draws of one link use; noises are unit-variance and scaled later."""

    scene: Scene
    h: np.ndarray
    data_noise: np.ndarray
    pilot_noise: np.ndarray


def draw_trial(link: LinkConfig, scene_cfg: SceneConfig, rng: np.random.Generator) -> Trial:
    scene = generate_scene(rng, scene_cfg, link.users)
    h = sample_channels(link, rng, 1)[0]
    data = crandn(rng, (link.rx_antennas, link.block_length))
    pilot = crandn(rng, link.shape)
    return Trial(scene, h, data, pilot)


def equalize(h_used: np.ndarray, y: np.ndarray) -> np.ndarray:
    return solve_least_squares(h_used, y)


def run_links(
    trials: Sequence[Trial],
    codecs: Codecs,
    link: LinkConfig,
    mode: str,
    scene_cfg: SceneConfig,
    dmce: NoisePredictor | None = None,
    schedule: NoiseSchedule | None = None,
    sampler_rngs: Sequence[np.random.Generator] | None = None,
    y_dmce: NoisePredictor | None = None,
) -> dict:
    """Push a batch of trials through encode, channel, estimation, equalization and decode.

    Returns per-trial arrays: predicted maps, mIoU, initial and used-CSI NMSE
    (dB) and symbol MSE.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    images = np.stack([t.scene.modalities for t in trials])
    truth = np.stack([t.scene.truth for t in trials])
    h = np.stack([t.h for t in trials])
    sigma2, sigma_h2 = link.data_noise_variance, link.pilot_variance
    x = encode_batch(codecs, images, link.power).x
    y = h @ x + np.sqrt(sigma2) * np.stack([t.data_noise for t in trials])
    h_hat = h + np.sqrt(sigma_h2) * np.stack([t.pilot_noise for t in trials])
    if mode == "perfect_csi":
        h_used = h
    elif mode == "no_dmce":
        h_used = h_hat
    elif mode == "dmce":
        if dmce is None or schedule is None:
            raise ValueError("dmce mode needs a trained predictor and its schedule")
        h_used = enhance_csi(dmce, CsiEstimate(h_hat, sigma_h2), schedule, sampler_rngs)
    else:
        if y_dmce is None or schedule is None:
            raise ValueError("y_oriented mode needs a predictor trained on received columns")
        h_used = h_hat
        b, m, k = y.shape
        cols = np.swapaxes(y, 1, 2).reshape(b * k, m, 1)
        rngs = [g for g in sampler_rngs for _ in range(k)] if sampler_rngs is not None else None
        clean = enhance_csi(y_dmce, CsiEstimate(cols, sigma2), schedule, rngs)
        y = np.swapaxes(clean.reshape(b, k, m), 1, 2)
    x_hat = equalize(h_used, y)
    reals = unpack_symbols(x_hat).reshape(len(trials), -1)
    probs = semantic_decode(codecs.sem_dec, forward(codecs.jscc_dec, reals)[0], codecs.classes)
    pred = predict_map(probs, scene_cfg.height, scene_cfg.width)
    return {
        "pred": pred,
        "miou": np.array([metrics.miou(p, t, codecs.classes) for p, t in zip(pred, truth)]),
        "nmse_db_initial": metrics.nmse_db(h_hat, h),
        "nmse_db_used": metrics.nmse_db(h_used, h),
        "symbol_mse": np.mean(np.abs(x_hat - x) ** 2, axis=(1, 2)),
        "loss": cross_entropy(probs, truth),
    }


def run_link(
    link: LinkConfig,
    codecs: Codecs,
    rng: np.random.Generator,
    dmce: NoisePredictor | None = None,
    schedule: NoiseSchedule | None = None,
    scene_cfg: SceneConfig | None = None,
    mode: str | None = None,
    sampler_rng: np.random.Generator | None = None,
) -> dict:
    """Single end-to-end link use.

    Without an explicit ``mode`` the link enhances the CSI when ``dmce`` is
    given and uses the raw pilot estimate otherwise.
    """
    scene_cfg = scene_cfg or SceneConfig()
    mode = mode or ("dmce" if dmce is not None else "no_dmce")
    trial = draw_trial(link, scene_cfg, rng)
    out = run_links([trial], codecs, link, mode, scene_cfg, dmce, schedule, [sampler_rng or rng])
    return {
        "pred": out["pred"][0],
        "truth": trial.scene.truth,
        "miou": float(out["miou"][0]),
        "nmse_db_initial": float(out["nmse_db_initial"][0]),
        "nmse_db_used": float(out["nmse_db_used"][0]),
        "symbol_mse": float(out["symbol_mse"][0]),
    }


def enhanced_pool(
    link: LinkConfig,
    snr_db: Sequence[float],
    size: int,
    dmce: NoisePredictor,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """Per-SNR ``(sigma2, H, H_enhanced)`` pools for stage-3 training."""
    pools = []
    for snr in snr_db:
        sigma2 = metrics.snr_db_to_noise_variance(snr, link.power)
        pilot = sigma2 / link.power if link.pilot_noise_variance is None else link.pilot_noise_variance
        h = sample_channels(link, rng, size)
        h_hat = h + crandn(rng, h.shape, pilot)
        pools.append((sigma2, h, enhance_csi(dmce, CsiEstimate(h_hat, pilot), schedule, rng)))
    return pools


def train_stage3(
    codecs: Codecs,
    pools: Sequence[tuple[float, np.ndarray, np.ndarray]],
    scene_cfg: SceneConfig,
    cfg: TrainConfig,
    power: float = 1.0,
    history: list[float] | None = None,
) -> Codecs:
    """Fine-tune the two decoders over the noisy, DMCE-equalized channel (in place).

    Encoders stay frozen; enhancement and equalization are constants of the
    forward pass, so no gradient flows through them.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            images, truth = scene_batch(rng, scene_cfg, codecs.users, cfg.batch_size)
            x = encode_batch(codecs, images, power).x
            which = rng.integers(len(pools), size=cfg.batch_size)
            pick = np.array([rng.integers(pools[w][1].shape[0]) for w in which])
            h = np.stack([pools[w][1][p] for w, p in zip(which, pick)])
            h_used = np.stack([pools[w][2][p] for w, p in zip(which, pick)])
            sigma2 = np.array([pools[w][0] for w in which])[:, None, None]
            y = h @ x + np.sqrt(sigma2) * crandn(rng, (cfg.batch_size, h.shape[1], x.shape[2]))
            x_hat = equalize(h_used, y)
            loss, g_jscc, g_sem, _ = decoder_loss_and_grads(codecs, x_hat, truth)
            if not np.isfinite(loss):
                raise TrainingDiverged("stage 3", epoch)
            sgd_step(codecs.jscc_dec, g_jscc, lr)
            sgd_step(codecs.sem_dec, g_sem, lr)
            total += loss
        if history is not None:
            history.append(total / cfg.steps_per_epoch)
    return codecs
