"""Experiment configuration, three-stage training, SNR sweeps and CSI files.

Config files are flat ``key = value`` text. Keys are dotted (``link.users``)
and may be grouped under ``[section]`` headers, which prefix the keys that
follow. ``#`` starts a comment. Lists are comma separated.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import metrics
from .channel import CsiEstimate, LinkConfig, sample_channels
from .diffusion import NoiseSchedule, enhance_csi, linear_schedule, train_noise_predictor
from .neuralnet import NoisePredictor, TrainConfig, load_predictor, save_predictor
from .semantic import (
    MODES, Codecs, SceneConfig, Trial, draw_trial, encode_batch, enhanced_pool, run_links,
    train_stage1, train_stage3,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "snr_db", "mode", "trials", "mean_miou", "ci95_miou",
    "mean_nmse_db_initial", "mean_nmse_db_enhanced", "mean_symbol_mse",
)
# mode slot used for the link stream, so every mode sees the same trials
LINK_STREAM = 0xFFFF

STAGE1_FILE = "stage1_codecs.bin"
STAGE2_FILE = "stage2_dmce.bin"
STAGE3_FILE = "stage3_codecs.bin"
YDM_FILE = "y_dmce.bin"
MANIFEST_FILE = "manifest.json"


class ConfigError(ValueError):
    """Malformed configuration or input file."""


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return linear_schedule(self.steps, self.beta_start, self.beta_end)


@dataclass
class CodecConfig:
    features: int = 64
    hidden: int = 256


@dataclass
class DmceConfig:
    embed_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)
    conditional: bool = False
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.05, decay=0.97, epochs=60, batch_size=128, steps_per_epoch=200)
    )


@dataclass
class YDmceConfig:
    embed_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.05, decay=0.97, epochs=30, batch_size=256, steps_per_epoch=100)
    )


@dataclass
class Stage3Config:
    pool_size: int = 1024
    snr_db: tuple[float, ...] = (-4, -2, 0, 2, 4, 6, 8, 10, 12)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.5, decay=0.98, epochs=40, batch_size=32, steps_per_epoch=100)
    )


@dataclass
class SweepConfig:
    snr_db: tuple[float, ...] = (-4, -2, 0, 2, 4, 6, 8, 10, 12)
    trials: int = 1000
    modes: tuple[str, ...] = ("dmce", "no_dmce", "perfect_csi")


@dataclass
class ExperimentConfig:
    seed: int = 7
    out: str = "runs/default"
    link: LinkConfig = field(default_factory=LinkConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    stage1: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1.0, decay=0.99, epochs=100, batch_size=32, steps_per_epoch=100)
    )
    dmce: DmceConfig = field(default_factory=DmceConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    y_dmce: YDmceConfig = field(default_factory=YDmceConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if not self.sweep.modes:
            raise ConfigError("sweep.modes must not be empty")
        if self.sweep.trials < 1:
            raise ConfigError("sweep.trials must be >= 1")
        if not self.sweep.snr_db:
            raise ConfigError("sweep.snr_db must not be empty")
        bad = [m for m in self.sweep.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown sweep modes {bad}; expected a subset of {MODES}")


# -- config parsing ----------------------------------------------------------


def _convert(raw: str, like: Any, where: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw, 0)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if like and isinstance(like[0], str):
                return tuple(items)
            if like and isinstance(like[0], int) and not isinstance(like[0], bool):
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(like).__name__}") from exc


# fields whose default is None and therefore carry no type hint at runtime
_OPTIONAL_KINDS = {"pilot_noise_variance": 0.0, "user_sines": (0.0,)}


def _assign(obj, dotted: list[str], raw: str, where: str):
    name = dotted[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"{where}: unknown field {'.'.join(dotted)!r}")
    current = getattr(obj, name)
    if len(dotted) > 1:
        _assign(current, dotted[1:], raw, where)
        return
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{where}: {name!r} is a section, not a value")
    like = current if current is not None else _OPTIONAL_KINDS.get(name, "")
    value = None if raw.lower() == "none" else _convert(raw, like, where)
    object.__setattr__(obj, name, value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        full = f"{section}.{key}" if section else key
        _assign(cfg, full.split("."), raw, where)
    try:
        # re-run validation of every nested dataclass
        _revalidate(cfg)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def _revalidate(obj):
    for f in dataclasses.fields(obj):
        child = getattr(obj, f.name)
        if dataclasses.is_dataclass(child):
            _revalidate(child)
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        post()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


# -- seeds -------------------------------------------------------------------


def stable_hash(*parts: int) -> int:
    """64-bit hash of a tuple of small integers, stable across runs and platforms."""
    data = struct.pack(f"<{len(parts)}q", *parts)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def trial_seed(master: int, snr_index: int, mode_index: int, trial_index: int) -> int:
    """``master XOR hash(snr_index, mode_index, trial_index)`` as an unsigned 64-bit seed."""
    return (master & 0xFFFFFFFFFFFFFFFF) ^ stable_hash(snr_index, mode_index, trial_index)


def stage_seed(master: int, stage: int) -> int:
    return int(np.random.SeedSequence([master & 0xFFFFFFFFFFFFFFFF, stage]).generate_state(1, np.uint64)[0])


# -- training ----------------------------------------------------------------


def _with_seed(tc: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(tc, rng_seed=seed)


def channel_sampler(link: LinkConfig):
    return lambda rng, count: sample_channels(link, rng, count)


def received_column_sampler(link: LinkConfig, codecs: Codecs, scene: SceneConfig):
    """Noiseless received columns ``H x_k`` from the frozen stage-1 encoders."""
    from .semantic import scene_batch

    def sample(rng, count):
        scenes = max(1, -(-count // link.block_length))
        images, _ = scene_batch(rng, scene, link.users, scenes)
        x = encode_batch(codecs, images, link.power).x
        h = sample_channels(link, rng, scenes)
        cols = np.swapaxes(h @ x, 1, 2).reshape(-1, link.rx_antennas, 1)
        return cols[rng.permutation(cols.shape[0])[:count]]

    return sample


@dataclass
class TrainedSystem:
    stage1: Codecs
    dmce: NoisePredictor
    stage3: Codecs
    y_dmce: NoisePredictor | None = None
    histories: dict = field(default_factory=dict)


def train_system(cfg: ExperimentConfig, seed: int | None = None) -> TrainedSystem:
    """Run the three training stages in order."""
    seed = cfg.seed if seed is None else seed
    link, schedule = cfg.link, cfg.schedule.build()
    hist: dict[str, list[float]] = {"stage1": [], "stage2": [], "stage3": [], "y_dmce": []}

    log.info("stage 1: codecs through an identity channel")
    init_rng = np.random.default_rng(stage_seed(seed, 0))
    codecs = Codecs.create(init_rng, link.users, link.block_length, cfg.codec.features, cfg.scene, cfg.codec.hidden)
    train_stage1(codecs, cfg.scene, _with_seed(cfg.stage1, stage_seed(seed, 1)), link.power, hist["stage1"])
    stage1 = codecs.copy()

    log.info("stage 2: diffusion noise predictor")
    dmce = train_noise_predictor(
        channel_sampler(link), schedule, _with_seed(cfg.dmce.train, stage_seed(seed, 2)),
        embed_dim=cfg.dmce.embed_dim, hidden=tuple(cfg.dmce.hidden),
        conditional=cfg.dmce.conditional, history=hist["stage2"],
    )

    y_dmce = None
    if "y_oriented" in cfg.sweep.modes:
        log.info("stage 2b: received-signal noise predictor")
        y_dmce = train_noise_predictor(
            received_column_sampler(link, stage1, cfg.scene), schedule,
            _with_seed(cfg.y_dmce.train, stage_seed(seed, 4)),
            embed_dim=cfg.y_dmce.embed_dim, hidden=tuple(cfg.y_dmce.hidden), history=hist["y_dmce"],
        )

    log.info("stage 3: decoders over the enhanced channel")
    pools = enhanced_pool(
        link, cfg.stage3.snr_db, cfg.stage3.pool_size, dmce, schedule,
        np.random.default_rng(stage_seed(seed, 3)),
    )
    train_stage3(codecs, pools, cfg.scene, _with_seed(cfg.stage3.train, stage_seed(seed, 5)), link.power, hist["stage3"])
    return TrainedSystem(stage1, dmce, codecs, y_dmce, hist)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_train(cfg: ExperimentConfig, out: str | Path | None = None, seed: int | None = None) -> Path:
    """Train all stages and write checkpoints plus a manifest to ``out``."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    system = train_system(cfg, seed)
    system.stage1.save(out / STAGE1_FILE)
    save_predictor(out / STAGE2_FILE, system.dmce)
    system.stage3.save(out / STAGE3_FILE)
    files = [STAGE1_FILE, STAGE2_FILE, STAGE3_FILE]
    if system.y_dmce is not None:
        save_predictor(out / YDM_FILE, system.y_dmce)
        files.append(YDM_FILE)
    manifest = {
        "seed": seed,
        "stage_seeds": {str(k): stage_seed(seed, k) for k in range(6)},
        "config": config_to_dict(cfg),
        "checkpoints": {name: _sha256(out / name) for name in files},
        "codec_manifest": system.stage3.manifest(),
        "loss_history": system.histories,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# -- sweep -------------------------------------------------------------------


@dataclass
class LoadedSystem:
    codecs: Codecs
    dmce: NoisePredictor | None
    y_dmce: NoisePredictor | None


def load_system(cfg: ExperimentConfig, ckpt_dir) -> LoadedSystem:
    ckpt_dir = Path(ckpt_dir)
    codecs = Codecs.load(ckpt_dir / STAGE3_FILE)
    link = cfg.link
    if codecs.users != link.users or codecs.block_length != link.block_length or codecs.cells != cfg.scene.cells:
        raise ConfigError(
            f"checkpoint codecs ({codecs.users} users, K={codecs.block_length}, {codecs.cells} cells) "
            f"do not match config ({link.users} users, K={link.block_length}, {cfg.scene.cells} cells)"
        )
    steps = cfg.schedule.steps
    dmce = y_dmce = None
    if (ckpt_dir / STAGE2_FILE).exists():
        try:
            dmce = load_predictor(ckpt_dir / STAGE2_FILE, link.rx_antennas, link.users, steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if (ckpt_dir / YDM_FILE).exists():
        y_dmce = load_predictor(ckpt_dir / YDM_FILE, link.rx_antennas, 1, steps)
    return LoadedSystem(codecs, dmce, y_dmce)


def link_at_snr(link: LinkConfig, snr_db: float) -> LinkConfig:
    """Copy of ``link`` with data noise set by ``snr_db``; pilot noise follows unless pinned."""
    return dataclasses.replace(link, data_noise_variance=metrics.snr_db_to_noise_variance(snr_db, link.power))


def run_cell(
    cfg: ExperimentConfig, system: LoadedSystem, snr_index: int, mode: str, seed: int, trials: int | None = None
) -> dict:
    """All trials of one ``(snr, mode)`` point; per-trial arrays plus the point's SNR."""
    trials = trials or cfg.sweep.trials
    snr = cfg.sweep.snr_db[snr_index]
    mode_index = MODES.index(mode)
    link = link_at_snr(cfg.link, snr)
    drawn: list[Trial] = [
        draw_trial(link, cfg.scene, np.random.default_rng(trial_seed(seed, snr_index, LINK_STREAM, k)))
        for k in range(trials)
    ]
    samplers = [np.random.default_rng(trial_seed(seed, snr_index, mode_index, k)) for k in range(trials)]
    out = run_links(
        drawn, system.codecs, link, mode, cfg.scene, system.dmce, cfg.schedule.build(), samplers, system.y_dmce
    )
    out["snr_db"] = snr
    out["mode"] = mode
    return out


def summarize(cell: dict) -> dict:
    m, ci = metrics.mean_ci95(cell["miou"])
    return {
        "snr_db": cell["snr_db"],
        "mode": cell["mode"],
        "trials": len(cell["miou"]),
        "mean_miou": m,
        "ci95_miou": ci,
        "mean_nmse_db_initial": float(np.mean(cell["nmse_db_initial"])),
        "mean_nmse_db_enhanced": float(np.mean(cell["nmse_db_used"])),
        "mean_symbol_mse": float(np.mean(cell["symbol_mse"])),
    }


def sweep_cells(
    cfg: ExperimentConfig, system: LoadedSystem, seed: int | None = None, threads: int = 1
) -> list[dict]:
    """Every ``(snr, mode)`` cell, ordered by SNR then mode regardless of completion order."""
    seed = cfg.seed if seed is None else seed
    jobs = [(i, mode) for i in range(len(cfg.sweep.snr_db)) for mode in cfg.sweep.modes]
    if threads <= 1:
        return [run_cell(cfg, system, i, mode, seed) for i, mode in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: run_cell(cfg, system, job[0], job[1], seed), jobs))


def format_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(
            [format(row[c], ".12g") if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS]
        )
    return buf.getvalue()


def cmd_sweep(
    cfg: ExperimentConfig, ckpt_dir, out: str | Path | None = None, seed: int | None = None, threads: int = 1
) -> Path:
    system = load_system(cfg, ckpt_dir)
    if any(m == "dmce" for m in cfg.sweep.modes) and system.dmce is None:
        raise ConfigError(f"no {STAGE2_FILE} in {ckpt_dir} for the dmce mode")
    if any(m == "y_oriented" for m in cfg.sweep.modes) and system.y_dmce is None:
        raise ConfigError(f"no {YDM_FILE} in {ckpt_dir} for the y_oriented mode")
    rows = [summarize(c) for c in sweep_cells(cfg, system, seed, threads)]
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    path.write_text(format_csv(rows))
    return path


# -- CSI text files ----------------------------------------------------------
#
# Line 1: "M N sigmaH2"; then M lines of N space-separated entries "re+imj",
# every number written with 17 significant digits.


def _fmt_complex(z: complex) -> str:
    return f"{z.real:.17g}{z.imag:+.17g}j"


def format_csi(h: np.ndarray, noise_variance: float) -> str:
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 2:
        raise ValueError("CSI file holds one matrix")
    lines = [f"{h.shape[0]} {h.shape[1]} {noise_variance:.17g}"]
    lines += [" ".join(_fmt_complex(z) for z in row) for row in h]
    return "\n".join(lines) + "\n"


def parse_csi(text: str, source: str = "<csi>") -> CsiEstimate:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{source}: empty CSI file")
    head = lines[0].split()
    try:
        if len(head) != 3:
            raise ValueError
        m, n, var = int(head[0]), int(head[1]), float(head[2])
    except ValueError as exc:
        raise ConfigError(f"{source}:1: header must be 'M N sigmaH2'") from exc
    if m < 1 or n < 1 or not var >= 0:
        raise ConfigError(f"{source}:1: invalid dimensions or noise variance")
    if len(lines) != m + 1:
        raise ConfigError(f"{source}: expected {m} matrix rows, found {len(lines) - 1}")
    h = np.empty((m, n), dtype=np.complex128)
    for j, line in enumerate(lines[1:]):
        entries = line.split()
        if len(entries) != n:
            raise ConfigError(f"{source}:{j + 2}: expected {n} entries, found {len(entries)}")
        try:
            h[j] = [complex(e) for e in entries]
        except ValueError as exc:
            raise ConfigError(f"{source}:{j + 2}: malformed complex entry") from exc
    if not np.all(np.isfinite(h)):
        raise ConfigError(f"{source}: non-finite CSI entry")
    return CsiEstimate(h, var)


def cmd_enhance(
    checkpoint, csi_in, csi_out, schedule: ScheduleConfig | None = None, seed: int = 0
) -> Path:
    """Enhance one CSI file with a trained predictor checkpoint."""
    checkpoint = Path(checkpoint)
    if checkpoint.is_dir():
        if schedule is None and (checkpoint / MANIFEST_FILE).exists():
            sched = json.loads((checkpoint / MANIFEST_FILE).read_text())["config"]["schedule"]
            schedule = ScheduleConfig(**sched)
        checkpoint = checkpoint / STAGE2_FILE
    schedule = schedule or ScheduleConfig()
    est = parse_csi(Path(csi_in).read_text(), str(csi_in))
    m, n = est.h_hat.shape
    try:
        pred = load_predictor(checkpoint, m, n, schedule.steps)
    except ValueError as exc:
        raise ConfigError(f"{checkpoint}: {exc}") from exc
    h_tilde = enhance_csi(pred, est, schedule.build(), np.random.default_rng(seed))
    Path(csi_out).write_text(format_csi(h_tilde, est.noise_variance))
    return Path(csi_out)
