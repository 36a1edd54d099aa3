import numpy as np
import pytest

from dmce import cli
from dmce.experiments import (
    CSV_COLUMNS, ConfigError, ExperimentConfig, format_csi, load_config, parse_config, parse_csi,
    stage_seed, trial_seed,
)

TINY = """
seed = 3
[link]
block_length = 4
[scene]
height = 4
width = 4
classes = 3
rectangles = 2
min_size = 2
max_size = 2
[codec]
features = 6
hidden = 8
[stage1]
epochs = 2
steps_per_epoch = 5
batch_size = 8
[dmce]
hidden = 16, 16
embed_dim = 8
train.epochs = 2
train.steps_per_epoch = 5
train.batch_size = 16
[stage3]
pool_size = 8
snr_db = 0, 10
train.epochs = 1
train.steps_per_epoch = 3
train.batch_size = 4
[sweep]
snr_db = 0, 10
trials = 6
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY)
    out = root / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["sweep", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


def test_parse_config_sections_comments_and_lists():
    cfg = parse_config("seed = 11  # master\n[sweep]\nsnr_db = -2, 0, 2\nmodes = dmce, no_dmce\n"
                       "[link]\npilot_noise_variance = 0.25\n")
    assert cfg.seed == 11
    assert cfg.sweep.snr_db == (-2.0, 0.0, 2.0)
    assert cfg.sweep.modes == ("dmce", "no_dmce")
    assert cfg.link.pilot_variance == 0.25
    assert parse_config("").seed == ExperimentConfig().seed


@pytest.mark.parametrize("text, where", [
    ("seed = x", ":1"),
    ("\nlink.bogus = 1", ":2"),
    ("link = 3", ":1"),
    ("just words", ":1"),
    ("[sweep]\nmodes = dmce, telepathy", ""),
    ("[link]\nusers = 3\nrx_antennas = 2", ""),
])
def test_parse_config_errors(text, where):
    with pytest.raises(ConfigError, match=f"cfg{where}"):
        parse_config(text, "cfg")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_seeds_are_stable_and_distinct():
    assert trial_seed(7, 0, 0, 0) == trial_seed(7, 0, 0, 0)
    seeds = {trial_seed(7, s, m, k) for s in range(3) for m in range(3) for k in range(50)}
    assert len(seeds) == 450
    assert stage_seed(7, 1) != stage_seed(7, 2)
    assert stage_seed(7, 1) == stage_seed(7, 1)


def test_csi_text_round_trip_is_exact():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    h[0, 0] = -0.0 + 1e-300j
    text = format_csi(h, 0.125)
    est = parse_csi(text)
    assert est.noise_variance == 0.125
    assert est.h_hat.tobytes() == h.tobytes()
    assert format_csi(est.h_hat, est.noise_variance) == text


@pytest.mark.parametrize("text", [
    "", "2 2\n1 1\n1 1\n", "2 2 0.1\n1 1\n", "1 2 0.1\n1 1 1\n", "1 1 0.1\nabc\n", "1 1 -1\n1\n",
])
def test_parse_csi_rejects_malformed(text):
    with pytest.raises(ConfigError):
        parse_csi(text)


def test_cli_exit_code_for_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[link]\nusers = two\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err


def test_train_writes_checkpoints_and_manifest(tiny_run):
    _, out = tiny_run
    for name in ("stage1_codecs.bin", "stage2_dmce.bin", "stage3_codecs.bin", "manifest.json", "sweep.csv"):
        assert (out / name).exists()


def test_sweep_csv_layout(tiny_run):
    _, out = tiny_run
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 2 * 3
    assert [ln.split(",")[1] for ln in lines[1:4]] == ["dmce", "no_dmce", "perfect_csi"]


def test_threaded_sweep_matches_single_threaded(tiny_run, tmp_path):
    cfg_path, out = tiny_run
    args = ["sweep", "--config", str(cfg_path), "--checkpoints", str(out)]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    ref = (out / "sweep.csv").read_bytes()
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == ref
    assert (tmp_path / "b" / "sweep.csv").read_bytes() == ref


def test_sweep_rejects_mismatched_checkpoints(tiny_run, tmp_path):
    _, out = tiny_run
    wrong = tmp_path / "wrong.cfg"
    wrong.write_text(TINY.replace("block_length = 4", "block_length = 8"))
    assert cli.main(["sweep", "--config", str(wrong), "--checkpoints", str(out), "--out", str(tmp_path)]) == 2


def test_enhance_round_trip_and_dimension_check(tiny_run, tmp_path):
    _, out = tiny_run
    rng = np.random.default_rng(1)
    h = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    src = tmp_path / "in.txt"
    src.write_text(format_csi(h, 0.1))
    dst = tmp_path / "out.txt"
    assert cli.main(["enhance", str(out), str(src), str(dst)]) == 0
    first = dst.read_bytes()
    est = parse_csi(first.decode())
    assert est.h_hat.shape == (2, 2) and est.noise_variance == 0.1
    assert cli.main(["enhance", "--seed", "0", str(out), str(src), str(dst)]) == 0
    assert dst.read_bytes() == first
    src.write_text(format_csi(np.ones((3, 2)), 0.1))
    assert cli.main(["enhance", str(out), str(src), str(dst)]) == 2
    assert cli.main(["enhance", str(out), str(tmp_path / "missing.txt"), str(dst)]) == 2


def test_selftest_passes(capsys):
    assert cli.main(["selftest", "--seed", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(ln.startswith("PASS") for ln in lines)
