import numpy as np
import pytest

from dmce.channel import LinkConfig
from dmce.diffusion import linear_schedule
from dmce.metrics import miou
from dmce.neuralnet import NoisePredictor, TrainConfig, gradient_rel_error
from dmce.semantic import (
    Codecs, PowerNormalizationError, SceneConfig, cross_entropy, cross_entropy_grad_logits,
    draw_trial, enhanced_pool, expected_background_fraction,
    generate_scene, intensity_table, jscc_encode, normalize_power, normalize_power_backward,
    pack_symbols, run_link, run_links, scene_batch, softmax_cells, stage1_loss_and_grads,
    train_stage1, train_stage3, unpack_symbols,
)

SMALL = SceneConfig(height=4, width=4, classes=3, rectangles=2, min_size=2, max_size=2)


def small_codecs(seed=0, block_length=4):
    return Codecs.create(np.random.default_rng(seed), 2, block_length, features=6, scene=SMALL, hidden=8)


def sampled_fd_error(loss, params, grads, rng, points=20, step=1e-5):
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for idx in rng.choice(flat_p.size, size=min(points, flat_p.size), replace=False):
            orig = flat_p[idx]
            flat_p[idx] = orig + step
            up = loss()
            flat_p[idx] = orig - step
            down = loss()
            flat_p[idx] = orig
            worst = max(worst, gradient_rel_error(flat_g[idx], (up - down) / (2 * step)))
    return worst


def test_normalize_power_example():
    x = pack_symbols(normalize_power(np.array([3.0, 0.0, 0.0, 4.0]), 1.0))
    np.testing.assert_allclose(x, [0.6 * np.sqrt(2), 0.8j * np.sqrt(2)], rtol=1e-15)
    assert np.sum(np.abs(x) ** 2) == pytest.approx(2.0, rel=1e-15)
    with pytest.raises(PowerNormalizationError):
        normalize_power(np.zeros(4), 1.0)


def test_power_constraint_holds_for_random_encodes():
    rng = np.random.default_rng(1)
    enc = small_codecs().jscc_enc[0]
    feats = rng.standard_normal((10_000, 6)) * rng.uniform(1e-3, 1e3, (10_000, 1))
    x = jscc_encode(enc, feats, 2.0, 4)
    np.testing.assert_allclose(np.sum(np.abs(x) ** 2, axis=1), 2.0 * 4, rtol=1e-9)


def test_normalize_power_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    raw, up = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    g = normalize_power_backward(raw, 1.5, up)
    step = 1e-6
    for i in range(3):
        for j in range(8):
            e = np.zeros_like(raw)
            e[i, j] = step
            fd = np.sum(up * (normalize_power(raw + e, 1.5) - normalize_power(raw - e, 1.5))) / (2 * step)
            assert g[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_symbol_packing_round_trip():
    reals = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(pack_symbols(reals), [[0 + 1j, 2 + 3j], [4 + 5j, 6 + 7j]])
    np.testing.assert_array_equal(unpack_symbols(pack_symbols(reals)), reals)


def test_cross_entropy_examples():
    probs = np.array([[0.5, 0.5], [1.0, 0.0]])
    truth = np.array([0, 0])
    # first cell: -2 log 0.5; second cell: clamped, ~0
    assert cross_entropy(probs, truth) == pytest.approx(np.log(2), rel=1e-9)
    assert cross_entropy(softmax_cells(np.array([0.0, 0.0, 0.0]), 3), np.array([1])) == pytest.approx(
        -np.log(1 / 3) - 2 * np.log(2 / 3)
    )
    with pytest.raises(ValueError):
        cross_entropy(probs, np.array([0, 0, 1]))


def test_cross_entropy_logit_gradient():
    rng = np.random.default_rng(3)
    logits, truth = rng.standard_normal(12), rng.integers(0, 3, 4)

    def loss():
        return cross_entropy(softmax_cells(logits, 3), truth)

    g = cross_entropy_grad_logits(softmax_cells(logits, 3), truth)
    for i in range(12):
        old = logits[i]
        logits[i] = old + 1e-6
        up = loss()
        logits[i] = old - 1e-6
        down = loss()
        logits[i] = old
        assert g[i] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-9)


def test_codec_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    codecs = small_codecs(4)
    images, truth = scene_batch(rng, SMALL, 2, 5)
    loss, grads = stage1_loss_and_grads(codecs, images, truth, 1.0)
    assert loss == pytest.approx(stage1_loss_and_grads(codecs, images, truth, 1.0)[0])
    for net, g in zip(codecs.networks(), grads):
        err = sampled_fd_error(lambda: stage1_loss_and_grads(codecs, images, truth, 1.0)[0],
                               net.params(), g.params(), rng)
        assert err < 1e-4


def test_intensity_tables():
    np.testing.assert_allclose(intensity_table(0, 4), [0.0, -0.5, 0.75, 1.25])
    t1 = intensity_table(1, 4)
    assert t1[0] == 0.0 and len(set(t1)) == 4


def test_generator_is_deterministic_and_lattice_aligned():
    a = generate_scene(np.random.default_rng(5), SceneConfig())
    b = generate_scene(np.random.default_rng(5), SceneConfig())
    np.testing.assert_array_equal(a.truth, b.truth)
    np.testing.assert_array_equal(a.modalities, b.modalities)
    assert a.modalities.shape == (2, 256)
    # labels are constant on each 2x2 block
    blocks = a.truth.reshape(8, 2, 8, 2)
    assert np.all(blocks == blocks[:, :1, :, :1])


def test_background_fraction_matches_enumeration():
    cfg = SceneConfig()
    rng = np.random.default_rng(6)
    frac = np.mean([np.mean(generate_scene(rng, cfg).truth == 0) for _ in range(4000)])
    assert frac == pytest.approx(expected_background_fraction(cfg), rel=0.05)


def test_codec_checkpoint_round_trip(tmp_path):
    codecs = small_codecs(7)
    codecs.save(tmp_path / "c.bin")
    back = Codecs.load(tmp_path / "c.bin")
    for a, b in zip(codecs.networks(), back.networks()):
        for p, q in zip(a.params(), b.params()):
            assert p.tobytes() == q.tobytes()
    back.save(tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_perfect_csi_noiseless_pipeline_is_transparent():
    rng = np.random.default_rng(8)
    codecs = small_codecs(8)
    link = LinkConfig(block_length=4, channel_mode="ray_tracing")
    trials = [draw_trial(link, SMALL, rng) for _ in range(20)]
    out = run_links(trials, codecs, link, "perfect_csi", SMALL)
    assert np.max(out["symbol_mse"]) < 1e-12
    # with no noise the pilot estimate is exact, so both modes decode identically
    direct = run_links(trials, codecs, link, "no_dmce", SMALL)
    np.testing.assert_array_equal(out["pred"], direct["pred"])
    truth = np.stack([t.scene.truth for t in trials])
    np.testing.assert_allclose(out["miou"], [miou(p, t, 3) for p, t in zip(out["pred"], truth)])


def test_run_link_is_seed_deterministic_and_checks_mode():
    codecs = small_codecs(9)
    link = LinkConfig(block_length=4, data_noise_variance=0.5)
    a = run_link(link, codecs, np.random.default_rng(3), scene_cfg=SMALL)
    b = run_link(link, codecs, np.random.default_rng(3), scene_cfg=SMALL)
    assert a["miou"] == b["miou"] and a["nmse_db_initial"] == b["nmse_db_initial"]
    with pytest.raises(ValueError):
        run_links([draw_trial(link, SMALL, np.random.default_rng(0))], codecs, link, "dmce", SMALL)
    with pytest.raises(ValueError):
        run_links([], codecs, link, "bogus", SMALL)


def test_stage1_training_lowers_loss():
    codecs = small_codecs(10)
    history = []
    train_stage1(codecs, SMALL, TrainConfig(learning_rate=0.5, decay=1.0, epochs=5, batch_size=16,
                                            steps_per_epoch=30, rng_seed=0), history=history)
    assert history[-1] < history[0]


def test_stage3_only_moves_the_decoders():
    codecs = small_codecs(11)
    before = codecs.copy()
    s = linear_schedule()
    link = LinkConfig(block_length=4)
    pred = NoisePredictor.create(2, 2, s.steps, np.random.default_rng(0), embed_dim=8, hidden=(8,))
    pools = enhanced_pool(link, [0.0], 16, pred, s, np.random.default_rng(1))
    train_stage3(codecs, pools, SMALL, TrainConfig(learning_rate=0.1, epochs=2, batch_size=4,
                                                   steps_per_epoch=3, rng_seed=0))
    for a, b in zip([*before.sem_enc, *before.jscc_enc], [*codecs.sem_enc, *codecs.jscc_enc]):
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)
    moved = [not np.array_equal(p, q) for p, q in zip(before.sem_dec.params(), codecs.sem_dec.params())]
    assert any(moved)
