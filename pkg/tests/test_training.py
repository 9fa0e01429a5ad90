import numpy as np
import pytest

from backend.errors import ConfigError, CropTooLarge, DegenerateData, RoleMissing
from backend.neural_denoiser import ArchSpec, DenoiserModel, randomize
from backend.noise_sim import add_gaussian
from backend.phantoms import texture
from backend.sim_search import build_neighbors, neighbor_overlap
from backend.training import (
    DatasetHandle, TrainConfig, Trainer, augment, denoise, denoise_image,
    estimate_zcd, iterative_refine, reference_neighbors, refine_neighbors, train
)


def small_config(**kw):
    base = dict(steps=4, batch=2, seed=3, arch="unet", width1=2, width2=3, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


# --- configuration ---

def test_defaults_follow_mode():
    flat = TrainConfig(mode="noise2sim")
    assert (flat.k, flat.s, flat.d_th) == (8, 3, None)
    vol = TrainConfig(mode="noise2sim-volume")
    assert (vol.k, vol.s, vol.d_th) == (2, 7, 30.0)
    assert TrainConfig(mode="noise2sim-volume", use_mask=False).d_th is None


def test_threshold_only_for_volumes():
    with pytest.raises(ConfigError):
        TrainConfig(mode="noise2sim", d_th=30.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(mode="noise2sim-volume", d_th=-1.0).validate()


def test_bad_settings():
    for kw in ({"steps": 0}, {"batch": 0}, {"lr0": 0.0}, {"s": 4}, {"crop": 2}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


def test_roles_are_checked(gradient_image):
    data = DatasetHandle(noisy=[gradient_image])
    with pytest.raises(RoleMissing):
        Trainer(small_config(mode="noise2clean")).fit(data)
    with pytest.raises(RoleMissing):
        Trainer(small_config(mode="noise2noise")).fit(data)


# --- augmentation ---

def test_augment_off_is_identity(gradient_image):
    sample = (gradient_image, gradient_image + 1, None)
    assert augment(sample, seed=1, crop=None, flips=False) is sample


def test_constant_crop_is_constant():
    img = np.full((20, 20), 0.25, dtype=np.float32)
    for seed in range(10):
        inp, target, _ = augment((img, img, None), seed, crop=8)
        assert inp.shape == (8, 8)
        assert np.all(inp == 0.25)


def test_input_and_target_share_geometry(rng):
    img = rng.random((12, 10)).astype(np.float32)
    mask = (rng.random((12, 10)) > 0.5).astype(np.uint8)
    for seed in range(100):
        inp, target, m = augment((img, img.copy(), mask), seed, crop=6, draw=seed % 7)
        np.testing.assert_array_equal(inp, target)
        assert m.shape == inp.shape


def test_crop_too_large(gradient_image):
    with pytest.raises(CropTooLarge):
        augment((gradient_image, gradient_image, None), 0, crop=17)


# --- training ---

def test_same_seed_same_model(gradient_image):
    noisy = add_gaussian(gradient_image, 0.1, seed=1)
    a = train(small_config(), DatasetHandle(noisy=[noisy]))
    b = train(small_config(), DatasetHandle(noisy=[noisy]))
    np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())


def test_threads_do_not_change_the_model(gradient_image):
    noisy = add_gaussian(gradient_image, 0.1, seed=1)
    neighbors = build_neighbors([noisy], k=4, s=3)
    a = train(small_config(k=4), DatasetHandle(noisy=[noisy], neighbors=neighbors))
    b = train(small_config(k=4, workers=3), DatasetHandle(noisy=[noisy], neighbors=neighbors))
    np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())


def test_history_and_schedule(gradient_image):
    noisy = add_gaussian(gradient_image, 0.1, seed=1)
    trainer = Trainer(small_config(mode="noise2clean", steps=6))
    trainer.fit(DatasetHandle(noisy=[noisy], clean=[gradient_image]))
    assert [h["step"] for h in trainer.history] == list(range(6))
    lrs = [h["lr"] for h in trainer.history]
    assert lrs[0] == pytest.approx(trainer.config.lr0)
    assert lrs == sorted(lrs, reverse=True)
    assert trainer.opt.step == 6


def test_noise2clean_lowers_the_loss(gradient_image):
    noisy = add_gaussian(gradient_image, 0.1, seed=2)
    cfg = TrainConfig(mode="noise2clean", steps=150, batch=1, lr0=1e-2, seed=0,
                      arch="conv", residual=False, augment=False, log_every=50)
    trainer = Trainer(cfg)
    trainer.fit(DatasetHandle(noisy=[noisy], clean=[gradient_image]))
    assert trainer.history[-1]["loss"] < 0.5 * trainer.history[0]["loss"]


def test_volume_mode_runs_with_mask():
    rng = np.random.default_rng(0)
    vol = rng.normal(40.0, 5.0, (6, 12, 12)).astype(np.float32)
    cfg = small_config(mode="noise2sim-volume", k=1, value_scale=1000.0)
    model = train(cfg, DatasetHandle(noisy=[vol]))
    assert denoise(model, vol, volume=True).shape == vol.shape


def test_fully_masked_volume_aborts():
    rng = np.random.default_rng(1)
    vol = rng.normal(0.0, 500.0, (6, 12, 12)).astype(np.float32)
    cfg = small_config(mode="noise2sim-volume", k=1, d_th=0.0, steps=10, batch=4)
    with pytest.raises(DegenerateData):
        train(cfg, DatasetHandle(noisy=[vol]))


# --- inference ---

def test_identity_model_leaves_input_alone(gradient_image):
    model = DenoiserModel(ArchSpec(width1=2, width2=3))
    np.testing.assert_array_equal(denoise(model, gradient_image), gradient_image)


def test_tiled_matches_untiled(rng):
    model = randomize(DenoiserModel(ArchSpec(width1=2, width2=3)), 4)
    img = rng.random((128, 128, 1)).astype(np.float32)
    whole = denoise_image(model, img)
    tiled = denoise_image(model, img, tile=64)
    assert np.max(np.abs(whole - tiled)) < 1e-4


def test_tiled_handles_odd_sizes(rng):
    model = randomize(DenoiserModel(ArchSpec(width1=2, width2=3)), 4)
    img = rng.random((75, 41)).astype(np.float32)
    out = denoise(model, img, tile=48)
    assert out.shape == img.shape


def test_bad_tile(rng):
    model = DenoiserModel(ArchSpec(width1=2, width2=3))
    with pytest.raises(ConfigError):
        denoise_image(model, rng.random((80, 80, 1)), tile=31)


# --- zero-mean conditional discrepancy ---

def test_zcd_is_near_zero_on_symmetric_data():
    noisy = add_gaussian(np.zeros((16, 16), dtype=np.float32), 0.05, seed=5)
    data = DatasetHandle(noisy=[noisy], neighbors=build_neighbors([noisy], k=8, s=3))
    mean, lo, hi = estimate_zcd(data, 100_000, seed=1)
    assert mean.shape == (16, 16)
    assert np.max(np.abs(mean)) < 1e-3
    assert lo <= hi


def test_zcd_needs_neighbors(gradient_image):
    with pytest.raises(RoleMissing):
        estimate_zcd(DatasetHandle(noisy=[gradient_image]), 10, seed=0)
    with pytest.raises(ConfigError):
        estimate_zcd(DatasetHandle(noisy=[gradient_image]), 0, seed=0)


def test_zcd_is_deterministic(gradient_image):
    data = DatasetHandle(noisy=[gradient_image, gradient_image[::-1].copy()],
                         neighbors=build_neighbors([gradient_image, gradient_image[::-1]], 4, 3))
    a = estimate_zcd(data, 1001, seed=2)[0]
    b = estimate_zcd(data, 1001, seed=2)[0]
    np.testing.assert_array_equal(a, b)


# --- refinement ---

def test_refine_argument_checks(gradient_image):
    model = DenoiserModel(ArchSpec(width1=2, width2=3))
    data = DatasetHandle(noisy=[gradient_image])
    with pytest.raises(ConfigError):
        iterative_refine(model, data, 0, small_config())
    with pytest.raises(ConfigError):
        iterative_refine(model, data, 1, small_config(mode="noise2noise"))


def test_perfect_denoiser_gives_reference_similarity():
    clean = texture("blobs", 24, seed=1)
    data = DatasetHandle(noisy=[clean], clean=[clean])
    cfg = small_config(k=4)
    identity = DenoiserModel(ArchSpec(width1=2, width2=3))
    ours = refine_neighbors(identity, data, cfg)[0]
    upper = reference_neighbors(data, cfg)[0]
    np.testing.assert_array_equal(ours.coords, upper.coords)


@pytest.mark.slow
def test_refinement_moves_neighbors_toward_clean():
    clean = texture("stripes", 32, seed=2)
    noisy = add_gaussian(clean, 15 / 255, seed=2)
    data = DatasetHandle(noisy=[noisy], clean=[clean])
    cfg = TrainConfig(mode="noise2sim", k=8, s=3, steps=400, batch=4, lr0=1e-3, seed=2,
                      width1=8, width2=16, log_every=100)
    model = train(cfg, data)
    truth = reference_neighbors(data, cfg)[0]
    before = neighbor_overlap(build_neighbors([noisy], 8, 3)[0], truth).sum()
    after = neighbor_overlap(refine_neighbors(model, data, cfg)[0], truth).sum()
    assert after > before
