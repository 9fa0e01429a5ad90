import numpy as np
import pytest

from backend.experiments import (
    equivalence_curve, equivalence_gap, mask_ablation, median_vs_mean, nlm_sweep,
    skewed_noise, texture_benchmark, tripled_image
)
from backend.noise_sim import add_gaussian
from backend.phantoms import texture
from backend.sim_search import materialize_nearest_image


def test_tripled_image_twins_are_exact_duplicates():
    clean, nb = tripled_image(300, seed=1)
    assert clean.shape == (10, 30)
    assert np.all(nb.dists == 0)
    for j in (1, 2):
        np.testing.assert_array_equal(materialize_nearest_image(nb, clean, j), clean)


def test_equivalence_gap_shrinks_with_samples():
    curve = dict(equivalence_curve(sizes=(100, 1000, 10000), seed=0, trials=5))
    assert curve[1000] < 0.05
    assert curve[10000] < 0.02
    assert curve[100] > curve[1000] > curve[10000]


def test_skewed_noise_has_zero_median():
    n = skewed_noise((200_000,), 1.0, seed=0, site=0)
    assert abs(np.median(n)) < 0.01
    assert np.mean(n) == pytest.approx(1 - np.log(2), abs=0.01)


def test_nlm_sweep_reports_every_h():
    clean = texture("rings", 32, seed=0)
    noisy = add_gaussian(clean, 0.1, seed=0)
    best_h, best, rows = nlm_sweep(noisy, clean, 0.1, factors=(0.5, 1.0, 2.0),
                                   patch_size=3, window_radius=3)
    assert [h for h, _ in rows] == pytest.approx([0.05, 0.1, 0.2])
    assert best == max(p for _, p in rows)
    assert best_h in [h for h, _ in rows]


@pytest.mark.slow
def test_trained_linear_models_agree():
    result = equivalence_gap(10_000, seed=0, steps=5000)
    assert result.gap < 0.02


@pytest.mark.slow
def test_trained_gap_shrinks_with_samples():
    curve = dict(equivalence_curve(sizes=(100, 1000, 10000), seed=0, trials=1, steps=5000))
    assert curve[1000] < 0.05
    assert curve[100] > curve[1000] > curve[10000]


@pytest.mark.slow
def test_mask_beats_no_mask_on_moving_structures():
    result = mask_ablation(seed=0)
    assert result["masked"] > result["noisy"]
    assert result["masked"] >= result["unmasked"] + 0.5


@pytest.mark.slow
def test_l1_finds_median_and_mse_finds_mean():
    result = median_vs_mean(seed=0)
    tol = result["tolerance"]
    assert abs(result["l1"] - result["median"]) < tol
    assert abs(result["mse"] - result["mean"]) < tol


@pytest.mark.slow
def test_noise2sim_beats_noisy_input_and_nlm():
    result = texture_benchmark(seed=0)
    assert result["noise2sim"] >= result["noisy"] + 2.0
    assert result["noise2sim"] > result["nlm"]
