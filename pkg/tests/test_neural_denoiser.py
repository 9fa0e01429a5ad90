import numpy as np
import pytest

from backend.errors import MissingForwardCache, ShapeMismatch, ShapeTooSmall
from backend.neural_denoiser import (
    DEFAULT_LR, ArchSpec, DenoiserModel, OptimState, adam_step, backward, cosine_lr, forward,
    gradient_check, load_model, randomize, save_model
)
from backend.volume_pairing import LossKind, masked_loss_and_grad

SMALL_UNET = ArchSpec(kind="unet", in_channels=1, width1=2, width2=3)


def random_model(arch, seed):
    return randomize(DenoiserModel(arch, dtype=np.float64), seed)


def batch(seed, shape=(1, 8, 8, 1)):
    return np.random.default_rng(seed).random(shape)


def batch_loss(model, x, target, kind=LossKind.MSE):
    out = model.forward(x, keep_cache=False)
    return sum(masked_loss_and_grad(out[i], target[i], None, kind)[0] for i in range(len(out)))


def test_fresh_model_is_identity(gradient_image):
    model = DenoiserModel(ArchSpec(width1=4, width2=8))
    np.testing.assert_allclose(model.predict(gradient_image), gradient_image, atol=1e-7)


def test_averaging_kernel_keeps_constants():
    arch = ArchSpec(kind="conv", residual=False, relu=False)
    params = {"conv.w": np.full((3, 3, 1, 1), 1 / 9), "conv.b": np.zeros(1)}
    model = DenoiserModel(arch, params)
    out = model.predict(np.full((6, 6), 0.7, dtype=np.float32))
    np.testing.assert_allclose(out, 0.7, atol=1e-6)


def test_output_keeps_spatial_dims():
    model = random_model(SMALL_UNET, 0)
    assert model.forward(batch(1, (2, 9, 7, 1))).shape == (2, 9, 7, 1)
    with pytest.raises(ShapeTooSmall):
        model.forward(batch(1, (1, 3, 8, 1)))
    with pytest.raises(ShapeMismatch):
        model.forward(batch(1, (1, 8, 8, 2)))


def test_conv_translation_equivariance():
    model = random_model(ArchSpec(kind="conv", in_channels=2), 4)
    x = batch(2, (1, 12, 12, 2))
    shifted = np.roll(x, 1, axis=2)
    a = model.forward(x, keep_cache=False)
    b = model.forward(shifted, keep_cache=False)
    np.testing.assert_allclose(np.roll(a, 1, axis=2)[:, 2:-2, 2:-2], b[:, 2:-2, 2:-2],
                               atol=1e-12)


def test_unet_translation_equivariance_on_pool_grid():
    model = random_model(SMALL_UNET, 5)
    x = batch(3, (1, 32, 32, 1))
    shifted = np.roll(x, 2, axis=1)
    a = model.forward(x, keep_cache=False)
    b = model.forward(shifted, keep_cache=False)
    np.testing.assert_allclose(np.roll(a, 2, axis=1)[:, 12:-12, 12:-12], b[:, 12:-12, 12:-12],
                               atol=1e-12)


def test_zero_loss_gives_zero_gradients():
    model = random_model(SMALL_UNET, 1)
    x = batch(0)
    out = model.forward(x)
    grads, _ = model.backward(np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_needs_forward():
    model = random_model(SMALL_UNET, 1)
    with pytest.raises(MissingForwardCache):
        model.backward(np.zeros((1, 8, 8, 1)))
    img = batch(0)[0]
    with pytest.raises(MissingForwardCache):
        backward(model, img, np.zeros_like(img))


@pytest.mark.parametrize("seed", range(10))
def test_linear_model_gradients_match_differences(seed):
    model = random_model(ArchSpec(kind="conv", in_channels=1), seed)
    x, target = batch(seed), batch(seed + 100)
    result = gradient_check(model, x, target, h=1e-3)
    assert result.skipped == 0
    assert result.worst < 1e-5


@pytest.mark.parametrize("relu", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_unet_gradients_match_differences(seed, relu):
    arch = ArchSpec(kind="unet", in_channels=1, width1=2, width2=3, relu=relu)
    model = random_model(arch, seed)
    x, target = batch(seed), batch(seed + 100)
    result = gradient_check(model, x, target, h=1e-3, skip_kinks=True)
    assert result.checked > 2 * result.skipped
    assert result.worst < 1e-5


def test_gradient_check_flags_a_crossed_switch():
    # one relu unit whose pre-activation sits 1e-4 from zero
    arch = ArchSpec(kind="unet", in_channels=1, width1=1, width2=1)
    model = random_model(arch, 0)
    x, target = batch(0), batch(1)
    model.params["enc1a.w"][...] = 0.0
    model.params["enc1a.b"][...] = 1e-4
    # keep the path from that unit to the output open
    for name in ("enc1b", "dec1"):
        model.params[f"{name}.w"] = np.abs(model.params[f"{name}.w"])
        model.params[f"{name}.b"][...] = 0.5
    x[...] = 0.0
    result = gradient_check(model, x, target, h=1e-3, skip_kinks=True)
    assert result.skipped >= 1
    assert result.worst < 1e-5


def test_scaled_model_gradients():
    arch = ArchSpec(kind="conv", in_channels=1, value_scale=1000.0)
    model = random_model(arch, 3)
    x, target = 400 * batch(3), 400 * batch(4)
    result = gradient_check(model, x, target, h=1e-3, kind=LossKind.MSE)
    assert result.worst < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_relu_unet_directional_derivative(seed):
    model = random_model(SMALL_UNET, seed)
    x, target = batch(seed), batch(seed + 50)
    out = model.forward(x)
    dout = np.stack([masked_loss_and_grad(out[0], target[0])[1]])
    grads, _ = model.backward(dout)

    rng = np.random.default_rng(seed)
    direction = {k: rng.standard_normal(p.shape) for k, p in model.params.items()}
    analytic = sum(float(np.sum(grads[k] * d)) for k, d in direction.items())

    h = 1e-6
    saved = {k: p.copy() for k, p in model.params.items()}
    for k in model.params:
        model.params[k] = saved[k] + h * direction[k]
    plus = batch_loss(model, x, target)
    for k in model.params:
        model.params[k] = saved[k] - h * direction[k]
    minus = batch_loss(model, x, target)
    numeric = (plus - minus) / (2 * h)
    assert analytic == pytest.approx(numeric, rel=1e-4)


def test_input_gradient_includes_residual_path():
    model = random_model(SMALL_UNET, 7)
    x, target = batch(7), batch(8)
    out = model.forward(x)
    dout = np.stack([masked_loss_and_grad(out[0], target[0])[1]])
    _, dx = model.backward(dout)

    d = np.random.default_rng(0).standard_normal(x.shape)
    h = 1e-6
    numeric = (batch_loss(model, x + h * d, target) - batch_loss(model, x - h * d, target)) / (2 * h)
    assert float(np.sum(dx * d)) == pytest.approx(numeric, rel=1e-4)


def test_identity_model_passes_gradient_through():
    model = DenoiserModel(SMALL_UNET, dtype=np.float64)
    x = batch(1)
    model.forward(x)
    g = batch(2)
    _, dx = model.backward(g)
    np.testing.assert_allclose(dx, g)


def test_image_level_forward_backward():
    model = random_model(SMALL_UNET, 2)
    img = batch(3)[0, :, :, 0]
    out = forward(model, img)
    assert out.shape == img.shape
    grads = backward(model, img, np.ones_like(img))
    assert set(grads) == set(model.param_shapes())


def test_cosine_schedule():
    assert cosine_lr(0, 100) == pytest.approx(DEFAULT_LR)
    assert DEFAULT_LR == 5e-4
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0)
    lrs = [cosine_lr(s, 10) for s in range(11)]
    assert lrs == sorted(lrs, reverse=True)


def test_adam_zero_gradient_keeps_parameters():
    model = random_model(ArchSpec(kind="conv"), 0)
    before = model.parameter_vector().copy()
    opt = OptimState(lr0=1e-2, total=10)
    adam_step(model, {k: np.zeros_like(p) for k, p in model.params.items()}, opt)
    np.testing.assert_array_equal(model.parameter_vector(), before)
    assert opt.step == 1


def test_adam_first_step_hand_trace():
    model = DenoiserModel(ArchSpec(kind="conv"), dtype=np.float64)
    opt = OptimState(lr0=1e-2, total=10)
    grads = {"conv.w": np.zeros((3, 3, 1, 1)), "conv.b": np.ones(1)}
    lr = adam_step(model, grads, opt)
    assert lr == pytest.approx(1e-2)
    assert model.params["conv.b"][0] == pytest.approx(-1e-2 / (1 + 1e-8))


def test_adam_rejects_bad_gradients():
    model = DenoiserModel(ArchSpec(kind="conv"))
    with pytest.raises(ShapeMismatch):
        adam_step(model, {"conv.w": np.zeros((3, 3, 1, 1))}, OptimState())


def test_checkpoint_restores_model_and_optimizer(tmp_path):
    model = randomize(DenoiserModel(SMALL_UNET), 3)
    opt = OptimState(lr0=1e-3, total=20)
    adam_step(model, {k: np.ones_like(p) for k, p in model.params.items()}, opt)
    path = str(tmp_path / "m.n2sm")
    save_model(model, path, opt)

    back, back_opt = load_model(path)
    assert back.arch == model.arch
    np.testing.assert_array_equal(back.parameter_vector(), model.parameter_vector())
    assert back_opt.step == 1 and back_opt.total == 20
    np.testing.assert_allclose(back_opt.m["enc1a.w"], opt.m["enc1a.w"], rtol=1e-6)

    x = batch(0).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x), model.forward(x))


def test_checkpoint_without_optimizer(tmp_path):
    model = DenoiserModel(ArchSpec(kind="conv", in_channels=3))
    path = str(tmp_path / "m.n2sm")
    save_model(model, path)
    back, opt = load_model(path)
    assert opt is None
    assert back.arch.in_channels == 3
