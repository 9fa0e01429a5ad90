import io
import json
import os

import numpy as np
import pytest

from backend.baselines_metrics import psnr
from backend.noise_sim import add_poisson
from backend.tensor_io import load_tensor
from frontend.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, run
from frontend.handlers.file_handler import manifest_path
from frontend.utils.limits import DenoiseLimits


def call(*argv):
    out = io.StringIO()
    code = run([str(a) for a in argv], out=out)
    return code, out.getvalue()


def make_texture(tmp_path, name="clean.n2st", size=32, seed=1):
    path = tmp_path / name
    code, _ = call("texture", "--kind", "checker", "--size", size, "--seed", seed, path)
    assert code == EXIT_OK
    return path


def test_eval_identical_files_prints_inf(tmp_path):
    path = make_texture(tmp_path)
    code, text = call("eval", path, path)
    assert code == EXIT_OK
    lines = text.strip().splitlines()
    assert lines[0] == "metric,value,peak"
    assert lines[1] == "psnr,inf,1.000000"
    assert lines[2].startswith("ssim,1.0")


def test_missing_seed_is_a_usage_error(tmp_path, capsys):
    code, _ = call("simulate", "--std", "0.1", tmp_path / "a.n2st", tmp_path / "b.n2st")
    assert code == EXIT_USAGE
    assert "seed" in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error(tmp_path):
    code, _ = call("search", "--bogus", "1", tmp_path / "a", tmp_path / "b")
    assert code == EXIT_USAGE


def test_out_of_range_option(tmp_path):
    code, _ = call("search", "--s", "4", tmp_path / "a", tmp_path / "b")
    assert code == EXIT_USAGE


def test_std_and_lambda_are_exclusive(tmp_path):
    code, _ = call("simulate", "--std", "0.1", "--lambda", "30", "--seed", "1",
                   tmp_path / "a", tmp_path / "b")
    assert code == EXIT_USAGE


def test_poisson_defaults_to_reference_lambda(tmp_path):
    clean = make_texture(tmp_path)
    out = tmp_path / "noisy.n2st"
    code, _ = call("simulate", "--kind", "poisson", "--seed", 4, clean, out)
    assert code == EXIT_OK
    expected = add_poisson(load_tensor(str(clean)).data, DenoiseLimits.LAMBDA_DEFAULT, 4)
    np.testing.assert_array_equal(load_tensor(str(out)).data, expected)


def test_missing_input_is_a_data_error(tmp_path):
    out = tmp_path / "noisy.n2st"
    code, _ = call("simulate", "--std", "0.1", "--seed", "1", tmp_path / "nope.n2st", out)
    assert code == EXIT_DATA
    record = json.loads(open(manifest_path(str(out))).read())
    assert record["status"] == "failed"
    assert record["error"]


def test_manifest_records_the_run(tmp_path):
    path = make_texture(tmp_path, seed=7)
    record = json.loads(open(manifest_path(str(path))).read())
    assert record["command"] == "texture"
    assert record["seed"] == 7
    assert record["status"] == "ok"
    assert record["options"]["kind"] == "checker"
    assert set(record["versions"]) >= {"numpy", "scipy", "python"}


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# texture settings\nkind = rings\nsize = 16\nseed = 3\n")
    out = tmp_path / "t.n2st"
    code, _ = call("texture", "--config", cfg, out)
    assert code == EXIT_OK
    assert load_tensor(str(out)).dims == (16, 16)

    code, _ = call("texture", "--config", cfg, "--size", "24", out)
    assert code == EXIT_OK
    assert load_tensor(str(out)).dims == (24, 24)


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    code, _ = call("texture", "--config", cfg, "--seed", "1", tmp_path / "t.n2st")
    assert code == EXIT_USAGE


def test_mask_command(tmp_path):
    code, _ = call("phantom", "--slices", "4", "--size", "16", "--seed", "2", tmp_path / "vol.n2st")
    assert code == EXIT_OK
    vol = load_tensor(str(tmp_path / "vol.n2st"))
    assert vol.dims == (4, 16, 16)

    from backend.tensor_io import Domain, Tensor, save_tensor
    save_tensor(Tensor(vol.data[0], Domain.HOUNSFIELD), str(tmp_path / "s0.n2st"))
    save_tensor(Tensor(vol.data[0] + 50.0, Domain.HOUNSFIELD), str(tmp_path / "s1.n2st"))
    code, text = call("mask", tmp_path / "s0.n2st", tmp_path / "s1.n2st", tmp_path / "m.n2st")
    assert code == EXIT_OK
    assert text.strip() == "excluded,256,256"

    # config keys may use the flag name
    cfg = tmp_path / "mask.cfg"
    cfg.write_text("dth = 5000\n")
    code, text = call("mask", "--config", cfg, tmp_path / "s0.n2st", tmp_path / "s1.n2st",
                      tmp_path / "m2.n2st")
    assert code == EXIT_OK
    assert text.strip() == "excluded,0,256"


def test_parser_knows_every_command():
    parser = build_parser()
    for name in ("simulate", "search", "mask", "train", "refine", "denoise", "eval",
                 "estimate-zcd", "nlm", "texture", "phantom", "experiment"):
        with pytest.raises(SystemExit):
            parser.parse_args([name, "--help"])


def pipeline(root, steps, width1=4, width2=8):
    root.mkdir()
    data = root / "data"
    data.mkdir()
    clean = make_texture(root, size=64, seed=5)
    noisy = data / "img.n2st"
    model = root / "model.n2sm"
    denoised = root / "denoised.n2st"
    assert call("simulate", "--kind", "gaussian", "--std", 25 / 255, "--seed", 11,
                clean, noisy)[0] == EXIT_OK
    assert call("search", "--k", 8, "--s", 3, noisy, data / "img.n2sn")[0] == EXIT_OK
    assert call("train", "--mode", "noise2sim", "--steps", steps, "--batch", 4, "--lr", 1e-3,
                "--width1", width1, "--width2", width2, "--seed", 3, data, model)[0] == EXIT_OK
    assert call("denoise", model, noisy, denoised)[0] == EXIT_OK
    return clean, noisy, model, denoised


def test_pipeline_is_deterministic(tmp_path):
    first = pipeline(tmp_path / "a", steps=5)
    second = pipeline(tmp_path / "b", steps=5)
    for a, b in zip(first, second):
        assert open(a, "rb").read() == open(b, "rb").read()
    log = open(str(first[2]) + ".csv").read().splitlines()
    assert log[0] == "step,lr,loss,skipped"
    assert len(log) == 6


@pytest.mark.slow
def test_pipeline_improves_psnr(tmp_path):
    clean, noisy, model, denoised = pipeline(tmp_path / "run", steps=200, width1=8, width2=16)
    assert os.path.exists(manifest_path(str(model)))
    code, text = call("eval", "--metric", "psnr", denoised, clean)
    assert code == EXIT_OK
    after = float(text.splitlines()[1].split(",")[1])
    c, n = load_tensor(str(clean)).data, load_tensor(str(noisy)).data
    assert after > psnr(n, c)
