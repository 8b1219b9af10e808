import json

import numpy as np
import pytest

from refsplat import cli, io
from refsplat.trainer import NumericalFailure

SYNTH = ["--synth.T", "6", "--synth.width", "24", "--synth.height", "24", "--synth.grid", "4",
         "--synth.wall_cols", "12", "--synth.wall_rows", "8", "--synth.focal", "26", "--synth.motion", "sinusoidal-bend"]
TRAIN = ["--train.iters_total", "12", "--train.iters_prefit", "4", "--train.net_depth", "2", "--train.net_width", "8",
         "--train.net_skip", "0", "--encoding.L_pos", "3", "--encoding.L_time", "2", "--train.holdout_every", "3",
         "--train.holdout_offset", "1", "--train.densify_interval", "4", "--init.keypoint_grid", "0"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "bundle"
    assert cli.main(["synth", "--out", str(d), *SYNTH]) == 0
    return d


def test_full_pipeline(tmp_path, bundle_dir, capsys):
    code, res, _ = run(capsys, "align-depth", "--bundle", bundle_dir, "--out", tmp_path / "a", *TRAIN)
    assert code == 0 and res["frames"] == 6
    report = json.loads((tmp_path / "a" / "depth" / "alignment.json").read_text())
    assert report[0]["s_star"] == pytest.approx(2.0, rel=1e-3)

    code, res, _ = run(capsys, "init", "--bundle", bundle_dir, "--out", tmp_path / "i", *TRAIN)
    assert code == 0 and len(res["indices"]) == 4

    code, res, _ = run(capsys, "train", "--bundle", bundle_dir, "--init", tmp_path / "i" / "init.bin",
                       "--out", tmp_path / "t", *TRAIN)
    assert code == 0 and np.isfinite(res["mean_psnr"])
    ckpt = tmp_path / "t" / "final.bin"

    code, res, _ = run(capsys, "render", "--bundle", bundle_dir, "--checkpoint", ckpt, "--t", "0", "0.5", "0.77",
                       "--out", tmp_path / "r", *TRAIN)
    assert code == 0 and len(res["renders"]) == 3
    assert io.read_png(tmp_path / "r" / "renders" / "t_0.770000.png").shape == (24, 24, 3)

    code, res, _ = run(capsys, "eval", "--bundle", bundle_dir, "--checkpoint", ckpt, "--out", tmp_path / "e", *TRAIN)
    assert code == 0 and set(res["frames"]) == {"1", "4"}


def test_eval_of_ground_truth_images_is_perfect(tmp_path, bundle_dir, capsys):
    code, res, _ = run(capsys, "eval", "--bundle", bundle_dir, "--images", bundle_dir, "--frames", "0", "3",
                       "--out", tmp_path)
    assert code == 0
    assert res["mean_psnr"] == 99.0 and res["mean_ssim"] == pytest.approx(1.0)


def test_config_errors_exit_2(tmp_path, bundle_dir, capsys):
    code, _, err = run(capsys, "train", "--bundle", bundle_dir, "--train.lr_net", "abc")
    assert code == 2 and json.loads(err)["error"] == "config"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.no_such_key": 1}))
    code, _, err = run(capsys, "init", "--bundle", bundle_dir, "--config", cfg)
    assert code == 2 and "no_such_key" in json.loads(err)["message"]
    code, _, _ = run(capsys, "render", "--bundle", bundle_dir)
    assert code == 2


def test_data_errors_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "align-depth", "--bundle", tmp_path / "missing")
    assert code == 3 and json.loads(err)["error"] == "data"


def test_numerical_failure_exits_4(bundle_dir, capsys, monkeypatch):
    def boom(*a, **k):
        raise NumericalFailure(17, "runs/x/checkpoint_000010.bin")
    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(capsys, "train", "--bundle", bundle_dir, *TRAIN)
    e = json.loads(err)
    assert code == 4 and "17" in e["message"] and "checkpoint_000010" in e["message"]


def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    assert "--train.lambda_rigid" in text and "default: 0.01" in text
    assert "--init.lambda_ref" in text and "--synth.keypoint_dropout" in text


def test_interpolated_camera_hits_keyframes(bundle_dir):
    b = io.load_bundle(bundle_dir)
    np.testing.assert_allclose(cli.interpolate_camera(b, b.times[2]).E, b.cameras[2].E, atol=1e-12)
    mid = cli.interpolate_camera(b, 0.5 * (b.times[1] + b.times[2]))
    np.testing.assert_allclose(mid.center, 0.5 * (b.cameras[1].center + b.cameras[2].center), atol=1e-12)


def test_subcommands_are_byte_identical_on_rerun(tmp_path, bundle_dir, capsys):
    outs = []
    for k in range(2):
        d = tmp_path / f"s{k}"
        assert cli.main(["synth", "--out", str(d / "b"), *SYNTH]) == 0
        assert cli.main(["train", "--bundle", str(bundle_dir), "--out", str(d / "t"), *TRAIN]) == 0
        outs.append(d)
    capsys.readouterr()
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
