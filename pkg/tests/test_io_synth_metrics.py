import json

import numpy as np
import pytest

from refsplat import io
from refsplat.deform_net import EncodingConfig, init_params
from refsplat.metrics import PSNR_CAP, gaussian_kernel, psnr, ssim
from refsplat.scene import INVALID_DEPTH, DataError, Gaussians, GaussianFrameSet
from refsplat.synth import MOTIONS, SynthConfig, generate, match_tracks, trajectory_error

SMALL = dict(T=5, width=24, height=24, grid=4, wall_cols=12, wall_rows=8, focal=26.0)


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig(motion="sinusoidal-bend", **SMALL))


# ---------------------------------------------------------------- metrics


def ssim_oracle(a, b, C1=1e-4, C2=9e-4):
    """Windowed SSIM with explicit zero-padded 11x11 Gaussian weights, averaged over pixels and channels."""
    k = gaussian_kernel()
    w2 = np.outer(k, k)
    r = len(k) // 2
    H, W, C = a.shape
    pa, pb = (np.pad(x, ((r, r), (r, r), (0, 0))) for x in (a, b))
    vals = []
    for c in range(C):
        for y in range(H):
            for x in range(W):
                wa, wb = pa[y:y + 2 * r + 1, x:x + 2 * r + 1, c], pb[y:y + 2 * r + 1, x:x + 2 * r + 1, c]
                ma, mb = np.sum(w2 * wa), np.sum(w2 * wb)
                va, vb = np.sum(w2 * wa * wa) - ma * ma, np.sum(w2 * wb * wb) - mb * mb
                cov = np.sum(w2 * wa * wb) - ma * mb
                vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def test_psnr_known_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0)
    with pytest.raises(ValueError, match="dimensions"):
        psnr(a, np.zeros((4, 5, 3)))


def test_ssim_matches_windowed_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(13, 12, 2))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_gradient():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(10, 10, 3)), rng.uniform(size=(10, 10, 3))
    _, g = ssim(a, b, return_grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (4, 5, 1), (9, 3, 2)]:
        p, m = a.copy(), a.copy()
        p[idx] += h
        m[idx] -= h
        assert g[idx] == pytest.approx((ssim(p, b) - ssim(m, b)) / (2 * h), rel=1e-5, abs=1e-10)


# ---------------------------------------------------------------- synth


def test_generation_is_deterministic(small):
    b1, g1 = small
    b2, g2 = generate(SynthConfig(motion="sinusoidal-bend", **SMALL))
    np.testing.assert_array_equal(b1.frames[3].image, b2.frames[3].image)
    np.testing.assert_array_equal(g1.trajectories, g2.trajectories)


def test_relative_depth_is_planted_affine_of_true_depth():
    cfg = SynthConfig(motion="static", **SMALL)
    b, gt = generate(cfg)
    for fr, d in zip(b.frames, gt.depth):
        ok = fr.depth_com >= 0
        np.testing.assert_allclose(fr.depth_com[ok] * cfg.depth_scale + cfg.depth_shift, d[ok], atol=1e-12)
        assert np.all(fr.depth_hum[~fr.mask] == INVALID_DEPTH)


@pytest.mark.parametrize("motion", MOTIONS)
def test_motions(motion):
    b, gt = generate(SynthConfig(motion=motion, **SMALL))
    b.validate()
    d = gt.trajectories - gt.trajectories[:1]
    if motion == "static":
        assert gt.motion_magnitude == 0.0
    elif motion == "rigid-translation":
        np.testing.assert_allclose(d, np.broadcast_to(d[:, :1], d.shape), atol=1e-12)
        assert gt.motion_magnitude > 0
    else:
        assert gt.motion_magnitude > 0
        assert np.ptp(np.linalg.norm(d[-1], axis=1)) > 0  # non-rigid


def test_keypoint_dropout_reduces_visibility():
    base, _ = generate(SynthConfig(motion="static", **SMALL))
    drop, _ = generate(SynthConfig(motion="static", keypoint_dropout=0.5, **SMALL))
    n = lambda bb: sum(ob.visible for tr in bb.tracks for ob in tr.obs)
    assert n(drop) < 0.7 * n(base)


def test_trajectory_error_references(small):
    b, gt = small
    idx = match_tracks(b.tracks, gt)
    assert np.all(idx == np.arange(len(b.tracks)))
    P = gt.trajectories + np.array([0.1, 0, 0])
    assert trajectory_error(P, idx, gt, "none") == pytest.approx(0.1)
    assert trajectory_error(P, idx, gt, "first") == pytest.approx(0.0, abs=1e-12)
    assert trajectory_error(P, idx, gt, "mean") == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        trajectory_error(P, idx, gt, "median")


def test_invalid_synth_config():
    with pytest.raises(ValueError, match="motion"):
        SynthConfig(motion="wave").validate()


# ---------------------------------------------------------------- io


def test_bundle_round_trip(tmp_path, small):
    b, _ = small
    io.save_bundle(b, tmp_path)
    r = io.load_bundle(tmp_path)
    assert len(r) == len(b)
    for f1, f2 in zip(b.frames, r.frames):
        np.testing.assert_allclose(f2.image, np.round(f1.image * 255) / 255)
        np.testing.assert_array_equal(f2.mask, f1.mask)
        np.testing.assert_allclose(f2.depth_com, f1.depth_com.astype(np.float32))
        np.testing.assert_allclose(f2.sparse_points, f1.sparse_points)
    np.testing.assert_array_equal(r.cameras[2].E, b.cameras[2].E)
    assert [ob.visible for ob in r.tracks[5].obs] == [ob.visible for ob in b.tracks[5].obs]


def test_bundle_errors_name_file_and_field(tmp_path, small):
    b, _ = small
    io.save_bundle(b, tmp_path)
    (tmp_path / "frame_00002.depth_hum.f32").write_bytes(b"\0" * 12)
    with pytest.raises(DataError, match=r"frame_00002\.depth_hum\.f32.*depth_hum"):
        io.load_bundle(tmp_path)
    (tmp_path / "keypoints.json").write_text("{")
    (tmp_path / "frame_00002.depth_hum.f32").unlink()
    with pytest.raises(DataError, match="frame_00002"):
        io.load_bundle(tmp_path)
    with pytest.raises(DataError, match="not found"):
        io.load_bundle(tmp_path / "nope")


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    N = 7
    frames = [Gaussians(rng.normal(size=(N, 3)), rng.normal(size=(N, 4)), rng.uniform(size=(N, 3)),
                        rng.uniform(size=N), rng.uniform(size=(N, 3)), np.arange(N)) for _ in range(2)]
    bg = Gaussians(rng.normal(size=(3, 3)), rng.normal(size=(3, 4)), rng.uniform(size=(3, 3)), rng.uniform(size=3),
                   rng.uniform(size=(3, 3)), np.arange(N, N + 3))
    fs = GaussianFrameSet([0.0, 0.8], [0, 4], frames, bg, rng.uniform(size=(N, 6)) < 0.5, {N + 3: 2}, N + 4)
    params = init_params(2, EncodingConfig(2, 3), depth=3, width=8, skips=(2,), seed=4)
    io.save_checkpoint(tmp_path / "c.bin", fs, params, {"iter": 12})
    fs2, p2, meta = io.load_checkpoint(tmp_path / "c.bin")
    assert meta == {"iter": 12}
    for a, b in zip(fs.frames + [fs.background], fs2.frames + [fs2.background]):
        for f in ("mu", "rot", "scale", "opacity", "color", "lineage"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    np.testing.assert_array_equal(fs.visibility, fs2.visibility)
    assert fs2.lineage == fs.lineage and fs2.next_id == fs.next_id
    for (n1, a1), (n2, a2) in zip(params.named_arrays(), p2.named_arrays()):
        assert n1 == n2
        np.testing.assert_array_equal(a1, a2)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(DataError, match="magic"):
        io.load_checkpoint(tmp_path / "x.bin")
