"""Property-based checks of the invariants each module promises."""

from collections import Counter

import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import composite_pixel
from refsplat import deform_field as df
from refsplat import deform_net as dn
from refsplat import densify as dz
from refsplat import quaternion as quat
from refsplat import rasterizer as rz
from refsplat import shape_init as si
from refsplat.adam import Adam
from refsplat.metrics import PSNR_CAP, psnr, ssim
from refsplat.scene import INVALID_DEPTH, Camera, Gaussians, GaussianFrameSet
from refsplat.trainer import freeze_weight

FAST = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-3, 3, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


def cam(W=12, H=10, f=14.0):
    return Camera(np.array([[f, 0, (W - 1) / 2], [0, f, (H - 1) / 2], [0, 0, 1]]), np.eye(4), W, H)


def random_gaussians(rng, n):
    mu = np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(2, 4, n)]
    return Gaussians(mu, quat.normalize(rng.normal(size=(n, 4))), rng.uniform(0.05, 0.3, (n, 3)),
                     rng.uniform(0.05, 0.95, n), rng.uniform(0, 1, (n, 3)), np.arange(n))


# ---------------------------------------------------------------- quaternions and cameras


@FAST
@given(arrays(np.float64, 4, elements=finite))
def test_rotation_matrices_are_proper(q):
    assume(np.linalg.norm(q) > 1e-3)
    R = quat.to_rotmat(quat.normalize(q))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    q2 = quat.from_rotmat(R)
    assert abs(abs(np.dot(q2, quat.normalize(q))) - 1) < 1e-9


@FAST
@given(st.floats(2, 60), st.floats(2, 60), st.floats(0.5, 8), seeds)
def test_lift_and_project_are_inverse(x, y, z, seed):
    c = Camera(np.array([[50.0, 0, 31.5], [0, 52.0, 31.5], [0, 0, 1]]), np.eye(4), 64, 64)
    a = np.random.default_rng(seed).normal(size=3) * 0.3
    E = np.eye(4)
    E[:3, :3] = quat.to_rotmat(quat.from_axis_angle(a / max(np.linalg.norm(a), 1e-9), np.linalg.norm(a)))
    E[:3, 3] = [0.1, -0.2, 0.3]
    c = Camera(c.K, E, 64, 64)
    X = c.unproject(np.array([x, y]), np.array(z))
    p, d = c.project(X)
    np.testing.assert_allclose(p, [x, y], atol=1e-9)
    assert abs(d - z) < 1e-9


# ---------------------------------------------------------------- rasterizer


@FAST
@given(seeds, st.integers(1, 6))
def test_transmittance_telescopes(seed, n):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, n)
    c = cam()
    proj, out = rz.render_gaussians(g, c)
    assert np.all(out.alpha >= 0) and np.all(out.alpha <= 1)
    assert np.all(out.depth[out.alpha == 0] == 0)
    conic, rx, ry, valid = rz._conics(proj.cov2d, rz.DILATION)
    for py, px in [(0, 0), (4, 5), (9, 11), (int(rng.integers(10)), int(rng.integers(12)))]:
        alphas, cols, deps = [], [], []
        for k in range(len(proj)):
            dx, dy = px - proj.mu2d[k, 0], py - proj.mu2d[k, 1]
            if not valid[k] or abs(dx) > rx[k] or abs(dy) > ry[k]:
                continue
            a = min(proj.opacity[k] * np.exp(-0.5 * (conic[k, 0] * dx * dx + 2 * conic[k, 1] * dx * dy
                                                     + conic[k, 2] * dy * dy)), rz.ALPHA_MAX)
            if a >= rz.ALPHA_MIN:
                alphas.append(a)
                cols.append(proj.color[k])
                deps.append(proj.depth[k])
        rgb, d, acc = composite_pixel(alphas, cols, deps)
        assert abs(out.alpha[py, px] - acc) < 1e-9
        assert abs(out.alpha[py, px] - (1 - np.prod([1 - a for a in alphas]))) < 1e-9
        np.testing.assert_allclose(out.rgb[py, px], rgb, atol=1e-12)


@FAST
@given(seeds)
def test_projected_covariances_are_valid(seed):
    g = random_gaussians(np.random.default_rng(seed), 8)
    p = rz.project(g, cam())
    np.testing.assert_allclose(p.cov2d, np.transpose(p.cov2d, (0, 2, 1)), atol=1e-15)
    assert np.all(np.linalg.eigvalsh(p.cov2d + rz.DILATION * np.eye(2)) > 0)
    assert np.all(p.depth > rz.NEAR_PLANE)


@FAST
@given(seeds)
def test_doubling_resolution_keeps_alpha_at_physical_points(seed):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, 1)
    g.opacity[:] = 0.5
    coarse = cam(12, 10)
    fine = Camera(np.diag([2.0, 2.0, 1.0]) @ coarse.K, coarse.E, 24, 20)
    _, a = rz.render_gaussians(g, coarse, dilation=0.0)
    _, b = rz.render_gaussians(g, fine, dilation=0.0)
    # fine pixel (2r, 2c) sits on the same ray as coarse pixel (r, c); inside both 3-sigma boxes they agree
    both = (a.alpha > 0) & (b.alpha[::2, ::2] > 0)
    np.testing.assert_allclose(a.alpha[both], b.alpha[::2, ::2][both], atol=1e-6)
    assert both.any() or a.alpha.max() == 0


@FAST
@given(seeds)
def test_equal_depth_permutation_with_equal_colors_is_invariant(seed):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, 4)
    g.mu[:, 2] = 3.0
    g.color[:] = 0.4
    perm = rng.permutation(4)
    _, a = rz.render_gaussians(g, cam())
    _, b = rz.render_gaussians(g.subset(perm), cam())
    np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-12)


# ---------------------------------------------------------------- network and blending


@FAST
@given(arrays(np.float64, (7, 4), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(logits):
    from refsplat.autodiff import Tape
    t = Tape()
    y = t.softmax(t.leaf(logits)).value
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


@FAST
@given(seeds, st.floats(0, 1))
def test_forward_backward_deterministic(seed, t):
    rng = np.random.default_rng(seed)
    p = dn.init_params(2, dn.EncodingConfig(2, 2), depth=3, width=8, skips=(2,), seed=seed % 1000)
    for name, arr in p.named_arrays():
        p.set_named(name, rng.normal(scale=0.3, size=arr.shape))
    x = rng.normal(size=(5, 2, 3))
    g = rng.normal(size=(5, 2))
    o1, o2 = dn.forward(p, x, t), dn.forward(p, x, t)
    np.testing.assert_array_equal(o1.w, o2.w)
    b1, b2 = dn.backward(o1, g_w=g), dn.backward(o2, g_w=g)
    for k in b1:
        np.testing.assert_array_equal(b1[k], b2[k])


@FAST
@given(seeds)
def test_zeroed_skip_branch_makes_net_a_function_of_its_input(seed):
    rng = np.random.default_rng(seed)
    p = dn.init_params(2, dn.EncodingConfig(2, 2), depth=4, width=8, skips=(2,), seed=1)
    for name, arr in p.named_arrays():
        p.set_named(name, rng.normal(scale=0.5, size=arr.shape))
    W, b = p.hidden[2]
    W = W.copy()
    W[p.input_dim:] = 0.0  # rows fed by the pre-skip activations
    p.hidden[2] = (W, b)
    x = rng.normal(size=(6, 2, 3))
    before = dn.forward(p, x, 0.3, record=False)
    for i in (0, 1):
        Wi, bi = p.hidden[i]
        p.hidden[i] = (rng.normal(size=Wi.shape), rng.normal(size=bi.shape))
    after = dn.forward(p, x, 0.3, record=False)
    np.testing.assert_array_equal(before.dx, after.dx)
    np.testing.assert_array_equal(before.w, after.w)


def frame_set(rng, N=5, B=3, T=6):
    frames = [Gaussians(rng.normal(size=(N, 3)), quat.normalize(rng.normal(size=(N, 4))),
                        rng.uniform(0.05, 0.2, (N, 3)), rng.uniform(0, 1, N), rng.uniform(0, 1, (N, 3)), np.arange(N))
              for _ in range(B)]
    vis = rng.uniform(size=(N, T)) < 0.6
    ref = np.array([0, 2, 5])[:B]
    vis[:, ref[0]] = True
    bg = Gaussians(rng.normal(size=(2, 3)), np.tile(quat.IDENTITY, (2, 1)), np.full((2, 3), 0.1), np.full(2, 0.5),
                   np.full((2, 3), 0.3), np.arange(N, N + 2))
    return GaussianFrameSet(ref / (T - 1), ref, frames, bg, vis)


def random_net(rng, B):
    p = dn.init_params(B, dn.EncodingConfig(2, 2), depth=2, width=8, skips=(), seed=0)
    for name, arr in p.named_arrays():
        p.set_named(name, rng.normal(scale=0.3, size=arr.shape))
    return p


@FAST
@given(seeds, st.floats(0, 1))
def test_deformed_rotations_unit_and_background_untouched(seed, t):
    rng = np.random.default_rng(seed)
    fs = frame_set(rng)
    bg_before = fs.background.copy()
    p = random_net(rng, fs.B)
    g, _ = df.deform_at(fs, p, t)
    np.testing.assert_allclose(np.linalg.norm(g.rot, axis=1), 1.0, atol=1e-9)
    for f in ("mu", "rot", "scale", "opacity", "color", "lineage"):
        np.testing.assert_array_equal(getattr(g, f)[fs.n_human:], getattr(bg_before, f))
        np.testing.assert_array_equal(getattr(fs.background, f), getattr(bg_before, f))


@FAST
@given(seeds, arrays(np.float64, 3, elements=finite), st.floats(0, 1))
def test_translation_equivariance_for_fixed_network_outputs(seed, v, t):
    rng = np.random.default_rng(seed)
    fs = frame_set(rng)
    p = random_net(rng, fs.B)
    out = dn.forward(p, df.substitute_invisible(fs.stacked("mu"), fs.ref_visibility), t, record=False)
    g1, _ = df.deform_human(fs, p, t, net_out=out)
    moved = fs.copy()
    moved.set_stacked("mu", fs.stacked("mu") + v)
    g2, _ = df.deform_human(moved, p, t, net_out=out)
    np.testing.assert_allclose(g2.mu, g1.mu + v, atol=1e-12)
    np.testing.assert_allclose(g2.rot, g1.rot, atol=1e-15)


# ---------------------------------------------------------------- shape initialization


@FAST
@given(seeds, st.floats(0.2, 5), st.floats(-2, 2))
def test_ransac_sample_order_invariance(seed, s, t):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 4, 80)
    y = s * x + t + rng.normal(0, 0.01, 80)
    y[:15] = rng.uniform(-5, 20, 15)
    assume(np.median(y) > 0)
    p = rng.permutation(80)
    a, b = si.ransac_fit(x, y, iters=200), si.ransac_fit(x[p], y[p], iters=200)
    assert (a.s_star, a.t_star, a.inlier_ratio) == (b.s_star, b.t_star, b.inlier_ratio)
    assert a.s_star > 0 and 0 < a.inlier_ratio <= 1


@FAST
@given(arrays(bool, (6, 7)), arrays(np.float64, (6, 7), elements=st.floats(0.1, 9)),
       arrays(np.float64, (6, 7), elements=st.floats(0.1, 9)))
def test_compose_depth_idempotent(mask, hum, com):
    hum = np.where(mask, hum, INVALID_DEPTH)
    once = si.compose_depth(mask, hum, com)
    np.testing.assert_array_equal(si.compose_depth(mask, once, once), once)


@FAST
@given(seeds, st.integers(2, 9), st.integers(1, 4))
def test_selection_indices_strictly_increasing(seed, T, B):
    assume(B <= T)
    vis = np.random.default_rng(seed).uniform(size=(6, T)) < 0.5
    vis[0] = True
    sel = si.select_reference_frames(vis, T, B)
    idx = sel.indices
    assert len(idx) == B and np.all(np.diff(idx) > 0) and 0 <= idx[0] and idx[-1] < T


# ---------------------------------------------------------------- density control, metrics, schedule


@FAST
@given(seeds, st.integers(2, 4), st.integers(1, 5))
def test_densify_keeps_multisets_equal(seed, B, rounds):
    rng = np.random.default_rng(seed)
    N = 12
    base = rng.normal(size=(N, 3))
    frames = [Gaussians(base + rng.normal(scale=0.05, size=(N, 3)) + b, quat.normalize(rng.normal(size=(N, 4))),
                        rng.uniform(0.01, 0.1, (N, 3)), rng.uniform(0, 0.02, N), rng.uniform(0, 1, (N, 3)),
                        np.arange(N)) for b in range(B)]
    for g in frames[1:]:
        g.opacity = frames[0].opacity.copy()
    fs = GaussianFrameSet(np.linspace(0, 1, B), np.arange(B), frames, Gaussians.empty(), np.ones((N, B), bool))
    for _ in range(rounds):
        n = fs.n_human
        dz.densify_sync(fs, rng.uniform(0, 1e-3, n), np.ones(n), 1.0, dz.DensifyConfig(max_human=60), rng)
        ms = [Counter(g.lineage.tolist()) for g in fs.frames]
        assert all(m == ms[0] for m in ms[1:])
        assert fs.n_human <= 60


@FAST
@given(arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)))
def test_metric_identities(img):
    assert psnr(img, img) == PSNR_CAP
    assert abs(ssim(img, img) - 1.0) < 1e-12


@FAST
@given(st.floats(0, 100), st.integers(1, 50))
def test_freeze_weight_bounded_and_monotone(epoch, n):
    z = freeze_weight(epoch, n)
    assert 0.0 <= z <= 1.0
    assert freeze_weight(epoch + 1, n) <= z
    if epoch >= n:
        assert z == 0.0


@FAST
@given(seeds)
def test_adam_row_remap_carries_moments(seed):
    rng = np.random.default_rng(seed)
    a = Adam()
    x = rng.normal(size=(5, 3))
    a.step("x", x, rng.normal(size=(5, 3)), 0.1)
    m_before = a.m["x"].copy()
    a.remap_rows("x", np.array([4, 0, -1]))
    np.testing.assert_array_equal(a.m["x"][:2], m_before[[4, 0]])
    assert np.all(a.m["x"][2] == 0)
