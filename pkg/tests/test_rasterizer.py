import math

import numpy as np
import pytest

from oracles import composite_pixel, fd_scene, max_rel_error
from refsplat import rasterizer as rz
from refsplat.scene import Camera, Gaussians

PARAMS = ("mu", "rot", "scale", "opacity", "color")


def fd_sweep(seed=0):
    """Worst relative error between analytic and central-difference gradients over every parameter."""
    g, cam, rng = fd_scene(seed)
    Wr, Wd = rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16))

    def loss(gg):
        _, o = rz.render_gaussians(gg, cam)
        return np.sum(o.rgb * Wr) + np.sum(o.depth * Wd)

    p, o = rz.render_gaussians(g, cam)
    grads = rz.render_backward(p, o, Wr, Wd)
    worst, h = 0.0, 1e-5
    for name in PARAMS:
        arr = getattr(g, name)
        for idx in np.ndindex(arr.shape):
            gp, gm = g.copy(), g.copy()
            getattr(gp, name)[idx] += h
            getattr(gm, name)[idx] -= h
            num = (loss(gp) - loss(gm)) / (2 * h)
            worst = max(worst, max_rel_error(getattr(grads, name)[idx], num))
    return worst


def axis_camera(f=10.0, size=9):
    c = (size - 1) / 2
    return Camera(np.array([[f, 0, c], [0, f, c], [0, 0, 1]]), np.eye(4), size, size)


def iso(mu, s, o, color, lid=0):
    return Gaussians([mu], [[1, 0, 0, 0]], [[s, s, s]], [o], [color], [lid])


def test_gradients_match_finite_differences():
    assert fd_sweep(0) <= 1e-4


def test_single_gaussian_pixel_values_by_hand():
    cam = axis_camera()
    z, s, o = 2.0, 0.1, 0.6
    g = iso([0, 0, z], s, o, [0.2, 0.5, 0.9])
    _, out = rz.render_gaussians(g, cam)
    var = (10.0 * s / z) ** 2 + rz.DILATION
    # center pixel: zero offset
    assert out.rgb[4, 4] == pytest.approx(o * np.array([0.2, 0.5, 0.9]), abs=1e-12)
    assert out.depth[4, 4] == pytest.approx(o * z, abs=1e-12)
    # one pixel to the right
    a = o * math.exp(-0.5 / var)
    assert out.rgb[4, 5, 1] == pytest.approx(a * 0.5, abs=1e-12)
    assert out.alpha[4, 5] == pytest.approx(a, abs=1e-12)
    # diagonal neighbour
    a = o * math.exp(-0.5 * 2 / var)
    assert out.depth[3, 3] == pytest.approx(a * z, abs=1e-12)


def test_two_gaussians_composite_front_to_back():
    cam = axis_camera()
    front = iso([0, 0, 2.0], 0.1, 0.5, [1, 0, 0], 0)
    back = iso([0, 0, 3.0], 0.15, 0.7, [0, 0, 1], 1)
    g = Gaussians.concat([back, front])  # input order must not matter
    _, out = rz.render_gaussians(g, cam)
    for px, (dx, dy) in {(4, 4): (0, 0), (4, 6): (2, 0), (5, 3): (-1, 1)}.items():
        alphas = []
        for z, s, o in ((2.0, 0.1, 0.5), (3.0, 0.15, 0.7)):
            var = (10.0 * s / z) ** 2 + rz.DILATION
            alphas.append(o * math.exp(-0.5 * (dx * dx + dy * dy) / var))
        rgb, d, a = composite_pixel(alphas, [[1, 0, 0], [0, 0, 1]], [2.0, 3.0])
        np.testing.assert_allclose(out.rgb[px], rgb, atol=1e-12)
        assert out.depth[px] == pytest.approx(d, abs=1e-12)
        assert out.alpha[px] == pytest.approx(a, abs=1e-12)


def test_alpha_is_clamped_and_tiny_alpha_skipped():
    cam = axis_camera()
    _, out = rz.render_gaussians(iso([0, 0, 2.0], 0.1, 1.0, [1, 1, 1]), cam)
    assert out.alpha[4, 4] == pytest.approx(rz.ALPHA_MAX)
    _, out = rz.render_gaussians(iso([0, 0, 2.0], 0.1, 0.003, [1, 1, 1]), cam)
    assert np.all(out.alpha == 0)


def test_behind_camera_is_culled_with_zero_gradient():
    cam = axis_camera()
    g = Gaussians.concat([iso([0, 0, 2.0], 0.1, 0.5, [1, 0, 0], 0), iso([0, 0, -1.0], 0.1, 0.5, [0, 1, 0], 1)])
    p, out = rz.render_gaussians(g, cam)
    assert list(p.source_index) == [0]
    gr = rz.render_backward(p, out, np.ones((9, 9, 3)), np.ones((9, 9)))
    assert np.all(gr.mu[1] == 0) and np.all(gr.color[1] == 0)
    assert np.any(gr.color[0] != 0)


def test_empty_scene_renders_background():
    cam = axis_camera()
    p, out = rz.render_gaussians(Gaussians.empty(), cam)
    assert out.rgb.shape == (9, 9, 3) and np.all(out.rgb == 0) and np.all(out.alpha == 0)
    gr = rz.render_backward(p, out, np.zeros((9, 9, 3)), np.zeros((9, 9)))
    assert gr.mu.shape == (0, 3)


def test_backward_rejects_foreign_forward_record():
    cam = axis_camera()
    g = iso([0, 0, 2.0], 0.1, 0.5, [1, 0, 0])
    p1, _ = rz.render_gaussians(g, cam)
    _, out2 = rz.render_gaussians(g, cam)
    with pytest.raises(rz.RenderStateError):
        rz.render_backward(p1, out2, np.zeros((9, 9, 3)), np.zeros((9, 9)))


def test_equal_depth_ties_keep_source_order():
    cam = axis_camera()
    g = Gaussians.concat([iso([0, 0, 2.0], 0.1, 0.5, [1, 0, 0], 0), iso([0, 0, 2.0], 0.1, 0.5, [0, 1, 0], 1)])
    p, out = rz.render_gaussians(g, cam)
    assert list(p.source_index) == [0, 1]
    assert out.rgb[4, 4, 0] > out.rgb[4, 4, 1]
