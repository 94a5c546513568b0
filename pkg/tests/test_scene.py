import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatcodec.diffmath import ContractError, philox
from splatcodec.scene import (AttributeHeads, CountMismatchError, MissingPropertyError, NeuralGaussian,
                              PlyHeaderError, SynthSpec, TargetAnchorSet, ToyCamera, derive_gaussians,
                              load_targets, psnr, quat_to_rot, read_ppm, render_image, save_targets,
                              synth_targets, write_ppm)

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def _gauss(mu, alpha, color, scale=0.05):
    return NeuralGaussian(np.asarray(mu, float), np.full(3, scale), IDENT, alpha, np.asarray(color, float))


def test_single_gaussian_pixel_is_color_times_alpha():
    cam = ToyCamera(8, 8)
    px, py = cam.pixel_centers()
    c = np.array([0.2, 0.5, 0.9])
    img = render_image([_gauss([px[3], py[5], 0.0], 0.6, c)], cam)
    assert np.allclose(img[5, 3], c * 0.6, atol=1e-12)


def test_two_layer_compositing():
    cam = ToyCamera(8, 8)
    px, py = cam.pixel_centers()
    c = np.array([0.4, 0.8, 1.0])
    g = [_gauss([px[2], py[2], 0.0], 0.5, c), _gauss([px[2], py[2], 0.5], 0.5, c)]
    assert np.allclose(render_image(g, cam)[2, 2], 0.75 * c, atol=1e-12)


def test_front_to_back_order_by_depth():
    cam = ToyCamera(8, 8)
    px, py = cam.pixel_centers()
    near = _gauss([px[1], py[1], 1.0], 1.0, [1, 0, 0])
    far = _gauss([px[1], py[1], 0.0], 1.0, [0, 1, 0])
    assert np.allclose(render_image([far, near], cam)[1, 1], [1, 0, 0])


def test_anchor_spawn_position_example():
    heads = AttributeHeads(1, feat_dim=4)
    g = derive_gaussians([1, 2, 3], np.zeros(4), [2, 2, 2], [[0.1, 0, 0]], [True], heads, ToyCamera())
    assert np.allclose(g[0].mu, [1.2, 2.0, 3.0], atol=1e-12)


@given(st.floats(0.1, 10.0))
def test_spawn_offset_scales_linearly(t):
    heads = AttributeHeads(2, feat_dim=4)
    x, l = np.array([0.3, -1.0, 2.0]), np.array([0.5, 1.5, 2.0])
    o = np.array([[0.2, -0.4, 1.0], [1.0, 0.3, -0.2]])
    a = derive_gaussians(x, np.zeros(4), l, o, [True, True], heads, ToyCamera())
    b = derive_gaussians(x, np.zeros(4), t * l, o, [True, True], heads, ToyCamera())
    for ga, gb in zip(a, b):
        assert np.allclose(gb.mu - x, t * (ga.mu - x), rtol=1e-12, atol=1e-12)


def test_masked_offsets_spawn_nothing():
    heads = AttributeHeads(2, feat_dim=4)
    g = derive_gaussians([0, 0, 0], np.zeros(4), [1, 1, 1], np.ones((2, 3)), [True, False], heads, ToyCamera())
    assert len(g) == 1


def test_transmittance_never_negative_and_image_bounded():
    rng = philox(3)
    cam = ToyCamera(16, 16)
    gs = [_gauss(rng.random(3), rng.random(), rng.random(3), 0.1) for _ in range(60)]
    img = render_image(gs, cam)
    assert img.min() >= 0 and img.max() <= 1 + 1e-12


def test_quaternion_rotation_orthonormal():
    q = philox(4).normal(size=(10, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    R = quat_to_rot(q)
    assert np.allclose(R @ R.transpose(0, 2, 1), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)


def test_psnr_examples():
    a = philox(5).random((4, 4, 3)) * 0.8
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    b = philox(6).random((4, 4, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ContractError):
        psnr(a, a[:2])


def test_ppm_roundtrip(tmp_path):
    img = np.floor(philox(7).random((5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img)


@pytest.mark.parametrize("binary,ply_type", [(True, "double"), (True, "float"), (False, "double")])
def test_ply_roundtrip(tmp_path, binary, ply_type):
    t = synth_targets(SynthSpec(n=20, k=4, seed=1))
    save_targets(t, tmp_path / "s.ply", binary=binary, ply_type=ply_type)
    back = load_targets(tmp_path / "s.ply")
    tol = 1e-6 if ply_type == "float" else 0
    assert back.k == 4 and back.n == 20
    for name in "xflo":
        assert np.allclose(getattr(back, name), getattr(t, name), atol=tol, rtol=tol)


def test_ply_errors(tmp_path):
    t = synth_targets(SynthSpec(n=5, k=2, seed=1))
    save_targets(t, tmp_path / "ok.ply")
    data = (tmp_path / "ok.ply").read_bytes()
    (tmp_path / "short.ply").write_bytes(data[:-10])
    with pytest.raises(CountMismatchError):
        load_targets(tmp_path / "short.ply")
    (tmp_path / "nohead.ply").write_bytes(b"plx\n" + data[4:])
    with pytest.raises(PlyHeaderError):
        load_targets(tmp_path / "nohead.ply")
    (tmp_path / "missing.ply").write_bytes(data.replace(b"property double f_3\n", b"property double g_3\n"))
    with pytest.raises(MissingPropertyError):
        load_targets(tmp_path / "missing.ply")


def test_target_set_validation():
    with pytest.raises(ContractError):
        TargetAnchorSet(np.zeros((2, 3)), np.zeros((3, 32)), np.zeros((2, 3)), np.zeros((2, 1, 3)))
    with pytest.raises(ContractError):
        TargetAnchorSet(np.full((1, 3), np.inf), np.zeros((1, 32)), np.zeros((1, 3)), np.zeros((1, 1, 3)))


def test_synth_is_deterministic_and_smooth():
    a = synth_targets(SynthSpec(n=500, seed=4))
    assert np.array_equal(a.f, synth_targets(SynthSpec(n=500, seed=4)).f)
    assert not np.array_equal(a.f, synth_targets(SynthSpec(n=500, seed=5)).f)
    # smooth field: nearby anchors carry nearby features
    d = np.linalg.norm(a.x[:, None] - a.x[None], axis=2)
    np.fill_diagonal(d, np.inf)
    nn = d.argmin(axis=1)
    local = np.mean(np.sum((a.f - a.f[nn]) ** 2, axis=1))
    spread = np.mean(np.sum((a.f - a.f.mean(0)) ** 2, axis=1))
    assert local < 0.2 * spread


def test_synth_spec_parse():
    s = SynthSpec.parse("n=10,seed=3,field=noisy")
    assert (s.n, s.seed, s.field) == (10, 3, "noisy")
    with pytest.raises(ValueError):
        SynthSpec.parse("bogus=1")
