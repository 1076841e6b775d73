import copy
import math

import numpy as np
import pytest
import torch

from nerfmark.autodiff import Rng, gradient_check
from nerfmark.camera import CameraPose, PoseError, focal_length, generate_rays, pose_from_angles
from nerfmark.metrics import psnr
from nerfmark.nerf import (
    NerfModel,
    Ray,
    composite,
    init_nerf,
    moving_average,
    positional_encoding,
    render_image,
    render_ray,
    render_rays,
    sample_depths,
    train_nerf,
)


class ConstantField(torch.nn.Module):
    """Fixed density and color everywhere; stands in for a trained model."""

    def __init__(self, sigma=0.0, rgb=(0.2, 0.4, 0.6)):
        super().__init__()
        self.sigma = torch.nn.Parameter(torch.tensor(float(sigma)))
        self.rgb = torch.nn.Parameter(torch.tensor(rgb))

    def forward(self, x, d):
        return self.rgb.expand(*x.shape[:-1], 3), self.sigma.expand(x.shape[:-1])


def small_model(seed=0):
    return init_nerf(NerfModel(hidden=32, n_layers=2), Rng(seed))


def test_encoding_at_zero_alternates():
    out = positional_encoding(torch.zeros(3), 4)
    assert out.shape == (24,)
    expected = torch.tensor(([0.0] * 3 + [1.0] * 3) * 4)
    assert torch.equal(out, expected)


def test_encoding_half():
    out = positional_encoding(torch.tensor([0.5]), 1)
    assert torch.allclose(out, torch.tensor([1.0, 0.0]), atol=1e-7)


@pytest.mark.parametrize("k,L", [(1, 1), (3, 6), (3, 4), (5, 2)])
def test_encoding_width(k, L):
    assert positional_encoding(Rng(k).normal((7, k)), L).shape == (7, 2 * L * k)


def test_encoding_rejects_zero_frequencies():
    with pytest.raises(ValueError):
        positional_encoding(torch.zeros(3), 0)


def test_identity_pose_center_pixel_looks_down_minus_z():
    pose = CameraPose(np.eye(4), 0.8)
    _, dirs = generate_rays(pose, 5, 5)
    assert torch.allclose(dirs[12], torch.tensor([0.0, 0.0, -1.0]), atol=1e-5)


def test_ray_origins_equal_translation():
    c2w = pose_from_angles(30, 20, 4.0)
    origins, dirs = generate_rays(CameraPose(c2w, 0.7), 6, 4)
    assert origins.shape == dirs.shape == (24, 3)
    assert np.allclose(origins.numpy(), c2w[:3, 3], atol=1e-6)
    assert torch.allclose(dirs.norm(dim=-1), torch.ones(24), atol=1e-6)


def test_corner_pixel_angle_matches_pinhole():
    w, h, fov = 8, 6, 0.9
    _, dirs = generate_rays(CameraPose(np.eye(4), fov), w, h)
    f = focal_length(w, fov)
    # pixel centers put the corner ray half a pixel inside the image corner
    dx, dy = 0.5 * w - 0.5, 0.5 * h - 0.5
    want = math.atan(math.hypot(dx, dy) / f)
    got = math.acos(-dirs[0, 2].item())
    assert abs(got - want) < 1e-4


def test_image_corner_angle_oracle():
    # with the pixel grid refined the corner ray approaches the image corner,
    # whose angle is atan(diag / (2 f))
    w, h, fov = 400, 300, 0.7
    _, dirs = generate_rays(CameraPose(np.eye(4), fov), w, h)
    want = math.atan(math.hypot(w, h) / (2 * focal_length(w, fov)))
    assert abs(math.acos(-dirs[0, 2].item()) - want) < 5e-3


def test_orbit_pose_looks_at_origin():
    c2w = pose_from_angles(75, 30, 4.0)
    origins, dirs = generate_rays(CameraPose(c2w, 0.7), 9, 9)
    center = origins[40] + 4.0 * dirs[40]
    assert center.abs().max() < 1e-5


def test_degenerate_pose_rejected():
    bad = np.eye(4)
    bad[:3, :3] = 0
    with pytest.raises(PoseError):
        CameraPose(bad, 0.7)
    skew = np.eye(4)
    skew[0, 1] = 0.3
    with pytest.raises(PoseError, match="orthonormal"):
        CameraPose(skew, 0.7)


def test_ray_invariants():
    with pytest.raises(ValueError):
        Ray(torch.zeros(3), torch.tensor([0.0, 0.0, 2.0]), 2.0, 6.0)
    with pytest.raises(ValueError):
        Ray(torch.zeros(3), torch.tensor([0.0, 0.0, 1.0]), 6.0, 2.0)


def test_samples_strictly_increasing_and_in_range():
    t = sample_depths(50, 2.0, 6.0, 64, Rng(0))
    assert (t[:, 1:] > t[:, :-1]).all()
    assert t.min() >= 2.0 and t.max() <= 6.0
    mid = sample_depths(1, 2.0, 6.0, 4, None)
    assert torch.allclose(mid, torch.tensor([[2.5, 3.5, 4.5, 5.5]]))


def test_vacuum_renders_black():
    ray = Ray(torch.zeros(3), torch.tensor([0.0, 0.0, -1.0]), 2.0, 6.0)
    assert torch.equal(render_ray(ConstantField(0.0), ray, 16), torch.zeros(3))
    _, weights = render_rays(ConstantField(0.0), torch.zeros(1, 3), torch.tensor([[0.0, 0.0, -1.0]]), 2, 6, 16)
    assert weights.sum().item() == 0.0


def test_opaque_wall_returns_first_color():
    sigma = torch.tensor([[1e12, 1.0, 5.0]])
    rgb = torch.tensor([[[0.9, 0.1, 0.3], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
    color, w = composite(sigma, rgb, torch.ones(1, 3))
    assert torch.allclose(color[0], rgb[0, 0], atol=1e-6)
    assert w[0, 1:].abs().max() == 0


def test_single_sample_ln2_gives_half_alpha():
    color, w = composite(torch.tensor([[math.log(2.0)]]), torch.tensor([[[1.0, 0.0, 0.0]]]), torch.ones(1, 1))
    assert abs(w.item() - 0.5) < 1e-6
    assert torch.allclose(color, torch.tensor([[0.5, 0.0, 0.0]]), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_weights_conserved_and_transmittance_monotone(seed):
    rng = Rng(seed)
    sigma = rng.uniform((32, 20), 0.0, 3.0) * (rng.uniform((32, 20)) > 0.5)
    deltas = rng.uniform((32, 20), 0.01, 0.5)
    _, w = composite(sigma, rng.uniform((32, 20, 3)), deltas)
    total = w.sum(-1)
    assert (total >= 0).all() and (total <= 1 + 1e-6).all()
    alpha = 1 - torch.exp(-sigma * deltas)
    assert (alpha >= 0).all() and (alpha <= 1).all()
    trans = torch.cumprod(1 - alpha, -1)
    assert (trans[:, 1:] <= trans[:, :-1]).all()


def test_zero_density_sample_inserted_is_neutral():
    rng = Rng(3)
    sigma, rgb, deltas = rng.uniform((4, 6), 0, 2), rng.uniform((4, 6, 3)), rng.uniform((4, 6), 0.1, 0.3)
    base, _ = composite(sigma, rgb, deltas)
    for pos in (0, 3, 6):
        s2 = torch.cat([sigma[:, :pos], torch.zeros(4, 1), sigma[:, pos:]], 1)
        c2 = torch.cat([rgb[:, :pos], rng.uniform((4, 1, 3)), rgb[:, pos:]], 1)
        d2 = torch.cat([deltas[:, :pos], torch.full((4, 1), 0.2), deltas[:, pos:]], 1)
        got, _ = composite(s2, c2, d2)
        assert (got - base).abs().max() < 1e-6


def test_model_output_ranges():
    model = small_model()
    rng = Rng(1)
    x = rng.normal((100, 3)) * 3
    d = torch.nn.functional.normalize(rng.normal((100, 3)), dim=-1)
    rgb, sigma = model(x, d)
    assert rgb.shape == (100, 3) and sigma.shape == (100,)
    assert (sigma >= 0).all() and (rgb >= 0).all() and (rgb <= 1).all()


def test_default_architecture():
    model = NerfModel()
    assert model.pos_freqs == 6 and model.dir_freqs == 4
    assert len(model.trunk) == 4 and model.trunk[0].out_features == 128


def test_zero_density_model_renders_black_image():
    model = small_model()
    with torch.no_grad():
        model.density.weight.zero_()
        model.density.bias.fill_(-1.0)
    img = render_image(model, CameraPose(pose_from_angles(0, 30, 4), 0.7), 8, 8, n_samples=16, white_bkgd=False)
    assert torch.equal(img, torch.zeros(3, 8, 8))


def test_render_image_deterministic():
    pose = CameraPose(pose_from_angles(10, 30, 4), 0.7)
    a = render_image(small_model(2), pose, 8, 6, n_samples=16)
    b = render_image(small_model(2), pose, 8, 6, n_samples=16)
    assert a.shape == (3, 6, 8)
    assert a.numpy().tobytes() == b.numpy().tobytes()


def test_white_background_fills_empty_space():
    pose = CameraPose(pose_from_angles(0, 30, 4), 0.7)
    img = render_image(ConstantField(0.0), pose, 4, 4, n_samples=8, white_bkgd=True)
    assert torch.equal(img, torch.ones(3, 4, 4))


def test_ray_render_gradient():
    # perturb color and density through the full sample/encode/composite path
    model = copy.deepcopy(small_model(4)).double()
    ray = Ray(torch.tensor([0.0, 0.0, 4.0]).double(), torch.tensor([0.0, 0.0, -1.0]).double(), 2.0, 6.0)
    w = torch.tensor([0.3, -0.7, 1.1], dtype=torch.float64)

    class Scaled(torch.nn.Module):
        def __init__(self, b):
            super().__init__()
            self.b = b

        def forward(self, x, d):
            rgb, sigma = model(x, d)
            return rgb * torch.sigmoid(self.b[:3]), sigma * torch.exp(self.b[3]) + self.b[3] ** 2

    fn = lambda b: (render_ray(Scaled(b), ray, 8) * w).sum()  # noqa: E731
    assert gradient_check(fn, Rng(5).normal((4,)), eps=1e-6) < 1e-3


def test_train_zero_steps_leaves_model():
    model = small_model(1)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    frame = (torch.rand(3, 4, 4), CameraPose(pose_from_angles(0, 30, 4), 0.7))
    assert train_nerf(model, [frame], 0, 8, Rng(0)) == []
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_train_rejects_empty_scene():
    with pytest.raises(ValueError, match="no frames"):
        train_nerf(small_model(), [], 10, 8, Rng(0))


def test_constant_color_scene_trains():
    color = torch.tensor([0.8, 0.3, 0.1]).reshape(3, 1, 1)
    target = color.expand(3, 16, 16).contiguous()
    pose = CameraPose(pose_from_angles(0, 30, 4), 0.7)
    model = small_model(3)
    losses = train_nerf(model, [(target, pose)], 500, 64, Rng(3), lr=5e-3, n_samples=16)
    img = render_image(model, pose, 16, 16, n_samples=16)
    assert psnr(img, target) >= 25.0
    # block means over consecutive 50-step windows never increase
    blocks = np.asarray(losses).reshape(-1, 50).mean(axis=1)
    assert (np.diff(blocks) <= 1e-9).all(), blocks


def test_moving_average():
    assert np.allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert np.allclose(moving_average([1, 2], 5), [1, 2])
