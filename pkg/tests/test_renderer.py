import math

import numpy as np
import pytest
import torch

from conftest import constant_field
from nsig.caks import SecretKey
from nsig.codebook import codebook_init, embed
from nsig.errors import ContractViolation
from nsig.field import CameraPose, FieldConfig, RadianceField, look_at
from nsig.renderer import (
    composite,
    generate_rays,
    pixel_grid,
    read_ppm,
    render_image,
    render_patch_set,
    render_rays,
    sample_depths,
    to_uint8,
    transmittance,
    write_ppm,
)


def identity_pose(H=32, W=32, focal=40.0):
    return CameraPose(np.eye(3), np.zeros(3), focal, W / 2.0, H / 2.0, H, W)


def test_principal_point_ray_is_optical_axis():
    pose = identity_pose()
    o, d = generate_rays(pose, [[pose.cy, pose.cx]], torch.float64)
    assert torch.allclose(d, torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64))
    assert torch.equal(o, torch.zeros(1, 3, dtype=torch.float64))


def test_adjacent_pixels_separated_by_inverse_focal():
    pose = identity_pose(focal=80.0)
    _, d = generate_rays(pose, [[16.5, 16.5], [16.5, 17.5]], torch.float64)
    angle = torch.arccos((d[0] * d[1]).sum()).item()
    assert angle == pytest.approx(1 / 80.0, rel=1e-3)


def test_all_rays_share_origin_and_are_unit():
    pose = look_at([2.0, 0.5, 1.5], H=16, W=16)
    rows, cols = pixel_grid(16, 16)
    o, d = generate_rays(pose, np.stack([rows + 0.5, cols + 0.5], -1), torch.float64)
    assert torch.equal(o, o[:1].expand_as(o))
    assert torch.allclose(d.norm(dim=-1), torch.ones(256, dtype=torch.float64))


def test_out_of_bounds_coords_rejected():
    with pytest.raises(ContractViolation):
        generate_rays(identity_pose(), [[-1.0, 3.0]])


def test_zero_density_gives_background():
    sigma = torch.zeros(4, 10)
    rgb = torch.rand(4, 10, 3)
    deltas = torch.full((4, 10), 0.1)
    assert torch.equal(composite(sigma, deltas, rgb), torch.ones(4, 3))


def test_opaque_first_sample_gives_its_color():
    sigma = torch.tensor([[1e6, 1.0, 1.0]], dtype=torch.float64)
    rgb = torch.tensor([[[0.2, 0.4, 0.6], [1, 1, 1], [0, 0, 0]]], dtype=torch.float64)
    out = composite(sigma, torch.ones(1, 3, dtype=torch.float64), rgb)
    assert torch.allclose(out, torch.tensor([[0.2, 0.4, 0.6]], dtype=torch.float64))


def test_two_sample_hand_oracle():
    sigma = torch.tensor([[math.log(2.0), math.log(2.0)]], dtype=torch.float64)
    rgb = torch.tensor([[[1.0] * 3, [0.0] * 3]], dtype=torch.float64)
    out = composite(sigma, torch.ones(1, 2, dtype=torch.float64), rgb, background=0.0)
    assert torch.allclose(out, torch.full((1, 3), 0.5, dtype=torch.float64), atol=1e-15)


def test_transmittance_non_increasing():
    sigma = torch.rand(50, 64) * 20
    t = transmittance(sigma, torch.full((50, 64), 0.03))
    assert (t[:, 1:] <= t[:, :-1]).all()
    assert torch.equal(t[:, 0], torch.ones(50))


def test_depths_stratified_and_widths_sum():
    rows, cols = pixel_grid(4, 4)
    t, deltas = sample_depths(1.0, 3.0, rows, cols, 16, jitter_seed=5, dtype=torch.float64)
    step = 2.0 / 16
    k = torch.arange(16, dtype=torch.float64)
    assert ((t >= 1.0 + k * step) & (t <= 1.0 + (k + 1) * step)).all()
    assert torch.allclose(deltas.sum(-1), torch.full((16,), 2.0, dtype=torch.float64))


@pytest.mark.parametrize("sigma_bias", [-1.0, 1.0, 3.0])
def test_homogeneous_medium_matches_closed_form(sigma_bias):
    cfg = FieldConfig(resolutions=(4, 6), hidden=8, t_near=0.1, t_far=0.9)
    f = constant_field(sigma_bias, (0.5, -1.0, 0.2), cfg).to(torch.float64)
    n = 8
    origins = torch.tensor([[0.5, 0.5, 0.0]], dtype=torch.float64).expand(n, 3)
    dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).expand(n, 3)
    rows, cols = np.arange(n), np.zeros(n, dtype=np.int64)
    out = render_rays(f, origins, dirs, rows, cols, n_samples=256, jitter_seed=1)
    sigma = math.log1p(math.exp(sigma_bias))
    c = torch.sigmoid(torch.tensor([0.5, -1.0, 0.2], dtype=torch.float64))
    trans = math.exp(-sigma * 0.8)
    expected = c * (1 - trans) + trans
    assert (out - expected).abs().max().item() <= 1e-3


def test_empty_field_renders_white():
    f = constant_field(-60.0)
    img = render_image(f, look_at([2.0, 0.5, 1.0], H=16, W=16), n_samples=16)
    assert torch.allclose(img, torch.ones(16, 16, 3))


def make_key(pose, centers, h=8, w=8):
    return SecretKey(pose, np.asarray(centers, dtype=np.float64), h, w)


def test_patch_set_equals_crops_of_full_render(textured):
    pose = look_at([2.2, 0.4, 1.3], H=48, W=48, focal=80.0)
    centers = [[4, 4], [20, 28], [44, 12], [28, 36]]
    key = make_key(pose, centers)
    patches = render_patch_set(textured, key, n_samples=32)
    full = render_image(textured, pose, n_samples=32)
    assert patches.shape == (4, 8, 8, 3)
    for p, (r, c) in zip(patches, centers):
        assert torch.equal(p, full[r - 4 : r + 4, c - 4 : c + 4])


def test_patch_set_is_deterministic_and_zero_embed_invariant(textured):
    pose = look_at([2.2, 0.4, 1.3], H=48, W=48, focal=80.0)
    key = make_key(pose, [[4 + 8 * (i % 5), 4 + 8 * (i // 5)] for i in range(16)])
    a = render_patch_set(textured, key, n_samples=16)
    b = render_patch_set(textured, key, n_samples=16)
    assert a.shape == (16, 8, 8, 3)
    assert torch.equal(a, b)
    zero = codebook_init(16, textured.theta_e.shape, scale=0.0)
    c = render_patch_set(embed(textured, zero, np.ones(16, dtype=int)), key, n_samples=16)
    assert torch.equal(a, c)


def test_patch_outside_image_rejected(textured):
    pose = look_at([2.2, 0.4, 1.3], H=48, W=48, focal=80.0)
    key = SecretKey.__new__(SecretKey)
    key.pose, key.centers, key.h, key.w = pose, np.array([[46.0, 4.0]]), 8, 8
    key.created_from = {}
    with pytest.raises(ContractViolation):
        render_patch_set(textured, key)


def test_pixel_to_finest_grid_gradient():
    from nsig.numerics import gradcheck

    f = constant_field(1.0, cfg=FieldConfig(resolutions=(4, 6), hidden=8)).to(torch.float64)
    rng = np.random.default_rng(0)
    f.grids = [torch.from_numpy(rng.normal(0, 0.5, g.shape)) for g in f.grids]
    f.decoder = {k: torch.from_numpy(rng.normal(0, 0.5, v.shape)) for k, v in f.decoder.items()}
    pose = look_at([2.0, 0.6, 1.2], H=8, W=8, focal=12.0)

    def pixel_sum(theta):
        return render_image(f.with_theta_e(theta), pose, n_samples=16).sum()

    theta = f.theta_e.clone()
    picks = np.random.default_rng(1).choice(theta.numel(), 10, replace=False)
    err = gradcheck(pixel_sum, [theta], entries={0: picks.tolist()})
    assert err <= 1e-3


def test_ppm_round_trip(tmp_path):
    img = torch.rand(5, 7, 3)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), to_uint8(img))
    assert to_uint8(np.array([0.5 / 255, 1.5 / 255, 2.0])).tolist() == [1, 2, 255]
