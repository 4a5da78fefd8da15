import math

import numpy as np
import pytest
import torch

from nsig.errors import ContractViolation, FormatError
from nsig.field import CameraPose, FieldConfig, PoseDistribution, RadianceField, field_query, look_at, split_params
from nsig.rng import make_rng
from nsig.scene import PretrainConfig, make_scene, pretrain


def test_zero_parameters_give_fixed_density_and_gray():
    f = RadianceField.zeros(FieldConfig(resolutions=(4, 6), hidden=8))
    x = torch.rand(10, 3)
    d = torch.nn.functional.normalize(torch.randn(10, 3), dim=-1)
    sigma, rgb = field_query(f, x, d)
    assert torch.allclose(sigma, torch.full((10,), math.log(2.0)))
    assert torch.equal(rgb, torch.full((10, 3), 0.5))


def test_density_is_view_independent(tiny_field):
    x = torch.rand(20, 3)
    d1 = torch.nn.functional.normalize(torch.randn(20, 3), dim=-1)
    d2 = torch.nn.functional.normalize(torch.randn(20, 3), dim=-1)
    s1, c1 = field_query(tiny_field, x, d1)
    s2, c2 = field_query(tiny_field, x, d2)
    assert torch.equal(s1, s2)
    assert not torch.equal(c1, c2)


def test_outputs_in_valid_ranges(tiny_field):
    x = torch.rand(200, 3)
    d = torch.nn.functional.normalize(torch.randn(200, 3), dim=-1)
    sigma, rgb = tiny_field.query(x, d)
    assert (sigma >= 0).all()
    assert ((rgb >= 0) & (rgb <= 1)).all()


def test_vertex_query_returns_stored_feature(tiny_field):
    r = tiny_field.resolutions[-1]
    rng = np.random.default_rng(0)
    for _ in range(10):
        i, j, k = rng.integers(0, r, 3)
        x = torch.tensor([[i, j, k]], dtype=torch.float32) / (r - 1)
        feats = tiny_field.features(x)
        assert torch.equal(feats[0, -tiny_field.n_features:], tiny_field.theta_e[i, j, k])


def test_outside_points_are_vacuum(tiny_field):
    x = torch.tensor([[1.5, 0.5, 0.5], [-0.1, 0.2, 0.3]])
    d = torch.tensor([[0.0, 0.0, 1.0]] * 2)
    sigma, rgb = field_query(tiny_field, x, d)
    assert torch.equal(sigma, torch.zeros(2))
    assert torch.equal(rgb, torch.ones(2, 3))


def test_non_unit_direction_rejected(tiny_field):
    with pytest.raises(ContractViolation):
        field_query(tiny_field, torch.rand(1, 3), torch.tensor([[0.0, 0.0, 2.0]]))


def test_default_theta_e_size():
    f = RadianceField.create()
    theta_e, theta_u = split_params(f)
    assert theta_e.numel() == 32**3 * 2 == 65536
    assert tuple(theta_e.shape) == (32, 32, 32, 2)
    assert set(theta_u) == {"grid0", "w1", "b1", "w_sigma", "b_sigma", "w2", "b2", "w_rgb", "b_rgb"}


def test_split_and_reassemble_is_bit_identical(tiny_field):
    theta_e, theta_u = tiny_field.split_params()
    back = RadianceField.from_split(theta_e, theta_u, tiny_field.t_near, tiny_field.t_far)
    assert back.to_bytes() == tiny_field.to_bytes()


def test_mutating_theta_u_leaves_theta_e_bytes():
    f = RadianceField.create(FieldConfig(resolutions=(4, 6), hidden=8), seed=1)
    theta_e, theta_u = f.split_params()
    before = theta_e.numpy().tobytes()
    for t in theta_u.values():
        t.add_(1.0)
    assert f.theta_e.numpy().tobytes() == before


def test_container_round_trip_and_errors(tmp_path, tiny_field):
    path = tmp_path / "m.nsig"
    tiny_field.save(path)
    again = RadianceField.load(path)
    assert again.to_bytes() == tiny_field.to_bytes()
    data = path.read_bytes()
    with pytest.raises(FormatError):
        RadianceField.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        RadianceField.from_bytes(data[: len(data) // 2])


def test_pose_invariants():
    with pytest.raises(ContractViolation):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), 100.0, 16, 16, 32, 32)
    with pytest.raises(ContractViolation):
        CameraPose(np.eye(3) * 2, np.zeros(3), 100.0, 16, 16, 32, 32)
    p = PoseDistribution().sample(make_rng(0, 1))
    assert np.allclose(p.R.T @ p.R, np.eye(3), atol=1e-5)
    assert np.linalg.det(p.R) == pytest.approx(1.0)
    assert CameraPose.from_dict(p.to_dict()).to_dict() == p.to_dict()


def test_pose_distribution_stays_on_hemisphere_band():
    dist = PoseDistribution()
    rng = make_rng(3, 1)
    for _ in range(50):
        p = dist.sample(rng)
        off = p.t - 0.5
        assert np.linalg.norm(off) == pytest.approx(2.0)
        el = math.degrees(math.asin(off[2] / 2.0))
        assert 10.0 - 1e-9 <= el <= 70.0 + 1e-9
        # optical axis (-z of the camera) points at the cube center
        assert np.allclose(-p.R[:, 2], -off / 2.0)


def test_look_at_degenerate_up():
    p = look_at([0.5, 0.5, 3.0])
    assert np.allclose(-p.R[:, 2], [0.0, 0.0, -1.0])


SMALL_POSES = PoseDistribution(focal=50.0, H=32, W=32)


@pytest.fixture(scope="module")
def small_scene():
    return make_scene(seed=0, n_train=3, n_test=2, poses=SMALL_POSES)


def test_scene_is_deterministic(small_scene):
    again = make_scene(seed=0, n_train=3, n_test=2, poses=SMALL_POSES)
    assert small_scene.train_images.numpy().tobytes() == again.train_images.numpy().tobytes()
    other = make_scene(seed=1, n_train=3, n_test=2, poses=SMALL_POSES)
    assert not torch.equal(small_scene.train_images, other.train_images)


def test_scene_background_white_and_object_visible(small_scene):
    for img in torch.cat([small_scene.train_images, small_scene.test_images]):
        white = (img == 1.0).all(-1)
        assert white.any()
        assert (~white).float().mean() >= 0.05
        assert img.min() >= 0 and img.max() <= 1


def test_pretrain_zero_steps_leaves_field(small_scene):
    f = RadianceField.create(FieldConfig(resolutions=(4, 8), hidden=8), seed=0)
    before = f.to_bytes()
    out, _, losses = pretrain(f, small_scene, PretrainConfig(steps=0))
    assert out.to_bytes() == before
    assert losses == []


def test_pretrain_reduces_loss(small_scene):
    f = RadianceField.create(FieldConfig(resolutions=(4, 8), hidden=8), seed=0)
    _, _, losses = pretrain(f, small_scene, PretrainConfig(steps=60, batch_rays=256, n_samples=16, log_every=0))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_pretrain_divergence_reports_step(small_scene):
    from nsig.errors import NumericFailure

    f = RadianceField.create(FieldConfig(resolutions=(4, 8), hidden=8), seed=0)
    f.decoder["b_rgb"] = torch.full((3,), float("nan"))
    with pytest.raises(NumericFailure) as info:
        pretrain(f, small_scene, PretrainConfig(steps=5, batch_rays=64, n_samples=8))
    assert info.value.step == 0
