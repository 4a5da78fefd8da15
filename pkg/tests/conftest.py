import numpy as np
import pytest
import torch

from nsig.field import FieldConfig, RadianceField

torch.set_num_threads(1)


def constant_field(sigma_bias=3.0, rgb_bias=(0.5, -1.0, 0.2), cfg=None, seed=0):
    """A field with density softplus(sigma_bias) and one color everywhere in the cube."""
    f = RadianceField.create(cfg or FieldConfig(resolutions=(4, 6), hidden=8), seed)
    grids = [torch.zeros_like(g) for g in f.grids]
    dec = {k: torch.zeros_like(v) for k, v in f.decoder.items()}
    dec["b_sigma"] = torch.full_like(dec["b_sigma"], sigma_bias)
    dec["b_rgb"] = torch.tensor(rgb_bias, dtype=dec["b_rgb"].dtype)
    return RadianceField(grids, dec, f.t_near, f.t_far)


def textured_field(seed=0, cfg=None):
    """Opaque cube whose color varies with the grids, so renders have structure."""
    cfg = cfg or FieldConfig(resolutions=(4, 8), hidden=8)
    f = RadianceField.create(cfg, seed)
    rng = np.random.default_rng(seed)
    grids = [torch.from_numpy(rng.normal(0, 1.0, g.shape).astype(np.float32)) for g in f.grids]
    dec = dict(f.decoder)
    dec["b_sigma"] = torch.full_like(dec["b_sigma"], 4.0)
    dec["w_rgb"] = dec["w_rgb"] * 10.0
    dec["b_rgb"] = torch.full_like(dec["b_rgb"], -0.8)
    return RadianceField(grids, dec, f.t_near, f.t_far)


@pytest.fixture
def tiny_field():
    return RadianceField.create(FieldConfig(resolutions=(4, 6), hidden=8), seed=3)


@pytest.fixture(scope="session")
def textured():
    return textured_field()


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if not hasattr(rep, "when") or "test_acceptance" not in rep.nodeid:
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "acceptance" in props and rep.when == "call":
                lines.append((rep.nodeid, props["acceptance"]))
            elif rep.failed and rep.when in ("setup", "call"):
                lines.append((rep.nodeid, f"{rep.nodeid.split('::')[-1]} FAIL: error before a result was recorded"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
