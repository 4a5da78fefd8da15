import itertools
import time

import numpy as np
import pytest
import torch

from nsig.codebook import (
    SignatureCodebook,
    as_bits,
    codebook_init,
    embed,
    format_signature,
    parse_signature,
    signature_representation,
)
from nsig.errors import CompatibilityError, ContractViolation, FormatError
from nsig.field import FieldConfig, RadianceField
from nsig.verify import psnr
from nsig.renderer import render_image
from nsig.field import look_at


def dyadic_codebook(n_bits, shape, seed=0):
    """Entries k / 1024 with small integer k: every sum below is exact in float32."""
    rng = np.random.default_rng(seed)
    return SignatureCodebook(torch.from_numpy(rng.integers(-512, 512, (n_bits, 2, *shape)).astype(np.float32) / 1024))


def test_init_zero_scale_and_determinism():
    z = codebook_init(4, (3, 3, 3, 2), seed=1, scale=0.0)
    assert torch.equal(z.entries, torch.zeros(4, 2, 3, 3, 3, 2))
    a = codebook_init(4, (3, 3, 3, 2), seed=1)
    b = codebook_init(4, (3, 3, 3, 2), seed=1)
    assert torch.equal(a.entries, b.entries)
    assert a.entries.std().item() == pytest.approx(1e-3, rel=0.1)
    with pytest.raises(ContractViolation):
        codebook_init(2, (2,), scale=-1.0)


def test_two_bit_expansion():
    cb = dyadic_codebook(2, (4, 4, 4, 2))
    g = signature_representation(cb, [1, 0])
    assert torch.equal(g, cb.entries[0, 1] + cb.entries[1, 0])


def test_zero_codebook_gives_zero_representation():
    cb = codebook_init(5, (2, 2, 2, 2), scale=0.0)
    for m in itertools.product([0, 1], repeat=5):
        assert torch.equal(signature_representation(cb, m), torch.zeros(2, 2, 2, 2))


@pytest.mark.parametrize("k", range(8))
def test_bit_flip_delta_exact(k):
    cb = dyadic_codebook(8, (4, 4, 4, 2), seed=k)
    m = np.random.default_rng(k).integers(0, 2, 8)
    flipped = m.copy()
    flipped[k] ^= 1
    delta = signature_representation(cb, flipped) - signature_representation(cb, m)
    assert torch.equal(delta, cb.entries[k, 1 - m[k]] - cb.entries[k, m[k]])


def test_additivity_over_disjoint_bits():
    n = 6
    cb = dyadic_codebook(n, (3, 3, 3, 2), seed=2)
    m = np.array([1, 0, 1, 1, 0, 0])
    part_a = sum(cb.entries[i, m[i]] for i in (0, 2, 4))
    part_b = sum(cb.entries[i, m[i]] for i in (1, 3, 5))
    assert torch.equal(signature_representation(cb, m), part_a + part_b)


def test_length_mismatch_rejected():
    cb = codebook_init(4, (2, 2, 2, 2))
    with pytest.raises(ContractViolation):
        signature_representation(cb, [1, 0, 1])
    with pytest.raises(ContractViolation):
        signature_representation(cb, [1, 0, 2, 0])


def test_zero_codebook_embed_is_byte_identical(tiny_field):
    cb = codebook_init(16, tiny_field.theta_e.shape, scale=0.0)
    wm = embed(tiny_field, cb, np.ones(16, dtype=int))
    assert wm.to_bytes() == tiny_field.to_bytes()


def test_embed_structure_preserved_and_reversible():
    f = RadianceField.create(FieldConfig(resolutions=(4, 8), hidden=8), seed=4)
    f.grids = [torch.from_numpy(np.random.default_rng(0).integers(-64, 64, g.shape).astype(np.float32) / 64) for g in f.grids]
    cb = dyadic_codebook(16, f.theta_e.shape, seed=5)
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = rng.integers(0, 2, 16)
        wm = embed(f, cb, m)
        assert wm.header() == f.header()
        assert [n for n, _ in wm.named_arrays()] == [n for n, _ in f.named_arrays()]
        for (name, a), (_, b) in zip(wm.named_arrays(), f.named_arrays()):
            assert a.shape == b.shape
            if name != "grid1":
                assert a.numpy().tobytes() == b.numpy().tobytes()
        assert torch.equal(wm.theta_e - signature_representation(cb, m), f.theta_e)
    assert f.theta_e is not wm.theta_e


def test_all_three_bit_signatures_distinct(tiny_field):
    cb = codebook_init(3, tiny_field.theta_e.shape, seed=9)
    blobs = {embed(tiny_field, cb, m).theta_e.numpy().tobytes() for m in itertools.product([0, 1], repeat=3)}
    assert len(blobs) == 8


def test_shape_mismatch_rejected(tiny_field):
    cb = codebook_init(4, (3, 3, 3, 2))
    with pytest.raises(CompatibilityError):
        embed(tiny_field, cb, [0, 1, 0, 1])


def test_embed_is_fast_at_default_shape():
    f = RadianceField.create()
    cb = codebook_init(16, f.theta_e.shape)
    m = np.ones(16, dtype=int)
    embed(f, cb, m)
    best = min(_timed(lambda: embed(f, cb, m)) for _ in range(5))
    assert best < 0.010


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def test_default_init_is_imperceptible(textured):
    cb = codebook_init(16, textured.theta_e.shape, seed=0)
    wm = embed(textured, cb, np.random.default_rng(0).integers(0, 2, 16))
    pose = look_at([2.0, 0.3, 1.4], H=32, W=32, focal=50.0)
    assert psnr(render_image(wm, pose, 32), render_image(textured, pose, 32)) > 40.0


def test_container_round_trip(tmp_path):
    cb = codebook_init(3, (2, 2, 2, 2), seed=1)
    cb.save(tmp_path / "c.nscb")
    back = SignatureCodebook.load(tmp_path / "c.nscb")
    assert back.to_bytes() == cb.to_bytes()
    with pytest.raises(FormatError):
        SignatureCodebook.from_bytes(b"NSIG" + cb.to_bytes()[4:])


def test_signature_parsing():
    assert format_signature(parse_signature("0xFFFF", 16)) == "1" * 16
    assert format_signature(parse_signature("0x3", 4)) == "0011"
    assert format_signature(parse_signature("0101")) == "0101"
    assert as_bits([0, 1]).dtype == np.int64
    for bad in ("0x1FFFF", "01a1", ""):
        with pytest.raises(ContractViolation):
            parse_signature(bad, 16)
