import torch

from aliaug.features import FeaturePyramid, unit_normalize


def test_pyramid_is_frozen_and_seeded():
    a, b = FeaturePyramid(seed=3), FeaturePyramid(seed=3)
    assert all(not p.requires_grad for p in a.parameters())
    assert all(torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.levels[0].weight, FeaturePyramid(seed=4).levels[0].weight)


def test_pyramid_stays_in_eval():
    pyramid = FeaturePyramid()
    pyramid.train()
    assert not pyramid.training


def test_pyramid_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    FeaturePyramid()
    assert torch.equal(torch.rand(1), expected)


def test_pooled_dims():
    pyramid = FeaturePyramid()
    image = torch.rand(2, 3, 32, 32)
    assert pyramid.pooled(image).shape == (2, pyramid.dim)
    assert [f.shape[-1] for f in pyramid(image)] == [16, 8, 4]
    assert pyramid.masked_pooled(image, torch.ones(2, 1, 32, 32)).shape == (2, 64)


def test_unit_normalize():
    features = torch.randn(1, 8, 4, 4)
    norms = unit_normalize(features).pow(2).sum(dim=1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)
