import pytest
import torch

from srprior.fixed_scale import FixedScaleModel
from srprior.flow_core import perturb_
from srprior.latent_module import (BACKBONES, INPUT_MODES, DenseBlock, LatentModule, compute_initial_prior,
                                   make_generator, predict_latent)
from srprior.patch_flow import PatchFlowModel, output_size


@pytest.fixture(scope="module")
def flows():
    torch.manual_seed(0)
    fixed = perturb_(FixedScaleModel(scale=4, levels=2, steps=1, hidden=8, enc_channels=4, enc_layers=1), 0.05)
    patch = perturb_(PatchFlowModel(enc_channels=4, enc_layers=1, n_freq=2, cond_dim=8, steps=1, hidden=8), 0.05)
    return fixed.eval(), patch.eval()


def _small(c, **kw):
    kw = {"feature_dim": 16, "growth": 4, "gen_dim": 8, **kw}
    if kw.get("backbone") == "swin-t":
        kw.setdefault("dim", 12)
        kw.setdefault("blocks", 2)
    return LatentModule(c, **kw)


def _perturbed(c, **kw):
    return perturb_(_small(c, **kw), 0.1, 1)


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("hw", [(8, 8), (7, 5), (1, 3)])
def test_generator_shapes(backbone, hw):
    kw = {"dim": 12, "blocks": 2} if backbone == "swin-t" else {"base": 8}
    g = make_generator(backbone, 6, 5, **kw)
    assert g(torch.rand(2, 6, *hw)).shape == (2, 5, *hw)


def test_unknown_backbone_and_mode():
    with pytest.raises(ValueError):
        LatentModule(27, backbone="resnet")
    with pytest.raises(ValueError):
        LatentModule(27, input_mode="neither")


def test_dense_block_output_width():
    b = DenseBlock(48, 32, growth=16, layers=5)
    assert b(torch.rand(1, 48, 4, 4)).shape == (1, 32, 4, 4)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_fixed_predict_shape_determinism(flows, backbone):
    fixed, _ = flows
    torch.manual_seed(3)
    m = _perturbed(48, backbone=backbone)
    x = torch.rand(2, 3, 4, 4)
    prior = compute_initial_prior(x, 4, fixed, normalize=True)
    with torch.no_grad():
        a = predict_latent(m, fixed, x, prior)
        b = predict_latent(m, fixed, x, prior)
    assert a.shape == (2, 3 * 16 * 16) and torch.equal(a, b)
    assert not torch.equal(a, prior.z0)


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("s", [1.5, 2.0, 3.3])
def test_patch_predict_shape(flows, backbone, s):
    _, patch = flows
    m = _small(27, backbone=backbone, normalize_prior=False)
    x = torch.rand(1, 3, 5, 4)
    prior = compute_initial_prior(x, s, patch)
    out = predict_latent(m, patch, x, prior)
    assert out.shape == (1, *output_size((5, 4), s), 27)
    assert torch.equal(out, prior.z0)  # zero-initialized head


def test_encoders_have_independent_weights():
    m = _small(48)
    a = dict(m.image_encoder.named_parameters())
    b = dict(m.prior_encoder.named_parameters())
    first_a, first_b = next(iter(a.values())), next(iter(b.values()))
    assert first_a.shape[1] == 3 and first_b.shape[1] == 48
    shared = {id(p) for p in m.image_encoder.parameters()} & {id(p) for p in m.prior_encoder.parameters()}
    assert not shared


def test_feature_split_by_mode():
    widths = {}
    for mode in INPUT_MODES:
        m = _small(27, input_mode=mode)
        widths[mode] = tuple(0 if e is None else e.proj.out_channels for e in (m.image_encoder, m.prior_encoder))
    assert widths == {"both": (8, 8), "lr_only": (16, 0), "prior_only": (0, 16)}


def test_normalized_prior_stats(flows):
    fixed, _ = flows
    x = torch.rand(3, 3, 4, 4)
    p = compute_initial_prior(x, 4, fixed, normalize=True)
    flat = p.encoder_input.reshape(3, -1)
    assert torch.allclose(flat.mean(1), torch.zeros(3), atol=1e-5)
    assert torch.allclose(flat.std(1, unbiased=False), torch.ones(3), atol=1e-4)
    raw = compute_initial_prior(x, 4, fixed, normalize=False)
    assert torch.equal(raw.encoder_input, raw.z0_map) and torch.equal(raw.z0_map, p.z0_map)


def test_fixed_prior_requires_native_scale(flows):
    with pytest.raises(ValueError):
        compute_initial_prior(torch.rand(1, 3, 4, 4), 2, flows[0])
    with pytest.raises(TypeError):
        compute_initial_prior(torch.rand(1, 3, 4, 4), 2, object())


def test_mode_errors(flows):
    fixed, patch = flows
    x = torch.rand(1, 3, 4, 4)
    m = _small(48)
    with pytest.raises(ValueError):
        predict_latent(m, fixed, x)
    with pytest.raises(ValueError):
        predict_latent(m, fixed, x, compute_initial_prior(x, 4, fixed), mode="lr_only")
    with pytest.raises(ValueError):
        predict_latent(_small(27), fixed, x, compute_initial_prior(x, 4, fixed))


def test_lr_only_needs_scale_and_ignores_prior(flows):
    _, patch = flows
    m = _perturbed(27, input_mode="lr_only")
    x = torch.rand(1, 3, 4, 4)
    with pytest.raises(ValueError):
        predict_latent(m, patch, x)
    with torch.no_grad():
        out = predict_latent(m, patch, x, s=2.0)
    assert out.shape == (1, 8, 8, 27)
    fresh = _small(27, input_mode="lr_only")
    assert torch.count_nonzero(predict_latent(fresh, patch, x, s=2.0)) == 0


def test_gradients_reach_both_encoders(flows):
    fixed, _ = flows
    m = _perturbed(48)
    x = torch.rand(2, 3, 4, 4)
    out = predict_latent(m, fixed, x, compute_initial_prior(x, 4, fixed, normalize=True))
    out.square().sum().backward()
    for enc in (m.image_encoder, m.prior_encoder):
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in enc.parameters())
