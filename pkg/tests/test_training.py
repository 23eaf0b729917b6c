import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from srprior.checkpoint import load_model, save_checkpoint, state_checksum
from srprior.config import ConfigError, parse_config
from srprior.data import make_toy_images
from srprior.training import (FrozenFlowViolation, TrainConfig, build_flow, train_flow, train_lp,
                              write_curve)

SMALL_FIXED = {"levels": 2, "steps": 1, "hidden": 8, "enc_channels": 8, "enc_layers": 1}
SMALL_PATCH = {"enc_channels": 8, "enc_layers": 1, "n_freq": 2, "cond_dim": 8, "steps": 1, "hidden": 16, "depth": 1}


@pytest.fixture(scope="module")
def images():
    return make_toy_images(4, 40, seed=2)


@pytest.fixture(scope="module")
def small_fixed(images):
    cfg = TrainConfig(phase="flow", model="fixed", epochs=2, batch_size=2, flow=SMALL_FIXED)
    return train_flow(cfg, images).model


def _lp_cfg(**kw):
    base = dict(phase="lp", model="fixed", epochs=1, steps_per_epoch=3, batch_size=2, lam=0.1,
                feature_dim=8, gen_dim=8)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule_examples():
    cfg = TrainConfig.published_defaults("lp-patch")
    assert (cfg.epochs, cfg.batch_size, cfg.lr0) == (1000, 16, 1e-4)
    assert cfg.lr_at(0) == 1e-4 and cfg.lr_at(199) == 1e-4 and cfg.lr_at(200) == 5e-5
    assert cfg.lr_at(800) == pytest.approx(6.25e-6, rel=1e-12)
    fixed = TrainConfig.published_defaults("lp-fixed")
    assert (fixed.epochs, fixed.batch_size, fixed.hr_crop) == (5, 12, 160)
    assert [fixed.lr_at(e) for e in range(5)] == [1e-4, 5e-5, 2.5e-5, 1.25e-5, 6.25e-6]
    with pytest.raises(ValueError):
        TrainConfig.published_defaults("srflow")


@settings(max_examples=40, deadline=None)
@given(halvings=st.lists(st.integers(1, 300), unique=True, max_size=6), lr0=st.floats(1e-6, 1.0))
def test_schedule_monotone(halvings, lr0):
    cfg = TrainConfig(lr0=lr0, lr_halving_epochs=sorted(halvings))
    lrs = [cfg.lr_at(e) for e in range(302)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for e in range(1, 302):
        assert lrs[e] == pytest.approx(lrs[e - 1] / (2 if e in halvings else 1), rel=1e-12)


def test_config_validation():
    for bad in (dict(phase="gan"), dict(model="swin"), dict(lr0=0), dict(epochs=0),
                dict(lr_halving_epochs=[3, 2]), dict(lam=-1), dict(s_min=0.5)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_config_from_flat_file():
    text = """
    # latent-module run
    phase = lp
    model = patch
    train.epochs = 3
    train.lr_halving_epochs = [1, 2]
    loss.lambda = 0.1
    loss.use_percep = false
    latent.backbone = swin-t
    flow.steps = 2
    """
    cfg = TrainConfig.from_dict(parse_config(text))
    assert (cfg.phase, cfg.model, cfg.epochs, cfg.lam) == ("lp", "patch", 3, 0.1)
    assert cfg.lr_halving_epochs == [1, 2] and cfg.use_percep is False and cfg.backbone == "swin-t"
    assert cfg.flow == {"steps": 2}
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"train.epochz": 3})


def test_flow_smoke_and_checkpoint(tmp_path, images):
    cfg = TrainConfig(phase="flow", model="fixed", epochs=1, batch_size=4, flow=SMALL_FIXED)
    res = train_flow(cfg, images)
    assert res.steps == 1 and len(res.curve) == 1 and math.isfinite(res.curve[0]["loss"])
    save_checkpoint(tmp_path / "f.ckpt", res.model)
    back = load_model(tmp_path / "f.ckpt", expect="flow")
    assert state_checksum(back) == state_checksum(res.model)
    write_curve(tmp_path / "c.csv", res.curve)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "epoch,loss,lr,skipped_steps"


def test_patch_flow_smoke(images):
    cfg = TrainConfig(phase="flow", model="patch", epochs=1, steps_per_epoch=2, batch_size=2, lr_crop=8,
                      positions=32, flow=SMALL_PATCH)
    res = train_flow(cfg, images)
    assert res.steps == 2 and math.isfinite(res.final_loss)


def test_flow_training_deterministic(images):
    cfg = TrainConfig(phase="flow", model="fixed", epochs=2, batch_size=2, flow=SMALL_FIXED)
    a, b = train_flow(cfg, images), train_flow(cfg, images)
    assert a.final_loss == b.final_loss and state_checksum(a.model) == state_checksum(b.model)


@pytest.mark.slow
def test_toy_nll_drops(fixed_run):
    drop = fixed_run.initial_loss - fixed_run.final_loss
    assert drop >= 0.2 * abs(fixed_run.initial_loss)


def test_wrong_phase_rejected(images, small_fixed):
    with pytest.raises(ConfigError):
        train_flow(_lp_cfg(), images)
    with pytest.raises(ConfigError):
        train_lp(TrainConfig(phase="flow"), images, small_fixed)
    with pytest.raises(ConfigError):
        train_lp(_lp_cfg(model="patch"), images, small_fixed)


def test_lp_smoke_keeps_flow_frozen(tmp_path, images, small_fixed):
    res = train_lp(_lp_cfg(), images, small_fixed)
    assert res.flow_checksum_before == res.flow_checksum_after == state_checksum(small_fixed)
    assert res.steps == 3 and res.skipped == 0
    save_checkpoint(tmp_path / "lp.ckpt", res.model)
    assert load_model(tmp_path / "lp.ckpt", expect="latent").config == res.model.config


def test_lp_deterministic(images, small_fixed):
    a = train_lp(_lp_cfg(), images, small_fixed)
    b = train_lp(_lp_cfg(), images, small_fixed)
    assert state_checksum(a.model) == state_checksum(b.model)


def test_injected_nan_is_skipped(images, small_fixed):
    def hook(step, y_hat):
        return torch.full_like(y_hat, float("nan")) if step == 1 else y_hat

    cfg = _lp_cfg(steps_per_epoch=1)
    reference = train_lp(cfg, images, small_fixed).model
    params = {}

    def spy(step, y_hat):
        params[step] = state_checksum(module)
        return hook(step, y_hat)

    from srprior.training import build_latent_module

    module = build_latent_module(cfg, small_fixed)
    res = train_lp(_lp_cfg(steps_per_epoch=2), images, small_fixed, module=module, decode_hook=spy)
    final = state_checksum(res.model)
    assert res.skipped == 1 and res.curve[0]["skipped_steps"] == 1
    assert params[1] == final  # the poisoned step left the parameters alone
    assert state_checksum(reference) == params[1]  # and step 0 alone matches a one-step run


def test_nan_without_skip_raises(images, small_fixed):
    with pytest.raises(FloatingPointError):
        train_lp(_lp_cfg(skip_on_explosion=False), images, small_fixed,
                 decode_hook=lambda step, y: y * float("nan"))


def test_flow_mutation_is_fatal(images):
    flow = build_flow(TrainConfig(phase="flow", flow=SMALL_FIXED))

    def mutate(step, y_hat):
        with torch.no_grad():
            next(flow.parameters()).add_(1.0)
        return y_hat

    with pytest.raises(FrozenFlowViolation):
        train_lp(_lp_cfg(steps_per_epoch=1), images, flow, decode_hook=mutate)


def test_patch_lp_smoke(images):
    flow = build_flow(TrainConfig(phase="flow", model="patch", flow=SMALL_PATCH))
    cfg = _lp_cfg(model="patch", lam=0.0, lr_crop=6, steps_per_epoch=2)
    res = train_lp(cfg, images, flow)
    assert res.steps == 2 and res.skipped == 0 and not res.model.normalize_prior
