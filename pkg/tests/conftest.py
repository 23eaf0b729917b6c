import numpy as np
import pytest
import torch

from srprior.data import make_toy_images, resample, to_tensor
from srprior.training import TrainConfig, train_flow

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixed_train_images():
    return make_toy_images(64, 40, seed=1)


@pytest.fixture(scope="session")
def patch_train_images():
    return make_toy_images(64, 64, seed=1)


@pytest.fixture(scope="session")
def fixed_run(fixed_train_images):
    cfg = TrainConfig(phase="flow", model="fixed", epochs=50, batch_size=8, lr0=1e-3, seed=0)
    return train_flow(cfg, fixed_train_images)


@pytest.fixture(scope="session")
def fixed_flow(fixed_run):
    return fixed_run.model


@pytest.fixture(scope="session")
def patch_run(patch_train_images):
    cfg = TrainConfig(phase="flow", model="patch", epochs=1, steps_per_epoch=400, batch_size=8,
                      lr0=5e-4, lr_crop=16, seed=0)
    return train_flow(cfg, patch_train_images)


@pytest.fixture(scope="session")
def patch_flow(patch_run):
    return patch_run.model


@pytest.fixture(scope="session")
def fixed_heldout():
    """50 held-out 32x32 HR toy images and their 8x8 LR inputs."""
    imgs = make_toy_images(50, 32, seed=123)
    return to_tensor([resample(i, (8, 8)) for i in imgs]), to_tensor(imgs)


@pytest.fixture(scope="session")
def patch_heldout():
    """25 held-out 48x48 HR toy images and their 12x12 LR inputs (s = 4)."""
    imgs = make_toy_images(25, 48, seed=99)
    return to_tensor([resample(i, (12, 12)) for i in imgs]), to_tensor(imgs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def patch_lp_ablation(patch_flow, patch_train_images):
    """Latent modules trained with perceptual-only and latent-only losses."""
    from srprior.training import train_lp

    runs = {}
    for name, kw in (("percep", dict(lam=0.0, use_latent=False)),
                     ("latent", dict(lam=1.0, use_percep=False))):
        cfg = TrainConfig(phase="lp", model="patch", epochs=1, steps_per_epoch=300, batch_size=4,
                          lr0=3e-4, lr_crop=8, seed=0, **kw)
        runs[name] = train_lp(cfg, patch_train_images, patch_flow)
    return runs
