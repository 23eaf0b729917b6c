import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from srprior.flow_core import (LOG_2PI, ActNorm, AffineCoupling, ConditionalFlow, ConditioningContext,
                               FlowError, NonFiniteForward, NonFiniteInverse, Permutation,
                               build_vector_flow, data_dependent_init, flow_forward, flow_inverse,
                               log_prob, perturb_, standard_normal_logp)


def _flow(dim=6, cond=0, steps=3, seed=0, noise=0.3):
    return perturb_(build_vector_flow(dim, steps, cond_dim=cond, hidden=16, seed=seed), noise, seed)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 500), n=st.integers(1, 8), scale=st.floats(0.1, 3.0))
def test_roundtrip_vector(seed, n, scale):
    f = _flow(seed=seed, cond=2).double()
    g = torch.Generator().manual_seed(seed)
    y = torch.randn(n, 6, generator=g, dtype=torch.float64) * scale
    c = torch.randn(n, 2, generator=g, dtype=torch.float64)
    z, _ = f(y, c)
    assert torch.allclose(f.inverse(z, c), y, atol=1e-9)
    assert torch.allclose(f(f.inverse(z, c), c)[0], z, atol=1e-9)


def test_roundtrip_spatial():
    torch.manual_seed(0)
    layers = [ActNorm(4), Permutation(4, 3), AffineCoupling(4, 5, 8, spatial=True)]
    f = perturb_(ConditionalFlow(layers), 0.2).double()
    y = torch.randn(2, 4, 5, 7, dtype=torch.float64)
    c = torch.randn(2, 5, 5, 7, dtype=torch.float64)
    z, _ = f(y, c)
    assert torch.allclose(f.inverse(z, c), y, atol=1e-10)


def test_logdet_is_sum_of_layers():
    f = _flow().double()
    y = torch.randn(5, 6, dtype=torch.float64)
    _, total, parts = f(y, per_layer=True)
    assert len(parts) == len(f)
    assert torch.allclose(total, torch.stack(parts).sum(0))
    # composition of two halves adds log-determinants
    a, b = ConditionalFlow(list(f.layers)[:4]), ConditionalFlow(list(f.layers)[4:])
    h, la = a(y)
    _, lb = b(h)
    assert torch.allclose(la + lb, total)


def test_logdet_dtype_float64():
    f = _flow()
    _, ld = f(torch.randn(3, 6))
    assert ld.dtype == torch.float64


def test_identity_at_init():
    f = build_vector_flow(5, 4, cond_dim=3)
    y, c = torch.randn(7, 5), torch.randn(7, 3)
    z, ld = f(y, c)
    perm = y
    for m in f.layers:
        if isinstance(m, Permutation):
            perm = perm[:, m.perm]
    assert torch.equal(z, perm) and torch.equal(ld, torch.zeros(7, dtype=torch.float64))


def test_log_prob_at_origin():
    f = build_vector_flow(12, 2)
    lp = log_prob(f, torch.zeros(1, 12))
    assert lp.item() == pytest.approx(-6 * LOG_2PI, abs=1e-12)
    assert standard_normal_logp(torch.zeros(2, 3, 4)).tolist() == pytest.approx([-6 * math.log(2 * math.pi)] * 2)


def test_scale_is_bounded():
    f = build_vector_flow(4, 1)
    perturb_(f, 50.0)
    _, ld = f(torch.randn(64, 4) * 10)
    # each coupling transforms half the dims with |log s| <= 2
    assert ld.abs().max() <= 2.0 * 2 + f.layers[0].logs.abs().sum().item() + 1e-9


def test_actnorm_data_init():
    f = build_vector_flow(3, 2)
    y = torch.randn(256, 3) * torch.tensor([2.0, 0.5, 5.0]) + torch.tensor([1.0, -3.0, 0.0])
    data_dependent_init(f, lambda: f(y))
    an = f.layers[0]
    out = (y + an.bias) * an.logs.exp()
    assert torch.allclose(out.mean(0), torch.zeros(3), atol=1e-5)
    assert torch.allclose(out.std(0, unbiased=False), torch.ones(3), atol=1e-4)
    assert bool(an.initialized)
    before = an.bias.clone()
    f(y * 3)
    assert torch.equal(an.bias, before)


def test_permutation_seeded_and_inverse():
    p, q = Permutation(10, 4), Permutation(10, 4)
    assert torch.equal(p.perm, q.perm) and not torch.equal(p.perm, Permutation(10, 5).perm)
    u = torch.randn(2, 10)
    assert torch.equal(p.inverse(p(u)[0]), u)


def test_nonfinite_forward_reports_input():
    f = _flow()
    y = torch.randn(2, 6)
    y[1, 0] = float("nan")
    with pytest.raises(NonFiniteForward) as e:
        f(y)
    assert e.value.layer_index == 0


def test_nonfinite_inverse_layer_and_trace():
    f = _flow(steps=2)
    z = torch.randn(3, 6)
    z[2] *= 1e30
    tr = f.inverse_trace(z, max_abs=6.5e4)
    assert tr.first_bad_layer[:2] == [None, None]
    assert tr.first_bad_layer[2] is not None and tr.kind[2] in ("inf", "saturated")
    assert tr.any_bad
    with pytest.raises(NonFiniteInverse) as e:
        f.inverse(z, max_abs=6.5e4)
    assert e.value.layer_index == tr.first_bad_layer[2]


def test_context_must_be_finite():
    f = _flow(cond=2)
    ctx = ConditioningContext(torch.tensor([[float("inf"), 0.0]]))
    with pytest.raises(FlowError):
        flow_forward(f, torch.zeros(1, 6), ctx)
    ok = ConditioningContext(torch.zeros(1, 2))
    z, _ = flow_forward(f, torch.ones(1, 6), ok)
    assert torch.allclose(flow_inverse(f, z, ok), torch.ones(1, 6), atol=1e-5)


def test_trained_flow_prefers_matching_data():
    torch.manual_seed(0)
    f = build_vector_flow(2, 4, hidden=32)
    data = torch.randn(2048, 1) * torch.tensor([[1.0, 1.0]]) + 0.1 * torch.randn(2048, 2)
    data_dependent_init(f, lambda: f(data[:512]))
    opt = torch.optim.Adam(f.parameters(), 3e-3)
    for _ in range(300):
        idx = torch.randint(0, len(data), (128,))
        loss = -log_prob(f, data[idx]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    test = torch.randn(500, 1).repeat(1, 2) + 0.1 * torch.randn(500, 2)
    shuffled = torch.stack([test[:, 0], test[torch.randperm(500), 1]], 1)
    with torch.no_grad():
        assert log_prob(f, test).mean() > log_prob(f, shuffled).mean() + 1.0
