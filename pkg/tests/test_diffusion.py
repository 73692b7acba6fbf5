import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from talkdiff.diffusion import (
    ddim_step,
    forward_noise,
    forward_noise_batch,
    make_linear_schedule,
    sample,
    x0_loss,
)

# cumulative products of (1 - beta) computed at 40 digits with mpmath, frozen
ALPHA_BAR_ORACLE = {
    1: 0.9985,
    2: 0.99698425900900900901,
    10: 0.98430119476834023865,
    500: 0.049366576962223775827,
    1000: 0.000025692025264026523078,
}
SIGMA_1000_980_ETA1 = 0.56849267693703759451


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000, 0.0015, 0.0195)


def test_schedule_endpoints(sched):
    assert sched.betas[0] == 0.0015
    assert sched.betas[-1] == 0.0195
    assert len(sched.betas) == 1000


def test_alpha_bar_matches_high_precision_oracle(sched):
    for t, v in ALPHA_BAR_ORACLE.items():
        assert sched.alpha_bar(t) == pytest.approx(v, rel=1e-12)
    assert sched.alpha_bar(0) == 1.0


def test_alphas_cum_strictly_decreasing(sched):
    assert np.all(np.diff(sched.alphas_cum) < 0)
    assert not sched.alphas_cum.flags.writeable


@pytest.mark.parametrize(
    "kwargs",
    [dict(T=0), dict(T=10, beta_start=0.0), dict(T=10, beta_end=1.0), dict(T=10, beta_start=0.1, beta_end=0.01), dict(T=10, eta=1.5), dict(T=2.5)],
)
def test_schedule_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        make_linear_schedule(**kwargs)


def test_sigma_oracle():
    s = make_linear_schedule(eta=1.0)
    assert s.sigma(1000, 980) == pytest.approx(SIGMA_1000_980_ETA1, rel=1e-10)
    assert s.sigma(20, 0) == 0.0
    assert make_linear_schedule().sigma(1000, 980) == 0.0


def test_timesteps(sched):
    ts = sched.timesteps(50)
    assert ts[0] == 1000 and ts[-1] == 20 and len(ts) == 50
    assert all(a - b == 20 for a, b in zip(ts, ts[1:]))
    assert sched.timesteps(1000) == list(range(1000, 0, -1))
    with pytest.raises(ValueError):
        sched.timesteps(0)
    with pytest.raises(ValueError):
        sched.timesteps(1001)


def test_forward_noise_formula(sched):
    rng = np.random.default_rng(0)
    z0, eps = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a = ALPHA_BAR_ORACLE[500]
    np.testing.assert_allclose(forward_noise(z0, 500, eps, sched), math.sqrt(a) * z0 + math.sqrt(1 - a) * eps, rtol=1e-12)
    with pytest.raises(ValueError):
        forward_noise(z0, 0, eps, sched)
    with pytest.raises(ValueError):
        forward_noise(z0, 10, eps[:2], sched)


def test_forward_noise_batch_matches_scalar(sched):
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(3, 5, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 5, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 500, 1000])
    out = forward_noise_batch(z0, t, eps, sched)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(out[i], forward_noise(z0[i], ti, eps[i], sched))
    with pytest.raises(ValueError):
        forward_noise_batch(z0, torch.tensor([0, 1, 2]), eps, sched)


def test_x0_loss():
    a = np.ones((2, 3))
    assert x0_loss(a, a) == 0.0
    assert x0_loss(a, a + 0.5) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        x0_loss(a, np.ones(3))


def test_ddim_step_algebraic_oracle():
    s = make_linear_schedule(eta=0.5)
    rng = np.random.default_rng(1)
    zt, p, e = rng.normal(size=(3, 6))
    t, tp = 800, 780
    a, ap = s.alpha_bar(t), s.alpha_bar(tp)
    sig = 0.5 * math.sqrt((1 - ap) / (1 - a) * (1 - a / ap))
    eps_hat = (zt - math.sqrt(a) * p) / math.sqrt(1 - a)
    want = math.sqrt(ap) * p + math.sqrt(1 - ap - sig**2) * eps_hat + sig * e
    np.testing.assert_allclose(ddim_step(zt, p, t, tp, s, eps=e), want, rtol=1e-12, atol=1e-14)


def test_ddim_step_final_step_returns_prediction(sched):
    rng = np.random.default_rng(2)
    zt, p = rng.normal(size=(2, 5))
    np.testing.assert_allclose(ddim_step(zt, p, 20, 0, sched), p, rtol=0, atol=1e-15)


def test_ddim_step_errors(sched):
    z = np.zeros(3)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 10, sched)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, -1, sched)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 5, sched, sigma=2.0)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 5, make_linear_schedule(eta=1.0))  # eps missing


@settings(max_examples=20, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    seed=st.integers(0, 2**31 - 1),
    n_steps=st.sampled_from([1, 10, 50, 100]),
)
def test_oracle_denoiser_round_trip(shape, seed, n_steps, sched):
    z0 = torch.randn(tuple(shape), generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    out, calls = sample(lambda z, t, ctx: z0.clone(), shape, sched, n_steps, seed)
    assert calls == n_steps
    assert torch.max(torch.abs(out - z0)) < 1e-5


def test_sample_deterministic_and_stochastic(sched):
    den = lambda z, t, ctx: 0.5 * z
    a, _ = sample(den, (4,), sched, 10, 3)
    b, _ = sample(den, (4,), sched, 10, 3)
    c, _ = sample(den, (4,), sched, 10, 4)
    assert torch.equal(a, b) and not torch.equal(a, c)
    s1 = make_linear_schedule(eta=1.0)
    x, _ = sample(den, (4,), s1, 10, 3)
    y, _ = sample(den, (4,), s1, 10, 3)
    assert torch.equal(x, y)


def test_sample_passes_context_and_rejects_bad_shape(sched):
    seen = []

    def den(z, t, ctx):
        seen.append((t, ctx))
        return z

    sample(den, (2,), sched, 5, 0, context="c")
    assert [t for t, _ in seen] == [1000, 800, 600, 400, 200]
    assert all(c == "c" for _, c in seen)
    with pytest.raises(RuntimeError):
        sample(lambda z, t, c: z[:1], (2,), sched, 5, 0)
