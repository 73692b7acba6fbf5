import numpy as np
import pytest
import torch

from gradcheck import sampled_gradcheck
from talkdiff.codec import TriPlaneLatent
from talkdiff.mtov import ConditionSet, MotionToVideo

EXT = (2, 4, 4, 4)


def latent(batch=2, c=2, h=4, w=4, s=4, seed=0):
    g = np.random.default_rng(seed)
    return TriPlaneLatent(g.standard_normal((batch, c, h, w)), g.standard_normal((batch, c, h, s)), g.standard_normal((batch, c, w, s)))


def conditions(batch=2, seed=1, **kw):
    return ConditionSet(latent(batch, seed=seed, **kw), latent(batch, seed=seed + 1, **kw), latent(batch, seed=seed + 2, **kw))


def tiny(**kw):
    params = dict(base_channels=8, channel_mult=(1, 2), attn_levels=(1,), n_heads=2, max_steps=0, log_every=0)
    params.update(kw)
    return MotionToVideo(**params)


def test_condition_set_validation():
    cond = conditions()
    assert cond.channels == 6 and cond.batch == 2
    assert cond.stacked().extents == (6, 4, 4, 4)
    with pytest.raises(ValueError):
        ConditionSet(latent(), latent(h=8), latent())
    with pytest.raises(ValueError):
        ConditionSet(latent(batch=1), latent(), latent())
    back = ConditionSet.from_arrays(cond.to_arrays())
    np.testing.assert_array_equal(back.Z_I.ws, cond.Z_I.ws)


def test_output_shapes_and_call_count():
    m = tiny(max_steps=2).fit(latent(), conditions())
    z, calls = m.sample(conditions(), n_steps=7)
    assert z.extents == EXT and z.batch == 2 and calls == 7
    d = m.denoise(latent(), 500, conditions())
    assert d.extents == EXT


def test_landmark_condition_is_used():
    m = tiny(max_steps=2).fit(latent(), conditions())
    cond = conditions()
    zeroed = ConditionSet(TriPlaneLatent(*(np.zeros_like(p) for p in cond.Z_L.planes())), cond.Z_P, cond.Z_I)
    with torch.no_grad():
        a = m.denoise(latent(), 300, cond).flatten()
        b = m.denoise(latent(), 300, zeroed).flatten()
    assert float((a - b).abs().max()) > 1e-6


def test_gradient_check_float64():
    m = tiny(dtype="float64").initialize(EXT, 6)
    net = m.net_
    z = latent().torch(torch.float64)
    cond = conditions().stacked().torch(torch.float64)
    t = torch.tensor([10, 700])
    target = latent(seed=5).torch(torch.float64).flatten()

    def loss():
        return ((net(z, t, cond).flatten() - target) ** 2).mean()

    err, n = sampled_gradcheck(net, loss, n_entries=64)
    assert n >= 50
    assert err < 1e-3


def test_determinism():
    a = tiny(max_steps=3).fit(latent(), conditions())
    b = tiny(max_steps=3).fit(latent(), conditions())
    assert a.loss_curve_ == b.loss_curve_
    za, _ = a.sample(conditions(), n_steps=4, seed=3)
    zb, _ = b.sample(conditions(), n_steps=4, seed=3)
    np.testing.assert_array_equal(za.numpy().hw, zb.numpy().hw)
    zc, _ = a.sample(conditions(), n_steps=4, seed=4)
    assert not np.array_equal(za.numpy().hw, zc.numpy().hw)


def test_mismatches_rejected():
    with pytest.raises(ValueError):
        tiny().fit(latent(batch=1), conditions())
    with pytest.raises(ValueError):
        tiny().fit(latent(h=8, w=8), conditions())
    with pytest.raises(ValueError):
        tiny(channel_mult=(1, 2, 2, 2)).initialize(EXT, 6)
    m = tiny(max_steps=1).fit(latent(), conditions())
    wrong = ConditionSet(latent(c=1), latent(c=1), latent(c=1))
    with pytest.raises(ValueError, match="channel mismatch"):
        m.sample(wrong, n_steps=2)


def test_persistence_round_trip():
    m = tiny(max_steps=2).fit(latent(), conditions())
    m2 = tiny().load_arrays(m.to_arrays())
    np.testing.assert_array_equal(m2.stats_, m.stats_)
    za, _ = m.sample(conditions(), n_steps=3)
    zb, _ = m2.sample(conditions(), n_steps=3)
    np.testing.assert_array_equal(za.numpy().hs, zb.numpy().hs)
