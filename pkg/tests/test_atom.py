import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import sampled_gradcheck
from talkdiff import geometry as geo
from talkdiff.atom import POINT_DIM, AudioToMotion, atom_loss
from talkdiff.corpus import CorpusConfig, make_corpus


def tiny(**kw):
    params = dict(n_frames=4, audio_dim=3, latent_dim=16, n_blocks=1, n_heads=2, max_steps=0, log_every=0)
    params.update(kw)
    return AudioToMotion(**params)


@pytest.fixture(scope="module")
def small_corpus():
    return make_corpus(CorpusConfig(n_clips=2, n_frames=4, feature_dim=3, height=16, width=16), 0)


def _inputs(model, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64 if model.dtype == "float64" else torch.float32
    audio = torch.randn(batch, 2 * model.n_frames, model.audio_dim, generator=g, dtype=dt)
    l_id = torch.randn(batch, geo.N_POINTS, 3, generator=g, dtype=dt)
    delta = torch.randn(batch, model.n_frames, POINT_DIM, generator=g, dtype=dt)
    t = torch.randint(1, 1001, (batch,), generator=g)
    return audio, l_id, delta, t


def test_atom_loss_examples():
    a = torch.zeros(1, 3, 2)
    b = torch.ones(1, 3, 2)
    assert float(atom_loss(a, a)) == 0.0
    # constant offset: reconstruction term only
    assert float(atom_loss(a, b, 2.0, 5.0)) == pytest.approx(2.0)
    ramp = torch.arange(3.0).reshape(1, 3, 1)
    assert float(atom_loss(ramp, torch.zeros_like(ramp), 0.0, 1.0)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        atom_loss(a, b[:, :2])
    with pytest.raises(ValueError):
        atom_loss(a, b, -1.0)


def test_output_shapes(small_corpus):
    m = tiny(max_steps=2).fit(small_corpus.features, small_corpus.frontal)
    seq, calls = m.sample_motion(small_corpus.features[0], small_corpus.frontal[0, 0], n_steps=5)
    assert seq.shape == (4, 68, 3) and calls == 5
    assert m.predict(small_corpus.features, small_corpus.frontal[:, 0]).shape == (2, 4, 68, 3)
    with pytest.raises(ValueError):
        m.sample_motion(small_corpus.features[0][:5], small_corpus.frontal[0, 0])
    with pytest.raises(ValueError):
        m.fit(small_corpus.features, small_corpus.frontal[:, :3])


def test_zero_weight_loss_leaves_params_unchanged(small_corpus):
    base = tiny().initialize().to_arrays()
    m = tiny(w_recon=0.0, w_vel=0.0, optimizer="sgd", lr=0.1, max_steps=1).fit(small_corpus.features, small_corpus.frontal)
    after = m.to_arrays()
    assert all(np.array_equal(base[k], after[k]) for k in base)


def test_same_seed_identical_curves(small_corpus):
    a = tiny(max_steps=5).fit(small_corpus.features, small_corpus.frontal)
    b = tiny(max_steps=5).fit(small_corpus.features, small_corpus.frontal)
    assert a.loss_curve_ == b.loss_curve_
    assert set(a.loss_curve_[0]) == {"step", "loss", "recon", "vel"}
    c = tiny(max_steps=5, seed=3).fit(small_corpus.features, small_corpus.frontal)
    assert c.loss_curve_ != a.loss_curve_


def test_gradient_check_float64():
    m = tiny(dtype="float64").initialize()
    net = m.net_
    audio, l_id, delta, t = _inputs(m)
    target = torch.randn(delta.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)

    def loss():
        return atom_loss(net(delta, t, net.encode_audio(audio), net.encode_landmark(l_id)), target)

    err, n = sampled_gradcheck(net, loss, n_entries=64)
    assert n >= 50
    assert err < 1e-3


def test_audio_path_disentangled_without_trunk():
    m = tiny(merge_trunk=False, dtype="float64").initialize()
    net = m.net_
    audio, l_id, delta, t = _inputs(m)
    F_A = net.encode_audio(audio).detach().requires_grad_(True)
    out = net(delta, t, F_A, net.encode_landmark(l_id))
    (g_non,) = torch.autograd.grad(out[..., net.nonlip_cols].sum(), F_A, retain_graph=True, allow_unused=True)
    assert g_non is None or torch.count_nonzero(g_non) == 0
    (g_lip,) = torch.autograd.grad(out[..., net.lip_cols].sum(), F_A)
    assert torch.count_nonzero(g_lip) > 0


def test_merge_trunk_mixes_audio_into_nonlip():
    m = tiny(dtype="float64").initialize()
    net = m.net_
    audio, l_id, delta, t = _inputs(m)
    F_A = net.encode_audio(audio).detach().requires_grad_(True)
    out = net(delta, t, F_A, net.encode_landmark(l_id))
    (g,) = torch.autograd.grad(out[..., net.nonlip_cols].sum(), F_A)
    assert torch.count_nonzero(g) > 0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_permutation_locality(seed):
    m = tiny(dtype="float64").initialize()
    net = m.net_
    audio, _, delta, t = _inputs(m, seed=seed)
    perm = torch.as_tensor(np.random.default_rng(seed).permutation(len(net.nonlip_cols)))
    shuffled = delta.clone()
    shuffled[..., net.nonlip_cols] = delta[..., net.nonlip_cols[perm]]
    with torch.no_grad():
        t_emb = net.time(t)
        F_A = net.encode_audio(audio)
        lip_a, _ = net.streams(delta, t_emb, F_A)
        lip_b, _ = net.streams(shuffled, t_emb, F_A)
    assert torch.equal(lip_a, lip_b)


def test_chain_motion(small_corpus):
    m = tiny(max_steps=2).fit(small_corpus.features, small_corpus.frontal)
    audio, l_id = small_corpus.features[0], small_corpus.frontal[0, 0]
    single, _ = m.sample_motion(audio, l_id, n_steps=4, seed=2)
    np.testing.assert_array_equal(m.chain_motion(audio, l_id, n_steps=4, seed=2), single)
    long = m.chain_motion(np.concatenate([audio] * 3), l_id, n_steps=4, seed=2)
    assert long.shape == (12, 68, 3)
    second, _ = m.sample_motion(audio, long[3], n_steps=4, seed=3)
    np.testing.assert_array_equal(long[4:8], second)
    with pytest.raises(ValueError):
        m.chain_motion(audio[:-1], l_id)


def test_persistence_round_trip(small_corpus):
    m = tiny(max_steps=2).fit(small_corpus.features, small_corpus.frontal)
    m2 = tiny().load_arrays(m.to_arrays())
    a, _ = m.sample_motion(small_corpus.features[0], small_corpus.frontal[0, 0], n_steps=3)
    b, _ = m2.sample_motion(small_corpus.features[0], small_corpus.frontal[0, 0], n_steps=3)
    np.testing.assert_array_equal(a, b)


def test_invalid_lip_set():
    from talkdiff.atom import AtomNet

    with pytest.raises(ValueError):
        AtomNet(4, 3, 16, 1, 2, lip_points=np.arange(68))
