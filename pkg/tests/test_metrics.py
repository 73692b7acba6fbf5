import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkdiff import corpus as C
from talkdiff import geometry as geo
from talkdiff import metrics as M


@pytest.fixture
def seq():
    return np.random.default_rng(0).normal(size=(6, 68, 3))


def test_lmd_basic(seq):
    assert M.lmd(seq, seq) == 0.0
    shifted = seq.copy()
    shifted[:, geo.LIP] += np.array([3.0, 4.0, 0.0])
    assert M.lmd(shifted, seq) == pytest.approx(5.0)
    other = seq.copy()
    other[:, geo.NONLIP] += 1.0
    assert M.lmd(other, seq) == 0.0
    assert M.lmd(other, seq, full_face=True) > 0
    with pytest.raises(ValueError):
        M.lmd(seq, seq[:5])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lmd_is_a_pseudometric(seed):
    a, b, c = np.random.default_rng(seed).normal(size=(3, 4, 68, 3))
    assert M.lmd(a, b) == pytest.approx(M.lmd(b, a), abs=1e-15)
    assert M.lmd(a, c) <= M.lmd(a, b) + M.lmd(b, c) + 1e-12


def test_psnr():
    a = np.zeros((2, 3, 4, 4))
    assert M.psnr(a, a) == M.PSNR_CAP == 99.0
    assert M.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert M.psnr(a, a + 1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        M.psnr(a, a[:1])


def test_mouth_open_signal():
    t = C.gen_identity(0).template
    assert np.all(M.mouth_open_signal(np.repeat(t[None], 3, 0)) == 0)
    frames = C.mouth_frames(t, [0.0, 0.05, 0.1])
    np.testing.assert_allclose(M.mouth_open_signal(frames), [0.0, 0.05, 0.1], atol=1e-15)
    np.testing.assert_allclose(M.mouth_open_signal(frames + np.array([0.3, -0.2, 0.1])), [0.0, 0.05, 0.1], atol=1e-14)


def test_sync_corr():
    s = np.array([0.0, 1.0, 3.0, 2.0, 5.0])
    assert M.sync_corr(s, s) == pytest.approx(1.0)
    assert M.sync_corr(s, -s) == pytest.approx(-1.0)
    assert M.sync_corr(s, 2 * s + 3) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        M.sync_corr(s, np.ones(5))
    with pytest.raises(ValueError):
        M.sync_corr(s[:2], s[:2])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.1, 10), b=st.floats(-5, 5))
def test_sync_corr_positive_affine_invariance(seed, a, b):
    x, y = np.random.default_rng(seed).normal(size=(2, 10))
    assert M.sync_corr(a * x + b, y) == pytest.approx(M.sync_corr(x, y), abs=1e-9)


def test_temporal_consistency():
    assert M.temporal_consistency(np.ones((4, 3, 8, 8))) == 0.0
    alt = np.zeros((4, 1, 2, 2))
    alt[1::2] = 1.0
    assert M.temporal_consistency(alt) == 1.0
    rng = np.random.default_rng(0)
    clip = rng.random((5, 1, 4, 4))
    mean = clip.mean(axis=0)
    assert M.temporal_consistency(mean + 0.5 * (clip - mean)) <= M.temporal_consistency(clip)
    with pytest.raises(ValueError):
        M.temporal_consistency(np.ones((1, 3, 4, 4)))


def test_raster_mouth_signal_tracks_amplitude():
    c = C.make_corpus(C.CorpusConfig(n_clips=2), 21)
    for i in range(2):
        sig = M.raster_mouth_signal(c.video[i], c.posed[i])
        assert M.sync_corr(sig, C.video_rate(c.amplitudes[i])) > 0.95
    with pytest.raises(ValueError):
        M.raster_mouth_signal(c.video[0], c.posed[0][:3])


def test_mouth_box_inside_frame():
    t = C.gen_identity(0).template
    r0, r1, c0, c1 = M.mouth_box(t, 32, 32)
    assert 0 <= r0 < r1 <= 32 and 0 <= c0 < c1 <= 32
    assert r0 >= 16  # below the midline


def test_report_aggregates():
    r = M.MetricReport()
    for v in (1.0, 2.0, 4.0):
        r.add("lmd", v)
    r.add("psnr", 30.0)
    agg = r.aggregate()
    assert agg["lmd"][0] == pytest.approx(np.mean([1, 2, 4]), abs=1e-12)
    assert agg["lmd"][1] == pytest.approx(np.std([1, 2, 4]), abs=1e-12)
    e = r.as_entries()
    assert e["lmd.per_clip"] == [1.0, 2.0, 4.0] and e["psnr.std"] == 0.0
