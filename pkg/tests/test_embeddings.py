import numpy as np
import pytest

from clicktok import ConfigError, GeometryError
from clicktok.audio import Waveform, resample
from clicktok.eval import (
    EmbeddingModel,
    builtin_embeddings,
    matm_pooled,
    onset_features,
    random_projection,
    token_histogram,
)
from clicktok.synthdata import CodaSpec, synth_coda

SR = 16000


@pytest.fixture(scope="module")
def model(make_matm):
    return make_matm(K=4, vocab=32, max_len=128)


def test_matm_pooled(tiny_codec, model, clips):
    m = matm_pooled(tiny_codec, model)
    a, b = m(clips[0]), m(clips[0])
    assert a.shape == (16,)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, m(clips[1]))
    first = matm_pooled(tiny_codec, model, layer=0)
    assert not np.allclose(first(clips[0]), a)


def test_matm_pooled_resamples(tiny_codec, model, clips):
    m = matm_pooled(tiny_codec, model)
    v = m(resample(clips[0], 44100))
    assert v.shape == (16,) and np.all(np.isfinite(v))


def test_token_histogram(tiny_codec, clips):
    m = token_histogram(tiny_codec, dim=64)
    v = m(clips[2])
    assert v.shape == (64,)
    assert v.sum() == pytest.approx(1.0)
    assert np.array_equal(v, m(clips[2]))


def test_random_projection(clips):
    m = random_projection(SR, seed=3)
    v = m(clips[0])
    assert v.shape == (128,)
    assert np.array_equal(v, random_projection(SR, seed=3)(clips[0]))
    assert not np.allclose(v, random_projection(SR, seed=4)(clips[0]))
    short = Waveform(np.random.default_rng(0).normal(size=100), SR)
    assert np.all(np.isfinite(m(short)))


def test_onset_features():
    w, onsets = synth_coda(CodaSpec((0.35, 0.35, 0.15, 0.15)), SR)
    x = np.concatenate([np.zeros(4000), w.samples, np.zeros(4000)])
    x += 1e-3 * np.random.default_rng(0).standard_normal(len(x))
    v = onset_features(SR)(Waveform(x, SR))
    assert v.shape == (16,)
    assert v[0] == 5
    assert v[3] == pytest.approx(0.15, abs=0.01)  # shortest interval
    assert v[4] == pytest.approx(0.35, abs=0.01)  # longest interval
    assert v[6:].sum() == pytest.approx(1.0)


def test_embed_many(clips):
    m = random_projection(SR)
    serial = m.embed_many(clips[:4])
    threaded = m.embed_many(clips[:4], workers=3)
    assert serial.shape == (4, 128)
    assert np.array_equal(serial, threaded)
    assert m.embed_many([]).shape == (0, 128)


def test_wrong_dimension():
    m = EmbeddingModel('bad', lambda w: np.zeros(3), 4)
    with pytest.raises(GeometryError):
        m(Waveform(np.ones(10), SR))


def test_builtin(tiny_codec, model):
    names = [m.name for m in builtin_embeddings(tiny_codec, model)]
    assert names == ['matm', 'tokenizer', 'random', 'onset']
    assert [m.name for m in builtin_embeddings(names=['onset'])] == ['onset']
    with pytest.raises(ConfigError):
        builtin_embeddings(names=['matm'])
    with pytest.raises(ConfigError):
        builtin_embeddings(names=['tokenizer'])
    with pytest.raises(ConfigError):
        builtin_embeddings(names=['vggish'])
