import numpy as np
import pytest

import clicktok
from clicktok import ConfigError, DataError, GeometryError, MaskedGridError
from clicktok.audio import Waveform
from clicktok.codec import (
    MASK,
    Codec,
    CodebookSet,
    CodecConfig,
    FrameTransform,
    TokenGrid,
    detokenize,
    residual_quantize,
    tokenize,
    train_codec,
)
from clicktok.matm import Matm

SR = 16000


def handmade_codec(K=3, vocab=16, d=8, seed=0):
    rng = np.random.default_rng(seed)
    transform = FrameTransform(
        512, 60, SR, np.zeros(512), np.eye(d, 512), np.ones(d)
    )
    v = rng.normal(size=(K, vocab, d))
    v[:, 0] = 0.0
    return Codec(transform, CodebookSet(v))


@pytest.mark.parametrize(
    'n, L', [(32000, 120), (160000, 600), (32001, 121), (1, 1), (267, 2)]
)
def test_grid_geometry(n, L):
    c = handmade_codec()
    g = c.tokenize(Waveform(np.ones(n), SR))
    assert (g.K, g.L) == (3, L)


def test_detokenize_length():
    c = handmade_codec()
    g = TokenGrid(np.zeros((3, 120), dtype=int), 16, SR)
    w = detokenize(c, g)
    assert len(w) == 32000
    assert w.sample_rate == SR


def test_detokenize_masked():
    c = handmade_codec()
    t = np.zeros((3, 120), dtype=int)
    t[1, 5] = MASK
    with pytest.raises(MaskedGridError):
        c.detokenize(TokenGrid(t, 16, SR))


def test_detokenize_wrong_geometry():
    c = handmade_codec()
    with pytest.raises(GeometryError):
        c.detokenize(TokenGrid(np.zeros((4, 10), dtype=int), 16, SR))


def test_tokenize_wrong_rate():
    with pytest.raises(DataError):
        handmade_codec().tokenize(Waveform(np.ones(100), 8000))


def test_token_grid_validation():
    with pytest.raises(DataError):
        TokenGrid(np.full((2, 3), 16), 16, SR)
    with pytest.raises(DataError):
        TokenGrid(np.zeros((2, 0), dtype=int), 16, SR)
    g = TokenGrid([[0, MASK, 3]], 16, SR)
    assert g.num_masked == 1
    assert g.duration == pytest.approx(3 / 60)
    with pytest.raises(ValueError):
        g.tokens[0, 0] = 1


# -----------------------------------------------


def test_quantize_exact_entry():
    c = handmade_codec()
    f = c.codebooks.vectors[0, 7]
    codes, recon = residual_quantize(f, c.codebooks)
    assert codes[0] == 7
    assert np.all(codes[1:] == 0)
    np.testing.assert_allclose(recon, f, atol=1e-12)


def test_quantize_zero():
    c = handmade_codec()
    codes, recon = residual_quantize(np.zeros(8), c.codebooks)
    assert np.all(codes == 0)
    assert not np.any(recon)


def test_quantize_residuals_shrink():
    c = handmade_codec(K=6)
    rng = np.random.default_rng(3)
    v = c.codebooks.vectors
    for _ in range(20):
        f = rng.normal(size=8) * 2
        codes, recon = residual_quantize(f, c.codebooks)
        r, norms = f.copy(), [np.linalg.norm(f)]
        for k, j in enumerate(codes):
            r = r - v[k, j]
            norms.append(np.linalg.norm(r))
        assert np.all(np.diff(norms) <= 1e-12)
        np.testing.assert_allclose(f - recon, r, atol=1e-12)


def test_quantize_wrong_dim():
    with pytest.raises(GeometryError):
        residual_quantize(np.zeros(5), handmade_codec().codebooks)


# -----------------------------------------------


def test_train_silent_corpus():
    corpus = [Waveform(np.zeros(32000), SR)] * 2
    c = train_codec(corpus, CodecConfig(K=2, vocab=8, d=4, epochs=2))
    assert c.codebooks.vectors.shape == (2, 8, 4)
    f = c.features(corpus[0])
    codes, recon = residual_quantize(f[10], c.codebooks)
    assert np.linalg.norm(f[10] - recon) < 1e-6
    assert np.any(np.all(c.codebooks.vectors[0] == f[10], axis=1))


def test_train_default_shape(make_clips):
    corpus = make_clips(9, seed=4)
    c = train_codec(corpus, CodecConfig(epochs=1))
    assert c.codebooks.vectors.shape == (14, 1024, 64)
    assert c.tokenize(corpus[0]).tokens.shape == (14, 120)


def test_train_curve(clips):
    cfg = dict(K=2, vocab=64, d=16, seed=2)
    one = train_codec(clips, CodecConfig(epochs=1, **cfg)).curve
    ten = train_codec(clips, CodecConfig(epochs=10, **cfg)).curve
    assert list(ten.columns) == ['stage', 'epoch', 'error']
    assert len(ten) == 20
    for _, errors in ten.groupby('stage').error:
        assert np.all(np.diff(errors.to_numpy()) <= 0)
    first = one[one.stage == 0].error.iloc[0]
    assert ten[ten.stage == 0].error.iloc[0] == pytest.approx(first)
    assert ten[ten.stage == 0].error.iloc[-1] <= first


def test_train_deterministic(clips):
    cfg = CodecConfig(K=2, vocab=32, d=16, epochs=2, seed=5)
    a, b = train_codec(clips, cfg), train_codec(clips, cfg)
    assert np.array_equal(a.codebooks.vectors, b.codebooks.vectors)
    assert np.array_equal(a.tokenize(clips[0]).tokens, b.tokenize(clips[0]).tokens)


def test_roundtrip_error(make_clips):
    corpus = make_clips(3, seed=8, noise=0.0005)
    c = train_codec(corpus, CodecConfig(K=4, vocab=256, d=128, epochs=10))
    for w in corpus:
        y = c.reconstruct(w)
        assert len(y) == len(w)
        rel = np.linalg.norm(y.samples - w.samples) / np.linalg.norm(w.samples)
        assert rel < 0.5


def test_projection_stable(tiny_codec, clips):
    t = tiny_codec.transform
    C = t.components
    np.testing.assert_allclose(C @ C.T, np.eye(t.d), atol=1e-6)
    for w in clips[:3]:
        once = t.synthesis(t.analysis(t.frames(w.samples)))
        twice = t.synthesis(t.analysis(once))
        assert np.linalg.norm(twice - once) <= 1e-5 * np.linalg.norm(once)
        assert np.array_equal(tiny_codec.tokenize(w).tokens, tiny_codec.tokenize(w).tokens)


@pytest.mark.parametrize(
    'corpus, cfg, error',
    [
        ([], CodecConfig(), DataError),
        (
            [Waveform(np.ones(1000), SR), Waveform(np.ones(1000), 8000)],
            CodecConfig(),
            DataError,
        ),
        ([Waveform(np.ones(1000), SR)], CodecConfig(vocab=64), DataError),
        ([Waveform(np.ones(32000), SR)], CodecConfig(vocab=8, d=200), ConfigError),
        ([Waveform(np.ones(32000), SR)], CodecConfig(d=0), ConfigError),
    ],
)
def test_train_rejected(corpus, cfg, error):
    with pytest.raises(error):
        train_codec(corpus, cfg)


# -----------------------------------------------


def test_checkpoint_roundtrip(tiny_codec, clips, tmp_path):
    clicktok.write(tmp_path / 'tiny.codec', tiny_codec)
    c = clicktok.read(tmp_path / 'tiny.codec')
    assert (c.K, c.vocab, c.sample_rate) == (4, 32, SR)
    assert np.array_equal(c.codebooks.vectors, tiny_codec.codebooks.vectors)
    assert np.array_equal(c.transform.components, tiny_codec.transform.components)
    g = tokenize(tiny_codec, clips[1])
    assert np.array_equal(tokenize(c, clips[1]).tokens, g.tokens)
    assert np.array_equal(detokenize(c, g).samples, detokenize(tiny_codec, g).samples)
    assert c.curve[['stage', 'epoch']].equals(tiny_codec.curve[['stage', 'epoch']])
    np.testing.assert_allclose(c.curve.error, tiny_codec.curve.error, rtol=1e-6)


def test_checkpoint_wrong_kind(tiny_codec, tmp_path):
    tiny_codec.save(tmp_path / 'c')
    with pytest.raises(DataError):
        Matm.load(tmp_path / 'c')
