import numpy as np
import pytest
import torch

from clicktok.audio import Waveform
from clicktok.codec import CodecConfig, TokenGrid, train_codec
from clicktok.matm import Matm, MatmConfig
from clicktok.synthdata import ClickParams, CodaSpec, synth_coda

SR = 16000


def coda_clips(n, seed=0, noise=0.002, seconds=2.0, with_onsets=False):
    """n clips holding one jittered 1+1+3 coda over faint white noise

    with_onsets gives (clip, true click onsets) pairs instead.
    """
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n):
        x = noise * rng.standard_normal(int(seconds * SR))
        icis = np.array([0.35, 0.35, 0.15, 0.15]) * rng.uniform(0.9, 1.1, 4)
        w, onsets = synth_coda(CodaSpec(tuple(icis), ClickParams()), SR, rng)
        start = int(rng.integers(0, len(x) - len(w)))
        x[start : start + len(w)] += 0.7 * w.samples
        clip = Waveform(x, SR)
        clips.append((clip, [start + o for o in onsets]) if with_onsets else clip)
    return clips


def random_grid(K=4, L=12, vocab=32, seed=0):
    rng = np.random.default_rng(seed)
    return TokenGrid(rng.integers(0, vocab, (K, L)), vocab, SR)


def tiny_matm(seed=0, **kwargs):
    kw = dict(layers=2, model_dim=16, heads=2, ff_dim=32, max_len=64)
    kw.update(vocab=32, K=4, dropout=0.0)
    kw.update(kwargs)
    torch.manual_seed(seed)
    return Matm(MatmConfig(**kw))


@pytest.fixture(scope="session")
def clips():
    return coda_clips(6)


@pytest.fixture(scope="session")
def tiny_codec(clips):
    cfg = CodecConfig(K=4, vocab=32, d=32, epochs=3, seed=1)
    return train_codec(clips, cfg)


# test modules are imported with importlib, so helpers travel as fixtures
@pytest.fixture(scope="session")
def make_clips():
    return coda_clips


@pytest.fixture(scope="session")
def make_grid():
    return random_grid


@pytest.fixture(scope="session")
def make_matm():
    return tiny_matm


@pytest.fixture(scope="session")
def trained_stack(tmp_path_factory):
    """corpus, codec and token model trained at desk scale, for slow tests"""
    from clicktok.audio import prepare
    from clicktok.matm import Trainer, TrainConfig
    from clicktok.synthdata import CorpusConfig, build_corpus

    root = tmp_path_factory.mktemp("stack")
    manifest = build_corpus(CorpusConfig(count_per_class=16, n_noise=8), root)
    train = [prepare(w, SR) for w in manifest.waveforms(manifest.select('train'))]
    codec = train_codec(train, CodecConfig(K=4, vocab=64, d=32, epochs=5))
    model = tiny_matm(
        layers=2, model_dim=32, heads=4, ff_dim=64, max_len=128, vocab=64, K=4
    )
    tc = TrainConfig(iterations=600, lr=1e-3, batch_size=8, log_every=100)
    Trainer(model, tc).fit([codec.tokenize(w) for w in train])
    return manifest, codec, model.eval()
