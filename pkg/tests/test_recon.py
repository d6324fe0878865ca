import numpy as np
import pytest

from clicktok import DataError
from clicktok.audio import Waveform
from clicktok.eval import recon_error_study
from clicktok.eval.recon import chunk_length

SR = 16000


class Identity:
    def reconstruct(self, w):
        return w


class Silence:
    sample_rate = SR

    def reconstruct(self, w):
        return Waveform(np.zeros(len(w)), w.sample_rate)


@pytest.fixture(scope="module")
def noise():
    rng = np.random.default_rng(0)
    return [Waveform(rng.normal(size=8000), SR) for _ in range(3)]


@pytest.mark.parametrize(
    'chunk_ms, sr, expected',
    [(2.27, 16000, 36), (22.7, 16000, 364), (2.27, 44100, 100), (22.7, 44100, 1002)],
)
def test_chunk_length(chunk_ms, sr, expected):
    assert chunk_length(chunk_ms, sr) == expected


def test_chunk_too_short():
    with pytest.raises(DataError):
        chunk_length(0.1, 16000)


@pytest.mark.parametrize('chunk_ms', [2.27, 22.7])
def test_identity_codec(noise, chunk_ms):
    study = recon_error_study(Identity(), noise, chunk_ms)
    assert study.chunk == chunk_length(chunk_ms, SR)
    assert study.error.shape == (study.chunk // 2 + 1,)
    assert not np.any(study.error)


def test_silent_codec(noise):
    study = recon_error_study(Silence(), noise, 2.27)
    np.testing.assert_allclose(study.error, 1.0, atol=1e-6)
    assert np.all(study.counts == 3 * (8000 // 36))
    assert study.frequencies[-1] == pytest.approx(SR / 2)


def test_table(noise):
    t = recon_error_study(Identity(), noise, 22.7).to_table()
    assert t.column_names == ['frequency_hz', 'error', 'chunks']
    assert t.num_rows == 364 // 2 + 1


def test_trained_codec(tiny_codec, clips):
    study = recon_error_study(tiny_codec, clips[:2], 22.7)
    assert np.all(np.isfinite(study.error))
    assert np.all(study.error >= 0)


def test_empty():
    with pytest.raises(DataError):
        recon_error_study(Identity(), [], 2.27)
    with pytest.raises(DataError):
        recon_error_study(Identity(), [Waveform(np.ones(10), SR)], 22.7)
