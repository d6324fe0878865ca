import numpy as np
import pytest
from scipy.io import wavfile

import clicktok
from clicktok import DataError, DegenerateSignalError, WavFormatError
from clicktok.audio import (
    NoiseProfile,
    Waveform,
    denoise,
    detect_onsets,
    estimate_noise_profile,
    istft,
    load_exclusions,
    load_wav,
    normalize,
    resample,
    spectral_subtract,
    stft,
    subtraction_gain,
    write_wav,
)


@pytest.fixture(scope="module")
def tmp_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("audio")


def tones(bins, n=16000, sr=16000, window_len=512, seed=0):
    """sum of sines centred on STFT bins, constant magnitude per frame"""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    x = sum(
        np.sin(2 * np.pi * k * t / window_len + rng.uniform(0, 2 * np.pi))
        for k in bins
    )
    return Waveform(x, sr)


# -----------------------------------------------


def test_load_pcm16(tmp_dir):
    data = (np.sin(np.arange(16000) / 10) * 1000).astype(np.int16)
    wavfile.write(tmp_dir / 'pcm.wav', 16000, data)
    w = load_wav(tmp_dir / 'pcm.wav')
    assert len(w) == 16000
    assert w.sample_rate == 16000
    np.testing.assert_allclose(w.samples, data / 32768.0)


def test_load_stereo_mean(tmp_dir):
    data = np.stack([np.ones(100), np.zeros(100)], axis=1).astype(np.float32)
    wavfile.write(tmp_dir / 'stereo.wav', 8000, data)
    w = load_wav(tmp_dir / 'stereo.wav')
    np.testing.assert_array_equal(w.samples, 0.5)


def test_load_bad_header(tmp_dir):
    data = np.zeros(100, dtype=np.int16)
    wavfile.write(tmp_dir / 'rifx.wav', 8000, data)
    raw = bytearray((tmp_dir / 'rifx.wav').read_bytes())
    raw[:4] = b'RIFX'
    (tmp_dir / 'rifx.wav').write_bytes(bytes(raw))
    with pytest.raises(WavFormatError):
        load_wav(tmp_dir / 'rifx.wav')


def test_load_unsupported_encoding(tmp_dir):
    wavfile.write(tmp_dir / 'int32.wav', 8000, np.zeros(10, dtype=np.int32))
    with pytest.raises(WavFormatError):
        load_wav(tmp_dir / 'int32.wav')


def test_missing_file(tmp_dir):
    with pytest.raises(DataError):
        load_wav(tmp_dir / 'nope.wav')


@pytest.mark.parametrize('encoding, atol', [('float32', 1e-7), ('pcm16', 1e-4)])
def test_write_read(tmp_dir, encoding, atol):
    w = Waveform(np.linspace(-0.9, 0.9, 321), 16000)
    fpath = tmp_dir / f'{encoding}.wav'
    clicktok.write(fpath, w, encoding=encoding)
    r = clicktok.read(fpath)
    assert r.sample_rate == 16000
    np.testing.assert_allclose(r.samples, w.samples, atol=atol)


def test_waveform_rejects_nan():
    with pytest.raises(DataError):
        Waveform([0.0, np.nan], 16000)
    with pytest.raises(DataError):
        Waveform([0.0], 0)


# -----------------------------------------------


def test_resample_length():
    w = Waveform(np.random.default_rng(0).normal(size=44100), 44100)
    assert abs(len(resample(w, 16000)) - 16000) <= 1


def test_resample_identity():
    w = Waveform(np.arange(10.0), 16000)
    assert np.array_equal(resample(w, 16000).samples, w.samples)


@pytest.mark.parametrize('source, target', [(44100, 16000), (8000, 16000), (48000, 44100)])
def test_resample_linear(source, target):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, source // 4))
    a, b = 0.7, -2.5

    def rs(v):
        return resample(Waveform(v, source), target).samples

    np.testing.assert_allclose(rs(a * x + b * y), a * rs(x) + b * rs(y), atol=1e-9)


def test_resample_sine():
    t8 = np.arange(8000) / 8000
    w = resample(Waveform(np.sin(2 * np.pi * 1000 * t8), 8000), 16000)
    t16 = np.arange(len(w)) / 16000
    expected = np.sin(2 * np.pi * 1000 * t16)
    trim = 200
    err = np.abs(w.samples - expected)[trim:-trim]
    assert err.max() < 1e-3


@pytest.mark.parametrize(
    'x, expected',
    [
        ([2.0, 4.0], [-1.0, 1.0]),
        ([1.0, -1.0, 1.0, -1.0], [1.0, -1.0, 1.0, -1.0]),
    ],
)
def test_normalize(x, expected):
    np.testing.assert_allclose(normalize(Waveform(x, 16000)).samples, expected)


@pytest.mark.parametrize('seed', range(5))
def test_normalize_idempotent(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 5) + rng.exponential(2.0) * rng.standard_normal(1000)
    once = normalize(Waveform(x, 16000))
    assert abs(once.samples.mean()) < 1e-12
    assert once.samples.std() == pytest.approx(1.0)
    np.testing.assert_allclose(normalize(once).samples, once.samples, atol=1e-12)


def test_normalize_constant():
    with pytest.raises(DegenerateSignalError):
        normalize(Waveform(np.zeros(100), 16000))
    with pytest.raises(DegenerateSignalError):
        normalize(Waveform(np.full(100, 3.0), 16000))


# -----------------------------------------------


def test_stft_impulse_roundtrip():
    x = np.zeros(4096)
    x[2000] = 1.0
    w = Waveform(x, 16000)
    y = istft(stft(w, 512, 256), length=len(x))
    np.testing.assert_allclose(y.samples[512:-512], x[512:-512], atol=1e-6)


def test_stft_dominant_bin():
    t = np.arange(16000) / 16000
    S = stft(Waveform(np.sin(2 * np.pi * 1000 * t), 16000), 512)
    assert S.frames.shape == (257, 1 + (16000 - 512) // 256)
    assert np.all(np.abs(S.frames).argmax(axis=0) == 32)


def test_stft_zero():
    S = stft(Waveform(np.zeros(2048), 16000), 512)
    assert not np.any(S.frames)


# -----------------------------------------------


def test_noise_profile_white():
    w = Waveform(np.random.default_rng(1).normal(size=160000), 16000)
    mag = estimate_noise_profile(w).magnitude[1:-1]
    assert np.all(np.abs(mag / np.median(mag) - 1) < 0.2)


def test_noise_profile_silence():
    p = estimate_noise_profile(Waveform(np.zeros(4096), 16000))
    assert p.magnitude.shape == (257,)
    assert not np.any(p.magnitude)


def test_noise_profile_all_excluded():
    w = Waveform(np.ones(4096), 16000)
    with pytest.raises(DataError):
        estimate_noise_profile(w, exclusion=[(0, 4096)])


def test_load_exclusions(tmp_dir):
    assert load_exclusions('[[0, 10], [20, 30]]') == [(0, 10), (20, 30)]
    (tmp_dir / 'ex.json').write_text('[[5, 6]]')
    assert load_exclusions(tmp_dir / 'ex.json') == [(5, 6)]
    with pytest.raises(DataError):
        load_exclusions('[1, 2]')


def test_spectral_subtract_stationary():
    w = tones([20, 41, 77])
    p = estimate_noise_profile(w)
    y = spectral_subtract(w, p)
    inner = slice(1024, -1024)
    before = np.sqrt(np.mean(w.samples[inner] ** 2))
    after = np.sqrt(np.mean(y.samples[inner] ** 2))
    assert 20 * np.log10(before / after) >= 10.0


@pytest.mark.parametrize('zero_profile, floor', [(True, 0.02), (False, 1.0)])
def test_spectral_subtract_identity(zero_profile, floor):
    w = Waveform(np.random.default_rng(2).normal(size=5000), 16000)
    p = estimate_noise_profile(w)
    if zero_profile:
        p = NoiseProfile(np.zeros(257), 512, 256, 16000)
    y = spectral_subtract(w, p, floor=floor)
    assert len(y) == len(w)
    np.testing.assert_allclose(y.samples, w.samples, atol=1e-9)


@pytest.mark.parametrize('floor', [0.0, 0.02, 0.5])
def test_subtraction_gain_bounds(floor):
    rng = np.random.default_rng(6)
    mag = rng.exponential(1.0, size=(257, 40))
    mag[::7, ::5] = 0.0
    noise = rng.exponential(1.0, size=257)
    gain = subtraction_gain(mag, noise, floor)
    assert np.all(np.isfinite(gain))
    assert np.all(gain <= 1.0)
    assert np.all(gain * mag >= floor * mag - 1e-12)
    assert not np.any(gain[mag == 0])


def test_spectral_subtract_finite():
    rng = np.random.default_rng(7)
    w = Waveform(rng.normal(size=8000), 16000)
    p = NoiseProfile(rng.exponential(5.0, size=257), 512, 256, 16000)
    y = spectral_subtract(w, p)
    assert len(y) == len(w)
    assert np.all(np.isfinite(y.samples))


def test_spectral_subtract_floor_only():
    # noise swamps every bin, so each frame keeps exactly floor x its magnitude
    w = Waveform(np.random.default_rng(8).normal(size=5000), 16000)
    p = NoiseProfile(np.full(257, 1e6), 512, 256, 16000)
    y = spectral_subtract(w, p, floor=0.02)
    np.testing.assert_allclose(y.samples, 0.02 * w.samples, atol=1e-9)


def test_spectral_subtract_rate_mismatch():
    w = Waveform(np.ones(1000), 16000)
    p = NoiseProfile(np.zeros(257), 512, 256, 8000)
    with pytest.raises(clicktok.GeometryError):
        spectral_subtract(w, p)


def test_denoise_keeps_clicks():
    rng = np.random.default_rng(3)
    x = 0.01 * rng.normal(size=16000)
    for o in (4000, 12000):
        x[o] += 1.0
    y = denoise(Waveform(x, 16000), [4000, 12000])
    quiet = slice(6000, 10000)
    assert np.std(y.samples[quiet]) < np.std(x[quiet])
    assert abs(y.samples[4000]) > 0.5


# -----------------------------------------------


def test_onsets_silence():
    assert detect_onsets(Waveform(np.zeros(16000), 16000), 128, 32) == []


def test_onsets_single_impulse():
    x = np.zeros(16000)
    x[8000] = 1.0
    onsets = detect_onsets(Waveform(x, 16000), 128, 32)
    assert len(onsets) == 1
    assert abs(onsets[0] - 8000) <= 128


def test_onsets_two_impulses():
    x = np.zeros(16000)
    x[[4000, 8000]] = 1.0
    onsets = detect_onsets(Waveform(x, 16000), 128, 32)
    assert len(onsets) == 2
    assert abs((onsets[1] - onsets[0]) - 4000) <= 32


@pytest.mark.parametrize('seed', range(3))
def test_onsets_increasing_in_range(make_clips, seed):
    clips = make_clips(3, seed=seed)
    clips.append(Waveform(np.random.default_rng(seed).normal(size=16000), 16000))
    for w in clips:
        onsets = detect_onsets(w)
        assert np.all(np.diff(onsets) > 0)
        assert all(0 <= o < len(w) for o in onsets)


def test_onsets_find_coda_clicks(make_clips):
    tol = int(0.005 * 16000)
    found = total = 0
    for w, truth in make_clips(10, seed=9, with_onsets=True):
        onsets = np.array(detect_onsets(w))
        total += len(truth)
        found += sum(np.any(np.abs(onsets - t) <= tol) for t in truth)
    assert found / total >= 0.9
