__all__ = [
    'Waveform',
    'Spectrogram',
    'NoiseProfile',
    'Wav',
    'load_wav',
    'write_wav',
    'resample',
    'normalize',
    'prepare',
    'stft',
    'istft',
    'estimate_noise_profile',
    'load_exclusions',
    'subtraction_gain',
    'spectral_subtract',
    'detect_onsets',
    'denoise',
]

import json
import os
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal
from scipy.io import wavfile

from . import (
    ERROR,
    DataError,
    DegenerateSignalError,
    GeometryError,
    WavFormatError,
    logger,
)
from .base import ReadWrite


def hann(n: int) -> np.ndarray:
    """periodic Hann window"""
    return signal.get_window('hann', int(n), fftbins=True)


@dataclass(frozen=True)
class Waveform:
    """Mono sample buffer at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            ERROR(f"sample rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            ERROR("waveform contains NaN or Inf samples")
        x.setflags(write=False)
        object.__setattr__(self, 'samples', x)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    def __repr__(self):
        return (
            f"<Waveform at {hex(id(self))}, {len(self)} samples"
            f" @ {self.sample_rate} Hz>"
        )

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray  # complex, F bins x M frames
    window_len: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        F = self.window_len // 2 + 1
        if self.frames.ndim != 2 or self.frames.shape[0] != F:
            ERROR(
                f"spectrogram needs {F} bins for window {self.window_len}"
                f", got shape {self.frames.shape}",
                GeometryError,
            )
        if not 0 < self.hop <= self.window_len:
            ERROR(f"hop {self.hop} outside (0, {self.window_len}]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class NoiseProfile:
    magnitude: np.ndarray
    window_len: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=np.float64)
        if mag.shape != (self.window_len // 2 + 1,):
            ERROR(
                f"noise profile length {mag.size} does not match window"
                f" {self.window_len}",
                GeometryError,
            )
        if np.any(mag < 0):
            ERROR("noise profile magnitude must be non-negative")
        object.__setattr__(self, 'magnitude', mag)


# -----------------------------------------------


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV, averaging channels to mono."""
    path = Path(path)
    if not path.is_file():
        ERROR(f"no such WAV file '{path}'")

    with open(path, 'rb') as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b'RIFF' or head[8:12] != b'WAVE':
        ERROR(
            f"'{path}' has a corrupt or unsupported header"
            f" (magic {head[:4]!r})",
            WavFormatError,
        )

    try:
        sr, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as e:
        ERROR(f"cannot decode '{path}': {e}", WavFormatError)

    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        ERROR(
            f"'{path}' uses unsupported encoding {data.dtype},"
            " expected 16-bit PCM or 32-bit float",
            WavFormatError,
        )
    if data.ndim == 2:
        data = data.mean(axis=1)
    logger.debug(f"loaded '{path.name}', {data.shape[0]} samples @ {sr} Hz")
    return Waveform(data, sr)


def write_wav(path, w: Waveform, encoding: str = 'float32') -> int:
    """Write a mono WAV; encoding is 'float32' or 'pcm16'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if encoding == 'float32':
        data = w.samples.astype(np.float32)
    elif encoding == 'pcm16':
        x = np.clip(w.samples, -1.0, 1.0)
        data = np.round(x * 32767).astype(np.int16)
    else:
        ERROR(f"unknown WAV encoding '{encoding}'")
    wavfile.write(path, w.sample_rate, data)
    return os.stat(path).st_size


class Wav(ReadWrite):
    """WAV file, 16-bit PCM or 32-bit float"""

    @classmethod
    def read(cls, fpath, **kwargs):
        return load_wav(fpath)

    @classmethod
    def write(cls, fpath, data: Waveform, **kwargs):
        return write_wav(fpath, data, **kwargs)


# -----------------------------------------------


def resample(w: Waveform, target: int) -> Waveform:
    """Polyphase windowed-sinc resampling to the target rate."""
    target = int(target)
    if target <= 0:
        ERROR(f"target sample rate must be > 0, got {target}")
    if target == w.sample_rate:
        return w
    g = gcd(target, w.sample_rate)
    up, down = target // g, w.sample_rate // g
    y = signal.resample_poly(w.samples, up, down, window=('kaiser', 8.6))
    return Waveform(y, target)


def normalize(w: Waveform) -> Waveform:
    """Zero mean, unit (population) variance."""
    if len(w) < 2:
        ERROR(f"cannot normalize {len(w)} samples, need at least 2")
    x = w.samples
    mean, std = x.mean(), x.std()
    if std <= 1e-10 * (np.abs(x).max() or 1.0):
        ERROR("cannot normalize a constant signal", DegenerateSignalError)
    return Waveform((x - mean) / std, w.sample_rate)


def prepare(w: Waveform, sample_rate: int) -> Waveform:
    """model input: resampled, zero mean, unit variance"""
    return normalize(resample(w, sample_rate))


# -----------------------------------------------


def _frame_index(n_frames: int, window_len: int, hop: int) -> np.ndarray:
    return np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]


def stft(w: Waveform, window_len: int = 512, hop: int = None) -> Spectrogram:
    """Hann-windowed STFT without padding, one column per full frame."""
    window_len = int(window_len)
    hop = window_len // 2 if hop is None else int(hop)
    if window_len < 2:
        ERROR(f"window length must be >= 2, got {window_len}", GeometryError)
    if hop <= 0:
        ERROR(f"hop must be > 0, got {hop}", GeometryError)

    M = max(0, 1 + (len(w) - window_len) // hop)
    frames = w.samples[_frame_index(M, window_len, hop)] * hann(window_len)
    X = np.fft.rfft(frames, axis=1).T.reshape(window_len // 2 + 1, M)
    return Spectrogram(X, window_len, hop, w.sample_rate)


def istft(s: Spectrogram, length: int = None) -> Waveform:
    """Weighted overlap-add inverse of stft()."""
    N, hop, M = s.window_len, s.hop, s.num_frames
    if 2 * hop > N:
        ERROR(
            f"hop {hop} > window/2 breaks the overlap-add condition",
            GeometryError,
        )
    win = hann(N)
    n_out = (M - 1) * hop + N if M > 0 else 0
    y = np.zeros(n_out)
    wsum = np.zeros(n_out)
    if M > 0:
        idx = _frame_index(M, N, hop)
        frames = np.fft.irfft(s.frames.T, n=N, axis=1)
        np.add.at(y, idx, frames * win)
        np.add.at(wsum, idx, np.broadcast_to(win**2, idx.shape))
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    y[~nz] = 0.0
    if length is not None:
        y = np.pad(y, (0, max(0, length - n_out)))[:length]
    return Waveform(y, s.sample_rate)


# -----------------------------------------------


def estimate_noise_profile(
    w: Waveform, exclusion=(), window_len: int = 512, hop: int = 256
) -> NoiseProfile:
    """Mean STFT magnitude over frames clear of every exclusion range."""
    S = stft(w, window_len, hop)
    starts = hop * np.arange(S.num_frames)
    ends = starts + window_len
    usable = np.ones(S.num_frames, dtype=bool)
    for a, b in exclusion:
        if b < a:
            ERROR(f"exclusion range ({a}, {b}) ends before it starts")
        usable &= (ends <= a) | (starts >= b)

    if not usable.any():
        ERROR("no STFT frame lies outside the exclusion ranges")
    logger.debug(f"noise profile from {usable.sum()}/{usable.size} frames")
    mag = np.abs(S.frames[:, usable]).mean(axis=1)
    return NoiseProfile(mag, window_len, hop, w.sample_rate)


def load_exclusions(src) -> list:
    """Exclusion ranges from a JSON file or string, [[start, end], ...]"""
    text = Path(src).read_text() if Path(str(src)).is_file() else str(src)
    try:
        pairs = json.loads(text)
        return [(int(a), int(b)) for a, b in pairs]
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        ERROR(f"exclusion ranges must be [[start, end], ...]: {e}")


def subtraction_gain(mag, noise, floor: float = 0.02) -> np.ndarray:
    """Per-bin gain max(mag - noise, floor*mag) / mag, zero where mag is zero.

    mag is (bins, frames), noise (bins,). Gains lie in [floor, 1].
    """
    mag = np.asarray(mag, dtype=np.float64)
    target = np.maximum(mag - np.asarray(noise)[:, None], floor * mag)
    return np.divide(target, mag, out=np.zeros_like(mag), where=mag > 0)


def spectral_subtract(
    w: Waveform, p: NoiseProfile, floor: float = 0.02
) -> Waveform:
    """Subtract the noise magnitude per frame, keeping the noisy phase."""
    if not 0.0 <= floor <= 1.0:
        ERROR(f"spectral floor must be in [0, 1], got {floor}")
    if p.sample_rate != w.sample_rate:
        ERROR(
            f"noise profile is for {p.sample_rate} Hz,"
            f" waveform is {w.sample_rate} Hz",
            GeometryError,
        )

    # zero-pad a full window on each side so every sample is interior
    N = p.window_len
    padded = Waveform(np.pad(w.samples, N), w.sample_rate)
    S = stft(padded, N, p.hop)
    gain = subtraction_gain(np.abs(S.frames), p.magnitude, floor)
    Y = Spectrogram(S.frames * gain, N, p.hop, w.sample_rate)
    y = istft(Y, length=len(padded)).samples[N : N + len(w)]
    return Waveform(y, w.sample_rate)


def denoise(
    w: Waveform,
    onsets,
    guard: float = 0.03,
    window_len: int = 512,
    hop: int = 256,
    floor: float = 0.02,
) -> Waveform:
    """Spectral subtraction with the noise profile taken between clicks.

    Each onset masks [onset - guard, onset + guard] seconds out of the
    noise estimate.
    """
    g = int(round(guard * w.sample_rate))
    exclusion = [(max(0, o - g), min(len(w), o + g)) for o in onsets]
    profile = estimate_noise_profile(w, exclusion, window_len, hop)
    return spectral_subtract(w, profile, floor)


# -----------------------------------------------


def detect_onsets(
    w: Waveform,
    frame: int = 512,
    hop: int = 128,
    threshold: float = 3.0,
    median_frames: int = 31,
) -> list:
    """Spectral-flux onsets above threshold x rolling median.

    Peaks of the half-wave-rectified flux are refined to the largest
    absolute sample inside the frame that produced them.
    """
    frame, hop = int(frame), int(hop)
    if frame < 32:
        ERROR(f"onset frame must be >= 32 samples, got {frame}")
    n = len(w)
    if n == 0:
        return []

    x = np.pad(w.samples, (frame, frame))
    mag = np.abs(stft(Waveform(x, w.sample_rate), frame, hop).frames)
    flux = np.maximum(np.diff(mag, axis=1), 0.0).sum(axis=0)
    flux = np.concatenate([[0.0], flux])

    median = (
        pd.Series(flux)
        .rolling(window=median_frames, center=True, min_periods=1)
        .median()
        .to_numpy()
    )
    left = np.concatenate([[0.0], flux[:-1]])
    right = np.concatenate([flux[1:], [0.0]])
    peaks = np.flatnonzero(
        (flux > threshold * median)
        & (flux > 1e-9 * max(flux.max(), 1e-300))
        & (flux > left)
        & (flux >= right)
    )

    onsets = []
    for m in peaks:
        a = max(0, m * hop - frame)
        b = min(n, m * hop)
        if b <= a:
            continue
        o = a + int(np.argmax(np.abs(w.samples[a:b])))
        if not onsets or o >= onsets[-1] + hop:
            onsets.append(o)
    return onsets
