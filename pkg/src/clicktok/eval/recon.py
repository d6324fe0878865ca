__all__ = ['ReconStudy', 'chunk_length', 'recon_error_study']

from dataclasses import dataclass

import numpy as np
import pyarrow as pa

from .. import ERROR, logger
from ..audio import resample


@dataclass
class ReconStudy:
    """Mean normalized spectral error per frequency bin."""

    error: np.ndarray
    frequencies: np.ndarray  # Hz
    counts: np.ndarray  # contributing chunks per bin
    chunk: int  # samples

    def to_table(self) -> pa.Table:
        return pa.table(
            {
                'frequency_hz': pa.array(self.frequencies, pa.float64()),
                'error': pa.array(self.error, pa.float64()),
                'chunks': pa.array(self.counts, pa.int64()),
            }
        )


def chunk_length(chunk_ms: float, sample_rate: int) -> int:
    """chunk size in samples, rounded to an even count"""
    C = int(2 * np.floor(chunk_ms * sample_rate / 2000.0 + 0.5))
    if C < 4:
        ERROR(f"{chunk_ms} ms at {sample_rate} Hz is under 4 samples")
    return C


def recon_error_study(codec, corpus, chunk_ms: float, eps: float = 1e-12) -> ReconStudy:
    """Average (|X| - |X_hat|)^2 / |X|^2 over chunks and recordings.

    codec is anything with reconstruct(Waveform) -> Waveform; bins without
    energy in a chunk do not count towards that bin's average.
    """
    corpus = list(corpus)
    if not corpus:
        ERROR("reconstruction study needs a non-empty corpus")
    sr = getattr(codec, 'sample_rate', corpus[0].sample_rate)
    C = chunk_length(chunk_ms, sr)
    total = np.zeros(C // 2 + 1)
    counts = np.zeros(C // 2 + 1, dtype=np.int64)

    for w in corpus:
        w = resample(w, sr)
        x = w.samples
        xh = codec.reconstruct(w).samples[: len(x)]
        xh = np.pad(xh, (0, len(x) - len(xh)))
        n = len(x) // C
        if n == 0:
            continue
        X = np.abs(np.fft.rfft(x[: n * C].reshape(n, C), axis=1))
        Xh = np.abs(np.fft.rfft(xh[: n * C].reshape(n, C), axis=1))
        energetic = X**2 > eps
        ratio = (X - Xh) ** 2 / (X**2 + eps)
        total += np.where(energetic, ratio, 0.0).sum(axis=0)
        counts += energetic.sum(axis=0)

    if not counts.any():
        ERROR(f"no recording is longer than one {chunk_ms} ms chunk")
    E = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    logger.info(f"recon study: chunk {C} samples, mean error {E[counts > 0].mean():.4f}")
    return ReconStudy(E, np.fft.rfftfreq(C, 1.0 / sr), counts, C)
