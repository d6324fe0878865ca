"""Waveform embedding models used by FAD, calibration and the probes."""

__all__ = [
    'EmbeddingModel',
    'matm_pooled',
    'token_histogram',
    'random_projection',
    'onset_features',
    'builtin_embeddings',
]

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import librosa
import numpy as np

from .. import ERROR, ConfigError, GeometryError
from ..audio import Waveform, detect_onsets, prepare, stft
from ..func import substream
from ..matm import extract_embedding


@dataclass(frozen=True)
class EmbeddingModel:
    name: str
    embed: Callable
    dim: int

    def __call__(self, w: Waveform) -> np.ndarray:
        v = np.asarray(self.embed(w), dtype=np.float64).reshape(-1)
        if v.size != self.dim:
            ERROR(
                f"embedding '{self.name}' gave {v.size} values, expected {self.dim}",
                GeometryError,
            )
        return v

    def embed_many(self, waves, workers: int = 1) -> np.ndarray:
        """(n, dim) in input order"""
        waves = list(waves)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(self, waves))
        else:
            rows = [self(w) for w in waves]
        return np.stack(rows) if rows else np.zeros((0, self.dim))


def matm_pooled(codec, model, layer: int = None, name: str = 'matm') -> EmbeddingModel:
    """time-averaged hidden states of the token model"""

    def embed(w):
        g = codec.tokenize(prepare(w, codec.sample_rate))
        return extract_embedding(model, g, layer)

    return EmbeddingModel(name, embed, model.cfg.model_dim)


def token_histogram(codec, dim: int = 2048) -> EmbeddingModel:
    """Token frequencies per codebook, hashed into dim buckets."""
    K, vocab = codec.K, codec.vocab
    ids = np.arange(K)[:, None] * vocab + np.arange(vocab)[None, :]
    bucket = (ids.astype(np.uint64) * np.uint64(2654435761) % np.uint64(2**32)) % np.uint64(dim)
    bucket = bucket.astype(np.int64)

    def embed(w):
        g = codec.tokenize(prepare(w, codec.sample_rate))
        b = bucket[np.arange(K)[:, None], g.tokens]
        return np.bincount(b.ravel(), minlength=dim) / g.tokens.size

    return EmbeddingModel('tokenizer', embed, dim)


def random_projection(
    sample_rate: int = 16000,
    n_mels: int = 64,
    dim: int = 128,
    n_fft: int = 512,
    hop: int = 256,
    seed: int = 0,
) -> EmbeddingModel:
    """Fixed Gaussian projection of log-mel frames, averaged over time."""
    fb = librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels)
    W = substream(seed, 'random-projection').standard_normal((dim, n_mels))
    W /= np.sqrt(n_mels)

    def embed(w):
        w = prepare(w, sample_rate)
        x = w.samples
        if len(x) < n_fft:
            x = np.pad(x, (0, n_fft - len(x)))
        S = stft(Waveform(x, sample_rate), n_fft, hop).frames
        logmel = np.log(fb @ np.abs(S) ** 2 + 1e-10)
        return (W @ logmel).mean(axis=1)

    return EmbeddingModel('random', embed, dim)


def onset_features(sample_rate: int = 16000, bins: int = 10) -> EmbeddingModel:
    """Onset count, inter-onset-interval statistics and an IOI histogram."""
    edges = np.geomspace(0.01, 2.0, bins + 1)

    def embed(w):
        w = prepare(w, sample_rate)
        onsets = np.asarray(detect_onsets(w), dtype=np.float64)
        ioi = np.diff(onsets) / sample_rate
        stats = np.zeros(6)
        stats[0] = len(onsets)
        if len(ioi):
            stats[1:] = [ioi.mean(), ioi.std(), ioi.min(), ioi.max(), np.median(ioi)]
        hist = np.histogram(np.clip(ioi, edges[0], edges[-1]), bins=edges)[0]
        return np.concatenate([stats, hist / max(len(ioi), 1)])

    return EmbeddingModel('onset', embed, 6 + bins)


def builtin_embeddings(codec=None, model=None, names=None, seed: int = 0) -> list:
    """The matm, tokenizer, random and onset models, by name."""
    names = ['matm', 'tokenizer', 'random', 'onset'] if names is None else names
    sr = codec.sample_rate if codec is not None else 16000
    out = []
    for name in names:
        if name == 'matm':
            if codec is None or model is None:
                ERROR("the matm embedding needs a codec and a model", ConfigError)
            out.append(matm_pooled(codec, model))
        elif name == 'tokenizer':
            if codec is None:
                ERROR("the tokenizer embedding needs a codec", ConfigError)
            out.append(token_histogram(codec))
        elif name == 'random':
            out.append(random_projection(sr, seed=seed))
        elif name == 'onset':
            out.append(onset_features(sr))
        else:
            ERROR(f"unknown embedding '{name}'", ConfigError)
    return out
