"""Acoustic tokenizer: PCA frame transform plus residual vector quantizer.

A waveform is cut into windowed frames (column t starts at sample
round(t*hop), with hop = sample_rate/frame_rate), each frame is whitened
onto d principal axes and quantized by K residual codebooks. The K code
indices of a frame form one column of a K x L TokenGrid.
"""

__all__ = [
    'MASK',
    'FrameTransform',
    'CodebookSet',
    'TokenGrid',
    'Codec',
    'CodecConfig',
    'CodecFile',
    'train_codec',
    'tokenize',
    'detokenize',
    'residual_quantize',
]

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

from . import (
    ERROR,
    ConfigError,
    GeometryError,
    MaskedGridError,
    NumericalError,
    logger,
)
from .audio import Waveform, hann
from .base import Checkpoint, ReadWrite
from .func import substream

MASK = -1


def _round_div(a, b):
    """round(a/b) for non-negative integers, halves rounded up"""
    return (2 * a + b) // (2 * b)


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class FrameTransform:
    """Whitening PCA of windowed frames and its pseudo-inverse."""

    frame_len: int
    frame_rate: int  # columns per second
    sample_rate: int
    mean: np.ndarray  # (frame_len,)
    components: np.ndarray  # (d, frame_len), orthonormal rows
    scale: np.ndarray  # (d,)

    def __post_init__(self):
        d, n = np.shape(self.components)
        if n != self.frame_len or np.shape(self.mean) != (n,):
            ERROR("frame transform shapes disagree", GeometryError)
        if np.shape(self.scale) != (d,) or np.any(self.scale <= 0):
            ERROR("frame transform scale must be positive", GeometryError)
        if self.frame_rate <= 0:
            ERROR(f"bad frame rate {self.frame_rate}", ConfigError)
        if self.sample_rate / self.frame_rate > self.frame_len:
            ERROR("hop exceeds frame_len, frames would leave gaps", GeometryError)

    @property
    def d(self) -> int:
        return len(self.scale)

    @property
    def hop(self) -> float:
        return self.sample_rate / self.frame_rate

    @property
    def window(self) -> np.ndarray:
        # sine window, analysis x synthesis gives a Hann
        return np.sqrt(hann(self.frame_len))

    def num_columns(self, n_samples: int) -> int:
        return -(-int(n_samples) * self.frame_rate // self.sample_rate)

    def starts(self, L: int) -> np.ndarray:
        t = np.arange(L, dtype=np.int64)
        return _round_div(t * self.sample_rate, self.frame_rate)

    def length(self, L: int) -> int:
        return int(_round_div(L * self.sample_rate, self.frame_rate))

    def frames(self, x: np.ndarray) -> np.ndarray:
        """(L, frame_len) windowed frames, zero-padded at the end"""
        L = self.num_columns(len(x))
        starts = self.starts(L)
        padded = np.zeros(int(starts[-1]) + self.frame_len if L else 0)
        padded[: len(x)] = x
        idx = starts[:, None] + np.arange(self.frame_len)[None, :]
        return padded[idx] * self.window

    def analysis(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) @ self.components.T / self.scale

    def synthesis(self, features: np.ndarray) -> np.ndarray:
        return (features * self.scale) @ self.components + self.mean

    def overlap_add(self, frames: np.ndarray, floor: float = 0.1) -> np.ndarray:
        """Weighted overlap-add of analysis-domain frames, length round(L*hop)."""
        L = len(frames)
        starts = self.starts(L)
        n = int(starts[-1]) + self.frame_len if L else 0
        out = np.zeros(n)
        norm = np.zeros(n)
        w = self.window
        idx = starts[:, None] + np.arange(self.frame_len)[None, :]
        np.add.at(out, idx, frames * w)
        np.add.at(norm, idx, np.broadcast_to(w * w, frames.shape))
        out /= np.maximum(norm, floor)
        return out[: self.length(L)]


@dataclass(frozen=True)
class CodebookSet:
    vectors: np.ndarray  # (K, vocab, d)

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1:
            ERROR(f"codebooks must be K x vocab x d, got {v.shape}", GeometryError)
        if not np.all(np.isfinite(v)):
            ERROR("codebooks hold non-finite entries", NumericalError)
        v.setflags(write=False)
        object.__setattr__(self, 'vectors', v)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def vocab(self) -> int:
        return self.vectors.shape[1]

    @property
    def d(self) -> int:
        return self.vectors.shape[2]


@dataclass(frozen=True)
class TokenGrid:
    """K x L code indices; MASK (-1) marks positions to be predicted."""

    tokens: np.ndarray
    vocab: int
    sample_rate: int
    frame_rate: int = 60

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.int64)
        if t.ndim != 2 or t.shape[1] < 1 or t.shape[0] < 1:
            ERROR(f"token grid must be K x L with L >= 1, got {t.shape}")
        bad = (t != MASK) & ((t < 0) | (t >= self.vocab))
        if bad.any():
            ERROR(f"{bad.sum()} grid entries outside [0, {self.vocab})")
        t.setflags(write=False)
        object.__setattr__(self, 'tokens', t)

    def __repr__(self):
        return (
            f"<TokenGrid {self.K}x{self.L} at {hex(id(self))},"
            f" {self.num_masked} masked>"
        )

    @property
    def K(self) -> int:
        return self.tokens.shape[0]

    @property
    def L(self) -> int:
        return self.tokens.shape[1]

    @property
    def hop(self) -> float:
        return self.sample_rate / self.frame_rate

    @property
    def duration(self) -> float:
        return self.L / self.frame_rate

    @property
    def mask(self) -> np.ndarray:
        return self.tokens == MASK

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    def replace(self, tokens) -> 'TokenGrid':
        return TokenGrid(tokens, self.vocab, self.sample_rate, self.frame_rate)


# -----------------------------------------------


def _nearest(R: np.ndarray, C: np.ndarray, block: int = 4096):
    """Nearest codebook row per residual row, ties to the lowest index.

    Returns the indices and the squared distances.
    """
    cc = np.einsum('ij,ij->i', C, C)
    idx = np.empty(len(R), dtype=np.int64)
    dist = np.empty(len(R))
    for i in range(0, len(R), block):
        r = R[i : i + block]
        rr = np.einsum('ij,ij->i', r, r)
        d2 = rr[:, None] - 2.0 * r @ C.T + cc[None, :]
        j = np.argmin(d2, axis=1)
        exact = ((r - C[j]) ** 2).sum(axis=1)
        # code 0 is the zero vector in trained codebooks; never do worse
        worse = (exact > rr) & np.all(C[0] == 0)
        j[worse] = 0
        exact[worse] = rr[worse]
        idx[i : i + block] = j
        dist[i : i + block] = exact
    return idx, dist


def _quantize(F: np.ndarray, cb: CodebookSet):
    """RVQ of many features: codes (n, K), reconstructions, residual norms"""
    R = np.array(F, dtype=np.float64)
    codes = np.empty((len(R), cb.K), dtype=np.int64)
    norms = np.empty((len(R), cb.K + 1))
    norms[:, 0] = np.linalg.norm(R, axis=1)
    for k in range(cb.K):
        j, _ = _nearest(R, cb.vectors[k])
        codes[:, k] = j
        R -= cb.vectors[k][j]
        norms[:, k + 1] = np.linalg.norm(R, axis=1)
    return codes, F - R, norms


def residual_quantize(feature, cb: CodebookSet):
    """Stage k quantizes what stages < k left over. Returns (indices, recon)."""
    f = np.asarray(feature, dtype=np.float64).reshape(-1)
    if f.size != cb.d:
        ERROR(f"feature has {f.size} dims, codebooks {cb.d}", GeometryError)
    codes, recon, _ = _quantize(f[None, :], cb)
    return codes[0], recon[0]


# -----------------------------------------------


@dataclass
class CodecConfig:
    K: int = 14
    vocab: int = 1024
    d: int = 64
    frame_len: int = 512
    frame_rate: int = 60
    epochs: int = 10
    batch_size: int = 4096
    ema_decay: float = 0.99
    seed: int = 0

    def validate(self):
        if self.K < 1 or self.vocab < 2:
            ERROR("codec needs K >= 1 and vocab >= 2", ConfigError)
        if not 1 <= self.d <= self.frame_len:
            ERROR(f"codec d={self.d} outside [1, frame_len]", ConfigError)
        if self.epochs < 1 or self.batch_size < 1:
            ERROR("codec epochs and batch_size must be >= 1", ConfigError)
        if not 0.0 <= self.ema_decay < 1.0:
            ERROR("codec ema_decay must be in [0, 1)", ConfigError)


class Codec:
    """Trained tokenizer/detokenizer pair. Immutable once built."""

    def __init__(
        self, transform: FrameTransform, codebooks: CodebookSet, curve=None
    ):
        if transform.d != codebooks.d:
            ERROR(
                f"transform gives {transform.d}-dim features,"
                f" codebooks expect {codebooks.d}",
                GeometryError,
            )
        self.transform = transform
        self.codebooks = codebooks
        # per-stage, per-epoch training error; columns stage, epoch, error
        self.curve = curve if curve is not None else pd.DataFrame()

    def __repr__(self):
        return (
            f"<Codec at {hex(id(self))}: K={self.K} vocab={self.vocab}"
            f" d={self.transform.d} @ {self.sample_rate} Hz>"
        )

    @property
    def sample_rate(self) -> int:
        return self.transform.sample_rate

    @property
    def frame_rate(self) -> int:
        return self.transform.frame_rate

    @property
    def K(self) -> int:
        return self.codebooks.K

    @property
    def vocab(self) -> int:
        return self.codebooks.vocab

    def features(self, w: Waveform) -> np.ndarray:
        if w.sample_rate != self.sample_rate:
            ERROR(
                f"waveform at {w.sample_rate} Hz, codec at"
                f" {self.sample_rate} Hz: resample first"
            )
        if len(w) == 0:
            ERROR("cannot tokenize an empty waveform")
        return self.transform.analysis(self.transform.frames(w.samples))

    def tokenize(self, w: Waveform) -> TokenGrid:
        codes, _, _ = _quantize(self.features(w), self.codebooks)
        return TokenGrid(codes.T, self.vocab, self.sample_rate, self.frame_rate)

    def detokenize(self, g: TokenGrid) -> Waveform:
        if g.num_masked:
            ERROR(
                f"grid holds {g.num_masked} MASK entries, decode it first",
                MaskedGridError,
            )
        if g.K != self.K or g.vocab != self.vocab:
            ERROR(
                f"grid is {g.K} codebooks / vocab {g.vocab}, codec"
                f" {self.K} / {self.vocab}",
                GeometryError,
            )
        v = self.codebooks.vectors
        feats = v[np.arange(self.K)[:, None], g.tokens].sum(axis=0)
        frames = self.transform.synthesis(feats)
        return Waveform(self.transform.overlap_add(frames), self.sample_rate)

    def reconstruct(self, w: Waveform) -> Waveform:
        """tokenizer-only round trip, trimmed to the input length"""
        out = self.detokenize(self.tokenize(w))
        return Waveform(out.samples[: len(w)], out.sample_rate)

    # -------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        t = self.transform
        tensors = {
            'mean': t.mean,
            'components': t.components,
            'scale': t.scale,
            'codebooks': self.codebooks.vectors,
        }
        if len(self.curve):
            tensors['curve'] = self.curve[['stage', 'epoch', 'error']].values
        meta = {
            'frame_len': t.frame_len,
            'frame_rate': t.frame_rate,
            'sample_rate': t.sample_rate,
            'K': self.K,
            'vocab': self.vocab,
            'd': t.d,
        }
        return Checkpoint('codec', tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> 'Codec':
        m = ckpt.meta
        transform = FrameTransform(
            frame_len=int(m['frame_len']),
            frame_rate=int(m['frame_rate']),
            sample_rate=int(m['sample_rate']),
            mean=ckpt['mean'].astype(np.float64),
            components=ckpt['components'].astype(np.float64),
            scale=ckpt['scale'].astype(np.float64),
        )
        codebooks = CodebookSet(ckpt['codebooks'].astype(np.float64))
        curve = None
        if 'curve' in ckpt.tensors:
            curve = pd.DataFrame(
                ckpt['curve'].astype(np.float64),
                columns=['stage', 'epoch', 'error'],
            ).astype({'stage': int, 'epoch': int})
        return cls(transform, codebooks, curve)

    def save(self, path) -> Path:
        return self.to_checkpoint().save(path)

    @classmethod
    def load(cls, path) -> 'Codec':
        return cls.from_checkpoint(Checkpoint.load(path, kind='codec'))


class CodecFile(ReadWrite):
    """codec checkpoint directory"""

    @classmethod
    def read(cls, fpath, **kwargs):
        return Codec.load(fpath)

    @classmethod
    def write(cls, fpath, data: Codec, **kwargs):
        return data.save(fpath)


def tokenize(c: Codec, w: Waveform) -> TokenGrid:
    return c.tokenize(w)


def detokenize(c: Codec, g: TokenGrid) -> Waveform:
    return c.detokenize(g)


# -----------------------------------------------


def _fit_pca(X: np.ndarray, d: int):
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, bias=True)
    vals, vecs = linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:d]
    vals = np.clip(vals[order], 0.0, None)
    components = vecs[:, order].T
    tiny = 1e-12 * max(vals.max(initial=0.0), 1e-300)
    scale = np.where(vals > tiny, np.sqrt(vals), 1.0)
    return mean, components, scale


def _mse(R, C) -> float:
    return float(_nearest(R, C)[1].mean())


def _fit_stage(R: np.ndarray, cfg: CodecConfig, rng, stage: int):
    """EMA k-means on residuals R with code 0 pinned at the origin.

    An epoch whose full-corpus error rises is rolled back, so the
    returned per-epoch curve never increases.
    """
    n, d = R.shape
    C = np.zeros((cfg.vocab, d))
    C[1:] = R[rng.choice(n, cfg.vocab - 1, replace=False)]
    counts = np.ones(cfg.vocab)
    sums = C.copy()
    best = _mse(R, C)
    curve = []

    for epoch in range(cfg.epochs):
        state = (C.copy(), counts.copy(), sums.copy())
        used = np.zeros(cfg.vocab, dtype=bool)
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            r = R[order[i : i + cfg.batch_size]]
            j, _ = _nearest(r, C)
            used[j] = True
            bc = np.bincount(j, minlength=cfg.vocab).astype(np.float64)
            bs = np.zeros_like(sums)
            np.add.at(bs, j, r)
            counts = cfg.ema_decay * counts + (1 - cfg.ema_decay) * bc
            sums = cfg.ema_decay * sums + (1 - cfg.ema_decay) * bs
            C = sums / np.maximum(counts, 1e-12)[:, None]
            C[0] = 0.0

        dead = np.flatnonzero(~used)
        dead = dead[dead != 0]
        if len(dead):
            C[dead] = R[rng.choice(n, len(dead), replace=len(dead) > n)]
            sums[dead] = C[dead]
            counts[dead] = 1.0
            logger.debug(f"stage {stage} epoch {epoch}: reseeded {len(dead)} codes")

        err = _mse(R, C)
        if err > best:
            C, counts, sums = state
        else:
            best = err
        curve.append(best)
        logger.debug(f"stage {stage} epoch {epoch}: error {best:.6g}")
    return C, curve


def train_codec(corpus, cfg: CodecConfig = None) -> Codec:
    """Fit the frame transform and the K residual codebooks on a corpus."""
    cfg = CodecConfig() if cfg is None else cfg
    cfg.validate()
    corpus = list(corpus)
    if not corpus:
        ERROR("codec training corpus is empty")
    sr = corpus[0].sample_rate
    if any(w.sample_rate != sr for w in corpus):
        ERROR("codec training corpus mixes sample rates")

    probe = FrameTransform(
        cfg.frame_len,
        cfg.frame_rate,
        sr,
        np.zeros(cfg.frame_len),
        np.eye(1, cfg.frame_len),
        np.ones(1),
    )
    X = np.concatenate([probe.frames(w.samples) for w in corpus if len(w)])
    if len(X) < cfg.vocab:
        ERROR(
            f"corpus yields {len(X)} frames, need at least vocab={cfg.vocab}"
        )
    if cfg.d > len(X):
        ERROR(f"d={cfg.d} exceeds the {len(X)} training frames", ConfigError)
    if not np.all(np.isfinite(X)):
        ERROR("non-finite samples in codec training frames", NumericalError)

    mean, components, scale = _fit_pca(X, cfg.d)
    transform = FrameTransform(
        cfg.frame_len,
        cfg.frame_rate,
        sr,
        _f32(mean),
        _f32(components),
        _f32(scale),
    )
    F = transform.analysis(X)
    if not np.all(np.isfinite(F)):
        ERROR("PCA features are not finite", NumericalError)
    logger.info(
        f"codec: {len(X)} frames, d={cfg.d}, K={cfg.K}, vocab={cfg.vocab}"
    )

    R = F.copy()
    vectors, rows = [], []
    for k in range(cfg.K):
        C, curve = _fit_stage(R, cfg, substream(cfg.seed, 'codec', k), k)
        C = _f32(C)
        C[0] = 0.0
        j, _ = _nearest(R, C)
        R -= C[j]
        vectors.append(C)
        rows += [(k, e, err) for e, err in enumerate(curve)]
        logger.debug(
            f"stage {k}: mean squared residual {np.mean((R ** 2).sum(1)):.6g}"
        )

    curve = pd.DataFrame(rows, columns=['stage', 'epoch', 'error'])
    codec = Codec(transform, CodebookSet(np.stack(vectors)), curve)
    rel = np.sqrt((R**2).sum() / max((F**2).sum(), 1e-300))
    logger.info(f"codec trained, relative feature residual {rel:.4f}")
    return codec
