"""Prompted iterative decoding of token grids ("translation")."""

__all__ = [
    'PromptSettings',
    'load_prompt_table',
    'prompt_settings',
    'build_prompt_mask',
    'filter_logits',
    'decode_step',
    'iterative_decode',
    'translate_tokens',
    'translate',
]

import json
import math
from dataclasses import dataclass, fields, replace
from functools import lru_cache

import numpy as np
from scipy import special

from . import ERROR, ConfigError, DataError, GeometryError, logger, rootdir
from .audio import Waveform, detect_onsets, prepare
from .codec import MASK, Codec, TokenGrid
from .func import substream
from .matm import forward


@dataclass(frozen=True)
class PromptSettings:
    periodic_prompt: int = 12  # columns, 0 disables
    onset_mask_width: int = 21  # columns kept around each onset
    steps: int = 50
    typical_mass: float = 0.102
    sample_cutoff: float = 0.17
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            ERROR(f"steps must be >= 1, got {self.steps}", ConfigError)
        for name in ('typical_mass', 'sample_cutoff'):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                ERROR(f"{name} must be in (0, 1], got {v}", ConfigError)
        if self.periodic_prompt < 0 or self.onset_mask_width < 0:
            ERROR("prompt widths must be >= 0", ConfigError)
        if not self.temperature > 0:
            ERROR("temperature must be > 0", ConfigError)


def _key(source: str) -> str:
    return ''.join(c for c in str(source).lower() if c not in ' ._-')


@lru_cache()
def load_prompt_table(path=None) -> dict:
    """source name -> PromptSettings, from the packaged table by default"""
    path = rootdir / 'data' / 'prompt_settings.json' if path is None else path
    try:
        with open(path) as fh:
            table = json.load(fh)
        columns = table['columns']
        rows = table['sources']
    except (OSError, json.JSONDecodeError, KeyError) as e:
        ERROR(f"cannot read prompt table '{path}': {e}", ConfigError)
    return {
        name: PromptSettings(**dict(zip(columns, values)))
        for name, values in rows.items()
    }


def prompt_settings(source: str = 'Codas', path=None, **overrides):
    """Look up a source row, e.g. 'walrus' or 'C. Dolphin'."""
    table = load_prompt_table(path)
    found = {_key(name): s for name, s in table.items()}
    s = found.get(_key(source))
    if s is None:
        ERROR(
            f"no prompt settings for '{source}', choose from {list(table)}",
            ConfigError,
        )
    known = {f.name for f in fields(PromptSettings)}
    unknown = set(overrides) - known
    if unknown:
        ERROR(f"unknown prompt settings {sorted(unknown)}", ConfigError)
    return replace(s, **overrides)


# -----------------------------------------------


def build_prompt_mask(L: int, onsets, s: PromptSettings) -> np.ndarray:
    """Columns to keep: every periodic_prompt-th plus a band around onsets."""
    t = np.arange(L)
    keep = np.zeros(L, dtype=bool)
    if s.periodic_prompt > 0:
        keep |= t % s.periodic_prompt == 0
    onsets = np.asarray(onsets, dtype=np.int64).reshape(-1)
    if np.any((onsets < 0) | (onsets >= L)):
        ERROR(f"onset columns must lie in [0, {L})")
    if s.onset_mask_width > 0:
        half = s.onset_mask_width / 2
        for o in onsets:
            keep |= np.abs(t - o) <= half
    return np.flatnonzero(keep)


def filter_logits(probs, typical_mass: float, sample_cutoff: float, tol=1e-12):
    """Locally typical filtering then nucleus truncation, renormalized.

    Works on the last axis. Tokens enter in order of typicality
    |-log q - H(q)| (ties by index) until their mass reaches typical_mass;
    of those, the most probable are kept up to sample_cutoff of the
    renormalized mass.
    """
    q = np.array(probs, dtype=np.float64)
    total = q.sum(axis=-1, keepdims=True)
    if np.any(q < 0) or not np.all(np.isfinite(q)) or np.any(total <= 0):
        ERROR("filter_logits needs a non-negative, non-zero distribution")
    q = q / total

    with np.errstate(divide='ignore'):
        surprisal = -np.log(q)
    entropy = special.entr(q).sum(axis=-1, keepdims=True)
    order = np.argsort(np.abs(surprisal - entropy), axis=-1, kind='stable')
    qs = np.take_along_axis(q, order, axis=-1)
    before = np.cumsum(qs, axis=-1) - qs
    keep = np.zeros(q.shape, dtype=bool)
    np.put_along_axis(keep, order, before < typical_mass - tol, axis=-1)
    q = np.where(keep, q, 0.0)
    q /= q.sum(axis=-1, keepdims=True)

    order = np.argsort(-q, axis=-1, kind='stable')
    qs = np.take_along_axis(q, order, axis=-1)
    before = np.cumsum(qs, axis=-1) - qs
    keep = np.zeros(q.shape, dtype=bool)
    np.put_along_axis(keep, order, (before < sample_cutoff - tol) & (qs > 0), axis=-1)
    q = np.where(keep, q, 0.0)
    return q / q.sum(axis=-1, keepdims=True)


def _remaining(M0: int, step: int, steps: int) -> int:
    """masks left after a step on the cosine schedule"""
    if step >= steps - 1:
        return 0
    return math.ceil(round(M0 * math.cos(math.pi / 2 * (step + 1) / steps), 9))


def decode_step(model, g: TokenGrid, s: PromptSettings, step: int, rng, M0=None):
    """One parallel sampling pass. Returns (grid, confidences).

    Confidences are NaN at positions that were not masked on entry.
    """
    mask = g.mask
    M = int(mask.sum())
    if M == 0:
        ERROR("decode_step needs at least one MASK entry")
    M0 = M if M0 is None else M0
    K, L = g.tokens.shape

    # draws cover the whole grid, so they do not depend on the mask
    u = rng.random((K, L))
    gumbel = rng.gumbel(size=(K, L))

    logits = forward(model, g)[mask]
    probs = special.softmax(logits / s.temperature, axis=-1)
    probs = filter_logits(probs, s.typical_mass, s.sample_cutoff)
    cdf = np.cumsum(probs, axis=-1)
    pick = (cdf <= u[mask][:, None] * cdf[:, -1:]).sum(axis=-1)
    pick = np.minimum(pick, probs.shape[-1] - 1)
    logp = np.log(np.take_along_axis(probs, pick[:, None], axis=-1)[:, 0])

    anneal = s.temperature * (1.0 - (step + 1) / s.steps)
    conf = np.full((K, L), np.nan)
    conf[mask] = logp + anneal * gumbel[mask]

    n_left = min(_remaining(M0, step, s.steps), M - 1)
    kk, tt = np.nonzero(mask)  # row-major: sorted by codebook, then column
    rank = np.lexsort((kk, tt, -conf[mask]))
    commit = rank[: M - n_left]

    tokens = g.tokens.copy()
    tokens[kk[commit], tt[commit]] = pick[commit]
    return g.replace(tokens), conf


def iterative_decode(model, g: TokenGrid, s: PromptSettings) -> TokenGrid:
    """Fill every MASK of g within s.steps passes. Kept entries never change."""
    M0 = g.num_masked
    for step in range(s.steps):
        if g.num_masked == 0:
            break
        rng = substream(s.seed, 'decode', step)
        g, _ = decode_step(model, g, s, step, rng, M0)
        logger.debug(f"decode step {step + 1}/{s.steps}: {g.num_masked} masked")
    return g


# -----------------------------------------------


def translate_tokens(codec: Codec, model, w: Waveform, s: PromptSettings, context=None):
    """Translation on the token level.

    Returns (input grid, output grid, kept columns) without any context
    prefix.
    """
    K = model.cfg.K
    if K != codec.K:
        ERROR(f"model expects {K} codebooks, codec makes {codec.K}", GeometryError)

    w = prepare(w, codec.sample_rate)
    grid = codec.tokenize(w)
    onsets = np.asarray(detect_onsets(w), dtype=np.int64)
    cols = onsets * codec.frame_rate // codec.sample_rate
    cols = np.unique(np.minimum(cols, grid.L - 1))
    keep = build_prompt_mask(grid.L, cols, s)
    logger.debug(f"{len(cols)} onsets, keeping {len(keep)}/{grid.L} columns")

    tokens = np.full_like(grid.tokens, MASK)
    tokens[:, keep] = grid.tokens[:, keep]
    n_ctx = 0
    if context is not None:
        prefix = codec.tokenize(prepare(context, codec.sample_rate)).tokens
        n_ctx = prefix.shape[1]
        tokens = np.concatenate([prefix, tokens], axis=1)

    out = iterative_decode(model, grid.replace(tokens), s)
    out = out.replace(out.tokens[:, n_ctx:])
    return grid, out, keep


def translate(codec: Codec, model, w: Waveform, s: PromptSettings, context=None) -> Waveform:
    """resample, normalize, tokenize, prompt, decode, detokenize"""
    if len(w) == 0:
        ERROR("cannot translate an empty waveform", DataError)
    _, out, _ = translate_tokens(codec, model, w, s, context)
    return codec.detokenize(out)
