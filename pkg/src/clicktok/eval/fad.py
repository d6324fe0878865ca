__all__ = [
    'GaussianStats',
    'FadReport',
    'fit_gaussian',
    'frechet_distance',
    'normalize_fad',
    'natural_baseline',
    'fad_report',
    'calibrate_embeddings',
]

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv
from scipy import linalg

from .. import ERROR, WARNING, DataError, GeometryError, NumericalError, logger


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            ERROR(
                f"covariance {cov.shape} does not match mean {mu.shape}",
                GeometryError,
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            ERROR("Gaussian statistics are not finite", NumericalError)
        scale = max(1.0, np.abs(cov).max(initial=0.0))
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9 * scale:
            ERROR("covariance is not symmetric", NumericalError)
        object.__setattr__(self, 'mean', mu)
        object.__setattr__(self, 'covariance', cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(vectors, unbiased: bool = True) -> GaussianStats:
    """Sample mean and (n-1) covariance, symmetrized."""
    try:
        X = np.asarray(vectors, dtype=np.float64)
    except ValueError:
        ERROR("embedding vectors differ in dimension", GeometryError)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        ERROR(f"expected n x dim vectors, got shape {X.shape}", GeometryError)
    if len(X) < 2:
        ERROR(f"need at least 2 vectors for a Gaussian fit, got {len(X)}")
    if not np.all(np.isfinite(X)):
        ERROR("embedding vectors are not finite", NumericalError)
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1 if unbiased else 0))
    return GaussianStats(X.mean(axis=0), (cov + cov.T) / 2, len(X))


def _eigvals_psd(M: np.ndarray, what: str) -> tuple:
    vals, vecs = linalg.eigh((M + M.T) / 2)
    tol = 1e-6 * max(1.0, np.abs(vals).max(initial=0.0))
    if vals.size and vals.min() < -tol:
        ERROR(
            f"{what} has eigenvalue {vals.min():.3g} below -{tol:.1g}",
            NumericalError,
        )
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2)

    The trace of the square root comes from the eigenvalues of the
    symmetric S_a^1/2 S_b S_a^1/2.
    """
    if a.dim != b.dim:
        ERROR(f"dimensions differ: {a.dim} vs {b.dim}", GeometryError)
    vals, vecs = _eigvals_psd(a.covariance, 'covariance')
    root_a = (vecs * np.sqrt(vals)) @ vecs.T
    inner, _ = _eigvals_psd(root_a @ b.covariance @ root_a, 'covariance product')
    tr_root = np.sqrt(inner).sum()

    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * tr_root
    if not np.isfinite(d):
        ERROR("Frechet distance is not finite", NumericalError)
    return max(float(d), 0.0)


def normalize_fad(raw: dict) -> tuple:
    """Divide by the largest distance. Returns (normalized, degenerate)."""
    if not raw:
        ERROR("normalize_fad needs at least one distance")
    top = max(raw.values())
    if top <= 0:
        WARNING("all distances are zero, normalization is degenerate")
        return {k: 0.0 for k in raw}, True
    return {k: v / top for k, v in raw.items()}, False


def natural_baseline(vectors, rng, unbiased: bool = True) -> float:
    """distance between two disjoint random halves of one embedding set"""
    X = np.asarray(vectors, dtype=np.float64)
    if len(X) < 4:
        ERROR(f"baseline needs at least 4 vectors, got {len(X)}")
    idx = rng.permutation(len(X))
    half = len(X) // 2
    return frechet_distance(
        fit_gaussian(X[idx[:half]], unbiased),
        fit_gaussian(X[idx[half:]], unbiased),
    )


# -----------------------------------------------


@dataclass
class FadReport:
    raw: dict  # (set_a, set_b) -> distance
    baseline: float = None
    normalized: dict = field(init=False)
    degenerate: bool = field(init=False)

    schema = pa.schema(
        [
            ('set_a', pa.string()),
            ('set_b', pa.string()),
            ('fad', pa.float64()),
            ('normalized', pa.float64()),
        ]
    )

    def __post_init__(self):
        self.normalized, self.degenerate = normalize_fad(self.raw)

    def __repr__(self):
        return f"<FadReport at {hex(id(self))}, {len(self.raw)} pairs>"

    def distance(self, a: str, b: str) -> float:
        if (a, b) in self.raw:
            return self.raw[(a, b)]
        return self.raw[(b, a)]

    @property
    def normalized_baseline(self):
        if self.baseline is None or self.degenerate:
            return None
        return self.baseline / max(self.raw.values())

    @property
    def indistinguishable(self) -> list:
        """pairs closer than two halves of the natural set"""
        nb = self.normalized_baseline
        if nb is None:
            return []
        return [k for k, v in self.normalized.items() if v < nb]

    def to_table(self) -> pa.Table:
        keys = list(self.raw)
        return pa.table(
            {
                'set_a': [a for a, _ in keys],
                'set_b': [b for _, b in keys],
                'fad': [float(self.raw[k]) for k in keys],
                'normalized': [float(self.normalized[k]) for k in keys],
            },
            schema=self.schema,
        )

    def to_dict(self) -> dict:
        return {
            'pairs': [
                {'set_a': a, 'set_b': b, 'fad': v, 'normalized': self.normalized[(a, b)]}
                for (a, b), v in self.raw.items()
            ],
            'baseline': self.baseline,
            'normalized_baseline': self.normalized_baseline,
            'indistinguishable': [list(k) for k in self.indistinguishable],
            'degenerate': self.degenerate,
        }

    def save(self, out_dir, stem: str = 'fad') -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        pyarrow.csv.write_csv(self.to_table(), out_dir / f"{stem}.csv")
        with open(out_dir / f"{stem}.json", 'w') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return out_dir / f"{stem}.csv"


def fad_report(
    sets: dict, reference: str = None, baseline=None, unbiased: bool = True
) -> FadReport:
    """Distances between named embedding sets.

    With a reference set every other set is compared against it, otherwise
    all pairs are.
    """
    stats = {name: fit_gaussian(v, unbiased) for name, v in sets.items()}
    if reference is not None:
        if reference not in stats:
            ERROR(f"reference set '{reference}' not among {list(stats)}")
        pairs = [(reference, s) for s in stats if s != reference]
        if not pairs:
            pairs = [(reference, reference)]
    else:
        pairs = list(combinations(stats, 2)) or [(s, s) for s in stats]
    raw = {(a, b): frechet_distance(stats[a], stats[b]) for a, b in pairs}
    for (a, b), v in raw.items():
        logger.info(f"FAD {a} vs {b}: {v:.6g}")
    return FadReport(raw, baseline)


def calibrate_embeddings(codas, denoised, models, workers: int = 1) -> pd.DataFrame:
    """Noise-versus-structure weight of each embedding model.

    d1 compares codas with their denoised versions, d2 compares codas with
    the removed noise x - x_hat. Rows come sorted by descending d2/d1.
    """
    codas, denoised = list(codas), list(denoised)
    if len(codas) != len(denoised):
        ERROR(f"{len(codas)} codas but {len(denoised)} denoised versions")
    noise = []
    for x, xh in zip(codas, denoised):
        if len(x) != len(xh) or x.sample_rate != xh.sample_rate:
            ERROR("coda and denoised version differ in length or rate")
        noise.append(type(x)(x.samples - xh.samples, x.sample_rate))

    rows = []
    for m in models:
        E = m.embed_many(codas, workers)
        d1 = frechet_distance(fit_gaussian(E), fit_gaussian(m.embed_many(denoised, workers)))
        d2 = frechet_distance(fit_gaussian(E), fit_gaussian(m.embed_many(noise, workers)))
        infinite = d1 == 0
        if infinite:
            WARNING(f"'{m.name}': codas and denoised codas coincide, ratio is infinite")
        ratio = np.inf if infinite else d2 / d1
        logger.info(f"calibration '{m.name}': d1={d1:.6g} d2={d2:.6g} ratio={ratio:.4g}")
        rows.append({'model': m.name, 'd1': d1, 'd2': d2, 'ratio': ratio, 'infinite': infinite})

    df = pd.DataFrame(rows, columns=['model', 'd1', 'd2', 'ratio', 'infinite'])
    return df.sort_values('ratio', ascending=False, kind='stable').reset_index(drop=True)
