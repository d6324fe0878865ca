__all__ = ['RatingsMatrix', 'RatingsFile', 'fleiss_kappa']

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .. import ERROR, DataError
from ..base import ReadOnly


@dataclass(frozen=True)
class RatingsMatrix:
    """How many raters put each item (row) in each category (column)."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.size == 0:
            ERROR(f"ratings must be items x categories, got shape {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                ERROR("rating counts must be whole numbers")
            c = c.astype(np.int64)
        if np.any(c < 0):
            ERROR("rating counts must be >= 0")
        sums = c.sum(axis=1)
        if np.any(sums != sums[0]):
            ERROR(f"items were rated by different numbers of raters: {np.unique(sums)}")
        if sums[0] < 2:
            ERROR(f"need at least 2 raters per item, got {sums[0]}")
        object.__setattr__(self, 'counts', c)

    @property
    def raters(self) -> int:
        return int(self.counts[0].sum())

    @classmethod
    def from_labels(cls, ratings: pd.DataFrame) -> 'RatingsMatrix':
        """items x raters table of category labels"""
        long = ratings.stack()
        table = pd.crosstab(long.index.get_level_values(0), long.values)
        return cls(table.to_numpy())


class RatingsFile(ReadOnly):
    """CSV of per-item category counts; non-numeric columns are ignored"""

    @classmethod
    def read(cls, fpath, **kwargs):
        try:
            df = pd.read_csv(fpath)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            ERROR(f"cannot read ratings '{fpath}': {e}", DataError)
        return RatingsMatrix(df.select_dtypes('number').to_numpy())


def fleiss_kappa(r: RatingsMatrix) -> float:
    """(P - Pe) / (1 - Pe); 1 when every rating falls in one category"""
    c = r.counts.astype(np.float64)
    N, n = len(c), r.raters
    p = c.sum(axis=0) / (N * n)
    P = ((c**2).sum(axis=1) - n) / (n * (n - 1))
    P_bar, Pe = P.mean(), (p**2).sum()
    if np.isclose(Pe, 1.0, rtol=0, atol=1e-12):
        return 1.0
    return float((P_bar - Pe) / (1 - Pe))
