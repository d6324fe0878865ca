__all__ = ['ProbeConfig', 'ProbeResult', 'train_probe', 'stratified_split']

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import pyarrow as pa
import torch
import torch.nn.functional as F
from torch import nn

from .. import ERROR, WARNING, ConfigError, logger
from ..func import name_seed, substream


@dataclass
class ProbeConfig:
    hidden: int = 128
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 10
    split: float = 0.8
    seeds: tuple = (0, 1, 2)  # repeats, each drawn from the run seed
    selection: str = 'validation'  # or 'test', which peeks at the test set
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if not 0.0 < self.split < 1.0:
            ERROR(f"probe split must be in (0, 1), got {self.split}", ConfigError)
        if len(self.seeds) < 1:
            ERROR("probe needs at least one seed", ConfigError)
        if min(self.seeds) < 0:
            ERROR(f"probe seeds must be >= 0, got {tuple(self.seeds)}", ConfigError)
        if self.selection not in ('validation', 'test'):
            ERROR(f"unknown probe selection '{self.selection}'", ConfigError)
        if min(self.hidden, self.batch, self.epochs) < 1 or not self.lr > 0:
            ERROR("probe sizes and learning rate must be positive", ConfigError)
        return self


@dataclass
class ProbeResult:
    accuracies: list  # one per seed
    majority: float
    classes: list
    best_epochs: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def stderr(self) -> float:
        a = np.asarray(self.accuracies)
        return float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0

    def __repr__(self):
        return (
            f"<ProbeResult {self.mean:.3f} ± {self.stderr:.3f}"
            f" (majority {self.majority:.3f})>"
        )

    def to_table(self, **columns) -> pa.Table:
        """one row per seed, extra constant columns appended"""
        n = len(self.accuracies)
        data = {
            'seed_index': pa.array(range(n), pa.int64()),
            'accuracy': pa.array(self.accuracies, pa.float64()),
            'best_epoch': pa.array(self.best_epochs or [None] * n, pa.int64()),
            'majority': pa.array([self.majority] * n, pa.float64()),
        }
        for k, v in columns.items():
            data[k] = pa.array([v] * n)
        return pa.table(data)


def stratified_split(codes: np.ndarray, fraction: float, rng) -> tuple:
    """(first, second) index arrays, fraction of each class in first"""
    first, second = [], []
    for c in np.unique(codes):
        idx = np.flatnonzero(codes == c)
        rng.shuffle(idx)
        n = int(round(fraction * len(idx)))
        n = min(max(n, 1), len(idx) - 1) if len(idx) > 1 else len(idx)
        first.append(idx[:n])
        second.append(idx[n:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def _accuracy(model, X, y) -> float:
    if len(y) == 0:
        return float('nan')
    with torch.no_grad():
        return float((model(X).argmax(dim=1) == y).float().mean())


def _run(X, codes, n_classes, pc: ProbeConfig, seed: int) -> tuple:
    split_rng = substream(pc.seed, 'probe-split', seed)
    train, test = stratified_split(codes, pc.split, split_rng)
    val = np.array([], dtype=np.int64)
    if pc.selection == 'validation':
        keep, val = stratified_split(codes[train], 1.0 - pc.val_fraction, split_rng)
        train, val = train[keep], train[val]

    mu = X[train].mean(axis=0)
    sd = X[train].std(axis=0)
    sd[sd == 0] = 1.0
    Z = torch.from_numpy(((X - mu) / sd).astype(np.float32))
    y = torch.from_numpy(codes.astype(np.int64))

    torch.manual_seed(name_seed(f"{pc.seed}/{seed}/probe"))
    model = nn.Sequential(
        nn.Linear(X.shape[1], pc.hidden), nn.ReLU(), nn.Linear(pc.hidden, n_classes)
    )
    opt = torch.optim.AdamW(model.parameters(), lr=pc.lr)
    rng = substream(pc.seed, 'probe-batches', seed)

    best, best_epoch, best_score = 0.0, 0, -1.0
    for epoch in range(pc.epochs):
        model.train()
        order = train[rng.permutation(len(train))]
        for i in range(0, len(order), pc.batch):
            b = torch.from_numpy(order[i : i + pc.batch])
            loss = F.cross_entropy(model(Z[b]), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        test_acc = _accuracy(model, Z[test], y[test])
        score = test_acc if pc.selection == 'test' else _accuracy(model, Z[val], y[val])
        if score > best_score or np.isnan(score):
            best, best_epoch, best_score = test_acc, epoch + 1, score
        logger.debug(f"probe seed {seed} epoch {epoch + 1}: test {test_acc:.3f}")
    return best, best_epoch


def train_probe(embeddings, labels, pc: ProbeConfig = None) -> ProbeResult:
    """Two-layer ReLU probe, best-epoch test accuracy for each seed."""
    pc = (ProbeConfig() if pc is None else pc).validate()
    X = np.asarray(embeddings, dtype=np.float64)
    labels = pd.Categorical(list(labels))
    if X.ndim != 2 or len(X) != len(labels):
        ERROR(f"{len(labels)} labels for embeddings of shape {X.shape}")
    counts = pd.Series(labels).value_counts()
    if len(counts) < 2:
        ERROR(f"probe needs >= 2 classes, got {list(counts.index)}")
    if counts.min() < 2:
        ERROR(f"class '{counts.idxmin()}' has {counts.min()} sample, cannot stratify")
    if counts.min() < 10:
        WARNING(f"class '{counts.idxmin()}' has only {counts.min()} samples")

    codes = np.asarray(labels.codes)
    accs, epochs = [], []
    for seed in pc.seeds:
        acc, epoch = _run(X, codes, len(labels.categories), pc, seed)
        accs.append(acc)
        epochs.append(epoch)
    result = ProbeResult(
        accs,
        float(counts.max() / counts.sum()),
        [str(c) for c in labels.categories],
        epochs,
    )
    logger.info(f"probe: {result.mean:.3f} ± {result.stderr:.3f}, majority {result.majority:.3f}")
    return result
