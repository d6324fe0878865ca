"""Bidirectional masked acoustic token model with low-rank adapters."""

__all__ = [
    'MatmConfig',
    'TrainConfig',
    'LoraConfig',
    'Matm',
    'LoraAdapter',
    'LoraView',
    'Trainer',
    'MatmFile',
    'LoraFile',
    'mask_random_columns',
    'masked_cross_entropy',
    'forward',
    'train_step',
    'eval_loss',
    'apply_lora',
    'merge_lora',
    'finetune',
    'extract_embedding',
]

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from . import ERROR, WARNING, ConfigError, DataError, GeometryError, logger
from .base import Checkpoint, ReadWrite
from .codec import MASK, TokenGrid
from .func import name_seed, substream


@dataclass
class MatmConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ff_dim: int = 512
    max_len: int = 600
    vocab: int = 1024
    K: int = 14
    dropout: float = 0.1

    def validate(self):
        if self.model_dim % self.heads:
            ERROR(
                f"model_dim {self.model_dim} not divisible by"
                f" {self.heads} heads",
                ConfigError,
            )
        if min(self.layers, self.ff_dim, self.max_len, self.K) < 1:
            ERROR("matm sizes must all be >= 1", ConfigError)
        if self.vocab < 2:
            ERROR("matm vocab must be >= 2", ConfigError)
        if not 0.0 <= self.dropout < 1.0:
            ERROR("matm dropout must be in [0, 1)", ConfigError)
        return self


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 6
    grad_clip_norm: float = 1.0
    iterations: int = 1000
    mask_schedule: str = 'cosine'  # or 'uniform'
    seed: int = 0
    log_every: int = 50

    def validate(self):
        if not self.lr > 0:
            ERROR(f"learning rate must be > 0, got {self.lr}", ConfigError)
        if self.batch_size < 1:
            ERROR("batch_size must be >= 1", ConfigError)
        if self.mask_schedule not in ('cosine', 'uniform'):
            ERROR(f"unknown mask schedule '{self.mask_schedule}'", ConfigError)
        return self

    def draw_mask_rate(self, rng) -> float:
        """mask rate for one grid"""
        u = rng.uniform()
        if self.mask_schedule == 'cosine':
            return math.cos(math.pi / 2 * u)
        return 1.0 - u


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple = ('q', 'v')
    seed: int = 0


# -----------------------------------------------


class Attention(nn.Module):
    def __init__(self, cfg: MatmConfig):
        super().__init__()
        self.heads = cfg.heads
        self.q = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.k = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.v = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.o = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, delta=None):
        B, L, D = x.shape
        h = self.heads

        def project(name):
            y = getattr(self, name)(x)
            if delta is not None:
                y = y + delta(name, x)
            return y.view(B, L, h, D // h).transpose(1, 2)

        q, k, v = project('q'), project('k'), project('v')
        # no causal mask
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        att = self.drop(att.softmax(dim=-1))
        y = (att @ v).transpose(1, 2).reshape(B, L, D)
        y = self.o(y) if delta is None else self.o(y) + delta('o', y)
        return y


class Block(nn.Module):
    """pre-norm transformer block"""

    def __init__(self, cfg: MatmConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.attn = Attention(cfg)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.ff = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.ff_dim),
            nn.GELU(),
            nn.Linear(cfg.ff_dim, cfg.model_dim),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, delta=None):
        x = x + self.drop(self.attn(self.norm1(x), delta))
        return x + self.drop(self.ff(self.norm2(x)))


class Matm(nn.Module):
    """Token grids (B, K, L) with MASK entries -> logits (B, K, L, vocab)."""

    def __init__(self, cfg: MatmConfig = None):
        super().__init__()
        self.cfg = (MatmConfig() if cfg is None else cfg).validate()
        c = self.cfg
        # row `vocab` of each table is the MASK embedding
        self.embed = nn.ModuleList(
            [nn.Embedding(c.vocab + 1, c.model_dim) for _ in range(c.K)]
        )
        self.pos = nn.Parameter(torch.zeros(c.max_len, c.model_dim))
        self.drop = nn.Dropout(c.dropout)
        self.blocks = nn.ModuleList([Block(c) for _ in range(c.layers)])
        self.norm = nn.LayerNorm(c.model_dim)
        self.heads = nn.ModuleList(
            [nn.Linear(c.model_dim, c.vocab) for _ in range(c.K)]
        )
        self.reset_parameters()

    def reset_parameters(self):
        for e in self.embed:
            nn.init.normal_(e.weight, std=0.02)
        nn.init.normal_(self.pos, std=0.02)
        for h in self.heads:
            nn.init.normal_(h.weight, std=0.02)
            nn.init.zeros_(h.bias)

    def __repr__(self):
        c = self.cfg
        return (
            f"<Matm at {hex(id(self))}: {c.layers} layers, dim {c.model_dim},"
            f" K={c.K}, vocab={c.vocab}>"
        )

    def _check(self, tokens: torch.Tensor):
        c = self.cfg
        if tokens.dim() != 3 or tokens.shape[1] != c.K:
            ERROR(
                f"expected token batch (B, {c.K}, L), got {tuple(tokens.shape)}",
                GeometryError,
            )
        if tokens.shape[2] > c.max_len:
            ERROR(
                f"grid of {tokens.shape[2]} columns exceeds max_len"
                f" {c.max_len}",
                GeometryError,
            )
        if ((tokens < MASK) | (tokens >= c.vocab)).any():
            ERROR("token batch holds entries outside the vocabulary")

    def embed_columns(self, tokens, with_positions: bool = True):
        """summed per-codebook embeddings (+ positions): (B, L, D)"""
        t = tokens.masked_fill(tokens == MASK, self.cfg.vocab)
        x = sum(self.embed[k](t[:, k]) for k in range(self.cfg.K))
        if with_positions:
            x = x + self.pos[: t.shape[2]]
        return x

    def hidden_states(self, tokens, lora=None, with_positions=True) -> list:
        """[input embedding, block 1 output, ..., block N output]"""
        self._check(tokens)
        delta = None if lora is None else lora.delta_fn
        x = self.embed_columns(tokens, with_positions)
        states = [x]
        x = self.drop(x)
        for i, block in enumerate(self.blocks):
            x = block(x, None if delta is None else delta(i))
            states.append(x)
        return states

    def forward(self, tokens, lora=None):
        x = self.hidden_states(tokens, lora)[-1]
        x = self.norm(x)
        return torch.stack([head(x) for head in self.heads], dim=1)

    # -------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        tensors = {
            k: v.detach().cpu().float().numpy()
            for k, v in self.state_dict().items()
        }
        return Checkpoint('matm', tensors, {'config': asdict(self.cfg)})

    @property
    def sha256(self) -> str:
        return self.to_checkpoint().sha256

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> 'Matm':
        try:
            cfg = MatmConfig(**ckpt.meta['config'])
        except (KeyError, TypeError) as e:
            ERROR(f"matm checkpoint lacks a valid config: {e}", DataError)
        model = cls(cfg)
        state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.tensors.items()}
        try:
            model.load_state_dict(state)
        except RuntimeError as e:
            ERROR(f"matm checkpoint does not fit its config: {e}", GeometryError)
        return model.eval()

    def save(self, path) -> Path:
        return self.to_checkpoint().save(path)

    @classmethod
    def load(cls, path) -> 'Matm':
        return cls.from_checkpoint(Checkpoint.load(path, kind='matm'))


# -----------------------------------------------


class LoraAdapter(nn.Module):
    """Low-rank updates W + (alpha/r)*B@A on attention projections.

    A is (r, model_dim) and B is (model_dim, r), B starts at zero.
    """

    def __init__(self, cfg: MatmConfig, lora: LoraConfig = None):
        super().__init__()
        self.lora = LoraConfig() if lora is None else lora
        r = self.lora.rank
        if not 1 <= r <= cfg.model_dim:
            ERROR(
                f"LoRA rank {r} must be in [1, model_dim={cfg.model_dim}]",
                GeometryError,
            )
        bad = set(self.lora.targets) - {'q', 'k', 'v', 'o'}
        if bad:
            ERROR(f"unknown LoRA targets {sorted(bad)}", ConfigError)
        self.layers = cfg.layers
        self.model_dim = cfg.model_dim
        self.scale = self.lora.alpha / r
        self.base_sha256 = None

        g = torch.Generator().manual_seed(name_seed(f"{self.lora.seed}/lora"))
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for i in range(cfg.layers):
            for t in self.lora.targets:
                A = torch.empty(r, cfg.model_dim)
                bound = 1.0 / math.sqrt(cfg.model_dim)
                A.uniform_(-bound, bound, generator=g)
                self.A[f"{i}_{t}"] = nn.Parameter(A)
                self.B[f"{i}_{t}"] = nn.Parameter(torch.zeros(cfg.model_dim, r))

    def __repr__(self):
        return (
            f"<LoraAdapter at {hex(id(self))}: rank {self.lora.rank},"
            f" alpha {self.lora.alpha}, targets {tuple(self.lora.targets)}>"
        )

    def delta_fn(self, layer: int):
        def delta(name, x):
            key = f"{layer}_{name}"
            if key not in self.A:
                return 0.0
            return (x @ self.A[key].T) @ self.B[key].T * self.scale

        return delta

    def weight_delta(self, layer: int, name: str) -> torch.Tensor:
        key = f"{layer}_{name}"
        return self.scale * self.B[key] @ self.A[key]

    def check(self, model: Matm):
        c = model.cfg
        if (c.layers, c.model_dim) != (self.layers, self.model_dim):
            ERROR(
                f"adapter built for {self.layers} layers x dim"
                f" {self.model_dim}, model is {c.layers} x {c.model_dim}",
                GeometryError,
            )

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for key in self.A:
            tensors[f"A_{key}"] = self.A[key].detach().cpu().float().numpy()
            tensors[f"B_{key}"] = self.B[key].detach().cpu().float().numpy()
        meta = {
            'lora': asdict(self.lora),
            'layers': self.layers,
            'model_dim': self.model_dim,
            'base_sha256': self.base_sha256,
        }
        return Checkpoint('lora', tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> 'LoraAdapter':
        m = ckpt.meta
        lora = dict(m['lora'])
        lora['targets'] = tuple(lora['targets'])
        cfg = MatmConfig(
            layers=int(m['layers']),
            model_dim=int(m['model_dim']),
            heads=1,
        )
        self = cls(cfg, LoraConfig(**lora))
        with torch.no_grad():
            for key in self.A:
                self.A[key].copy_(torch.from_numpy(np.array(ckpt[f"A_{key}"])))
                self.B[key].copy_(torch.from_numpy(np.array(ckpt[f"B_{key}"])))
        self.base_sha256 = m.get('base_sha256')
        return self

    def save(self, path) -> Path:
        return self.to_checkpoint().save(path)

    @classmethod
    def load(cls, path, base: Matm = None) -> 'LoraAdapter':
        self = cls.from_checkpoint(Checkpoint.load(path, kind='lora'))
        if base is not None:
            self.check(base)
            if self.base_sha256 not in (None, base.sha256):
                WARNING(f"adapter '{path}' was trained on a different base model")
        return self


class LoraView:
    """A base model seen through an adapter. Base weights stay untouched."""

    def __init__(self, model: Matm, adapter: LoraAdapter):
        adapter.check(model)
        self.model = model
        self.adapter = adapter
        self.cfg = model.cfg

    def __repr__(self):
        return f"<LoraView of {self.model!r} with {self.adapter!r}>"

    def __call__(self, tokens):
        return self.model(tokens, lora=self.adapter)

    def hidden_states(self, tokens, with_positions=True):
        return self.model.hidden_states(tokens, self.adapter, with_positions)

    def eval(self):
        self.model.eval()
        self.adapter.eval()
        return self

    def train(self, mode=True):
        self.model.train(mode)
        self.adapter.train(mode)
        return self


def apply_lora(model: Matm, adapter: LoraAdapter) -> LoraView:
    return LoraView(model, adapter)


def merge_lora(model: Matm, adapter: LoraAdapter) -> Matm:
    """new model with the adapter folded into its projection weights"""
    adapter.check(model)
    merged = copy.deepcopy(model)
    with torch.no_grad():
        for i, block in enumerate(merged.blocks):
            for t in adapter.lora.targets:
                w = getattr(block.attn, t).weight
                w += adapter.weight_delta(i, t).to(w.dtype)
    return merged


class MatmFile(ReadWrite):
    """masked token model checkpoint directory"""

    @classmethod
    def read(cls, fpath, **kwargs):
        return Matm.load(fpath)

    @classmethod
    def write(cls, fpath, data: Matm, **kwargs):
        return data.save(fpath)


class LoraFile(ReadWrite):
    """low-rank adapter checkpoint directory"""

    @classmethod
    def read(cls, fpath, base=None, **kwargs):
        return LoraAdapter.load(fpath, base)

    @classmethod
    def write(cls, fpath, data: LoraAdapter, **kwargs):
        return data.save(fpath)


# -----------------------------------------------


def mask_random_columns(g: TokenGrid, rate: float, rng) -> tuple:
    """Mask ceil(rate*L) distinct columns. Returns (masked grid, columns)."""
    if not 0.0 <= rate <= 1.0:
        ERROR(f"mask rate must be in [0, 1], got {rate}")
    n = math.ceil(round(rate * g.L, 9))
    cols = np.sort(rng.choice(g.L, size=n, replace=False))
    tokens = g.tokens.copy()
    tokens[:, cols] = MASK
    return g.replace(tokens), cols


def _model_of(model):
    return model.model if isinstance(model, LoraView) else model


def _adapter_of(model):
    return model.adapter if isinstance(model, LoraView) else None


def forward(model, g: TokenGrid) -> np.ndarray:
    """Logits K x L x vocab for one grid, dropout disabled."""
    base = _model_of(model)
    was_training = base.training
    model.eval()
    with torch.no_grad():
        tokens = torch.from_numpy(np.array(g.tokens))[None]
        logits = model(tokens)[0]
    model.train(was_training)
    return logits.cpu().numpy().astype(np.float64)


def masked_cross_entropy(logits, targets, mask) -> tuple:
    """Summed cross entropy over masked positions and their count.

    logits (B, K, L, V), targets and mask (B, K, L).
    """
    n = int(mask.sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    ce = F.cross_entropy(logits[mask], targets[mask], reduction='sum')
    return ce, n


def _batch_loss(model, batch, tc: TrainConfig, rng, rate=None):
    """mean masked cross entropy of a list of grids, grouped by length"""
    masked, targets = [], []
    for g in batch:
        r = tc.draw_mask_rate(rng) if rate is None else rate
        m, _ = mask_random_columns(g, r, rng)
        masked.append(m.tokens)
        targets.append(g.tokens)

    by_len = pd.Series(range(len(batch))).groupby([t.shape[1] for t in masked])
    total, count = 0.0, 0
    for _, idx in by_len:
        idx = list(idx)
        x = torch.from_numpy(np.stack([masked[i] for i in idx]))
        y = torch.from_numpy(np.stack([targets[i] for i in idx]))
        ce, n = masked_cross_entropy(model(x), y, x == MASK)
        total, count = total + ce, count + n
    return total, count


def train_step(model, batch, optimizer, tc: TrainConfig, rng) -> float:
    """One AdamW update on masked positions. Returns the pre-update loss.

    A batch without a single masked position leaves the weights alone
    and returns NaN.
    """
    if not batch:
        ERROR("train_step needs a non-empty batch")
    model.train()
    total, count = _batch_loss(model, batch, tc, rng)
    if count == 0:
        WARNING("batch has no masked positions, step skipped")
        return float('nan')
    loss = total / count
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for grp in optimizer.param_groups for p in grp['params']]
    torch.nn.utils.clip_grad_norm_(params, tc.grad_clip_norm)
    optimizer.step()
    return float(loss.detach())


def eval_loss(model, grids, rate: float = 0.5, seed: int = 0) -> float:
    """held-out masked cross entropy at a fixed mask rate and seed"""
    if not grids:
        ERROR("eval_loss needs at least one grid")
    model.eval()
    rng = substream(seed, 'eval-mask')
    with torch.no_grad():
        total, count = _batch_loss(model, grids, TrainConfig(), rng, rate)
    return float(total) / max(count, 1)


class Trainer:
    """AdamW loop over a token-grid corpus.

    Trains the whole model, or only an adapter when one is given.
    """

    def __init__(self, model: Matm, tc: TrainConfig, adapter: LoraAdapter = None):
        self.tc = tc.validate()
        self.base = model
        self.adapter = adapter
        if adapter is None:
            self.model = model
            params = list(model.parameters())
        else:
            self.model = LoraView(model, adapter)
            params = list(adapter.parameters())
        self.optimizer = torch.optim.AdamW(
            params,
            lr=tc.lr,
            betas=tuple(tc.betas),
            weight_decay=tc.weight_decay,
        )
        self.rng = substream(tc.seed, 'train')
        # dropout draws from the global torch generator
        torch.manual_seed(name_seed(f"{tc.seed}/dropout"))
        self.history = []

    def __repr__(self):
        return f"<Trainer at {hex(id(self))}, {len(self.history)} steps>"

    def step(self, batch) -> float:
        loss = train_step(self.model, batch, self.optimizer, self.tc, self.rng)
        self.history.append(loss)
        return loss

    def fit(self, corpus, iterations: int = None) -> pd.DataFrame:
        corpus = list(corpus)
        if not corpus:
            ERROR("training corpus is empty")
        iterations = self.tc.iterations if iterations is None else iterations
        bs = min(self.tc.batch_size, len(corpus))
        for it in range(iterations):
            pick = self.rng.choice(len(corpus), size=bs, replace=False)
            loss = self.step([corpus[i] for i in pick])
            if self.tc.log_every and (it + 1) % self.tc.log_every == 0:
                recent = np.nanmean(self.history[-self.tc.log_every :])
                logger.info(f"step {it + 1}/{iterations}: loss {recent:.4f}")
        return self.curve

    @property
    def curve(self) -> pd.DataFrame:
        return pd.DataFrame(
            {'step': np.arange(1, len(self.history) + 1), 'loss': self.history}
        )


def finetune(
    model: Matm, corpus, lora: LoraConfig = None, tc: TrainConfig = None
) -> LoraAdapter:
    """Train a fresh adapter on corpus, base weights frozen.

    Chaining: merge_lora(model, phase1) then finetune the merged model.
    """
    corpus = list(corpus)
    if not corpus:
        ERROR("finetune corpus is empty")
    tc = TrainConfig() if tc is None else tc
    adapter = LoraAdapter(model.cfg, lora)
    adapter.base_sha256 = model.sha256

    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        Trainer(model, tc, adapter).fit(corpus)
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
    return adapter.eval()


def extract_embedding(
    model, g: TokenGrid, layer: int = None, with_positions: bool = True
) -> np.ndarray:
    """Mean over columns of the hidden states at a layer.

    Layer 0 is the input embedding, layer N the last block; the default
    is the last block.
    """
    base = _model_of(model)
    n = base.cfg.layers
    layer = n if layer is None else layer
    if not 0 <= layer <= n:
        ERROR(f"layer {layer} outside [0, {n}]", ConfigError)
    base.eval()
    with torch.no_grad():
        tokens = torch.from_numpy(np.array(g.tokens))[None]
        states = base.hidden_states(tokens, _adapter_of(model), with_positions)
    return states[layer][0].mean(dim=0).cpu().numpy().astype(np.float64)
