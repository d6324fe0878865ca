__all__ = ['name_seed', 'substream', 'torch_generator', 'sha256_arrays']

import hashlib

import numpy as np


def name_seed(name: str) -> int:
    """stable 63-bit integer for a stream name"""
    digest = hashlib.sha256(str(name).encode()).digest()
    return int.from_bytes(digest[:8], 'little') >> 1


def substream(seed: int, name: str, *counters) -> np.random.Generator:
    """Named, independent random stream derived from a master seed.

    Extra integer counters give per-item streams, e.g.
    substream(seed, 'corpus', index).
    """
    entropy = [int(seed), name_seed(name), *(int(c) for c in counters)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_generator(seed: int, name: str):
    import torch

    g = torch.Generator()
    g.manual_seed(name_seed(f"{seed}/{name}"))
    return g


def sha256_arrays(arrays) -> str:
    """content hash of an ordered collection of arrays"""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(f"{a.dtype.str}{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()
