import numpy as np
import pytest
import torch

import clicktok.func as func


def test_name_seed_stable():
    assert func.name_seed('corpus') == func.name_seed('corpus')
    assert func.name_seed('corpus') != func.name_seed('decode')
    assert 0 <= func.name_seed('x') < 2**63
    assert func.name_seed(7) == func.name_seed('7')


@pytest.mark.parametrize(
    'a, b',
    [
        ((0, 'labels'), (1, 'labels')),
        ((0, 'labels'), (0, 'split')),
        ((0, 'labels', 1), (0, 'labels', 2)),
        ((0, 'labels', 1), (0, 'labels')),
    ],
)
def test_substream_independent(a, b):
    x = func.substream(*a).standard_normal(64)
    y = func.substream(*b).standard_normal(64)
    assert not np.allclose(x, y)


def test_substream_reproducible():
    x = func.substream(3, 'decode', 5).integers(0, 1 << 30, 16)
    y = func.substream(3, 'decode', 5).integers(0, 1 << 30, 16)
    assert np.array_equal(x, y)


def test_torch_generator():
    a = torch.rand(8, generator=func.torch_generator(2, 'mask'))
    b = torch.rand(8, generator=func.torch_generator(2, 'mask'))
    c = torch.rand(8, generator=func.torch_generator(2, 'dropout'))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sha256_arrays():
    a = np.arange(6, dtype=np.float32)
    h = func.sha256_arrays([a])
    assert h == func.sha256_arrays([a.copy()])
    assert len(h) == 64
    # dtype, shape and order all count
    assert h != func.sha256_arrays([a.astype(np.float64)])
    assert h != func.sha256_arrays([a.reshape(2, 3)])
    assert func.sha256_arrays([a, a[:2]]) != func.sha256_arrays([a[:2], a])
    # non-contiguous views hash like their copies
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    assert func.sha256_arrays([b[:, 1]]) == func.sha256_arrays([b[:, 1].copy()])
