__all__ = [
    'ReadOnly',
    'ReadWrite',
    'Checkpoint',
]

import abc
import hashlib
import json
from pathlib import Path

import numpy as np

from . import ERROR, DataError, __version__, logger


class File(abc.ABC):
    """A file format known to the read()/write() registry."""

    @classmethod
    @abc.abstractmethod
    def read(cls, fpath, **kwargs):
        pass

    def __repr__(self):
        return f"<{self.__class__.__name__} File at {hex(id(self))}>"


class ReadOnly(File):
    @classmethod
    def write(cls, fpath, data, **kwargs):
        raise NotImplementedError(f"{cls.__name__} file format is ReadOnly")


class ReadWrite(File):
    @classmethod
    @abc.abstractmethod
    def write(cls, fpath, data, **kwargs):
        pass


# -----------------------------------------------


class Checkpoint:
    """Named tensors stored as raw blobs next to a JSON manifest.

    A checkpoint is a directory::

        manifest.json     # kind, version, meta, shapes, sha256
        <name>.f32        # little-endian float32, row-major
        <name>.i64        # little-endian int64, row-major

    """

    version = 1
    dtypes = {'f32': '<f4', 'i64': '<i8'}

    def __init__(self, kind: str, tensors: dict, meta: dict = None):
        self.kind = str(kind)
        self.meta = dict(meta or {})
        self.tensors = {}
        for name, a in tensors.items():
            a = np.asarray(a)
            ext = 'i64' if np.issubdtype(a.dtype, np.integer) else 'f32'
            self.tensors[name] = np.ascontiguousarray(a, self.dtypes[ext])

    def __repr__(self):
        names = list(self.tensors.keys())
        return f"<Checkpoint '{self.kind}' at {hex(id(self))}, {names}>"

    def __getitem__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            ERROR(
                f"tensor '{name}' not in '{self.kind}' checkpoint, "
                f"choose from {sorted(self.tensors)}",
                DataError,
            )

    @staticmethod
    def _ext(a: np.ndarray) -> str:
        return 'i64' if a.dtype == np.dtype('<i8') else 'f32'

    @property
    def sha256(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for name in sorted(self.tensors):
            a = self.tensors[name]
            h.update(f"{name}{a.shape}".encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name in sorted(self.tensors):
            a = self.tensors[name]
            fname = f"{name}.{self._ext(a)}"
            with open(path / fname, 'wb') as fh:
                a.tofile(fh)
            shapes[name] = {'file': fname, 'shape': list(a.shape)}
        manifest = {
            'kind': self.kind,
            'version': self.version,
            'package_version': __version__,
            'meta': self.meta,
            'tensors': shapes,
            'sha256': self.sha256,
        }
        with open(path / 'manifest.json', 'w') as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        logger.debug(f"saved {self!r} to '{path}'")
        return path

    @classmethod
    def load(cls, path, kind: str = None) -> 'Checkpoint':
        path = Path(path)
        try:
            with open(path / 'manifest.json') as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            ERROR(f"cannot read checkpoint '{path}': {e}", DataError)

        if kind is not None and manifest.get('kind') != kind:
            ERROR(
                f"'{path}' holds a '{manifest.get('kind')}' checkpoint, "
                f"expected '{kind}'",
                DataError,
            )

        tensors = {}
        for name, info in manifest['tensors'].items():
            ext = info['file'].rsplit('.', 1)[-1]
            shape = tuple(info['shape'])
            a = np.fromfile(path / info['file'], dtype=cls.dtypes[ext])
            if a.size != int(np.prod(shape)):
                ERROR(
                    f"tensor '{name}' in '{path}' has {a.size} values, "
                    f"expected shape {shape}",
                    DataError,
                )
            tensors[name] = a.reshape(shape)

        self = cls(manifest['kind'], tensors, manifest.get('meta'))
        if self.sha256 != manifest.get('sha256'):
            ERROR(f"checkpoint '{path}' failed its content hash", DataError)
        return self
