"""Named model parameters: seeded initialization and binary persistence.

Weight files carry the magic ``NNFC``, a version, the parameter count, and
one record per parameter (length-prefixed name, rank, dims, float32 data),
all little-endian.  Round-trips are bit-exact for float32 stores.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHTS_MAGIC = b"NNFC"
WEIGHTS_VERSION = 1

INIT_STD = 0.02


class FormatError(RuntimeError):
    """A binary artifact failed its magic/version/layout checks."""


class ParamStore:
    """Ordered mapping of parameter names to gradient-carrying tensors."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self._rng = rng
        self.dtype = dtype
        self._params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def weight(self, name: str, shape: tuple[int, ...],
               std: float = INIT_STD) -> Tensor:
        return self._register(name, self._rng.normal(0.0, std, size=shape))

    def he_weight(self, name: str, shape: tuple[int, ...]) -> Tensor:
        """Fan-in-scaled init for conv/relu stacks trained in isolation."""
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        return self.weight(name, shape, std=float(np.sqrt(2.0 / fan_in)))

    def bias(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ln(self, name: str, dim: int) -> None:
        self._register(f"{name}.g", np.ones(dim))
        self._register(f"{name}.b", np.zeros(dim))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def freeze(self, prefix: str) -> None:
        """Stop recording gradients for every parameter under ``prefix``."""
        for k, v in self._params.items():
            if k.startswith(prefix):
                v.requires_grad = False
                v.grad = None

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(struct.pack("<I", WEIGHTS_VERSION))
            fh.write(struct.pack("<I", len(self._params)))
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                dims = t.data.shape
                fh.write(struct.pack("<B", len(dims)))
                for d in dims:
                    fh.write(struct.pack("<I", d))
                fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    def load(self, path: str | Path) -> None:
        """Fill the already-built store from a weights file.

        The file must describe exactly the parameters this store declares.
        """
        loaded = read_weights(path)
        missing = set(self._params) - set(loaded)
        extra = set(loaded) - set(self._params)
        if missing or extra:
            raise FormatError(
                f"weights file does not match the model: missing {sorted(missing)[:4]}, "
                f"unexpected {sorted(extra)[:4]}")
        for name, arr in loaded.items():
            t = self._params[name]
            if arr.shape != t.data.shape:
                raise FormatError(
                    f"parameter {name!r}: file shape {arr.shape} vs model {t.data.shape}")
            t.data = arr.astype(self.dtype)


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a weights file into name -> float32 array."""
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return out
