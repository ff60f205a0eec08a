"""Named parameter store and its versioned binary container.

Container layout (all integers little-endian):

    8 bytes   magic  b"SCNLOOP1"
    uint16    format version (currently 1)
    uint32    parameter count
    per parameter, in insertion order:
        uint16    name length in bytes
        bytes     UTF-8 name
        uint8     ndim
        uint32    each dimension
        float64   values, row-major, little-endian ('<f8')
"""

import struct
from collections.abc import Iterable, Iterator
from pathlib import Path

import numpy as np

from scanloop.common.exceptions import CheckpointError, ContractError
from scanloop.compute.tensor import Tensor

MAGIC = b"SCNLOOP1"
FORMAT_VERSION = 1


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(1, fan_in)), size=shape)


def glorot_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    return rng.normal(0.0, np.sqrt(2.0 / max(1, fan_in + fan_out)), size=shape)


class ParameterStore:
    """Owns every learned tensor, keyed by dotted name (e.g. ``backbone.level0.W``)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    # ── Registration and access ──

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        tensor = Tensor(values, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def replace(self, name: str, values: np.ndarray) -> Tensor:
        """Swap in new values for ``name``; tensors themselves stay immutable."""
        old = self[name]
        values = np.asarray(values, dtype=np.float64)
        if values.shape != old.shape:
            raise ContractError(f"{name}: new shape {values.shape} != {old.shape}")
        tensor = Tensor(values, requires_grad=name not in self._frozen, name=name)
        self._params[name] = tensor
        return tensor

    # ── Freezing ──

    def freeze(self, prefixes: Iterable[str]) -> None:
        prefixes = tuple(prefixes)
        for name in self._params:
            if name.startswith(prefixes):
                self._frozen.add(name)
                self._params[name].requires_grad = False
                self._params[name].grad = None

    def freeze_all_except(self, prefixes: Iterable[str]) -> None:
        keep = tuple(prefixes)
        self.freeze(n for n in self._params if not n.startswith(keep))

    def unfreeze_all(self) -> None:
        for name in self._frozen:
            self._params[name].requires_grad = True
        self._frozen.clear()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self._frozen]

    # ── Gradients and snapshots ──

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for tensor in self._params.values():
            if tensor.grad is not None:
                total += float(np.sum(tensor.grad * tensor.grad))
        return float(np.sqrt(total))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_snapshot(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, values in snapshot.items():
            if name in self._params:
                self.replace(name, values)

    # ── Container IO ──

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(self._params))]
        for name, tensor in self._params.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", tensor.ndim))
            chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        if len(blob) < len(MAGIC) + 6 or blob[: len(MAGIC)] != MAGIC:
            raise CheckpointError("missing container magic")
        offset = len(MAGIC)
        version, count = struct.unpack_from("<HI", blob, offset)
        offset += 6
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        store = cls()
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, offset)
                offset += 2
                name = blob[offset : offset + name_len].decode("utf-8")
                offset += name_len
                (ndim,) = struct.unpack_from("<B", blob, offset)
                offset += 1
                shape = struct.unpack_from(f"<{ndim}I", blob, offset)
                offset += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
                offset += 8 * size
                store.add(name, values.reshape(shape).astype(np.float64))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"truncated or corrupt container at byte {offset}") from exc
        if offset != len(blob):
            raise CheckpointError(f"{len(blob) - offset} trailing bytes after parameter table")
        return store

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint {path} does not exist")
        return cls.from_bytes(path.read_bytes())
