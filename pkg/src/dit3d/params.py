"""Named parameter storage with a trainable/frozen partition."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor, matmul

GAMMA_SUFFIX = ".gamma"


class ParamStore:
    """Ordered ``name -> Tensor`` map.

    Names are dotted paths (``blocks.3.attn.qkv.weight``). Every entry is
    either trainable or frozen; entries ending in ``.gamma`` are scale factors
    multiplied onto the output of the affine layer sharing their prefix.
    """

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = (), trainable: Iterable[str] | None = None):
        self.entries: OrderedDict[str, Tensor] = OrderedDict(entries)
        self.trainable: set[str] = set(self.entries) if trainable is None else set(trainable)
        unknown = self.trainable - set(self.entries)
        if unknown:
            raise KeyError(f"trainable names not in store: {sorted(unknown)[:5]}")

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, name: str, default=None):
        return self.entries.get(name, default)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> None:
        self.entries[name] = tensor
        if trainable:
            self.trainable.add(name)
        else:
            self.trainable.discard(name)

    def frozen(self) -> set[str]:
        return set(self.entries) - self.trainable

    @property
    def gammas(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.entries.items() if n.endswith(GAMMA_SUFFIX)}

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.entries)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)[:5]}")
        self.trainable = names

    def trainable_tensors(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.entries.items() if n in self.trainable]

    def count(self, trainable_only: bool = False) -> int:
        return int(sum(t.size for n, t in self.entries.items() if not trainable_only or n in self.trainable))

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def copy(self) -> "ParamStore":
        return ParamStore(((n, Tensor(t.data.copy(), dtype=t.data.dtype)) for n, t in self.entries.items()),
                          trainable=self.trainable)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}


class Scope:
    """Prefix view into a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _key(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._key(name)]

    def __contains__(self, name: str) -> bool:
        return self._key(name) in self.store

    def get(self, name: str, default=None):
        return self.store.get(self._key(name), default)

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._key(name))


def linear(x: Tensor, p: Scope) -> Tensor:
    """``gamma * (x @ weight) + bias``; ``gamma`` and ``bias`` are optional."""
    y = matmul(x, p["weight"])
    gamma = p.get("gamma")
    if gamma is not None:
        y = y * gamma
    bias = p.get("bias")
    if bias is not None:
        y = y + bias
    return y
