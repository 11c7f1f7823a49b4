"""Lightweight parameter-owning module base.

Parameters are ``requires_grad`` tensors stored as attributes. Children are
other modules, either as attributes or inside list attributes; list children
get hierarchical names like ``blocks`` -> ``block01``, ``block02`` (1-based),
which is also the naming used by checkpoint containers.
"""

from __future__ import annotations

import numpy as np

from .engine import ShapeError, Tensor, zero_grads


class Module:
    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- parameter walking ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: list) -> None:
        for attr, val in vars(self).items():
            if attr.startswith("_"):
                continue
            name = attr if not prefix else f"{prefix}.{attr}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((name, val))
            elif isinstance(val, Module):
                val._collect(name, out)
            elif isinstance(val, (list, tuple)):
                stem = attr[:-1] if attr.endswith("s") else attr
                base = stem if not prefix else f"{prefix}.{stem}"
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._collect(f"{base}{i + 1:02d}", out)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grads(self) -> None:
        zero_grads(self.parameters())

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        """Replace every named parameter from ``arrays`` (names must match exactly)."""
        slots = {}
        self._collect_slots("", slots)
        missing = sorted(set(slots) - set(arrays))
        extra = sorted(set(arrays) - set(slots))
        if missing or extra:
            raise ShapeError(
                f"parameter set mismatch: missing {missing[:4]}..., unexpected {extra[:4]}..."
                if len(missing) + len(extra) > 8
                else f"parameter set mismatch: missing {missing}, unexpected {extra}"
            )
        for name, (owner, attr) in slots.items():
            current: Tensor = getattr(owner, attr)
            arr = arrays[name]
            if tuple(arr.shape) != current.shape:
                raise ShapeError(
                    f"parameter {name}: stored shape {tuple(arr.shape)} != model shape {current.shape}"
                )
            setattr(owner, attr, Tensor(arr.astype(current.data.dtype), requires_grad=True))

    def _collect_slots(self, prefix: str, out: dict) -> None:
        for attr, val in vars(self).items():
            if attr.startswith("_"):
                continue
            name = attr if not prefix else f"{prefix}.{attr}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = (self, attr)
            elif isinstance(val, Module):
                val._collect_slots(name, out)
            elif isinstance(val, (list, tuple)):
                stem = attr[:-1] if attr.endswith("s") else attr
                base = stem if not prefix else f"{prefix}.{stem}"
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._collect_slots(f"{base}{i + 1:02d}", out)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.named_parameters()}


# -- init helpers (prng=None builds zero weights, e.g. for parameter counting) --


def child_rng(prng, *labels):
    return None if prng is None else prng.split(*labels)


def init_weight(prng, shape, dtype, std: float = 0.02) -> Tensor:
    """Default learnable-weight init: truncated normal, clipped at 2 sigma."""
    if prng is None:
        return Tensor.zeros(shape, dtype=dtype, requires_grad=True)
    return Tensor(prng.trunc_normal(shape, std=std, dtype=dtype), requires_grad=True)


def init_normal(prng, shape, dtype, std: float) -> Tensor:
    if prng is None:
        return Tensor.zeros(shape, dtype=dtype, requires_grad=True)
    return Tensor(prng.normal(shape, std=std, dtype=dtype), requires_grad=True)


def init_zeros(shape, dtype) -> Tensor:
    return Tensor.zeros(shape, dtype=dtype, requires_grad=True)


def init_ones(shape, dtype) -> Tensor:
    return Tensor.ones(shape, dtype=dtype, requires_grad=True)
