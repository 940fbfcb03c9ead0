"""ParamSet helpers: hierarchical string keys mapped to numpy arrays."""
from __future__ import annotations

import hashlib
from collections.abc import Mapping
from typing import Dict, Iterator, NamedTuple

import numpy as np

ParamSet = Dict[str, np.ndarray]

# Parameter kinds drive initialisation and counting.
CONV, LINEAR, BIAS, GAMMA, BETA, MEAN, VAR = "conv", "linear", "bias", "gamma", "beta", "mean", "var"
NON_LEARNABLE = {MEAN, VAR}


class ParamDecl(NamedTuple):
    shape: tuple[int, ...]
    kind: str


class Scope(Mapping):
    """Read-only view of a ParamSet under a key prefix."""

    __slots__ = ("_base", "_prefix")

    def __init__(self, base: Mapping, prefix: str):
        if isinstance(base, Scope):
            prefix = base._prefix + prefix
            base = base._base
        self._base = base
        self._prefix = prefix

    def __getitem__(self, key):
        return self._base[self._prefix + key]

    def __contains__(self, key):
        return (self._prefix + key) in self._base

    def __iter__(self) -> Iterator[str]:
        n = len(self._prefix)
        return (k[n:] for k in self._base if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)


def full_key(params: Mapping, key: str) -> str:
    return params._prefix + key if isinstance(params, Scope) else key


def scope(params: Mapping, prefix: str) -> Scope:
    if prefix and not prefix.endswith("."):
        prefix += "."
    return Scope(params, prefix)


def init_from_decls(decls: Mapping[str, ParamDecl], rng: np.random.Generator) -> ParamSet:
    """Fan-in scaled normal weights, unit gamma, zero beta/bias, identity BN statistics."""
    out: ParamSet = {}
    for name, (shape, kind) in decls.items():
        if kind in (CONV, LINEAR):
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * np.sqrt(1.0 / max(fan_in, 1))
            out[name] = w.astype(np.float32)
        elif kind in (GAMMA, VAR):
            out[name] = np.ones(shape, dtype=np.float32)
        else:
            out[name] = np.zeros(shape, dtype=np.float32)
    return out


def cast_params(params: Mapping, dtype) -> ParamSet:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def checksum(params: Mapping) -> str:
    h = hashlib.sha256()
    for k in params:
        v = np.ascontiguousarray(params[k])
        h.update(k.encode())
        h.update(str(v.dtype).encode())
        h.update(str(v.shape).encode())
        h.update(v.tobytes())
    return h.hexdigest()
